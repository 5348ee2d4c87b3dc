// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container: a textual header listing (name, shape, byte offset)
// per tensor, then a payload of little-endian f64 values. Exact layout in
// docs/file-formats.md. Writes are atomic (temp file + rename).
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "slotmerge/tensor.hpp"

namespace slotmerge {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_checkpoint(const std::string& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::string& path);

}  // namespace slotmerge
