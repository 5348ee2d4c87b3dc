// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "slotmerge/tensor.hpp"

namespace slotmerge {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_leaf;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// Central finite-difference check of a scalar loss against the tape
// gradients. `build_loss` must be a deterministic pure function of the leaf
// values (re-built per evaluation). Relative error uses the denominator
// max(|analytic|, |numeric|, 1e-8). Throws CalibrationError if the loss is
// not finite at any evaluation point.
GradCheckReport gradient_check(const std::function<Tensor(Graph&)>& build_loss,
                               const std::vector<std::pair<std::string, Tensor>>& leaves,
                               double step);

}  // namespace slotmerge
