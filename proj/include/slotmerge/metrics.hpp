// SPDX-License-Identifier: Apache-2.0
//
// Segmentation metrics: instance/class Mean Best Overlap, Hungarian-matched
// mean IoU, and hard-mask extraction from per-location slot distributions.
#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <vector>

#include "slotmerge/errors.hpp"

namespace slotmerge {

struct LabelGrid {
    std::size_t height = 0, width = 0;
    std::vector<std::uint32_t> labels;  // row-major; 0 = background/ignore

    std::size_t size() const { return labels.size(); }
};

// Per-pixel argmax over active slots; labels renumbered densely from 1 in
// slot-index order. `distribution` is (height*width) x k row-major. Ties go
// to the lowest slot index.
LabelGrid slots_to_masks(const std::vector<double>& distribution,
                         const std::vector<bool>& active, std::size_t height,
                         std::size_t width, std::size_t k);

// Binary IoU of two same-size masks; 0 when the union is empty.
double iou_binary(const std::vector<bool>& a, const std::vector<bool>& b);

// Mean over ground-truth masks of the best-overlapping predicted mask's IoU.
// Pixels whose gt label is in `ignore` are excluded from both masks.
// Returns nullopt when the ground truth has no masks.
std::optional<double> mean_best_overlap(const LabelGrid& pred, const LabelGrid& gt,
                                        const std::set<std::uint32_t>& ignore = {});

struct Assignment {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (row, col)
    double total_cost = 0.0;
};

// Minimum-cost one-to-one assignment of min(R,C) pairs. Rectangular inputs
// are padded internally with kHungarianPadCost.
inline constexpr double kHungarianPadCost = 1e9;
Assignment hungarian(const std::vector<std::vector<double>>& cost);

// Hungarian-matched mean IoU over gt masks; unmatched gt masks contribute 0
// and the denominator is the number of gt masks. nullopt when no gt masks.
std::optional<double> matched_miou(const LabelGrid& pred, const LabelGrid& gt,
                                   const std::set<std::uint32_t>& ignore = {});

}  // namespace slotmerge
