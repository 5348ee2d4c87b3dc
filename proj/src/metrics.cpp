// SPDX-License-Identifier: Apache-2.0
#include "slotmerge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace slotmerge {

LabelGrid slots_to_masks(const std::vector<double>& distribution,
                         const std::vector<bool>& active, std::size_t height,
                         std::size_t width, std::size_t k) {
    const std::size_t n = height * width;
    if (distribution.size() != n * k)
        throw DimensionError("slots_to_masks: distribution size mismatch");
    std::vector<std::size_t> active_idx;
    for (std::size_t s = 0; s < k; ++s)
        if (s < active.size() && active[s]) active_idx.push_back(s);
    if (active_idx.empty()) throw StateError("slots_to_masks: no active slots");

    // dense renumbering: active slot with rank r -> label r+1
    std::vector<std::uint32_t> slot_label(k, 0);
    for (std::size_t r = 0; r < active_idx.size(); ++r)
        slot_label[active_idx[r]] = static_cast<std::uint32_t>(r + 1);

    LabelGrid grid;
    grid.height = height;
    grid.width = width;
    grid.labels.resize(n);
    for (std::size_t p = 0; p < n; ++p) {
        std::size_t best = active_idx[0];
        double best_v = distribution[p * k + best];
        for (std::size_t r = 1; r < active_idx.size(); ++r) {
            const std::size_t s = active_idx[r];
            const double v = distribution[p * k + s];
            if (v > best_v) {
                best_v = v;
                best = s;
            }
        }
        grid.labels[p] = slot_label[best];
    }
    return grid;
}

double iou_binary(const std::vector<bool>& a, const std::vector<bool>& b) {
    if (a.size() != b.size()) throw DimensionError("iou_binary: shape mismatch");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        inter += (a[i] && b[i]) ? 1 : 0;
        uni += (a[i] || b[i]) ? 1 : 0;
    }
    if (uni == 0) return 0.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

// Masks per nonzero label, with ignored gt pixels removed from every mask.
std::map<std::uint32_t, std::vector<bool>> masks_by_label(
    const LabelGrid& grid, const std::vector<bool>& valid) {
    std::map<std::uint32_t, std::vector<bool>> masks;
    for (std::size_t p = 0; p < grid.size(); ++p) {
        const std::uint32_t label = grid.labels[p];
        if (label == 0 || !valid[p]) continue;
        auto [it, inserted] = masks.try_emplace(label);
        if (inserted) it->second.assign(grid.size(), false);
        it->second[p] = true;
    }
    return masks;
}

std::vector<bool> valid_pixels(const LabelGrid& gt, const std::set<std::uint32_t>& ignore) {
    std::vector<bool> valid(gt.size(), true);
    if (!ignore.empty())
        for (std::size_t p = 0; p < gt.size(); ++p)
            if (ignore.count(gt.labels[p])) valid[p] = false;
    return valid;
}

}  // namespace

std::optional<double> mean_best_overlap(const LabelGrid& pred, const LabelGrid& gt,
                                        const std::set<std::uint32_t>& ignore) {
    if (pred.height != gt.height || pred.width != gt.width)
        throw DimensionError("mean_best_overlap: shape mismatch");
    const std::vector<bool> valid = valid_pixels(gt, ignore);
    auto gt_masks = masks_by_label(gt, valid);
    for (std::uint32_t ig : ignore) gt_masks.erase(ig);
    if (gt_masks.empty()) return std::nullopt;
    auto pred_masks = masks_by_label(pred, valid);

    double total = 0.0;
    for (const auto& [gl, gmask] : gt_masks) {
        double best = 0.0;
        for (const auto& [pl, pmask] : pred_masks)
            best = std::max(best, iou_binary(pmask, gmask));
        total += best;
    }
    return total / static_cast<double>(gt_masks.size());
}

Assignment hungarian(const std::vector<std::vector<double>>& cost) {
    const std::size_t n_rows = cost.size();
    if (n_rows == 0 || cost[0].empty())
        throw UsageError("hungarian: empty cost matrix");
    const std::size_t n_cols = cost[0].size();
    for (const auto& row : cost) {
        if (row.size() != n_cols) throw DimensionError("hungarian: ragged cost matrix");
        for (double c : row)
            if (!std::isfinite(c)) throw DataError("hungarian: non-finite cost");
    }

    // Square the matrix by padding with a large constant; constant rows and
    // columns do not change which real assignment is optimal.
    const std::size_t n = std::max(n_rows, n_cols);
    auto padded = [&](std::size_t i, std::size_t j) {
        return (i < n_rows && j < n_cols) ? cost[i][j] : kHungarianPadCost;
    };

    // Potentials algorithm (Jonker-Volgenant style), O(n^3); 1-based arrays.
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        match[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<bool> used(n + 1, false);
        do {
            used[j0] = true;
            const std::size_t i0 = match[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = padded(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            match[j0] = match[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    Assignment result;
    for (std::size_t j = 1; j <= n; ++j) {
        const std::size_t i = match[j];
        if (i >= 1 && i - 1 < n_rows && j - 1 < n_cols) {
            result.pairs.emplace_back(i - 1, j - 1);
            result.total_cost += cost[i - 1][j - 1];
        }
    }
    std::sort(result.pairs.begin(), result.pairs.end());
    return result;
}

std::optional<double> matched_miou(const LabelGrid& pred, const LabelGrid& gt,
                                   const std::set<std::uint32_t>& ignore) {
    if (pred.height != gt.height || pred.width != gt.width)
        throw DimensionError("matched_miou: shape mismatch");
    const std::vector<bool> valid = valid_pixels(gt, ignore);
    auto gt_masks = masks_by_label(gt, valid);
    for (std::uint32_t ig : ignore) gt_masks.erase(ig);
    if (gt_masks.empty()) return std::nullopt;
    auto pred_masks = masks_by_label(pred, valid);
    if (pred_masks.empty()) return 0.0;

    std::vector<const std::vector<bool>*> preds, gts;
    for (const auto& [l, m] : pred_masks) preds.push_back(&m);
    for (const auto& [l, m] : gt_masks) gts.push_back(&m);

    std::vector<std::vector<double>> cost(preds.size(), std::vector<double>(gts.size()));
    for (std::size_t i = 0; i < preds.size(); ++i)
        for (std::size_t j = 0; j < gts.size(); ++j)
            cost[i][j] = -iou_binary(*preds[i], *gts[j]);

    const Assignment assignment = hungarian(cost);
    double total = 0.0;
    for (const auto& [pi, gj] : assignment.pairs) total += -cost[pi][gj];
    return total / static_cast<double>(gts.size());
}

}  // namespace slotmerge
