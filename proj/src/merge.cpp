// SPDX-License-Identifier: Apache-2.0
#include "slotmerge/merge.hpp"

#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

namespace slotmerge {

double soft_iou(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw DimensionError("soft_iou: length mismatch");
    double inter = 0.0, uni = 0.0;
    for (std::size_t n = 0; n < p.size(); ++n) {
        const double pq = p[n] * q[n];
        inter += pq;
        uni += p[n] + q[n] - pq;
    }
    if (uni < 1e-12) return 0.0;  // two empty maps do not compete
    return inter / uni;
}

double slot_mass(const Tensor& attention, const std::vector<bool>& active, std::size_t i) {
    if (i >= active.size() || !active[i])
        throw UsageError("slot_mass: slot is not active");
    const std::size_t rows = attention.rows(), cols = attention.cols();
    double mass = 0.0;
    for (std::size_t n = 0; n < rows; ++n) mass += attention.at(n * cols + i);
    return mass;
}

std::pair<double, double> merge_weights(double alpha_i, double alpha_j) {
    if (alpha_i < 0.0 || alpha_j < 0.0)
        throw DataError("merge_weights: negative attention mass");
    const double total = alpha_i + alpha_j;
    if (total < 1e-12) return {0.5, 0.5};
    const double wi = alpha_i / total;
    return {wi, 1.0 - wi};
}

double OverlapState::iou(std::size_t i, std::size_t j) const {
    const double inter_ij = intersection(i, j);
    const double denom = mass[i] + mass[j] - inter_ij;
    if (denom < 1e-12) return 0.0;
    return inter_ij / denom;
}

OverlapState build_overlaps(const Tensor& attention, const std::vector<bool>& active,
                            MergeCounters* counters) {
    const std::size_t rows = attention.rows(), k = attention.cols();
    if (active.size() != k) throw DimensionError("build_overlaps: mask length mismatch");
    OverlapState state;
    state.k = k;
    state.active = active;
    state.inter.assign(k * k, 0.0);
    state.mass.assign(k, 0.0);
    const double* a = attention.values().data();
    for (std::size_t i = 0; i < k; ++i) {
        if (!active[i]) continue;
        double mass = 0.0;
        for (std::size_t n = 0; n < rows; ++n) mass += a[n * k + i];
        state.mass[i] = mass;
    }
    for (std::size_t i = 0; i < k; ++i) {
        if (!active[i]) continue;
        for (std::size_t j = i + 1; j < k; ++j) {
            if (!active[j]) continue;
            double inter = 0.0;
            for (std::size_t n = 0; n < rows; ++n) inter += a[n * k + i] * a[n * k + j];
            state.inter[i * k + j] = inter;
            state.inter[j * k + i] = inter;
            if (counters) ++counters->pair_evaluations;
        }
    }
    return state;
}

MergePairResult merge_pair(Graph& graph, const SlotState& state, const Tensor& attention,
                           std::size_t i, std::size_t j, const MergePolicyConfig& cfg) {
    const std::size_t k = state.slots.rows();
    if (i == j) throw UsageError("merge_pair: identical operands");
    if (i >= k || j >= k || !state.active[i] || !state.active[j])
        throw UsageError("merge_pair: inactive operand");

    const std::size_t rows = attention.rows(), cols = attention.cols();

    Tensor col_i = graph.slice(attention, 1, i, 1);  // N x 1
    Tensor col_j = graph.slice(attention, 1, j, 1);

    Tensor slot_i = graph.slice(state.slots, 0, i, 1);  // 1 x d
    Tensor slot_j = graph.slice(state.slots, 0, j, 1);

    const double alpha_i = slot_mass(attention, state.active, i);
    const double alpha_j = slot_mass(attention, state.active, j);
    const auto [wi_value, wj_value] = merge_weights(alpha_i, alpha_j);

    Tensor merged_row;
    MergeStep step;
    step.survivor = i;
    step.absorbed = j;
    step.w_survivor = wi_value;
    step.w_absorbed = wj_value;

    if (cfg.detach_gradients) {
        // Ablation: weights become constants and the absorbed slot's
        // contribution is severed from the backward graph.
        Tensor wi = Tensor::scalar(wi_value);
        Tensor wj = Tensor::scalar(wj_value);
        merged_row = graph.add(graph.mul_scalar(slot_i, wi),
                               graph.mul_scalar(graph.detach(slot_j), wj));
    } else if (alpha_i + alpha_j < 1e-12) {
        // Degenerate pair: equal constant weights, no gradient through w.
        merged_row = graph.add(graph.scale(slot_i, 0.5), graph.scale(slot_j, 0.5));
    } else {
        Tensor mass_i = graph.sum_all(col_i);
        Tensor mass_j = graph.sum_all(col_j);
        Tensor total = graph.add(mass_i, mass_j);
        Tensor wi = graph.div(mass_i, total, 0.0);
        Tensor wj = graph.sub(Tensor::scalar(1.0), wi);
        merged_row = graph.add(graph.mul_scalar(slot_i, wi), graph.mul_scalar(slot_j, wj));
    }

    Tensor zero_row = Tensor::zeros({state.slots.cols()});
    Tensor slots_out = graph.replace_row(
        graph.replace_row(state.slots, i, merged_row), j, zero_row);

    Tensor zero_col = Tensor::zeros({rows});
    Tensor attention_out;
    if (cfg.update_attention) {
        Tensor merged_col = graph.add(col_i, col_j);
        attention_out = graph.replace_col(
            graph.replace_col(attention, i, merged_col), j, zero_col);
    } else {
        attention_out = graph.replace_col(attention, j, zero_col);
    }
    (void)cols;

    return {std::move(slots_out), std::move(attention_out), step};
}

namespace {

struct ArgmaxPair {
    bool found = false;
    std::size_t i = 0, j = 0;
    double iou = -1.0;
};

// Largest IoU over active pairs; ties broken toward the smallest (i, j) in
// lexicographic order, which the ascending scan yields for free.
ArgmaxPair argmax_pair(const OverlapState& overlaps) {
    ArgmaxPair best;
    for (std::size_t i = 0; i < overlaps.k; ++i) {
        if (!overlaps.active[i]) continue;
        for (std::size_t j = i + 1; j < overlaps.k; ++j) {
            if (!overlaps.active[j]) continue;
            const double iou = overlaps.iou(i, j);
            if (!best.found || iou > best.iou) {
                best.found = true;
                best.i = i;
                best.j = j;
                best.iou = iou;
            }
        }
    }
    return best;
}

}  // namespace

MergePolicyResult merge_policy(Graph& graph, SlotState state, Tensor attention,
                               const MergePolicyConfig& cfg, MergePolicyKind kind) {
    MergePolicyResult result;
    result.counters = MergeCounters{};

    OverlapState overlaps = build_overlaps(attention, state.active, &result.counters);
    while (state.active_count() > 1) {
        const ArgmaxPair best = argmax_pair(overlaps);
        if (!best.found || best.iou <= cfg.tau) break;

        MergePairResult merged = merge_pair(graph, state, attention, best.i, best.j, cfg);
        merged.step.iou = best.iou;
        result.trace.steps.push_back(merged.step);
        state.slots = std::move(merged.slots);
        state.active[best.j] = false;
        attention = std::move(merged.attention);

        if (kind == MergePolicyKind::kNaive) {
            overlaps = build_overlaps(attention, state.active, &result.counters);
        } else {
            // After the column addition A_:,i += A_:,j the new intersections
            // and mass of the survivor are exact sums of the old ones. With
            // the attention update ablated the survivor column is unchanged
            // and only the absorbed slot is retired.
            if (cfg.update_attention) {
                overlaps.mass[best.i] += overlaps.mass[best.j];
                for (std::size_t m = 0; m < overlaps.k; ++m) {
                    if (m == best.i || m == best.j || !overlaps.active[m]) continue;
                    const double add = overlaps.inter[best.j * overlaps.k + m];
                    overlaps.inter[best.i * overlaps.k + m] += add;
                    overlaps.inter[m * overlaps.k + best.i] += add;
                    ++result.counters.incident_updates;
                }
            }
            overlaps.active[best.j] = false;
            overlaps.mass[best.j] = 0.0;
            for (std::size_t m = 0; m < overlaps.k; ++m) {
                overlaps.inter[best.j * overlaps.k + m] = 0.0;
                overlaps.inter[m * overlaps.k + best.j] = 0.0;
            }
        }
    }

    result.trace.active_after = state.active_count();
    result.state = std::move(state);
    result.attention = std::move(attention);
    return result;
}

std::vector<MergePolicyResult> batch_merge(Graph& graph,
                                           std::vector<std::pair<SlotState, Tensor>> batch,
                                           const MergePolicyConfig& cfg,
                                           MergePolicyKind kind) {
    std::vector<MergePolicyResult> results;
    results.reserve(batch.size());
    for (auto& [state, attention] : batch)
        results.push_back(merge_policy(graph, std::move(state), std::move(attention), cfg, kind));
    return results;
}

std::string merge_trace_to_jsonl(const MergeTrace& trace, std::size_t image_id) {
    nlohmann::json steps = nlohmann::json::array();
    for (const MergeStep& s : trace.steps) {
        steps.push_back({{"i", s.survivor},
                         {"j", s.absorbed},
                         {"iou", s.iou},
                         {"wi", s.w_survivor},
                         {"wj", s.w_absorbed}});
    }
    nlohmann::json record{{"image_id", image_id},
                          {"steps", steps},
                          {"active_after", trace.active_after}};
    return record.dump();
}

}  // namespace slotmerge
