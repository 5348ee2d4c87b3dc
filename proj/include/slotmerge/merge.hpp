// SPDX-License-Identifier: Apache-2.0
//
// Slot merging: Soft-IoU overlap scoring between attention columns, a
// mass-weighted barycentric merge operator, and the fixed merge policy that
// repeatedly fuses the maximum-overlap pair until the overlap drops to the
// threshold. The policy is available in a naive form (recompute all pairwise
// overlaps after every merge) and an incremental form (maintain intersections
// and masses under column addition); both produce identical traces.
//
// Merge decisions (argmax + threshold comparison) are computed on plain
// detached values and carry no gradient; only the merge arithmetic is
// differentiable.
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "slotmerge/slot_attention.hpp"
#include "slotmerge/tensor.hpp"

namespace slotmerge {

struct MergePolicyConfig {
    double tau = 0.0;               // stopping threshold in [0,1]
    bool detach_gradients = false;  // ablation: constant weights, absorbed slot severed
    bool update_attention = true;   // ablation: add absorbed column into survivor
};

// Soft intersection-over-union of two soft masks with entries in [0,1]:
// sum(p*q) / sum(p + q - p*q); 0 when the denominator is below 1e-12.
double soft_iou(std::span<const double> p, std::span<const double> q);

// Attention mass of slot i: the column sum of A (summed in row order).
double slot_mass(const Tensor& attention, const std::vector<bool>& active, std::size_t i);

// Normalized merge weights (w_i, w_j) = (a_i, a_j) / (a_i + a_j); a
// degenerate pair with total mass below 1e-12 gets equal weights.
std::pair<double, double> merge_weights(double alpha_i, double alpha_j);

struct MergeCounters {
    std::size_t pair_evaluations = 0;  // full soft-IoU evaluations (O(N) each)
    std::size_t incident_updates = 0;  // O(1) incremental bookkeeping updates
};

// Pairwise soft intersections and per-slot masses over active slots.
struct OverlapState {
    std::size_t k = 0;
    std::vector<double> inter;  // k*k symmetric, inactive rows/cols zero
    std::vector<double> mass;   // k
    std::vector<bool> active;

    double intersection(std::size_t i, std::size_t j) const { return inter[i * k + j]; }
    double iou(std::size_t i, std::size_t j) const;
};

OverlapState build_overlaps(const Tensor& attention, const std::vector<bool>& active,
                            MergeCounters* counters = nullptr);

struct MergeStep {
    std::size_t survivor = 0;
    std::size_t absorbed = 0;
    double iou = 0.0;
    double w_survivor = 0.0;
    double w_absorbed = 0.0;
};

struct MergeTrace {
    std::vector<MergeStep> steps;
    std::size_t active_after = 0;
};

// One merge of slot j into slot i (both active, i != j):
//   S_i <- w_i*S_i + w_j*S_j, A_:,i <- A_:,i + A_:,j, A_:,j <- 0.
// Weights flow gradients through the attention columns unless
// cfg.detach_gradients. Returns new tensors; `step` reports the weights used.
struct MergePairResult {
    Tensor slots;
    Tensor attention;
    MergeStep step;
};

MergePairResult merge_pair(Graph& graph, const SlotState& state, const Tensor& attention,
                           std::size_t i, std::size_t j, const MergePolicyConfig& cfg);

enum class MergePolicyKind { kNaive, kIncremental };

struct MergePolicyResult {
    SlotState state;
    Tensor attention;
    MergeTrace trace;
    MergeCounters counters;
};

MergePolicyResult merge_policy(Graph& graph, SlotState state, Tensor attention,
                               const MergePolicyConfig& cfg, MergePolicyKind kind);

inline MergePolicyResult merge_policy_naive(Graph& graph, SlotState state, Tensor attention,
                                            const MergePolicyConfig& cfg) {
    return merge_policy(graph, std::move(state), std::move(attention), cfg,
                        MergePolicyKind::kNaive);
}

inline MergePolicyResult merge_policy_incremental(Graph& graph, SlotState state,
                                                  Tensor attention,
                                                  const MergePolicyConfig& cfg) {
    return merge_policy(graph, std::move(state), std::move(attention), cfg,
                        MergePolicyKind::kIncremental);
}

// Independent per-image application of the policy.
std::vector<MergePolicyResult> batch_merge(Graph& graph,
                                           std::vector<std::pair<SlotState, Tensor>> batch,
                                           const MergePolicyConfig& cfg,
                                           MergePolicyKind kind);

// One JSON-lines record per image:
//   {"image_id", "steps":[{"i","j","iou","wi","wj"}], "active_after"}
std::string merge_trace_to_jsonl(const MergeTrace& trace, std::size_t image_id);

}  // namespace slotmerge
