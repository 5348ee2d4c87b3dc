// SPDX-License-Identifier: Apache-2.0
//
// Slot Attention: T iterations of competitive attention over input features,
// weighted-mean aggregation, GRU update and a residual MLP. Slots are
// initialized from a shared learnable Gaussian.
//
// GRU convention (update/reset/candidate, single bias per gate):
//   z = sigmoid(x*Wz + h*Uz + bz)
//   r = sigmoid(x*Wr + h*Ur + br)
//   n = tanh(x*Wn + r .* (h*Un) + bn)
//   h' = (1 - z) .* n + z .* h
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "slotmerge/rng.hpp"
#include "slotmerge/tensor.hpp"

namespace slotmerge {

struct FeatureGrid {
    Tensor values;  // N x d
    std::size_t patch_rows = 0;
    std::size_t patch_cols = 0;  // patch_rows * patch_cols == N
};

struct SlotState {
    Tensor slots;              // K x d_slots
    std::vector<bool> active;  // mask of surviving slots

    std::size_t active_count() const {
        std::size_t n = 0;
        for (bool a : active) n += a ? 1 : 0;
        return n;
    }
};

struct SlotAttentionParams {
    std::size_t d_input = 0, d_slots = 0, d_attn = 0, mlp_hidden = 0;
    bool mlp_residual = true;

    Tensor mu, log_sigma;   // d_slots; shared Gaussian init
    Tensor w_q, w_k, w_v;   // d_slots x d_attn, d_input x d_attn, d_input x d_attn
    Tensor gru_wz, gru_wr, gru_wn;  // d_attn x d_slots
    Tensor gru_uz, gru_ur, gru_un;  // d_slots x d_slots
    Tensor gru_bz, gru_br, gru_bn;  // d_slots
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    Tensor norm_input_gain, norm_input_bias;  // d_input
    Tensor norm_slots_gain, norm_slots_bias;  // d_slots
    Tensor norm_mlp_gain, norm_mlp_bias;      // d_slots

    static SlotAttentionParams init(std::size_t d_input, std::size_t d_slots,
                                    std::size_t d_attn, std::size_t mlp_hidden,
                                    bool mlp_residual, Rng& rng);

    void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
};

// Reparameterized sampling: slots = mu + exp(log_sigma) .* eps, eps ~ N(0,I).
SlotState init_slots(Graph& graph, const SlotAttentionParams& params, std::size_t k,
                     std::uint64_t seed);

struct AttentionStepResult {
    Tensor attention;        // N x K, row-stochastic over active slots
    Tensor weighted_update;  // K x d_attn, the per-slot weighted mean of v(x)
    SlotState state;         // updated slots
};

AttentionStepResult attention_step(Graph& graph, const SlotAttentionParams& params,
                                   const FeatureGrid& features, const SlotState& state);

struct SlotAttentionResult {
    SlotState state;
    Tensor attention;  // attention computed inside the final iteration
};

SlotAttentionResult run_slot_attention(Graph& graph, const SlotAttentionParams& params,
                                       const FeatureGrid& features, std::size_t k,
                                       std::size_t iterations, std::uint64_t seed);

// Same refinement loop from a caller-provided initial state (used by the
// permutation-equivariance tests).
SlotAttentionResult run_slot_attention_from(Graph& graph, const SlotAttentionParams& params,
                                            const FeatureGrid& features, SlotState initial,
                                            std::size_t iterations);

}  // namespace slotmerge
