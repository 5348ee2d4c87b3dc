// SPDX-License-Identifier: Apache-2.0
//
// End-to-end pipeline: patch encoder -> slot attention -> optional merging
// -> spatial-broadcast decoder -> pixel MSE. The decoder tiles each active
// slot over the pixel grid, adds a positional code (a learned linear map of
// normalized (x,y) coordinates), runs a shared per-pixel MLP producing RGB
// plus an alpha logit, and composites with a softmax over active slots.
// Inactive slots are physically excluded, so they contribute exactly nothing.
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>

#include "slotmerge/config.hpp"
#include "slotmerge/merge.hpp"
#include "slotmerge/scenes.hpp"
#include "slotmerge/slot_attention.hpp"

namespace slotmerge {

struct ModelParams {
    std::size_t canvas = 0, patch_size = 0;

    Tensor enc_w, enc_b;                   // (3*p*p) x d, d
    Tensor enc_pos;                        // N x d learned patch-position table
    Tensor enc_norm_gain, enc_norm_bias;   // d
    SlotAttentionParams slot_attn;
    Tensor dec_pos_w, dec_pos_b;           // 2 x d_slots, d_slots
    std::vector<Tensor> dec_w, dec_b;      // hidden layers then a final 4-wide layer

    static ModelParams init(const ModelConfig& config, std::uint64_t seed);

    void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn);
    ModelParams clone() const;
};

// Non-overlapping patches, linear projection, learned position code, then
// layer normalization.
FeatureGrid encode(Graph& graph, const ModelParams& params, const SceneSample& image);

struct DecodeResult {
    Tensor reconstruction;              // (h*w) x 3
    Tensor alphas_active;               // (h*w) x n_active, columns in slot order
    std::vector<double> alphas_full;    // (h*w) x k values, zero at inactive slots
};

DecodeResult decode(Graph& graph, const ModelParams& params, const SlotState& state);

// Mean squared error over pixels and channels.
Tensor reconstruction_loss(Graph& graph, const Tensor& reconstruction,
                           const SceneSample& image);

struct ForwardOptions {
    bool apply_merge = false;
    std::optional<double> tau;  // required when apply_merge
    bool detach_gradients = false;
    bool update_attention = true;
    std::uint64_t slot_seed = 0;
};

struct ForwardResult {
    Tensor loss;
    DecodeResult decoded;
    SlotState premerge_state;      // slots straight out of slot attention
    Tensor premerge_attention;
    SlotState state;               // state consumed by the decoder
    Tensor attention;
    MergeTrace trace;              // empty when merging is off
};

ForwardResult forward_image(Graph& graph, const ModelParams& params,
                            const ModelConfig& config, const SceneSample& image,
                            const ForwardOptions& options);

// Pairwise Soft-IoU samples over `n_batches` deterministic batches with no
// merging applied, grouped per batch; the calibration input.
std::vector<std::vector<double>> collect_overlaps(const ModelParams& params,
                                                  const ModelConfig& config,
                                                  const std::vector<SceneSample>& data,
                                                  std::size_t n_batches,
                                                  std::uint64_t seed);

}  // namespace slotmerge
