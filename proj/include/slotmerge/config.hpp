// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a flat textual key=value file covering every model and
// training hyperparameter. Unknown keys are rejected.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "slotmerge/merge.hpp"

namespace slotmerge {

enum class MergeMode { kOff, kInferenceOnly, kTraining };

MergeMode parse_merge_mode(const std::string& name);  // off|inference_only|training
std::string merge_mode_name(MergeMode mode);

struct ModelConfig {
    // architecture
    std::size_t canvas = 32;
    std::size_t patch_size = 4;
    std::size_t d = 64;        // encoder feature width
    std::size_t d_slots = 64;
    std::size_t d_attn = 64;
    std::size_t mlp_hidden = 128;
    std::size_t k_init = 6;
    std::size_t iterations = 3;
    std::vector<std::size_t> decoder_hidden = {32};
    bool mlp_residual = true;

    // merging
    MergeMode merge_mode = MergeMode::kTraining;
    std::size_t merge_start_epoch = 15;
    bool detach_gradients = false;
    bool update_attention = true;
    std::optional<double> tau;  // filled by calibration
    std::size_t calib_batches = 11;
    std::string tau_aggregation = "mean";

    // optimization
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    double lr_peak = 4e-4;
    double lr_min = 4e-6;
    std::size_t warmup_steps = 500;
    double clip_inf_norm = 0.3;

    std::size_t patch_grid() const { return canvas / patch_size; }
    std::size_t n_patches() const { return patch_grid() * patch_grid(); }
    std::size_t n_pixels() const { return canvas * canvas; }

    void validate() const;

    MergePolicyConfig merge_policy_config() const {
        MergePolicyConfig cfg;
        cfg.tau = tau.value_or(0.0);
        cfg.detach_gradients = detach_gradients;
        cfg.update_attention = update_attention;
        return cfg;
    }
};

ModelConfig parse_model_config(const std::string& text);
ModelConfig load_model_config(const std::string& path);
std::string serialize_model_config(const ModelConfig& config);
void save_model_config(const std::string& path, const ModelConfig& config);

}  // namespace slotmerge
