// SPDX-License-Identifier: Apache-2.0
//
// Training loop: Adam (beta1=0.9, beta2=0.99, no weight decay), linear
// warmup followed by cosine annealing, and gradient clipping at a global
// infinity norm of 0.3. Per-image graphs run in parallel; gradients are
// reduced in image order so results are independent of the thread count.
// The merge threshold is calibrated once, one epoch before merging starts,
// and stays frozen afterwards.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "slotmerge/model.hpp"
#include "slotmerge/threshold.hpp"

namespace slotmerge {

struct TrainOptions {
    std::string out_dir;
    std::uint64_t seed = 0;
    std::size_t threads = 0;  // 0 = hardware concurrency
    std::optional<double> force_tau;  // test hook: overrides calibration
    std::optional<std::string> resume_checkpoint;
    std::optional<MergeMode> merge_mode_override;
};

struct EpochLog {
    std::size_t epoch = 0;
    double loss = 0.0;
    double mean_merges = 0.0;
    double mean_active = 0.0;
    double lr = 0.0;
    std::optional<double> tau;
};

struct TrainResult {
    std::vector<EpochLog> epoch_logs;
    std::optional<ThresholdEstimate> calibration;
    std::optional<std::size_t> calibration_epoch;
    double final_loss = 0.0;
    std::size_t steps = 0;
    std::string final_checkpoint;
    std::string preactivation_checkpoint;  // empty when merging never activates
};

TrainResult train_model(ModelConfig config, const std::vector<SceneSample>& data,
                        const TrainOptions& options);

// ---------------------------------------------------------------- eval

struct EvalOptions {
    bool merge_at_inference = false;
    std::string masks = "decoder";  // "decoder" | "attention"
    std::optional<double> tau_override;
    bool oracle_masks = false;  // fixture hook: score the ground truth against itself
    std::uint64_t seed = 0;
};

struct ImageEval {
    std::size_t image_id = 0;
    std::optional<double> mbo_i, mbo_c, miou;
    std::size_t active_slots = 0;
    std::size_t merges = 0;
    MergeTrace trace;
};

struct EvalSummary {
    std::size_t count = 0;
    double mean_mbo_i = 0.0, mean_mbo_c = 0.0, mean_miou = 0.0;
    double mean_active = 0.0, mean_merges = 0.0;
};

struct EvalResult {
    std::vector<ImageEval> images;
    EvalSummary summary;
};

EvalResult evaluate_model(const ModelParams& params, const ModelConfig& config,
                          const std::vector<SceneSample>& data, const EvalOptions& options);

// ----------------------------------------------------------- checkpoints

struct ModelCheckpoint {
    ModelConfig config;
    ModelParams params;
    std::vector<std::vector<double>> adam_m, adam_v;  // parameter-aligned
    std::size_t step = 0;
    std::size_t completed_epochs = 0;
};

void save_model_checkpoint(const std::string& path, const ModelConfig& config,
                           ModelParams& params, const std::vector<std::vector<double>>& adam_m,
                           const std::vector<std::vector<double>>& adam_v, std::size_t step,
                           std::size_t completed_epochs);
ModelCheckpoint load_model_checkpoint(const std::string& path);

// Learning rate at a given step (exposed for tests).
double learning_rate(const ModelConfig& config, std::size_t step, std::size_t total_steps);

}  // namespace slotmerge
