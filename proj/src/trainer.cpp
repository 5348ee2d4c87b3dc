// SPDX-License-Identifier: Apache-2.0
#include "slotmerge/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <thread>

#include <nlohmann/json.hpp>

#include "slotmerge/checkpoint.hpp"

namespace slotmerge {

namespace {

using json = nlohmann::json;

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.99;
constexpr double kAdamEps = 1e-8;

// stream ids for seed derivation
constexpr std::uint64_t kStreamShuffle = 0x51;
constexpr std::uint64_t kStreamSlots = 0x52;
constexpr std::uint64_t kStreamCalib = 0x53;
constexpr std::uint64_t kStreamInit = 0x54;

std::vector<std::pair<std::string, Tensor>> named_params(ModelParams& params) {
    std::vector<std::pair<std::string, Tensor>> out;
    params.for_each_param([&](const std::string& name, Tensor& t) {
        out.emplace_back(name, t);
    });
    return out;
}

struct ImageWorkResult {
    double loss = 0.0;
    std::size_t merges = 0;
    std::size_t active = 0;
    std::vector<std::vector<double>> grads;  // parameter-aligned
};

// Forward + backward for one image on a private clone of the parameters, so
// concurrent images never touch shared gradient buffers.
ImageWorkResult run_image(const ModelParams& master, const ModelConfig& config,
                          const SceneSample& image, const ForwardOptions& options) {
    ModelParams local = master.clone();
    Graph graph;
    ForwardResult forward = forward_image(graph, local, config, image, options);
    graph.backward(forward.loss);

    ImageWorkResult result;
    result.loss = forward.loss.value();
    result.merges = forward.trace.steps.size();
    result.active = forward.state.active_count();
    local.for_each_param([&](const std::string&, Tensor& t) {
        auto g = t.grad();
        result.grads.emplace_back(g.begin(), g.end());
    });
    return result;
}

std::string config_to_meta(const ModelConfig& config) {
    return serialize_model_config(config);
}

}  // namespace

double learning_rate(const ModelConfig& config, std::size_t step, std::size_t total_steps) {
    if (step < config.warmup_steps) {
        return config.lr_peak * static_cast<double>(step + 1) /
               static_cast<double>(config.warmup_steps);
    }
    const std::size_t decay_steps = total_steps > config.warmup_steps
                                        ? total_steps - config.warmup_steps
                                        : 1;
    double progress = static_cast<double>(step - config.warmup_steps) /
                      static_cast<double>(decay_steps);
    progress = std::min(progress, 1.0);
    return config.lr_min +
           0.5 * (config.lr_peak - config.lr_min) * (1.0 + std::cos(M_PI * progress));
}

void save_model_checkpoint(const std::string& path, const ModelConfig& config,
                           ModelParams& params, const std::vector<std::vector<double>>& adam_m,
                           const std::vector<std::vector<double>>& adam_v, std::size_t step,
                           std::size_t completed_epochs) {
    NamedTensors tensors;
    auto entries = named_params(params);
    for (auto& [name, tensor] : entries) tensors.emplace_back(name, tensor);
    for (std::size_t i = 0; i < entries.size(); ++i) {
        tensors.emplace_back("adam.m." + entries[i].first,
                             Tensor::from({adam_m[i].size()}, adam_m[i]));
        tensors.emplace_back("adam.v." + entries[i].first,
                             Tensor::from({adam_v[i].size()}, adam_v[i]));
    }
    tensors.emplace_back("train.step", Tensor::scalar(static_cast<double>(step)));
    tensors.emplace_back("train.epoch", Tensor::scalar(static_cast<double>(completed_epochs)));
    const std::string meta = config_to_meta(config);
    std::vector<double> meta_bytes(meta.size());
    for (std::size_t i = 0; i < meta.size(); ++i)
        meta_bytes[i] = static_cast<double>(static_cast<unsigned char>(meta[i]));
    tensors.emplace_back("meta.config", Tensor::from({meta_bytes.size()}, std::move(meta_bytes)));
    save_checkpoint(path, tensors);
}

ModelCheckpoint load_model_checkpoint(const std::string& path) {
    NamedTensors tensors = load_checkpoint(path);
    auto find = [&](const std::string& name) -> Tensor* {
        for (auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    };

    Tensor* meta = find("meta.config");
    if (!meta) throw FormatError("checkpoint missing meta.config: " + path);
    std::string config_text(meta->numel(), '\0');
    for (std::size_t i = 0; i < meta->numel(); ++i)
        config_text[i] = static_cast<char>(static_cast<unsigned char>(meta->at(i)));

    ModelCheckpoint ckpt;
    try {
        ckpt.config = parse_model_config(config_text);
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint carries a bad config: ") + e.what());
    }
    ckpt.params = ModelParams::init(ckpt.config, 0);

    auto entries = named_params(ckpt.params);
    ckpt.adam_m.resize(entries.size());
    ckpt.adam_v.resize(entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
        auto& [name, tensor] = entries[i];
        Tensor* stored = find(name);
        if (!stored) throw FormatError("checkpoint missing tensor " + name);
        if (stored->shape() != tensor.shape())
            throw FormatError("checkpoint tensor shape mismatch for " + name);
        std::copy(stored->values().begin(), stored->values().end(), tensor.values().begin());

        Tensor* m = find("adam.m." + name);
        Tensor* v = find("adam.v." + name);
        if (m && v && m->numel() == tensor.numel() && v->numel() == tensor.numel()) {
            ckpt.adam_m[i].assign(m->values().begin(), m->values().end());
            ckpt.adam_v[i].assign(v->values().begin(), v->values().end());
        } else {
            ckpt.adam_m[i].assign(tensor.numel(), 0.0);
            ckpt.adam_v[i].assign(tensor.numel(), 0.0);
        }
    }
    if (Tensor* step = find("train.step")) ckpt.step = static_cast<std::size_t>(step->value());
    if (Tensor* epoch = find("train.epoch"))
        ckpt.completed_epochs = static_cast<std::size_t>(epoch->value());
    return ckpt;
}

TrainResult train_model(ModelConfig config, const std::vector<SceneSample>& data,
                        const TrainOptions& options) {
    if (data.empty()) throw DataError("train_model: empty dataset");
    if (options.merge_mode_override) config.merge_mode = *options.merge_mode_override;
    config.validate();

    std::filesystem::create_directories(options.out_dir);
    std::ofstream log_stream;

    ModelParams params;
    std::vector<std::vector<double>> adam_m, adam_v;
    std::size_t step = 0;
    std::size_t start_epoch = 0;

    if (options.resume_checkpoint) {
        ModelCheckpoint ckpt = load_model_checkpoint(*options.resume_checkpoint);
        config = ckpt.config;
        if (options.merge_mode_override) config.merge_mode = *options.merge_mode_override;
        params = std::move(ckpt.params);
        adam_m = std::move(ckpt.adam_m);
        adam_v = std::move(ckpt.adam_v);
        step = ckpt.step;
        start_epoch = ckpt.completed_epochs;
        log_stream.open(options.out_dir + "/train_log.jsonl", std::ios::app);
    } else {
        params = ModelParams::init(config, derive_seed(options.seed, kStreamInit));
        auto entries = named_params(params);
        adam_m.resize(entries.size());
        adam_v.resize(entries.size());
        for (std::size_t i = 0; i < entries.size(); ++i) {
            adam_m[i].assign(entries[i].second.numel(), 0.0);
            adam_v[i].assign(entries[i].second.numel(), 0.0);
        }
        log_stream.open(options.out_dir + "/train_log.jsonl", std::ios::trunc);
    }
    if (!log_stream) throw DataError("cannot open training log in " + options.out_dir);

    auto entries = named_params(params);
    const std::size_t n_params = entries.size();
    const std::size_t n_images = data.size();
    const std::size_t steps_per_epoch = (n_images + config.batch_size - 1) / config.batch_size;
    const std::size_t total_steps = steps_per_epoch * config.epochs;
    const std::size_t n_threads = options.threads > 0
                                      ? options.threads
                                      : std::max<std::size_t>(1, std::thread::hardware_concurrency());

    const bool wants_merging = config.merge_mode != MergeMode::kOff;
    auto effective_tau = [&]() -> std::optional<double> {
        if (options.force_tau) return options.force_tau;
        return config.tau;
    };

    TrainResult result;

    auto run_calibration = [&](std::size_t epoch) {
        auto samples = collect_overlaps(params, config, data, config.calib_batches,
                                        derive_seed(options.seed, kStreamCalib));
        ThresholdEstimate estimate =
            estimate_tau(samples, parse_aggregation(config.tau_aggregation));
        config.tau = estimate.tau;
        result.calibration = estimate;
        result.calibration_epoch = epoch;
        json record{{"event", "calibration"},
                    {"epoch", epoch},
                    {"tau", estimate.tau},
                    {"aggregation", aggregation_name(estimate.aggregation)},
                    {"candidates", estimate.candidates},
                    {"n_samples", estimate.n_samples}};
        log_stream << record.dump() << "\n" << std::flush;
    };

    // Calibration scheduled "one epoch before merging starts"; with
    // merge_start_epoch == 0 it runs once before the first epoch.
    const bool needs_calibration = wants_merging && !options.force_tau && !config.tau;
    if (needs_calibration && config.merge_start_epoch == 0 && start_epoch == 0)
        run_calibration(0);

    for (std::size_t epoch = start_epoch; epoch < config.epochs; ++epoch) {
        const bool merge_this_epoch =
            config.merge_mode == MergeMode::kTraining && epoch >= config.merge_start_epoch;
        if (merge_this_epoch && !effective_tau())
            throw ScheduleError("merging begins at epoch " + std::to_string(epoch) +
                                " but tau is unset (calibration missing)");

        std::vector<std::size_t> order(n_images);
        std::iota(order.begin(), order.end(), 0);
        {
            Rng shuffle_rng(derive_seed(derive_seed(options.seed, kStreamShuffle), epoch));
            for (std::size_t i = n_images; i > 1; --i) {
                const std::size_t j = static_cast<std::size_t>(
                    shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
                std::swap(order[i - 1], order[j]);
            }
        }

        double epoch_loss = 0.0, epoch_merges = 0.0, epoch_active = 0.0;
        double last_lr = 0.0;

        for (std::size_t batch_start = 0; batch_start < n_images;
             batch_start += config.batch_size) {
            const std::size_t batch_count =
                std::min(config.batch_size, n_images - batch_start);

            ForwardOptions base_options;
            base_options.apply_merge = merge_this_epoch;
            base_options.tau = effective_tau();
            base_options.detach_gradients = config.detach_gradients;
            base_options.update_attention = config.update_attention;

            std::vector<ImageWorkResult> results(batch_count);
            auto worker = [&](std::size_t worker_id) {
                for (std::size_t b = worker_id; b < batch_count; b += n_threads) {
                    ForwardOptions opts = base_options;
                    opts.slot_seed = derive_seed(derive_seed(options.seed, kStreamSlots),
                                                 epoch * n_images + batch_start + b);
                    results[b] = run_image(params, config, data[order[batch_start + b]], opts);
                }
            };
            if (n_threads <= 1 || batch_count <= 1) {
                worker(0);
            } else {
                std::vector<std::thread> pool;
                pool.reserve(n_threads);
                for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker, t);
                for (auto& t : pool) t.join();
            }

            // Deterministic reduction in image order, independent of threads.
            std::vector<std::vector<double>> grad_sum(n_params);
            for (std::size_t pi = 0; pi < n_params; ++pi)
                grad_sum[pi].assign(entries[pi].second.numel(), 0.0);
            const double inv_batch = 1.0 / static_cast<double>(batch_count);
            for (std::size_t b = 0; b < batch_count; ++b) {
                epoch_loss += results[b].loss;
                epoch_merges += static_cast<double>(results[b].merges);
                epoch_active += static_cast<double>(results[b].active);
                for (std::size_t pi = 0; pi < n_params; ++pi) {
                    const auto& g = results[b].grads[pi];
                    auto& acc = grad_sum[pi];
                    for (std::size_t e = 0; e < g.size(); ++e) acc[e] += g[e] * inv_batch;
                }
            }

            // Global infinity-norm clip.
            double max_abs = 0.0;
            for (const auto& g : grad_sum)
                for (double v : g) max_abs = std::max(max_abs, std::fabs(v));
            const double clip_scale =
                max_abs > config.clip_inf_norm ? config.clip_inf_norm / max_abs : 1.0;

            const double lr = learning_rate(config, step, total_steps);
            last_lr = lr;
            const double t_adam = static_cast<double>(step + 1);
            const double bias1 = 1.0 - std::pow(kAdamBeta1, t_adam);
            const double bias2 = 1.0 - std::pow(kAdamBeta2, t_adam);
            for (std::size_t pi = 0; pi < n_params; ++pi) {
                auto values = entries[pi].second.values();
                auto& m = adam_m[pi];
                auto& v = adam_v[pi];
                const auto& g = grad_sum[pi];
                for (std::size_t e = 0; e < g.size(); ++e) {
                    const double ge = g[e] * clip_scale;
                    m[e] = kAdamBeta1 * m[e] + (1.0 - kAdamBeta1) * ge;
                    v[e] = kAdamBeta2 * v[e] + (1.0 - kAdamBeta2) * ge * ge;
                    const double m_hat = m[e] / bias1;
                    const double v_hat = v[e] / bias2;
                    values[e] -= lr * m_hat / (std::sqrt(v_hat) + kAdamEps);
                }
            }
            ++step;
        }

        EpochLog log;
        log.epoch = epoch;
        log.loss = epoch_loss / static_cast<double>(n_images);
        log.mean_merges = epoch_merges / static_cast<double>(n_images);
        log.mean_active = epoch_active / static_cast<double>(n_images);
        log.lr = last_lr;
        log.tau = effective_tau();
        result.epoch_logs.push_back(log);
        result.final_loss = log.loss;

        json record{{"event", "epoch"},
                    {"epoch", log.epoch},
                    {"loss", log.loss},
                    {"mean_merges", log.mean_merges},
                    {"mean_active", log.mean_active},
                    {"lr", log.lr},
                    {"step", step}};
        if (log.tau) record["tau"] = *log.tau;
        else record["tau"] = nullptr;
        log_stream << record.dump() << "\n" << std::flush;

        // Calibration one epoch before merging starts.
        if (needs_calibration && config.merge_start_epoch == epoch + 1)
            run_calibration(epoch);

        save_model_checkpoint(options.out_dir + "/checkpoint_latest.bin", config, params,
                              adam_m, adam_v, step, epoch + 1);
        if (wants_merging && config.merge_start_epoch == epoch + 1) {
            result.preactivation_checkpoint =
                options.out_dir + "/checkpoint_preactivation.bin";
            save_model_checkpoint(result.preactivation_checkpoint, config, params, adam_m,
                                  adam_v, step, epoch + 1);
        }
    }

    result.steps = step;
    result.final_checkpoint = options.out_dir + "/checkpoint_final.bin";
    save_model_checkpoint(result.final_checkpoint, config, params, adam_m, adam_v, step,
                          config.epochs);
    return result;
}

EvalResult evaluate_model(const ModelParams& params, const ModelConfig& config,
                          const std::vector<SceneSample>& data, const EvalOptions& options) {
    if (data.empty()) throw DataError("evaluate_model: empty dataset");
    if (options.masks != "decoder" && options.masks != "attention")
        throw UsageError("eval masks must be 'decoder' or 'attention'");

    std::optional<double> tau = options.tau_override ? options.tau_override : config.tau;
    if (options.merge_at_inference && !tau)
        throw FormatError("merge-at-inference requested but the checkpoint carries no tau");

    EvalResult result;
    double sum_mbo_i = 0.0, sum_mbo_c = 0.0, sum_miou = 0.0;
    std::size_t n_mbo_i = 0, n_mbo_c = 0, n_miou = 0;

    for (std::size_t idx = 0; idx < data.size(); ++idx) {
        const SceneSample& image = data[idx];
        ImageEval record;
        record.image_id = idx;

        LabelGrid pred;
        if (options.oracle_masks) {
            pred = image.instances;
            record.active_slots = image.n_objects;
        } else {
            Graph graph(false);
            ForwardOptions fwd;
            fwd.apply_merge = options.merge_at_inference;
            fwd.tau = tau;
            fwd.update_attention = config.update_attention;
            fwd.slot_seed = derive_seed(options.seed, idx);
            ForwardResult forward = forward_image(graph, params, config, image, fwd);
            record.active_slots = forward.state.active_count();
            record.merges = forward.trace.steps.size();
            record.trace = forward.trace;

            const std::size_t k = forward.state.slots.rows();
            if (options.masks == "decoder") {
                pred = slots_to_masks(forward.decoded.alphas_full, forward.state.active,
                                      image.height, image.width, k);
            } else {
                // nearest-neighbour upsample of the patch-level attention
                const Tensor& a = forward.attention;
                const std::size_t grid = config.patch_grid();
                std::vector<double> dist(image.height * image.width * k, 0.0);
                for (std::size_t y = 0; y < image.height; ++y) {
                    const std::size_t gy = std::min(y / config.patch_size, grid - 1);
                    for (std::size_t x = 0; x < image.width; ++x) {
                        const std::size_t gx = std::min(x / config.patch_size, grid - 1);
                        const std::size_t patch = gy * grid + gx;
                        for (std::size_t s = 0; s < k; ++s)
                            dist[(y * image.width + x) * k + s] = a.at(patch, s);
                    }
                }
                pred = slots_to_masks(dist, forward.state.active, image.height, image.width,
                                      k);
            }
        }

        record.mbo_i = mean_best_overlap(pred, image.instances);
        record.mbo_c = mean_best_overlap(pred, image.classes);
        record.miou = matched_miou(pred, image.instances);
        if (record.mbo_i) { sum_mbo_i += *record.mbo_i; ++n_mbo_i; }
        if (record.mbo_c) { sum_mbo_c += *record.mbo_c; ++n_mbo_c; }
        if (record.miou) { sum_miou += *record.miou; ++n_miou; }
        result.summary.mean_active += static_cast<double>(record.active_slots);
        result.summary.mean_merges += static_cast<double>(record.merges);
        result.images.push_back(std::move(record));
    }

    result.summary.count = data.size();
    result.summary.mean_mbo_i = n_mbo_i ? sum_mbo_i / static_cast<double>(n_mbo_i) : 0.0;
    result.summary.mean_mbo_c = n_mbo_c ? sum_mbo_c / static_cast<double>(n_mbo_c) : 0.0;
    result.summary.mean_miou = n_miou ? sum_miou / static_cast<double>(n_miou) : 0.0;
    result.summary.mean_active /= static_cast<double>(data.size());
    result.summary.mean_merges /= static_cast<double>(data.size());
    return result;
}

}  // namespace slotmerge
