// SPDX-License-Identifier: Apache-2.0
//
// Single binary driving the full workflow: dataset generation, threshold
// calibration, training, evaluation, merge-policy benchmarking and gradient
// checking. Exit codes are part of the contract (docs/file-formats.md):
//   0 ok, 1 unexpected error, 2 bad scene spec, 3 degenerate calibration,
//   4 schedule error, 5 bad checkpoint/file format, 6 failed gradient check,
//   64 usage error.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "slotmerge/checkpoint.hpp"
#include "slotmerge/config.hpp"
#include "slotmerge/gradcheck.hpp"
#include "slotmerge/merge.hpp"
#include "slotmerge/model.hpp"
#include "slotmerge/scenes.hpp"
#include "slotmerge/threshold.hpp"
#include "slotmerge/trainer.hpp"

namespace {

using json = nlohmann::json;
using namespace slotmerge;

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitSceneSpec = 2;
constexpr int kExitCalibration = 3;
constexpr int kExitSchedule = 4;
constexpr int kExitFormat = 5;
constexpr int kExitGradCheck = 6;
constexpr int kExitUsage = 64;

struct GenerateDataArgs {
    std::string spec_path, out_path;
    std::size_t count = 1;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

int cmd_generate_data(const GenerateDataArgs& args) {
    SceneSpec spec;
    if (!args.spec_path.empty()) spec = load_scene_spec(args.spec_path);
    if (args.seed_set) spec.seed = args.seed;
    auto samples = generate_scenes(spec, args.count);
    save_scenes(args.out_path, samples);
    double mean_objects = 0.0;
    for (const auto& s : samples) mean_objects += static_cast<double>(s.n_objects);
    mean_objects /= static_cast<double>(samples.size());
    std::cout << "wrote " << samples.size() << " scenes (" << spec.height << "x"
              << spec.width << ", mean objects " << mean_objects << ") to "
              << args.out_path << "\n";
    return kExitOk;
}

struct EstimateThresholdArgs {
    std::string config_path, checkpoint_path, data_path, agg;
    std::size_t batches = 11;
    std::vector<double> candidates;
    std::uint64_t seed = 0;
};

int cmd_estimate_threshold(const EstimateThresholdArgs& args) {
    ThresholdEstimate estimate;
    std::string aggregation_source = args.agg;

    if (!args.candidates.empty()) {
        // fixture path: aggregate the given per-batch candidates directly
        if (aggregation_source.empty()) aggregation_source = "mean";
        estimate.candidates = args.candidates;
        estimate.aggregation = parse_aggregation(aggregation_source);
        const double n = static_cast<double>(estimate.candidates.size());
        double mean = 0.0;
        for (double c : estimate.candidates) mean += c;
        mean /= n;
        if (estimate.aggregation == TauAggregation::kMeanMinusStd) {
            double var = 0.0;
            for (double c : estimate.candidates) var += (c - mean) * (c - mean);
            estimate.tau = mean - std::sqrt(var / n);
        } else {
            estimate.tau = mean;
        }
        estimate.tau = std::min(1.0, std::max(0.0, estimate.tau));
        estimate.n_samples = estimate.candidates.size();
    } else {
        if (args.checkpoint_path.empty() || args.data_path.empty())
            throw UsageError("estimate-threshold needs --checkpoint and --data "
                             "(or --candidates for fixtures)");
        ModelCheckpoint ckpt = load_model_checkpoint(args.checkpoint_path);
        if (aggregation_source.empty()) aggregation_source = ckpt.config.tau_aggregation;
        auto data = load_scenes(args.data_path);
        auto samples = collect_overlaps(ckpt.params, ckpt.config, data, args.batches,
                                        args.seed);
        estimate = estimate_tau(samples, parse_aggregation(aggregation_source));
    }

    json record{{"candidates", estimate.candidates},
                {"aggregation", aggregation_name(estimate.aggregation)},
                {"tau", estimate.tau},
                {"n_samples", estimate.n_samples}};
    std::cout << record.dump() << "\n";

    if (!args.config_path.empty()) {
        ModelConfig config = load_model_config(args.config_path);
        config.tau = estimate.tau;
        config.tau_aggregation = aggregation_name(estimate.aggregation);
        save_model_config(args.config_path, config);
    }
    return kExitOk;
}

struct TrainArgs {
    std::string config_path, data_path, out_dir, resume, merge_mode;
    std::uint64_t seed = 0;
    std::size_t threads = 0;
    double force_tau = -1.0;
    bool force_tau_set = false;
};

int cmd_train(const TrainArgs& args) {
    ModelConfig config = load_model_config(args.config_path);
    auto data = load_scenes(args.data_path);
    if (!data.empty() && data.front().height != config.canvas)
        throw ConfigError("dataset canvas does not match config");

    TrainOptions options;
    options.out_dir = args.out_dir;
    options.seed = args.seed;
    options.threads = args.threads;
    if (args.force_tau_set) options.force_tau = args.force_tau;
    if (!args.resume.empty()) options.resume_checkpoint = args.resume;
    if (!args.merge_mode.empty()) options.merge_mode_override = parse_merge_mode(args.merge_mode);

    TrainResult result = train_model(config, data, options);
    std::cout << "training done: " << result.steps << " steps, final loss "
              << result.final_loss << ", checkpoint " << result.final_checkpoint << "\n";
    if (result.calibration)
        std::cout << "calibrated tau " << result.calibration->tau << " at epoch "
                  << *result.calibration_epoch << "\n";
    return kExitOk;
}

struct EvalArgs {
    std::string checkpoint_path, data_path, out_path, masks = "decoder", traces_path;
    bool merge_at_inference = false;
    bool oracle_masks = false;
    double tau = -1.0;
    bool tau_set = false;
    std::uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& args) {
    ModelCheckpoint ckpt = load_model_checkpoint(args.checkpoint_path);
    auto data = load_scenes(args.data_path);

    EvalOptions options;
    options.merge_at_inference = args.merge_at_inference;
    options.masks = args.masks;
    options.oracle_masks = args.oracle_masks;
    options.seed = args.seed;
    if (args.tau_set) options.tau_override = args.tau;

    EvalResult result = evaluate_model(ckpt.params, ckpt.config, data, options);

    std::ostream* out = &std::cout;
    std::ofstream file;
    if (!args.out_path.empty()) {
        file.open(args.out_path, std::ios::trunc);
        if (!file) throw DataError("cannot open eval output: " + args.out_path);
        out = &file;
    }
    for (const ImageEval& rec : result.images) {
        json line{{"image_id", rec.image_id},
                  {"mbo_i", rec.mbo_i ? json(*rec.mbo_i) : json(nullptr)},
                  {"mbo_c", rec.mbo_c ? json(*rec.mbo_c) : json(nullptr)},
                  {"miou", rec.miou ? json(*rec.miou) : json(nullptr)},
                  {"active_slots", rec.active_slots},
                  {"merges", rec.merges}};
        *out << line.dump() << "\n";
    }
    json summary{{"event", "summary"},
                 {"count", result.summary.count},
                 {"mbo_i", result.summary.mean_mbo_i},
                 {"mbo_c", result.summary.mean_mbo_c},
                 {"miou", result.summary.mean_miou},
                 {"mean_active", result.summary.mean_active},
                 {"mean_merges", result.summary.mean_merges}};
    *out << summary.dump() << "\n";
    if (out != &std::cout) std::cout << summary.dump() << "\n";

    if (!args.traces_path.empty()) {
        std::ofstream traces(args.traces_path, std::ios::trunc);
        if (!traces) throw DataError("cannot open traces output: " + args.traces_path);
        for (const ImageEval& rec : result.images)
            traces << merge_trace_to_jsonl(rec.trace, rec.image_id) << "\n";
    }
    return kExitOk;
}

struct BenchArgs {
    std::size_t n = 256;
    std::string k_list = "8,16,32,64,128";
    std::string merges = "full";
    std::string policy = "both";
    std::size_t repeats = 1;
    std::uint64_t seed = 0;
    std::string out_path;
};

int cmd_bench_merge(const BenchArgs& args) {
    std::vector<std::size_t> ks;
    {
        std::istringstream list(args.k_list);
        std::string item;
        while (std::getline(list, item, ','))
            if (!item.empty()) ks.push_back(std::stoul(item));
    }
    for (std::size_t k : ks)
        if (k < 2) throw UsageError("bench-merge requires K >= 2");
    if (args.merges != "full" && args.merges != "none")
        throw UsageError("--merges must be 'full' or 'none'");
    std::vector<MergePolicyKind> kinds;
    if (args.policy == "naive") kinds = {MergePolicyKind::kNaive};
    else if (args.policy == "incremental") kinds = {MergePolicyKind::kIncremental};
    else if (args.policy == "both")
        kinds = {MergePolicyKind::kNaive, MergePolicyKind::kIncremental};
    else throw UsageError("--policy must be 'naive', 'incremental' or 'both'");

    std::ostream* out = &std::cout;
    std::ofstream file;
    if (!args.out_path.empty()) {
        file.open(args.out_path, std::ios::trunc);
        if (!file) throw DataError("cannot open bench output: " + args.out_path);
        out = &file;
    }
    *out << "K,policy,pair_evals,updates,nanos\n";

    MergePolicyConfig cfg;
    cfg.tau = args.merges == "full" ? 0.0 : 1.0;

    for (std::size_t k : ks) {
        for (std::size_t rep = 0; rep < args.repeats; ++rep) {
            // row-stochastic attention, like the model would produce
            Rng rng(derive_seed(args.seed, k * 1000 + rep));
            std::vector<double> logits(args.n * k);
            for (double& v : logits) v = rng.normal();
            Tensor raw = Tensor::from({args.n, k}, std::move(logits));
            Graph setup(false);
            Tensor attention = setup.softmax(raw, 1);
            std::vector<double> slot_values(k * 8);
            for (double& v : slot_values) v = rng.normal();

            for (MergePolicyKind kind : kinds) {
                SlotState state;
                state.slots = Tensor::from({k, 8}, slot_values);
                state.active.assign(k, true);
                Graph graph(false);
                const auto start = std::chrono::steady_clock::now();
                MergePolicyResult result =
                    merge_policy(graph, std::move(state), attention.clone(false), cfg, kind);
                const auto stop = std::chrono::steady_clock::now();
                const auto nanos =
                    std::chrono::duration_cast<std::chrono::nanoseconds>(stop - start);
                *out << k << ","
                     << (kind == MergePolicyKind::kNaive ? "naive" : "incremental") << ","
                     << result.counters.pair_evaluations << ","
                     << result.counters.incident_updates << "," << nanos.count() << "\n";
            }
        }
    }
    return kExitOk;
}

struct GradCheckArgs {
    std::string config_path;
    std::uint64_t seed = 0;
    bool force_merge = false;
    bool detach_only = false;
    bool inject_nan = false;
};

int cmd_gradcheck(const GradCheckArgs& args) {
    ModelConfig config;
    if (!args.config_path.empty()) {
        config = load_model_config(args.config_path);
    } else {
        // micro-model: small enough for a full finite-difference sweep
        config.canvas = 8;
        config.patch_size = 4;
        config.d = 8;
        config.d_slots = 8;
        config.d_attn = 8;
        config.mlp_hidden = 16;
        config.k_init = 3;
        config.iterations = 3;
        config.decoder_hidden = {8};
        config.merge_mode = MergeMode::kTraining;
    }

    SceneSpec scene_spec;
    scene_spec.height = config.canvas;
    scene_spec.width = config.canvas;
    scene_spec.min_objects = 2;
    scene_spec.max_objects = 2;
    scene_spec.min_size = 3;
    scene_spec.max_size = 5;
    scene_spec.seed = args.seed;
    SceneSample image = generate_scene(scene_spec, derive_seed(args.seed, 7));

    ModelParams params = ModelParams::init(config, derive_seed(args.seed, 1));
    if (args.inject_nan)
        params.enc_w.at(0) = std::numeric_limits<double>::quiet_NaN();

    std::vector<std::pair<std::string, Tensor>> leaves;
    params.for_each_param([&](const std::string& name, Tensor& t) {
        leaves.emplace_back(name, t);
    });

    ForwardOptions fwd;
    fwd.apply_merge = args.force_merge;
    fwd.tau = 0.0;  // with merging forced, merge all the way down
    fwd.slot_seed = derive_seed(args.seed, 2);

    bool ok = true;
    std::size_t n_entries = 0;
    for (const auto& [name, leaf] : leaves) n_entries += leaf.numel();

    if (!args.detach_only) {
        auto build = [&](Graph& graph) {
            ForwardOptions opts = fwd;
            opts.detach_gradients = false;
            return forward_image(graph, params, config, image, opts).loss;
        };
        GradCheckReport report = gradient_check(build, leaves, 1e-5);
        std::printf("gradcheck: worst relative error %.3e at %s[%zu] over %zu parameters\n",
                    report.max_rel_err, report.worst_leaf.c_str(), report.worst_index,
                    n_entries);
        if (report.max_rel_err >= 1e-3) ok = false;
    }

    if (args.force_merge) {
        // detach path: the absorbed slots' gradient through the merge must
        // vanish identically
        Graph graph;
        ForwardOptions opts = fwd;
        opts.detach_gradients = true;
        ForwardResult forward = forward_image(graph, params, config, image, opts);
        graph.backward(forward.loss);
        double max_abs = 0.0;
        const Tensor& premerge = forward.premerge_state.slots;
        for (const MergeStep& step : forward.trace.steps)
            for (std::size_t jcol = 0; jcol < premerge.cols(); ++jcol)
                max_abs = std::max(max_abs,
                                   std::fabs(premerge.grad()[step.absorbed * premerge.cols() +
                                                             jcol]));
        const bool zero = max_abs == 0.0;
        std::printf("gradcheck: detach zero-gradient assertion: %s "
                    "(max |grad| over absorbed slots = %.3e, %zu merges)\n",
                    zero ? "PASS" : "FAIL", max_abs, forward.trace.steps.size());
        if (!zero || forward.trace.steps.empty()) ok = false;
    } else if (args.detach_only) {
        throw UsageError("--detach requires --force-merge");
    }

    return ok ? kExitOk : kExitGradCheck;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"slot-attention autoencoder with differentiable slot merging"};
    app.require_subcommand(1);

    GenerateDataArgs gen_args;
    CLI::App* gen = app.add_subcommand("generate-data", "write a SCENES v1 dataset");
    gen->add_option("--spec", gen_args.spec_path, "scene spec file (key=value)");
    gen->add_option("--count", gen_args.count, "number of scenes");
    gen->add_option("--out", gen_args.out_path, "output path")->required();
    auto* gen_seed = gen->add_option("--seed", gen_args.seed, "generation seed");

    EstimateThresholdArgs thr_args;
    CLI::App* thr = app.add_subcommand("estimate-threshold",
                                       "calibrate the merge threshold tau");
    thr->add_option("--config", thr_args.config_path, "run config to update");
    thr->add_option("--checkpoint", thr_args.checkpoint_path, "trained-so-far checkpoint");
    thr->add_option("--data", thr_args.data_path, "SCENES v1 dataset");
    thr->add_option("--batches", thr_args.batches, "number of calibration batches");
    thr->add_option("--agg", thr_args.agg, "aggregation: mean | mean-minus-std");
    thr->add_option("--candidates", thr_args.candidates,
                    "fixture: aggregate these per-batch candidates directly");
    thr->add_option("--seed", thr_args.seed, "calibration data seed");

    TrainArgs train_args;
    CLI::App* tr = app.add_subcommand("train", "train the model");
    tr->add_option("--config", train_args.config_path, "run config")->required();
    tr->add_option("--data", train_args.data_path, "SCENES v1 dataset")->required();
    tr->add_option("--out", train_args.out_dir, "output directory")->required();
    tr->add_option("--seed", train_args.seed, "training seed");
    tr->add_option("--threads", train_args.threads, "worker threads (0 = auto)");
    tr->add_option("--resume", train_args.resume, "checkpoint to resume from");
    tr->add_option("--merge-mode", train_args.merge_mode,
                   "override merge_mode: off | inference_only | training");
    auto* force_tau_opt =
        tr->add_option("--force-tau", train_args.force_tau,
                       "test hook: fixed tau, skips calibration");

    EvalArgs eval_args;
    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--checkpoint", eval_args.checkpoint_path, "model checkpoint")->required();
    ev->add_option("--data", eval_args.data_path, "SCENES v1 dataset")->required();
    ev->add_flag("--merge-at-inference", eval_args.merge_at_inference,
                 "apply the merge policy at inference");
    ev->add_option("--masks", eval_args.masks, "mask source: decoder | attention");
    ev->add_option("--out", eval_args.out_path, "metrics JSONL output (default stdout)");
    ev->add_option("--traces", eval_args.traces_path, "merge-trace JSONL output");
    auto* tau_opt = ev->add_option("--tau", eval_args.tau, "override tau");
    ev->add_flag("--oracle-masks", eval_args.oracle_masks,
                 "fixture: score the ground truth against itself");
    ev->add_option("--seed", eval_args.seed, "slot-init seed");

    BenchArgs bench_args;
    CLI::App* bench = app.add_subcommand("bench-merge",
                                         "count merge-policy work on random instances");
    bench->add_option("--n", bench_args.n, "spatial locations");
    bench->add_option("--k", bench_args.k_list, "comma-separated slot counts");
    bench->add_option("--merges", bench_args.merges, "full | none");
    bench->add_option("--policy", bench_args.policy, "naive | incremental | both");
    bench->add_option("--repeats", bench_args.repeats, "repeats per configuration");
    bench->add_option("--seed", bench_args.seed, "instance seed");
    bench->add_option("--out", bench_args.out_path, "CSV output (default stdout)");

    GradCheckArgs gc_args;
    CLI::App* gc = app.add_subcommand("gradcheck",
                                      "finite-difference check of the micro-model");
    gc->add_option("--config", gc_args.config_path, "run config (default: micro-model)");
    gc->add_option("--seed", gc_args.seed, "seed");
    gc->add_flag("--force-merge", gc_args.force_merge, "force merges (tau = 0)");
    gc->add_flag("--detach", gc_args.detach_only,
                 "only assert the detached merge path has zero gradient");
    gc->add_flag("--inject-nan", gc_args.inject_nan, "test hook: poison a parameter");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        return kExitUsage;
    }

    gen_args.seed_set = gen_seed->count() > 0;
    train_args.force_tau_set = force_tau_opt->count() > 0;
    eval_args.tau_set = tau_opt->count() > 0;

    try {
        if (gen->parsed()) return cmd_generate_data(gen_args);
        if (thr->parsed()) return cmd_estimate_threshold(thr_args);
        if (tr->parsed()) return cmd_train(train_args);
        if (ev->parsed()) return cmd_eval(eval_args);
        if (bench->parsed()) return cmd_bench_merge(bench_args);
        if (gc->parsed()) {
            try {
                return cmd_gradcheck(gc_args);
            } catch (const CalibrationError& e) {
                std::cerr << "error: " << e.what() << "\n";
                return kExitGradCheck;  // non-finite loss during the check
            }
        }
    } catch (const SceneSpecError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitSceneSpec;
    } catch (const DegenerateHistogramError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitCalibration;
    } catch (const CalibrationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitCalibration;
    } catch (const ScheduleError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitSchedule;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFormat;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFormat;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitError;
    }
    return kExitUsage;
}
