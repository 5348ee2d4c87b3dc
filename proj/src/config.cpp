// SPDX-License-Identifier: Apache-2.0
#include "slotmerge/config.hpp"

#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace slotmerge {

MergeMode parse_merge_mode(const std::string& name) {
    if (name == "off") return MergeMode::kOff;
    if (name == "inference_only") return MergeMode::kInferenceOnly;
    if (name == "training") return MergeMode::kTraining;
    throw ConfigError("unknown merge_mode: " + name);
}

std::string merge_mode_name(MergeMode mode) {
    switch (mode) {
        case MergeMode::kOff: return "off";
        case MergeMode::kInferenceOnly: return "inference_only";
        case MergeMode::kTraining: return "training";
    }
    return "off";
}

void ModelConfig::validate() const {
    if (patch_size == 0 || canvas % patch_size != 0)
        throw ConfigError("canvas must be divisible by patch_size");
    if (k_init < 1) throw ConfigError("k_init must be at least 1");
    if (iterations < 1) throw ConfigError("iterations must be at least 1");
    if (d == 0 || d_slots == 0 || d_attn == 0 || mlp_hidden == 0)
        throw ConfigError("model widths must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (lr_peak <= 0.0 || lr_min <= 0.0) throw ConfigError("learning rates must be positive");
    if (tau && (*tau < 0.0 || *tau > 1.0)) throw ConfigError("tau must lie in [0,1]");
    if (calib_batches < 1) throw ConfigError("calib_batches must be at least 1");
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

std::vector<std::size_t> parse_size_list(const std::string& value) {
    std::vector<std::size_t> out;
    std::istringstream list(value);
    std::string item;
    while (std::getline(list, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(std::stoul(item));
    }
    return out;
}

bool parse_bool(const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("expected boolean, got: " + value);
}

}  // namespace

ModelConfig parse_model_config(const std::string& text) {
    ModelConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        if (trim(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            if (key == "canvas") cfg.canvas = std::stoul(value);
            else if (key == "patch_size") cfg.patch_size = std::stoul(value);
            else if (key == "d") cfg.d = std::stoul(value);
            else if (key == "d_slots") cfg.d_slots = std::stoul(value);
            else if (key == "d_attn") cfg.d_attn = std::stoul(value);
            else if (key == "mlp_hidden") cfg.mlp_hidden = std::stoul(value);
            else if (key == "k_init") cfg.k_init = std::stoul(value);
            else if (key == "iterations") cfg.iterations = std::stoul(value);
            else if (key == "decoder_hidden") cfg.decoder_hidden = parse_size_list(value);
            else if (key == "mlp_residual") cfg.mlp_residual = parse_bool(value);
            else if (key == "merge_mode") cfg.merge_mode = parse_merge_mode(value);
            else if (key == "merge_start_epoch") cfg.merge_start_epoch = std::stoul(value);
            else if (key == "detach_gradients") cfg.detach_gradients = parse_bool(value);
            else if (key == "update_attention") cfg.update_attention = parse_bool(value);
            else if (key == "tau") {
                if (value != "unset") cfg.tau = std::stod(value);
            }
            else if (key == "calib_batches") cfg.calib_batches = std::stoul(value);
            else if (key == "tau_aggregation") cfg.tau_aggregation = value;
            else if (key == "epochs") cfg.epochs = std::stoul(value);
            else if (key == "batch_size") cfg.batch_size = std::stoul(value);
            else if (key == "lr_peak") cfg.lr_peak = std::stod(value);
            else if (key == "lr_min") cfg.lr_min = std::stod(value);
            else if (key == "warmup_steps") cfg.warmup_steps = std::stoul(value);
            else if (key == "clip_inf_norm") cfg.clip_inf_norm = std::stod(value);
            else throw ConfigError("unknown config key: " + key);
        } catch (const std::invalid_argument&) {
            throw ConfigError("config line " + std::to_string(line_no) + ": bad value for " +
                              key);
        }
    }
    cfg.validate();
    return cfg;
}

ModelConfig load_model_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse_model_config(buffer.str());
}

std::string serialize_model_config(const ModelConfig& config) {
    std::ostringstream out;
    out << "canvas = " << config.canvas << "\n";
    out << "patch_size = " << config.patch_size << "\n";
    out << "d = " << config.d << "\n";
    out << "d_slots = " << config.d_slots << "\n";
    out << "d_attn = " << config.d_attn << "\n";
    out << "mlp_hidden = " << config.mlp_hidden << "\n";
    out << "k_init = " << config.k_init << "\n";
    out << "iterations = " << config.iterations << "\n";
    out << "decoder_hidden = ";
    for (std::size_t i = 0; i < config.decoder_hidden.size(); ++i)
        out << (i ? "," : "") << config.decoder_hidden[i];
    out << "\n";
    out << "mlp_residual = " << (config.mlp_residual ? "true" : "false") << "\n";
    out << "merge_mode = " << merge_mode_name(config.merge_mode) << "\n";
    out << "merge_start_epoch = " << config.merge_start_epoch << "\n";
    out << "detach_gradients = " << (config.detach_gradients ? "true" : "false") << "\n";
    out << "update_attention = " << (config.update_attention ? "true" : "false") << "\n";
    out.precision(17);
    if (config.tau) out << "tau = " << *config.tau << "\n";
    else out << "tau = unset\n";
    out << "calib_batches = " << config.calib_batches << "\n";
    out << "tau_aggregation = " << config.tau_aggregation << "\n";
    out << "epochs = " << config.epochs << "\n";
    out << "batch_size = " << config.batch_size << "\n";
    out << "lr_peak = " << config.lr_peak << "\n";
    out << "lr_min = " << config.lr_min << "\n";
    out << "warmup_steps = " << config.warmup_steps << "\n";
    out << "clip_inf_norm = " << config.clip_inf_norm << "\n";
    return out.str();
}

void save_model_config(const std::string& path, const ModelConfig& config) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw ConfigError("cannot write config file: " + tmp);
        out << serialize_model_config(config);
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace slotmerge
