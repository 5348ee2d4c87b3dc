// SPDX-License-Identifier: Apache-2.0
#include "slotmerge/model.hpp"

#include <cmath>

namespace slotmerge {

namespace {

Tensor xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> v(fan_in * fan_out);
    for (double& x : v) x = rng.uniform(-limit, limit);
    return Tensor::from({fan_in, fan_out}, std::move(v), true);
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    ModelParams p;
    p.canvas = config.canvas;
    p.patch_size = config.patch_size;

    const std::size_t patch_dim = 3 * config.patch_size * config.patch_size;
    p.enc_w = xavier(patch_dim, config.d, rng);
    p.enc_b = Tensor::zeros({config.d}, true);
    {
        std::vector<double> pos(config.n_patches() * config.d);
        for (double& x : pos) x = 0.02 * rng.normal();
        p.enc_pos = Tensor::from({config.n_patches(), config.d}, std::move(pos), true);
    }
    p.enc_norm_gain = Tensor::full({config.d}, 1.0, true);
    p.enc_norm_bias = Tensor::zeros({config.d}, true);

    p.slot_attn = SlotAttentionParams::init(config.d, config.d_slots, config.d_attn,
                                            config.mlp_hidden, config.mlp_residual, rng);

    p.dec_pos_w = xavier(2, config.d_slots, rng);
    p.dec_pos_b = Tensor::zeros({config.d_slots}, true);

    std::size_t in_width = config.d_slots;
    for (std::size_t hidden : config.decoder_hidden) {
        p.dec_w.push_back(xavier(in_width, hidden, rng));
        p.dec_b.push_back(Tensor::zeros({hidden}, true));
        in_width = hidden;
    }
    p.dec_w.push_back(xavier(in_width, 4, rng));  // RGB + alpha logit
    p.dec_b.push_back(Tensor::zeros({4}, true));
    return p;
}

void ModelParams::for_each_param(
    const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("enc.w", enc_w);
    fn("enc.b", enc_b);
    fn("enc.pos", enc_pos);
    fn("enc.norm_gain", enc_norm_gain);
    fn("enc.norm_bias", enc_norm_bias);
    slot_attn.for_each(fn);
    fn("dec.pos_w", dec_pos_w);
    fn("dec.pos_b", dec_pos_b);
    for (std::size_t i = 0; i < dec_w.size(); ++i) {
        fn("dec.w" + std::to_string(i), dec_w[i]);
        fn("dec.b" + std::to_string(i), dec_b[i]);
    }
}

ModelParams ModelParams::clone() const {
    ModelParams copy = *this;
    auto clone_tensor = [](const std::string&, Tensor& t) { t = t.clone(true); };
    copy.for_each_param(clone_tensor);
    return copy;
}

FeatureGrid encode(Graph& graph, const ModelParams& params, const SceneSample& image) {
    const std::size_t canvas = params.canvas, patch = params.patch_size;
    if (image.height != canvas || image.width != canvas)
        throw ConfigError("encode: image size does not match model canvas");
    if (canvas % patch != 0)
        throw ConfigError("encode: canvas not divisible by patch size");
    const std::size_t grid = canvas / patch;
    const std::size_t n = grid * grid;
    const std::size_t patch_dim = 3 * patch * patch;

    std::vector<double> patches(n * patch_dim);
    for (std::size_t gy = 0; gy < grid; ++gy) {
        for (std::size_t gx = 0; gx < grid; ++gx) {
            double* row = patches.data() + (gy * grid + gx) * patch_dim;
            std::size_t idx = 0;
            for (std::size_t py = 0; py < patch; ++py) {
                for (std::size_t px = 0; px < patch; ++px) {
                    const std::size_t pixel = (gy * patch + py) * canvas + (gx * patch + px);
                    for (std::size_t c = 0; c < 3; ++c)
                        row[idx++] = image.image[pixel * 3 + c];
                }
            }
        }
    }
    Tensor patch_matrix = Tensor::from({n, patch_dim}, std::move(patches));
    Tensor projected = graph.linear(patch_matrix, params.enc_w, params.enc_b);
    Tensor with_pos = graph.add(projected, params.enc_pos);
    Tensor normed = graph.layernorm(with_pos, params.enc_norm_gain, params.enc_norm_bias);

    FeatureGrid features;
    features.values = normed;
    features.patch_rows = grid;
    features.patch_cols = grid;
    return features;
}

namespace {

// Normalized pixel-center coordinates in [-1, 1], x then y.
Tensor pixel_coords(std::size_t canvas) {
    std::vector<double> coords(canvas * canvas * 2);
    for (std::size_t y = 0; y < canvas; ++y) {
        for (std::size_t x = 0; x < canvas; ++x) {
            const std::size_t p = y * canvas + x;
            coords[p * 2 + 0] = (2.0 * (static_cast<double>(x) + 0.5)) /
                                    static_cast<double>(canvas) - 1.0;
            coords[p * 2 + 1] = (2.0 * (static_cast<double>(y) + 0.5)) /
                                    static_cast<double>(canvas) - 1.0;
        }
    }
    return Tensor::from({canvas * canvas, 2}, std::move(coords));
}

}  // namespace

DecodeResult decode(Graph& graph, const ModelParams& params, const SlotState& state) {
    const std::size_t n_active = state.active_count();
    if (n_active == 0) throw StateError("decode: no active slots");
    const std::size_t k = state.slots.rows();
    const std::size_t pixels = params.canvas * params.canvas;

    Tensor pos = graph.linear(pixel_coords(params.canvas), params.dec_pos_w,
                              params.dec_pos_b);  // pixels x d_slots

    std::vector<std::size_t> active_idx;
    for (std::size_t s = 0; s < k; ++s)
        if (state.active[s]) active_idx.push_back(s);

    std::vector<Tensor> rgb_parts, alpha_parts;
    rgb_parts.reserve(n_active);
    alpha_parts.reserve(n_active);
    for (std::size_t s : active_idx) {
        Tensor slot_row = graph.slice(state.slots, 0, s, 1);  // 1 x d_slots
        Tensor x = graph.add_rowvec(pos, slot_row);
        for (std::size_t layer = 0; layer + 1 < params.dec_w.size(); ++layer)
            x = graph.relu(graph.linear(x, params.dec_w[layer], params.dec_b[layer]));
        Tensor out = graph.linear(x, params.dec_w.back(), params.dec_b.back());  // pixels x 4
        rgb_parts.push_back(graph.slice(out, 1, 0, 3));
        alpha_parts.push_back(graph.slice(out, 1, 3, 1));
    }

    Tensor alpha_logits = graph.concat_cols(alpha_parts);       // pixels x n_active
    Tensor alphas = graph.softmax(alpha_logits, 1);

    Tensor reconstruction;
    for (std::size_t r = 0; r < active_idx.size(); ++r) {
        Tensor weighted = graph.mul_colvec(
            rgb_parts[r], graph.slice(alphas, 1, r, 1));
        reconstruction = r == 0 ? weighted : graph.add(reconstruction, weighted);
    }

    DecodeResult result;
    result.reconstruction = reconstruction;
    result.alphas_active = alphas;
    result.alphas_full.assign(pixels * k, 0.0);
    for (std::size_t r = 0; r < active_idx.size(); ++r)
        for (std::size_t p = 0; p < pixels; ++p)
            result.alphas_full[p * k + active_idx[r]] = alphas.at(p, r);
    return result;
}

Tensor reconstruction_loss(Graph& graph, const Tensor& reconstruction,
                           const SceneSample& image) {
    const std::size_t pixels = image.height * image.width;
    if (reconstruction.rows() != pixels || reconstruction.cols() != 3)
        throw DimensionError("reconstruction_loss: shape mismatch");
    Tensor target = Tensor::from({pixels, 3}, image.image);
    Tensor diff = graph.sub(reconstruction, target);
    Tensor squared = graph.mul(diff, diff);
    return graph.scale(graph.sum_all(squared), 1.0 / static_cast<double>(pixels * 3));
}

ForwardResult forward_image(Graph& graph, const ModelParams& params,
                            const ModelConfig& config, const SceneSample& image,
                            const ForwardOptions& options) {
    FeatureGrid features = encode(graph, params, image);
    SlotAttentionResult attn = run_slot_attention(graph, params.slot_attn, features,
                                                  config.k_init, config.iterations,
                                                  options.slot_seed);

    ForwardResult result;
    result.premerge_state = attn.state;
    result.premerge_attention = attn.attention;

    if (options.apply_merge) {
        if (!options.tau)
            throw ScheduleError("merging requested but tau is unset");
        MergePolicyConfig policy;
        policy.tau = *options.tau;
        policy.detach_gradients = options.detach_gradients;
        policy.update_attention = options.update_attention;
        MergePolicyResult merged = merge_policy_incremental(graph, attn.state,
                                                            attn.attention, policy);
        result.state = std::move(merged.state);
        result.attention = std::move(merged.attention);
        result.trace = std::move(merged.trace);
    } else {
        result.state = attn.state;
        result.attention = attn.attention;
        result.trace.active_after = attn.state.active_count();
    }

    result.decoded = decode(graph, params, result.state);
    result.loss = reconstruction_loss(graph, result.decoded.reconstruction, image);
    return result;
}

std::vector<std::vector<double>> collect_overlaps(const ModelParams& params,
                                                  const ModelConfig& config,
                                                  const std::vector<SceneSample>& data,
                                                  std::size_t n_batches,
                                                  std::uint64_t seed) {
    if (data.empty()) throw DataError("collect_overlaps: empty dataset");
    if (n_batches < 1) throw CalibrationError("collect_overlaps: need at least one batch");
    if (config.k_init < 2)
        throw CalibrationError("collect_overlaps: no slot pairs with k_init < 2");

    std::vector<std::vector<double>> per_batch(n_batches);
    std::size_t cursor = 0;
    for (std::size_t b = 0; b < n_batches; ++b) {
        for (std::size_t i = 0; i < config.batch_size; ++i) {
            const SceneSample& image = data[cursor % data.size()];
            const std::uint64_t slot_seed = derive_seed(seed, cursor);
            ++cursor;

            Graph graph(false);
            FeatureGrid features = encode(graph, params, image);
            SlotAttentionResult attn = run_slot_attention(graph, params.slot_attn, features,
                                                          config.k_init, config.iterations,
                                                          slot_seed);
            const Tensor& a = attn.attention;
            const std::size_t rows = a.rows(), k = a.cols();
            std::vector<double> col_i(rows), col_j(rows);
            for (std::size_t si = 0; si < k; ++si) {
                for (std::size_t n = 0; n < rows; ++n) col_i[n] = a.at(n, si);
                for (std::size_t sj = si + 1; sj < k; ++sj) {
                    for (std::size_t n = 0; n < rows; ++n) col_j[n] = a.at(n, sj);
                    per_batch[b].push_back(soft_iou(col_i, col_j));
                }
            }
        }
    }
    return per_batch;
}

}  // namespace slotmerge
