// SPDX-License-Identifier: Apache-2.0
#include "slotmerge/slot_attention.hpp"

#include <cmath>

namespace slotmerge {

namespace {

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> v(fan_in * fan_out);
    for (double& x : v) x = rng.uniform(-limit, limit);
    return Tensor::from({fan_in, fan_out}, std::move(v), true);
}

Tensor zeros_vec(std::size_t n) { return Tensor::zeros({n}, true); }
Tensor ones_vec(std::size_t n) { return Tensor::full({n}, 1.0, true); }

}  // namespace

SlotAttentionParams SlotAttentionParams::init(std::size_t d_input, std::size_t d_slots,
                                              std::size_t d_attn, std::size_t mlp_hidden,
                                              bool mlp_residual, Rng& rng) {
    SlotAttentionParams p;
    p.d_input = d_input;
    p.d_slots = d_slots;
    p.d_attn = d_attn;
    p.mlp_hidden = mlp_hidden;
    p.mlp_residual = mlp_residual;

    {
        const double limit = std::sqrt(6.0 / static_cast<double>(1 + d_slots));
        std::vector<double> mu(d_slots);
        for (double& x : mu) x = rng.uniform(-limit, limit);
        p.mu = Tensor::from({d_slots}, std::move(mu), true);
        p.log_sigma = zeros_vec(d_slots);  // sigma starts at 1
    }

    p.w_q = xavier_uniform(d_slots, d_attn, rng);
    p.w_k = xavier_uniform(d_input, d_attn, rng);
    p.w_v = xavier_uniform(d_input, d_attn, rng);

    p.gru_wz = xavier_uniform(d_attn, d_slots, rng);
    p.gru_wr = xavier_uniform(d_attn, d_slots, rng);
    p.gru_wn = xavier_uniform(d_attn, d_slots, rng);
    p.gru_uz = xavier_uniform(d_slots, d_slots, rng);
    p.gru_ur = xavier_uniform(d_slots, d_slots, rng);
    p.gru_un = xavier_uniform(d_slots, d_slots, rng);
    p.gru_bz = zeros_vec(d_slots);
    p.gru_br = zeros_vec(d_slots);
    p.gru_bn = zeros_vec(d_slots);

    p.mlp_w1 = xavier_uniform(d_slots, mlp_hidden, rng);
    p.mlp_b1 = zeros_vec(mlp_hidden);
    p.mlp_w2 = xavier_uniform(mlp_hidden, d_slots, rng);
    p.mlp_b2 = zeros_vec(d_slots);

    p.norm_input_gain = ones_vec(d_input);
    p.norm_input_bias = zeros_vec(d_input);
    p.norm_slots_gain = ones_vec(d_slots);
    p.norm_slots_bias = zeros_vec(d_slots);
    p.norm_mlp_gain = ones_vec(d_slots);
    p.norm_mlp_bias = zeros_vec(d_slots);
    return p;
}

void SlotAttentionParams::for_each(
    const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("slotattn.mu", mu);
    fn("slotattn.log_sigma", log_sigma);
    fn("slotattn.w_q", w_q);
    fn("slotattn.w_k", w_k);
    fn("slotattn.w_v", w_v);
    fn("slotattn.gru_wz", gru_wz);
    fn("slotattn.gru_wr", gru_wr);
    fn("slotattn.gru_wn", gru_wn);
    fn("slotattn.gru_uz", gru_uz);
    fn("slotattn.gru_ur", gru_ur);
    fn("slotattn.gru_un", gru_un);
    fn("slotattn.gru_bz", gru_bz);
    fn("slotattn.gru_br", gru_br);
    fn("slotattn.gru_bn", gru_bn);
    fn("slotattn.mlp_w1", mlp_w1);
    fn("slotattn.mlp_b1", mlp_b1);
    fn("slotattn.mlp_w2", mlp_w2);
    fn("slotattn.mlp_b2", mlp_b2);
    fn("slotattn.norm_input_gain", norm_input_gain);
    fn("slotattn.norm_input_bias", norm_input_bias);
    fn("slotattn.norm_slots_gain", norm_slots_gain);
    fn("slotattn.norm_slots_bias", norm_slots_bias);
    fn("slotattn.norm_mlp_gain", norm_mlp_gain);
    fn("slotattn.norm_mlp_bias", norm_mlp_bias);
}

SlotState init_slots(Graph& graph, const SlotAttentionParams& params, std::size_t k,
                     std::uint64_t seed) {
    if (k == 0) throw ConfigError("init_slots: slot count must be at least 1");
    const std::size_t d = params.d_slots;
    Rng rng(seed);
    std::vector<double> noise(k * d);
    for (double& x : noise) x = rng.normal();
    Tensor eps = Tensor::from({k, d}, std::move(noise));

    Tensor mu_rows = graph.tile_rows(params.mu, k);
    Tensor sigma_rows = graph.tile_rows(graph.exp(params.log_sigma), k);
    Tensor slots = graph.add(mu_rows, graph.mul(sigma_rows, eps));

    SlotState state;
    state.slots = slots;
    state.active.assign(k, true);
    return state;
}

AttentionStepResult attention_step(Graph& graph, const SlotAttentionParams& params,
                                   const FeatureGrid& features, const SlotState& state) {
    if (state.active_count() == 0)
        throw StateError("attention_step: no active slots");
    const std::size_t k = state.slots.rows();
    if (features.values.cols() != params.d_input)
        throw DimensionError("attention_step: feature width does not match params");

    Tensor x_norm = graph.layernorm(features.values, params.norm_input_gain,
                                    params.norm_input_bias);
    Tensor keys = graph.matmul(x_norm, params.w_k);    // N x d_attn
    Tensor values = graph.matmul(x_norm, params.w_v);  // N x d_attn

    Tensor s_norm = graph.layernorm(state.slots, params.norm_slots_gain,
                                    params.norm_slots_bias);
    Tensor queries = graph.matmul(s_norm, params.w_q);  // K x d_attn

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(params.d_attn));
    Tensor logits = graph.scale(graph.matmul(keys, graph.transpose(queries)), inv_sqrt_d);
    Tensor attention = graph.softmax_masked_cols(logits, state.active);  // N x K

    // Per-slot normalized weighted mean of the values.
    Tensor col_mass = graph.sum(attention, 0);                       // K
    Tensor attn_norm = graph.div_rowvec(attention, col_mass, 1e-8);  // N x K
    Tensor update = graph.matmul(graph.transpose(attn_norm), values);  // K x d_attn

    // GRU update over slot rows.
    Tensor z = graph.sigmoid(graph.add_rowvec(
        graph.add(graph.matmul(update, params.gru_wz), graph.matmul(state.slots, params.gru_uz)),
        params.gru_bz));
    Tensor r = graph.sigmoid(graph.add_rowvec(
        graph.add(graph.matmul(update, params.gru_wr), graph.matmul(state.slots, params.gru_ur)),
        params.gru_br));
    Tensor n = graph.tanh(graph.add_rowvec(
        graph.add(graph.matmul(update, params.gru_wn),
                  graph.mul(r, graph.matmul(state.slots, params.gru_un))),
        params.gru_bn));
    Tensor ones = Tensor::full({k, params.d_slots}, 1.0);
    Tensor gated = graph.add(graph.mul(graph.sub(ones, z), n), graph.mul(z, state.slots));

    Tensor pre_mlp = graph.layernorm(gated, params.norm_mlp_gain, params.norm_mlp_bias);
    Tensor hidden = graph.relu(graph.linear(pre_mlp, params.mlp_w1, params.mlp_b1));
    Tensor mlp_out = graph.linear(hidden, params.mlp_w2, params.mlp_b2);
    Tensor new_slots = params.mlp_residual ? graph.add(gated, mlp_out) : mlp_out;

    AttentionStepResult result;
    result.attention = attention;
    result.weighted_update = update;
    result.state.slots = new_slots;
    result.state.active = state.active;
    return result;
}

SlotAttentionResult run_slot_attention(Graph& graph, const SlotAttentionParams& params,
                                       const FeatureGrid& features, std::size_t k,
                                       std::size_t iterations, std::uint64_t seed) {
    return run_slot_attention_from(graph, params, features,
                                   init_slots(graph, params, k, seed), iterations);
}

SlotAttentionResult run_slot_attention_from(Graph& graph, const SlotAttentionParams& params,
                                            const FeatureGrid& features, SlotState initial,
                                            std::size_t iterations) {
    if (iterations == 0) throw ConfigError("run_slot_attention: iterations must be >= 1");
    SlotState state = std::move(initial);
    Tensor attention;
    for (std::size_t t = 0; t < iterations; ++t) {
        AttentionStepResult step = attention_step(graph, params, features, state);
        state = std::move(step.state);
        attention = std::move(step.attention);
    }
    return {std::move(state), std::move(attention)};
}

}  // namespace slotmerge
