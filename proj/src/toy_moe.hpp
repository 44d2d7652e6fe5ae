// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "expert.hpp"
#include "layout.hpp"
#include "scoring.hpp"

namespace moeprune {

struct ToyDims {
    size_t layers = 4;       // L
    size_t experts = 8;      // n
    size_t top_k = 2;        // k
    size_t hidden = 64;      // d
    size_t expert_hidden = 32;  // m
};

struct ToyLayer {
    Tensor2D router;                 // n x d
    std::vector<float> router_bias;  // empty or n entries
    std::vector<ExpertTensors> experts;
};

// In-memory MoE stack without attention: per layer, optional rms-norm on the
// input, routed expert mix, optional residual. Immutable during collection.
struct ToyMoeModel {
    std::vector<ToyLayer> layers;
    size_t top_k = 2;
    size_t hidden_dim = 0;
    bool normalize_topk = true;
    bool residual = true;
    bool rms_norm = true;
    double rms_eps = 1e-6;

    size_t num_layers() const { return layers.size(); }
    size_t experts_per_layer() const { return layers.empty() ? 0 : layers[0].experts.size(); }
    size_t routed_params() const;
};

struct Routing {
    std::vector<size_t> selected;  // ascending expert index
    std::vector<double> gates;     // aligned with selected
};

// Top-k selection over logits z = router*h (+ bias); ties pick the lower
// index. Normalized variant: softmax over the selected logits only.
// Non-normalized variant: full softmax values of the selected experts.
Routing route(std::span<const float> h, const Tensor2D& router,
              std::span<const float> bias, size_t k, bool normalize_topk);

// SwiGLU expert: down * ( silu(gate*h) .* (up*h) ).
std::vector<float> expert_forward(const ExpertTensors& e, std::span<const float> h);

struct LayerTrace {
    std::vector<size_t> selected;
    std::vector<double> gates;
    std::vector<double> activation_norms;  // ||A_i(h)||_2 per selected expert
};

// One MoE layer: y = sum over selected experts of gate * A(h'), where h' is
// the (optionally rms-normalized) input; adds the residual h if enabled.
// Summation runs in ascending expert-index order with 64-bit accumulators.
std::vector<float> moe_forward(const ToyMoeModel& model, size_t layer,
                               std::span<const float> h, LayerTrace* trace = nullptr);

// Synthetic calibration tokens: i.i.d. standard Gaussian coordinates from the
// counter-based generator. token(i) depends only on (seed, i), so a smaller
// batch is always a prefix of a larger one with the same seed.
struct TokenBatch {
    size_t count = 0;
    size_t dim = 0;
    uint64_t seed = 0;

    std::vector<float> token(size_t index) const;
};

struct RoutingStats {
    size_t num_layers = 0;
    size_t experts = 0;
    uint64_t tokens = 0;
    uint64_t seed = 0;
    // [layer][expert]
    std::vector<std::vector<uint64_t>> n;
    std::vector<std::vector<double>> sum_g;
    std::vector<std::vector<double>> sum_anorm;
    std::vector<std::vector<double>> sum_g_anorm;

    nlohmann::ordered_json to_json() const;
    void save(const std::filesystem::path& file) const;
};

struct BatchResult {
    RoutingStats stats;
    // mean over tokens of the per-token variance across hidden dims; entry 0
    // is the input, entries 1..L the layer outputs
    std::vector<double> mean_token_variance;
};

// Push every token through the stack (layer l feeds layer l+1). Tokens are
// independent and may be processed in parallel; per-token records are reduced
// in token order so the result is identical for any worker count.
BatchResult run_batch(const ToyMoeModel& model, const TokenBatch& batch, int threads = 1);

inline RoutingStats collect_stats(const ToyMoeModel& model, const TokenBatch& batch,
                                  int threads = 1) {
    return run_batch(model, batch, threads).stats;
}

// Appendix-style calibration criteria over collected statistics.
double frequency_score(const RoutingStats& stats, size_t layer, size_t expert);
double seer_score(const RoutingStats& stats, size_t layer, size_t expert);
double ean_score(const RoutingStats& stats, size_t layer, size_t expert);
// Token-averaged gate-weighted activation norm; a never-routed expert scores
// 0 and sets the flag.
double reap_score(const RoutingStats& stats, size_t layer, size_t expert,
                  bool* never_routed = nullptr);

ScoreTable scores_from_stats(const RoutingStats& stats, const Criterion& criterion,
                             const ModelLayout& layout);

// Deterministic toy checkpoint: weights are zero-mean Gaussian with scale
// 1/sqrt(d), streamed per tensor keyed by tensor name, emitted under the
// given layout preset together with a config.json. Re-running with the same
// arguments reproduces the files bit for bit.
void gen_toy_model(const std::filesystem::path& out_dir, const ModelLayout& naming,
                   const ToyDims& dims, uint64_t seed, Dtype dtype = Dtype::F32,
                   uint64_t shard_limit = 0);

// Materialize a checkpoint as an in-memory toy model (used by calibration and
// the analysis studies; callers enforce any parameter budget).
ToyMoeModel load_toy_model(const CheckpointReader& reader, const ModelLayout& layout);

} // namespace moeprune
