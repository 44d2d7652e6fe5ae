// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pruning.hpp"
#include "scoring.hpp"
#include "toy_moe.hpp"

namespace moeprune {

// Per-layer score rows sorted descending and min-max rescaled to [0, 1].
// A layer whose scores are all equal gets a flagged row of 0.5.
struct RankProfile {
    size_t layer_count = 0;
    size_t expert_count = 0;
    std::vector<std::vector<double>> rows;
    std::vector<bool> degenerate;
};

RankProfile rank_profile(const ScoreTable& table);

// Interquartile range of the min-max rescaled scores per layer; quartiles use
// linear interpolation between order statistics. Layers with fewer than 4
// experts are skipped (nullopt).
std::vector<std::optional<double>> separation_metric(const ScoreTable& table);

// Kendall tau-a between two rankings (permutations of the same id set).
double kendall_tau(std::span<const size_t> a, std::span<const size_t> b);

// Ranking agreement across calibration-set sizes: tau per (size pair, layer)
// plus, per size, the pruned-set overlap against the largest size at `ratio`.
struct StabilityMatrix {
    std::string criterion;
    std::vector<uint64_t> sizes;
    uint64_t seed = 0;
    double ratio = 0.0;
    // tau[a][b][layer]; symmetric with unit diagonal
    std::vector<std::vector<std::vector<double>>> tau;
    std::vector<double> overlap;  // per size, mean over layers

    double mean_tau(size_t a, size_t b) const;
};

// Batches are prefixes of one seeded token stream, mirroring growing samples
// from a fixed corpus. Weight-only criteria ignore the batch and come out
// perfectly stable by construction.
StabilityMatrix stability_study(const ToyMoeModel& model, const ModelLayout& layout,
                                const Criterion& criterion, std::vector<uint64_t> sizes,
                                uint64_t seed, double ratio = 0.25, int threads = 1);

struct VarianceCurve {
    std::string variant;
    std::vector<double> values;  // layer count + 1 entries, input first
    uint64_t tokens = 0;
    uint64_t seed = 0;
};

VarianceCurve layer_variance(const ToyMoeModel& model, const TokenBatch& batch,
                             const std::string& variant, int threads = 1);

// Drop the pruned experts (and router rows) from an in-memory model.
ToyMoeModel prune_toy_model(const ToyMoeModel& model, const PruningPlan& plan);

// CSV + SVG emission. All output is byte-deterministic for identical inputs.
// CSV schemas:
//   profile:    layer,rank,value        variance: layer,variant,value
//   stability:  size_a,size_b,layer,tau separation: layer,criterion,iqr
//   scores:     layer,expert,score      overlap (with stability): size,overlap
void export_profile(const RankProfile& profile, const std::filesystem::path& prefix);
void export_separation(const ScoreTable& table, const std::filesystem::path& prefix);
void export_scores(const ScoreTable& table, const std::filesystem::path& prefix);
void export_variance(std::span<const VarianceCurve> curves, const std::filesystem::path& prefix);
void export_stability(const StabilityMatrix& matrix, const std::filesystem::path& prefix);

} // namespace moeprune
