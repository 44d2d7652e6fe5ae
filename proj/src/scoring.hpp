// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "expert.hpp"
#include "layout.hpp"

namespace moeprune {

// Which end of the sorted score vector gets pruned first.
enum class PruneEnd { highest, lowest };

struct Criterion {
    enum class Id { aimer, magnitude, hoyer, random, frequency, seer, ean, reap };

    Id id = Id::aimer;
    PruneEnd prune_end = PruneEnd::highest;
    bool requires_calibration = false;

    static Criterion from_name(const std::string& name);
    const char* name() const;
    bool weight_only() const { return !requires_calibration; }
};

// Ratio of mean absolute weight to root-mean-square weight, computed over the
// expert's three projections: P / sqrt(N * Q). Always in [1/sqrt(N), 1] for a
// nonzero expert. An all-zero expert scores 1.0 (pruned first) and sets the
// degenerate flag.
double aimer_score(const ExpertTensors& e, bool* degenerate = nullptr);

// Same criterion on the flattened parameter vector: ||w||_1 / (sqrt(N) ||w||_2).
double aimer_score_vec(std::span<const float> w, bool* degenerate = nullptr);

// Mean absolute weight P / N.
double magnitude_score(const ExpertTensors& e);
double magnitude_score_vec(std::span<const float> w);

// (sqrt(N) - ||w||_1/||w||_2) / (sqrt(N) - 1). Requires N >= 2 and w nonzero.
double hoyer_score(std::span<const float> w);

// Deterministic per-layer baseline scores from the counter-based generator;
// identical across runs, platforms and thread counts.
std::vector<double> random_scores(size_t n, size_t layer, uint64_t seed);

struct RankedLayer {
    size_t layer = 0;
    // expert ids from most-prunable to least-prunable
    std::vector<size_t> order;
};

// Sort expert ids by score toward the criterion's prune end; ties broken by
// lower expert index. order[0..p-1] are the pruned ids for any prune count p.
RankedLayer rank_layer(std::span<const double> scores, const Criterion& criterion,
                       size_t layer = 0);

struct ScoreTable {
    Criterion criterion;
    std::vector<std::vector<double>> layers;  // [layer][expert]
    std::optional<uint64_t> seed;             // random / calibration criteria
    std::optional<uint64_t> calibration_tokens;
    double timing_seconds = 0.0;
    std::string layout_hash;
    nlohmann::ordered_json layout;            // layout the scores were computed under
    std::vector<std::pair<size_t, size_t>> degenerate_experts;

    size_t num_layers() const { return layers.size(); }
    size_t experts_per_layer() const { return layers.empty() ? 0 : layers[0].size(); }

    nlohmann::ordered_json to_json() const;
    static ScoreTable from_json(const nlohmann::ordered_json& doc);
    static ScoreTable load(const std::filesystem::path& file);
    void save(const std::filesystem::path& file) const;

    // FNV-1a over the canonical serialization; used as plan provenance.
    std::string hash() const;
};

// Score every expert of a checkpoint with a weight-only criterion. Streams
// one expert at a time; `threads` workers fill pre-sized slots so the result
// is independent of the thread count.
ScoreTable score_checkpoint(const CheckpointReader& reader, const ModelLayout& layout,
                            const Criterion& criterion,
                            std::optional<uint64_t> seed = std::nullopt, int threads = 1);

} // namespace moeprune
