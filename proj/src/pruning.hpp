// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "layout.hpp"
#include "scoring.hpp"

namespace moeprune {

// Which experts each layer keeps and drops, plus the provenance needed to
// refuse applying a plan to the wrong checkpoint. Every layer drops the same
// count; survivors are renumbered in original order.
struct PruningPlan {
    double ratio = 0.0;
    std::string criterion;
    std::string score_table_hash;
    std::string layout_hash;
    nlohmann::ordered_json layout;

    struct Layer {
        std::vector<size_t> pruned;    // sorted ascending
        std::vector<size_t> retained;  // sorted ascending
    };
    std::vector<Layer> layers;

    size_t prune_count() const { return layers.empty() ? 0 : layers[0].pruned.size(); }
    size_t retained_count() const { return layers.empty() ? 0 : layers[0].retained.size(); }
    // old->new index map; order-preserving on retained ids
    size_t old_to_new(size_t layer, size_t old_id) const;
    bool is_retained(size_t layer, size_t old_id) const;

    nlohmann::ordered_json to_json() const;
    static PruningPlan from_json(const nlohmann::ordered_json& doc);
    static PruningPlan load(const std::filesystem::path& file);
    void save(const std::filesystem::path& file) const;
};

// p = round-half-up(ratio * n) experts per layer, taken from the most-prunable
// end of each layer's ranking. Fails if fewer than top-k experts would remain,
// naming the largest feasible ratio.
PruningPlan make_plan(const ScoreTable& table, double ratio);

// Diagnostic plan that prunes nothing (used for round-trip checks).
PruningPlan make_empty_plan(const ScoreTable& table);

// Out-of-place surgery: drop pruned expert tensors, renumber survivors, slice
// retained router rows (and bias entries), copy passthrough tensors verbatim,
// patch the config. Refuses when the plan's layout hash does not match.
void apply_plan(const CheckpointReader& reader, const ModelLayout& layout,
                const PruningPlan& plan, const std::filesystem::path& out_dir,
                uint64_t shard_limit = 0);

struct VerifyReport {
    struct Check {
        std::string name;
        bool pass;
        std::string detail;
    };
    std::vector<Check> checks;
    size_t original_expert_params = 0;
    size_t pruned_expert_params = 0;

    bool all_pass() const;
    std::vector<std::string> failures() const;
    nlohmann::ordered_json to_json() const;
    std::string to_text() const;
};

// Structural audit of a pruned checkpoint against its original and plan:
// tensor counts, router shapes, survivor payload equality, passthrough
// byte-equality, config patch, parameter accounting.
VerifyReport verify_pruned(const CheckpointReader& original, const CheckpointReader& pruned,
                           const PruningPlan& plan, const ModelLayout& layout);

} // namespace moeprune
