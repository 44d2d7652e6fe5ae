// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "expert.hpp"
#include "safetensors.hpp"

namespace moeprune {

// Maps a checkpoint family's tensor naming onto the generic MoE structure:
// name templates with {layer} / {expert} placeholders, the config keys that
// carry the structural counts, and the routing flavour. Dimensions are file
// metadata for custom layouts and are otherwise bound from a concrete
// checkpoint (bind_layout).
struct ModelLayout {
    std::string name;  // preset name, or "custom"

    std::string gate_template;
    std::string up_template;
    std::string down_template;
    std::string router_template;
    std::string router_bias_template;  // empty = family has no router bias
    std::vector<std::string> passthrough_prefixes;

    // config.json key names for the structural counts
    std::string experts_key;
    std::string topk_key;
    std::string layers_key;

    bool normalize_topk = true;

    size_t num_layers = 0;
    size_t experts_per_layer = 0;
    size_t top_k = 0;
    size_t hidden_dim = 0;  // d
    size_t expert_dim = 0;  // m

    bool has_dims() const { return num_layers && experts_per_layer && top_k && hidden_dim && expert_dim; }
    bool has_router_bias() const { return !router_bias_template.empty(); }
    size_t expert_params() const { return 3 * expert_dim * hidden_dim; }
};

// Shipped presets: "olmoe-like", "ernie-like", "qwen3-like".
ModelLayout layout_preset(const std::string& name);
// Either a preset name or a path to a layout JSON file.
ModelLayout layout_from_arg(const std::string& preset_or_file);
ModelLayout layout_from_json(const nlohmann::ordered_json& doc);
nlohmann::ordered_json layout_to_json(const ModelLayout& layout);

// FNV-1a over the canonical layout serialization (includes bound dims).
std::string layout_hash(const ModelLayout& layout);

std::string instantiate_template(const std::string& tmpl, size_t layer, size_t expert);

struct ExpertNames {
    std::string gate;
    std::string up;
    std::string down;
    std::string router;
};
// Range-checked template instantiation for one (layer, expert) pair.
ExpertNames resolve_expert(const ModelLayout& layout, size_t layer, size_t expert);

// Model config document; only the layout-recognized keys are interpreted,
// everything else is carried through verbatim (key order preserved).
struct ModelConfig {
    nlohmann::ordered_json doc;

    static ModelConfig load(const std::filesystem::path& file);
    void save(const std::filesystem::path& file) const;
    std::optional<uint64_t> get_count(const std::string& key) const;
};

ModelConfig patch_config(const ModelConfig& config, const ModelLayout& layout,
                         size_t new_expert_count);

// Fill the layout's dimensions from a concrete checkpoint (config counts +
// tensor shapes) and check that every expert/router name resolves.
ModelLayout bind_layout(ModelLayout layout, const CheckpointReader& reader,
                        const ModelConfig& config);

// Decode the three projections of one expert, validating shapes against the
// layout dims.
ExpertTensors load_expert(const CheckpointReader& reader, const ModelLayout& layout,
                          size_t layer, size_t expert);

} // namespace moeprune
