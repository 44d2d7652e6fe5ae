// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0

#include "layout.hpp"

#include <fstream>

#include <fmt/format.h>

#include "errors.hpp"

namespace fs = std::filesystem;

namespace moeprune {

namespace {

ModelLayout base_expert_naming() {
    ModelLayout l;
    l.gate_template = "model.layers.{layer}.mlp.experts.{expert}.gate_proj.weight";
    l.up_template = "model.layers.{layer}.mlp.experts.{expert}.up_proj.weight";
    l.down_template = "model.layers.{layer}.mlp.experts.{expert}.down_proj.weight";
    l.router_template = "model.layers.{layer}.mlp.gate.weight";
    l.passthrough_prefixes = {"model.embed_tokens.", "model.norm.", "lm_head."};
    return l;
}

} // namespace

ModelLayout layout_preset(const std::string& name) {
    ModelLayout l = base_expert_naming();
    l.name = name;
    if (name == "qwen3-like") {
        l.experts_key = "num_experts";
        l.topk_key = "num_experts_per_tok";
        l.layers_key = "num_hidden_layers";
        l.normalize_topk = true;
    } else if (name == "olmoe-like") {
        l.experts_key = "num_experts";
        l.topk_key = "num_experts_per_tok";
        l.layers_key = "num_hidden_layers";
        l.normalize_topk = false;
    } else if (name == "ernie-like") {
        l.experts_key = "moe_num_experts";
        l.topk_key = "moe_k";
        l.layers_key = "num_hidden_layers";
        l.normalize_topk = true;
        l.router_bias_template = "model.layers.{layer}.mlp.moe_statics.e_score_correction_bias";
    } else {
        throw validation_error(fmt::format("unknown layout preset '{}' "
                                           "(expected olmoe-like, ernie-like or qwen3-like)", name));
    }
    return l;
}

ModelLayout layout_from_arg(const std::string& preset_or_file) {
    if (preset_or_file == "olmoe-like" || preset_or_file == "ernie-like" ||
        preset_or_file == "qwen3-like") {
        return layout_preset(preset_or_file);
    }
    std::ifstream in(preset_or_file);
    if (!in) {
        throw validation_error(fmt::format("'{}' is neither a layout preset nor a readable file",
                               preset_or_file));
    }
    nlohmann::ordered_json doc;
    try {
        doc = nlohmann::ordered_json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw format_error(fmt::format("'{}': malformed layout JSON: {}", preset_or_file, e.what()));
    }
    return layout_from_json(doc);
}

ModelLayout layout_from_json(const nlohmann::ordered_json& doc) {
    ModelLayout l;
    try {
        l.name = doc.value("name", std::string("custom"));
        l.gate_template = doc.at("expert_templates").at("gate").get<std::string>();
        l.up_template = doc.at("expert_templates").at("up").get<std::string>();
        l.down_template = doc.at("expert_templates").at("down").get<std::string>();
        l.router_template = doc.at("router_template").get<std::string>();
        l.router_bias_template = doc.value("router_bias_template", std::string());
        if (doc.contains("passthrough_prefixes")) {
            l.passthrough_prefixes = doc["passthrough_prefixes"].get<std::vector<std::string>>();
        }
        if (doc.contains("config_keys")) {
            const auto& keys = doc["config_keys"];
            l.experts_key = keys.value("experts", std::string());
            l.topk_key = keys.value("top_k", std::string());
            l.layers_key = keys.value("layers", std::string());
        }
        l.normalize_topk = doc.value("normalize_topk", true);
        l.num_layers = doc.value("num_layers", size_t{0});
        l.experts_per_layer = doc.value("experts_per_layer", size_t{0});
        l.top_k = doc.value("top_k", size_t{0});
        l.hidden_dim = doc.value("hidden_dim", size_t{0});
        l.expert_dim = doc.value("expert_dim", size_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw format_error(fmt::format("layout JSON: {}", e.what()));
    }
    for (const auto* tmpl : {&l.gate_template, &l.up_template, &l.down_template}) {
        if (tmpl->find("{layer}") == std::string::npos ||
            tmpl->find("{expert}") == std::string::npos) {
            throw validation_error(fmt::format("expert template '{}' must contain {{layer}} and {{expert}}",
                                   *tmpl));
        }
    }
    if (l.router_template.find("{layer}") == std::string::npos) {
        throw validation_error("router template must contain {layer}");
    }
    if (l.experts_per_layer && l.top_k && l.experts_per_layer < l.top_k) {
        throw validation_error(fmt::format("experts_per_layer {} < top_k {}",
                               l.experts_per_layer, l.top_k));
    }
    return l;
}

nlohmann::ordered_json layout_to_json(const ModelLayout& l) {
    nlohmann::ordered_json doc;
    doc["name"] = l.name;
    doc["expert_templates"] = {{"gate", l.gate_template},
                               {"up", l.up_template},
                               {"down", l.down_template}};
    doc["router_template"] = l.router_template;
    if (!l.router_bias_template.empty()) doc["router_bias_template"] = l.router_bias_template;
    doc["passthrough_prefixes"] = l.passthrough_prefixes;
    doc["config_keys"] = {{"experts", l.experts_key},
                          {"top_k", l.topk_key},
                          {"layers", l.layers_key}};
    doc["normalize_topk"] = l.normalize_topk;
    if (l.num_layers) doc["num_layers"] = l.num_layers;
    if (l.experts_per_layer) doc["experts_per_layer"] = l.experts_per_layer;
    if (l.top_k) doc["top_k"] = l.top_k;
    if (l.hidden_dim) doc["hidden_dim"] = l.hidden_dim;
    if (l.expert_dim) doc["expert_dim"] = l.expert_dim;
    return doc;
}

std::string layout_hash(const ModelLayout& layout) {
    const std::string canon = layout_to_json(layout).dump();
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : canon) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return fmt::format("fnv1a:{:016x}", h);
}

std::string instantiate_template(const std::string& tmpl, size_t layer, size_t expert) {
    std::string out = tmpl;
    auto replace_all = [&out](const std::string& what, const std::string& with) {
        size_t pos = 0;
        while ((pos = out.find(what, pos)) != std::string::npos) {
            out.replace(pos, what.size(), with);
            pos += with.size();
        }
    };
    replace_all("{layer}", std::to_string(layer));
    replace_all("{expert}", std::to_string(expert));
    return out;
}

ExpertNames resolve_expert(const ModelLayout& layout, size_t layer, size_t expert) {
    if (layout.num_layers && layer >= layout.num_layers) {
        throw validation_error(fmt::format("layer {} out of range (model has {})",
                               layer, layout.num_layers));
    }
    if (layout.experts_per_layer && expert >= layout.experts_per_layer) {
        throw validation_error(fmt::format("expert {} out of range (layer has {})",
                               expert, layout.experts_per_layer));
    }
    return ExpertNames{
        instantiate_template(layout.gate_template, layer, expert),
        instantiate_template(layout.up_template, layer, expert),
        instantiate_template(layout.down_template, layer, expert),
        instantiate_template(layout.router_template, layer, 0),
    };
}

ModelConfig ModelConfig::load(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw format_error(fmt::format("cannot open config '{}'", file.string()));
    ModelConfig c;
    try {
        c.doc = nlohmann::ordered_json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw format_error(fmt::format("'{}': malformed config JSON: {}", file.string(), e.what()));
    }
    return c;
}

void ModelConfig::save(const fs::path& file) const {
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw format_error(fmt::format("cannot write config '{}'", file.string()));
    out << doc.dump(2) << "\n";
}

std::optional<uint64_t> ModelConfig::get_count(const std::string& key) const {
    if (key.empty() || !doc.contains(key) || !doc[key].is_number()) return std::nullopt;
    return doc[key].get<uint64_t>();
}

ModelConfig patch_config(const ModelConfig& config, const ModelLayout& layout,
                         size_t new_expert_count) {
    const auto old_count = config.get_count(layout.experts_key);
    if (!old_count) {
        throw validation_error(fmt::format("config has no recognized expert-count key '{}'",
                               layout.experts_key));
    }
    if (new_expert_count >= *old_count) {
        throw validation_error(fmt::format("new expert count {} must be below current {}",
                               new_expert_count, *old_count));
    }
    const auto topk = config.get_count(layout.topk_key);
    const size_t k = topk.value_or(layout.top_k);
    if (k && new_expert_count < k) {
        throw validation_error(fmt::format("new expert count {} is below top-k {}",
                               new_expert_count, k));
    }
    ModelConfig out = config;
    out.doc[layout.experts_key] = new_expert_count;
    return out;
}

ModelLayout bind_layout(ModelLayout layout, const CheckpointReader& reader,
                        const ModelConfig& config) {
    if (auto v = config.get_count(layout.layers_key)) layout.num_layers = *v;
    if (auto v = config.get_count(layout.experts_key)) layout.experts_per_layer = *v;
    if (auto v = config.get_count(layout.topk_key)) layout.top_k = *v;
    if (config.doc.contains("norm_topk_prob") && config.doc["norm_topk_prob"].is_boolean()) {
        layout.normalize_topk = config.doc["norm_topk_prob"].get<bool>();
    }
    if (!layout.num_layers || !layout.experts_per_layer || !layout.top_k) {
        throw validation_error(fmt::format(
            "layout '{}' could not determine counts (layers={}, experts={}, top_k={}); "
            "config keys missing?", layout.name, layout.num_layers, layout.experts_per_layer,
            layout.top_k));
    }
    if (layout.experts_per_layer < layout.top_k) {
        throw validation_error(fmt::format("experts_per_layer {} < top_k {}",
                               layout.experts_per_layer, layout.top_k));
    }

    // dims from the first expert's tensors
    const ExpertNames names = resolve_expert(layout, 0, 0);
    for (const auto& n : {names.gate, names.up, names.down, names.router}) {
        if (!reader.contains(n)) {
            throw validation_error(fmt::format("layout mismatch: tensor '{}' not in checkpoint", n));
        }
    }
    const TensorMeta& gate = reader.meta(names.gate);
    if (gate.shape.size() != 2) {
        throw validation_error(fmt::format("layout mismatch: '{}' is not a matrix", names.gate));
    }
    layout.expert_dim = gate.shape[0];
    layout.hidden_dim = gate.shape[1];

    const TensorMeta& router = reader.meta(names.router);
    if (router.shape != std::vector<size_t>{layout.experts_per_layer, layout.hidden_dim}) {
        throw validation_error(fmt::format(
            "layout mismatch: router '{}' shape does not match {} experts x hidden {}",
            names.router, layout.experts_per_layer, layout.hidden_dim));
    }

    // every template instantiation must resolve
    for (size_t layer = 0; layer < layout.num_layers; ++layer) {
        const auto layer_names = resolve_expert(layout, layer, 0);
        if (!reader.contains(layer_names.router)) {
            throw validation_error(fmt::format("layout mismatch: tensor '{}' not in checkpoint",
                                   layer_names.router));
        }
        if (layout.has_router_bias()) {
            const auto bias = instantiate_template(layout.router_bias_template, layer, 0);
            if (!reader.contains(bias)) {
                throw validation_error(fmt::format("layout mismatch: tensor '{}' not in checkpoint",
                                       bias));
            }
        }
        for (size_t expert = 0; expert < layout.experts_per_layer; ++expert) {
            const auto en = resolve_expert(layout, layer, expert);
            for (const auto& n : {en.gate, en.up, en.down}) {
                if (!reader.contains(n)) {
                    throw validation_error(fmt::format("layout mismatch: tensor '{}' not in checkpoint",
                                           n));
                }
            }
        }
    }
    return layout;
}

ExpertTensors load_expert(const CheckpointReader& reader, const ModelLayout& layout,
                          size_t layer, size_t expert) {
    const ExpertNames names = resolve_expert(layout, layer, expert);
    auto load = [&](const std::string& name, size_t rows, size_t cols) {
        if (!reader.contains(name)) {
            throw validation_error(fmt::format("layout mismatch: tensor '{}' not in checkpoint", name));
        }
        Tensor2D t = reader.read_tensor2d(name);
        if (t.rows != rows || t.cols != cols) {
            throw validation_error(fmt::format("layout mismatch: '{}' has shape {}x{}, expected {}x{}",
                                   name, t.rows, t.cols, rows, cols));
        }
        return t;
    };
    const size_t m = layout.expert_dim;
    const size_t d = layout.hidden_dim;
    return ExpertTensors{load(names.gate, m, d), load(names.up, m, d), load(names.down, d, m)};
}

} // namespace moeprune
