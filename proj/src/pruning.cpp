// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0

#include "pruning.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_map>

#include <fmt/format.h>

#include "errors.hpp"

namespace fs = std::filesystem;

namespace moeprune {

size_t PruningPlan::old_to_new(size_t layer, size_t old_id) const {
    const auto& retained = layers.at(layer).retained;
    const auto it = std::lower_bound(retained.begin(), retained.end(), old_id);
    if (it == retained.end() || *it != old_id) {
        throw validation_error(fmt::format("expert {} in layer {} is not retained", old_id, layer));
    }
    return static_cast<size_t>(it - retained.begin());
}

bool PruningPlan::is_retained(size_t layer, size_t old_id) const {
    const auto& retained = layers.at(layer).retained;
    return std::binary_search(retained.begin(), retained.end(), old_id);
}

nlohmann::ordered_json PruningPlan::to_json() const {
    nlohmann::ordered_json doc;
    doc["ratio"] = ratio;
    doc["criterion"] = criterion;
    doc["score_table_hash"] = score_table_hash;
    doc["layout_hash"] = layout_hash;
    doc["layout"] = layout;
    auto arr = nlohmann::ordered_json::array();
    for (size_t l = 0; l < layers.size(); ++l) {
        arr.push_back({{"layer", l},
                       {"pruned", layers[l].pruned},
                       {"retained", layers[l].retained}});
    }
    doc["layers"] = std::move(arr);
    return doc;
}

PruningPlan PruningPlan::from_json(const nlohmann::ordered_json& doc) {
    PruningPlan plan;
    try {
        plan.ratio = doc.at("ratio").get<double>();
        plan.criterion = doc.at("criterion").get<std::string>();
        plan.score_table_hash = doc.value("score_table_hash", std::string());
        plan.layout_hash = doc.value("layout_hash", std::string());
        if (doc.contains("layout")) plan.layout = doc["layout"];
        plan.layers.resize(doc.at("layers").size());
        for (const auto& entry : doc["layers"]) {
            const size_t l = entry.at("layer").get<size_t>();
            if (l >= plan.layers.size()) throw format_error("plan layer index out of range");
            plan.layers[l].pruned = entry.at("pruned").get<std::vector<size_t>>();
            plan.layers[l].retained = entry.at("retained").get<std::vector<size_t>>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw format_error(fmt::format("pruning plan JSON: {}", e.what()));
    }
    for (auto& layer : plan.layers) {
        std::sort(layer.pruned.begin(), layer.pruned.end());
        std::sort(layer.retained.begin(), layer.retained.end());
    }
    return plan;
}

PruningPlan PruningPlan::load(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw format_error(fmt::format("cannot open plan '{}'", file.string()));
    nlohmann::ordered_json doc;
    try {
        doc = nlohmann::ordered_json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw format_error(fmt::format("'{}': {}", file.string(), e.what()));
    }
    return from_json(doc);
}

void PruningPlan::save(const fs::path& file) const {
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw format_error(fmt::format("cannot write plan '{}'", file.string()));
    out << to_json().dump(2) << "\n";
}

namespace {

PruningPlan plan_from_table(const ScoreTable& table, double ratio, size_t prune_count) {
    const ModelLayout layout = layout_from_json(table.layout);
    const size_t n = table.experts_per_layer();

    PruningPlan plan;
    plan.ratio = ratio;
    plan.criterion = table.criterion.name();
    plan.score_table_hash = table.hash();
    plan.layout_hash = table.layout_hash;
    plan.layout = table.layout;
    plan.layers.resize(table.num_layers());

    for (size_t l = 0; l < table.num_layers(); ++l) {
        const RankedLayer ranked = rank_layer(table.layers[l], table.criterion, l);
        auto& layer = plan.layers[l];
        layer.pruned.assign(ranked.order.begin(),
                            ranked.order.begin() + static_cast<ptrdiff_t>(prune_count));
        layer.retained.assign(ranked.order.begin() + static_cast<ptrdiff_t>(prune_count),
                              ranked.order.end());
        std::sort(layer.pruned.begin(), layer.pruned.end());
        std::sort(layer.retained.begin(), layer.retained.end());
        if (layer.pruned.size() + layer.retained.size() != n) {
            throw validation_error("internal: plan does not partition the expert set");
        }
    }
    return plan;
}

} // namespace

PruningPlan make_plan(const ScoreTable& table, double ratio) {
    if (!(ratio > 0.0 && ratio < 1.0)) {
        throw validation_error(fmt::format("pruning ratio {} must lie in (0, 1)", ratio));
    }
    const ModelLayout layout = layout_from_json(table.layout);
    const size_t n = table.experts_per_layer();
    const size_t k = layout.top_k;
    // round half up so e.g. 0.25 of 64 is exactly 16
    const size_t p = static_cast<size_t>(std::floor(ratio * static_cast<double>(n) + 0.5));
    if (n - p < k) {
        throw validation_error(fmt::format(
            "ratio {} would retain {} experts, below top-k {}; maximum feasible ratio is {:.4g}",
            ratio, n - p, k, static_cast<double>(n - k) / static_cast<double>(n)));
    }
    if (p == 0) {
        throw validation_error(fmt::format("ratio {} prunes zero experts of {}", ratio, n));
    }
    return plan_from_table(table, ratio, p);
}

PruningPlan make_empty_plan(const ScoreTable& table) {
    return plan_from_table(table, 0.0, 0);
}

namespace {

enum class Role { gate, up, down };

struct ExpertRef {
    size_t layer;
    size_t expert;
    Role role;
};

// name -> structural role, enumerated from the layout templates
struct NameClassifier {
    std::unordered_map<std::string, ExpertRef> experts;
    std::unordered_map<std::string, size_t> routers;
    std::unordered_map<std::string, size_t> biases;

    NameClassifier(const ModelLayout& layout, size_t experts_per_layer) {
        for (size_t l = 0; l < layout.num_layers; ++l) {
            routers.emplace(instantiate_template(layout.router_template, l, 0), l);
            if (layout.has_router_bias()) {
                biases.emplace(instantiate_template(layout.router_bias_template, l, 0), l);
            }
            for (size_t e = 0; e < experts_per_layer; ++e) {
                experts.emplace(instantiate_template(layout.gate_template, l, e),
                                ExpertRef{l, e, Role::gate});
                experts.emplace(instantiate_template(layout.up_template, l, e),
                                ExpertRef{l, e, Role::up});
                experts.emplace(instantiate_template(layout.down_template, l, e),
                                ExpertRef{l, e, Role::down});
            }
        }
    }
};

std::string renamed_expert(const ModelLayout& layout, const ExpertRef& ref, size_t new_id) {
    const std::string& tmpl = ref.role == Role::gate ? layout.gate_template
                            : ref.role == Role::up   ? layout.up_template
                                                     : layout.down_template;
    return instantiate_template(tmpl, ref.layer, new_id);
}

std::vector<std::byte> slice_rows(const std::vector<std::byte>& raw, size_t row_bytes,
                                  const std::vector<size_t>& retained) {
    std::vector<std::byte> out;
    out.reserve(retained.size() * row_bytes);
    for (size_t r : retained) {
        out.insert(out.end(), raw.begin() + static_cast<ptrdiff_t>(r * row_bytes),
                   raw.begin() + static_cast<ptrdiff_t>((r + 1) * row_bytes));
    }
    return out;
}

} // namespace

void apply_plan(const CheckpointReader& reader, const ModelLayout& layout,
                const PruningPlan& plan, const fs::path& out_dir, uint64_t shard_limit) {
    if (!layout.has_dims()) throw validation_error("layout is not bound to a checkpoint");
    if (!plan.layout_hash.empty() && plan.layout_hash != layout_hash(layout)) {
        throw validation_error(fmt::format(
            "plan provenance mismatch: plan was made for layout {} but checkpoint resolves to {}",
            plan.layout_hash, layout_hash(layout)));
    }
    if (plan.layers.size() != layout.num_layers) {
        throw validation_error(fmt::format("plan covers {} layers, checkpoint has {}",
                               plan.layers.size(), layout.num_layers));
    }
    const size_t p = plan.prune_count();
    const size_t n = layout.experts_per_layer;
    for (const auto& layer : plan.layers) {
        if (layer.pruned.size() != p || layer.pruned.size() + layer.retained.size() != n) {
            throw validation_error("plan does not remove the same fraction from every layer");
        }
    }

    // mirror the input structure: a sharded checkpoint stays sharded
    if (shard_limit == 0 && reader.sharded()) {
        uint64_t max_shard = 0;
        uint64_t current = 0;
        std::string current_shard;
        for (const auto& name : reader.names()) {
            const TensorMeta& meta = reader.meta(name);
            if (meta.shard != current_shard) {
                current_shard = meta.shard;
                current = 0;
            }
            current += meta.payload_bytes();
            max_shard = std::max(max_shard, current);
        }
        shard_limit = max_shard;
    }

    fs::create_directories(out_dir);
    const NameClassifier classify(layout, n);

    // pass 1: registration fixes output names, shapes and shard layout
    struct Action {
        std::string src;
        std::string dst;
        enum class Kind { copy, slice_router, slice_bias } kind;
        size_t layer = 0;
    };
    std::vector<Action> actions;
    CheckpointWriter writer(out_dir, shard_limit);

    for (const auto& name : reader.names()) {
        const TensorMeta& meta = reader.meta(name);
        if (auto it = classify.experts.find(name); it != classify.experts.end()) {
            const ExpertRef& ref = it->second;
            if (!plan.is_retained(ref.layer, ref.expert)) continue;  // dropped
            const std::string dst = renamed_expert(layout, ref, plan.old_to_new(ref.layer, ref.expert));
            writer.register_tensor(dst, meta.dtype, meta.shape);
            actions.push_back({name, dst, Action::Kind::copy, ref.layer});
        } else if (auto rt = classify.routers.find(name); rt != classify.routers.end()) {
            std::vector<size_t> shape = meta.shape;
            if (shape.size() != 2 || shape[0] != n) {
                throw validation_error(fmt::format("router '{}' does not have {} rows", name, n));
            }
            shape[0] = n - p;
            writer.register_tensor(name, meta.dtype, shape);
            actions.push_back({name, name, Action::Kind::slice_router, rt->second});
        } else if (auto bt = classify.biases.find(name); bt != classify.biases.end()) {
            if (meta.numel() != n) {
                throw validation_error(fmt::format("router bias '{}' does not have {} entries",
                                       name, n));
            }
            writer.register_tensor(name, meta.dtype, {n - p});
            actions.push_back({name, name, Action::Kind::slice_bias, bt->second});
        } else {
            writer.register_tensor(name, meta.dtype, meta.shape);
            actions.push_back({name, name, Action::Kind::copy, 0});
        }
    }
    writer.finalize_layout();

    // pass 2: stream payloads
    for (const auto& action : actions) {
        const TensorMeta& meta = reader.meta(action.src);
        std::vector<std::byte> raw = reader.read_raw(action.src);
        if (action.kind == Action::Kind::slice_router) {
            const size_t row_bytes = meta.shape[1] * dtype_width(meta.dtype);
            raw = slice_rows(raw, row_bytes, plan.layers[action.layer].retained);
        } else if (action.kind == Action::Kind::slice_bias) {
            raw = slice_rows(raw, dtype_width(meta.dtype), plan.layers[action.layer].retained);
        }
        writer.write(action.dst, raw);
    }
    writer.finish();

    // patch the config (copied verbatim when the plan prunes nothing)
    const fs::path config_src = reader.root() / "config.json";
    if (fs::exists(config_src)) {
        const ModelConfig config = ModelConfig::load(config_src);
        if (p > 0) {
            patch_config(config, layout, n - p).save(out_dir / "config.json");
        } else {
            config.save(out_dir / "config.json");
        }
    } else if (p > 0) {
        throw validation_error(fmt::format("no config.json next to checkpoint '{}'",
                               reader.root().string()));
    }
}

bool VerifyReport::all_pass() const {
    for (const auto& c : checks) {
        if (!c.pass) return false;
    }
    return true;
}

std::vector<std::string> VerifyReport::failures() const {
    std::vector<std::string> out;
    for (const auto& c : checks) {
        if (!c.pass) out.push_back(fmt::format("{}: {}", c.name, c.detail));
    }
    return out;
}

nlohmann::ordered_json VerifyReport::to_json() const {
    nlohmann::ordered_json doc;
    doc["all_pass"] = all_pass();
    doc["original_expert_params"] = original_expert_params;
    doc["pruned_expert_params"] = pruned_expert_params;
    auto arr = nlohmann::ordered_json::array();
    for (const auto& c : checks) {
        arr.push_back({{"check", c.name}, {"pass", c.pass}, {"detail", c.detail}});
    }
    doc["checks"] = std::move(arr);
    return doc;
}

std::string VerifyReport::to_text() const {
    std::string out;
    for (const auto& c : checks) {
        out += fmt::format("[{}] {}: {}\n", c.pass ? "ok" : "FAIL", c.name, c.detail);
    }
    out += fmt::format("expert parameters: {} -> {} ({:.1f}% reduction)\n",
                       original_expert_params, pruned_expert_params,
                       original_expert_params
                           ? 100.0 * (1.0 - static_cast<double>(pruned_expert_params) /
                                                static_cast<double>(original_expert_params))
                           : 0.0);
    return out;
}

VerifyReport verify_pruned(const CheckpointReader& original, const CheckpointReader& pruned,
                           const PruningPlan& plan, const ModelLayout& layout) {
    VerifyReport report;
    auto check = [&report](const std::string& name, bool pass, std::string detail) {
        report.checks.push_back({name, pass, std::move(detail)});
    };

    const size_t n = layout.experts_per_layer;
    const size_t p = plan.prune_count();
    const size_t L = layout.num_layers;

    // plan invariants
    {
        bool ok = plan.layers.size() == L;
        std::string detail = ok ? fmt::format("{} layers, {} pruned each", L, p) : "layer count mismatch";
        for (size_t l = 0; ok && l < plan.layers.size(); ++l) {
            const auto& layer = plan.layers[l];
            if (layer.pruned.size() != p || layer.pruned.size() + layer.retained.size() != n) {
                ok = false;
                detail = fmt::format("layer {} does not partition {} experts", l, n);
                break;
            }
            std::vector<size_t> all;
            all.insert(all.end(), layer.pruned.begin(), layer.pruned.end());
            all.insert(all.end(), layer.retained.begin(), layer.retained.end());
            std::sort(all.begin(), all.end());
            for (size_t i = 0; i < all.size(); ++i) {
                if (all[i] != i) {
                    ok = false;
                    detail = fmt::format("layer {} ids are not 0..{}", l, n - 1);
                    break;
                }
            }
            if (layer.retained.size() < layout.top_k) {
                ok = false;
                detail = fmt::format("layer {} retains fewer than top-k experts", l);
            }
        }
        check("plan_invariants", ok, detail);
    }
    if (!report.all_pass()) return report;

    const NameClassifier orig_names(layout, n);
    ModelLayout pruned_layout = layout;
    pruned_layout.experts_per_layer = n - p;
    const NameClassifier new_names(pruned_layout, n - p);

    // classify the pruned checkpoint's contents
    {
        size_t expert_tensors = 0;
        std::string bad;
        for (const auto& name : pruned.names()) {
            if (new_names.experts.contains(name)) {
                expert_tensors++;
            } else if (new_names.routers.contains(name) || new_names.biases.contains(name)) {
                continue;
            } else if (orig_names.experts.contains(name)) {
                bad = fmt::format("unexpected expert tensor '{}'", name);
                break;
            } else if (!original.contains(name)) {
                bad = fmt::format("unexpected tensor '{}'", name);
                break;
            }
        }
        const size_t expected = L * (n - p) * 3;
        bool ok = bad.empty() && expert_tensors == expected;
        check("expert_tensor_count", ok,
              bad.empty() ? fmt::format("{} expert tensors (expected {})", expert_tensors, expected)
                          : bad);
    }

    // router shapes
    {
        bool ok = true;
        std::string detail = fmt::format("router rows {} per layer", n - p);
        for (size_t l = 0; l < L && ok; ++l) {
            const auto names = resolve_expert(pruned_layout, l, 0);
            if (!pruned.contains(names.router)) {
                ok = false;
                detail = fmt::format("missing router '{}'", names.router);
                break;
            }
            const TensorMeta& meta = pruned.meta(names.router);
            if (meta.shape != std::vector<size_t>{n - p, layout.hidden_dim}) {
                ok = false;
                detail = fmt::format("router '{}' has wrong shape", names.router);
            }
            if (layout.has_router_bias()) {
                const auto bias = instantiate_template(layout.router_bias_template, l, 0);
                if (!pruned.contains(bias) || pruned.meta(bias).numel() != n - p) {
                    ok = false;
                    detail = fmt::format("router bias '{}' has wrong shape", bias);
                }
            }
        }
        check("router_shapes", ok, detail);
    }

    // surviving expert payloads are byte-identical under the renaming
    {
        bool ok = true;
        std::string detail = "surviving expert payloads match";
        for (size_t l = 0; l < L && ok; ++l) {
            for (size_t old_id : plan.layers[l].retained) {
                const size_t new_id = plan.old_to_new(l, old_id);
                const auto old_names = resolve_expert(layout, l, old_id);
                const auto new_named = resolve_expert(pruned_layout, l, new_id);
                const std::pair<const std::string&, const std::string&> pairs[3] = {
                    {old_names.gate, new_named.gate},
                    {old_names.up, new_named.up},
                    {old_names.down, new_named.down}};
                for (const auto& [src, dst] : pairs) {
                    if (!pruned.contains(dst) || original.read_raw(src) != pruned.read_raw(dst)) {
                        ok = false;
                        detail = fmt::format("payload mismatch: '{}' vs '{}'", src, dst);
                        break;
                    }
                }
                if (!ok) break;
            }
        }
        check("survivor_payloads", ok, detail);
    }

    // router rows of retained experts are preserved in order
    {
        bool ok = true;
        std::string detail = "router rows sliced correctly";
        for (size_t l = 0; l < L && ok; ++l) {
            const auto names = resolve_expert(layout, l, 0);
            const TensorMeta& meta = original.meta(names.router);
            const size_t row_bytes = meta.shape[1] * dtype_width(meta.dtype);
            const auto orig_raw = original.read_raw(names.router);
            const auto pruned_raw = pruned.read_raw(names.router);
            std::vector<std::byte> expected = slice_rows(orig_raw, row_bytes,
                                                         plan.layers[l].retained);
            if (pruned_raw != expected) {
                ok = false;
                detail = fmt::format("router '{}' rows differ", names.router);
            }
            if (ok && layout.has_router_bias()) {
                const auto bias = instantiate_template(layout.router_bias_template, l, 0);
                const auto orig_bias = original.read_raw(bias);
                expected = slice_rows(orig_bias, dtype_width(original.meta(bias).dtype),
                                      plan.layers[l].retained);
                if (pruned.read_raw(bias) != expected) {
                    ok = false;
                    detail = fmt::format("router bias '{}' entries differ", bias);
                }
            }
        }
        check("router_payloads", ok, detail);
    }

    // passthrough tensors byte-identical (anything outside the expert/router
    // name sets, including shared or otherwise unrecognized per-expert paths)
    {
        bool ok = true;
        size_t passthrough = 0;
        std::string detail;
        for (const auto& name : original.names()) {
            if (orig_names.experts.contains(name) || orig_names.routers.contains(name) ||
                orig_names.biases.contains(name)) {
                continue;
            }
            passthrough++;
            if (!pruned.contains(name)) {
                ok = false;
                detail = fmt::format("missing passthrough tensor '{}'", name);
                break;
            }
            if (original.read_raw(name) != pruned.read_raw(name)) {
                ok = false;
                detail = fmt::format("passthrough tensor '{}' modified", name);
                break;
            }
        }
        if (ok) detail = fmt::format("{} passthrough tensors byte-identical", passthrough);
        check("passthrough_payloads", ok, detail);
    }

    // config patched
    {
        const fs::path src = original.root() / "config.json";
        const fs::path dst = pruned.root() / "config.json";
        if (fs::exists(src)) {
            bool ok = fs::exists(dst);
            std::string detail = "config.json missing in pruned checkpoint";
            if (ok) {
                const ModelConfig config = ModelConfig::load(dst);
                const auto count = config.get_count(layout.experts_key);
                ok = count && *count == n - p;
                detail = ok ? fmt::format("expert count patched to {}", n - p)
                            : fmt::format("config expert count is not {}", n - p);
            }
            check("config_patch", ok, detail);
        }
    }

    // parameter accounting: each layer drops exactly p * 3md expert params
    {
        auto expert_param_count = [](const CheckpointReader& reader, const NameClassifier& names) {
            size_t total = 0;
            for (const auto& name : reader.names()) {
                if (names.experts.contains(name)) total += reader.meta(name).numel();
            }
            return total;
        };
        report.original_expert_params = expert_param_count(original, orig_names);
        report.pruned_expert_params = expert_param_count(pruned, new_names);
        const size_t expected_drop = L * p * layout.expert_params();
        const bool ok =
            report.original_expert_params - report.pruned_expert_params == expected_drop;
        check("parameter_accounting", ok,
              fmt::format("expert params {} -> {} (dropped {}, expected {})",
                          report.original_expert_params, report.pruned_expert_params,
                          report.original_expert_params - report.pruned_expert_params,
                          expected_drop));
    }

    return report;
}

} // namespace moeprune
