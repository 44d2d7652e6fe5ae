// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0

#include "toy_moe.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <thread>

#include <fmt/format.h>

#include "errors.hpp"
#include "rng.hpp"

namespace fs = std::filesystem;

namespace moeprune {

size_t ToyMoeModel::routed_params() const {
    size_t total = 0;
    for (const auto& layer : layers) {
        total += layer.router.numel() + layer.router_bias.size();
        for (const auto& e : layer.experts) total += e.numel();
    }
    return total;
}

Routing route(std::span<const float> h, const Tensor2D& router,
              std::span<const float> bias, size_t k, bool normalize_topk) {
    const size_t n = router.rows;
    if (k == 0 || k > n) {
        throw validation_error(fmt::format("top-k {} out of range for {} experts", k, n));
    }
    if (!bias.empty() && bias.size() != n) {
        throw validation_error(fmt::format("router bias has {} entries for {} experts",
                               bias.size(), n));
    }
    std::vector<float> logits = matvec(router, h);
    for (size_t i = 0; i < bias.size(); ++i) logits[i] += bias[i];

    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    // stable partial ordering: equal logits keep the lower index first
    std::stable_sort(idx.begin(), idx.end(),
                     [&](size_t a, size_t b) { return logits[a] > logits[b]; });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());

    Routing r;
    r.selected = std::move(idx);
    if (normalize_topk) {
        std::vector<float> selected_logits(k);
        for (size_t i = 0; i < k; ++i) selected_logits[i] = logits[r.selected[i]];
        r.gates = softmax(selected_logits);
    } else {
        const std::vector<double> full = softmax(logits);
        r.gates.resize(k);
        for (size_t i = 0; i < k; ++i) r.gates[i] = full[r.selected[i]];
    }
    return r;
}

std::vector<float> expert_forward(const ExpertTensors& e, std::span<const float> h) {
    const auto gated = silu(matvec(e.gate, h));
    const auto up = matvec(e.up, h);
    return matvec(e.down, hadamard(gated, up));
}

std::vector<float> moe_forward(const ToyMoeModel& model, size_t layer,
                               std::span<const float> h, LayerTrace* trace) {
    if (layer >= model.layers.size()) {
        throw validation_error(fmt::format("layer {} out of range", layer));
    }
    const ToyLayer& ly = model.layers[layer];
    std::vector<float> input(h.begin(), h.end());
    if (model.rms_norm) input = rms_normalize(input, model.rms_eps);

    const Routing routing = route(input, ly.router, ly.router_bias, model.top_k,
                                  model.normalize_topk);

    std::vector<double> acc(h.size(), 0.0);
    std::vector<double> a_norms;
    a_norms.reserve(routing.selected.size());
    for (size_t i = 0; i < routing.selected.size(); ++i) {
        const auto out = expert_forward(ly.experts[routing.selected[i]], input);
        a_norms.push_back(vector_l2(out));
        const double g = routing.gates[i];
        for (size_t j = 0; j < acc.size(); ++j) acc[j] += g * static_cast<double>(out[j]);
    }

    std::vector<float> y(h.size());
    for (size_t j = 0; j < y.size(); ++j) {
        const double res = model.residual ? static_cast<double>(h[j]) : 0.0;
        y[j] = static_cast<float>(acc[j] + res);
    }
    if (trace) {
        trace->selected = routing.selected;
        trace->gates = routing.gates;
        trace->activation_norms = std::move(a_norms);
    }
    return y;
}

std::vector<float> TokenBatch::token(size_t index) const {
    std::vector<float> out(dim);
    for (size_t j = 0; j < dim; ++j) {
        out[j] = static_cast<float>(rng::gaussian(seed, index, j));
    }
    return out;
}

nlohmann::ordered_json RoutingStats::to_json() const {
    nlohmann::ordered_json doc;
    doc["tokens"] = tokens;
    doc["seed"] = seed;
    auto layers_arr = nlohmann::ordered_json::array();
    for (size_t l = 0; l < num_layers; ++l) {
        layers_arr.push_back({{"layer", l},
                              {"n", n[l]},
                              {"sum_g", sum_g[l]},
                              {"sum_anorm", sum_anorm[l]},
                              {"sum_g_anorm", sum_g_anorm[l]}});
    }
    doc["layers"] = std::move(layers_arr);
    return doc;
}

void RoutingStats::save(const fs::path& file) const {
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw format_error(fmt::format("cannot write stats '{}'", file.string()));
    out << to_json().dump(2) << "\n";
}

namespace {

double token_variance(std::span<const float> v) {
    // sample variance across the hidden dimensions (d-1 denominator)
    const size_t d = v.size();
    if (d < 2) return 0.0;
    double mean = 0.0;
    for (float x : v) mean += x;
    mean /= static_cast<double>(d);
    double acc = 0.0;
    for (float x : v) {
        const double c = static_cast<double>(x) - mean;
        acc += c * c;
    }
    return acc / static_cast<double>(d - 1);
}

struct TokenRecord {
    std::vector<LayerTrace> traces;     // per layer
    std::vector<double> variances;      // per layer + input, size L+1
};

} // namespace

BatchResult run_batch(const ToyMoeModel& model, const TokenBatch& batch, int threads) {
    if (batch.count > 0 && batch.dim != model.hidden_dim) {
        throw validation_error(fmt::format("batch dim {} does not match model hidden dim {}",
                               batch.dim, model.hidden_dim));
    }
    const size_t L = model.num_layers();
    const size_t n = model.experts_per_layer();

    std::vector<TokenRecord> records(batch.count);
    std::atomic<size_t> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr error;
    std::mutex error_mutex;

    auto worker = [&]() {
        while (!failed.load(std::memory_order_relaxed)) {
            const size_t t = next.fetch_add(1);
            if (t >= batch.count) break;
            try {
                TokenRecord rec;
                rec.traces.resize(L);
                rec.variances.resize(L + 1);
                std::vector<float> h = batch.token(t);
                rec.variances[0] = token_variance(h);
                for (size_t l = 0; l < L; ++l) {
                    h = moe_forward(model, l, h, &rec.traces[l]);
                    rec.variances[l + 1] = token_variance(h);
                }
                records[t] = std::move(rec);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
                failed.store(true, std::memory_order_relaxed);
            }
        }
    };

    const size_t max_workers =
        std::min<size_t>(std::max(1, threads), std::max<size_t>(1, batch.count));
    std::vector<std::thread> pool;
    for (size_t i = 1; i < max_workers; ++i) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);

    BatchResult result;
    RoutingStats& stats = result.stats;
    stats.num_layers = L;
    stats.experts = n;
    stats.tokens = batch.count;
    stats.seed = batch.seed;
    stats.n.assign(L, std::vector<uint64_t>(n, 0));
    stats.sum_g.assign(L, std::vector<double>(n, 0.0));
    stats.sum_anorm.assign(L, std::vector<double>(n, 0.0));
    stats.sum_g_anorm.assign(L, std::vector<double>(n, 0.0));
    result.mean_token_variance.assign(L + 1, 0.0);

    // token-ordered reduction keeps accumulators bitwise reproducible
    for (const TokenRecord& rec : records) {
        for (size_t l = 0; l < L; ++l) {
            const LayerTrace& tr = rec.traces[l];
            for (size_t i = 0; i < tr.selected.size(); ++i) {
                const size_t e = tr.selected[i];
                stats.n[l][e] += 1;
                stats.sum_g[l][e] += tr.gates[i];
                stats.sum_anorm[l][e] += tr.activation_norms[i];
                stats.sum_g_anorm[l][e] += tr.gates[i] * tr.activation_norms[i];
            }
        }
        for (size_t l = 0; l <= L; ++l) result.mean_token_variance[l] += rec.variances[l];
    }
    if (batch.count > 0) {
        for (double& v : result.mean_token_variance) v /= static_cast<double>(batch.count);
    }
    return result;
}

double frequency_score(const RoutingStats& stats, size_t layer, size_t expert) {
    return static_cast<double>(stats.n.at(layer).at(expert));
}

double seer_score(const RoutingStats& stats, size_t layer, size_t expert) {
    return stats.sum_g.at(layer).at(expert);
}

double ean_score(const RoutingStats& stats, size_t layer, size_t expert) {
    return stats.sum_anorm.at(layer).at(expert);
}

double reap_score(const RoutingStats& stats, size_t layer, size_t expert, bool* never_routed) {
    const uint64_t count = stats.n.at(layer).at(expert);
    if (never_routed) *never_routed = (count == 0);
    if (count == 0) return 0.0;  // never routed: rank most prunable
    return stats.sum_g_anorm[layer][expert] / static_cast<double>(count);
}

ScoreTable scores_from_stats(const RoutingStats& stats, const Criterion& criterion,
                             const ModelLayout& layout) {
    if (!criterion.requires_calibration) {
        throw validation_error(fmt::format("criterion '{}' does not use calibration statistics",
                               criterion.name()));
    }
    ScoreTable table;
    table.criterion = criterion;
    table.seed = stats.seed;
    table.calibration_tokens = stats.tokens;
    table.layout = layout_to_json(layout);
    table.layout_hash = layout_hash(layout);
    table.layers.assign(stats.num_layers, std::vector<double>(stats.experts, 0.0));
    for (size_t l = 0; l < stats.num_layers; ++l) {
        for (size_t e = 0; e < stats.experts; ++e) {
            switch (criterion.id) {
                case Criterion::Id::frequency:
                    table.layers[l][e] = frequency_score(stats, l, e);
                    break;
                case Criterion::Id::seer:
                    table.layers[l][e] = seer_score(stats, l, e);
                    break;
                case Criterion::Id::ean:
                    table.layers[l][e] = ean_score(stats, l, e);
                    break;
                case Criterion::Id::reap:
                    table.layers[l][e] = reap_score(stats, l, e);
                    break;
                default:
                    break;
            }
        }
    }
    return table;
}

namespace {

uint64_t name_stream(const std::string& name) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : name) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::vector<float> gaussian_tensor(uint64_t seed, const std::string& name, size_t count,
                                   double scale) {
    const uint64_t stream = name_stream(name);
    std::vector<float> out(count);
    for (size_t i = 0; i < count; ++i) {
        out[i] = static_cast<float>(scale * rng::gaussian(seed, stream, i));
    }
    return out;
}

} // namespace

void gen_toy_model(const fs::path& out_dir, const ModelLayout& naming, const ToyDims& dims,
                   uint64_t seed, Dtype dtype, uint64_t shard_limit) {
    if (dims.top_k == 0 || dims.top_k > dims.experts) {
        throw validation_error(fmt::format("top-k {} out of range for {} experts",
                               dims.top_k, dims.experts));
    }
    if (dims.layers == 0 || dims.hidden == 0 || dims.expert_hidden == 0) {
        throw validation_error("toy model dims must be positive");
    }
    fs::create_directories(out_dir);

    const double scale = 1.0 / std::sqrt(static_cast<double>(dims.hidden));
    CheckpointWriter writer(out_dir, shard_limit);

    struct Entry {
        std::string name;
        std::vector<size_t> shape;
    };
    std::vector<Entry> entries;
    const size_t toy_vocab = 16;
    entries.push_back({"model.embed_tokens.weight", {toy_vocab, dims.hidden}});
    for (size_t l = 0; l < dims.layers; ++l) {
        entries.push_back({instantiate_template(naming.router_template, l, 0),
                           {dims.experts, dims.hidden}});
        if (naming.has_router_bias()) {
            entries.push_back({instantiate_template(naming.router_bias_template, l, 0),
                               {dims.experts}});
        }
        for (size_t e = 0; e < dims.experts; ++e) {
            entries.push_back({instantiate_template(naming.gate_template, l, e),
                               {dims.expert_hidden, dims.hidden}});
            entries.push_back({instantiate_template(naming.up_template, l, e),
                               {dims.expert_hidden, dims.hidden}});
            entries.push_back({instantiate_template(naming.down_template, l, e),
                               {dims.hidden, dims.expert_hidden}});
        }
    }
    entries.push_back({"model.norm.weight", {dims.hidden}});

    for (const auto& entry : entries) writer.register_tensor(entry.name, dtype, entry.shape);
    writer.finalize_layout();
    for (const auto& entry : entries) {
        size_t count = 1;
        for (size_t s : entry.shape) count *= s;
        const auto values = gaussian_tensor(seed, entry.name, count, scale);
        writer.write(entry.name, encode(values, dtype));
    }
    writer.finish();

    nlohmann::ordered_json config;
    config["model_type"] = "toy_moe";
    config[naming.layers_key] = dims.layers;
    config[naming.experts_key] = dims.experts;
    config[naming.topk_key] = dims.top_k;
    config["hidden_size"] = dims.hidden;
    config["moe_intermediate_size"] = dims.expert_hidden;
    config["norm_topk_prob"] = naming.normalize_topk;
    config["torch_dtype"] = dtype == Dtype::F32 ? "float32"
                          : dtype == Dtype::F16 ? "float16" : "bfloat16";
    config["toy"] = {{"seed", seed}, {"residual", true}, {"rms_norm", true}, {"rms_eps", 1e-6}};
    std::ofstream out(out_dir / "config.json", std::ios::trunc);
    if (!out) throw format_error(fmt::format("cannot write '{}'", (out_dir / "config.json").string()));
    out << config.dump(2) << "\n";
}

ToyMoeModel load_toy_model(const CheckpointReader& reader, const ModelLayout& layout) {
    if (!layout.has_dims()) throw validation_error("layout is not bound to a checkpoint");
    ToyMoeModel model;
    model.top_k = layout.top_k;
    model.hidden_dim = layout.hidden_dim;
    model.normalize_topk = layout.normalize_topk;

    const fs::path config_path = reader.root() / "config.json";
    if (fs::exists(config_path)) {
        const ModelConfig config = ModelConfig::load(config_path);
        if (config.doc.contains("toy") && config.doc["toy"].is_object()) {
            const auto& toy = config.doc["toy"];
            model.residual = toy.value("residual", true);
            model.rms_norm = toy.value("rms_norm", true);
            model.rms_eps = toy.value("rms_eps", 1e-6);
        }
    }

    model.layers.reserve(layout.num_layers);
    for (size_t l = 0; l < layout.num_layers; ++l) {
        ToyLayer layer;
        const auto names = resolve_expert(layout, l, 0);
        layer.router = reader.read_tensor2d(names.router);
        if (layer.router.rows != layout.experts_per_layer ||
            layer.router.cols != layout.hidden_dim) {
            throw validation_error(fmt::format("layout mismatch: router '{}' shape {}x{}",
                                   names.router, layer.router.rows, layer.router.cols));
        }
        if (layout.has_router_bias()) {
            const auto bias = instantiate_template(layout.router_bias_template, l, 0);
            layer.router_bias = reader.read_values(bias);
            if (layer.router_bias.size() != layout.experts_per_layer) {
                throw validation_error(fmt::format("layout mismatch: bias '{}' has {} entries",
                                       bias, layer.router_bias.size()));
            }
        }
        layer.experts.reserve(layout.experts_per_layer);
        for (size_t e = 0; e < layout.experts_per_layer; ++e) {
            layer.experts.push_back(load_expert(reader, layout, l, e));
        }
        model.layers.push_back(std::move(layer));
    }
    return model;
}

} // namespace moeprune
