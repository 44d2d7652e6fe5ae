// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0

#include "scoring.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <thread>

#include <fmt/format.h>

#include "errors.hpp"
#include "rng.hpp"

namespace moeprune {

Criterion Criterion::from_name(const std::string& name) {
    Criterion c;
    if (name == "aimer") {
        c = {Id::aimer, PruneEnd::highest, false};
    } else if (name == "magnitude") {
        c = {Id::magnitude, PruneEnd::lowest, false};
    } else if (name == "hoyer") {
        // monotone inverse of aimer, so low scores prune first
        c = {Id::hoyer, PruneEnd::lowest, false};
    } else if (name == "random") {
        c = {Id::random, PruneEnd::lowest, false};
    } else if (name == "frequency" || name == "freq") {
        c = {Id::frequency, PruneEnd::lowest, true};
    } else if (name == "seer") {
        c = {Id::seer, PruneEnd::lowest, true};
    } else if (name == "ean") {
        c = {Id::ean, PruneEnd::lowest, true};
    } else if (name == "reap") {
        c = {Id::reap, PruneEnd::lowest, true};
    } else {
        throw validation_error(fmt::format(
            "unknown criterion '{}' (expected aimer, magnitude, hoyer, random, "
            "frequency, seer, ean or reap)", name));
    }
    return c;
}

const char* Criterion::name() const {
    switch (id) {
        case Id::aimer: return "aimer";
        case Id::magnitude: return "magnitude";
        case Id::hoyer: return "hoyer";
        case Id::random: return "random";
        case Id::frequency: return "frequency";
        case Id::seer: return "seer";
        case Id::ean: return "ean";
        case Id::reap: return "reap";
    }
    return "?";
}

namespace {

double aimer_from_sums(double p, double q, size_t n, bool* degenerate) {
    if (degenerate) *degenerate = false;
    if (q == 0.0) {
        // dead expert: 0/0 in the criterion; score 1.0 so it is pruned first
        if (degenerate) *degenerate = true;
        return 1.0;
    }
    return p / std::sqrt(static_cast<double>(n) * q);
}

} // namespace

double aimer_score(const ExpertTensors& e, bool* degenerate) {
    const double p = l1_norm(e.gate) + l1_norm(e.up) + l1_norm(e.down);
    const double q = sum_squares(e.gate) + sum_squares(e.up) + sum_squares(e.down);
    return aimer_from_sums(p, q, e.numel(), degenerate);
}

double aimer_score_vec(std::span<const float> w, bool* degenerate) {
    if (w.empty()) throw validation_error("aimer score of empty vector");
    return aimer_from_sums(l1_norm(w), sum_squares(w), w.size(), degenerate);
}

double magnitude_score(const ExpertTensors& e) {
    const double p = l1_norm(e.gate) + l1_norm(e.up) + l1_norm(e.down);
    return p / static_cast<double>(e.numel());
}

double magnitude_score_vec(std::span<const float> w) {
    if (w.empty()) throw validation_error("magnitude score of empty vector");
    return l1_norm(w) / static_cast<double>(w.size());
}

double hoyer_score(std::span<const float> w) {
    const size_t n = w.size();
    if (n < 2) throw validation_error("hoyer score needs at least 2 elements");
    const double q = sum_squares(w);
    if (q == 0.0) throw validation_error("hoyer score of zero vector is undefined");
    const double ratio = l1_norm(w) / std::sqrt(q);
    const double sqrt_n = std::sqrt(static_cast<double>(n));
    return (sqrt_n - ratio) / (sqrt_n - 1.0);
}

std::vector<double> random_scores(size_t n, size_t layer, uint64_t seed) {
    if (n == 0) throw validation_error("random scores for empty layer");
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = rng::uniform(seed, layer, i);
    return out;
}

RankedLayer rank_layer(std::span<const double> scores, const Criterion& criterion,
                       size_t layer) {
    if (scores.empty()) throw validation_error("cannot rank an empty score vector");
    for (double s : scores) {
        if (!std::isfinite(s)) throw validation_error("cannot rank non-finite scores");
    }
    RankedLayer ranked;
    ranked.layer = layer;
    ranked.order.resize(scores.size());
    std::iota(ranked.order.begin(), ranked.order.end(), size_t{0});
    // stable sort keeps ascending index order within ties
    if (criterion.prune_end == PruneEnd::highest) {
        std::stable_sort(ranked.order.begin(), ranked.order.end(),
                         [&](size_t a, size_t b) { return scores[a] > scores[b]; });
    } else {
        std::stable_sort(ranked.order.begin(), ranked.order.end(),
                         [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    }
    return ranked;
}

nlohmann::ordered_json ScoreTable::to_json() const {
    nlohmann::ordered_json doc;
    doc["criterion"] = criterion.name();
    doc["prune_end"] = criterion.prune_end == PruneEnd::highest ? "highest" : "lowest";
    if (seed) doc["seed"] = *seed;
    if (calibration_tokens) doc["calibration_tokens"] = *calibration_tokens;
    doc["timing_seconds"] = timing_seconds;
    doc["layout_hash"] = layout_hash;
    doc["layout"] = layout;
    if (!degenerate_experts.empty()) {
        auto arr = nlohmann::ordered_json::array();
        for (auto [l, e] : degenerate_experts) arr.push_back({l, e});
        doc["degenerate_experts"] = std::move(arr);
    }
    auto layers_arr = nlohmann::ordered_json::array();
    for (size_t l = 0; l < layers.size(); ++l) {
        layers_arr.push_back({{"layer", l}, {"scores", layers[l]}});
    }
    doc["layers"] = std::move(layers_arr);
    return doc;
}

ScoreTable ScoreTable::from_json(const nlohmann::ordered_json& doc) {
    ScoreTable t;
    try {
        t.criterion = Criterion::from_name(doc.at("criterion").get<std::string>());
        if (doc.contains("seed")) t.seed = doc["seed"].get<uint64_t>();
        if (doc.contains("calibration_tokens")) {
            t.calibration_tokens = doc["calibration_tokens"].get<uint64_t>();
        }
        t.timing_seconds = doc.value("timing_seconds", 0.0);
        t.layout_hash = doc.value("layout_hash", std::string());
        if (doc.contains("layout")) t.layout = doc["layout"];
        if (doc.contains("degenerate_experts")) {
            for (const auto& pair : doc["degenerate_experts"]) {
                t.degenerate_experts.emplace_back(pair.at(0).get<size_t>(),
                                                  pair.at(1).get<size_t>());
            }
        }
        std::map<size_t, std::vector<double>> by_layer;
        for (const auto& entry : doc.at("layers")) {
            by_layer[entry.at("layer").get<size_t>()] =
                entry.at("scores").get<std::vector<double>>();
        }
        for (auto& [idx, scores] : by_layer) {
            if (idx != t.layers.size()) {
                throw format_error(fmt::format("score table layers are not contiguous at {}", idx));
            }
            t.layers.push_back(std::move(scores));
        }
    } catch (const nlohmann::json::exception& e) {
        throw format_error(fmt::format("score table JSON: {}", e.what()));
    }
    if (t.layers.empty()) throw format_error("score table has no layers");
    const size_t n = t.layers[0].size();
    for (const auto& scores : t.layers) {
        if (scores.size() != n || scores.empty()) {
            throw format_error("score table layers have inconsistent expert counts");
        }
        for (double s : scores) {
            if (!std::isfinite(s)) throw format_error("score table contains non-finite scores");
        }
    }
    return t;
}

ScoreTable ScoreTable::load(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw format_error(fmt::format("cannot open score table '{}'", file.string()));
    nlohmann::ordered_json doc;
    try {
        doc = nlohmann::ordered_json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw format_error(fmt::format("'{}': {}", file.string(), e.what()));
    }
    return from_json(doc);
}

void ScoreTable::save(const std::filesystem::path& file) const {
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw format_error(fmt::format("cannot write score table '{}'", file.string()));
    out << to_json().dump(2) << "\n";
}

std::string ScoreTable::hash() const {
    // canonical digest: criterion, layout hash and full-precision scores
    std::string canon = fmt::format("{}|{}|", criterion.name(), layout_hash);
    for (const auto& scores : layers) {
        for (double s : scores) canon += fmt::format("{:.17g},", s);
        canon += ';';
    }
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : canon) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return fmt::format("fnv1a:{:016x}", h);
}

ScoreTable score_checkpoint(const CheckpointReader& reader, const ModelLayout& layout,
                            const Criterion& criterion, std::optional<uint64_t> seed,
                            int threads) {
    if (!layout.has_dims()) throw validation_error("layout is not bound to a checkpoint");
    if (criterion.requires_calibration) {
        throw validation_error(fmt::format(
            "criterion '{}' needs calibration statistics; use the calibrate path",
            criterion.name()));
    }

    const auto start = std::chrono::steady_clock::now();
    const size_t num_layers = layout.num_layers;
    const size_t n = layout.experts_per_layer;

    ScoreTable table;
    table.criterion = criterion;
    table.layers.assign(num_layers, std::vector<double>(n, 0.0));
    table.layout = layout_to_json(layout);
    table.layout_hash = layout_hash(layout);

    if (criterion.id == Criterion::Id::random) {
        const uint64_t s = seed.value_or(42);
        table.seed = s;
        for (size_t l = 0; l < num_layers; ++l) table.layers[l] = random_scores(n, l, s);
    } else {
        std::mutex degenerate_mutex;
        std::atomic<size_t> next{0};
        std::atomic<bool> failed{false};
        std::exception_ptr error;
        std::mutex error_mutex;

        auto worker = [&]() {
            while (!failed.load(std::memory_order_relaxed)) {
                const size_t idx = next.fetch_add(1);
                if (idx >= num_layers * n) break;
                const size_t layer = idx / n;
                const size_t expert = idx % n;
                try {
                    const ExpertTensors e = load_expert(reader, layout, layer, expert);
                    bool degenerate = false;
                    double score = 0.0;
                    switch (criterion.id) {
                        case Criterion::Id::aimer:
                            score = aimer_score(e, &degenerate);
                            break;
                        case Criterion::Id::magnitude:
                            score = magnitude_score(e);
                            break;
                        case Criterion::Id::hoyer: {
                            std::vector<float> flat;
                            flat.reserve(e.numel());
                            for (const auto* t : {&e.gate, &e.up, &e.down}) {
                                flat.insert(flat.end(), t->values.begin(), t->values.end());
                            }
                            score = hoyer_score(flat);
                            break;
                        }
                        default:
                            break;
                    }
                    table.layers[layer][expert] = score;
                    if (degenerate) {
                        std::lock_guard lock(degenerate_mutex);
                        table.degenerate_experts.emplace_back(layer, expert);
                    }
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                    failed.store(true, std::memory_order_relaxed);
                }
            }
        };

        const size_t max_workers = std::max<size_t>(1, static_cast<size_t>(threads));
        std::vector<std::thread> pool;
        for (size_t i = 1; i < std::min(max_workers, num_layers * n); ++i) {
            pool.emplace_back(worker);
        }
        worker();
        for (auto& t : pool) t.join();
        if (error) std::rethrow_exception(error);

        std::sort(table.degenerate_experts.begin(), table.degenerate_experts.end());
    }

    table.timing_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return table;
}

} // namespace moeprune
