// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0

#include "moeprune.h"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>

#include <fmt/format.h>

#include "analysis.hpp"
#include "errors.hpp"
#include "layout.hpp"
#include "pruning.hpp"
#include "safetensors.hpp"
#include "scoring.hpp"
#include "toy_moe.hpp"

namespace fs = std::filesystem;
using namespace moeprune;

namespace {

thread_local std::string g_last_error;

mp_status fail(mp_status code, const std::string& message) {
    g_last_error = message;
    return code;
}

// runs `fn`, translating exceptions into status codes
template <typename Fn>
mp_status guarded(Fn&& fn) {
    try {
        fn();
        g_last_error.clear();
        return MP_OK;
    } catch (const validation_error& e) {
        return fail(MP_ERR_INVALID, e.what());
    } catch (const format_error& e) {
        return fail(MP_ERR_IO, e.what());
    } catch (const fs::filesystem_error& e) {
        return fail(MP_ERR_IO, e.what());
    } catch (const std::exception& e) {
        return fail(MP_ERR_INVALID, e.what());
    }
}

int resolve_threads(int threads) {
    if (threads > 0) return threads;
    if (const char* env = std::getenv("MOEPRUNE_THREADS")) {
        const int v = std::atoi(env);
        if (v > 0) return v;
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc ? static_cast<int>(std::min(hc, 8u)) : 4;
}

void check_budget(const ModelLayout& layout, uint64_t max_params) {
    const uint64_t routed =
        static_cast<uint64_t>(layout.num_layers) * layout.experts_per_layer *
            (3 * layout.expert_dim * layout.hidden_dim) +
        static_cast<uint64_t>(layout.num_layers) * layout.experts_per_layer *
            (layout.hidden_dim + (layout.has_router_bias() ? 1 : 0));
    if (max_params > 0 && routed > max_params) {
        throw validation_error(fmt::format(
            "model has {} routed parameters, above the toy budget of {}; calibration and "
            "forward-pass commands support toy-scale models only", routed, max_params));
    }
}

} // namespace

struct mp_layout {
    ModelLayout layout;
};

struct mp_model {
    std::unique_ptr<CheckpointReader> reader;
    ModelLayout bound;
};

struct mp_scores {
    ScoreTable table;
};

struct mp_plan {
    PruningPlan plan;
};

extern "C" {

const char* mp_last_error(void) { return g_last_error.c_str(); }

const char* mp_version(void) { return "0.1.0"; }

mp_status mp_layout_open(const char* spec, mp_layout** out) {
    if (!spec || !out) return fail(MP_ERR_USAGE, "mp_layout_open: null argument");
    *out = nullptr;
    return guarded([&] { *out = new mp_layout{layout_from_arg(spec)}; });
}

void mp_layout_free(mp_layout* layout) { delete layout; }

mp_status mp_layout_from_scores(const mp_scores* scores, mp_layout** out) {
    if (!scores || !out) return fail(MP_ERR_USAGE, "mp_layout_from_scores: null argument");
    *out = nullptr;
    return guarded([&] { *out = new mp_layout{layout_from_json(scores->table.layout)}; });
}

mp_status mp_model_open(const char* path, const mp_layout* layout, mp_model** out) {
    if (!path || !layout || !out) return fail(MP_ERR_USAGE, "mp_model_open: null argument");
    *out = nullptr;
    return guarded([&] {
        auto model = std::make_unique<mp_model>();
        model->reader = std::make_unique<CheckpointReader>(path);
        const fs::path config_path = model->reader->root() / "config.json";
        if (!fs::exists(config_path)) {
            throw validation_error(fmt::format("no config.json next to checkpoint '{}'", path));
        }
        model->bound = bind_layout(layout->layout, *model->reader, ModelConfig::load(config_path));
        *out = model.release();
    });
}

void mp_model_free(mp_model* model) { delete model; }

int64_t mp_model_num_layers(const mp_model* m) { return m ? (int64_t)m->bound.num_layers : -1; }
int64_t mp_model_experts_per_layer(const mp_model* m) {
    return m ? (int64_t)m->bound.experts_per_layer : -1;
}
int64_t mp_model_top_k(const mp_model* m) { return m ? (int64_t)m->bound.top_k : -1; }
int64_t mp_model_hidden_dim(const mp_model* m) { return m ? (int64_t)m->bound.hidden_dim : -1; }
int64_t mp_model_expert_dim(const mp_model* m) { return m ? (int64_t)m->bound.expert_dim : -1; }

mp_status mp_gen_toy(const char* out_dir, const char* layout_spec, int64_t layers,
                     int64_t experts, int64_t top_k, int64_t hidden_dim, int64_t expert_dim,
                     uint64_t seed, const char* dtype, uint64_t shard_limit) {
    if (!out_dir || !layout_spec) return fail(MP_ERR_USAGE, "mp_gen_toy: null argument");
    if (layers <= 0 || experts <= 0 || top_k <= 0 || hidden_dim <= 0 || expert_dim <= 0) {
        return fail(MP_ERR_USAGE, "mp_gen_toy: dims must be positive");
    }
    if (top_k > experts) {
        return fail(MP_ERR_USAGE,
                    fmt::format("mp_gen_toy: top-k {} exceeds expert count {}", top_k, experts));
    }
    return guarded([&] {
        Dtype dt = Dtype::F32;
        if (dtype && *dtype) dt = dtype_from_tag(dtype);
        ToyDims dims;
        dims.layers = static_cast<size_t>(layers);
        dims.experts = static_cast<size_t>(experts);
        dims.top_k = static_cast<size_t>(top_k);
        dims.hidden = static_cast<size_t>(hidden_dim);
        dims.expert_hidden = static_cast<size_t>(expert_dim);
        gen_toy_model(out_dir, layout_from_arg(layout_spec), dims, seed, dt, shard_limit);
    });
}

mp_status mp_score(const mp_model* model, const char* criterion, uint64_t seed, int threads,
                   mp_scores** out) {
    if (!model || !criterion || !out) return fail(MP_ERR_USAGE, "mp_score: null argument");
    *out = nullptr;
    Criterion crit;
    try {
        crit = Criterion::from_name(criterion);
    } catch (const std::exception& e) {
        return fail(MP_ERR_USAGE, e.what());
    }
    if (crit.requires_calibration) {
        return fail(MP_ERR_USAGE,
                    fmt::format("criterion '{}' needs calibration; use mp_calibrate", criterion));
    }
    return guarded([&] {
        *out = new mp_scores{score_checkpoint(*model->reader, model->bound, crit, seed,
                                              resolve_threads(threads))};
    });
}

mp_status mp_calibrate(const mp_model* model, const char* criterion, uint64_t tokens,
                       uint64_t seed, uint64_t max_params, const char* stats_path,
                       int threads, mp_scores** out) {
    if (!model || !criterion || !out) return fail(MP_ERR_USAGE, "mp_calibrate: null argument");
    *out = nullptr;
    Criterion crit;
    try {
        crit = Criterion::from_name(criterion);
    } catch (const std::exception& e) {
        return fail(MP_ERR_USAGE, e.what());
    }
    if (!crit.requires_calibration) {
        return fail(MP_ERR_USAGE,
                    fmt::format("criterion '{}' is weight-only; use mp_score", criterion));
    }
    return guarded([&] {
        check_budget(model->bound, max_params);
        const auto start = std::chrono::steady_clock::now();
        const ToyMoeModel toy = load_toy_model(*model->reader, model->bound);
        const TokenBatch batch{tokens, toy.hidden_dim, seed};
        const RoutingStats stats = collect_stats(toy, batch, resolve_threads(threads));
        if (stats_path) stats.save(stats_path);
        ScoreTable table = scores_from_stats(stats, crit, model->bound);
        table.timing_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        *out = new mp_scores{std::move(table)};
    });
}

mp_status mp_scores_save(const mp_scores* scores, const char* path) {
    if (!scores || !path) return fail(MP_ERR_USAGE, "mp_scores_save: null argument");
    return guarded([&] { scores->table.save(path); });
}

mp_status mp_scores_load(const char* path, mp_scores** out) {
    if (!path || !out) return fail(MP_ERR_USAGE, "mp_scores_load: null argument");
    *out = nullptr;
    return guarded([&] { *out = new mp_scores{ScoreTable::load(path)}; });
}

void mp_scores_free(mp_scores* scores) { delete scores; }

int64_t mp_scores_num_layers(const mp_scores* s) { return s ? (int64_t)s->table.num_layers() : -1; }
int64_t mp_scores_experts_per_layer(const mp_scores* s) {
    return s ? (int64_t)s->table.experts_per_layer() : -1;
}

double mp_scores_get(const mp_scores* s, int64_t layer, int64_t expert) {
    if (!s || layer < 0 || expert < 0 || layer >= (int64_t)s->table.num_layers() ||
        expert >= (int64_t)s->table.experts_per_layer()) {
        return std::nan("");
    }
    return s->table.layers[(size_t)layer][(size_t)expert];
}

double mp_scores_timing_seconds(const mp_scores* s) { return s ? s->table.timing_seconds : -1.0; }

const char* mp_scores_criterion(const mp_scores* s) { return s ? s->table.criterion.name() : ""; }

int64_t mp_scores_degenerate_count(const mp_scores* s) {
    return s ? (int64_t)s->table.degenerate_experts.size() : -1;
}

mp_status mp_plan_make(const mp_scores* scores, double ratio, mp_plan** out) {
    if (!scores || !out) return fail(MP_ERR_USAGE, "mp_plan_make: null argument");
    *out = nullptr;
    return guarded([&] { *out = new mp_plan{make_plan(scores->table, ratio)}; });
}

mp_status mp_plan_save(const mp_plan* plan, const char* path) {
    if (!plan || !path) return fail(MP_ERR_USAGE, "mp_plan_save: null argument");
    return guarded([&] { plan->plan.save(path); });
}

mp_status mp_plan_load(const char* path, mp_plan** out) {
    if (!path || !out) return fail(MP_ERR_USAGE, "mp_plan_load: null argument");
    *out = nullptr;
    return guarded([&] { *out = new mp_plan{PruningPlan::load(path)}; });
}

void mp_plan_free(mp_plan* plan) { delete plan; }

int64_t mp_plan_pruned_per_layer(const mp_plan* p) { return p ? (int64_t)p->plan.prune_count() : -1; }
int64_t mp_plan_retained_per_layer(const mp_plan* p) {
    return p ? (int64_t)p->plan.retained_count() : -1;
}

mp_status mp_prune(const mp_model* model, const mp_plan* plan, const char* out_dir,
                   uint64_t shard_limit) {
    if (!model || !plan || !out_dir) return fail(MP_ERR_USAGE, "mp_prune: null argument");
    return guarded([&] {
        apply_plan(*model->reader, model->bound, plan->plan, out_dir, shard_limit);
    });
}

mp_status mp_verify(const char* original_dir, const char* pruned_dir, const mp_plan* plan,
                    const char* report_path, int* all_pass) {
    if (!original_dir || !pruned_dir || !plan) {
        return fail(MP_ERR_USAGE, "mp_verify: null argument");
    }
    return guarded([&] {
        const ModelLayout layout = layout_from_json(plan->plan.layout);
        if (!layout.has_dims()) {
            throw validation_error("plan does not embed a fully-bound layout");
        }
        const CheckpointReader original(original_dir);
        const CheckpointReader pruned(pruned_dir);
        const VerifyReport report = verify_pruned(original, pruned, plan->plan, layout);
        if (report_path) {
            std::ofstream out(report_path, std::ios::trunc);
            if (!out) throw format_error(fmt::format("cannot write report '{}'", report_path));
            out << report.to_json().dump(2) << "\n";
        }
        if (all_pass) *all_pass = report.all_pass() ? 1 : 0;
    });
}

mp_status mp_export_profile(const mp_scores* scores, const char* prefix) {
    if (!scores || !prefix) return fail(MP_ERR_USAGE, "mp_export_profile: null argument");
    return guarded([&] {
        export_profile(rank_profile(scores->table), prefix);
        export_separation(scores->table, prefix);
    });
}

mp_status mp_export_scores(const mp_scores* scores, const char* prefix) {
    if (!scores || !prefix) return fail(MP_ERR_USAGE, "mp_export_scores: null argument");
    return guarded([&] { export_scores(scores->table, prefix); });
}

mp_status mp_export_variance(const mp_model* model, uint64_t tokens, uint64_t seed,
                             double ratio, const mp_scores* scores, uint64_t max_params,
                             int threads, const char* prefix) {
    if (!model || !prefix) return fail(MP_ERR_USAGE, "mp_export_variance: null argument");
    if (ratio < 0.0 || ratio >= 1.0) {
        return fail(MP_ERR_USAGE, fmt::format("prune ratio {} must lie in [0, 1)", ratio));
    }
    return guarded([&] {
        check_budget(model->bound, max_params);
        const int nthreads = resolve_threads(threads);
        const ToyMoeModel toy = load_toy_model(*model->reader, model->bound);
        const TokenBatch batch{tokens, toy.hidden_dim, seed};

        ScoreTable table;
        if (scores) {
            table = scores->table;
            if (table.layout_hash != layout_hash(model->bound)) {
                throw validation_error("score table was computed for a different model layout");
            }
        } else {
            table = score_checkpoint(*model->reader, model->bound,
                                     Criterion::from_name("aimer"), std::nullopt, nthreads);
        }
        const PruningPlan plan = ratio > 0.0 ? make_plan(table, ratio) : make_empty_plan(table);
        const ToyMoeModel pruned = prune_toy_model(toy, plan);

        std::vector<VarianceCurve> curves;
        curves.push_back(layer_variance(toy, batch, "full", nthreads));
        curves.push_back(layer_variance(pruned, batch, fmt::format("pruned@{:g}", ratio), nthreads));
        export_variance(curves, prefix);
    });
}

mp_status mp_export_stability(const mp_model* model, const char* criterion,
                              const uint64_t* sizes, size_t num_sizes, uint64_t seed,
                              double ratio, uint64_t max_params, int threads,
                              const char* prefix) {
    if (!model || !criterion || !sizes || !prefix || num_sizes == 0) {
        return fail(MP_ERR_USAGE, "mp_export_stability: null or empty argument");
    }
    Criterion crit;
    try {
        crit = Criterion::from_name(criterion);
    } catch (const std::exception& e) {
        return fail(MP_ERR_USAGE, e.what());
    }
    return guarded([&] {
        check_budget(model->bound, max_params);
        const ToyMoeModel toy = load_toy_model(*model->reader, model->bound);
        const StabilityMatrix matrix =
            stability_study(toy, model->bound, crit, {sizes, sizes + num_sizes}, seed, ratio,
                            resolve_threads(threads));
        export_stability(matrix, prefix);
    });
}

} // extern "C"
