// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Everything goes through the C API of libmoeprune;
// exit codes: 0 success, 1 domain/validation error, 2 I/O or format error,
// 3 invalid usage.

#include <algorithm>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "moeprune.h"

namespace {

int report(mp_status status) {
    if (status != MP_OK) std::cerr << "error: " << mp_last_error() << "\n";
    return static_cast<int>(status);
}

struct ScoresHandle {
    mp_scores* ptr = nullptr;
    ~ScoresHandle() { mp_scores_free(ptr); }
};

struct LayoutHandle {
    mp_layout* ptr = nullptr;
    ~LayoutHandle() { mp_layout_free(ptr); }
};

struct ModelHandle {
    mp_model* ptr = nullptr;
    ~ModelHandle() { mp_model_free(ptr); }
};

struct PlanHandle {
    mp_plan* ptr = nullptr;
    ~PlanHandle() { mp_plan_free(ptr); }
};

int open_model(const std::string& model_dir, const std::string& layout_spec,
               ModelHandle& model) {
    LayoutHandle layout;
    if (mp_status s = mp_layout_open(layout_spec.c_str(), &layout.ptr); s != MP_OK) {
        return report(s);
    }
    return report(mp_model_open(model_dir.c_str(), layout.ptr, &model.ptr));
}

void print_score_summary(const mp_scores* scores) {
    const int64_t layers = mp_scores_num_layers(scores);
    const int64_t experts = mp_scores_experts_per_layer(scores);
    std::printf("criterion %s: %" PRId64 " layers x %" PRId64 " experts\n",
                mp_scores_criterion(scores), layers, experts);
    for (int64_t l = 0; l < layers; ++l) {
        double lo = mp_scores_get(scores, l, 0), hi = lo;
        for (int64_t e = 1; e < experts; ++e) {
            const double v = mp_scores_get(scores, l, e);
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        std::printf("  layer %2" PRId64 ": scores in [%.6g, %.6g]\n", l, lo, hi);
    }
    std::printf("scoring took %.3f s\n", mp_scores_timing_seconds(scores));
    if (const int64_t degenerate = mp_scores_degenerate_count(scores); degenerate > 0) {
        std::fprintf(stderr, "warning: %" PRId64 " all-zero expert(s) scored as most prunable\n",
                     degenerate);
    }
}

void print_verify_report(const std::string& report_path) {
    std::ifstream in(report_path);
    if (!in) return;
    try {
        const auto doc = nlohmann::json::parse(in);
        for (const auto& check : doc.at("checks")) {
            std::printf("  [%s] %s: %s\n", check.at("pass").get<bool>() ? "ok" : "FAIL",
                        check.at("check").get<std::string>().c_str(),
                        check.at("detail").get<std::string>().c_str());
        }
    } catch (const std::exception&) {
        // report stays on disk; printing it is best-effort
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"moeprune: expert pruning for Mixture-of-Experts checkpoints"};
    app.require_subcommand(1);
    app.fallthrough();  // accept --threads after the subcommand as well
    int threads = 0;
    app.add_option("--threads", threads, "worker threads (default: MOEPRUNE_THREADS or auto)")
        ->envname("MOEPRUNE_THREADS");

    // gen-toy
    auto* gen = app.add_subcommand("gen-toy", "generate a deterministic toy MoE checkpoint");
    struct {
        int64_t layers = 4, experts = 8, topk = 2, dim = 64, hidden = 32;
        uint64_t seed = 42, shard_size = 0;
        std::string layout = "qwen3-like", out, dtype = "F32";
    } gt;
    gen->add_option("--layers", gt.layers, "number of MoE layers")->check(CLI::PositiveNumber);
    gen->add_option("--experts", gt.experts, "experts per layer")->check(CLI::PositiveNumber);
    gen->add_option("--topk", gt.topk, "router top-k")->check(CLI::PositiveNumber);
    gen->add_option("--dim", gt.dim, "hidden dimension d")->check(CLI::PositiveNumber);
    gen->add_option("--hidden", gt.hidden, "expert hidden dimension m")->check(CLI::PositiveNumber);
    gen->add_option("--seed", gt.seed, "generator seed");
    gen->add_option("--layout", gt.layout, "layout preset or JSON file");
    gen->add_option("--dtype", gt.dtype, "storage dtype")->check(CLI::IsMember({"F32", "F16", "BF16"}));
    gen->add_option("--shard-size", gt.shard_size, "max payload bytes per shard (0 = single)");
    gen->add_option("--out", gt.out, "output directory")->required();

    // score
    auto* score = app.add_subcommand("score", "score experts with a weight-only criterion");
    struct {
        std::string model, layout, criterion = "aimer", out;
        uint64_t seed = 42;
    } sc;
    score->add_option("--model", sc.model, "checkpoint directory")->required();
    score->add_option("--layout", sc.layout, "layout preset or JSON file")->required();
    score->add_option("--criterion", sc.criterion, "aimer | magnitude | hoyer | random")
        ->check(CLI::IsMember({"aimer", "magnitude", "hoyer", "random"}));
    score->add_option("--seed", sc.seed, "seed for the random baseline (default 42)");
    score->add_option("--out", sc.out, "score table JSON output")->required();

    // prune
    auto* prune = app.add_subcommand("prune", "apply a pruning ratio to a checkpoint");
    struct {
        std::string model, scores, out;
        double ratio = 0.0;
        uint64_t shard_size = 0;
    } pr;
    prune->add_option("--model", pr.model, "checkpoint directory")->required();
    prune->add_option("--scores", pr.scores, "score table JSON from `score`/`calibrate`")->required();
    prune->add_option("--ratio", pr.ratio, "fraction of experts to prune, in (0,1)")
        ->required()
        ->check(CLI::Range(std::nextafter(0.0, 1.0), std::nextafter(1.0, 0.0)));
    prune->add_option("--shard-size", pr.shard_size, "max payload bytes per shard (0 = single)");
    prune->add_option("--out", pr.out, "output checkpoint directory")->required();

    // calibrate
    auto* calibrate = app.add_subcommand("calibrate", "collect routing stats and score "
                                                      "with a calibration criterion (toy scale)");
    struct {
        std::string model, layout, criterion = "reap", out, stats;
        uint64_t tokens = 1024, seed = 42, max_params = 50000000;
    } cal;
    calibrate->add_option("--model", cal.model, "checkpoint directory")->required();
    calibrate->add_option("--layout", cal.layout, "layout preset or JSON file")->required();
    calibrate->add_option("--criterion", cal.criterion, "freq | frequency | seer | ean | reap")
        ->check(CLI::IsMember({"freq", "frequency", "seer", "ean", "reap"}));
    calibrate->add_option("--tokens", cal.tokens, "calibration tokens (default 1024)");
    calibrate->add_option("--seed", cal.seed, "token generator seed (default 42)");
    calibrate->add_option("--max-params", cal.max_params,
                          "refuse models above this routed parameter count");
    calibrate->add_option("--stats", cal.stats, "routing stats sidecar (default <out>.stats.json)");
    calibrate->add_option("--out", cal.out, "score table JSON output")->required();

    // profile
    auto* profile = app.add_subcommand("profile", "rank profile + separation of a score table");
    struct {
        std::string scores, out;
    } pf;
    profile->add_option("--scores", pf.scores, "score table JSON")->required();
    profile->add_option("--out", pf.out, "output prefix for CSV/SVG")->required();

    // variance
    auto* variance = app.add_subcommand("variance", "layer-wise hidden-state variance, "
                                                    "full vs pruned (toy scale)");
    struct {
        std::string model, layout, scores, out;
        uint64_t tokens = 1024, seed = 42, max_params = 50000000;
        double ratio = 0.0;
    } va;
    variance->add_option("--model", va.model, "checkpoint directory")->required();
    variance->add_option("--layout", va.layout, "layout preset or JSON file")->required();
    variance->add_option("--tokens", va.tokens, "tokens to average over (default 1024)");
    variance->add_option("--seed", va.seed, "token generator seed (default 42)");
    variance->add_option("--prune-ratio", va.ratio, "ratio for the pruned variant (0 = none)")
        ->check(CLI::Range(0.0, std::nextafter(1.0, 0.0)));
    variance->add_option("--scores", va.scores, "score table for the pruned variant "
                                                "(default: aimer, computed on the fly)");
    variance->add_option("--max-params", va.max_params,
                         "refuse models above this routed parameter count");
    variance->add_option("--out", va.out, "output prefix for CSV/SVG")->required();

    // stability
    auto* stability = app.add_subcommand("stability", "ranking stability across calibration "
                                                      "sizes (toy scale)");
    struct {
        std::string model, layout, criterion = "reap", out;
        std::vector<uint64_t> sizes{64, 256, 1024};
        uint64_t seed = 42, max_params = 50000000;
        double ratio = 0.25;
    } st;
    stability->add_option("--model", st.model, "checkpoint directory")->required();
    stability->add_option("--layout", st.layout, "layout preset or JSON file")->required();
    stability->add_option("--criterion", st.criterion, "any criterion; weight-only ones "
                                                       "are the calibration-free control")
        ->check(CLI::IsMember({"aimer", "magnitude", "hoyer", "random", "freq", "frequency",
                               "seer", "ean", "reap"}));
    stability->add_option("--sizes", st.sizes, "ascending calibration sizes")
        ->delimiter(',');
    stability->add_option("--seed", st.seed, "token generator seed (default 42)");
    stability->add_option("--ratio", st.ratio, "reference ratio for pruned-set overlap")
        ->check(CLI::Range(std::nextafter(0.0, 1.0), std::nextafter(1.0, 0.0)));
    stability->add_option("--max-params", st.max_params,
                          "refuse models above this routed parameter count");
    stability->add_option("--out", st.out, "output prefix for CSV/SVG")->required();

    // verify
    auto* verify = app.add_subcommand("verify", "audit a pruned checkpoint against its original");
    struct {
        std::string original, pruned, plan, report;
    } vf;
    verify->add_option("--original", vf.original, "original checkpoint directory")->required();
    verify->add_option("--pruned", vf.pruned, "pruned checkpoint directory")->required();
    verify->add_option("--plan", vf.plan, "pruning plan JSON")->required();
    verify->add_option("--report", vf.report, "report JSON output (default <pruned>/verify_report.json)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 3;
    }

    if (gen->parsed()) {
        if (gt.topk > gt.experts) {
            std::cerr << "error: --topk must not exceed --experts\n";
            return 3;
        }
        const int code = report(mp_gen_toy(gt.out.c_str(), gt.layout.c_str(), gt.layers,
                                           gt.experts, gt.topk, gt.dim, gt.hidden, gt.seed,
                                           gt.dtype.c_str(), gt.shard_size));
        if (code == 0) {
            std::printf("wrote toy checkpoint to %s (%" PRId64 " layers x %" PRId64 " experts)\n",
                        gt.out.c_str(), gt.layers, gt.experts);
        }
        return code;
    }

    if (score->parsed()) {
        ModelHandle model;
        if (int code = open_model(sc.model, sc.layout, model); code != 0) return code;
        ScoresHandle scores;
        if (mp_status s = mp_score(model.ptr, sc.criterion.c_str(), sc.seed, threads, &scores.ptr);
            s != MP_OK) {
            return report(s);
        }
        if (mp_status s = mp_scores_save(scores.ptr, sc.out.c_str()); s != MP_OK) return report(s);
        print_score_summary(scores.ptr);
        std::printf("score table written to %s\n", sc.out.c_str());
        return 0;
    }

    if (prune->parsed()) {
        ScoresHandle scores;
        if (mp_status s = mp_scores_load(pr.scores.c_str(), &scores.ptr); s != MP_OK) {
            return report(s);
        }
        PlanHandle plan;
        if (mp_status s = mp_plan_make(scores.ptr, pr.ratio, &plan.ptr); s != MP_OK) {
            return report(s);
        }
        // open the model under the layout the scores were computed for; a
        // stale score table fails either here or at the provenance check
        LayoutHandle layout;
        if (mp_status s = mp_layout_from_scores(scores.ptr, &layout.ptr); s != MP_OK) {
            return report(s);
        }
        ModelHandle model;
        if (mp_status s = mp_model_open(pr.model.c_str(), layout.ptr, &model.ptr); s != MP_OK) {
            return report(s);
        }
        if (mp_status s = mp_prune(model.ptr, plan.ptr, pr.out.c_str(), pr.shard_size);
            s != MP_OK) {
            return report(s);
        }
        const std::string plan_path = pr.out + "/pruning_plan.json";
        if (mp_status s = mp_plan_save(plan.ptr, plan_path.c_str()); s != MP_OK) return report(s);

        const std::string report_path = pr.out + "/verify_report.json";
        int all_pass = 0;
        if (mp_status s = mp_verify(pr.model.c_str(), pr.out.c_str(), plan.ptr,
                                    report_path.c_str(), &all_pass);
            s != MP_OK) {
            return report(s);
        }
        std::printf("pruned %" PRId64 " of %" PRId64 " experts per layer -> %s\n",
                    mp_plan_pruned_per_layer(plan.ptr),
                    mp_plan_pruned_per_layer(plan.ptr) + mp_plan_retained_per_layer(plan.ptr),
                    pr.out.c_str());
        print_verify_report(report_path);
        if (!all_pass) {
            std::cerr << "error: verification failed, see " << report_path << "\n";
            return 1;
        }
        std::printf("verification passed (%s)\n", report_path.c_str());
        return 0;
    }

    if (calibrate->parsed()) {
        ModelHandle model;
        if (int code = open_model(cal.model, cal.layout, model); code != 0) return code;
        const std::string stats_path = cal.stats.empty() ? cal.out + ".stats.json" : cal.stats;
        ScoresHandle scores;
        if (mp_status s = mp_calibrate(model.ptr, cal.criterion.c_str(), cal.tokens, cal.seed,
                                       cal.max_params, stats_path.c_str(), threads, &scores.ptr);
            s != MP_OK) {
            return report(s);
        }
        if (mp_status s = mp_scores_save(scores.ptr, cal.out.c_str()); s != MP_OK) return report(s);
        print_score_summary(scores.ptr);
        std::printf("score table written to %s (stats: %s)\n", cal.out.c_str(), stats_path.c_str());
        return 0;
    }

    if (profile->parsed()) {
        ScoresHandle scores;
        if (mp_status s = mp_scores_load(pf.scores.c_str(), &scores.ptr); s != MP_OK) {
            return report(s);
        }
        if (mp_status s = mp_export_profile(scores.ptr, pf.out.c_str()); s != MP_OK) {
            return report(s);
        }
        std::printf("wrote %s_profile.csv, %s_profile.svg, %s_separation.csv\n", pf.out.c_str(),
                    pf.out.c_str(), pf.out.c_str());
        return 0;
    }

    if (variance->parsed()) {
        ModelHandle model;
        if (int code = open_model(va.model, va.layout, model); code != 0) return code;
        ScoresHandle scores;
        if (!va.scores.empty()) {
            if (mp_status s = mp_scores_load(va.scores.c_str(), &scores.ptr); s != MP_OK) {
                return report(s);
            }
        }
        if (mp_status s = mp_export_variance(model.ptr, va.tokens, va.seed, va.ratio, scores.ptr,
                                             va.max_params, threads, va.out.c_str());
            s != MP_OK) {
            return report(s);
        }
        std::printf("wrote %s_variance.csv, %s_variance.svg\n", va.out.c_str(), va.out.c_str());
        return 0;
    }

    if (stability->parsed()) {
        ModelHandle model;
        if (int code = open_model(st.model, st.layout, model); code != 0) return code;
        if (mp_status s = mp_export_stability(model.ptr, st.criterion.c_str(), st.sizes.data(),
                                              st.sizes.size(), st.seed, st.ratio, st.max_params,
                                              threads, st.out.c_str());
            s != MP_OK) {
            return report(s);
        }
        std::printf("wrote %s_stability.csv, %s_stability.svg, %s_overlap.csv\n", st.out.c_str(),
                    st.out.c_str(), st.out.c_str());
        return 0;
    }

    if (verify->parsed()) {
        PlanHandle plan;
        if (mp_status s = mp_plan_load(vf.plan.c_str(), &plan.ptr); s != MP_OK) return report(s);
        const std::string report_path =
            vf.report.empty() ? vf.pruned + "/verify_report.json" : vf.report;
        int all_pass = 0;
        if (mp_status s = mp_verify(vf.original.c_str(), vf.pruned.c_str(), plan.ptr,
                                    report_path.c_str(), &all_pass);
            s != MP_OK) {
            return report(s);
        }
        print_verify_report(report_path);
        if (!all_pass) {
            std::cerr << "error: verification failed, see " << report_path << "\n";
            return 1;
        }
        std::printf("verification passed (%s)\n", report_path.c_str());
        return 0;
    }

    return 3;
}
