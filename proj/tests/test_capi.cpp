// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0
//
// Exercises the shared-library surface end to end: gen -> open -> score ->
// plan -> prune -> verify -> export, plus the error-code contract.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <string>

#include "helpers.hpp"
#include "moeprune.h"

using testutil::TempDir;
namespace fs = std::filesystem;

TEST_CASE("full pipeline through the C API") {
    TempDir dir("capi");
    const std::string toy = (dir / "toy").string();

    REQUIRE(mp_gen_toy(toy.c_str(), "qwen3-like", 2, 8, 2, 16, 8, 42, "F32", 0) == MP_OK);

    mp_layout* layout = nullptr;
    REQUIRE(mp_layout_open("qwen3-like", &layout) == MP_OK);

    mp_model* model = nullptr;
    REQUIRE(mp_model_open(toy.c_str(), layout, &model) == MP_OK);
    CHECK(mp_model_num_layers(model) == 2);
    CHECK(mp_model_experts_per_layer(model) == 8);
    CHECK(mp_model_top_k(model) == 2);
    CHECK(mp_model_hidden_dim(model) == 16);
    CHECK(mp_model_expert_dim(model) == 8);

    mp_scores* scores = nullptr;
    REQUIRE(mp_score(model, "aimer", 42, 2, &scores) == MP_OK);
    CHECK(mp_scores_num_layers(scores) == 2);
    CHECK(mp_scores_experts_per_layer(scores) == 8);
    CHECK(std::strcmp(mp_scores_criterion(scores), "aimer") == 0);
    CHECK(mp_scores_timing_seconds(scores) >= 0.0);
    CHECK(mp_scores_degenerate_count(scores) == 0);
    const double lower = 1.0 / std::sqrt(3.0 * 8.0 * 16.0);
    for (int64_t l = 0; l < 2; ++l) {
        for (int64_t e = 0; e < 8; ++e) {
            const double s = mp_scores_get(scores, l, e);
            CHECK(s >= lower);
            CHECK(s <= 1.0);
        }
    }

    const std::string scores_path = (dir / "scores.json").string();
    REQUIRE(mp_scores_save(scores, scores_path.c_str()) == MP_OK);
    mp_scores* loaded = nullptr;
    REQUIRE(mp_scores_load(scores_path.c_str(), &loaded) == MP_OK);
    CHECK(mp_scores_get(loaded, 1, 3) == mp_scores_get(scores, 1, 3));

    mp_layout* from_scores = nullptr;
    REQUIRE(mp_layout_from_scores(loaded, &from_scores) == MP_OK);
    mp_model* reopened = nullptr;
    REQUIRE(mp_model_open(toy.c_str(), from_scores, &reopened) == MP_OK);

    mp_plan* plan = nullptr;
    REQUIRE(mp_plan_make(scores, 0.25, &plan) == MP_OK);
    CHECK(mp_plan_pruned_per_layer(plan) == 2);
    CHECK(mp_plan_retained_per_layer(plan) == 6);
    const std::string plan_path = (dir / "plan.json").string();
    REQUIRE(mp_plan_save(plan, plan_path.c_str()) == MP_OK);
    mp_plan* plan_loaded = nullptr;
    REQUIRE(mp_plan_load(plan_path.c_str(), &plan_loaded) == MP_OK);
    CHECK(mp_plan_pruned_per_layer(plan_loaded) == 2);

    const std::string pruned = (dir / "pruned").string();
    REQUIRE(mp_prune(model, plan, pruned.c_str(), 0) == MP_OK);

    int all_pass = 0;
    const std::string report = (dir / "report.json").string();
    REQUIRE(mp_verify(toy.c_str(), pruned.c_str(), plan, report.c_str(), &all_pass) == MP_OK);
    CHECK(all_pass == 1);
    CHECK(fs::exists(report));

    // pruned model reopens with 6 experts per layer
    mp_model* pruned_model = nullptr;
    REQUIRE(mp_model_open(pruned.c_str(), layout, &pruned_model) == MP_OK);
    CHECK(mp_model_experts_per_layer(pruned_model) == 6);

    const std::string prefix = (dir / "fig").string();
    REQUIRE(mp_export_profile(scores, prefix.c_str()) == MP_OK);
    CHECK(fs::exists(dir / "fig_profile.csv"));
    CHECK(fs::exists(dir / "fig_profile.svg"));
    CHECK(fs::exists(dir / "fig_separation.csv"));
    REQUIRE(mp_export_scores(scores, prefix.c_str()) == MP_OK);
    CHECK(fs::exists(dir / "fig_scores.csv"));

    REQUIRE(mp_export_variance(model, 64, 42, 0.25, scores, 50000000, 2, prefix.c_str()) == MP_OK);
    CHECK(fs::exists(dir / "fig_variance.csv"));
    CHECK(fs::exists(dir / "fig_variance.svg"));

    const uint64_t sizes[3] = {16, 64, 256};
    REQUIRE(mp_export_stability(model, "reap", sizes, 3, 42, 0.25, 50000000, 2,
                                prefix.c_str()) == MP_OK);
    CHECK(fs::exists(dir / "fig_stability.csv"));
    CHECK(fs::exists(dir / "fig_overlap.csv"));

    mp_model_free(pruned_model);
    mp_model_free(reopened);
    mp_layout_free(from_scores);
    mp_plan_free(plan_loaded);
    mp_plan_free(plan);
    mp_scores_free(loaded);
    mp_scores_free(scores);
    mp_model_free(model);
    mp_layout_free(layout);
}

TEST_CASE("calibration criteria through the C API") {
    TempDir dir("capical");
    const std::string toy = (dir / "toy").string();
    REQUIRE(mp_gen_toy(toy.c_str(), "qwen3-like", 2, 4, 2, 8, 4, 7, "F32", 0) == MP_OK);

    mp_layout* layout = nullptr;
    REQUIRE(mp_layout_open("qwen3-like", &layout) == MP_OK);
    mp_model* model = nullptr;
    REQUIRE(mp_model_open(toy.c_str(), layout, &model) == MP_OK);

    const std::string stats = (dir / "stats.json").string();
    mp_scores* reap = nullptr;
    REQUIRE(mp_calibrate(model, "reap", 128, 42, 50000000, stats.c_str(), 2, &reap) == MP_OK);
    CHECK(fs::exists(stats));
    CHECK(std::strcmp(mp_scores_criterion(reap), "reap") == 0);

    // seer <= frequency per expert
    mp_scores* freq = nullptr;
    mp_scores* seer = nullptr;
    REQUIRE(mp_calibrate(model, "frequency", 128, 42, 50000000, nullptr, 2, &freq) == MP_OK);
    REQUIRE(mp_calibrate(model, "seer", 128, 42, 50000000, nullptr, 2, &seer) == MP_OK);
    for (int64_t l = 0; l < 2; ++l) {
        for (int64_t e = 0; e < 4; ++e) {
            CHECK(mp_scores_get(seer, l, e) <= mp_scores_get(freq, l, e) + 1e-12);
        }
    }

    // parameter budget refusal
    mp_scores* refused = nullptr;
    CHECK(mp_calibrate(model, "reap", 16, 42, 100, nullptr, 1, &refused) == MP_ERR_INVALID);
    CHECK(refused == nullptr);
    CHECK(std::string(mp_last_error()).find("budget") != std::string::npos);

    mp_scores_free(seer);
    mp_scores_free(freq);
    mp_scores_free(reap);
    mp_model_free(model);
    mp_layout_free(layout);
}

TEST_CASE("error codes: usage, invalid and io") {
    TempDir dir("capierr");

    CHECK(mp_layout_open(nullptr, nullptr) == MP_ERR_USAGE);
    CHECK(mp_gen_toy((dir / "x").string().c_str(), "qwen3-like", 2, 4, 9, 8, 4, 1, "F32", 0) ==
          MP_ERR_USAGE);  // top-k > experts
    CHECK(std::string(mp_last_error()).find("top-k") != std::string::npos);

    mp_layout* layout = nullptr;
    CHECK(mp_layout_open("nonexistent-preset", &layout) == MP_ERR_INVALID);
    CHECK(layout == nullptr);
    REQUIRE(mp_layout_open("olmoe-like", &layout) == MP_OK);

    mp_model* model = nullptr;
    CHECK(mp_model_open((dir / "missing").string().c_str(), layout, &model) == MP_ERR_IO);

    // wrong-family layout against a real checkpoint is a validation error
    const std::string toy = (dir / "toy").string();
    REQUIRE(mp_gen_toy(toy.c_str(), "ernie-like", 1, 4, 2, 8, 4, 1, "F32", 0) == MP_OK);
    CHECK(mp_model_open(toy.c_str(), layout, &model) == MP_ERR_INVALID);
    CHECK(model == nullptr);

    mp_layout* ernie = nullptr;
    REQUIRE(mp_layout_open("ernie-like", &ernie) == MP_OK);
    REQUIRE(mp_model_open(toy.c_str(), ernie, &model) == MP_OK);

    mp_scores* scores = nullptr;
    CHECK(mp_score(model, "reap", 42, 1, &scores) == MP_ERR_USAGE);
    CHECK(mp_score(model, "definitely-not-a-criterion", 42, 1, &scores) == MP_ERR_USAGE);
    CHECK(mp_calibrate(model, "aimer", 16, 42, 50000000, nullptr, 1, &scores) == MP_ERR_USAGE);

    REQUIRE(mp_score(model, "aimer", 42, 1, &scores) == MP_OK);
    mp_plan* plan = nullptr;
    CHECK(mp_plan_make(scores, 1.5, &plan) == MP_ERR_INVALID);
    CHECK(mp_plan_make(scores, 0.9, &plan) == MP_ERR_INVALID);  // retained < top-k
    CHECK(std::isnan(mp_scores_get(scores, 99, 0)));

    mp_scores* missing = nullptr;
    CHECK(mp_scores_load((dir / "no.json").string().c_str(), &missing) == MP_ERR_IO);
    CHECK(missing == nullptr);

    mp_scores_free(scores);
    mp_model_free(model);
    mp_layout_free(ernie);
    mp_layout_free(layout);
}

TEST_CASE("version and error strings are stable") {
    CHECK(std::string(mp_version()) == "0.1.0");
    mp_layout* layout = nullptr;
    REQUIRE(mp_layout_open("qwen3-like", &layout) == MP_OK);
    CHECK(std::string(mp_last_error()).empty());
    mp_layout_free(layout);
}
