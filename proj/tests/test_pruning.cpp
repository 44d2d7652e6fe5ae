// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "analysis.hpp"
#include "errors.hpp"
#include "helpers.hpp"
#include "pruning.hpp"
#include "toy_moe.hpp"

using namespace moeprune;
using testutil::TempDir;

namespace {

ModelLayout toy_layout(size_t layers, size_t experts, size_t k, size_t d, size_t m) {
    ModelLayout layout = layout_preset("qwen3-like");
    layout.num_layers = layers;
    layout.experts_per_layer = experts;
    layout.top_k = k;
    layout.hidden_dim = d;
    layout.expert_dim = m;
    return layout;
}

ScoreTable table_for(const ModelLayout& layout, std::vector<std::vector<double>> scores,
                     const char* criterion = "aimer") {
    ScoreTable table;
    table.criterion = Criterion::from_name(criterion);
    table.layers = std::move(scores);
    table.layout = layout_to_json(layout);
    table.layout_hash = layout_hash(layout);
    return table;
}

struct ToyFixture {
    TempDir dir;
    ModelLayout layout;

    ToyFixture(const std::string& tag, ToyDims dims, uint64_t seed = 42,
               const char* preset = "qwen3-like", uint64_t shard_limit = 0)
        : dir(tag) {
        gen_toy_model(dir / "toy", layout_preset(preset), dims, seed, Dtype::F32, shard_limit);
        CheckpointReader reader(dir / "toy");
        layout = bind_layout(layout_preset(preset), reader,
                             ModelConfig::load(dir / "toy" / "config.json"));
    }
};

} // namespace

TEST_CASE("make_plan prune counts use round-half-up") {
    const ModelLayout layout = toy_layout(2, 64, 2, 8, 4);
    std::vector<std::vector<double>> scores(2);
    for (auto& layer : scores) {
        for (size_t e = 0; e < 64; ++e) layer.push_back(0.5 + 0.001 * static_cast<double>(e));
    }
    const ScoreTable table = table_for(layout, scores);

    CHECK(make_plan(table, 0.25).prune_count() == 16);
    CHECK(make_plan(table, 0.25).retained_count() == 48);
    CHECK(make_plan(table, 0.50).prune_count() == 32);
    // round-half-up on a non-exact product: 0.3 * 64 = 19.2 -> 19
    CHECK(make_plan(table, 0.3).prune_count() == 19);

    CHECK_THROWS_AS(make_plan(table, 0.0), validation_error);
    CHECK_THROWS_AS(make_plan(table, 1.0), validation_error);
}

TEST_CASE("make_plan refuses ratios that retain fewer than top-k") {
    const ModelLayout layout = toy_layout(1, 8, 2, 8, 4);
    const ScoreTable table = table_for(layout, {{1, 2, 3, 4, 5, 6, 7, 8}});
    try {
        make_plan(table, 0.9);  // p = 7, retained 1 < k = 2
        FAIL("expected validation_error");
    } catch (const validation_error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("0.75") != std::string::npos);  // max feasible ratio
    }
}

TEST_CASE("plan selects the most-prunable end per criterion and is deterministic") {
    const ModelLayout layout = toy_layout(1, 4, 1, 8, 4);
    // aimer prunes the highest scores
    const ScoreTable aimer = table_for(layout, {{0.2, 0.9, 0.1, 0.8}}, "aimer");
    const PruningPlan plan = make_plan(aimer, 0.5);
    CHECK(plan.layers[0].pruned == std::vector<size_t>{1, 3});
    CHECK(plan.layers[0].retained == std::vector<size_t>{0, 2});
    CHECK(plan.old_to_new(0, 0) == 0);
    CHECK(plan.old_to_new(0, 2) == 1);
    CHECK_THROWS_AS(plan.old_to_new(0, 1), validation_error);

    // magnitude prunes the lowest scores
    const ScoreTable mag = table_for(layout, {{0.2, 0.9, 0.1, 0.8}}, "magnitude");
    CHECK(make_plan(mag, 0.5).layers[0].pruned == std::vector<size_t>{0, 2});

    const PruningPlan again = make_plan(aimer, 0.5);
    CHECK(again.to_json() == plan.to_json());
    CHECK(again.score_table_hash == plan.score_table_hash);
}

TEST_CASE("plan JSON round-trip") {
    TempDir dir("planjson");
    const ModelLayout layout = toy_layout(2, 4, 1, 8, 4);
    const ScoreTable table = table_for(layout, {{1, 2, 3, 4}, {4, 3, 2, 1}});
    const PruningPlan plan = make_plan(table, 0.5);
    plan.save(dir / "plan.json");
    const PruningPlan back = PruningPlan::load(dir / "plan.json");
    CHECK(back.to_json() == plan.to_json());
    CHECK_THROWS_AS(PruningPlan::load(dir / "nope.json"), format_error);
}

TEST_CASE("apply_plan drops, renames and slices") {
    ToyFixture fx("apply", ToyDims{1, 4, 1, 8, 4});
    CheckpointReader reader(fx.dir / "toy");

    const ScoreTable table = table_for(fx.layout, {{0.2, 0.9, 0.1, 0.8}});
    const PruningPlan plan = make_plan(table, 0.5);  // prunes {1, 3}
    apply_plan(reader, fx.layout, plan, fx.dir / "pruned");

    CheckpointReader pruned(fx.dir / "pruned");
    // survivors renamed 0 -> 0, 2 -> 1
    CHECK(pruned.read_raw("model.layers.0.mlp.experts.0.gate_proj.weight") ==
          reader.read_raw("model.layers.0.mlp.experts.0.gate_proj.weight"));
    CHECK(pruned.read_raw("model.layers.0.mlp.experts.1.gate_proj.weight") ==
          reader.read_raw("model.layers.0.mlp.experts.2.gate_proj.weight"));
    CHECK_FALSE(pruned.contains("model.layers.0.mlp.experts.2.gate_proj.weight"));
    CHECK_FALSE(pruned.contains("model.layers.0.mlp.experts.3.gate_proj.weight"));

    // router keeps rows {0, 2} in order
    const Tensor2D orig_router = reader.read_tensor2d("model.layers.0.mlp.gate.weight");
    const Tensor2D new_router = pruned.read_tensor2d("model.layers.0.mlp.gate.weight");
    REQUIRE(new_router.rows == 2);
    for (size_t c = 0; c < new_router.cols; ++c) {
        CHECK(new_router.at(0, c) == orig_router.at(0, c));
        CHECK(new_router.at(1, c) == orig_router.at(2, c));
    }

    // config patched
    const ModelConfig config = ModelConfig::load(fx.dir / "pruned" / "config.json");
    CHECK(config.get_count("num_experts") == 2);

    const VerifyReport report = verify_pruned(reader, pruned, plan, fx.layout);
    CHECK(report.all_pass());
}

TEST_CASE("empty plan is a payload-identical round trip") {
    ToyFixture fx("emptyplan", ToyDims{2, 4, 2, 8, 4});
    CheckpointReader reader(fx.dir / "toy");

    const ScoreTable table = score_checkpoint(reader, fx.layout, Criterion::from_name("aimer"));
    const PruningPlan plan = make_empty_plan(table);
    CHECK(plan.prune_count() == 0);
    apply_plan(reader, fx.layout, plan, fx.dir / "copy");

    CheckpointReader copy(fx.dir / "copy");
    CHECK(copy.names() == reader.names());
    for (const auto& name : reader.names()) {
        CHECK(copy.read_raw(name) == reader.read_raw(name));
        CHECK(copy.meta(name).shape == reader.meta(name).shape);
        CHECK(copy.meta(name).dtype == reader.meta(name).dtype);
    }
    // same writer, same order, same offsets: whole files match bit for bit
    CHECK(testutil::file_bytes(fx.dir / "copy" / "model.safetensors") ==
          testutil::file_bytes(fx.dir / "toy" / "model.safetensors"));
    const VerifyReport report = verify_pruned(reader, copy, plan, fx.layout);
    CHECK(report.all_pass());
}

TEST_CASE("pruning a sharded checkpoint keeps it sharded") {
    ToyFixture fx("shardmirror", ToyDims{2, 4, 2, 8, 4}, 42, "qwen3-like", 2048);
    CheckpointReader reader(fx.dir / "toy");
    REQUIRE(reader.sharded());

    const ScoreTable table = score_checkpoint(reader, fx.layout, Criterion::from_name("aimer"));
    const PruningPlan plan = make_plan(table, 0.25);
    apply_plan(reader, fx.layout, plan, fx.dir / "pruned");

    CheckpointReader pruned(fx.dir / "pruned");
    CHECK(pruned.sharded());
    CHECK(verify_pruned(reader, pruned, plan, fx.layout).all_pass());
}

TEST_CASE("apply_plan refuses mismatched provenance") {
    ToyFixture fx("provenance", ToyDims{1, 4, 1, 8, 4});
    CheckpointReader reader(fx.dir / "toy");

    const ModelLayout other = toy_layout(1, 8, 2, 8, 4);  // different expert count
    const ScoreTable stale = table_for(other, {{1, 2, 3, 4, 5, 6, 7, 8}});
    const PruningPlan plan = make_plan(stale, 0.25);
    CHECK_THROWS_AS(apply_plan(reader, fx.layout, plan, fx.dir / "out"), validation_error);
}

TEST_CASE("router bias is sliced alongside router rows") {
    ToyFixture fx("biasslice", ToyDims{1, 4, 1, 8, 4}, 42, "ernie-like");
    CheckpointReader reader(fx.dir / "toy");
    const std::string bias_name = "model.layers.0.mlp.moe_statics.e_score_correction_bias";
    REQUIRE(reader.contains(bias_name));

    const ScoreTable table = table_for(fx.layout, {{0.2, 0.9, 0.1, 0.8}});
    const PruningPlan plan = make_plan(table, 0.5);  // keeps {0, 2}
    apply_plan(reader, fx.layout, plan, fx.dir / "pruned");

    CheckpointReader pruned(fx.dir / "pruned");
    const auto orig = reader.read_values(bias_name);
    const auto sliced = pruned.read_values(bias_name);
    REQUIRE(sliced.size() == 2);
    CHECK(sliced[0] == orig[0]);
    CHECK(sliced[1] == orig[2]);
    CHECK(verify_pruned(reader, pruned, plan, fx.layout).all_pass());
}

TEST_CASE("verify_pruned itemizes failures on a tampered checkpoint") {
    ToyFixture fx("tamper", ToyDims{1, 4, 2, 8, 4});
    CheckpointReader reader(fx.dir / "toy");
    const ScoreTable table = score_checkpoint(reader, fx.layout, Criterion::from_name("aimer"));
    const PruningPlan plan = make_plan(table, 0.5);
    apply_plan(reader, fx.layout, plan, fx.dir / "pruned");

    // rebuild the pruned checkpoint with one extra expert tensor smuggled in
    CheckpointReader pruned(fx.dir / "pruned");
    std::vector<TensorSpec> specs;
    for (const auto& name : pruned.names()) {
        const TensorMeta& meta = pruned.meta(name);
        specs.push_back({name, meta.dtype, meta.shape, pruned.read_raw(name)});
    }
    const std::string extra = "model.layers.0.mlp.experts.3.gate_proj.weight";
    specs.push_back({extra, Dtype::F32, {4, 8}, encode(testutil::random_values(32, 1), Dtype::F32)});
    write_checkpoint(specs, fx.dir / "tampered");
    std::filesystem::copy_file(fx.dir / "pruned" / "config.json",
                               fx.dir / "tampered" / "config.json");

    CheckpointReader tampered(fx.dir / "tampered");
    const VerifyReport report = verify_pruned(reader, tampered, plan, fx.layout);
    CHECK_FALSE(report.all_pass());
    bool named = false;
    for (const auto& failure : report.failures()) {
        if (failure.find(extra) != std::string::npos) named = true;
    }
    CHECK(named);
}

TEST_CASE("parameter accounting: half ratio halves expert parameters") {
    ToyFixture fx("halving", ToyDims{2, 8, 2, 8, 4});
    CheckpointReader reader(fx.dir / "toy");
    const ScoreTable table = score_checkpoint(reader, fx.layout, Criterion::from_name("aimer"));
    const PruningPlan plan = make_plan(table, 0.5);
    apply_plan(reader, fx.layout, plan, fx.dir / "pruned");

    CheckpointReader pruned(fx.dir / "pruned");
    const VerifyReport report = verify_pruned(reader, pruned, plan, fx.layout);
    CHECK(report.all_pass());
    CHECK(report.original_expert_params == 2 * 8 * 3 * 8 * 4);
    CHECK(report.pruned_expert_params * 2 == report.original_expert_params);
}

TEST_CASE("routed-equivalence on tokens avoiding pruned experts") {
    ToyFixture fx("routedeq", ToyDims{4, 8, 2, 16, 8});
    CheckpointReader reader(fx.dir / "toy");
    const ToyMoeModel model = load_toy_model(reader, fx.layout);

    const ScoreTable table = score_checkpoint(reader, fx.layout, Criterion::from_name("aimer"));
    const PruningPlan plan = make_plan(table, 0.25);
    apply_plan(reader, fx.layout, plan, fx.dir / "pruned");

    CheckpointReader pruned_reader(fx.dir / "pruned");
    ModelLayout pruned_layout = bind_layout(layout_preset("qwen3-like"), pruned_reader,
                                            ModelConfig::load(fx.dir / "pruned" / "config.json"));
    const ToyMoeModel pruned = load_toy_model(pruned_reader, pruned_layout);

    const TokenBatch batch{512, model.hidden_dim, 11};
    size_t qualifying = 0;
    for (size_t t = 0; t < batch.count; ++t) {
        // trace the full model's routing; keep tokens that never touch a pruned expert
        std::vector<float> h = batch.token(t);
        bool avoids = true;
        std::vector<float> full_out = h;
        {
            std::vector<float> cur = h;
            for (size_t l = 0; l < model.num_layers(); ++l) {
                LayerTrace trace;
                cur = moe_forward(model, l, cur, &trace);
                for (size_t e : trace.selected) {
                    if (!plan.is_retained(l, e)) avoids = false;
                }
            }
            full_out = cur;
        }
        if (!avoids) continue;
        qualifying++;

        std::vector<float> cur = h;
        for (size_t l = 0; l < pruned.num_layers(); ++l) cur = moe_forward(pruned, l, cur);
        for (size_t j = 0; j < cur.size(); ++j) {
            CHECK(static_cast<double>(cur[j]) ==
                  doctest::Approx(static_cast<double>(full_out[j])).epsilon(1e-6));
        }
    }
    // the filter must actually find usable tokens
    CHECK(qualifying > 10);
}
