// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0
//
// Drives the installed CLI binary as a subprocess and checks the exit-code
// contract: 0 ok, 1 validation, 2 I/O, 3 usage.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <string>
#include <tuple>

#include <json.hpp>
#include <sys/wait.h>

#include "helpers.hpp"

#ifndef MOEPRUNE_CLI
#error "MOEPRUNE_CLI must point at the CLI binary"
#endif

using testutil::TempDir;

namespace {

int run(const std::string& args, const std::string& log = "/dev/null") {
    const std::string cmd = std::string(MOEPRUNE_CLI) + " " + args + " >" + log + " 2>&1";
    const int rc = std::system(cmd.c_str());
    if (rc == -1) return -1;
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

nlohmann::json load_json(const std::filesystem::path& p) {
    std::ifstream in(p);
    return nlohmann::json::parse(in);
}

} // namespace

TEST_CASE("gen-toy is deterministic and validates flags") {
    TempDir dir("cligen");
    const std::string a = (dir / "a").string();
    const std::string b = (dir / "b").string();

    CHECK(run("gen-toy --out " + a) == 0);
    CHECK(run("gen-toy --out " + b) == 0);
    CHECK(testutil::file_bytes(dir / "a" / "model.safetensors") ==
          testutil::file_bytes(dir / "b" / "model.safetensors"));

    CHECK(run("gen-toy --experts 4 --topk 9 --out " + (dir / "c").string()) == 3);
    CHECK(run("gen-toy --layers 0 --out " + (dir / "d").string()) == 3);
    CHECK(run("totally-unknown-subcommand") == 3);
    CHECK(run("--help") == 0);
}

TEST_CASE("score: bounds, defaults and failure codes") {
    TempDir dir("cliscore");
    const std::string toy = (dir / "toy").string();
    REQUIRE(run("gen-toy --layers 2 --experts 4 --dim 16 --hidden 8 --out " + toy) == 0);

    const std::string out = (dir / "scores.json").string();
    CHECK(run("score --model " + toy + " --layout qwen3-like --criterion aimer --out " + out) == 0);
    const auto doc = load_json(out);
    CHECK(doc["criterion"] == "aimer");
    CHECK(doc["prune_end"] == "highest");
    const double lower = 1.0 / std::sqrt(3.0 * 8.0 * 16.0);
    for (const auto& layer : doc["layers"]) {
        for (double s : layer["scores"].get<std::vector<double>>()) {
            CHECK(s >= lower);
            CHECK(s <= 1.0);
        }
    }

    // unknown criterion is a usage error
    CHECK(run("score --model " + toy + " --layout qwen3-like --criterion entropy --out " + out) == 3);
    // calibration criterion on the weight-only command is a usage error
    CHECK(run("score --model " + toy + " --layout qwen3-like --criterion reap --out " + out) == 3);
    // missing model directory is an I/O error
    CHECK(run("score --model " + (dir / "nope").string() +
              " --layout qwen3-like --criterion aimer --out " + out) == 2);
    // bad preset name is a validation error
    CHECK(run("score --model " + toy + " --layout mixtral --criterion aimer --out " + out) == 1);

    // random defaults to seed 42
    const std::string r1 = (dir / "r1.json").string();
    const std::string r2 = (dir / "r2.json").string();
    CHECK(run("score --model " + toy + " --layout qwen3-like --criterion random --out " + r1) == 0);
    CHECK(run("score --model " + toy + " --layout qwen3-like --criterion random --seed 42 --out " +
              r2) == 0);
    CHECK(load_json(r1)["seed"] == 42);
    CHECK(load_json(r1)["layers"] == load_json(r2)["layers"]);
}

TEST_CASE("prune: happy path, flag validation and stale scores") {
    TempDir dir("cliprune");
    const std::string toy = (dir / "toy").string();
    REQUIRE(run("gen-toy --layers 2 --experts 8 --dim 16 --hidden 8 --out " + toy) == 0);
    const std::string scores = (dir / "scores.json").string();
    REQUIRE(run("score --model " + toy + " --layout qwen3-like --criterion aimer --out " + scores) == 0);

    const std::string before = testutil::file_bytes(toy + "/model.safetensors");
    const std::string config_before = testutil::file_bytes(toy + "/config.json");

    const std::string out = (dir / "pruned").string();
    CHECK(run("prune --model " + toy + " --scores " + scores + " --ratio 0.25 --out " + out) == 0);
    CHECK(load_json(out + "/config.json")["num_experts"] == 6);

    // surgery never touches its input
    CHECK(testutil::file_bytes(toy + "/model.safetensors") == before);
    CHECK(testutil::file_bytes(toy + "/config.json") == config_before);
    CHECK(std::filesystem::exists(out + "/pruning_plan.json"));
    CHECK(std::filesystem::exists(out + "/verify_report.json"));
    CHECK(load_json(out + "/verify_report.json")["all_pass"] == true);

    CHECK(run("prune --model " + toy + " --scores " + scores + " --ratio 1.5 --out " +
              (dir / "x").string()) == 3);
    CHECK(run("prune --model " + toy + " --scores " + scores + " --ratio 0 --out " +
              (dir / "x").string()) == 3);
    // infeasible ratio: retained < top-k
    CHECK(run("prune --model " + toy + " --scores " + scores + " --ratio 0.9 --out " +
              (dir / "x").string()) == 1);

    // stale scores: computed for a different checkpoint
    const std::string other = (dir / "other").string();
    REQUIRE(run("gen-toy --layers 2 --experts 4 --dim 16 --hidden 8 --out " + other) == 0);
    CHECK(run("prune --model " + other + " --scores " + scores + " --ratio 0.25 --out " +
              (dir / "y").string()) == 1);
}

TEST_CASE("verify subcommand audits an intact pruned checkpoint") {
    TempDir dir("cliverify");
    const std::string toy = (dir / "toy").string();
    REQUIRE(run("gen-toy --layers 1 --experts 4 --dim 8 --hidden 4 --out " + toy) == 0);
    const std::string scores = (dir / "s.json").string();
    REQUIRE(run("score --model " + toy + " --layout qwen3-like --criterion aimer --out " + scores) == 0);
    const std::string out = (dir / "pruned").string();
    REQUIRE(run("prune --model " + toy + " --scores " + scores + " --ratio 0.25 --out " + out) == 0);

    CHECK(run("verify --original " + toy + " --pruned " + out + " --plan " + out +
              "/pruning_plan.json") == 0);
}

TEST_CASE("calibrate: sidecar stats, T=0 and the parameter budget") {
    TempDir dir("clical");
    const std::string toy = (dir / "toy").string();
    REQUIRE(run("gen-toy --layers 2 --experts 4 --dim 16 --hidden 8 --out " + toy) == 0);

    const std::string out = (dir / "reap.json").string();
    CHECK(run("calibrate --model " + toy + " --layout qwen3-like --criterion reap "
              "--tokens 64 --out " + out) == 0);
    CHECK(std::filesystem::exists(out + ".stats.json"));
    const auto stats = load_json(out + ".stats.json");
    CHECK(stats["tokens"] == 64);
    CHECK(stats["layers"].size() == 2);

    // T=0: all stats and scores are zero
    const std::string zero = (dir / "zero.json").string();
    CHECK(run("calibrate --model " + toy + " --layout qwen3-like --criterion seer "
              "--tokens 0 --out " + zero) == 0);
    for (const auto& layer : load_json(zero)["layers"]) {
        for (double s : layer["scores"].get<std::vector<double>>()) CHECK(s == 0.0);
    }

    // seer <= frequency on the same run
    const std::string freq = (dir / "freq.json").string();
    const std::string seer = (dir / "seer.json").string();
    CHECK(run("calibrate --model " + toy + " --layout qwen3-like --criterion freq "
              "--tokens 64 --out " + freq) == 0);
    CHECK(run("calibrate --model " + toy + " --layout qwen3-like --criterion seer "
              "--tokens 64 --out " + seer) == 0);
    const auto f = load_json(freq);
    const auto s = load_json(seer);
    for (size_t l = 0; l < 2; ++l) {
        const auto fs = f["layers"][l]["scores"].get<std::vector<double>>();
        const auto ss = s["layers"][l]["scores"].get<std::vector<double>>();
        for (size_t e = 0; e < fs.size(); ++e) CHECK(ss[e] <= fs[e] + 1e-12);
    }

    // over-budget model refused with a clear message
    const std::string log = (dir / "log.txt").string();
    CHECK(run("calibrate --model " + toy + " --layout qwen3-like --criterion reap "
              "--tokens 16 --max-params 100 --out " + (dir / "no.json").string(), log) == 1);
    CHECK(testutil::file_bytes(log).find("toy") != std::string::npos);
}

TEST_CASE("a custom layout JSON drives the whole pipeline") {
    TempDir dir("clicustom");
    const std::string layout = (dir / "layout.json").string();
    {
        std::ofstream out(layout);
        out << R"({
  "name": "blk-style",
  "expert_templates": {
    "gate": "blk.{layer}.exp.{expert}.w1",
    "up": "blk.{layer}.exp.{expert}.w3",
    "down": "blk.{layer}.exp.{expert}.w2"
  },
  "router_template": "blk.{layer}.router",
  "config_keys": {"experts": "n_experts", "top_k": "n_active", "layers": "n_blocks"},
  "normalize_topk": true
})";
    }
    const std::string toy = (dir / "toy").string();
    REQUIRE(run("gen-toy --layers 2 --experts 4 --dim 8 --hidden 4 --dtype BF16 --layout " +
                layout + " --out " + toy) == 0);
    const std::string scores = (dir / "s.json").string();
    CHECK(run("score --model " + toy + " --layout " + layout + " --criterion aimer --out " +
              scores) == 0);
    const std::string out = (dir / "pruned").string();
    CHECK(run("prune --model " + toy + " --scores " + scores + " --ratio 0.25 --out " + out) == 0);
    CHECK(load_json(out + "/config.json")["n_experts"] == 3);
    CHECK(load_json(out + "/verify_report.json")["all_pass"] == true);
}

TEST_CASE("analysis commands emit deterministic artifacts") {
    TempDir dir("cliartifacts");
    const std::string toy = (dir / "toy").string();
    REQUIRE(run("gen-toy --layers 2 --experts 4 --dim 16 --hidden 8 --out " + toy) == 0);
    const std::string scores = (dir / "scores.json").string();
    REQUIRE(run("score --model " + toy + " --layout qwen3-like --criterion aimer --out " + scores) == 0);

    // profile rows are monotone non-increasing
    CHECK(run("profile --scores " + scores + " --out " + (dir / "p").string()) == 0);
    {
        std::ifstream csv(dir / "p_profile.csv");
        std::string header;
        std::getline(csv, header);
        CHECK(header == "layer,rank,value");
        double prev = 2.0;
        int prev_layer = -1;
        std::string line;
        while (std::getline(csv, line)) {
            const auto c1 = line.find(','), c2 = line.rfind(',');
            const int layer = std::stoi(line.substr(0, c1));
            const double value = std::stod(line.substr(c2 + 1));
            if (layer != prev_layer) prev = 2.0;
            CHECK(value <= prev);
            prev = value;
            prev_layer = layer;
        }
    }

    // variance at ratio 0: the two curves are identical
    CHECK(run("variance --model " + toy + " --layout qwen3-like --tokens 32 "
              "--prune-ratio 0 --out " + (dir / "v").string()) == 0);
    {
        std::ifstream csv(dir / "v_variance.csv");
        std::string line;
        std::getline(csv, line);
        std::vector<double> full, pruned;
        while (std::getline(csv, line)) {
            if (line.empty() || line[0] == '#') continue;
            const auto c1 = line.find(','), c2 = line.rfind(',');
            const std::string variant = line.substr(c1 + 1, c2 - c1 - 1);
            const double value = std::stod(line.substr(c2 + 1));
            (variant == "full" ? full : pruned).push_back(value);
        }
        CHECK(full == pruned);
        CHECK(full.size() == 3);  // input + 2 layers
    }

    // stability matrix: symmetric with unit diagonal
    CHECK(run("stability --model " + toy + " --layout qwen3-like --criterion reap "
              "--sizes 16,64 --out " + (dir / "s").string()) == 0);
    {
        std::ifstream csv(dir / "s_stability.csv");
        std::string line;
        std::getline(csv, line);
        CHECK(line == "size_a,size_b,layer,tau");
        std::map<std::tuple<std::string, std::string, std::string>, double> tau;
        while (std::getline(csv, line)) {
            std::vector<std::string> cells;
            size_t pos = 0;
            while (true) {
                const auto comma = line.find(',', pos);
                cells.push_back(line.substr(pos, comma - pos));
                if (comma == std::string::npos) break;
                pos = comma + 1;
            }
            tau[{cells[0], cells[1], cells[2]}] = std::stod(cells[3]);
        }
        for (const auto& [key, value] : tau) {
            const auto& [a, b, l] = key;
            CHECK(value == tau.at({b, a, l}));
            if (a == b) CHECK(value == 1.0);
        }
    }

    // exporting twice produces identical bytes
    CHECK(run("profile --scores " + scores + " --out " + (dir / "q").string()) == 0);
    CHECK(testutil::file_bytes(dir / "p_profile.svg") == testutil::file_bytes(dir / "q_profile.svg"));
}
