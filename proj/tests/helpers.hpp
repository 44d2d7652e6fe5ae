// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <unistd.h>

#include "expert.hpp"
#include "tensor.hpp"

namespace testutil {

// unique scratch directory, removed on destruction
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<uint64_t> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("moeprune_" + tag + "_" + std::to_string(::getpid()) + "_" +
                 std::to_string(counter.fetch_add(1)));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& sub) const { return path_ / sub; }

private:
    std::filesystem::path path_;
};

inline std::vector<float> random_values(size_t count, uint32_t seed, float scale = 1.0f) {
    std::mt19937 gen(seed);
    std::normal_distribution<float> dist(0.0f, scale);
    std::vector<float> out(count);
    for (auto& v : out) v = dist(gen);
    return out;
}

// expert whose flattened vector equals `flat` (split 2/1/1-style across the
// three projections when small, otherwise m x d blocks)
inline moeprune::ExpertTensors expert_from_flat(const std::vector<float>& flat) {
    const size_t n = flat.size();
    if (n < 3) throw std::invalid_argument("need at least 3 values");
    const size_t a = n - 2;
    std::vector<float> g(flat.begin(), flat.begin() + static_cast<ptrdiff_t>(a));
    return moeprune::ExpertTensors{
        moeprune::Tensor2D(1, a, std::move(g)),
        moeprune::Tensor2D(1, 1, {flat[n - 2]}),
        moeprune::Tensor2D(1, 1, {flat[n - 1]}),
    };
}

inline std::string file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace testutil
