// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0

#include "tensor.hpp"

#include <cmath>

#include <fmt/format.h>

#include "errors.hpp"

namespace moeprune {

Tensor2D::Tensor2D(size_t r, size_t c, std::vector<float> v)
    : rows(r), cols(c), values(std::move(v)) {
    if (rows * cols != values.size()) {
        throw validation_error(fmt::format("tensor {}x{} does not match {} values",
                                           rows, cols, values.size()));
    }
}

namespace {

// Fixed pairwise-tree reduction in row-major order: deterministic for any
// caller-side parallelism and keeps the accumulated rounding error at
// O(log n) rather than O(n) additions.
constexpr size_t kReduceBlock = 32;

template <typename Map>
double pairwise_reduce(std::span<const float> v, Map&& map) {
    if (v.size() <= kReduceBlock) {
        double acc = 0.0;
        for (float x : v) acc += map(static_cast<double>(x));
        return acc;
    }
    const size_t half = v.size() / 2;
    return pairwise_reduce(v.first(half), map) + pairwise_reduce(v.subspan(half), map);
}

} // namespace

double l1_norm(std::span<const float> v) {
    return pairwise_reduce(v, [](double x) { return std::fabs(x); });
}

double sum_squares(std::span<const float> v) {
    return pairwise_reduce(v, [](double x) { return x * x; });
}

double l1_norm(const Tensor2D& t) { return l1_norm(std::span<const float>(t.values)); }
double sum_squares(const Tensor2D& t) { return sum_squares(std::span<const float>(t.values)); }

double vector_l2(std::span<const float> v) { return std::sqrt(sum_squares(v)); }

std::vector<float> matvec(const Tensor2D& t, std::span<const float> v) {
    if (t.cols != v.size()) {
        throw validation_error(fmt::format("matvec shape mismatch: {}x{} with vector of {}",
                                           t.rows, t.cols, v.size()));
    }
    std::vector<float> out(t.rows);
    for (size_t r = 0; r < t.rows; ++r) {
        double acc = 0.0;
        const float* row = t.values.data() + r * t.cols;
        for (size_t c = 0; c < t.cols; ++c) acc += static_cast<double>(row[c]) * v[c];
        out[r] = static_cast<float>(acc);
    }
    return out;
}

std::vector<float> silu(std::span<const float> v) {
    std::vector<float> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) {
        const double x = v[i];
        out[i] = static_cast<float>(x / (1.0 + std::exp(-x)));
    }
    return out;
}

std::vector<float> hadamard(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) {
        throw validation_error(fmt::format("hadamard shape mismatch: {} vs {}", a.size(), b.size()));
    }
    std::vector<float> out(a.size());
    for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

std::vector<double> softmax(std::span<const float> v) {
    if (v.empty()) throw validation_error("softmax of empty vector");
    double mx = v[0];
    for (float x : v) {
        if (!std::isfinite(x)) throw validation_error("softmax input must be finite");
        mx = std::max(mx, static_cast<double>(x));
    }
    std::vector<double> out(v.size());
    double sum = 0.0;
    for (size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(static_cast<double>(v[i]) - mx);
        sum += out[i];
    }
    for (double& x : out) x /= sum;
    return out;
}

std::vector<float> rms_normalize(std::span<const float> v, double eps) {
    if (v.empty()) throw validation_error("rms_normalize of empty vector");
    const double ms = sum_squares(v) / static_cast<double>(v.size());
    const double scale = 1.0 / std::sqrt(ms + eps);
    std::vector<float> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] * scale);
    return out;
}

} // namespace moeprune
