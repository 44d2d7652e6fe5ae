// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace moeprune {

// Dense row-major matrix. Storage is 32-bit; every reduction accumulates in
// 64-bit following a fixed pairwise-tree order over the row-major values, so
// results are reproducible regardless of how callers parallelize across
// tensors. Immutable after construction by convention; all kernels are pure.
struct Tensor2D {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<float> values;  // rows * cols entries

    Tensor2D() = default;
    Tensor2D(size_t r, size_t c, std::vector<float> v);

    size_t numel() const { return rows * cols; }
    float at(size_t r, size_t c) const { return values[r * cols + c]; }
    std::span<const float> row(size_t r) const { return {values.data() + r * cols, cols}; }
};

double l1_norm(const Tensor2D& t);
double sum_squares(const Tensor2D& t);
double l1_norm(std::span<const float> v);
double sum_squares(std::span<const float> v);

std::vector<float> matvec(const Tensor2D& t, std::span<const float> v);
std::vector<float> silu(std::span<const float> v);
std::vector<float> hadamard(std::span<const float> a, std::span<const float> b);
// Gate weights are consumed at 64-bit precision, so softmax keeps doubles.
std::vector<double> softmax(std::span<const float> v);
std::vector<float> rms_normalize(std::span<const float> v, double eps);

double vector_l2(std::span<const float> v);

} // namespace moeprune
