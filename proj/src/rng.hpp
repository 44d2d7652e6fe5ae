// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>

namespace moeprune {

// Counter-based generator built on the splitmix64 finalizer. Every draw is a
// pure function of (seed, stream, counter), so results are identical across
// runs, platforms and thread counts; there is no generator state to share.
namespace rng {

inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t key(uint64_t seed, uint64_t stream, uint64_t counter) {
    return mix64(mix64(mix64(seed) ^ stream) ^ counter);
}

// Uniform in [0, 1) with 53 random bits; exact integer-to-double conversion.
inline double unit_double(uint64_t bits) {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

inline double uniform(uint64_t seed, uint64_t stream, uint64_t counter) {
    return unit_double(key(seed, stream, counter));
}

// Standard normal via Box-Muller; one value per (stream, counter) pair.
inline double gaussian(uint64_t seed, uint64_t stream, uint64_t counter) {
    const double u1 = unit_double(key(seed, stream, 2 * counter));
    const double u2 = unit_double(key(seed, stream, 2 * counter + 1));
    const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    return r * std::cos(2.0 * M_PI * u2);
}

} // namespace rng

} // namespace moeprune
