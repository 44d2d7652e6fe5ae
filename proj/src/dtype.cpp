// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0

#include "dtype.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include <fmt/format.h>

#include "errors.hpp"

namespace moeprune {

const char* dtype_tag(Dtype d) {
    switch (d) {
        case Dtype::F32: return "F32";
        case Dtype::F16: return "F16";
        case Dtype::BF16: return "BF16";
    }
    return "?";
}

Dtype dtype_from_tag(const std::string& tag) {
    if (tag == "F32") return Dtype::F32;
    if (tag == "F16") return Dtype::F16;
    if (tag == "BF16") return Dtype::BF16;
    throw format_error(fmt::format("unknown dtype tag '{}'", tag));
}

size_t dtype_width(Dtype d) {
    return d == Dtype::F32 ? 4 : 2;
}

float f16_to_float(uint16_t bits) {
    const uint32_t sign = (bits >> 15) & 1;
    const uint32_t exp = (bits >> 10) & 0x1f;
    const uint32_t mant = bits & 0x3ff;
    uint32_t out;
    if (exp == 0) {
        if (mant == 0) {
            out = sign << 31;
        } else {
            // subnormal half: renormalize into a float exponent
            int e = -1;
            uint32_t m = mant;
            do {
                e++;
                m <<= 1;
            } while ((m & 0x400) == 0);
            out = (sign << 31) | ((127 - 15 - e) << 23) | ((m & 0x3ff) << 13);
        }
    } else if (exp == 0x1f) {
        out = (sign << 31) | 0x7f800000u | (mant << 13);  // inf / nan
    } else {
        out = (sign << 31) | ((exp - 15 + 127) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(out);
}

float bf16_to_float(uint16_t bits) {
    return std::bit_cast<float>(static_cast<uint32_t>(bits) << 16);
}

uint16_t float_to_f16(float value) {
    const uint32_t bits = std::bit_cast<uint32_t>(value);
    const uint32_t sign = (bits >> 16) & 0x8000;
    const int32_t exp = static_cast<int32_t>((bits >> 23) & 0xff) - 127 + 15;
    uint32_t mant = bits & 0x7fffff;
    if (((bits >> 23) & 0xff) == 0xff) {
        return static_cast<uint16_t>(sign | 0x7c00 | (mant ? 0x200 : 0));
    }
    if (exp >= 0x1f) {
        return static_cast<uint16_t>(sign | 0x7c00);  // overflow -> inf
    }
    if (exp <= 0) {
        if (exp < -10) return static_cast<uint16_t>(sign);  // underflow -> 0
        // subnormal: shift mantissa (with implicit bit) into place
        mant |= 0x800000;
        const uint32_t shift = static_cast<uint32_t>(14 - exp);
        const uint32_t half = mant >> shift;
        const uint32_t rem = mant & ((1u << shift) - 1);
        const uint32_t mid = 1u << (shift - 1);
        uint32_t rounded = half;
        if (rem > mid || (rem == mid && (half & 1))) rounded++;
        return static_cast<uint16_t>(sign | rounded);
    }
    const uint32_t half = mant >> 13;
    const uint32_t rem = mant & 0x1fff;
    uint32_t rounded = (static_cast<uint32_t>(exp) << 10) | half;
    if (rem > 0x1000 || (rem == 0x1000 && (rounded & 1))) rounded++;
    return static_cast<uint16_t>(sign | rounded);
}

uint16_t float_to_bf16(float value) {
    uint32_t bits = std::bit_cast<uint32_t>(value);
    if (((bits >> 23) & 0xff) == 0xff) {
        return static_cast<uint16_t>((bits >> 16) | (bits & 0x7fffff ? 0x40 : 0));
    }
    const uint32_t lsb = (bits >> 16) & 1;
    bits += 0x7fffu + lsb;
    return static_cast<uint16_t>(bits >> 16);
}

std::vector<float> decode(std::span<const std::byte> raw, Dtype dtype, size_t count) {
    const size_t width = dtype_width(dtype);
    if (raw.size() != count * width) {
        throw format_error(fmt::format("payload length {} does not match {} x {}-byte elements",
                                       raw.size(), count, width));
    }
    std::vector<float> out(count);
    for (size_t i = 0; i < count; ++i) {
        float v;
        if (dtype == Dtype::F32) {
            uint32_t u;
            std::memcpy(&u, raw.data() + i * 4, 4);
            v = std::bit_cast<float>(u);
        } else {
            uint16_t u;
            std::memcpy(&u, raw.data() + i * 2, 2);
            v = dtype == Dtype::F16 ? f16_to_float(u) : bf16_to_float(u);
        }
        if (!std::isfinite(v)) {
            throw validation_error(fmt::format("non-finite value at byte offset {} (element {})",
                                               i * width, i));
        }
        out[i] = v;
    }
    return out;
}

std::vector<std::byte> encode(std::span<const float> values, Dtype dtype) {
    const size_t width = dtype_width(dtype);
    std::vector<std::byte> out(values.size() * width);
    for (size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw validation_error(fmt::format("refusing to encode non-finite value at element {}", i));
        }
        if (dtype == Dtype::F32) {
            const uint32_t u = std::bit_cast<uint32_t>(values[i]);
            std::memcpy(out.data() + i * 4, &u, 4);
        } else {
            const uint16_t u = dtype == Dtype::F16 ? float_to_f16(values[i])
                                                   : float_to_bf16(values[i]);
            std::memcpy(out.data() + i * 2, &u, 2);
        }
    }
    return out;
}

} // namespace moeprune
