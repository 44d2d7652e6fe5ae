// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace moeprune {

// Storage dtypes understood in checkpoint payloads. Tags match the
// safetensors header strings.
enum class Dtype { F32, F16, BF16 };

const char* dtype_tag(Dtype d);
Dtype dtype_from_tag(const std::string& tag);
size_t dtype_width(Dtype d);

float f16_to_float(uint16_t bits);
float bf16_to_float(uint16_t bits);
uint16_t float_to_f16(float value);   // round to nearest even
uint16_t float_to_bf16(float value);  // round to nearest even

// Decode a little-endian payload of `count` elements into 32-bit reals.
// Throws format_error on length mismatch and validation_error if the payload
// contains NaN/Inf (the message names the offending byte offset).
std::vector<float> decode(std::span<const std::byte> raw, Dtype dtype, size_t count);

// Inverse of decode; values must be finite.
std::vector<std::byte> encode(std::span<const float> values, Dtype dtype);

} // namespace moeprune
