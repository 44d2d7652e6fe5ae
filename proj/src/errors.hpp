// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace moeprune {

// Bad data on disk or broken container structure (maps to exit code 2).
class format_error : public std::runtime_error {
public:
    explicit format_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated domain precondition or failed validation (maps to exit code 1).
class validation_error : public std::runtime_error {
public:
    explicit validation_error(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace moeprune
