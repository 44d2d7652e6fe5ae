// Copyright (c) 2026 moeprune authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "tensor.hpp"

namespace moeprune {

// The three projection matrices of one routed expert FFN:
// gate and up are (m x d), down is (d x m).
struct ExpertTensors {
    Tensor2D gate;
    Tensor2D up;
    Tensor2D down;

    size_t numel() const { return gate.numel() + up.numel() + down.numel(); }
};

} // namespace moeprune
