// SPDX-License-Identifier: Apache-2.0
//
// AdamW (decoupled weight decay). Only parameters with requires_grad are
// visited, so a frozen tensor is never written to.
//
//   m  = b1 * m + (1 - b1) * g
//   v  = b2 * v + (1 - b2) * g^2
//   p -= lr * wd * p                                  (rank >= 2 tensors only)
//   p -= lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)

#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "tape/numeric/params.hpp"

namespace tape {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.05;

    bool operator==(const AdamWConfig&) const = default;
};

struct OptimState {
    struct Moments {
        std::vector<float> first;
        std::vector<float> second;
    };

    AdamWConfig config;
    std::int64_t step = 0;
    std::unordered_map<std::string, Moments> moments;
};

/// Applies one update to every trainable tensor in params. Throws NumericError
/// when a trainable tensor has no gradient.
void adamw_step(ParamStore& params, OptimState& state);

}  // namespace tape
