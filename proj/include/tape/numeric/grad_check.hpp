// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference gradient checker.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tape/numeric/tensor.hpp"

namespace tape {

struct GradCheckOptions {
    double eps = 1e-3;
    /// Coordinates probed per tensor; <= 0 means every coordinate.
    std::int64_t max_coords_per_tensor = 0;
    /// Denominator floor: rel = |a - n| / max(|a|, |n|, floor).
    double floor = 1e-4;
    std::uint64_t seed = 0;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::int64_t worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::int64_t coords_checked = 0;
};

/// Compares the analytic gradient of loss() w.r.t. each named parameter with
/// (loss(x + eps) - loss(x - eps)) / (2 eps). Parameters must require grad.
/// Throws NumericError on a non-finite loss and ConfigError when eps is outside [1e-7, 1e-2].
template <typename T>
GradCheckResult grad_check(const std::function<BasicTensor<T>()>& loss,
                           const std::vector<std::pair<std::string, BasicTensor<T>>>& params,
                           const GradCheckOptions& options = {});

}  // namespace tape
