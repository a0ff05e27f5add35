// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference gradient suites, run in double precision:
//   numeric  every differentiable op and loss on small random inputs
//   mim      the full vit-tiny masked-reconstruction loss under fft, lora, adapter and vpt
//   seg      the full vit-tiny Stage-II segmentation loss under several strategies

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "tape/numeric/grad_check.hpp"

namespace tape::pipeline {

inline constexpr double kGradTolerance = 1e-3;

enum class GradSuite : std::uint8_t { Numeric, Mim, Seg };
inline constexpr GradSuite kAllGradSuites[] = {GradSuite::Numeric, GradSuite::Mim, GradSuite::Seg};

std::string_view grad_suite_name(GradSuite s);  // numeric | mim | seg
GradSuite parse_grad_suite(std::string_view name);

struct GradCase {
    std::string suite;
    std::string name;
    GradCheckResult result;

    bool passed(double tolerance = kGradTolerance) const { return result.max_rel_error < tolerance; }
};

std::vector<GradCase> run_grad_suite(GradSuite suite, std::uint64_t seed = 42);

}  // namespace tape::pipeline
