// SPDX-License-Identifier: Apache-2.0

#include "tape/mim/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "tape/numeric/errors.hpp"
#include "tape/numeric/rng.hpp"

namespace tape::mim {

std::vector<std::uint8_t> MaskPlan::mask_bytes() const {
    std::vector<std::uint8_t> out(static_cast<std::size_t>(num_patches), 0);
    for (auto i : masked) out[static_cast<std::size_t>(i)] = 1;
    return out;
}

std::int64_t masked_count(std::int64_t num_patches, double ratio) {
    return static_cast<std::int64_t>(std::floor(ratio * static_cast<double>(num_patches)));
}

MaskPlan random_mask(std::int64_t num_patches, double ratio, std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("mask ratio must lie in (0, 1), got " + std::to_string(ratio));
    if (num_patches < 2) throw ConfigError("masking needs at least 2 patches, got " + std::to_string(num_patches));
    const auto n_masked = masked_count(num_patches, ratio);
    if (n_masked == 0 || n_masked == num_patches)
        throw ConfigError("mask ratio " + std::to_string(ratio) + " masks " + std::to_string(n_masked) + " of " +
                          std::to_string(num_patches) + " patches");

    std::vector<std::int64_t> order(static_cast<std::size_t>(num_patches));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order.begin(), order.end());

    MaskPlan plan;
    plan.num_patches = num_patches;
    plan.seed = seed;
    plan.masked.assign(order.begin(), order.begin() + n_masked);
    plan.visible.assign(order.begin() + n_masked, order.end());
    std::sort(plan.masked.begin(), plan.masked.end());
    std::sort(plan.visible.begin(), plan.visible.end());
    return plan;
}

}  // namespace tape::mim
