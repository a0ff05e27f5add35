// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

namespace tape::mim {

inline constexpr double kDefaultMaskRatio = 0.75;

struct MaskPlan {
    std::int64_t num_patches = 0;
    std::vector<std::int64_t> masked;   // sorted
    std::vector<std::int64_t> visible;  // sorted complement
    std::uint64_t seed = 0;

    /// N bytes, 1 at masked positions.
    std::vector<std::uint8_t> mask_bytes() const;
    bool operator==(const MaskPlan&) const = default;
};

/// floor(ratio * N) positions chosen by a seeded Fisher-Yates shuffle.
/// Throws ConfigError when ratio is outside (0, 1), N < 2, or the masked
/// count would be 0 or N.
MaskPlan random_mask(std::int64_t num_patches, double ratio, std::uint64_t seed);

/// Number of masked patches random_mask produces.
std::int64_t masked_count(std::int64_t num_patches, double ratio);

}  // namespace tape::mim
