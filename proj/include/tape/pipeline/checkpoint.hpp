// SPDX-License-Identifier: Apache-2.0
//
// TAPECKPT v1, little-endian:
//   magic "TAPECKPT" (8) | version u32 | count u32
//   per tensor: name_len u32 | name UTF-8 | role u8 | dtype u8 (0 = float32)
//               | rank u32 | dims u64 x rank | data float32 x numel
// requires_grad is not stored; freeze plans are re-derived from the role tags.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tape/numeric/params.hpp"

namespace tape::pipeline {

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const ParamStore& params);
ParamStore decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const ParamStore& params, const std::filesystem::path& path);
ParamStore load_checkpoint(const std::filesystem::path& path);

/// Names of tensors whose bytes differ between a and b (tensors present in
/// only one store count as changed), in a's order followed by b-only names.
std::vector<std::string> changed_tensors(const ParamStore& a, const ParamStore& b);

}  // namespace tape::pipeline
