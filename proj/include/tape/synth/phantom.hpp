// SPDX-License-Identifier: Apache-2.0
//
// Paired pseudo-OCT / pseudo-OCTA layered phantoms.
//
// Label schema (one byte per pixel):
//   0 background (vitreous, above the first surface)
//   1 ILM  2 IPL  3 OPL  4 ISOS  5 RPE  6 BM (extends to the bottom edge)
// Six surfaces per column, strictly increasing in row index, so a column of
// labels reads 0 -> 1 -> ... -> 6 with exactly six transitions.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tape/numeric/tensor.hpp"

namespace tape::synth {

inline constexpr int kNumClasses = 7;
inline constexpr int kNumSurfaces = 6;
inline constexpr std::array<std::string_view, kNumClasses> kClassNames = {"background", "ILM", "IPL", "OPL",
                                                                           "ISOS",       "RPE", "BM"};

enum class Pathology : std::uint8_t { Normal = 0, AMD = 1, DR = 2, RVO = 3 };
inline constexpr std::array<Pathology, 4> kAllPathologies = {Pathology::Normal, Pathology::AMD, Pathology::DR,
                                                              Pathology::RVO};

std::string_view pathology_name(Pathology p);  // NORMAL | AMD | DR | RVO
Pathology parse_pathology(std::string_view name);

struct PhantomSample {
    std::int64_t height = 0;
    std::int64_t width = 0;
    Tensor oct;   // [1 x H x W] in [0, 1]
    Tensor octa;  // [1 x H x W] in [0, 1]
    std::vector<std::uint8_t> labels;  // H*W, row-major
    Pathology pathology = Pathology::Normal;
    std::uint64_t seed = 0;
};

/// Region of the synthetic pathology, for probes and visual checks.
struct LesionExtent {
    std::int64_t col_begin = 0;  // inclusive
    std::int64_t col_end = 0;    // exclusive
};

/// Deterministic in (seed, pathology, height, width). Throws ConfigError when
/// the image is too short to place six bands.
PhantomSample gen_phantom(std::uint64_t seed, Pathology pathology, std::int64_t height = 64, std::int64_t width = 64);

/// Column range an AMD/RVO deformation can touch for this seed (empty for NORMAL/DR).
LesionExtent lesion_extent(std::uint64_t seed, Pathology pathology, std::int64_t height, std::int64_t width);

/// Smallest image height gen_phantom accepts.
std::int64_t min_phantom_height();

// ---- TAPEIMG1 container -------------------------------------------------------
//
//   offset  size        field
//   0       8           magic "TAPEIMG1"
//   8       4           height (u32 LE)
//   12      4           width (u32 LE)
//   16      4           pathology code (u32 LE)
//   20      8           seed (u64 LE)
//   28      4*H*W       OCT float32 LE, row-major
//   ..      4*H*W       OCTA float32 LE, row-major
//   ..      H*W         labels u8, row-major

std::vector<std::uint8_t> encode_sample(const PhantomSample& sample);
PhantomSample decode_sample(std::span<const std::uint8_t> bytes);
void save_sample(const PhantomSample& sample, const std::filesystem::path& path);
PhantomSample load_sample(const std::filesystem::path& path);
std::uint64_t sample_file_size(std::int64_t height, std::int64_t width);

/// Binary PGM (P5) with values scaled from [0, 1] to [0, 255].
void write_pgm(const std::filesystem::path& path, std::span<const float> values, std::int64_t height,
               std::int64_t width);
/// Binary PGM of raw byte values (class index = pixel value).
void write_label_pgm(const std::filesystem::path& path, std::span<const std::uint8_t> labels, std::int64_t height,
                     std::int64_t width);

}  // namespace tape::synth
