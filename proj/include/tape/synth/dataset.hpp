// SPDX-License-Identifier: Apache-2.0
//
// On-disk phantom datasets: one TAPEIMG1 file per sample plus index.csv
// (filename,pathology,split,seed) and fingerprint.txt.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "tape/synth/phantom.hpp"

namespace tape::synth {

enum class Split : std::uint8_t { Train, Val, Test };
std::string_view split_name(Split s);  // train | val | test
Split parse_split(std::string_view name);

struct SplitCounts {
    std::int64_t train = 0;
    std::int64_t val = 0;
    std::int64_t test = 0;
};

/// Per-class 70/10/20 split; val and test get at least one sample each.
SplitCounts split_counts(std::int64_t n_per_class);

struct IndexEntry {
    std::string filename;
    Pathology pathology = Pathology::Normal;
    Split split = Split::Train;
    std::uint64_t seed = 0;
};

struct DatasetSpec {
    std::int64_t n_per_class = 50;
    std::uint64_t seed = 42;
    std::int64_t height = 64;
    std::int64_t width = 64;
};

/// Index rows in generation order (class-major), without touching disk.
std::vector<IndexEntry> plan_dataset(const DatasetSpec& spec);

/// Writes the dataset and returns its fingerprint. Refuses a non-empty
/// directory unless overwrite is set.
std::string gen_dataset(const std::filesystem::path& dir, const DatasetSpec& spec, bool overwrite = false);

struct Dataset {
    std::filesystem::path dir;
    std::vector<IndexEntry> index;
    std::vector<PhantomSample> samples;  // parallel to index
    std::string fingerprint;

    std::vector<std::size_t> indices(Split split) const;
};

/// Loads every sample and recomputes the fingerprint; a stale fingerprint.txt
/// is a FormatError.
Dataset load_dataset(const std::filesystem::path& dir);

/// SHA-256 (hex) of index.csv followed by the SHA-256 of every sample file in index order.
std::string compute_fingerprint(const std::filesystem::path& dir, const std::vector<IndexEntry>& index);

std::string sha256_hex(std::span<const std::uint8_t> bytes);

}  // namespace tape::synth
