// SPDX-License-Identifier: Apache-2.0
//
// Ranked comparison of finished runs: one row per run, mIoU and mDice per
// pathology and overall.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tape::pipeline {

/// Column groups, in display order.
inline constexpr std::array<std::string_view, 5> kCompareColumns = {"NORMAL", "AMD", "DR", "RVO", "ALL"};

struct RunScores {
    std::string label;     // strategy name, disambiguated by seed when repeated
    std::string strategy;
    std::uint64_t seed = 0;
    std::string fingerprint;
    std::filesystem::path dir;
    // Indexed like kCompareColumns; NaN when the run has no row for the column.
    std::array<double, kCompareColumns.size()> mdice{};
    std::array<double, kCompareColumns.size()> miou{};

    double overall_mdice() const { return mdice.back(); }
};

struct CompareTable {
    std::vector<RunScores> rows;  // best overall mDice first

    /// rows x columns x {mIoU, mDice}
    std::int64_t metric_cells() const {
        return static_cast<std::int64_t>(rows.size() * kCompareColumns.size() * 2);
    }
};

/// Reads config.json and metrics.csv of a run directory.
RunScores read_run(const std::filesystem::path& dir);

/// Ranks by overall mDice (descending), ties broken by label. Rejects an
/// empty input and runs on different dataset fingerprints (ConfigError).
CompareTable compare_scores(std::vector<RunScores> runs);
CompareTable compare_runs(std::span<const std::filesystem::path> dirs);

/// Aligned text, values in percent with two decimals.
std::string render_table(const CompareTable& table);
/// method,NORMAL_mIoU,NORMAL_mDice,...,ALL_mIoU,ALL_mDice as fractions.
std::string render_csv(const CompareTable& table);

}  // namespace tape::pipeline
