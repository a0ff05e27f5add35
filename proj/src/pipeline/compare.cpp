// SPDX-License-Identifier: Apache-2.0

#include "tape/pipeline/compare.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "tape/numeric/errors.hpp"
#include "tape/peft/strategy.hpp"
#include "tape/pipeline/run_config.hpp"
#include "tape/pipeline/runner.hpp"

namespace tape::pipeline {

namespace {

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
}

double parse_number(const std::string& text, const std::filesystem::path& file) {
    try {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used == text.size()) return v;
    } catch (const std::exception&) {
    }
    throw FormatError(file.string() + ": '" + text + "' is not a number");
}

std::string cell(double v, int width, bool percent) {
    char buf[32];
    if (std::isnan(v)) std::snprintf(buf, sizeof buf, "%*s", width, "-");
    else if (percent) std::snprintf(buf, sizeof buf, "%*.2f", width, 100.0 * v);
    else std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

}  // namespace

RunScores read_run(const std::filesystem::path& dir) {
    const RunFiles files{dir};
    const auto cfg = load_run_config(files.config());
    RunScores s;
    s.strategy = std::string(peft::strategy_name(cfg.strategy));
    s.label = s.strategy;
    s.seed = cfg.seed;
    s.fingerprint = cfg.dataset_fingerprint;
    s.dir = dir;
    s.mdice.fill(std::numeric_limits<double>::quiet_NaN());
    s.miou.fill(std::numeric_limits<double>::quiet_NaN());

    std::ifstream f(files.metrics());
    if (!f) throw IoError("metrics not found: " + files.metrics().string());
    std::string line;
    if (!std::getline(f, line) || line != "variant,pathology,mDice,mIoU")
        throw FormatError(files.metrics().string() + ": unexpected header");
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv(line);
        if (cells.size() != 4) throw FormatError(files.metrics().string() + ": malformed row '" + line + "'");
        const auto it = std::find(kCompareColumns.begin(), kCompareColumns.end(), cells[1]);
        if (it == kCompareColumns.end())
            throw FormatError(files.metrics().string() + ": unknown pathology '" + cells[1] + "'");
        const auto col = static_cast<std::size_t>(it - kCompareColumns.begin());
        s.mdice[col] = parse_number(cells[2], files.metrics());
        s.miou[col] = parse_number(cells[3], files.metrics());
    }
    if (std::isnan(s.overall_mdice())) throw FormatError(files.metrics().string() + ": no ALL row");
    return s;
}

CompareTable compare_scores(std::vector<RunScores> runs) {
    if (runs.empty()) throw ConfigError("nothing to compare");
    for (const auto& r : runs)
        if (r.fingerprint != runs.front().fingerprint)
            throw ConfigError("dataset fingerprints differ: " + runs.front().dir.string() + " has " +
                              runs.front().fingerprint + ", " + r.dir.string() + " has " + r.fingerprint);

    std::map<std::string, int> uses;
    for (const auto& r : runs) ++uses[r.label];
    for (auto& r : runs)
        if (uses[r.label] > 1) r.label += "@" + std::to_string(r.seed);
    std::map<std::string, int> seen;
    for (auto& r : runs)
        if (const int n = seen[r.label]++; n > 0) r.label += "#" + std::to_string(n + 1);

    std::stable_sort(runs.begin(), runs.end(), [](const RunScores& a, const RunScores& b) {
        if (a.overall_mdice() != b.overall_mdice()) return a.overall_mdice() > b.overall_mdice();
        return a.label < b.label;
    });
    return CompareTable{std::move(runs)};
}

CompareTable compare_runs(std::span<const std::filesystem::path> dirs) {
    std::vector<RunScores> runs;
    for (const auto& d : dirs) runs.push_back(read_run(d));
    return compare_scores(std::move(runs));
}

std::string render_table(const CompareTable& table) {
    std::size_t label_w = 6;
    for (const auto& r : table.rows) label_w = std::max(label_w, r.label.size());
    const int w = 7;

    std::string out = std::string(label_w, ' ');
    for (auto col : kCompareColumns) {
        char buf[32];
        std::snprintf(buf, sizeof buf, " | %-*s", 2 * w + 1, std::string(col).c_str());
        out += buf;
    }
    out += "\n" + std::string(label_w, ' ');
    for (std::size_t c = 0; c < kCompareColumns.size(); ++c) {
        char buf[32];
        std::snprintf(buf, sizeof buf, " | %*s %*s", w, "mIoU", w, "mDice");
        out += buf;
    }
    out += "\n";
    for (const auto& r : table.rows) {
        out += r.label + std::string(label_w - r.label.size(), ' ');
        for (std::size_t c = 0; c < kCompareColumns.size(); ++c)
            out += " | " + cell(r.miou[c], w, true) + " " + cell(r.mdice[c], w, true);
        out += "\n";
    }
    return out;
}

std::string render_csv(const CompareTable& table) {
    std::string out = "method";
    for (auto col : kCompareColumns) out += "," + std::string(col) + "_mIoU," + std::string(col) + "_mDice";
    out += "\n";
    for (const auto& r : table.rows) {
        out += r.label;
        for (std::size_t c = 0; c < kCompareColumns.size(); ++c)
            out += "," + cell(r.miou[c], 0, false) + "," + cell(r.mdice[c], 0, false);
        out += "\n";
    }
    return out;
}

}  // namespace tape::pipeline
