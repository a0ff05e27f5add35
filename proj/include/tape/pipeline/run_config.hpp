// SPDX-License-Identifier: Apache-2.0
//
// The complete, serializable description of one run. config.json in every run
// directory is this struct; re-running from it reproduces the run bit for bit.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "tape/mim/mim.hpp"
#include "tape/numeric/optim.hpp"
#include "tape/peft/peft.hpp"
#include "tape/peft/strategy.hpp"
#include "tape/seg/stage2.hpp"

namespace tape::pipeline {

struct RunConfig {
    std::string preset = "vit-tiny";
    mim::FmKind fm_kind = mim::FmKind::Domain;
    peft::StrategyId strategy = peft::StrategyId::Tape;

    std::uint64_t seed = 42;     // adapter/head init, masks, shuffles
    std::uint64_t fm_seed = 7;   // backbone initialization
    std::uint64_t eval_seed = 1234;

    std::int64_t stage1_epochs = 20;
    std::int64_t stage2_epochs = 30;
    std::int64_t stage1_batch = 16;
    std::int64_t stage2_batch = 8;
    double mask_ratio = mim::kDefaultMaskRatio;
    bool normalize_targets = true;
    AdamWConfig stage1_optim{1.5e-4, 0.9, 0.95, 1e-8, 0.05};
    AdamWConfig stage2_optim{};

    /// Stage-I method: fft | lora | adapter | vpt. Empty means the one the
    /// strategy implies. Only `pretrain` sets it to something else.
    std::string stage1_method;
    std::int64_t rank = 8;
    std::int64_t bottleneck = 8;
    std::int64_t tokens = 10;

    std::string data_dir;
    std::string out_dir;
    std::string stage1_checkpoint;    // reuse a prior Stage-I result instead of training
    std::string dataset_fingerprint;  // filled in by the runner; checked when non-empty

    /// Throws ConfigError on out-of-range values or an invalid strategy/stage combination.
    void validate() const;

    bool operator==(const RunConfig&) const = default;
};

/// Stage-I adapter configuration: stage1_method if set, else the strategy's.
/// Throws ConfigError for single-stage strategies without stage1_method.
peft::PEFTConfig stage1_peft(const RunConfig& cfg);

mim::Stage1Config stage1_config(const RunConfig& cfg);
seg::Stage2Config stage2_config(const RunConfig& cfg, int threads = 1);

/// Pretty-printed JSON with every field present.
std::string to_json_text(const RunConfig& cfg);
/// Missing keys keep their defaults; unknown keys and wrong types throw ConfigError.
RunConfig from_json_text(std::string_view text, RunConfig base = {});

void save_run_config(const RunConfig& cfg, const std::filesystem::path& path);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace tape::pipeline
