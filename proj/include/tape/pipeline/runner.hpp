// SPDX-License-Identifier: Apache-2.0
//
// End-to-end execution of one strategy into a run directory:
//
//   config.json   the RunConfig, with the dataset fingerprint filled in
//   stage1.ckpt   two-stage strategies only (backbone, domain adapter, decoder)
//   stage2.ckpt   the selected Stage-II model
//   losses.csv    stage,epoch,split,modality,loss
//   metrics.csv   variant,pathology,mDice,mIoU on the test split
//   summary.txt   human-readable digest
//
// Every file is a pure function of the config and the dataset; no timings.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tape/mim/mim.hpp"
#include "tape/numeric/params.hpp"
#include "tape/peft/peft.hpp"
#include "tape/pipeline/run_config.hpp"
#include "tape/seg/stage2.hpp"
#include "tape/synth/dataset.hpp"
#include "tape/vit/config.hpp"

namespace tape::pipeline {

struct RunFiles {
    std::filesystem::path dir;

    std::filesystem::path config() const { return dir / "config.json"; }
    std::filesystem::path stage1() const { return dir / "stage1.ckpt"; }
    std::filesystem::path stage2() const { return dir / "stage2.ckpt"; }
    std::filesystem::path losses() const { return dir / "losses.csv"; }
    std::filesystem::path metrics() const { return dir / "metrics.csv"; }
    std::filesystem::path summary() const { return dir / "summary.txt"; }
};

using LogFn = std::function<void(std::string_view)>;

struct RunOptions {
    bool overwrite = false;
    int threads = 1;  // evaluation only
    LogFn log;        // progress lines, optional
};

struct RunOutcome {
    RunFiles files;
    RunConfig config;  // as written to config.json
    std::optional<mim::Stage1Result> stage1;  // absent for single-stage or a reused checkpoint
    seg::Stage2Result stage2;
    std::int64_t trainable_stage2 = 0;
};

/// Randomly initialized encoder standing in for the pre-trained foundation model.
ParamStore foundation_backbone(const vit::ViTConfig& cfg, std::uint64_t fm_seed);

/// Recovers the adapter configuration of one role from the tensors of a
/// checkpoint. nullopt when the role has no tensors; FormatError when the
/// tensors match no known adapter layout.
std::optional<peft::PEFTConfig> infer_adapter(const ParamStore& params, const vit::ViTConfig& cfg, Role role);

/// Rebuilds a Stage-I model from a checkpoint (decoder included).
mim::Stage1Model stage1_from_checkpoint(ParamStore params, const vit::ViTConfig& cfg);
/// Rebuilds a frozen Stage-II model from a checkpoint.
seg::Stage2Model stage2_from_checkpoint(ParamStore params, const vit::ViTConfig& cfg, peft::StrategyId strategy);

/// Throws ConfigError when the dataset geometry does not fit the preset.
void check_dataset(const synth::Dataset& data, const vit::ViTConfig& cfg);

/// Creates dir. A non-empty dir is an IoError unless overwrite is set, in which
/// case the files of a previous run are removed first.
void prepare_output_dir(const std::filesystem::path& dir, bool overwrite);

/// Stage I only, into cfg.out_dir: config.json, stage1.ckpt, losses.csv, summary.txt.
mim::Stage1Result run_pretrain(const RunConfig& cfg, const synth::Dataset& data, const RunOptions& opts = {});

/// Both stages per cfg.strategy, into cfg.out_dir.
RunOutcome run_strategy(const RunConfig& cfg, const synth::Dataset& data, const RunOptions& opts = {});
/// Loads cfg.data_dir first.
RunOutcome run_strategy(const RunConfig& cfg, const RunOptions& opts = {});

struct EvalOutcome {
    RunConfig config;
    std::vector<seg::MetricRow> rows;
};

/// Metrics of a finished run's stage2.ckpt on one split of data.
EvalOutcome evaluate_run(const std::filesystem::path& run_dir, const synth::Dataset& data, synth::Split split,
                         int threads = 1);

/// Writes <sample>_pred.pgm and <sample>_gt.pgm (pixel value = class index) for a split.
std::int64_t export_predictions(const seg::Stage2Model& model, const synth::Dataset& data, synth::Split split,
                                const std::filesystem::path& dir);

std::string format_losses_csv(const std::vector<mim::LossRow>& rows);
std::string format_metrics_csv(std::string_view variant, const std::vector<seg::MetricRow>& rows);

}  // namespace tape::pipeline
