// SPDX-License-Identifier: Apache-2.0
//
// Stage II: segmentation training under a strategy's freeze plan.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tape/mim/mim.hpp"
#include "tape/numeric/optim.hpp"
#include "tape/numeric/params.hpp"
#include "tape/peft/strategy.hpp"
#include "tape/seg/head.hpp"
#include "tape/seg/metrics.hpp"
#include "tape/synth/dataset.hpp"
#include "tape/vit/config.hpp"
#include "tape/vit/encoder.hpp"

namespace tape::seg {

struct Stage2Model {
    vit::ViTConfig vit;
    peft::StrategyId strategy = peft::StrategyId::Tape;
    SegHeadConfig head;
    ParamStore params;         // backbone [+ domain adapter] [+ task adapter] + head
    vit::AdapterSet adapters;  // every adapter the encoder applies
};

/// Builds the Stage-II model from an encoder store (a fresh backbone, or the
/// Stage-I result with its adapters). Decoder tensors are dropped, the task
/// adapter (if the strategy has one) and the head are added, and the
/// strategy's freeze plan is applied.
Stage2Model make_stage2_model(ParamStore encoder, const vit::AdapterSet& stage1_adapters, const vit::ViTConfig& cfg,
                              peft::StrategyId strategy, std::uint64_t seed, std::int64_t task_rank = 8);

struct Stage2Config {
    std::int64_t epochs = 30;
    std::int64_t batch_size = 8;
    AdamWConfig optim{};  // lr 1e-3
    std::uint64_t seed = 42;
    int threads = 1;      // evaluation only
};

struct MetricRow {
    std::string pathology;  // NORMAL | AMD | DR | RVO | ALL
    std::int64_t images = 0;
    SegMetrics metrics;
};

struct Stage2Result {
    std::vector<mim::LossRow> curve;  // stage2 train loss and val mDice per epoch
    std::vector<MetricRow> test;      // best-validation model on the test split
    std::int64_t best_epoch = 0;
    double best_val_mdice = 0.0;
    bool cached_features = false;
    std::int64_t steps = 0;

    const MetricRow& overall() const;
};

using Stage2Callback = std::function<void(const mim::LossRow&)>;

/// Trains in place; on return model.params holds the best-validation weights,
/// all frozen.
Stage2Result run_stage2(Stage2Model& model, const synth::Dataset& data, const Stage2Config& cfg,
                        const Stage2Callback& on_row = {});

/// Fused encoder features [2d x h x w] of one sample (STL-OCT duplicates OCT).
template <typename T>
BasicTensor<T> encode_fused(const BasicParamStore<T>& params, const vit::ViTConfig& cfg,
                            const vit::AdapterSet& adapters, peft::StrategyId strategy, const BasicTensor<T>& oct,
                            const BasicTensor<T>& octa);

/// Logits [C x H x W] of the full model for one sample.
template <typename T>
BasicTensor<T> stage2_logits(const BasicParamStore<T>& params, const vit::ViTConfig& cfg,
                             const vit::AdapterSet& adapters, peft::StrategyId strategy, const SegHeadConfig& head,
                             const BasicTensor<T>& oct, const BasicTensor<T>& octa);

/// Per-pathology rows followed by ALL, for the samples of a split.
std::vector<MetricRow> evaluate(const Stage2Model& model, const synth::Dataset& data, synth::Split split,
                                int threads = 1);

std::vector<std::uint8_t> predict(const Stage2Model& model, const synth::PhantomSample& sample);

}  // namespace tape::seg
