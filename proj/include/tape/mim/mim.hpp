// SPDX-License-Identifier: Apache-2.0
//
// Stage I: masked-image-modeling adaptation of the encoder.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "tape/mim/masking.hpp"
#include "tape/numeric/optim.hpp"
#include "tape/numeric/params.hpp"
#include "tape/peft/peft.hpp"
#include "tape/synth/dataset.hpp"
#include "tape/vit/config.hpp"
#include "tape/vit/encoder.hpp"

namespace tape::mim {

enum class FmKind : std::uint8_t { Generic, Domain };
std::string_view fm_kind_name(FmKind k);  // generic | domain
FmKind parse_fm_kind(std::string_view name);

enum class Modality : std::uint8_t { Oct, Octa };
std::string_view modality_name(Modality m);  // oct | octa

/// Generic foundation models reconstruct both modalities, domain-specific ones only OCTA.
struct StagePlan {
    FmKind fm_kind = FmKind::Domain;
    std::vector<Modality> targets;
};
StagePlan stage_plan(FmKind kind);

/// Per-patch reconstruction [N x p*p*C] for one image [C x H x W]. Only the
/// visible patches are encoded; prompts are dropped and cls is carried through
/// the decoder, then removed from the output.
template <typename T>
BasicTensor<T> mim_forward(const BasicParamStore<T>& params, const vit::ViTConfig& cfg,
                           const vit::AdapterSet& adapters, const BasicTensor<T>& image, const MaskPlan& plan);

/// Mean squared error over masked patches. With normalize, each target patch
/// is standardized: (x - mean) / sqrt(var + 1e-6), population variance.
template <typename T>
BasicTensor<T> mim_loss(const BasicTensor<T>& pred, const BasicTensor<T>& image, std::int64_t patch_size,
                        const MaskPlan& plan, bool normalize);

/// Encoder + decoder (+ adapter) parameters for Stage I, freshly initialized.
struct Stage1Model {
    vit::ViTConfig vit;
    peft::PEFTConfig peft;
    ParamStore params;
    vit::AdapterSet adapters;
};

/// Adds decoder tensors and the Stage-I adapter to a backbone store.
Stage1Model make_stage1_model(ParamStore backbone, const vit::ViTConfig& cfg, const peft::PEFTConfig& peft_cfg,
                              std::uint64_t seed);

struct Stage1Config {
    FmKind fm_kind = FmKind::Domain;
    std::int64_t epochs = 20;
    std::int64_t batch_size = 16;
    double mask_ratio = kDefaultMaskRatio;
    bool normalize_targets = true;
    AdamWConfig optim{1.5e-4, 0.9, 0.95, 1e-8, 0.05};
    std::uint64_t seed = 42;
    std::uint64_t eval_seed = 1234;
};

/// One row of losses.csv. Epoch 0 is measured before any update; loss values
/// are evaluations with masks drawn from eval_seed, so curves are comparable
/// across epochs.
struct LossRow {
    std::string stage;  // "stage1"
    std::int64_t epoch = 0;
    std::string split;     // train | test
    std::string modality;  // oct | octa | mean
    double loss = 0.0;
};

struct Stage1Result {
    std::vector<LossRow> curve;
    std::int64_t oct_targets = 0;   // reconstruction targets consumed during training
    std::int64_t octa_targets = 0;
    std::int64_t steps = 0;

    double final_loss(std::string_view split) const;    // "mean" row of the last epoch
    double initial_loss(std::string_view split) const;  // "mean" row of epoch 0
};

using EpochCallback = std::function<void(const LossRow&)>;

/// Trains model in place. On return every tensor is frozen (requires_grad
/// false), so the domain adapter enters Stage II fixed.
Stage1Result run_stage1(Stage1Model& model, const synth::Dataset& data, const Stage1Config& cfg,
                        const EpochCallback& on_row = {});

/// Mean reconstruction loss of a split with masks from eval_seed.
double evaluate_reconstruction(const Stage1Model& model, const synth::Dataset& data, synth::Split split,
                               Modality modality, const Stage1Config& cfg);

/// Network input of a sample for a modality.
const Tensor& modality_image(const synth::PhantomSample& s, Modality m);

}  // namespace tape::mim
