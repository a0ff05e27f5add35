// SPDX-License-Identifier: Apache-2.0

#include "tape/mim/mim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tape/numeric/errors.hpp"
#include "tape/numeric/losses.hpp"
#include "tape/numeric/ops.hpp"
#include "tape/numeric/rng.hpp"
#include "tape/peft/strategy.hpp"
#include "tape/vit/patch.hpp"

namespace tape::mim {

std::string_view fm_kind_name(FmKind k) { return k == FmKind::Generic ? "generic" : "domain"; }

FmKind parse_fm_kind(std::string_view name) {
    if (name == "generic") return FmKind::Generic;
    if (name == "domain") return FmKind::Domain;
    throw ConfigError("unknown foundation-model kind '" + std::string(name) + "' (expected generic or domain)");
}

std::string_view modality_name(Modality m) { return m == Modality::Oct ? "oct" : "octa"; }

StagePlan stage_plan(FmKind kind) {
    StagePlan plan;
    plan.fm_kind = kind;
    if (kind == FmKind::Generic) plan.targets = {Modality::Oct, Modality::Octa};
    else plan.targets = {Modality::Octa};
    return plan;
}

template <typename T>
BasicTensor<T> mim_forward(const BasicParamStore<T>& params, const vit::ViTConfig& cfg,
                           const vit::AdapterSet& adapters, const BasicTensor<T>& image, const MaskPlan& plan) {
    const auto tokens = vit::patchify(image, cfg.patch_size);
    const auto n = tokens.dim(0);
    if (plan.num_patches != n)
        throw ShapeError("mim_forward: mask plan covers " + std::to_string(plan.num_patches) + " patches, image has " +
                         std::to_string(n));
    const auto n_vis = static_cast<std::int64_t>(plan.visible.size());
    const auto n_mask = static_cast<std::int64_t>(plan.masked.size());

    auto visible = index_select0(tokens, std::span<const std::int64_t>(plan.visible));
    auto latent = vit::encode(params, cfg, adapters, visible, plan.visible);

    // Drop prompts, keep [cls?, visible...].
    const auto prompts = adapters.prompt_tokens();
    const std::int64_t c = cfg.use_cls_token ? 1 : 0;
    std::vector<std::int64_t> keep(static_cast<std::size_t>(c + n_vis));
    std::iota(keep.begin(), keep.end(), prompts);
    latent = index_select0(latent, std::span<const std::int64_t>(keep));

    auto x = linear(latent, params.get("decoder.embed.weight"), params.get("decoder.embed.bias"));
    const auto dd = x.dim(1);
    const std::vector<std::int64_t> zeros(static_cast<std::size_t>(n_mask), 0);
    auto masks = index_select0(reshape(params.get("decoder.mask_token"), {1, dd}), std::span<const std::int64_t>(zeros));
    x = concat0<T>({x, masks});

    // Unshuffle: row r of the decoder sequence is cls (r < c) or patch r - c.
    std::vector<std::int64_t> order(static_cast<std::size_t>(c + n));
    for (std::int64_t r = 0; r < c; ++r) order[static_cast<std::size_t>(r)] = r;
    for (std::int64_t j = 0; j < n_vis; ++j) order[static_cast<std::size_t>(c + plan.visible[j])] = c + j;
    for (std::int64_t j = 0; j < n_mask; ++j) order[static_cast<std::size_t>(c + plan.masked[j])] = c + n_vis + j;
    x = index_select0(x, std::span<const std::int64_t>(order));
    x = add(x, params.get("decoder.pos_embed"));

    for (std::int64_t l = 0; l < cfg.decoder_depth; ++l)
        x = vit::block_forward(x, params, "decoder", l, cfg.decoder_heads, vit::AdapterSet{});
    x = layer_norm(x, params.get("decoder.norm.weight"), params.get("decoder.norm.bias"));
    x = linear(x, params.get("decoder.pred.weight"), params.get("decoder.pred.bias"));
    if (c == 0) return x;
    std::vector<std::int64_t> patch_rows(static_cast<std::size_t>(n));
    std::iota(patch_rows.begin(), patch_rows.end(), c);
    return index_select0(x, std::span<const std::int64_t>(patch_rows));
}

template <typename T>
BasicTensor<T> mim_loss(const BasicTensor<T>& pred, const BasicTensor<T>& image, std::int64_t patch_size,
                        const MaskPlan& plan, bool normalize) {
    auto target = vit::patchify(image, patch_size);
    if (pred.shape() != target.shape())
        throw ShapeError("mim_loss: prediction " + shape_str(pred.shape()) + " vs target " +
                         shape_str(target.shape()));
    if (plan.num_patches != target.dim(0)) throw ShapeError("mim_loss: mask plan does not match patch count");
    if (plan.masked.empty()) throw ConfigError("mim_loss: empty mask");
    if (normalize) {
        const auto rows = target.dim(0);
        const auto cols = target.dim(1);
        auto v = target.data();
        for (std::int64_t r = 0; r < rows; ++r) {
            auto row = v.subspan(static_cast<std::size_t>(r * cols), static_cast<std::size_t>(cols));
            double mean = 0.0;
            for (T x : row) mean += x;
            mean /= static_cast<double>(cols);
            double var = 0.0;
            for (T x : row) var += (x - mean) * (x - mean);
            var /= static_cast<double>(cols);
            const double inv = 1.0 / std::sqrt(var + 1e-6);
            for (T& x : row) x = static_cast<T>((x - mean) * inv);
        }
    }
    const auto mask = plan.mask_bytes();
    return mse_masked(pred, target, std::span<const std::uint8_t>(mask));
}

#define TAPE_INSTANTIATE_MIM(T)                                                                                     \
    template BasicTensor<T> mim_forward<T>(const BasicParamStore<T>&, const vit::ViTConfig&, const vit::AdapterSet&, \
                                           const BasicTensor<T>&, const MaskPlan&);                                 \
    template BasicTensor<T> mim_loss<T>(const BasicTensor<T>&, const BasicTensor<T>&, std::int64_t, const MaskPlan&, \
                                        bool);
TAPE_INSTANTIATE_MIM(float)
TAPE_INSTANTIATE_MIM(double)
#undef TAPE_INSTANTIATE_MIM

Stage1Model make_stage1_model(ParamStore backbone, const vit::ViTConfig& cfg, const peft::PEFTConfig& peft_cfg,
                              std::uint64_t seed) {
    peft_cfg.validate();
    Stage1Model m{cfg, peft_cfg, std::move(backbone), {}};
    Rng rng(seed ^ 0x535441474531ULL);
    vit::init_decoder(m.params, cfg, rng);
    m.adapters = peft::inject(m.params, cfg, peft_cfg, rng);
    peft::apply_freeze(m.params, peft::stage1_freeze_plan(peft_cfg));
    return m;
}

const Tensor& modality_image(const synth::PhantomSample& s, Modality m) {
    const Tensor& t = m == Modality::Oct ? s.oct : s.octa;
    if (!t.defined())
        throw ConfigError("sample " + std::to_string(s.seed) + " lacks the " + std::string(modality_name(m)) +
                          " modality");
    return t;
}

namespace {

std::uint64_t eval_plan_seed(std::uint64_t eval_seed, std::size_t sample, Modality m) {
    return eval_seed * 0x9e3779b97f4a7c15ULL + sample * 2 + static_cast<std::uint64_t>(m);
}

void check_geometry(const vit::ViTConfig& cfg, const synth::Dataset& data) {
    for (const auto& s : data.samples) {
        if (s.height != cfg.image_size || s.width != cfg.image_size)
            throw ConfigError("dataset images are " + std::to_string(s.height) + "x" + std::to_string(s.width) +
                              " but preset '" + cfg.name + "' expects " + std::to_string(cfg.image_size));
    }
    if (cfg.in_chans != 1) throw ConfigError("phantom images have one channel; preset '" + cfg.name + "' expects " +
                                             std::to_string(cfg.in_chans));
}

}  // namespace

double evaluate_reconstruction(const Stage1Model& model, const synth::Dataset& data, synth::Split split,
                               Modality modality, const Stage1Config& cfg) {
    NoGradGuard no_grad;
    const auto idx = data.indices(split);
    if (idx.empty()) throw ConfigError("split '" + std::string(synth::split_name(split)) + "' is empty");
    double total = 0.0;
    for (auto i : idx) {
        const auto& img = modality_image(data.samples[i], modality);
        const auto plan = random_mask(model.vit.num_patches(), cfg.mask_ratio, eval_plan_seed(cfg.eval_seed, i, modality));
        auto pred = mim_forward(model.params, model.vit, model.adapters, img, plan);
        total += mim_loss(pred, img, model.vit.patch_size, plan, cfg.normalize_targets).item();
    }
    return total / static_cast<double>(idx.size());
}

double Stage1Result::final_loss(std::string_view split) const {
    for (auto it = curve.rbegin(); it != curve.rend(); ++it)
        if (it->split == split && it->modality == "mean") return it->loss;
    throw ConfigError("no '" + std::string(split) + "' loss recorded");
}

double Stage1Result::initial_loss(std::string_view split) const {
    for (const auto& r : curve)
        if (r.epoch == 0 && r.split == split && r.modality == "mean") return r.loss;
    throw ConfigError("no '" + std::string(split) + "' loss recorded");
}

Stage1Result run_stage1(Stage1Model& model, const synth::Dataset& data, const Stage1Config& cfg,
                        const EpochCallback& on_row) {
    if (cfg.epochs < 0) throw ConfigError("stage I epochs must be >= 0");
    if (cfg.batch_size < 1) throw ConfigError("stage I batch size must be >= 1");
    check_geometry(model.vit, data);
    const auto plan = stage_plan(cfg.fm_kind);
    for (const auto& s : data.samples)
        for (auto m : plan.targets) (void)modality_image(s, m);
    auto train_idx = data.indices(synth::Split::Train);
    if (train_idx.empty()) throw ConfigError("stage I needs a non-empty train split");

    peft::apply_freeze(model.params, peft::stage1_freeze_plan(model.peft));
    Stage1Result result;
    auto record = [&](std::int64_t epoch) {
        for (auto split : {synth::Split::Train, synth::Split::Test}) {
            if (data.indices(split).empty()) continue;
            double mean = 0.0;
            for (auto m : plan.targets) {
                const double l = evaluate_reconstruction(model, data, split, m, cfg);
                mean += l;
                result.curve.push_back({"stage1", epoch, std::string(synth::split_name(split)),
                                        std::string(modality_name(m)), l});
                if (on_row) on_row(result.curve.back());
            }
            mean /= static_cast<double>(plan.targets.size());
            result.curve.push_back({"stage1", epoch, std::string(synth::split_name(split)), "mean", mean});
            if (on_row) on_row(result.curve.back());
        }
    };
    record(0);

    OptimState optim;
    optim.config = cfg.optim;
    Rng rng(cfg.seed ^ 0x4d494d5452ULL);
    const auto n_targets = static_cast<double>(plan.targets.size());
    for (std::int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        rng.shuffle(train_idx.begin(), train_idx.end());
        for (std::size_t start = 0; start < train_idx.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const auto end = std::min(train_idx.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const double weight = 1.0 / (static_cast<double>(end - start) * n_targets);
            model.params.zero_grad();
            for (std::size_t b = start; b < end; ++b) {
                const auto& sample = data.samples[train_idx[b]];
                for (auto m : plan.targets) {
                    const auto& img = modality_image(sample, m);
                    (m == Modality::Oct ? result.oct_targets : result.octa_targets) += 1;
                    const auto mask = random_mask(model.vit.num_patches(), cfg.mask_ratio, rng.next_u64());
                    auto pred = mim_forward(model.params, model.vit, model.adapters, img, mask);
                    auto loss = mim_loss(pred, img, model.vit.patch_size, mask, cfg.normalize_targets);
                    if (!std::isfinite(loss.item())) throw NumericError("stage I loss is not finite");
                    scale(loss, static_cast<float>(weight)).backward();
                }
            }
            adamw_step(model.params, optim);
            ++result.steps;
        }
        record(epoch);
    }

    for (auto& e : model.params.entries()) {
        e.tensor.clear_grad();
        e.tensor.set_requires_grad(false);
    }
    return result;
}

}  // namespace tape::mim
