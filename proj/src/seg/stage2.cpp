// SPDX-License-Identifier: Apache-2.0

#include "tape/seg/stage2.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "tape/numeric/errors.hpp"
#include "tape/numeric/losses.hpp"
#include "tape/numeric/ops.hpp"
#include "tape/numeric/rng.hpp"
#include "tape/vit/patch.hpp"

namespace tape::seg {

Stage2Model make_stage2_model(ParamStore encoder, const vit::AdapterSet& stage1_adapters, const vit::ViTConfig& cfg,
                              peft::StrategyId strategy, std::uint64_t seed, std::int64_t task_rank) {
    Stage2Model m;
    m.vit = cfg;
    m.strategy = strategy;
    m.head = SegHeadConfig::for_vit(cfg, synth::kNumClasses);
    m.params = std::move(encoder);
    m.params.erase_role(Role::Decoder);
    m.params.erase_role(Role::TaskAdapter);
    m.params.erase_role(Role::Head);
    m.adapters = stage1_adapters;

    Rng rng(seed ^ 0x5345474845ULL);
    if (auto task = peft::task_peft(strategy, task_rank))
        m.adapters = m.adapters.merged(peft::inject(m.params, cfg, *task, rng));
    init_head(m.params, m.head, rng);
    peft::apply_freeze(m.params, peft::freeze_plan(strategy));
    return m;
}

const MetricRow& Stage2Result::overall() const {
    for (const auto& r : test)
        if (r.pathology == "ALL") return r;
    throw ConfigError("stage II result has no overall row");
}

template <typename T>
BasicTensor<T> encode_fused(const BasicParamStore<T>& params, const vit::ViTConfig& cfg,
                            const vit::AdapterSet& adapters, peft::StrategyId strategy, const BasicTensor<T>& oct,
                            const BasicTensor<T>& octa) {
    const auto g = cfg.grid();
    const auto lead = vit::leading_tokens(cfg, adapters);
    auto features = [&](const BasicTensor<T>& img) {
        return seq_to_spatial(vit::encode(params, cfg, adapters, vit::patchify(img, cfg.patch_size)), g, g, lead);
    };
    auto f_oct = features(oct);
    if (!peft::uses_octa(strategy)) return fuse_concat(f_oct, f_oct);
    if (!octa.defined()) throw ConfigError("strategy " + std::string(peft::strategy_name(strategy)) + " needs OCTA");
    return fuse_concat(f_oct, features(octa));
}

template <typename T>
BasicTensor<T> stage2_logits(const BasicParamStore<T>& params, const vit::ViTConfig& cfg,
                             const vit::AdapterSet& adapters, peft::StrategyId strategy, const SegHeadConfig& head,
                             const BasicTensor<T>& oct, const BasicTensor<T>& octa) {
    return seg_head_forward(encode_fused(params, cfg, adapters, strategy, oct, octa), params, head);
}

#define TAPE_INSTANTIATE_STAGE2(T)                                                                                  \
    template BasicTensor<T> encode_fused(const BasicParamStore<T>&, const vit::ViTConfig&, const vit::AdapterSet&, \
                                         peft::StrategyId, const BasicTensor<T>&, const BasicTensor<T>&);            \
    template BasicTensor<T> stage2_logits(const BasicParamStore<T>&, const vit::ViTConfig&,                         \
                                          const vit::AdapterSet&, peft::StrategyId, const SegHeadConfig&,           \
                                          const BasicTensor<T>&, const BasicTensor<T>&);
TAPE_INSTANTIATE_STAGE2(float)
TAPE_INSTANTIATE_STAGE2(double)
#undef TAPE_INSTANTIATE_STAGE2

std::vector<std::uint8_t> predict(const Stage2Model& model, const synth::PhantomSample& sample) {
    NoGradGuard no_grad;
    return argmax_labels(
        stage2_logits(model.params, model.vit, model.adapters, model.strategy, model.head, sample.oct, sample.octa));
}

std::vector<MetricRow> evaluate(const Stage2Model& model, const synth::Dataset& data, synth::Split split,
                                int threads) {
    const auto idx = data.indices(split);
    if (idx.empty()) throw ConfigError("split '" + std::string(synth::split_name(split)) + "' is empty");
    std::vector<SegMetrics> per(idx.size());
    auto work = [&](std::size_t first, std::size_t stride) {
        for (std::size_t j = first; j < idx.size(); j += stride) {
            const auto& s = data.samples[idx[j]];
            per[j] = compute_metrics(predict(model, s), s.labels, synth::kNumClasses);
        }
    };
    const auto n_threads = static_cast<std::size_t>(std::clamp<int>(threads, 1, static_cast<int>(idx.size())));
    if (n_threads == 1) {
        work(0, 1);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(work, t, n_threads);
    }

    std::vector<MetricRow> rows;
    MetricAccumulator all(synth::kNumClasses);
    for (auto p : synth::kAllPathologies) {
        MetricAccumulator acc(synth::kNumClasses);
        for (std::size_t j = 0; j < idx.size(); ++j)
            if (data.samples[idx[j]].pathology == p) acc.add(per[j]);
        if (acc.count() == 0) continue;
        rows.push_back({std::string(synth::pathology_name(p)), acc.count(), acc.mean()});
    }
    for (const auto& m : per) all.add(m);
    rows.push_back({"ALL", all.count(), all.mean()});
    return rows;
}

namespace {

bool encoder_frozen(const ParamStore& params) {
    for (const auto& e : params.entries())
        if (e.role != Role::Head && e.tensor.requires_grad()) return false;
    return true;
}

double overall_mdice(const std::vector<MetricRow>& rows) { return rows.back().metrics.mdice; }

}  // namespace

Stage2Result run_stage2(Stage2Model& model, const synth::Dataset& data, const Stage2Config& cfg,
                        const Stage2Callback& on_row) {
    if (cfg.epochs < 0) throw ConfigError("stage II epochs must be >= 0");
    if (cfg.batch_size < 1) throw ConfigError("stage II batch size must be >= 1");
    for (const auto& s : data.samples)
        if (s.height != model.vit.image_size || s.width != model.vit.image_size)
            throw ConfigError("dataset images do not match preset '" + model.vit.name + "'");
    auto train_idx = data.indices(synth::Split::Train);
    if (train_idx.empty()) throw ConfigError("stage II needs a non-empty train split");
    const bool has_val = !data.indices(synth::Split::Val).empty();

    peft::apply_freeze(model.params, peft::freeze_plan(model.strategy));
    Stage2Result result;
    result.cached_features = encoder_frozen(model.params);

    // Frozen encoder: features are a pure function of the sample, compute once.
    std::vector<Tensor> cache(data.samples.size());
    auto fused_for = [&](std::size_t i) -> Tensor {
        const auto& s = data.samples[i];
        if (!result.cached_features)
            return encode_fused(model.params, model.vit, model.adapters, model.strategy, s.oct, s.octa);
        if (!cache[i].defined()) {
            NoGradGuard no_grad;
            cache[i] = encode_fused(model.params, model.vit, model.adapters, model.strategy, s.oct, s.octa);
        }
        return cache[i];
    };

    auto push = [&](mim::LossRow row) {
        result.curve.push_back(std::move(row));
        if (on_row) on_row(result.curve.back());
    };
    ParamStore best = model.params.clone();
    auto validate = [&](std::int64_t epoch) {
        if (!has_val) return;
        const double md = overall_mdice(evaluate(model, data, synth::Split::Val, cfg.threads));
        push({"stage2", epoch, "val", "mdice", md});
        if (epoch == 0 || md > result.best_val_mdice) {
            result.best_val_mdice = md;
            result.best_epoch = epoch;
            best = model.params.clone();
        }
    };
    validate(0);

    OptimState optim;
    optim.config = cfg.optim;
    Rng rng(cfg.seed ^ 0x5354414745ULL);
    for (std::int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        rng.shuffle(train_idx.begin(), train_idx.end());
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < train_idx.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const auto end = std::min(train_idx.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const auto weight = static_cast<float>(1.0 / static_cast<double>(end - start));
            model.params.zero_grad();
            for (std::size_t b = start; b < end; ++b) {
                const auto i = train_idx[b];
                auto logits = seg_head_forward(fused_for(i), model.params, model.head);
                auto loss = cross_entropy(logits, std::span<const std::uint8_t>(data.samples[i].labels));
                const double l = loss.item();
                if (!std::isfinite(l)) throw NumericError("stage II loss is not finite");
                epoch_loss += l;
                scale(loss, weight).backward();
            }
            adamw_step(model.params, optim);
            ++result.steps;
        }
        push({"stage2", epoch, "train", "ce", epoch_loss / static_cast<double>(train_idx.size())});
        validate(epoch);
    }

    if (has_val) model.params = std::move(best);
    else result.best_epoch = cfg.epochs;
    for (auto& e : model.params.entries()) {
        e.tensor.clear_grad();
        e.tensor.set_requires_grad(false);
    }
    result.test = evaluate(model, data, synth::Split::Test, cfg.threads);
    return result;
}

}  // namespace tape::seg
