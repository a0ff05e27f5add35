// SPDX-License-Identifier: Apache-2.0

#include "tape/pipeline/grad_suite.hpp"

#include <functional>
#include <utility>

#include "tape/mim/masking.hpp"
#include "tape/mim/mim.hpp"
#include "tape/numeric/errors.hpp"
#include "tape/numeric/losses.hpp"
#include "tape/numeric/ops.hpp"
#include "tape/numeric/rng.hpp"
#include "tape/peft/peft.hpp"
#include "tape/peft/strategy.hpp"
#include "tape/pipeline/runner.hpp"
#include "tape/seg/stage2.hpp"
#include "tape/synth/phantom.hpp"
#include "tape/vit/config.hpp"

namespace tape::pipeline {

namespace {

using Params = std::vector<std::pair<std::string, Tensor64>>;

Tensor64 random_tensor(Rng& rng, Shape shape, bool grad = true, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor64(std::move(shape), std::move(v), grad);
}

// Magnitudes in [0.2, 1] so a finite-difference step never crosses a kink.
Tensor64 off_zero(Rng& rng, Shape shape) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 1.0);
    return Tensor64(std::move(shape), std::move(v), true);
}

class NumericCases {
public:
    explicit NumericCases(std::uint64_t seed) : rng_(seed), seed_(seed) {}

    // Projects the op output onto fixed random weights so every output element
    // contributes a distinct amount to the scalar.
    void add(std::string name, Params params, std::function<Tensor64()> op) {
        Tensor64 probe;
        {
            NoGradGuard no_grad;
            probe = random_tensor(rng_, op().shape(), false);
        }
        GradCheckOptions opts;
        opts.seed = seed_;
        auto loss = [op, probe] { return sum(mul(op(), probe)); };
        out_.push_back({"numeric", std::move(name), grad_check<double>(loss, params, opts)});
    }

    Rng& rng() { return rng_; }
    std::vector<GradCase> take() { return std::move(out_); }

private:
    Rng rng_;
    std::uint64_t seed_;
    std::vector<GradCase> out_;
};

std::vector<GradCase> numeric_suite(std::uint64_t seed) {
    NumericCases c(seed);
    auto& r = c.rng();

    auto a = random_tensor(r, {3, 4}), b = random_tensor(r, {4, 5});
    c.add("matmul", {{"a", a}, {"b", b}}, [=] { return matmul(a, b); });

    auto x = random_tensor(r, {3, 4}), w = random_tensor(r, {5, 4}), bias = random_tensor(r, {5});
    c.add("linear", {{"x", x}, {"w", w}, {"b", bias}}, [=] { return linear(x, w, bias); });
    c.add("transpose2d", {{"x", x}}, [=] { return transpose2d(x); });

    auto p = random_tensor(r, {2, 3}), q = random_tensor(r, {2, 3});
    c.add("add", {{"a", p}, {"b", q}}, [=] { return add(p, q); });
    c.add("sub", {{"a", p}, {"b", q}}, [=] { return sub(p, q); });
    c.add("mul", {{"a", p}, {"b", q}}, [=] { return mul(p, q); });
    c.add("scale", {{"x", p}}, [=] { return scale(p, 1.7); });

    auto k = off_zero(r, {4, 5});
    c.add("relu", {{"x", k}}, [=] { return relu(k); });
    c.add("gelu", {{"x", x}}, [=] { return gelu(x); });
    c.add("sum", {{"x", x}}, [=] { return sum(mul(x, x)); });
    c.add("mean", {{"x", x}}, [=] { return mean(mul(x, x)); });

    auto m = random_tensor(r, {2, 6});
    c.add("reshape", {{"x", m}}, [=] { return reshape(m, {3, 4}); });
    auto wide = random_tensor(r, {3, 6});
    c.add("slice_cols", {{"x", wide}}, [=] { return slice_cols(wide, 1, 3); });
    auto top = random_tensor(r, {2, 3}), bottom = random_tensor(r, {4, 3});
    c.add("concat0", {{"a", top}, {"b", bottom}}, [=] { return concat0<double>({top, bottom}); });
    auto rows = random_tensor(r, {4, 3});
    c.add("index_select0", {{"x", rows}}, [=] {
        const std::int64_t idx[] = {2, 0, 2, 3};
        return index_select0(rows, std::span<const std::int64_t>(idx));
    });

    auto tok = random_tensor(r, {5, 8});
    c.add("split_heads", {{"x", tok}}, [=] { return split_heads(tok, 2); });
    auto heads = random_tensor(r, {2, 5, 4});
    c.add("merge_heads", {{"x", heads}}, [=] { return merge_heads(heads); });

    auto ln_x = random_tensor(r, {4, 6}), ln_g = random_tensor(r, {6}, true, 0.5, 1.5), ln_b = random_tensor(r, {6});
    c.add("layer_norm", {{"x", ln_x}, {"gamma", ln_g}, {"beta", ln_b}}, [=] { return layer_norm(ln_x, ln_g, ln_b); });
    auto gn_x = random_tensor(r, {4, 3, 3}), gn_g = random_tensor(r, {4}, true, 0.5, 1.5), gn_b = random_tensor(r, {4});
    c.add("group_norm", {{"x", gn_x}, {"gamma", gn_g}, {"beta", gn_b}}, [=] { return group_norm(gn_x, 2, gn_g, gn_b); });

    auto qh = random_tensor(r, {2, 4, 3}), kh = random_tensor(r, {2, 4, 3}), vh = random_tensor(r, {2, 4, 3});
    c.add("scaled_dot_attention", {{"q", qh}, {"k", kh}, {"v", vh}},
          [=] { return scaled_dot_attention(qh, kh, vh); });

    auto img = random_tensor(r, {2, 5, 5}), ker = random_tensor(r, {3, 2, 3, 3}), cb = random_tensor(r, {3});
    c.add("conv2d", {{"x", img}, {"k", ker}, {"b", cb}}, [=] { return conv2d(img, ker, cb, 1, 1); });
    c.add("conv2d_stride2", {{"x", img}, {"k", ker}, {"b", cb}}, [=] { return conv2d(img, ker, cb, 2, 1); });
    auto up_x = random_tensor(r, {3, 3, 3}), up_k = random_tensor(r, {3, 2, 2, 2}), up_b = random_tensor(r, {2});
    c.add("transposed_conv2d", {{"x", up_x}, {"k", up_k}, {"b", up_b}},
          [=] { return transposed_conv2d(up_x, up_k, up_b, 2); });

    auto logits = random_tensor(r, {4, 3, 3});
    std::vector<std::uint8_t> labels(9);
    for (auto& l : labels) l = static_cast<std::uint8_t>(r.index(4));
    c.add("cross_entropy", {{"logits", logits}},
          [=] { return cross_entropy(logits, std::span<const std::uint8_t>(labels)); });
    auto pred = random_tensor(r, {5, 4});
    const auto target = random_tensor(r, {5, 4}, false);
    const std::vector<std::uint8_t> mask = {1, 0, 1, 1, 0};
    c.add("mse_masked", {{"pred", pred}}, [=] { return mse_masked(pred, target, std::span<const std::uint8_t>(mask)); });

    auto la = random_tensor(r, {2, 4}), lb = random_tensor(r, {5, 2});
    c.add("lora_delta", {{"x", x}, {"A", la}, {"B", lb}}, [=] { return peft::lora_delta(x, la, lb, 0.5); });

    ParamStore64 ad;
    ad.add("ap.down.weight", Role::DomainAdapter, random_tensor(r, {3, 4}));
    ad.add("ap.down.bias", Role::DomainAdapter, random_tensor(r, {3}));
    ad.add("ap.up.weight", Role::DomainAdapter, random_tensor(r, {4, 3}));
    ad.add("ap.up.bias", Role::DomainAdapter, random_tensor(r, {4}));
    const auto dw = ad.get("ap.down.weight"), db = ad.get("ap.down.bias");
    const auto uw = ad.get("ap.up.weight"), ub = ad.get("ap.up.bias");
    c.add("adapter_forward", {{"x", x}, {"down.w", dw}, {"down.b", db}, {"up.w", uw}, {"up.b", ub}},
          [=] { return peft::adapter_forward(x, ad, "ap"); });
    auto prompts = random_tensor(r, {2, 4});
    c.add("prepend_prompts", {{"tokens", x}, {"prompts", prompts}}, [=] { return peft::prepend_prompts(x, prompts); });
    return c.take();
}

// Zero-initialized adapter halves would hide half of the adapter gradient; give
// them small random values so both factors are exercised.
void wake_zero_adapters(ParamStore64& params, Rng& rng) {
    for (auto& e : params.entries()) {
        if (e.role != Role::DomainAdapter && e.role != Role::TaskAdapter) continue;
        auto d = e.tensor.data();
        bool all_zero = true;
        for (double v : d) all_zero = all_zero && v == 0.0;
        if (all_zero)
            for (auto& v : d) v = rng.uniform(-0.05, 0.05);
    }
}

Params trainable(ParamStore64& params, const peft::FreezePlan& plan) {
    Params out;
    for (auto& e : params.entries()) {
        e.tensor.set_requires_grad(plan.trains(e.role));
        if (plan.trains(e.role)) out.emplace_back(e.name, e.tensor);
    }
    return out;
}

std::vector<GradCase> mim_suite(std::uint64_t seed) {
    const auto cfg = vit::preset("vit-tiny");
    const auto sample = synth::gen_phantom(seed, synth::Pathology::AMD);
    const auto image = sample.octa.cast<double>();
    const auto mask = mim::random_mask(cfg.num_patches(), mim::kDefaultMaskRatio, seed);
    std::vector<GradCase> out;
    for (const auto& pc : {peft::PEFTConfig::fft(), peft::PEFTConfig::lora(), peft::PEFTConfig::adapter(),
                           peft::PEFTConfig::vpt()}) {
        auto model = mim::make_stage1_model(foundation_backbone(cfg, seed), cfg, pc, seed);
        auto params = model.params.cast<double>();
        Rng rng(seed + 1);
        wake_zero_adapters(params, rng);
        const auto probe = trainable(params, peft::stage1_freeze_plan(pc));
        auto loss = [&] {
            return mim::mim_loss(mim::mim_forward(params, cfg, model.adapters, image, mask), image, cfg.patch_size,
                                 mask, true);
        };
        GradCheckOptions opts;
        opts.max_coords_per_tensor = 2;
        opts.eps = 1e-4;
        opts.seed = seed;
        out.push_back({"mim", "mim_loss/" + std::string(peft::kind_name(pc.kind)),
                       grad_check<double>(loss, probe, opts)});
    }
    return out;
}

std::vector<GradCase> seg_suite(std::uint64_t seed) {
    const auto cfg = vit::preset("vit-tiny");
    const auto sample = synth::gen_phantom(seed, synth::Pathology::DR);
    const auto oct = sample.oct.cast<double>();
    const auto octa = sample.octa.cast<double>();
    std::vector<GradCase> out;
    for (auto strategy : {peft::StrategyId::StlOct, peft::StrategyId::FftTa, peft::StrategyId::Tape}) {
        ParamStore encoder = foundation_backbone(cfg, seed);
        vit::AdapterSet stage1_adapters;
        if (auto domain = peft::stage1_peft(strategy)) {
            auto s1 = mim::make_stage1_model(std::move(encoder), cfg, *domain, seed);
            encoder = std::move(s1.params);
            stage1_adapters = s1.adapters;
        }
        const auto model = seg::make_stage2_model(std::move(encoder), stage1_adapters, cfg, strategy, seed);
        auto params = model.params.cast<double>();
        Rng rng(seed + 2);
        wake_zero_adapters(params, rng);
        const auto probe = trainable(params, peft::freeze_plan(strategy));
        auto loss = [&] {
            return cross_entropy(seg::stage2_logits(params, cfg, model.adapters, strategy, model.head, oct, octa),
                                 std::span<const std::uint8_t>(sample.labels));
        };
        GradCheckOptions opts;
        opts.max_coords_per_tensor = 2;
        opts.eps = 1e-6;  // the head has ReLUs; a wider step straddles their kinks
        opts.seed = seed;
        out.push_back({"seg", "stage2_loss/" + std::string(peft::strategy_name(strategy)),
                       grad_check<double>(loss, probe, opts)});
    }
    return out;
}

}  // namespace

std::string_view grad_suite_name(GradSuite s) {
    switch (s) {
        case GradSuite::Numeric: return "numeric";
        case GradSuite::Mim: return "mim";
        case GradSuite::Seg: return "seg";
    }
    return "?";
}

GradSuite parse_grad_suite(std::string_view name) {
    for (auto s : kAllGradSuites)
        if (grad_suite_name(s) == name) return s;
    throw ConfigError("unknown gradient suite '" + std::string(name) + "' (expected numeric, mim or seg)");
}

std::vector<GradCase> run_grad_suite(GradSuite suite, std::uint64_t seed) {
    switch (suite) {
        case GradSuite::Numeric: return numeric_suite(seed);
        case GradSuite::Mim: return mim_suite(seed);
        case GradSuite::Seg: return seg_suite(seed);
    }
    throw ConfigError("unknown gradient suite");
}

}  // namespace tape::pipeline
