// Adapters, strategies, freeze plans and parameter audits.

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <set>
#include <string>
#include <vector>

#include "tape/numeric/errors.hpp"
#include "tape/numeric/ops.hpp"
#include "tape/numeric/rng.hpp"
#include "tape/peft/audit.hpp"
#include "tape/peft/peft.hpp"
#include "tape/peft/strategy.hpp"
#include "tape/vit/config.hpp"
#include "tape/vit/encoder.hpp"
#include "tape/vit/patch.hpp"

using namespace tape;
using namespace tape::peft;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
    return Tensor(std::move(shape), std::move(v));
}

bool same_bits(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.data().size_bytes()) == 0;
}

// Closed-form counts at ViT-Large geometry, written out independently of the layouts.
constexpr std::int64_t kD = 1024, kDepth = 24, kHidden = 4096, kPatchDim = 16 * 16 * 3, kN = 196;
constexpr std::int64_t kDecD = 512, kDecDepth = 8, kDecHidden = 2048;

std::int64_t block_params(std::int64_t d, std::int64_t hidden) {
    return 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (hidden * d + hidden) + (d * hidden + d);
}

std::int64_t large_total() {
    const std::int64_t enc = kPatchDim * kD + kD + kD + (kN + 1) * kD + kDepth * block_params(kD, kHidden) + 2 * kD;
    const std::int64_t dec = kD * kDecD + kDecD + kDecD + (kN + 1) * kDecD + kDecDepth * block_params(kDecD, kDecHidden) +
                             2 * kDecD + kDecD * kPatchDim + kPatchDim;
    return enc + dec;
}

}  // namespace

TEST_SUITE("lora") {
    TEST_CASE("zero B: injected encoder is bit-identical to the base") {
        auto c = vit::preset("vit-tiny");
        Rng rng(1);
        ParamStore ps;
        vit::init_encoder(ps, c, rng);
        auto tokens = vit::patchify(random_tensor({1, 64, 64}, rng, 0, 1), 8);
        auto base = vit::encode(ps, c, vit::AdapterSet{}, tokens);
        auto set = inject(ps, c, PEFTConfig::lora(8), rng);
        CHECK(same_bits(vit::encode(ps, c, set, tokens), base));
    }

    TEST_CASE("rank-1 delta is (alpha/r) v u^T") {
        const std::vector<float> u{0.5f, -2.0f}, v{3.0f, 0.25f};
        auto a = Tensor({1, 2}, u), b = Tensor({2, 1}, v);
        const float alpha = 2.0f;  // r = 1
        for (int col = 0; col < 2; ++col) {
            Tensor x({1, 2}, {col == 0 ? 1.0f : 0.0f, col == 1 ? 1.0f : 0.0f});
            auto y = lora_delta(x, a, b, alpha / 1.0f);
            // x = e_col picks column col of the effective delta matrix
            for (int row = 0; row < 2; ++row)
                CHECK(y.at(row) == doctest::Approx(alpha * v[std::size_t(row)] * u[std::size_t(col)]));
        }
    }

    TEST_CASE("vit-large r=8 on all four linears: 3,145,728") {
        const auto n = total_numel(adapter_layout(vit::preset("vit-large"), PEFTConfig::lora(8)));
        CHECK(n == kDepth * 8 * (3 * kD + kD) + kDepth * 8 * (kD + kD) + kDepth * 8 * (kD + kHidden) +
                       kDepth * 8 * (kHidden + kD));
        CHECK(n == 3'145'728);
    }

    TEST_CASE("stacked domain and task LoRA add their deltas; dropping the task term recovers stage I") {
        auto c = vit::preset("vit-tiny");
        Rng rng(2);
        ParamStore ps;
        vit::init_encoder(ps, c, rng);
        auto dom = inject(ps, c, PEFTConfig::lora(4, Role::DomainAdapter), rng);
        auto task = inject(ps, c, PEFTConfig::lora(4, Role::TaskAdapter), rng);
        for (auto& e : ps.entries())
            if (e.role != Role::Backbone)
                for (auto& v : e.tensor.data()) v = static_cast<float>(rng.uniform(-0.1, 0.1));
        auto both = dom.merged(task);

        auto x = random_tensor({5, c.embed_dim}, rng);
        const auto site = vit::LinearSite::Fc1;
        auto y = vit::adapted_linear(x, ps, "encoder", 2, site, both);
        const auto& w = ps.get(vit::block_param("encoder", 2, "fc1.weight"));
        const auto& bias = ps.get(vit::block_param("encoder", 2, "fc1.bias"));
        // Effective weight W + s_d B_d A_d + s_t B_t A_t, built by explicit loops.
        auto eff = w.clone();
        for (const auto* set : {&dom, &task}) {
            const auto& l = set->lora.front();
            const auto& a = ps.get(lora_a_name(l.prefix, 2, site));
            const auto& b = ps.get(lora_b_name(l.prefix, 2, site));
            for (std::int64_t o = 0; o < w.dim(0); ++o)
                for (std::int64_t i = 0; i < w.dim(1); ++i) {
                    double s = 0;
                    for (std::int64_t r = 0; r < a.dim(0); ++r) s += double(b.at(o * a.dim(0) + r)) * a.at(r * w.dim(1) + i);
                    eff.data()[std::size_t(o * w.dim(1) + i)] += static_cast<float>(l.scale * s);
                }
        }
        auto ref = linear(x, eff, bias);
        for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.at(i) == doctest::Approx(ref.at(i)).epsilon(1e-4));

        // Zeroing the task B tensors gives back the domain-only output bit for bit.
        for (auto& e : ps.entries())
            if (e.role == Role::TaskAdapter && e.name.ends_with(".lora_b"))
                for (auto& v : e.tensor.data()) v = 0;
        auto tokens = random_tensor({c.num_patches(), c.patch_dim()}, rng);
        CHECK(same_bits(vit::encode(ps, c, both, tokens), vit::encode(ps, c, dom, tokens)));
    }
}

TEST_SUITE("vit_adapter") {
    TEST_CASE("zero up-projection: encoder output unchanged") {
        auto c = vit::preset("vit-tiny");
        Rng rng(3);
        ParamStore ps;
        vit::init_encoder(ps, c, rng);
        auto tokens = vit::patchify(random_tensor({1, 64, 64}, rng, 0, 1), 8);
        auto base = vit::encode(ps, c, vit::AdapterSet{}, tokens);
        auto set = inject(ps, c, PEFTConfig::adapter(8), rng);
        CHECK(same_bits(vit::encode(ps, c, set, tokens), base));
    }

    TEST_CASE("vit-large b=8: 835,968") {
        const auto n = total_numel(adapter_layout(vit::preset("vit-large"), PEFTConfig::adapter(8)));
        CHECK(n == 48 * (1024 * 8 + 8 + 8 * 1024 + 1024));
        CHECK(n == 835'968);
    }

    TEST_CASE("gradients reach the adapter but not the frozen backbone") {
        auto c = vit::preset("vit-tiny");
        Rng rng(4);
        ParamStore ps;
        vit::init_encoder(ps, c, rng);
        auto set = inject(ps, c, PEFTConfig::adapter(8), rng);
        apply_freeze(ps, stage1_freeze_plan(PEFTConfig::adapter(8)));
        auto tokens = vit::patchify(random_tensor({1, 64, 64}, rng, 0, 1), 8);
        sum(vit::encode(ps, c, set, tokens)).backward();
        bool any_up = false;
        for (const auto& e : ps.entries()) {
            if (e.role == Role::Backbone) {
                CHECK_FALSE(e.tensor.has_grad());
            } else {
                CHECK(e.tensor.has_grad());
                if (e.name.find("up") != std::string::npos) any_up = true;
            }
        }
        CHECK(any_up);
    }
}

TEST_SUITE("vpt") {
    TEST_CASE("10 tokens at d=1024: 10,240") {
        CHECK(total_numel(adapter_layout(vit::preset("vit-large"), PEFTConfig::vpt(10))) == 10 * 1024);
    }

    TEST_CASE("empty prompt is the identity") {
        Rng rng(5);
        auto tok = random_tensor({4, 6}, rng);
        CHECK(same_bits(prepend_prompts(tok, Tensor()), tok));
    }

    TEST_CASE("length law at vit-large: 10 + 1 + 196") {
        const auto c = vit::preset("vit-large");
        CHECK(vit::leading_tokens(c, adapter_set(c, PEFTConfig::vpt(10))) + c.num_patches() == 207);
    }

    TEST_CASE("prompts come first") {
        auto p = Tensor({2, 3}, {1, 1, 1, 2, 2, 2}), t = Tensor({1, 3}, {9, 9, 9});
        auto out = prepend_prompts(t, p);
        CHECK(out.shape() == Shape{3, 3});
        CHECK(out.at(0) == 1.0f);
        CHECK(out.at(8) == 9.0f);
    }
}

TEST_SUITE("config") {
    TEST_CASE("defaults and validation") {
        auto l = PEFTConfig::lora();
        CHECK(l.rank == 8);
        CHECK(l.alpha == 8.0);
        CHECK(PEFTConfig::adapter().bottleneck == 8);
        CHECK(PEFTConfig::vpt().num_tokens == 10);
        CHECK_THROWS_AS(PEFTConfig::lora(0).validate(), ConfigError);
        CHECK_THROWS_AS(PEFTConfig::adapter(0).validate(), ConfigError);
        CHECK_THROWS_AS(PEFTConfig::vpt(0).validate(), ConfigError);
        for (auto k : {Kind::FFT, Kind::LoRA, Kind::ViTAdapter, Kind::VPT}) CHECK(parse_kind(kind_name(k)) == k);
        CHECK_THROWS(parse_kind("prefix"));
    }
}

TEST_SUITE("strategy") {
    TEST_CASE("names round-trip; stage counts") {
        std::set<StrategyId> two;
        for (auto s : kAllStrategies) {
            CHECK(parse_strategy(strategy_name(s)) == s);
            if (is_two_stage(s)) two.insert(s);
            CHECK(stage1_peft(s).has_value() == is_two_stage(s));
        }
        CHECK(two == std::set<StrategyId>{StrategyId::FftDa, StrategyId::DLora, StrategyId::Tape});
        CHECK_FALSE(uses_octa(StrategyId::StlOct));
        CHECK(uses_octa(StrategyId::Stl));
    }

    TEST_CASE("STL trains only the head") {
        auto p = freeze_plan(StrategyId::Stl);
        CHECK(p.trains(Role::Head));
        CHECK_FALSE(p.trains(Role::Backbone));
        CHECK_FALSE(p.trains(Role::DomainAdapter));
        CHECK_FALSE(p.trains(Role::TaskAdapter));
        CHECK(freeze_plan(StrategyId::StlOct) == p);
        CHECK(freeze_plan(StrategyId::DLora) == p);
        CHECK(freeze_plan(StrategyId::FftDa) == p);
    }

    TEST_CASE("TAPE stage II: domain adapter frozen, task adapter and head trained") {
        auto p = freeze_plan(StrategyId::Tape);
        CHECK_FALSE(p.trains(Role::Backbone));
        CHECK_FALSE(p.trains(Role::DomainAdapter));
        CHECK(p.trains(Role::TaskAdapter));
        CHECK(p.trains(Role::Head));
        CHECK(task_peft(StrategyId::Tape)->role == Role::TaskAdapter);
        CHECK(stage1_peft(StrategyId::Tape)->kind == Kind::LoRA);
    }

    TEST_CASE("FFT TA trains encoder and head") {
        auto p = freeze_plan(StrategyId::FftTa);
        CHECK(p.trains(Role::Backbone));
        CHECK(p.trains(Role::Head));
    }

    TEST_CASE("apply_freeze is exhaustive and idempotent") {
        auto c = vit::preset("vit-tiny");
        Rng rng(6);
        ParamStore ps;
        vit::init_encoder(ps, c, rng);
        inject(ps, c, PEFTConfig::lora(8, Role::DomainAdapter), rng);
        inject(ps, c, PEFTConfig::lora(8, Role::TaskAdapter), rng);
        for (auto s : kAllStrategies) {
            const auto plan = freeze_plan(s);
            apply_freeze(ps, plan);
            std::vector<bool> first;
            for (const auto& e : ps.entries()) {
                CHECK(e.tensor.requires_grad() == plan.trains(e.role));
                first.push_back(e.tensor.requires_grad());
            }
            apply_freeze(ps, plan);
            std::size_t i = 0;
            for (const auto& e : ps.entries()) CHECK(e.tensor.requires_grad() == first[i++]);
        }
    }
}

TEST_SUITE("audit") {
    TEST_CASE("vit-large FFT total from closed form, near 329.81 M") {
        auto r = audit("vit-large", PEFTConfig::fft());
        CHECK(r.total == large_total());
        CHECK(r.trainable == r.total);
        CHECK(r.percent == 100.0);
        CHECK(std::abs(double(r.total) - 329.81e6) / 329.81e6 < 0.005);
        CHECK(format_short(r.total) == "329.54 M");
    }

    TEST_CASE("table counts") {
        auto lora = audit("vit-large", PEFTConfig::lora(8));
        CHECK(lora.trainable == 3'145'728);
        CHECK(format_short(lora.trainable) == "3.15 M");
        auto ad = audit("vit-large", PEFTConfig::adapter(8));
        CHECK(ad.trainable == 835'968);
        CHECK(std::abs(double(ad.trainable) - 0.84e6) / 0.84e6 < 0.005);
        auto vpt = audit("vit-large", PEFTConfig::vpt(10));
        CHECK(vpt.trainable == 10'240);
        CHECK(format_short(vpt.trainable) == "10.24 K");
        CHECK(format_percent(vpt.percent) == "0.003%");
        CHECK(format_audit_table({vpt}).find("10,240 (0.003%)") != std::string::npos);
        CHECK(format_count(lora.trainable) == "3,145,728");
    }

    TEST_CASE("every PEFT kind trains under 1.2% at vit-large defaults") {
        for (auto cfg : {PEFTConfig::lora(), PEFTConfig::adapter(), PEFTConfig::vpt()}) {
            auto r = audit("vit-large", cfg);
            CHECK(double(r.trainable) / double(r.total) < 0.012);
            CHECK(r.trainable_with_decoder == r.trainable + r.decoder);
        }
    }

    TEST_CASE("closed form agrees with an allocated vit-tiny model") {
        auto c = vit::preset("vit-tiny");
        for (auto cfg : {PEFTConfig::fft(), PEFTConfig::lora(), PEFTConfig::adapter(), PEFTConfig::vpt()}) {
            Rng rng(7);
            ParamStore ps;
            vit::init_encoder(ps, c, rng);
            vit::init_decoder(ps, c, rng);
            inject(ps, c, cfg, rng);
            apply_freeze(ps, stage1_freeze_plan(cfg));
            auto r = audit(c, cfg);
            CHECK(r.total == count_params(ps, CountWhich::Total));
            CHECK(r.trainable_with_decoder == ps.count_trainable());
        }
    }
}
