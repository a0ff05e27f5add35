// Masking, masked reconstruction and Stage-I training.

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>

#include "tape/mim/masking.hpp"
#include "tape/mim/mim.hpp"
#include "tape/numeric/errors.hpp"
#include "tape/numeric/rng.hpp"
#include "tape/peft/strategy.hpp"
#include "tape/synth/dataset.hpp"
#include "tape/vit/patch.hpp"

using namespace tape;
using namespace tape::mim;
namespace fs = std::filesystem;

namespace {

Tensor random_image(Rng& rng, std::int64_t size = 64) {
    std::vector<float> v(static_cast<std::size_t>(size * size));
    for (auto& x : v) x = static_cast<float>(rng.uniform());
    return Tensor({1, size, size}, std::move(v));
}

bool same_bits(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.data().size_bytes()) == 0;
}

bool same_store(const ParamStore& a, const ParamStore& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a.entries()[i].name != b.entries()[i].name || !same_bits(a.entries()[i].tensor, b.entries()[i].tensor))
            return false;
    return true;
}

const synth::Dataset& small_dataset() {
    static const synth::Dataset ds = [] {
        const auto dir = fs::temp_directory_path() / "tape_test_mim_ds";
        synth::DatasetSpec spec;
        spec.n_per_class = 5;
        synth::gen_dataset(dir, spec, true);
        return synth::load_dataset(dir);
    }();
    return ds;
}

Stage1Model fresh_model(const peft::PEFTConfig& cfg, std::uint64_t seed = 3) {
    const auto v = vit::preset("vit-tiny");
    ParamStore backbone;
    Rng rng(7);
    vit::init_encoder(backbone, v, rng);
    return make_stage1_model(std::move(backbone), v, cfg, seed);
}

}  // namespace

TEST_SUITE("masking") {
    TEST_CASE("counts") {
        CHECK(random_mask(196, 0.75, 1).masked.size() == 147);
        CHECK(random_mask(196, 0.75, 1).visible.size() == 49);
        CHECK(random_mask(4, 0.75, 1).masked.size() == 3);
        for (std::int64_t n : {4, 7, 49, 64, 196, 1024}) {
            CHECK(masked_count(n, 0.75) == static_cast<std::int64_t>(std::floor(0.75 * double(n))));
            CHECK(static_cast<std::int64_t>(random_mask(n, 0.75, 9).masked.size()) == masked_count(n, 0.75));
        }
    }

    TEST_CASE("partition of [0, N)") {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const auto p = random_mask(64, 0.75, seed);
            std::set<std::int64_t> all(p.masked.begin(), p.masked.end());
            all.insert(p.visible.begin(), p.visible.end());
            CHECK(all.size() == 64);
            CHECK(*all.begin() == 0);
            CHECK(*all.rbegin() == 63);
            CHECK(std::is_sorted(p.masked.begin(), p.masked.end()));
            const auto bytes = p.mask_bytes();
            CHECK(std::count(bytes.begin(), bytes.end(), 1) == 48);
        }
    }

    TEST_CASE("seeded") {
        CHECK(random_mask(196, 0.75, 5) == random_mask(196, 0.75, 5));
        CHECK(random_mask(196, 0.75, 5).masked != random_mask(196, 0.75, 6).masked);
    }

    TEST_CASE("invalid requests") {
        CHECK_THROWS_AS(random_mask(10, 0.0, 1), ConfigError);
        CHECK_THROWS_AS(random_mask(10, 1.0, 1), ConfigError);
        CHECK_THROWS_AS(random_mask(1, 0.5, 1), ConfigError);
        CHECK_THROWS_AS(random_mask(3, 0.2, 1), ConfigError);  // floor gives 0
    }
}

TEST_SUITE("plan") {
    TEST_CASE("generic reconstructs both modalities, domain only OCTA") {
        CHECK(stage_plan(FmKind::Generic).targets == std::vector<Modality>{Modality::Oct, Modality::Octa});
        CHECK(stage_plan(FmKind::Domain).targets == std::vector<Modality>{Modality::Octa});
        CHECK(parse_fm_kind("generic") == FmKind::Generic);
        CHECK_THROWS(parse_fm_kind("other"));
    }
}

TEST_SUITE("forward") {
    TEST_CASE("one masked patch: output still covers every patch") {
        auto m = fresh_model(peft::PEFTConfig::lora());
        Rng rng(1);
        const auto plan = random_mask(64, 0.02, 4);
        REQUIRE(plan.masked.size() == 1);
        CHECK(mim_forward(m.params, m.vit, m.adapters, random_image(rng), plan).shape() == Shape{64, 64});
    }

    TEST_CASE("VPT prompts do not change the output shape") {
        auto m = fresh_model(peft::PEFTConfig::vpt(10));
        Rng rng(2);
        CHECK(mim_forward(m.params, m.vit, m.adapters, random_image(rng), random_mask(64, 0.75, 1)).shape() ==
              Shape{64, 64});
    }

    TEST_CASE("the mask token drives the masked reconstructions") {
        auto m = fresh_model(peft::PEFTConfig::fft());
        Rng rng(3);
        const auto img = random_image(rng);
        const auto plan = random_mask(64, 0.75, 2);
        const auto before = mim_forward(m.params, m.vit, m.adapters, img, plan);
        for (auto& v : m.params.get("decoder.mask_token").data()) v += 0.5f;
        const auto after = mim_forward(m.params, m.vit, m.adapters, img, plan);
        for (auto r : plan.masked) {
            bool differs = false;
            for (std::int64_t j = 0; j < 64; ++j) differs |= before.at(r * 64 + j) != after.at(r * 64 + j);
            CHECK(differs);
        }
    }
}

TEST_SUITE("loss") {
    TEST_CASE("exact target gives zero") {
        Rng rng(4);
        const auto img = random_image(rng);
        const auto plan = random_mask(64, 0.75, 3);
        CHECK(mim_loss(vit::patchify(img, 8), img, 8, plan, false).item() == 0.0f);
    }

    TEST_CASE("constant image with normalization stays finite") {
        const auto img = Tensor::full({1, 64, 64}, 0.4f);
        const auto plan = random_mask(64, 0.75, 3);
        const float l = mim_loss(Tensor::zeros({64, 64}), img, 8, plan, true).item();
        CHECK(std::isfinite(l));
        CHECK(l == 0.0f);
    }

    TEST_CASE("random case equals a brute-force masked mean") {
        Rng rng(5);
        const auto img = random_image(rng);
        std::vector<float> pv(64 * 64);
        for (auto& x : pv) x = static_cast<float>(rng.uniform(-1, 1));
        const Tensor pred({64, 64}, pv);
        const auto plan = random_mask(64, 0.75, 8);
        for (bool norm : {false, true}) {
            double s = 0;
            for (auto r : plan.masked) {
                // patch r of the image, row-major inside the patch
                const auto gy = r / 8, gx = r % 8;
                std::vector<double> t;
                for (int y = 0; y < 8; ++y)
                    for (int x = 0; x < 8; ++x) t.push_back(img.at((gy * 8 + y) * 64 + gx * 8 + x));
                if (norm) {
                    double m = 0, var = 0;
                    for (double v : t) m += v / 64;
                    for (double v : t) var += (v - m) * (v - m) / 64;
                    for (double& v : t) v = (v - m) / std::sqrt(var + 1e-6);
                }
                for (int j = 0; j < 64; ++j) {
                    const double d = pred.at(r * 64 + j) - t[std::size_t(j)];
                    s += d * d;
                }
            }
            const double ref = s / double(plan.masked.size() * 64);
            CHECK(mim_loss(pred, img, 8, plan, norm).item() == doctest::Approx(ref).epsilon(1e-5));
        }
    }

    TEST_CASE("visible-patch predictions do not matter") {
        Rng rng(6);
        const auto img = random_image(rng);
        auto pred = vit::patchify(random_image(rng), 8);
        const auto plan = random_mask(64, 0.75, 1);
        const float base = mim_loss(pred, img, 8, plan, true).item();
        for (auto r : plan.visible)
            for (std::int64_t j = 0; j < 64; ++j) pred.data()[std::size_t(r * 64 + j)] = 42.0f;
        CHECK(mim_loss(pred, img, 8, plan, true).item() == base);
    }
}

TEST_SUITE("stage1") {
    TEST_CASE("zero epochs leave the initialization untouched") {
        auto m = fresh_model(peft::PEFTConfig::lora());
        const auto init = m.params.clone();
        Stage1Config cfg;
        cfg.epochs = 0;
        const auto r = run_stage1(m, small_dataset(), cfg);
        CHECK(same_store(m.params, init));
        CHECK(r.steps == 0);
        CHECK(r.final_loss("train") == r.initial_loss("train"));
    }

    TEST_CASE("domain FM never reconstructs OCT; generic does") {
        Stage1Config cfg;
        cfg.epochs = 1;
        auto m = fresh_model(peft::PEFTConfig::lora());
        const auto dom = run_stage1(m, small_dataset(), cfg);
        CHECK(dom.oct_targets == 0);
        CHECK(dom.octa_targets > 0);
        cfg.fm_kind = FmKind::Generic;
        auto g = fresh_model(peft::PEFTConfig::lora());
        const auto gen = run_stage1(g, small_dataset(), cfg);
        CHECK(gen.oct_targets > 0);
        CHECK(gen.oct_targets == gen.octa_targets);
    }

    TEST_CASE("PEFT leaves the backbone bitwise unchanged; FFT does not") {
        // Two steps: with a zero up-projection the first step cannot reach the down-projection.
        Stage1Config cfg;
        cfg.epochs = 2;
        for (auto p : {peft::PEFTConfig::lora(), peft::PEFTConfig::adapter(), peft::PEFTConfig::vpt()}) {
            auto m = fresh_model(p);
            const auto init = m.params.clone();
            run_stage1(m, small_dataset(), cfg);
            for (std::size_t i = 0; i < init.size(); ++i) {
                const auto& e = init.entries()[i];
                const bool same = same_bits(e.tensor, m.params.get(e.name));
                if (e.role == Role::Backbone) CHECK(same);
                if (e.role == Role::DomainAdapter && e.name.find("lora_a") == std::string::npos) CHECK_FALSE(same);
            }
            for (const auto& e : m.params.entries()) CHECK_FALSE(e.tensor.requires_grad());
        }
        auto f = fresh_model(peft::PEFTConfig::fft());
        const auto init = f.params.clone();
        run_stage1(f, small_dataset(), cfg);
        CHECK_FALSE(same_bits(init.get("encoder.blocks.0.qkv.weight"), f.params.get("encoder.blocks.0.qkv.weight")));
    }

    TEST_CASE("fixed seed reproduces curves and weights") {
        Stage1Config cfg;
        cfg.epochs = 2;
        auto a = fresh_model(peft::PEFTConfig::lora());
        auto b = fresh_model(peft::PEFTConfig::lora());
        const auto ra = run_stage1(a, small_dataset(), cfg);
        const auto rb = run_stage1(b, small_dataset(), cfg);
        REQUIRE(ra.curve.size() == rb.curve.size());
        for (std::size_t i = 0; i < ra.curve.size(); ++i) CHECK(ra.curve[i].loss == rb.curve[i].loss);
        CHECK(same_store(a.params, b.params));
    }
}
