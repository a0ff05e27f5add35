// Patch layout, transformer blocks and the encoder.

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <vector>

#include "tape/numeric/errors.hpp"
#include "tape/numeric/grad_check.hpp"
#include "tape/numeric/ops.hpp"
#include "tape/numeric/rng.hpp"
#include "tape/peft/peft.hpp"
#include "tape/vit/config.hpp"
#include "tape/vit/encoder.hpp"
#include "tape/vit/patch.hpp"

using namespace tape;
using namespace tape::vit;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
    std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    return Tensor(std::move(shape), std::move(v));
}

ViTConfig small_config() {
    ViTConfig c;
    c.name = "small";
    c.image_size = 8;
    c.patch_size = 4;
    c.embed_dim = 8;
    c.depth = 2;
    c.num_heads = 2;
    c.decoder_dim = 8;
    c.decoder_depth = 1;
    c.decoder_heads = 2;
    return c;
}

bool same_bits(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.data().size_bytes()) == 0;
}

void randomize_all(ParamStore& ps, Rng& rng) {
    for (auto& e : ps.entries())
        for (auto& v : e.tensor.data()) v = static_cast<float>(rng.uniform(-0.5, 0.5));
}

}  // namespace

TEST_SUITE("patch") {
    TEST_CASE("1x4x4, p=2 gives four tokens; token 0 is the top-left block") {
        std::vector<float> v(16);
        std::iota(v.begin(), v.end(), 0.0f);
        auto tok = patchify(Tensor({1, 4, 4}, v), 2);
        CHECK(tok.shape() == Shape{4, 4});
        CHECK(std::vector<float>(tok.data().begin(), tok.data().begin() + 4) == std::vector<float>{0, 1, 4, 5});
        CHECK(std::vector<float>(tok.data().begin() + 12, tok.data().end()) == std::vector<float>{10, 11, 14, 15});
    }

    TEST_CASE("roundtrip is bit-exact") {
        Rng rng(1);
        for (auto [c, h, p] : {std::array<std::int64_t, 3>{1, 64, 8}, {3, 16, 4}, {2, 6, 3}}) {
            auto img = random_tensor({c, h, h}, rng);
            CHECK(same_bits(unpatchify(patchify(img, p), p, c, h, h), img));
        }
    }

    TEST_CASE("224 / 16 gives 196 tokens") {
        CHECK(patchify(Tensor::zeros({1, 224, 224}), 16).dim(0) == (224 / 16) * (224 / 16));
        CHECK(preset("vit-large").num_patches() == 196);
    }

    TEST_CASE("indivisible size throws") { CHECK_THROWS(patchify(Tensor::zeros({1, 10, 10}), 4)); }
}

TEST_SUITE("config") {
    TEST_CASE("presets") {
        auto l = preset("vit-large");
        CHECK(l.image_size == 224);
        CHECK(l.patch_size == 16);
        CHECK(l.embed_dim == 1024);
        CHECK(l.depth == 24);
        CHECK(l.num_heads == 16);
        CHECK(l.mlp_ratio == 4.0);
        CHECK(l.decoder_dim == 512);
        CHECK(l.decoder_depth == 8);
        CHECK(l.decoder_heads == 16);
        auto t = preset("vit-tiny");
        CHECK(t.image_size == 64);
        CHECK(t.patch_size == 8);
        CHECK(t.embed_dim == 64);
        CHECK(t.depth == 4);
        CHECK(t.num_heads == 4);
        CHECK(t.decoder_dim == 32);
        CHECK(t.decoder_depth == 2);
        CHECK(t.decoder_heads == 4);
        CHECK_THROWS_AS(preset("vit-huge"), ConfigError);
    }

    TEST_CASE("validate rejects bad geometry") {
        auto c = small_config();
        c.image_size = 10;
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c = small_config();
        c.num_heads = 3;
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }

    TEST_CASE("layout matches allocation") {
        auto c = preset("vit-tiny");
        ParamStore ps;
        Rng rng(3);
        init_encoder(ps, c, rng);
        init_decoder(ps, c, rng);
        CHECK(ps.count(Role::Backbone) == total_numel(encoder_layout(c)));
        CHECK(ps.count(Role::Decoder) == total_numel(decoder_layout(c)));
    }
}

TEST_SUITE("block") {
    TEST_CASE("zero output projections make the block an identity") {
        auto c = small_config();
        Rng rng(2);
        ParamStore ps;
        init_encoder(ps, c, rng);
        for (auto leaf : {"proj.weight", "proj.bias", "fc2.weight", "fc2.bias"})
            for (auto& v : ps.get(block_param("encoder", 0, leaf)).data()) v = 0;
        auto x = random_tensor({5, c.embed_dim}, rng);
        CHECK(same_bits(block_forward(x, ps, "encoder", 0, c.num_heads, AdapterSet{}), x));
    }

    TEST_CASE("adapters with zero up-projection leave the block output unchanged") {
        auto c = small_config();
        Rng rng(3);
        ParamStore ps;
        init_encoder(ps, c, rng);
        randomize_all(ps, rng);
        auto set = peft::inject(ps, c, peft::PEFTConfig::adapter(4), rng);
        auto x = random_tensor({5, c.embed_dim}, rng);
        CHECK(same_bits(block_forward(x, ps, "encoder", 1, c.num_heads, set),
                        block_forward(x, ps, "encoder", 1, c.num_heads, AdapterSet{})));
    }

    TEST_CASE("gradient through one block") {
        auto c = small_config();
        Rng rng(4);
        ParamStore ps;
        init_encoder(ps, c, rng);
        randomize_all(ps, rng);
        auto p64 = ps.cast<double>();
        std::vector<std::pair<std::string, Tensor64>> probe;
        for (auto& e : p64.entries())
            if (e.name.starts_with("encoder.blocks.0.")) {
                e.tensor.set_requires_grad(true);
                probe.emplace_back(e.name, e.tensor);
            }
        auto x = random_tensor({5, c.embed_dim}, rng).cast<double>();
        x.set_requires_grad(true);
        probe.emplace_back("x", x);
        auto w = random_tensor({5, c.embed_dim}, rng).cast<double>();
        GradCheckOptions o;
        o.eps = 1e-5;
        auto res = grad_check<double>(
            [&] { return sum(mul(block_forward(x, p64, "encoder", 0, c.num_heads, AdapterSet{}), w)); }, probe, o);
        CHECK(res.max_rel_error < 1e-3);
    }
}

TEST_SUITE("encode") {
    TEST_CASE("output length: prompts + cls + patches") {
        auto c = preset("vit-tiny");
        Rng rng(5);
        ParamStore ps;
        init_encoder(ps, c, rng);
        auto set = peft::inject(ps, c, peft::PEFTConfig::vpt(10), rng);
        auto tokens = patchify(random_tensor({1, 64, 64}, rng), 8);
        CHECK(encode(ps, c, set, tokens).shape() == Shape{10 + 1 + 64, 64});
        CHECK(encode(ps, c, AdapterSet{}, tokens).shape() == Shape{1 + 64, 64});

        std::vector<std::int64_t> visible{0, 5, 9, 63};
        auto sub = Tensor({4, 64}, std::vector<float>(4 * 64, 0.1f));
        CHECK(encode(ps, c, set, sub, visible).shape() == Shape{10 + 1 + 4, 64});

        auto nocls = c;
        nocls.use_cls_token = false;
        ParamStore ps2;
        init_encoder(ps2, nocls, rng);
        CHECK(encode(ps2, nocls, AdapterSet{}, tokens).shape() == Shape{64, 64});
        CHECK(leading_tokens(c, set) == 11);
    }

    TEST_CASE("depth 0 is embedding followed by the final norm") {
        auto c = small_config();
        c.depth = 0;
        Rng rng(6);
        ParamStore ps;
        init_encoder(ps, c, rng);
        randomize_all(ps, rng);
        auto tokens = random_tensor({c.num_patches(), c.patch_dim()}, rng);
        auto out = encode(ps, c, AdapterSet{}, tokens);
        REQUIRE(out.shape() == Shape{c.num_patches() + 1, c.embed_dim});

        const auto d = c.embed_dim;
        const auto& w = ps.get("encoder.patch_embed.weight");
        const auto& b = ps.get("encoder.patch_embed.bias");
        const auto& pos = ps.get("encoder.pos_embed");
        const auto& cls = ps.get("encoder.cls_token");
        const auto& g = ps.get("encoder.norm.weight");
        const auto& beta = ps.get("encoder.norm.bias");
        for (std::int64_t r = 0; r <= c.num_patches(); ++r) {
            std::vector<double> row(static_cast<std::size_t>(d));
            for (std::int64_t j = 0; j < d; ++j) {
                double v;
                if (r == 0) {
                    v = cls.at(j) + pos.at(j);
                } else {
                    v = b.at(j) + pos.at(r * d + j);
                    for (std::int64_t k = 0; k < c.patch_dim(); ++k)
                        v += double(tokens.at((r - 1) * c.patch_dim() + k)) * w.at(j * c.patch_dim() + k);
                }
                row[static_cast<std::size_t>(j)] = v;
            }
            const double m = std::accumulate(row.begin(), row.end(), 0.0) / double(d);
            double var = 0;
            for (double v : row) var += (v - m) * (v - m);
            var /= double(d);
            for (std::int64_t j = 0; j < d; ++j) {
                const double ref = (row[static_cast<std::size_t>(j)] - m) / std::sqrt(var + 1e-6) * g.at(j) + beta.at(j);
                CHECK(out.at(r * d + j) == doctest::Approx(ref).epsilon(1e-4));
            }
        }
    }

    TEST_CASE("pure: same input twice gives identical bits") {
        auto c = preset("vit-tiny");
        Rng rng(7);
        ParamStore ps;
        init_encoder(ps, c, rng);
        auto set = peft::inject(ps, c, peft::PEFTConfig::lora(8), rng);
        auto tokens = patchify(random_tensor({1, 64, 64}, rng), 8);
        CHECK(same_bits(encode(ps, c, set, tokens), encode(ps, c, set, tokens)));
    }

    TEST_CASE("permuting present tokens with their positions permutes the outputs") {
        auto c = small_config();
        c.image_size = 16;  // 16 patches
        Rng rng(8);
        ParamStore ps;
        init_encoder(ps, c, rng);
        randomize_all(ps, rng);
        std::vector<std::int64_t> pos{1, 4, 6, 11, 14};
        auto tokens = random_tensor({5, c.patch_dim()}, rng);
        auto base = encode(ps, c, AdapterSet{}, tokens, pos);

        const std::vector<std::int64_t> perm{3, 0, 4, 1, 2};
        std::vector<std::int64_t> ppos;
        for (auto i : perm) ppos.push_back(pos[static_cast<std::size_t>(i)]);
        auto ptokens = index_select0(tokens, perm);
        auto out = encode(ps, c, AdapterSet{}, ptokens, ppos);
        const auto d = c.embed_dim;
        for (std::int64_t j = 0; j < d; ++j) CHECK(out.at(j) == doctest::Approx(base.at(j)).epsilon(1e-5));
        for (std::size_t r = 0; r < perm.size(); ++r)
            for (std::int64_t j = 0; j < d; ++j)
                CHECK(out.at((std::int64_t(r) + 1) * d + j) ==
                      doctest::Approx(base.at((perm[r] + 1) * d + j)).epsilon(1e-5));
    }
}
