// SPDX-License-Identifier: Apache-2.0

#include "tape/vit/config.hpp"

#include <cmath>

#include "tape/numeric/errors.hpp"

namespace tape::vit {

void ViTConfig::validate() const {
    auto positive = [](std::int64_t v) { return v > 0; };
    if (!positive(image_size) || !positive(patch_size) || !positive(in_chans) || !positive(embed_dim) ||
        depth < 0 || !positive(num_heads) || !positive(decoder_dim) || decoder_depth < 0 || !positive(decoder_heads) ||
        !(mlp_ratio > 0.0)) {
        throw ConfigError("vit config '" + name + "': dimensions must be positive");
    }
    if (image_size % patch_size != 0) {
        throw ConfigError("vit config '" + name + "': image size " + std::to_string(image_size) +
                          " not divisible by patch size " + std::to_string(patch_size));
    }
    if (embed_dim % num_heads != 0) {
        throw ConfigError("vit config '" + name + "': embed dim " + std::to_string(embed_dim) +
                          " not divisible by " + std::to_string(num_heads) + " heads");
    }
    if (decoder_dim % decoder_heads != 0) {
        throw ConfigError("vit config '" + name + "': decoder dim not divisible by decoder heads");
    }
}

ViTConfig preset(std::string_view name) {
    ViTConfig c;
    if (name == "vit-large") {
        c = ViTConfig{"vit-large", 224, 16, 3, 1024, 24, 16, 4.0, 512, 8, 16, true};
    } else if (name == "vit-tiny") {
        c = ViTConfig{"vit-tiny", 64, 8, 1, 64, 4, 4, 4.0, 32, 2, 4, true};
    } else {
        throw ConfigError("unknown preset '" + std::string(name) + "' (expected vit-large or vit-tiny)");
    }
    c.validate();
    return c;
}

std::vector<std::string> preset_names() { return {"vit-large", "vit-tiny"}; }

std::int64_t total_numel(const std::vector<ParamSpec>& specs) {
    std::int64_t n = 0;
    for (const auto& s : specs) n += s.numel();
    return n;
}

std::string block_param(std::string_view stack, std::int64_t block, std::string_view leaf) {
    return std::string(stack) + ".blocks." + std::to_string(block) + "." + std::string(leaf);
}

namespace {

void append_blocks(std::vector<ParamSpec>& out, std::string_view stack, std::int64_t depth, std::int64_t d,
                   std::int64_t hidden, Role role) {
    for (std::int64_t l = 0; l < depth; ++l) {
        auto add = [&](std::string_view leaf, Shape shape) { out.push_back({block_param(stack, l, leaf), shape, role}); };
        add("norm1.weight", {d});
        add("norm1.bias", {d});
        add("qkv.weight", {3 * d, d});
        add("qkv.bias", {3 * d});
        add("proj.weight", {d, d});
        add("proj.bias", {d});
        add("norm2.weight", {d});
        add("norm2.bias", {d});
        add("fc1.weight", {hidden, d});
        add("fc1.bias", {hidden});
        add("fc2.weight", {d, hidden});
        add("fc2.bias", {d});
    }
}

bool ends_with(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

// Initial values for one spec according to its name.
std::vector<float> init_values(const ParamSpec& spec, Rng& rng) {
    const auto n = static_cast<std::size_t>(spec.numel());
    std::vector<float> v(n, 0.0f);
    const std::string_view name = spec.name;
    if (ends_with(name, "norm1.weight") || ends_with(name, "norm2.weight") || ends_with(name, "norm.weight")) {
        std::fill(v.begin(), v.end(), 1.0f);
    } else if (ends_with(name, ".bias")) {
        // zeros
    } else if (ends_with(name, "pos_embed")) {
        for (auto& x : v) x = static_cast<float>(rng.trunc_normal(0.02));
    } else if (ends_with(name, "cls_token") || ends_with(name, "mask_token")) {
        for (auto& x : v) x = static_cast<float>(rng.normal() * 0.02);
    } else if (spec.shape.size() == 2) {
        const double fan_out = static_cast<double>(spec.shape[0]);
        const double fan_in = static_cast<double>(spec.shape[1]);
        const double bound = std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& x : v) x = static_cast<float>(rng.uniform(-bound, bound));
    } else {
        throw ConfigError("no initialiser for parameter '" + spec.name + "'");
    }
    return v;
}

void materialise(ParamStore& params, const std::vector<ParamSpec>& specs, Rng& rng) {
    for (const auto& s : specs) params.add(s.name, s.role, Tensor(s.shape, init_values(s, rng)));
}

}  // namespace

std::vector<ParamSpec> encoder_layout(const ViTConfig& cfg) {
    cfg.validate();
    const auto d = cfg.embed_dim;
    std::vector<ParamSpec> out;
    out.push_back({"encoder.patch_embed.weight", {d, cfg.patch_dim()}, Role::Backbone});
    out.push_back({"encoder.patch_embed.bias", {d}, Role::Backbone});
    if (cfg.use_cls_token) out.push_back({"encoder.cls_token", {d}, Role::Backbone});
    out.push_back({"encoder.pos_embed", {cfg.pos_rows(), d}, Role::Backbone});
    append_blocks(out, "encoder", cfg.depth, d, cfg.mlp_hidden(), Role::Backbone);
    out.push_back({"encoder.norm.weight", {d}, Role::Backbone});
    out.push_back({"encoder.norm.bias", {d}, Role::Backbone});
    return out;
}

std::vector<ParamSpec> decoder_layout(const ViTConfig& cfg) {
    cfg.validate();
    const auto dd = cfg.decoder_dim;
    std::vector<ParamSpec> out;
    out.push_back({"decoder.embed.weight", {dd, cfg.embed_dim}, Role::Decoder});
    out.push_back({"decoder.embed.bias", {dd}, Role::Decoder});
    out.push_back({"decoder.mask_token", {dd}, Role::Decoder});
    out.push_back({"decoder.pos_embed", {cfg.pos_rows(), dd}, Role::Decoder});
    append_blocks(out, "decoder", cfg.decoder_depth, dd, cfg.decoder_mlp_hidden(), Role::Decoder);
    out.push_back({"decoder.norm.weight", {dd}, Role::Decoder});
    out.push_back({"decoder.norm.bias", {dd}, Role::Decoder});
    out.push_back({"decoder.pred.weight", {cfg.patch_dim(), dd}, Role::Decoder});
    out.push_back({"decoder.pred.bias", {cfg.patch_dim()}, Role::Decoder});
    return out;
}

void init_encoder(ParamStore& params, const ViTConfig& cfg, Rng& rng) { materialise(params, encoder_layout(cfg), rng); }

void init_decoder(ParamStore& params, const ViTConfig& cfg, Rng& rng) { materialise(params, decoder_layout(cfg), rng); }

}  // namespace tape::vit
