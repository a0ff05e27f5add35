// SPDX-License-Identifier: Apache-2.0

#include "tape/vit/encoder.hpp"

#include <numeric>

#include "tape/numeric/errors.hpp"
#include "tape/numeric/ops.hpp"
#include "tape/peft/peft.hpp"

namespace tape::vit {

namespace {
constexpr double kLayerNormEps = 1e-6;
}

std::string_view site_name(LinearSite site) {
    switch (site) {
        case LinearSite::Qkv: return "qkv";
        case LinearSite::Proj: return "proj";
        case LinearSite::Fc1: return "fc1";
        case LinearSite::Fc2: return "fc2";
    }
    return "unknown";
}

std::int64_t AdapterSet::prompt_tokens() const {
    std::int64_t n = 0;
    for (const auto& p : prompts) n += p.tokens;
    return n;
}

AdapterSet AdapterSet::merged(const AdapterSet& other) const {
    AdapterSet out = *this;
    out.lora.insert(out.lora.end(), other.lora.begin(), other.lora.end());
    out.bottleneck.insert(out.bottleneck.end(), other.bottleneck.begin(), other.bottleneck.end());
    out.prompts.insert(out.prompts.end(), other.prompts.begin(), other.prompts.end());
    return out;
}

std::int64_t leading_tokens(const ViTConfig& cfg, const AdapterSet& adapters) {
    return adapters.prompt_tokens() + (cfg.use_cls_token ? 1 : 0);
}

template <typename T>
BasicTensor<T> adapted_linear(const BasicTensor<T>& x, const BasicParamStore<T>& params, std::string_view stack,
                              std::int64_t block, LinearSite site, const AdapterSet& adapters) {
    const auto base = block_param(stack, block, site_name(site));
    auto y = linear(x, params.get(base + ".weight"), params.get(base + ".bias"));
    for (const auto& lora : adapters.lora) {
        if (!lora.attached(site)) continue;
        const auto& a = params.get(peft::lora_a_name(lora.prefix, block, site));
        const auto& b = params.get(peft::lora_b_name(lora.prefix, block, site));
        y = add(y, peft::lora_delta(x, a, b, static_cast<T>(lora.scale)));
    }
    return y;
}

template <typename T>
BasicTensor<T> block_forward(const BasicTensor<T>& x, const BasicParamStore<T>& params, std::string_view stack,
                             std::int64_t block, std::int64_t heads, const AdapterSet& adapters) {
    const auto p = [&](std::string_view leaf) -> const BasicTensor<T>& {
        return params.get(block_param(stack, block, leaf));
    };
    const auto d = p("norm1.weight").numel();
    if (x.rank() != 2 || x.dim(1) != d || x.dim(0) < 1) {
        throw ShapeError("block_forward: input " + shape_str(x.shape()) + " does not match width " + std::to_string(d));
    }
    const T eps = static_cast<T>(kLayerNormEps);

    // multi-head self-attention sub-layer
    auto h = layer_norm(x, p("norm1.weight"), p("norm1.bias"), eps);
    auto qkv = adapted_linear(h, params, stack, block, LinearSite::Qkv, adapters);
    auto q = split_heads(slice_cols(qkv, 0, d), heads);
    auto k = split_heads(slice_cols(qkv, d, d), heads);
    auto v = split_heads(slice_cols(qkv, 2 * d, d), heads);
    auto msa = adapted_linear(merge_heads(scaled_dot_attention(q, k, v)), params, stack, block, LinearSite::Proj,
                              adapters);
    auto x1 = add(x, msa);
    for (const auto& prefix : adapters.bottleneck)
        x1 = add(x1, peft::adapter_forward(msa, params, peft::bottleneck_name(prefix, block, "msa")));

    // feed-forward sub-layer
    auto h2 = layer_norm(x1, p("norm2.weight"), p("norm2.bias"), eps);
    auto ffn = adapted_linear(gelu(adapted_linear(h2, params, stack, block, LinearSite::Fc1, adapters)), params, stack,
                              block, LinearSite::Fc2, adapters);
    auto x2 = add(x1, ffn);
    for (const auto& prefix : adapters.bottleneck)
        x2 = add(x2, peft::adapter_forward(ffn, params, peft::bottleneck_name(prefix, block, "ffn")));
    return x2;
}

template <typename T>
BasicTensor<T> encode(const BasicParamStore<T>& params, const ViTConfig& cfg, const AdapterSet& adapters,
                      const BasicTensor<T>& tokens, std::span<const std::int64_t> positions) {
    if (tokens.rank() != 2 || tokens.dim(1) != cfg.patch_dim()) {
        throw ShapeError("encode: tokens " + shape_str(tokens.shape()) + " do not have patch width " +
                         std::to_string(cfg.patch_dim()));
    }
    const auto n = tokens.dim(0);
    const std::int64_t offset = cfg.use_cls_token ? 1 : 0;
    std::vector<std::int64_t> rows(static_cast<std::size_t>(n));
    if (positions.empty()) {
        if (n > cfg.num_patches()) {
            throw ShapeError("encode: " + std::to_string(n) + " tokens exceed the " +
                             std::to_string(cfg.num_patches()) + "-entry positional table");
        }
        std::iota(rows.begin(), rows.end(), offset);
    } else {
        if (static_cast<std::int64_t>(positions.size()) != n) {
            throw ShapeError("encode: " + std::to_string(positions.size()) + " positions for " + std::to_string(n) +
                             " tokens");
        }
        for (std::int64_t i = 0; i < n; ++i) {
            const auto pos = positions[static_cast<std::size_t>(i)];
            if (pos < 0 || pos >= cfg.num_patches()) {
                throw ShapeError("encode: position " + std::to_string(pos) + " exceeds the positional table");
            }
            rows[static_cast<std::size_t>(i)] = pos + offset;
        }
    }

    const auto& pos_embed = params.get("encoder.pos_embed");
    auto x = linear(tokens, params.get("encoder.patch_embed.weight"), params.get("encoder.patch_embed.bias"));
    x = add(x, index_select0(pos_embed, std::span<const std::int64_t>(rows)));
    if (cfg.use_cls_token) {
        const std::int64_t zero = 0;
        auto cls = add(reshape(params.get("encoder.cls_token"), {1, cfg.embed_dim}),
                       index_select0(pos_embed, std::span<const std::int64_t>(&zero, 1)));
        x = concat0<T>({cls, x});
    }
    for (const auto& prompt : adapters.prompts) x = peft::prepend_prompts(x, params.get(prompt.name));
    for (std::int64_t l = 0; l < cfg.depth; ++l) x = block_forward(x, params, "encoder", l, cfg.num_heads, adapters);
    return layer_norm(x, params.get("encoder.norm.weight"), params.get("encoder.norm.bias"),
                      static_cast<T>(kLayerNormEps));
}

#define TAPE_INSTANTIATE_VIT(T)                                                                                    \
    template BasicTensor<T> adapted_linear(const BasicTensor<T>&, const BasicParamStore<T>&, std::string_view,    \
                                           std::int64_t, LinearSite, const AdapterSet&);                          \
    template BasicTensor<T> block_forward(const BasicTensor<T>&, const BasicParamStore<T>&, std::string_view,     \
                                          std::int64_t, std::int64_t, const AdapterSet&);                         \
    template BasicTensor<T> encode(const BasicParamStore<T>&, const ViTConfig&, const AdapterSet&,                \
                                   const BasicTensor<T>&, std::span<const std::int64_t>);

TAPE_INSTANTIATE_VIT(float)
TAPE_INSTANTIATE_VIT(double)

#undef TAPE_INSTANTIATE_VIT

}  // namespace tape::vit
