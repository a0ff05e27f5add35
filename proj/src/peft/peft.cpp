// SPDX-License-Identifier: Apache-2.0

#include "tape/peft/peft.hpp"

#include <cmath>

#include "tape/numeric/errors.hpp"
#include "tape/numeric/ops.hpp"

namespace tape::peft {

std::string_view kind_name(Kind kind) {
    switch (kind) {
        case Kind::FFT: return "fft";
        case Kind::LoRA: return "lora";
        case Kind::ViTAdapter: return "adapter";
        case Kind::VPT: return "vpt";
    }
    return "unknown";
}

Kind parse_kind(std::string_view name) {
    for (auto k : {Kind::FFT, Kind::LoRA, Kind::ViTAdapter, Kind::VPT})
        if (kind_name(k) == name) return k;
    throw ConfigError("unknown PEFT kind '" + std::string(name) + "' (expected fft, lora, adapter or vpt)");
}

void PEFTConfig::validate() const {
    if (role != Role::DomainAdapter && role != Role::TaskAdapter) {
        throw ConfigError("PEFT role must be domain_adapter or task_adapter");
    }
    switch (kind) {
        case Kind::FFT: break;
        case Kind::LoRA:
            if (rank < 1) throw ConfigError("LoRA rank must be >= 1");
            if (!(lora_targets[0] || lora_targets[1] || lora_targets[2] || lora_targets[3])) {
                throw ConfigError("LoRA target set is empty");
            }
            break;
        case Kind::ViTAdapter:
            if (bottleneck < 1) throw ConfigError("adapter bottleneck must be >= 1");
            break;
        case Kind::VPT:
            if (num_tokens < 1) throw ConfigError("VPT needs at least one prompt token");
            break;
    }
}

std::string PEFTConfig::prefix() const {
    const std::string stage = role == Role::TaskAdapter ? "task" : "domain";
    return stage + "." + std::string(kind_name(kind));
}

std::string lora_a_name(std::string_view prefix, std::int64_t block, vit::LinearSite site) {
    return vit::block_param(prefix, block, vit::site_name(site)) + ".lora_a";
}

std::string lora_b_name(std::string_view prefix, std::int64_t block, vit::LinearSite site) {
    return vit::block_param(prefix, block, vit::site_name(site)) + ".lora_b";
}

std::string bottleneck_name(std::string_view prefix, std::int64_t block, std::string_view sub) {
    return vit::block_param(prefix, block, sub);
}

namespace {

// (out, in) of a block linear.
std::pair<std::int64_t, std::int64_t> site_dims(const vit::ViTConfig& v, vit::LinearSite site) {
    const auto d = v.embed_dim, hidden = v.mlp_hidden();
    switch (site) {
        case vit::LinearSite::Qkv: return {3 * d, d};
        case vit::LinearSite::Proj: return {d, d};
        case vit::LinearSite::Fc1: return {hidden, d};
        case vit::LinearSite::Fc2: return {d, hidden};
    }
    return {0, 0};
}

}  // namespace

std::vector<vit::ParamSpec> adapter_layout(const vit::ViTConfig& v, const PEFTConfig& cfg) {
    cfg.validate();
    std::vector<vit::ParamSpec> out;
    const auto prefix = cfg.prefix();
    switch (cfg.kind) {
        case Kind::FFT: break;
        case Kind::LoRA:
            for (std::int64_t l = 0; l < v.depth; ++l)
                for (auto site : vit::kAllSites) {
                    if (!cfg.lora_targets[static_cast<std::size_t>(site)]) continue;
                    const auto [o, i] = site_dims(v, site);
                    out.push_back({lora_a_name(prefix, l, site), {cfg.rank, i}, cfg.role});
                    out.push_back({lora_b_name(prefix, l, site), {o, cfg.rank}, cfg.role});
                }
            break;
        case Kind::ViTAdapter:
            for (std::int64_t l = 0; l < v.depth; ++l)
                for (std::string_view sub : {"msa", "ffn"}) {
                    const auto base = bottleneck_name(prefix, l, sub);
                    out.push_back({base + ".down.weight", {cfg.bottleneck, v.embed_dim}, cfg.role});
                    out.push_back({base + ".down.bias", {cfg.bottleneck}, cfg.role});
                    out.push_back({base + ".up.weight", {v.embed_dim, cfg.bottleneck}, cfg.role});
                    out.push_back({base + ".up.bias", {v.embed_dim}, cfg.role});
                }
            break;
        case Kind::VPT: out.push_back({prefix + ".prompts", {cfg.num_tokens, v.embed_dim}, cfg.role}); break;
    }
    return out;
}

vit::AdapterSet adapter_set(const vit::ViTConfig& /*v*/, const PEFTConfig& cfg) {
    cfg.validate();
    vit::AdapterSet set;
    switch (cfg.kind) {
        case Kind::FFT: break;
        case Kind::LoRA:
            set.lora.push_back({cfg.prefix(), cfg.rank, cfg.alpha / static_cast<double>(cfg.rank), cfg.lora_targets});
            break;
        case Kind::ViTAdapter: set.bottleneck.push_back(cfg.prefix()); break;
        case Kind::VPT: set.prompts.push_back({cfg.prefix() + ".prompts", cfg.num_tokens}); break;
    }
    return set;
}

vit::AdapterSet inject(ParamStore& params, const vit::ViTConfig& v, const PEFTConfig& cfg, Rng& rng) {
    for (const auto& spec : adapter_layout(v, cfg)) {
        std::vector<float> values(static_cast<std::size_t>(spec.numel()), 0.0f);
        const std::string_view name = spec.name;
        auto ends_with = [&](std::string_view s) {
            return name.size() >= s.size() && name.substr(name.size() - s.size()) == s;
        };
        if (ends_with(".lora_a") || ends_with(".prompts")) {
            for (auto& x : values) x = static_cast<float>(rng.trunc_normal(0.02));
        } else if (ends_with(".down.weight")) {
            const double bound = std::sqrt(6.0 / static_cast<double>(spec.shape[0] + spec.shape[1]));
            for (auto& x : values) x = static_cast<float>(rng.uniform(-bound, bound));
        }
        // lora_b, biases and up projections start at zero
        params.add(spec.name, spec.role, Tensor(spec.shape, std::move(values)));
    }
    return adapter_set(v, cfg);
}

vit::AdapterSet inject_lora(ParamStore& params, const vit::ViTConfig& v, const PEFTConfig& cfg, Rng& rng) {
    if (cfg.kind != Kind::LoRA) throw ConfigError("inject_lora: config kind is " + std::string(kind_name(cfg.kind)));
    return inject(params, v, cfg, rng);
}

template <typename T>
BasicTensor<T> adapter_forward(const BasicTensor<T>& sub_out, const BasicParamStore<T>& params,
                               std::string_view prefix) {
    const std::string base(prefix);
    const auto& down_w = params.get(base + ".down.weight");
    if (sub_out.rank() != 2 || sub_out.dim(1) != down_w.dim(1)) {
        throw ShapeError("adapter_forward: input " + shape_str(sub_out.shape()) + " does not match adapter width " +
                         std::to_string(down_w.dim(1)));
    }
    auto h = gelu(linear(sub_out, down_w, params.get(base + ".down.bias")));
    return linear(h, params.get(base + ".up.weight"), params.get(base + ".up.bias"));
}

template <typename T>
BasicTensor<T> prepend_prompts(const BasicTensor<T>& tokens, const BasicTensor<T>& prompts) {
    if (!prompts.defined() || prompts.numel() == 0) return tokens;
    if (prompts.rank() != 2 || tokens.rank() != 2 || prompts.dim(1) != tokens.dim(1)) {
        throw ShapeError("prepend_prompts: prompts " + shape_str(prompts.shape()) + " vs tokens " +
                         shape_str(tokens.shape()));
    }
    return concat0<T>({prompts, tokens});
}

template <typename T>
BasicTensor<T> lora_delta(const BasicTensor<T>& x, const BasicTensor<T>& a, const BasicTensor<T>& b, T scale) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(1)) {
        throw ShapeError("lora_delta: A " + shape_str(a.shape()) + " and B " + shape_str(b.shape()) +
                         " ranks disagree");
    }
    auto low = linear(x, a, BasicTensor<T>());
    auto up = linear(low, b, BasicTensor<T>());
    return scale == T(1) ? up : tape::scale(up, scale);
}

template BasicTensor<float> adapter_forward(const BasicTensor<float>&, const BasicParamStore<float>&,
                                            std::string_view);
template BasicTensor<double> adapter_forward(const BasicTensor<double>&, const BasicParamStore<double>&,
                                             std::string_view);
template BasicTensor<float> prepend_prompts(const BasicTensor<float>&, const BasicTensor<float>&);
template BasicTensor<double> prepend_prompts(const BasicTensor<double>&, const BasicTensor<double>&);
template BasicTensor<float> lora_delta(const BasicTensor<float>&, const BasicTensor<float>&, const BasicTensor<float>&,
                                       float);
template BasicTensor<double> lora_delta(const BasicTensor<double>&, const BasicTensor<double>&,
                                        const BasicTensor<double>&, double);

}  // namespace tape::peft
