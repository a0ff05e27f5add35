// SPDX-License-Identifier: Apache-2.0
//
// The adapter zoo: LoRA on the block linears, bottleneck adapters after the
// MSA and FFN sub-layers, and input-level prompt tokens. Adapter tensors live
// in the same ParamStore as the backbone, tagged with the domain_adapter or
// task_adapter role, so W = W0 + dW_phi is literally "backbone role +
// adapter role".

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "tape/numeric/params.hpp"
#include "tape/numeric/rng.hpp"
#include "tape/vit/config.hpp"
#include "tape/vit/encoder.hpp"

namespace tape::peft {

enum class Kind : std::uint8_t { FFT, LoRA, ViTAdapter, VPT };

std::string_view kind_name(Kind kind);
/// Accepts fft | lora | adapter | vpt.
Kind parse_kind(std::string_view name);

struct PEFTConfig {
    Kind kind = Kind::FFT;
    std::int64_t rank = 8;
    double alpha = 8.0;
    std::int64_t bottleneck = 8;
    std::int64_t num_tokens = 10;
    std::array<bool, 4> lora_targets{true, true, true, true};
    Role role = Role::DomainAdapter;

    void validate() const;
    /// Tensor-name prefix of the adapter, e.g. "domain.lora" or "task.lora".
    std::string prefix() const;

    static PEFTConfig fft() { return {}; }
    static PEFTConfig lora(std::int64_t rank = 8, Role role = Role::DomainAdapter) {
        PEFTConfig c;
        c.kind = Kind::LoRA;
        c.rank = rank;
        c.alpha = static_cast<double>(rank);
        c.role = role;
        return c;
    }
    static PEFTConfig adapter(std::int64_t bottleneck = 8, Role role = Role::DomainAdapter) {
        PEFTConfig c;
        c.kind = Kind::ViTAdapter;
        c.bottleneck = bottleneck;
        c.role = role;
        return c;
    }
    static PEFTConfig vpt(std::int64_t tokens = 10, Role role = Role::DomainAdapter) {
        PEFTConfig c;
        c.kind = Kind::VPT;
        c.num_tokens = tokens;
        c.role = role;
        return c;
    }
};

/// Adapter tensors the config would add (empty for FFT).
std::vector<vit::ParamSpec> adapter_layout(const vit::ViTConfig& vcfg, const PEFTConfig& cfg);

/// Forward-time description of the adapter (empty for FFT).
vit::AdapterSet adapter_set(const vit::ViTConfig& vcfg, const PEFTConfig& cfg);

/// Adds the adapter tensors to params:
///   LoRA   A ~ truncated normal(0.02), B = 0
///   ViT-Adapter down Xavier-uniform, up weight and bias = 0
///   VPT    prompts ~ truncated normal(0.02)
/// Returns the matching AdapterSet. FFT adds nothing.
vit::AdapterSet inject(ParamStore& params, const vit::ViTConfig& vcfg, const PEFTConfig& cfg, Rng& rng);

/// inject() restricted to LoRA; throws ConfigError for any other kind or an empty target set.
vit::AdapterSet inject_lora(ParamStore& params, const vit::ViTConfig& vcfg, const PEFTConfig& cfg, Rng& rng);

/// Bottleneck adapter AP(x) = up(gelu(down(x))), tensors under prefix.{down,up}.{weight,bias}.
template <typename T>
BasicTensor<T> adapter_forward(const BasicTensor<T>& sub_out, const BasicParamStore<T>& params,
                               std::string_view prefix);

/// [k x d] prompts followed by [n x d] tokens. k == 0 returns tokens unchanged.
template <typename T>
BasicTensor<T> prepend_prompts(const BasicTensor<T>& tokens, const BasicTensor<T>& prompts);

/// scale * (x A^T) B^T with A [r x in], B [out x r].
template <typename T>
BasicTensor<T> lora_delta(const BasicTensor<T>& x, const BasicTensor<T>& a, const BasicTensor<T>& b, T scale);

/// LoRA tensor names for one block linear.
std::string lora_a_name(std::string_view prefix, std::int64_t block, vit::LinearSite site);
std::string lora_b_name(std::string_view prefix, std::int64_t block, vit::LinearSite site);
/// Bottleneck prefix for one block, sub = "msa" or "ffn".
std::string bottleneck_name(std::string_view prefix, std::int64_t block, std::string_view sub);

}  // namespace tape::peft
