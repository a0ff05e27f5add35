// SPDX-License-Identifier: Apache-2.0
//
// Pre-norm transformer blocks and the ViT encoder. Adapters are described by
// an AdapterSet (names of tensors living in the same parameter store) so the
// same forward code serves the plain backbone, Stage-I and Stage-II models.

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tape/numeric/params.hpp"
#include "tape/numeric/tensor.hpp"
#include "tape/vit/config.hpp"

namespace tape::vit {

/// The four linear layers of a block that LoRA can attach to.
enum class LinearSite : std::uint8_t { Qkv = 0, Proj = 1, Fc1 = 2, Fc2 = 3 };

inline constexpr LinearSite kAllSites[] = {LinearSite::Qkv, LinearSite::Proj, LinearSite::Fc1, LinearSite::Fc2};

std::string_view site_name(LinearSite site);

struct LoraAttachment {
    std::string prefix;  // e.g. "domain.lora"
    std::int64_t rank = 8;
    double scale = 1.0;  // alpha / rank
    std::array<bool, 4> sites{true, true, true, true};

    bool attached(LinearSite s) const { return sites[static_cast<std::size_t>(s)]; }
};

struct PromptAttachment {
    std::string name;  // tensor [tokens x d]
    std::int64_t tokens = 0;
};

struct AdapterSet {
    std::vector<LoraAttachment> lora;       // summed in order
    std::vector<std::string> bottleneck;    // ViT-Adapter prefixes
    std::vector<PromptAttachment> prompts;  // prepended in order, last ends up first

    bool empty() const { return lora.empty() && bottleneck.empty() && prompts.empty(); }
    std::int64_t prompt_tokens() const;
    AdapterSet merged(const AdapterSet& other) const;
};

/// Tokens preceding the patch tokens in encoder output: prompts, then cls.
std::int64_t leading_tokens(const ViTConfig& cfg, const AdapterSet& adapters);

/// F' = F^ + FFN(Norm(F^)) [+ AP_FFN(FFN(...))], F^ = F + MSA(Norm(F)) [+ AP_MSA(MSA(...))].
template <typename T>
BasicTensor<T> block_forward(const BasicTensor<T>& x, const BasicParamStore<T>& params, std::string_view stack,
                             std::int64_t block, std::int64_t heads, const AdapterSet& adapters);

/// Linear layer of a block with every attached LoRA delta added:
/// y = x W^T + b + sum_i scale_i * (x A_i^T) B_i^T.
template <typename T>
BasicTensor<T> adapted_linear(const BasicTensor<T>& x, const BasicParamStore<T>& params, std::string_view stack,
                              std::int64_t block, LinearSite site, const AdapterSet& adapters);

/// Patch-embeds tokens [n x p*p*C] located at the given patch positions (all
/// positions 0..N-1 when empty), adds gathered positional embeddings, prepends
/// cls and prompts, runs every block and the final norm.
/// Output [prompts + cls + n, d].
template <typename T>
BasicTensor<T> encode(const BasicParamStore<T>& params, const ViTConfig& cfg, const AdapterSet& adapters,
                      const BasicTensor<T>& tokens, std::span<const std::int64_t> positions = {});

}  // namespace tape::vit
