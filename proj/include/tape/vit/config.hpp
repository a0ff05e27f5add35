// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "tape/numeric/params.hpp"
#include "tape/numeric/rng.hpp"

namespace tape::vit {

/// Geometry of the encoder and of the lightweight reconstruction decoder.
struct ViTConfig {
    std::string name = "custom";
    std::int64_t image_size = 64;
    std::int64_t patch_size = 8;
    std::int64_t in_chans = 1;
    std::int64_t embed_dim = 64;
    std::int64_t depth = 4;
    std::int64_t num_heads = 4;
    double mlp_ratio = 4.0;
    std::int64_t decoder_dim = 32;
    std::int64_t decoder_depth = 2;
    std::int64_t decoder_heads = 4;
    bool use_cls_token = true;

    std::int64_t grid() const { return image_size / patch_size; }
    std::int64_t num_patches() const { return grid() * grid(); }
    std::int64_t patch_dim() const { return patch_size * patch_size * in_chans; }
    std::int64_t mlp_hidden() const { return static_cast<std::int64_t>(mlp_ratio * static_cast<double>(embed_dim)); }
    std::int64_t decoder_mlp_hidden() const {
        return static_cast<std::int64_t>(mlp_ratio * static_cast<double>(decoder_dim));
    }
    std::int64_t pos_rows() const { return num_patches() + (use_cls_token ? 1 : 0); }

    /// Throws ConfigError on indivisible geometry.
    void validate() const;
};

/// "vit-large": 224/16, d=1024, 24 blocks, 16 heads, decoder 512 x 8 x 16 heads, 3 input channels.
/// "vit-tiny":  64/8,   d=64,   4 blocks,  4 heads, decoder 32 x 2 x 4 heads, 1 input channel.
ViTConfig preset(std::string_view name);
std::vector<std::string> preset_names();

/// Shape-only description of one parameter; lets audits count without allocating.
struct ParamSpec {
    std::string name;
    Shape shape;
    Role role;
    std::int64_t numel() const { return shape_numel(shape); }
};

std::int64_t total_numel(const std::vector<ParamSpec>& specs);

/// Encoder tensors (role backbone) in a fixed order.
std::vector<ParamSpec> encoder_layout(const ViTConfig& cfg);
/// Decoder tensors (role decoder): embed, mask token, positions, blocks, norm, pixel head.
std::vector<ParamSpec> decoder_layout(const ViTConfig& cfg);

/// Allocates and initialises encoder parameters into params.
/// Linear / patch weights: Xavier-uniform; biases 0; norms (1, 0);
/// cls token N(0, 0.02); positional table truncated-normal(0.02).
void init_encoder(ParamStore& params, const ViTConfig& cfg, Rng& rng);
/// Same conventions for the decoder; mask token N(0, 0.02).
void init_decoder(ParamStore& params, const ViTConfig& cfg, Rng& rng);

/// Parameter name of a block tensor, e.g. block_param("encoder", 3, "qkv.weight").
std::string block_param(std::string_view stack, std::int64_t block, std::string_view leaf);

}  // namespace tape::vit
