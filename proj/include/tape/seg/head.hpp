// SPDX-License-Identifier: Apache-2.0
//
// Sequence-to-spatial reshaping, OCT/OCTA fusion and the convolutional
// segmentation head.
//
// Head layout for in_channels c0 and patch size p (log2 p stages):
//   stage i (c = c0 >> i):
//     res:  x + conv3x3(relu(groupnorm(conv3x3(x)))), then relu
//     up:   transposed conv k=2 s=2, c -> c/2, then relu
//   final:  1x1 conv c0 >> stages -> classes

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tape/numeric/params.hpp"
#include "tape/numeric/rng.hpp"
#include "tape/numeric/tensor.hpp"
#include "tape/vit/config.hpp"

namespace tape::seg {

/// tokens [leading + h*w, d] -> [d, h, w]; the first `leading` rows (prompts, cls) are dropped.
template <typename T>
BasicTensor<T> seq_to_spatial(const BasicTensor<T>& tokens, std::int64_t h, std::int64_t w, std::int64_t leading = 0);

/// [d, h, w] -> [h*w, d], the inverse of seq_to_spatial with leading = 0.
template <typename T>
BasicTensor<T> spatial_to_seq(const BasicTensor<T>& x);

/// Channel concatenation, OCT channels first: [d,h,w] + [d,h,w] -> [2d,h,w].
template <typename T>
BasicTensor<T> fuse_concat(const BasicTensor<T>& f_oct, const BasicTensor<T>& f_octa);

struct SegHeadConfig {
    std::int64_t in_channels = 128;
    std::int64_t classes = 7;
    std::int64_t patch_size = 8;
    std::int64_t norm_groups = 8;

    std::int64_t stages() const;                        // log2(patch_size)
    std::int64_t stage_channels(std::int64_t i) const;  // in_channels >> i
    std::int64_t out_channels() const;                  // in_channels >> stages
    void validate() const;

    static SegHeadConfig for_vit(const vit::ViTConfig& cfg, std::int64_t classes = 7);
};

/// Head tensors (role Head): head.stages.{i}.{conv1,norm,conv2,up}.{weight,bias}, head.final.{weight,bias}.
std::vector<vit::ParamSpec> head_layout(const SegHeadConfig& cfg);

/// Convolutions He-uniform, biases 0, norms (1, 0).
void init_head(ParamStore& params, const SegHeadConfig& cfg, Rng& rng);

/// fused [in_channels, h, w] -> logits [classes, h*p, w*p].
template <typename T>
BasicTensor<T> seg_head_forward(const BasicTensor<T>& fused, const BasicParamStore<T>& params,
                                const SegHeadConfig& cfg);

}  // namespace tape::seg
