// SPDX-License-Identifier: Apache-2.0
//
// Image <-> token layout. Patches are taken in row-major order over the patch
// grid; inside a patch values are ordered (row, col, channel).

#pragma once

#include <cstdint>

#include "tape/numeric/tensor.hpp"

namespace tape::vit {

/// image [C x H x W] -> [N x (p*p*C)], N = (H/p) * (W/p). Not differentiable.
template <typename T>
BasicTensor<T> patchify(const BasicTensor<T>& image, std::int64_t patch_size);

/// Inverse of patchify for a known image size.
template <typename T>
BasicTensor<T> unpatchify(const BasicTensor<T>& tokens, std::int64_t patch_size, std::int64_t channels,
                          std::int64_t height, std::int64_t width);

}  // namespace tape::vit
