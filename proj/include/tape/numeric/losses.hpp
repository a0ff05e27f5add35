// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>

#include "tape/numeric/tensor.hpp"

namespace tape {

/// Mean over pixels of -log softmax(logits)[label]. logits [C x H x W], labels H*W values in [0, C).
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const std::uint8_t> labels);

/// Mean squared difference over the rows selected by mask. pred/target [N x p], mask N entries.
template <typename T>
BasicTensor<T> mse_masked(const BasicTensor<T>& pred, const BasicTensor<T>& target, std::span<const std::uint8_t> mask);

}  // namespace tape
