// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor operations. All ops are templated on the scalar type
// and explicitly instantiated for float (training) and double (gradient
// oracle). Unless noted, inputs are never modified.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tape/numeric/tensor.hpp"

namespace tape {

// ---- linear algebra ---------------------------------------------------------

/// [m x k] * [k x n] -> [m x n].
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// x [n x in], weight [out x in], bias [out] (may be undefined) -> x * weight^T + bias.
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias);

template <typename T>
BasicTensor<T> transpose2d(const BasicTensor<T>& x);

// ---- elementwise ------------------------------------------------------------

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

/// Tanh approximation:
///   gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x);

// ---- reductions -------------------------------------------------------------

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x);

// ---- layout -----------------------------------------------------------------

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);

/// Columns [begin, begin + count) of a 2-D tensor.
template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::int64_t begin, std::int64_t count);

/// Concatenation along axis 0; trailing dimensions must agree.
template <typename T>
BasicTensor<T> concat0(const std::vector<BasicTensor<T>>& parts);

/// Rows of x (along axis 0) picked by index; repeats allowed, gradients scatter-add.
template <typename T>
BasicTensor<T> index_select0(const BasicTensor<T>& x, std::span<const std::int64_t> indices);

/// [n x (h*dh)] -> [h x n x dh]
template <typename T>
BasicTensor<T> split_heads(const BasicTensor<T>& x, std::int64_t heads);
/// [h x n x dh] -> [n x (h*dh)]
template <typename T>
BasicTensor<T> merge_heads(const BasicTensor<T>& x);

// ---- normalisation & attention ------------------------------------------------

/// Normalises over the last axis (population variance), then gamma * xhat + beta.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          T eps = T(1e-6));

/// x [C x H x W]; statistics per group of C/groups channels, affine per channel.
template <typename T>
BasicTensor<T> group_norm(const BasicTensor<T>& x, std::int64_t groups, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps = T(1e-5));

/// q, k, v [h x n x dh]: softmax(q k^T / sqrt(dh)) v per head.
template <typename T>
BasicTensor<T> scaled_dot_attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v);

/// Attention probabilities [h x n x n] for inspection; not differentiable.
template <typename T>
BasicTensor<T> attention_weights(const BasicTensor<T>& q, const BasicTensor<T>& k);

// ---- convolution --------------------------------------------------------------

/// Cross-correlation. x [Ci x H x W], kernels [Co x Ci x k x k], bias [Co] or undefined.
/// Output [Co x H' x W'] with H' = (H + 2*padding - k) / stride + 1, which must divide exactly.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& kernels, const BasicTensor<T>& bias,
                      std::int64_t stride, std::int64_t padding);

/// Adjoint of conv2d. x [Ci x H x W], kernels [Ci x Co x k x k] (the same tensor layout a
/// conv2d mapping Co -> Ci would use), bias [Co] or undefined.
/// Output [Co x H' x W'] with H' = (H - 1) * stride - 2 * padding + k.
template <typename T>
BasicTensor<T> transposed_conv2d(const BasicTensor<T>& x, const BasicTensor<T>& kernels, const BasicTensor<T>& bias,
                                 std::int64_t stride, std::int64_t padding = 0);

}  // namespace tape
