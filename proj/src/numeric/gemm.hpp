// SPDX-License-Identifier: Apache-2.0
//
// Dense matrix kernels used by matmul, linear and the convolutions.
// Every output element is accumulated over k in increasing order, so results
// are bit-reproducible for a given build.

#pragma once

#include <cstdint>

namespace tape::kernels {

/// C[m x n] (+)= op(A) * op(B), op(A) is m x k, op(B) is k x n.
/// lda / ldb are the row strides of A and B as stored.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c,
          bool accumulate);

/// out[cols x rows] = in[rows x cols]^T
template <typename T>
void transpose(const T* in, T* out, std::int64_t rows, std::int64_t cols);

}  // namespace tape::kernels
