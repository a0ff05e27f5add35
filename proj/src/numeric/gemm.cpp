// SPDX-License-Identifier: Apache-2.0

#include "gemm.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

namespace tape::kernels {

template <typename T>
void transpose(const T* in, T* out, std::int64_t rows, std::int64_t cols) {
    constexpr std::int64_t kBlock = 32;
    for (std::int64_t r0 = 0; r0 < rows; r0 += kBlock) {
        const auto r1 = std::min(rows, r0 + kBlock);
        for (std::int64_t c0 = 0; c0 < cols; c0 += kBlock) {
            const auto c1 = std::min(cols, c0 + kBlock);
            for (auto r = r0; r < r1; ++r)
                for (auto c = c0; c < c1; ++c) out[c * rows + r] = in[r * cols + c];
        }
    }
}

namespace {

// 4 rows x (64 bytes) column tile held in registers across the whole k loop.
template <typename T>
void kernel_row_major(std::int64_t m, std::int64_t n, std::int64_t k, const T* __restrict a,
                      const T* __restrict b, T* __restrict c, bool accumulate) {
    constexpr std::int64_t kRows = 4;
    constexpr std::int64_t kCols = 64 / static_cast<std::int64_t>(sizeof(T));

    std::int64_t i = 0;
    for (; i + kRows <= m; i += kRows) {
        std::int64_t j = 0;
        for (; j + kCols <= n; j += kCols) {
            T acc[kRows][kCols];
            for (std::int64_t r = 0; r < kRows; ++r)
                for (std::int64_t q = 0; q < kCols; ++q) acc[r][q] = accumulate ? c[(i + r) * n + j + q] : T(0);
            const T* a0 = a + (i + 0) * k;
            const T* a1 = a + (i + 1) * k;
            const T* a2 = a + (i + 2) * k;
            const T* a3 = a + (i + 3) * k;
            for (std::int64_t p = 0; p < k; ++p) {
                const T* brow = b + p * n + j;
                const T v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
                for (std::int64_t q = 0; q < kCols; ++q) {
                    const T bv = brow[q];
                    acc[0][q] += v0 * bv;
                    acc[1][q] += v1 * bv;
                    acc[2][q] += v2 * bv;
                    acc[3][q] += v3 * bv;
                }
            }
            for (std::int64_t r = 0; r < kRows; ++r)
                for (std::int64_t q = 0; q < kCols; ++q) c[(i + r) * n + j + q] = acc[r][q];
        }
        // ragged column tail
        for (; j < n; ++j) {
            for (std::int64_t r = 0; r < kRows; ++r) {
                T s = accumulate ? c[(i + r) * n + j] : T(0);
                const T* ar = a + (i + r) * k;
                for (std::int64_t p = 0; p < k; ++p) s += ar[p] * b[p * n + j];
                c[(i + r) * n + j] = s;
            }
        }
    }
    // ragged row tail: one row at a time, columns vectorised
    for (; i < m; ++i) {
        T* crow = c + i * n;
        if (!accumulate) std::fill(crow, crow + n, T(0));
        const T* ar = a + i * k;
        for (std::int64_t p = 0; p < k; ++p) {
            const T v = ar[p];
            const T* brow = b + p * n;
            for (std::int64_t q = 0; q < n; ++q) crow[q] += v * brow[q];
        }
    }
}

}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c,
          bool accumulate) {
    if (m == 0 || n == 0) return;
    if (k == 0) {
        if (!accumulate) std::fill(c, c + m * n, T(0));
        return;
    }
    std::vector<T> a_buf, b_buf;
    if (trans_a) {
        // stored as k x m
        a_buf.resize(static_cast<std::size_t>(m * k));
        transpose(a, a_buf.data(), k, m);
        a = a_buf.data();
    }
    if (trans_b) {
        // stored as n x k
        b_buf.resize(static_cast<std::size_t>(k * n));
        transpose(b, b_buf.data(), n, k);
        b = b_buf.data();
    }
    kernel_row_major(m, n, k, a, b, c, accumulate);
}

template void gemm<float>(bool, bool, std::int64_t, std::int64_t, std::int64_t, const float*, const float*, float*,
                          bool);
template void gemm<double>(bool, bool, std::int64_t, std::int64_t, std::int64_t, const double*, const double*,
                           double*, bool);
template void transpose<float>(const float*, float*, std::int64_t, std::int64_t);
template void transpose<double>(const double*, double*, std::int64_t, std::int64_t);

}  // namespace tape::kernels
