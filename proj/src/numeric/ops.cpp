// SPDX-License-Identifier: Apache-2.0

#include "tape/numeric/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "gemm.hpp"
#include "tape/numeric/errors.hpp"

namespace tape {

namespace {

template <typename T>
using ImplPtr = std::shared_ptr<detail::TensorImpl<T>>;
template <typename T>
using Impl = detail::TensorImpl<T>;

template <typename T>
void require_rank(const BasicTensor<T>& x, std::size_t rank, const char* op) {
    if (x.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(x.shape()));
    }
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

template <typename T>
bool needs(Impl<T>* p) {
    return p && p->requires_grad;
}

template <typename T>
Impl<T>* raw(const BasicTensor<T>& t) {
    return t.defined() ? t.impl() : nullptr;
}

template <typename T>
ImplPtr<T> ptr(const BasicTensor<T>& t) {
    return t.defined() ? t.impl_ptr() : nullptr;
}

template <typename T>
std::vector<T> copy_of(const BasicTensor<T>& t) {
    return std::vector<T>(t.data().begin(), t.data().end());
}

// [C x H x W] -> [(C*k*k) x (Ho*Wo)]
template <typename T>
void im2col(const T* img, std::int64_t channels, std::int64_t height, std::int64_t width, std::int64_t k,
            std::int64_t stride, std::int64_t pad, std::int64_t out_h, std::int64_t out_w, T* cols) {
    const std::int64_t plane = out_h * out_w;
    for (std::int64_t c = 0; c < channels; ++c) {
        for (std::int64_t ky = 0; ky < k; ++ky) {
            for (std::int64_t kx = 0; kx < k; ++kx) {
                T* row = cols + ((c * k + ky) * k + kx) * plane;
                for (std::int64_t oy = 0; oy < out_h; ++oy) {
                    const std::int64_t iy = oy * stride - pad + ky;
                    for (std::int64_t ox = 0; ox < out_w; ++ox) {
                        const std::int64_t ix = ox * stride - pad + kx;
                        row[oy * out_w + ox] = (iy >= 0 && iy < height && ix >= 0 && ix < width)
                                                   ? img[(c * height + iy) * width + ix]
                                                   : T(0);
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: accumulates columns back into the image.
template <typename T>
void col2im(const T* cols, std::int64_t channels, std::int64_t height, std::int64_t width, std::int64_t k,
            std::int64_t stride, std::int64_t pad, std::int64_t out_h, std::int64_t out_w, T* img) {
    const std::int64_t plane = out_h * out_w;
    for (std::int64_t c = 0; c < channels; ++c) {
        for (std::int64_t ky = 0; ky < k; ++ky) {
            for (std::int64_t kx = 0; kx < k; ++kx) {
                const T* row = cols + ((c * k + ky) * k + kx) * plane;
                for (std::int64_t oy = 0; oy < out_h; ++oy) {
                    const std::int64_t iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= height) continue;
                    for (std::int64_t ox = 0; ox < out_w; ++ox) {
                        const std::int64_t ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= width) continue;
                        img[(c * height + iy) * width + ix] += row[oy * out_w + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

// ---- linear algebra ---------------------------------------------------------

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::vector<T> out(static_cast<std::size_t>(m * n));
    kernels::gemm<T>(false, false, m, n, k, a.data().data(), b.data().data(), out.data(), false);
    auto* pa = raw(a);
    auto* pb = raw(b);
    return detail::make_result<T>({m, n}, std::move(out), {ptr(a), ptr(b)}, [pa, pb, m, n, k](Impl<T>& self) {
        if (needs(pa)) kernels::gemm<T>(false, true, m, k, n, self.grad.data(), pb->data.data(),
                                        pa->ensure_grad().data(), true);
        if (needs(pb)) kernels::gemm<T>(true, false, k, n, m, pa->data.data(), self.grad.data(),
                                        pb->ensure_grad().data(), true);
    });
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
    require_rank(x, 2, "linear");
    require_rank(weight, 2, "linear");
    const auto n = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
    if (weight.dim(1) != in) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
        throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
    }
    std::vector<T> out(static_cast<std::size_t>(n * out_dim));
    if (bias.defined()) {
        const auto bd = bias.data();
        for (std::int64_t i = 0; i < n; ++i) std::copy(bd.begin(), bd.end(), out.begin() + i * out_dim);
    }
    kernels::gemm<T>(false, true, n, out_dim, in, x.data().data(), weight.data().data(), out.data(), bias.defined());
    auto* px = raw(x);
    auto* pw = raw(weight);
    auto* pb = raw(bias);
    return detail::make_result<T>(
        {n, out_dim}, std::move(out), {ptr(x), ptr(weight), ptr(bias)}, [px, pw, pb, n, in, out_dim](Impl<T>& self) {
            if (needs(px)) kernels::gemm<T>(false, false, n, in, out_dim, self.grad.data(), pw->data.data(),
                                            px->ensure_grad().data(), true);
            if (needs(pw)) kernels::gemm<T>(true, false, out_dim, in, n, self.grad.data(), px->data.data(),
                                            pw->ensure_grad().data(), true);
            if (needs(pb)) {
                auto& g = pb->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i)
                    for (std::int64_t j = 0; j < out_dim; ++j) g[j] += self.grad[i * out_dim + j];
            }
        });
}

template <typename T>
BasicTensor<T> transpose2d(const BasicTensor<T>& x) {
    require_rank(x, 2, "transpose2d");
    const auto r = x.dim(0), c = x.dim(1);
    std::vector<T> out(static_cast<std::size_t>(r * c));
    kernels::transpose(x.data().data(), out.data(), r, c);
    auto* px = raw(x);
    return detail::make_result<T>({c, r}, std::move(out), {ptr(x)}, [px, r, c](Impl<T>& self) {
        if (!needs(px)) return;
        std::vector<T> t(self.grad.size());
        kernels::transpose(self.grad.data(), t.data(), c, r);
        auto& g = px->ensure_grad();
        for (std::size_t i = 0; i < t.size(); ++i) g[i] += t[i];
    });
}

// ---- elementwise ------------------------------------------------------------

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_same_shape(a, b, "add");
    auto out = copy_of(a);
    const auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
    auto* pa = raw(a);
    auto* pb = raw(b);
    return detail::make_result<T>(a.shape(), std::move(out), {ptr(a), ptr(b)}, [pa, pb](Impl<T>& self) {
        for (auto* p : {pa, pb}) {
            if (!needs(p)) continue;
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_same_shape(a, b, "sub");
    auto out = copy_of(a);
    const auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
    auto* pa = raw(a);
    auto* pb = raw(b);
    return detail::make_result<T>(a.shape(), std::move(out), {ptr(a), ptr(b)}, [pa, pb](Impl<T>& self) {
        if (needs(pa)) {
            auto& g = pa->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (needs(pb)) {
            auto& g = pb->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_same_shape(a, b, "mul");
    auto out = copy_of(a);
    const auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
    auto* pa = raw(a);
    auto* pb = raw(b);
    return detail::make_result<T>(a.shape(), std::move(out), {ptr(a), ptr(b)}, [pa, pb](Impl<T>& self) {
        if (needs(pa)) {
            auto& g = pa->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->data[i];
        }
        if (needs(pb)) {
            auto& g = pb->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->data[i];
        }
    });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
    auto out = copy_of(x);
    for (auto& v : out) v *= factor;
    auto* px = raw(x);
    return detail::make_result<T>(x.shape(), std::move(out), {ptr(x)}, [px, factor](Impl<T>& self) {
        if (!needs(px)) return;
        auto& g = px->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
    });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
    auto out = copy_of(x);
    for (auto& v : out) v = v > T(0) ? v : T(0);
    auto* px = raw(x);
    return detail::make_result<T>(x.shape(), std::move(out), {ptr(x)}, [px](Impl<T>& self) {
        if (!needs(px)) return;
        auto& g = px->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (px->data[i] > T(0)) g[i] += self.grad[i];
    });
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
    constexpr T kAlpha = static_cast<T>(0.7978845608028654);  // sqrt(2 / pi)
    constexpr T kBeta = static_cast<T>(0.044715);
    const auto xd = x.data();
    std::vector<T> out(xd.size());
    for (std::size_t i = 0; i < xd.size(); ++i) {
        const T v = xd[i];
        out[i] = T(0.5) * v * (T(1) + std::tanh(kAlpha * (v + kBeta * v * v * v)));
    }
    auto* px = raw(x);
    return detail::make_result<T>(x.shape(), std::move(out), {ptr(x)}, [px](Impl<T>& self) {
        if (!needs(px)) return;
        auto& g = px->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T v = px->data[i];
            const T t = std::tanh(kAlpha * (v + kBeta * v * v * v));
            const T dt = (T(1) - t * t) * kAlpha * (T(1) + T(3) * kBeta * v * v);
            g[i] += self.grad[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * dt);
        }
    });
}

// ---- reductions -------------------------------------------------------------

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
    double s = 0.0;
    for (auto v : x.data()) s += static_cast<double>(v);
    auto* px = raw(x);
    return detail::make_result<T>({1}, {static_cast<T>(s)}, {ptr(x)}, [px](Impl<T>& self) {
        if (!needs(px)) return;
        auto& g = px->ensure_grad();
        for (auto& v : g) v += self.grad[0];
    });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
    const auto n = static_cast<double>(x.numel());
    double s = 0.0;
    for (auto v : x.data()) s += static_cast<double>(v);
    auto* px = raw(x);
    return detail::make_result<T>({1}, {static_cast<T>(s / n)}, {ptr(x)}, [px, n](Impl<T>& self) {
        if (!needs(px)) return;
        auto& g = px->ensure_grad();
        const T d = static_cast<T>(static_cast<double>(self.grad[0]) / n);
        for (auto& v : g) v += d;
    });
}

// ---- layout -----------------------------------------------------------------

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    auto* px = raw(x);
    return detail::make_result<T>(std::move(shape), copy_of(x), {ptr(x)}, [px](Impl<T>& self) {
        if (!needs(px)) return;
        auto& g = px->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::int64_t begin, std::int64_t count) {
    require_rank(x, 2, "slice_cols");
    const auto rows = x.dim(0), cols = x.dim(1);
    if (begin < 0 || count <= 0 || begin + count > cols) {
        throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + shape_str(x.shape()));
    }
    std::vector<T> out(static_cast<std::size_t>(rows * count));
    const auto xd = x.data();
    for (std::int64_t r = 0; r < rows; ++r)
        std::copy_n(xd.begin() + r * cols + begin, count, out.begin() + r * count);
    auto* px = raw(x);
    return detail::make_result<T>({rows, count}, std::move(out), {ptr(x)}, [px, rows, cols, begin, count](Impl<T>& self) {
        if (!needs(px)) return;
        auto& g = px->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t c = 0; c < count; ++c) g[r * cols + begin + c] += self.grad[r * count + c];
    });
}

template <typename T>
BasicTensor<T> concat0(const std::vector<BasicTensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat0: no inputs");
    Shape trailing(parts.front().shape().begin() + 1, parts.front().shape().end());
    std::int64_t rows = 0;
    for (const auto& p : parts) {
        if (p.rank() == 0 || Shape(p.shape().begin() + 1, p.shape().end()) != trailing) {
            throw ShapeError("concat0: " + shape_str(p.shape()) + " does not match trailing dims of " +
                             shape_str(parts.front().shape()));
        }
        rows += p.dim(0);
    }
    std::vector<T> out;
    out.reserve(static_cast<std::size_t>(rows * (parts.front().numel() / parts.front().dim(0))));
    std::vector<ImplPtr<T>> inputs;
    std::vector<Impl<T>*> raws;
    for (const auto& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
        inputs.push_back(ptr(p));
        raws.push_back(raw(p));
    }
    Shape shape = trailing;
    shape.insert(shape.begin(), rows);
    return detail::make_result<T>(std::move(shape), std::move(out), std::move(inputs), [raws](Impl<T>& self) {
        std::size_t offset = 0;
        for (auto* p : raws) {
            const auto n = p->data.size();
            if (needs(p)) {
                auto& g = p->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
            }
            offset += n;
        }
    });
}

template <typename T>
BasicTensor<T> index_select0(const BasicTensor<T>& x, std::span<const std::int64_t> indices) {
    if (x.rank() == 0) throw ShapeError("index_select0: rank-0 input");
    const auto rows = x.dim(0);
    const auto width = x.numel() / rows;
    std::vector<std::int64_t> idx(indices.begin(), indices.end());
    if (idx.empty()) throw ShapeError("index_select0: empty index list");
    std::vector<T> out(idx.size() * static_cast<std::size_t>(width));
    const auto xd = x.data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= rows) {
            throw ShapeError("index_select0: index " + std::to_string(idx[i]) + " outside " + shape_str(x.shape()));
        }
        std::copy_n(xd.begin() + idx[i] * width, width, out.begin() + static_cast<std::int64_t>(i) * width);
    }
    Shape shape = x.shape();
    shape[0] = static_cast<std::int64_t>(idx.size());
    auto* px = raw(x);
    return detail::make_result<T>(std::move(shape), std::move(out), {ptr(x)},
                                  [px, idx = std::move(idx), width](Impl<T>& self) {
                                      if (!needs(px)) return;
                                      auto& g = px->ensure_grad();
                                      for (std::size_t i = 0; i < idx.size(); ++i)
                                          for (std::int64_t j = 0; j < width; ++j)
                                              g[idx[i] * width + j] += self.grad[i * width + j];
                                  });
}

template <typename T>
BasicTensor<T> split_heads(const BasicTensor<T>& x, std::int64_t heads) {
    require_rank(x, 2, "split_heads");
    const auto n = x.dim(0), d = x.dim(1);
    if (heads <= 0 || d % heads != 0) {
        throw ShapeError("split_heads: width " + std::to_string(d) + " not divisible into " + std::to_string(heads) +
                         " heads");
    }
    const auto dh = d / heads;
    std::vector<T> out(static_cast<std::size_t>(n * d));
    const auto xd = x.data();
    for (std::int64_t h = 0; h < heads; ++h)
        for (std::int64_t i = 0; i < n; ++i)
            std::copy_n(xd.begin() + i * d + h * dh, dh, out.begin() + (h * n + i) * dh);
    auto* px = raw(x);
    return detail::make_result<T>({heads, n, dh}, std::move(out), {ptr(x)}, [px, heads, n, d, dh](Impl<T>& self) {
        if (!needs(px)) return;
        auto& g = px->ensure_grad();
        for (std::int64_t h = 0; h < heads; ++h)
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t j = 0; j < dh; ++j) g[i * d + h * dh + j] += self.grad[(h * n + i) * dh + j];
    });
}

template <typename T>
BasicTensor<T> merge_heads(const BasicTensor<T>& x) {
    require_rank(x, 3, "merge_heads");
    const auto heads = x.dim(0), n = x.dim(1), dh = x.dim(2), d = heads * dh;
    std::vector<T> out(static_cast<std::size_t>(n * d));
    const auto xd = x.data();
    for (std::int64_t h = 0; h < heads; ++h)
        for (std::int64_t i = 0; i < n; ++i)
            std::copy_n(xd.begin() + (h * n + i) * dh, dh, out.begin() + i * d + h * dh);
    auto* px = raw(x);
    return detail::make_result<T>({n, d}, std::move(out), {ptr(x)}, [px, heads, n, d, dh](Impl<T>& self) {
        if (!needs(px)) return;
        auto& g = px->ensure_grad();
        for (std::int64_t h = 0; h < heads; ++h)
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t j = 0; j < dh; ++j) g[(h * n + i) * dh + j] += self.grad[i * d + h * dh + j];
    });
}

// ---- normalisation & attention ------------------------------------------------

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta, T eps) {
    if (x.rank() == 0) throw ShapeError("layer_norm: rank-0 input");
    if (!(eps > T(0))) throw ConfigError("layer_norm: eps must be positive");
    const auto d = x.shape().back();
    if (gamma.numel() != d || beta.numel() != d) {
        throw ShapeError("layer_norm: feature size " + std::to_string(d) + " vs gamma " + shape_str(gamma.shape()) +
                         " / beta " + shape_str(beta.shape()));
    }
    const auto rows = x.numel() / d;
    const auto xd = x.data();
    const auto gd = gamma.data();
    const auto bd = beta.data();
    std::vector<T> out(xd.size());
    std::vector<T> xhat(xd.size());
    std::vector<T> rstd(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* row = xd.data() + r * d;
        double mu = 0.0;
        for (std::int64_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        const T rs = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        rstd[r] = rs;
        for (std::int64_t j = 0; j < d; ++j) {
            const T xh = static_cast<T>(row[j] - mu) * rs;
            xhat[r * d + j] = xh;
            out[r * d + j] = xh * gd[j] + bd[j];
        }
    }
    auto* px = raw(x);
    auto* pg = raw(gamma);
    auto* pb = raw(beta);
    return detail::make_result<T>(
        x.shape(), std::move(out), {ptr(x), ptr(gamma), ptr(beta)},
        [px, pg, pb, rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](Impl<T>& self) {
            const auto& gy = self.grad;
            if (needs(pg)) {
                auto& g = pg->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t j = 0; j < d; ++j) g[j] += gy[r * d + j] * xhat[r * d + j];
            }
            if (needs(pb)) {
                auto& g = pb->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t j = 0; j < d; ++j) g[j] += gy[r * d + j];
            }
            if (needs(px)) {
                auto& g = px->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::int64_t j = 0; j < d; ++j) {
                        const double dxh = static_cast<double>(gy[r * d + j]) * pg->data[j];
                        m1 += dxh;
                        m2 += dxh * xhat[r * d + j];
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    for (std::int64_t j = 0; j < d; ++j) {
                        const double dxh = static_cast<double>(gy[r * d + j]) * pg->data[j];
                        g[r * d + j] += static_cast<T>(rstd[r] * (dxh - m1 - xhat[r * d + j] * m2));
                    }
                }
            }
        });
}

template <typename T>
BasicTensor<T> group_norm(const BasicTensor<T>& x, std::int64_t groups, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps) {
    require_rank(x, 3, "group_norm");
    const auto channels = x.dim(0), plane = x.dim(1) * x.dim(2);
    if (groups <= 0 || channels % groups != 0) {
        throw ShapeError("group_norm: " + std::to_string(channels) + " channels not divisible into " +
                         std::to_string(groups) + " groups");
    }
    if (gamma.numel() != channels || beta.numel() != channels) {
        throw ShapeError("group_norm: affine parameters do not match " + std::to_string(channels) + " channels");
    }
    const auto per_group = (channels / groups) * plane;
    const auto xd = x.data();
    const auto gd = gamma.data();
    const auto bd = beta.data();
    std::vector<T> out(xd.size()), xhat(xd.size());
    std::vector<T> rstd(static_cast<std::size_t>(groups));
    for (std::int64_t gi = 0; gi < groups; ++gi) {
        const T* base = xd.data() + gi * per_group;
        double mu = 0.0;
        for (std::int64_t j = 0; j < per_group; ++j) mu += base[j];
        mu /= static_cast<double>(per_group);
        double var = 0.0;
        for (std::int64_t j = 0; j < per_group; ++j) var += (base[j] - mu) * (base[j] - mu);
        var /= static_cast<double>(per_group);
        const T rs = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        rstd[gi] = rs;
        for (std::int64_t j = 0; j < per_group; ++j) {
            const auto idx = gi * per_group + j;
            const auto c = idx / plane;
            xhat[idx] = static_cast<T>(base[j] - mu) * rs;
            out[idx] = xhat[idx] * gd[c] + bd[c];
        }
    }
    auto* px = raw(x);
    auto* pg = raw(gamma);
    auto* pb = raw(beta);
    return detail::make_result<T>(
        x.shape(), std::move(out), {ptr(x), ptr(gamma), ptr(beta)},
        [px, pg, pb, groups, channels, plane, per_group, xhat = std::move(xhat), rstd = std::move(rstd)](Impl<T>& self) {
            const auto& gy = self.grad;
            if (needs(pg) || needs(pb)) {
                for (std::int64_t c = 0; c < channels; ++c) {
                    double sg = 0.0, sb = 0.0;
                    for (std::int64_t j = 0; j < plane; ++j) {
                        sg += static_cast<double>(gy[c * plane + j]) * xhat[c * plane + j];
                        sb += gy[c * plane + j];
                    }
                    if (needs(pg)) pg->ensure_grad()[c] += static_cast<T>(sg);
                    if (needs(pb)) pb->ensure_grad()[c] += static_cast<T>(sb);
                }
            }
            if (needs(px)) {
                auto& g = px->ensure_grad();
                for (std::int64_t gi = 0; gi < groups; ++gi) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::int64_t j = 0; j < per_group; ++j) {
                        const auto idx = gi * per_group + j;
                        const double dxh = static_cast<double>(gy[idx]) * pg->data[idx / plane];
                        m1 += dxh;
                        m2 += dxh * xhat[idx];
                    }
                    m1 /= static_cast<double>(per_group);
                    m2 /= static_cast<double>(per_group);
                    for (std::int64_t j = 0; j < per_group; ++j) {
                        const auto idx = gi * per_group + j;
                        const double dxh = static_cast<double>(gy[idx]) * pg->data[idx / plane];
                        g[idx] += static_cast<T>(rstd[gi] * (dxh - m1 - xhat[idx] * m2));
                    }
                }
            }
        });
}

namespace {

template <typename T>
void check_attention_shapes(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v) {
    require_rank(q, 3, "scaled_dot_attention");
    require_rank(k, 3, "scaled_dot_attention");
    require_rank(v, 3, "scaled_dot_attention");
    if (q.dim(0) != k.dim(0) || q.dim(0) != v.dim(0) || q.dim(2) != k.dim(2) || q.dim(2) != v.dim(2) ||
        k.dim(1) != v.dim(1)) {
        throw ShapeError("scaled_dot_attention: head mismatch q " + shape_str(q.shape()) + " k " +
                         shape_str(k.shape()) + " v " + shape_str(v.shape()));
    }
}

// probs[h x nq x nk] = softmax(q k^T / sqrt(dh))
template <typename T>
std::vector<T> attention_probs(const T* q, const T* k, std::int64_t heads, std::int64_t nq, std::int64_t nk,
                               std::int64_t dh) {
    std::vector<T> probs(static_cast<std::size_t>(heads * nq * nk));
    const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    for (std::int64_t h = 0; h < heads; ++h) {
        T* s = probs.data() + h * nq * nk;
        kernels::gemm<T>(false, true, nq, nk, dh, q + h * nq * dh, k + h * nk * dh, s, false);
        for (std::int64_t i = 0; i < nq; ++i) {
            T* row = s + i * nk;
            T mx = row[0] * inv;
            for (std::int64_t j = 0; j < nk; ++j) {
                row[j] *= inv;
                mx = std::max(mx, row[j]);
            }
            T total = 0;
            for (std::int64_t j = 0; j < nk; ++j) {
                row[j] = std::exp(row[j] - mx);
                total += row[j];
            }
            for (std::int64_t j = 0; j < nk; ++j) row[j] /= total;
        }
    }
    return probs;
}

}  // namespace

template <typename T>
BasicTensor<T> attention_weights(const BasicTensor<T>& q, const BasicTensor<T>& k) {
    check_attention_shapes(q, k, k);
    const auto heads = q.dim(0), nq = q.dim(1), nk = k.dim(1), dh = q.dim(2);
    return BasicTensor<T>({heads, nq, nk}, attention_probs(q.data().data(), k.data().data(), heads, nq, nk, dh));
}

template <typename T>
BasicTensor<T> scaled_dot_attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v) {
    check_attention_shapes(q, k, v);
    const auto heads = q.dim(0), nq = q.dim(1), nk = k.dim(1), dh = q.dim(2);
    auto probs = attention_probs(q.data().data(), k.data().data(), heads, nq, nk, dh);
    std::vector<T> out(static_cast<std::size_t>(heads * nq * dh));
    for (std::int64_t h = 0; h < heads; ++h)
        kernels::gemm<T>(false, false, nq, dh, nk, probs.data() + h * nq * nk, v.data().data() + h * nk * dh,
                         out.data() + h * nq * dh, false);
    auto* pq = raw(q);
    auto* pk = raw(k);
    auto* pv = raw(v);
    return detail::make_result<T>(
        {heads, nq, dh}, std::move(out), {ptr(q), ptr(k), ptr(v)},
        [pq, pk, pv, heads, nq, nk, dh, probs = std::move(probs)](Impl<T>& self) {
            const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
            std::vector<T> dp(static_cast<std::size_t>(nq * nk));
            for (std::int64_t h = 0; h < heads; ++h) {
                const T* p = probs.data() + h * nq * nk;
                const T* go = self.grad.data() + h * nq * dh;
                if (needs(pv))
                    kernels::gemm<T>(true, false, nk, dh, nq, p, go, pv->ensure_grad().data() + h * nk * dh, true);
                if (!needs(pq) && !needs(pk)) continue;
                // dP = dO V^T, then softmax Jacobian row by row.
                kernels::gemm<T>(false, true, nq, nk, dh, go, pv->data.data() + h * nk * dh, dp.data(), false);
                for (std::int64_t i = 0; i < nq; ++i) {
                    T dot = 0;
                    for (std::int64_t j = 0; j < nk; ++j) dot += dp[i * nk + j] * p[i * nk + j];
                    for (std::int64_t j = 0; j < nk; ++j) dp[i * nk + j] = p[i * nk + j] * (dp[i * nk + j] - dot) * inv;
                }
                if (needs(pq))
                    kernels::gemm<T>(false, false, nq, dh, nk, dp.data(), pk->data.data() + h * nk * dh,
                                     pq->ensure_grad().data() + h * nq * dh, true);
                if (needs(pk))
                    kernels::gemm<T>(true, false, nk, dh, nq, dp.data(), pq->data.data() + h * nq * dh,
                                     pk->ensure_grad().data() + h * nk * dh, true);
            }
        });
}

// ---- convolution --------------------------------------------------------------

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& kernels, const BasicTensor<T>& bias,
                      std::int64_t stride, std::int64_t padding) {
    require_rank(x, 3, "conv2d");
    require_rank(kernels, 4, "conv2d");
    const auto ci = x.dim(0), h = x.dim(1), w = x.dim(2);
    const auto co = kernels.dim(0), k = kernels.dim(2);
    if (kernels.dim(1) != ci) {
        throw ShapeError("conv2d: kernels " + shape_str(kernels.shape()) + " expect " + std::to_string(kernels.dim(1)) +
                         " input channels, input is " + shape_str(x.shape()));
    }
    if (kernels.dim(3) != k || k < 1) throw ShapeError("conv2d: kernels must be square, got " + shape_str(kernels.shape()));
    if (stride < 1 || padding < 0) throw ConfigError("conv2d: stride must be >= 1 and padding >= 0");
    const auto span_h = h + 2 * padding - k, span_w = w + 2 * padding - k;
    if (span_h < 0 || span_w < 0 || span_h % stride != 0 || span_w % stride != 0) {
        throw ShapeError("conv2d: output size of " + shape_str(x.shape()) + " with k=" + std::to_string(k) +
                         " stride=" + std::to_string(stride) + " padding=" + std::to_string(padding) +
                         " is not integral");
    }
    if (bias.defined() && bias.numel() != co) throw ShapeError("conv2d: bias does not match output channels");
    const auto oh = span_h / stride + 1, ow = span_w / stride + 1;
    const auto plane = oh * ow, patch = ci * k * k;

    std::vector<T> cols(static_cast<std::size_t>(patch * plane));
    im2col(x.data().data(), ci, h, w, k, stride, padding, oh, ow, cols.data());
    std::vector<T> out(static_cast<std::size_t>(co * plane));
    if (bias.defined())
        for (std::int64_t c = 0; c < co; ++c) std::fill_n(out.begin() + c * plane, plane, bias.data()[c]);
    kernels::gemm<T>(false, false, co, plane, patch, kernels.data().data(), cols.data(), out.data(), bias.defined());

    auto* px = raw(x);
    auto* pk = raw(kernels);
    auto* pb = raw(bias);
    return detail::make_result<T>(
        {co, oh, ow}, std::move(out), {ptr(x), ptr(kernels), ptr(bias)},
        [=, cols = std::move(cols)](Impl<T>& self) {
            if (needs(pb)) {
                auto& g = pb->ensure_grad();
                for (std::int64_t c = 0; c < co; ++c) {
                    T s = 0;
                    for (std::int64_t j = 0; j < plane; ++j) s += self.grad[c * plane + j];
                    g[c] += s;
                }
            }
            if (needs(pk))
                kernels::gemm<T>(false, true, co, patch, plane, self.grad.data(), cols.data(), pk->ensure_grad().data(),
                                 true);
            if (needs(px)) {
                std::vector<T> dcols(static_cast<std::size_t>(patch * plane));
                kernels::gemm<T>(true, false, patch, plane, co, pk->data.data(), self.grad.data(), dcols.data(), false);
                col2im(dcols.data(), ci, h, w, k, stride, padding, oh, ow, px->ensure_grad().data());
            }
        });
}

template <typename T>
BasicTensor<T> transposed_conv2d(const BasicTensor<T>& x, const BasicTensor<T>& kernels, const BasicTensor<T>& bias,
                                 std::int64_t stride, std::int64_t padding) {
    require_rank(x, 3, "transposed_conv2d");
    require_rank(kernels, 4, "transposed_conv2d");
    const auto ci = x.dim(0), h = x.dim(1), w = x.dim(2);
    const auto co = kernels.dim(1), k = kernels.dim(2);
    if (kernels.dim(0) != ci) {
        throw ShapeError("transposed_conv2d: kernels " + shape_str(kernels.shape()) + " expect " +
                         std::to_string(kernels.dim(0)) + " input channels, input is " + shape_str(x.shape()));
    }
    if (kernels.dim(3) != k || k < 1) {
        throw ShapeError("transposed_conv2d: kernels must be square, got " + shape_str(kernels.shape()));
    }
    if (stride < 1 || padding < 0) throw ConfigError("transposed_conv2d: stride must be >= 1 and padding >= 0");
    const auto oh = (h - 1) * stride - 2 * padding + k, ow = (w - 1) * stride - 2 * padding + k;
    if (oh < 1 || ow < 1) throw ShapeError("transposed_conv2d: empty output for " + shape_str(x.shape()));
    if (bias.defined() && bias.numel() != co) throw ShapeError("transposed_conv2d: bias does not match output channels");
    const auto in_plane = h * w, out_plane = oh * ow, patch = co * k * k;

    std::vector<T> cols(static_cast<std::size_t>(patch * in_plane));
    kernels::gemm<T>(true, false, patch, in_plane, ci, kernels.data().data(), x.data().data(), cols.data(), false);
    std::vector<T> out(static_cast<std::size_t>(co * out_plane), T(0));
    col2im(cols.data(), co, oh, ow, k, stride, padding, h, w, out.data());
    if (bias.defined())
        for (std::int64_t c = 0; c < co; ++c)
            for (std::int64_t j = 0; j < out_plane; ++j) out[c * out_plane + j] += bias.data()[c];

    auto* px = raw(x);
    auto* pk = raw(kernels);
    auto* pb = raw(bias);
    return detail::make_result<T>({co, oh, ow}, std::move(out), {ptr(x), ptr(kernels), ptr(bias)}, [=](Impl<T>& self) {
        if (needs(pb)) {
            auto& g = pb->ensure_grad();
            for (std::int64_t c = 0; c < co; ++c) {
                T s = 0;
                for (std::int64_t j = 0; j < out_plane; ++j) s += self.grad[c * out_plane + j];
                g[c] += s;
            }
        }
        if (!needs(px) && !needs(pk)) return;
        std::vector<T> gcols(static_cast<std::size_t>(patch * in_plane));
        im2col(self.grad.data(), co, oh, ow, k, stride, padding, h, w, gcols.data());
        if (needs(px))
            kernels::gemm<T>(false, false, ci, in_plane, patch, pk->data.data(), gcols.data(), px->ensure_grad().data(),
                             true);
        if (needs(pk))
            kernels::gemm<T>(false, true, ci, patch, in_plane, px->data.data(), gcols.data(), pk->ensure_grad().data(),
                             true);
    });
}

// ---- instantiations -----------------------------------------------------------

#define TAPE_INSTANTIATE_OPS(T)                                                                                       \
    template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                                    \
    template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);             \
    template BasicTensor<T> transpose2d(const BasicTensor<T>&);                                                      \
    template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                       \
    template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                                       \
    template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                       \
    template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                         \
    template BasicTensor<T> relu(const BasicTensor<T>&);                                                             \
    template BasicTensor<T> gelu(const BasicTensor<T>&);                                                             \
    template BasicTensor<T> sum(const BasicTensor<T>&);                                                              \
    template BasicTensor<T> mean(const BasicTensor<T>&);                                                             \
    template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                                   \
    template BasicTensor<T> slice_cols(const BasicTensor<T>&, std::int64_t, std::int64_t);                           \
    template BasicTensor<T> concat0(const std::vector<BasicTensor<T>>&);                                             \
    template BasicTensor<T> index_select0(const BasicTensor<T>&, std::span<const std::int64_t>);                     \
    template BasicTensor<T> split_heads(const BasicTensor<T>&, std::int64_t);                                        \
    template BasicTensor<T> merge_heads(const BasicTensor<T>&);                                                      \
    template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, T);      \
    template BasicTensor<T> group_norm(const BasicTensor<T>&, std::int64_t, const BasicTensor<T>&,                   \
                                       const BasicTensor<T>&, T);                                                    \
    template BasicTensor<T> scaled_dot_attention(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&); \
    template BasicTensor<T> attention_weights(const BasicTensor<T>&, const BasicTensor<T>&);                         \
    template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, std::int64_t, \
                                   std::int64_t);                                                                    \
    template BasicTensor<T> transposed_conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,   \
                                              std::int64_t, std::int64_t);

TAPE_INSTANTIATE_OPS(float)
TAPE_INSTANTIATE_OPS(double)

#undef TAPE_INSTANTIATE_OPS

}  // namespace tape
