// SPDX-License-Identifier: Apache-2.0

#include "tape/numeric/losses.hpp"

#include <cmath>
#include <vector>

#include "tape/numeric/errors.hpp"

namespace tape {

template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const std::uint8_t> labels) {
    if (logits.rank() != 3) throw ShapeError("cross_entropy: logits must be [C x H x W], got " + shape_str(logits.shape()));
    const auto classes = logits.dim(0);
    const auto plane = logits.dim(1) * logits.dim(2);
    if (static_cast<std::int64_t>(labels.size()) != plane) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits.shape()));
    }
    const auto ld = logits.data();
    std::vector<T> probs(ld.size());
    double total = 0.0;
    for (std::int64_t p = 0; p < plane; ++p) {
        const auto label = static_cast<std::int64_t>(labels[static_cast<std::size_t>(p)]);
        if (label >= classes) {
            throw ConfigError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                              std::to_string(classes) + ")");
        }
        double mx = ld[p];
        for (std::int64_t c = 1; c < classes; ++c) mx = std::max(mx, static_cast<double>(ld[c * plane + p]));
        double s = 0.0;
        for (std::int64_t c = 0; c < classes; ++c) s += std::exp(static_cast<double>(ld[c * plane + p]) - mx);
        for (std::int64_t c = 0; c < classes; ++c)
            probs[c * plane + p] = static_cast<T>(std::exp(static_cast<double>(ld[c * plane + p]) - mx) / s);
        total += mx + std::log(s) - static_cast<double>(ld[label * plane + p]);
    }
    const double inv = 1.0 / static_cast<double>(plane);
    auto* pl = logits.impl();
    std::vector<std::uint8_t> lab(labels.begin(), labels.end());
    return detail::make_result<T>(
        {1}, {static_cast<T>(total * inv)}, {logits.impl_ptr()},
        [pl, classes, plane, inv, probs = std::move(probs), lab = std::move(lab)](detail::TensorImpl<T>& self) {
            if (!pl->requires_grad) return;
            auto& g = pl->ensure_grad();
            const T scale = static_cast<T>(static_cast<double>(self.grad[0]) * inv);
            for (std::int64_t c = 0; c < classes; ++c)
                for (std::int64_t p = 0; p < plane; ++p) {
                    const T onehot = lab[static_cast<std::size_t>(p)] == c ? T(1) : T(0);
                    g[c * plane + p] += scale * (probs[c * plane + p] - onehot);
                }
        });
}

template <typename T>
BasicTensor<T> mse_masked(const BasicTensor<T>& pred, const BasicTensor<T>& target, std::span<const std::uint8_t> mask) {
    if (pred.rank() != 2 || pred.shape() != target.shape()) {
        throw ShapeError("mse_masked: pred " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
    }
    const auto rows = pred.dim(0), width = pred.dim(1);
    if (static_cast<std::int64_t>(mask.size()) != rows) {
        throw ShapeError("mse_masked: mask has " + std::to_string(mask.size()) + " entries for " +
                         std::to_string(rows) + " rows");
    }
    std::int64_t selected = 0;
    for (auto m : mask) selected += m ? 1 : 0;
    if (selected == 0) throw ConfigError("mse_masked: mask selects no rows");

    const auto pd = pred.data();
    const auto td = target.data();
    double total = 0.0;
    for (std::int64_t r = 0; r < rows; ++r) {
        if (!mask[static_cast<std::size_t>(r)]) continue;
        for (std::int64_t j = 0; j < width; ++j) {
            const double diff = static_cast<double>(pd[r * width + j]) - td[r * width + j];
            total += diff * diff;
        }
    }
    const double count = static_cast<double>(selected * width);
    auto* pp = pred.impl();
    auto* pt = target.impl();
    std::vector<std::uint8_t> m(mask.begin(), mask.end());
    return detail::make_result<T>(
        {1}, {static_cast<T>(total / count)}, {pred.impl_ptr(), target.impl_ptr()},
        [pp, pt, rows, width, count, m = std::move(m)](detail::TensorImpl<T>& self) {
            const T s = static_cast<T>(2.0 * static_cast<double>(self.grad[0]) / count);
            for (std::int64_t r = 0; r < rows; ++r) {
                if (!m[static_cast<std::size_t>(r)]) continue;
                for (std::int64_t j = 0; j < width; ++j) {
                    const auto i = r * width + j;
                    const T diff = pp->data[i] - pt->data[i];
                    if (pp->requires_grad) pp->ensure_grad()[i] += s * diff;
                    if (pt->requires_grad) pt->ensure_grad()[i] -= s * diff;
                }
            }
        });
}

template BasicTensor<float> cross_entropy(const BasicTensor<float>&, std::span<const std::uint8_t>);
template BasicTensor<double> cross_entropy(const BasicTensor<double>&, std::span<const std::uint8_t>);
template BasicTensor<float> mse_masked(const BasicTensor<float>&, const BasicTensor<float>&,
                                       std::span<const std::uint8_t>);
template BasicTensor<double> mse_masked(const BasicTensor<double>&, const BasicTensor<double>&,
                                        std::span<const std::uint8_t>);

}  // namespace tape
