// SPDX-License-Identifier: Apache-2.0

#include "tape/vit/patch.hpp"

#include "tape/numeric/errors.hpp"

namespace tape::vit {

template <typename T>
BasicTensor<T> patchify(const BasicTensor<T>& image, std::int64_t p) {
    if (image.rank() != 3) throw ShapeError("patchify: expected [C x H x W], got " + shape_str(image.shape()));
    const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (p <= 0 || h % p != 0 || w % p != 0) {
        throw ShapeError("patchify: image " + shape_str(image.shape()) + " not divisible by patch size " +
                         std::to_string(p));
    }
    const auto gh = h / p, gw = w / p, dim = p * p * c;
    std::vector<T> out(static_cast<std::size_t>(gh * gw * dim));
    const auto src = image.data();
    for (std::int64_t py = 0; py < gh; ++py)
        for (std::int64_t px = 0; px < gw; ++px) {
            T* dst = out.data() + (py * gw + px) * dim;
            for (std::int64_t y = 0; y < p; ++y)
                for (std::int64_t x = 0; x < p; ++x)
                    for (std::int64_t ch = 0; ch < c; ++ch)
                        dst[(y * p + x) * c + ch] = src[(ch * h + py * p + y) * w + px * p + x];
        }
    return BasicTensor<T>({gh * gw, dim}, std::move(out));
}

template <typename T>
BasicTensor<T> unpatchify(const BasicTensor<T>& tokens, std::int64_t p, std::int64_t c, std::int64_t h,
                          std::int64_t w) {
    if (p <= 0 || h % p != 0 || w % p != 0) throw ShapeError("unpatchify: image size not divisible by patch size");
    const auto gh = h / p, gw = w / p, dim = p * p * c;
    if (tokens.rank() != 2 || tokens.dim(0) != gh * gw || tokens.dim(1) != dim) {
        throw ShapeError("unpatchify: tokens " + shape_str(tokens.shape()) + " do not match a " + std::to_string(c) +
                         "x" + std::to_string(h) + "x" + std::to_string(w) + " image");
    }
    std::vector<T> out(static_cast<std::size_t>(c * h * w));
    const auto src = tokens.data();
    for (std::int64_t py = 0; py < gh; ++py)
        for (std::int64_t px = 0; px < gw; ++px) {
            const T* tok = src.data() + (py * gw + px) * dim;
            for (std::int64_t y = 0; y < p; ++y)
                for (std::int64_t x = 0; x < p; ++x)
                    for (std::int64_t ch = 0; ch < c; ++ch)
                        out[(ch * h + py * p + y) * w + px * p + x] = tok[(y * p + x) * c + ch];
        }
    return BasicTensor<T>({c, h, w}, std::move(out));
}

template BasicTensor<float> patchify(const BasicTensor<float>&, std::int64_t);
template BasicTensor<double> patchify(const BasicTensor<double>&, std::int64_t);
template BasicTensor<float> unpatchify(const BasicTensor<float>&, std::int64_t, std::int64_t, std::int64_t,
                                       std::int64_t);
template BasicTensor<double> unpatchify(const BasicTensor<double>&, std::int64_t, std::int64_t, std::int64_t,
                                        std::int64_t);

}  // namespace tape::vit
