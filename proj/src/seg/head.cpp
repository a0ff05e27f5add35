// SPDX-License-Identifier: Apache-2.0

#include "tape/seg/head.hpp"

#include <cmath>

#include "tape/numeric/errors.hpp"
#include "tape/numeric/ops.hpp"

namespace tape::seg {

template <typename T>
BasicTensor<T> seq_to_spatial(const BasicTensor<T>& tokens, std::int64_t h, std::int64_t w, std::int64_t leading) {
    if (tokens.rank() != 2) throw ShapeError("seq_to_spatial: expected [n x d], got " + shape_str(tokens.shape()));
    if (leading < 0 || tokens.dim(0) - leading != h * w)
        throw ShapeError("seq_to_spatial: " + std::to_string(tokens.dim(0)) + " tokens minus " +
                         std::to_string(leading) + " leading does not fill a " + std::to_string(h) + "x" +
                         std::to_string(w) + " grid");
    auto body = tokens;
    if (leading > 0) {
        std::vector<std::int64_t> rows(static_cast<std::size_t>(h * w));
        for (std::int64_t i = 0; i < h * w; ++i) rows[static_cast<std::size_t>(i)] = leading + i;
        body = index_select0(tokens, std::span<const std::int64_t>(rows));
    }
    const auto d = tokens.dim(1);
    return reshape(transpose2d(body), {d, h, w});
}

template <typename T>
BasicTensor<T> spatial_to_seq(const BasicTensor<T>& x) {
    if (x.rank() != 3) throw ShapeError("spatial_to_seq: expected [d x h x w], got " + shape_str(x.shape()));
    return transpose2d(reshape(x, {x.dim(0), x.dim(1) * x.dim(2)}));
}

template <typename T>
BasicTensor<T> fuse_concat(const BasicTensor<T>& f_oct, const BasicTensor<T>& f_octa) {
    if (f_oct.rank() != 3 || f_octa.rank() != 3 || f_oct.dim(1) != f_octa.dim(1) || f_oct.dim(2) != f_octa.dim(2))
        throw ShapeError("fuse_concat: spatial mismatch " + shape_str(f_oct.shape()) + " vs " +
                         shape_str(f_octa.shape()));
    return concat0<T>({f_oct, f_octa});
}

std::int64_t SegHeadConfig::stages() const {
    std::int64_t s = 0;
    for (auto p = patch_size; p > 1; p >>= 1) ++s;
    return s;
}

std::int64_t SegHeadConfig::stage_channels(std::int64_t i) const { return in_channels >> i; }
std::int64_t SegHeadConfig::out_channels() const { return in_channels >> stages(); }

void SegHeadConfig::validate() const {
    if (patch_size < 1 || (patch_size & (patch_size - 1)) != 0)
        throw ConfigError("segmentation head needs a power-of-two patch size, got " + std::to_string(patch_size));
    if (classes < 2) throw ConfigError("segmentation head needs at least 2 classes");
    if (in_channels < 1 || in_channels % (std::int64_t{1} << stages()) != 0)
        throw ConfigError("head input width " + std::to_string(in_channels) + " cannot be halved " +
                          std::to_string(stages()) + " times");
    for (std::int64_t i = 0; i < stages(); ++i)
        if (stage_channels(i) % norm_groups != 0)
            throw ConfigError("head stage width " + std::to_string(stage_channels(i)) + " not divisible by " +
                              std::to_string(norm_groups) + " norm groups");
}

SegHeadConfig SegHeadConfig::for_vit(const vit::ViTConfig& cfg, std::int64_t classes) {
    SegHeadConfig h;
    h.in_channels = 2 * cfg.embed_dim;
    h.classes = classes;
    h.patch_size = cfg.patch_size;
    h.validate();
    return h;
}

namespace {
std::string stage_name(std::int64_t i, const char* leaf) { return "head.stages." + std::to_string(i) + "." + leaf; }
}  // namespace

std::vector<vit::ParamSpec> head_layout(const SegHeadConfig& cfg) {
    cfg.validate();
    std::vector<vit::ParamSpec> out;
    for (std::int64_t i = 0; i < cfg.stages(); ++i) {
        const auto c = cfg.stage_channels(i);
        out.push_back({stage_name(i, "conv1.weight"), {c, c, 3, 3}, Role::Head});
        out.push_back({stage_name(i, "conv1.bias"), {c}, Role::Head});
        out.push_back({stage_name(i, "norm.weight"), {c}, Role::Head});
        out.push_back({stage_name(i, "norm.bias"), {c}, Role::Head});
        out.push_back({stage_name(i, "conv2.weight"), {c, c, 3, 3}, Role::Head});
        out.push_back({stage_name(i, "conv2.bias"), {c}, Role::Head});
        out.push_back({stage_name(i, "up.weight"), {c, c / 2, 2, 2}, Role::Head});
        out.push_back({stage_name(i, "up.bias"), {c / 2}, Role::Head});
    }
    out.push_back({"head.final.weight", {cfg.classes, cfg.out_channels(), 1, 1}, Role::Head});
    out.push_back({"head.final.bias", {cfg.classes}, Role::Head});
    return out;
}

void init_head(ParamStore& params, const SegHeadConfig& cfg, Rng& rng) {
    for (const auto& spec : head_layout(cfg)) {
        std::vector<float> v(static_cast<std::size_t>(spec.numel()), 0.0f);
        const bool is_norm_weight = spec.name.ends_with("norm.weight");
        if (is_norm_weight) {
            std::fill(v.begin(), v.end(), 1.0f);
        } else if (spec.shape.size() == 4) {
            // fan-in of the forward map: Ci*k*k for conv, Ci (dim 0) for the transposed conv
            const bool transposed = spec.name.ends_with("up.weight");
            const auto fan_in = transposed ? spec.shape[0] : spec.shape[1] * spec.shape[2] * spec.shape[3];
            const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
            for (auto& x : v) x = static_cast<float>(rng.uniform(-bound, bound));
        }
        params.add(spec.name, spec.role, Tensor(spec.shape, std::move(v)));
    }
}

template <typename T>
BasicTensor<T> seg_head_forward(const BasicTensor<T>& fused, const BasicParamStore<T>& params,
                                const SegHeadConfig& cfg) {
    if (fused.rank() != 3 || fused.dim(0) != cfg.in_channels)
        throw ShapeError("seg_head_forward: expected " + std::to_string(cfg.in_channels) + " input channels, got " +
                         shape_str(fused.shape()));
    auto x = fused;
    for (std::int64_t i = 0; i < cfg.stages(); ++i) {
        auto h = conv2d(x, params.get(stage_name(i, "conv1.weight")), params.get(stage_name(i, "conv1.bias")), 1, 1);
        h = relu(group_norm(h, cfg.norm_groups, params.get(stage_name(i, "norm.weight")),
                            params.get(stage_name(i, "norm.bias"))));
        h = conv2d(h, params.get(stage_name(i, "conv2.weight")), params.get(stage_name(i, "conv2.bias")), 1, 1);
        x = relu(add(x, h));
        x = relu(transposed_conv2d(x, params.get(stage_name(i, "up.weight")), params.get(stage_name(i, "up.bias")), 2));
    }
    return conv2d(x, params.get("head.final.weight"), params.get("head.final.bias"), 1, 0);
}

#define TAPE_INSTANTIATE_HEAD(T)                                                                                     \
    template BasicTensor<T> seq_to_spatial(const BasicTensor<T>&, std::int64_t, std::int64_t, std::int64_t);        \
    template BasicTensor<T> spatial_to_seq(const BasicTensor<T>&);                                                   \
    template BasicTensor<T> fuse_concat(const BasicTensor<T>&, const BasicTensor<T>&);                               \
    template BasicTensor<T> seg_head_forward(const BasicTensor<T>&, const BasicParamStore<T>&, const SegHeadConfig&);
TAPE_INSTANTIATE_HEAD(float)
TAPE_INSTANTIATE_HEAD(double)
#undef TAPE_INSTANTIATE_HEAD

}  // namespace tape::seg
