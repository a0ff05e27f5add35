// SPDX-License-Identifier: Apache-2.0

#include "tape/numeric/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tape/numeric/errors.hpp"
#include "tape/numeric/rng.hpp"

namespace tape {

namespace {

template <typename T>
double eval_loss(const std::function<BasicTensor<T>()>& loss) {
    NoGradGuard guard;
    const double v = static_cast<double>(loss().item());
    if (!std::isfinite(v)) throw NumericError("grad_check: loss is not finite");
    return v;
}

}  // namespace

template <typename T>
GradCheckResult grad_check(const std::function<BasicTensor<T>()>& loss,
                           const std::vector<std::pair<std::string, BasicTensor<T>>>& params,
                           const GradCheckOptions& options) {
    if (!(options.eps >= 1e-7 && options.eps <= 1e-2)) {
        throw ConfigError("grad_check: eps must lie in [1e-7, 1e-2]");
    }
    for (const auto& [name, p] : params) {
        if (!p.requires_grad()) throw ConfigError("grad_check: parameter '" + name + "' does not require grad");
    }
    for (auto [name, p] : params) p.clear_grad();
    auto out = loss();
    if (!std::isfinite(static_cast<double>(out.item()))) throw NumericError("grad_check: loss is not finite");
    out.backward();

    GradCheckResult result;
    Rng rng(options.seed);
    for (auto [name, p] : params) {
        std::vector<T> analytic(p.numel(), T(0));
        if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());

        std::vector<std::int64_t> coords(static_cast<std::size_t>(p.numel()));
        std::iota(coords.begin(), coords.end(), 0);
        if (options.max_coords_per_tensor > 0 && p.numel() > options.max_coords_per_tensor) {
            rng.shuffle(coords.begin(), coords.end());
            coords.resize(static_cast<std::size_t>(options.max_coords_per_tensor));
            std::sort(coords.begin(), coords.end());
        }
        auto values = p.data();
        for (auto i : coords) {
            const T saved = values[i];
            values[i] = static_cast<T>(saved + options.eps);
            const double plus = eval_loss(loss);
            values[i] = static_cast<T>(saved - options.eps);
            const double minus = eval_loss(loss);
            values[i] = saved;
            const double numeric = (plus - minus) / (2.0 * options.eps);
            const double a = analytic[i];
            const double rel =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.floor});
            ++result.coords_checked;
            if (rel > result.max_rel_error || result.worst_index < 0) {
                result.max_rel_error = rel;
                result.worst_param = name;
                result.worst_index = i;
                result.worst_analytic = a;
                result.worst_numeric = numeric;
            }
        }
    }
    return result;
}

template GradCheckResult grad_check<float>(const std::function<BasicTensor<float>()>&,
                                           const std::vector<std::pair<std::string, BasicTensor<float>>>&,
                                           const GradCheckOptions&);
template GradCheckResult grad_check<double>(const std::function<BasicTensor<double>()>&,
                                            const std::vector<std::pair<std::string, BasicTensor<double>>>&,
                                            const GradCheckOptions&);

}  // namespace tape
