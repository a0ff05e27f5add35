// SPDX-License-Identifier: Apache-2.0

#include "tape/numeric/optim.hpp"

#include <cmath>

namespace tape {

void adamw_step(ParamStore& params, OptimState& state) {
    for (const auto& e : params.entries()) {
        if (e.tensor.requires_grad() && !e.tensor.has_grad()) {
            throw NumericError("adamw_step: trainable parameter '" + e.name + "' has no gradient");
        }
    }
    const auto& cfg = state.config;
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    const float b1 = static_cast<float>(cfg.beta1);
    const float b2 = static_cast<float>(cfg.beta2);

    for (auto& e : params.entries()) {
        auto& p = e.tensor;
        if (!p.requires_grad()) continue;
        auto& mom = state.moments[e.name];
        const auto n = static_cast<std::size_t>(p.numel());
        if (mom.first.size() != n) {
            mom.first.assign(n, 0.0f);
            mom.second.assign(n, 0.0f);
        }
        auto values = p.data();
        const auto grad = p.grad();
        const bool decay = cfg.weight_decay != 0.0 && p.rank() >= 2;
        const double shrink = 1.0 - cfg.lr * cfg.weight_decay;
        for (std::size_t i = 0; i < n; ++i) {
            const float g = grad[i];
            mom.first[i] = b1 * mom.first[i] + (1.0f - b1) * g;
            mom.second[i] = b2 * mom.second[i] + (1.0f - b2) * g * g;
            double v = values[i];
            if (decay) v *= shrink;
            const double mhat = mom.first[i] / bc1;
            const double vhat = mom.second[i] / bc2;
            v -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
            values[i] = static_cast<float>(v);
        }
    }
}

}  // namespace tape
