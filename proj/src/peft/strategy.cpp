// SPDX-License-Identifier: Apache-2.0

#include "tape/peft/strategy.hpp"

#include "tape/numeric/errors.hpp"

namespace tape::peft {

std::string_view strategy_name(StrategyId id) {
    switch (id) {
        case StrategyId::StlOct: return "stl-oct";
        case StrategyId::Stl: return "stl";
        case StrategyId::FftTa: return "fft-ta";
        case StrategyId::TLora: return "tlora";
        case StrategyId::FftDa: return "fft-da";
        case StrategyId::DLora: return "dlora";
        case StrategyId::Tape: return "tape";
    }
    return "unknown";
}

StrategyId parse_strategy(std::string_view name) {
    for (auto id : kAllStrategies)
        if (strategy_name(id) == name) return id;
    throw ConfigError("unknown strategy '" + std::string(name) +
                      "' (expected stl-oct, stl, fft-ta, tlora, fft-da, dlora or tape)");
}

bool is_two_stage(StrategyId id) {
    return id == StrategyId::FftDa || id == StrategyId::DLora || id == StrategyId::Tape;
}

bool uses_octa(StrategyId id) { return id != StrategyId::StlOct; }

std::optional<PEFTConfig> stage1_peft(StrategyId id, std::int64_t rank) {
    switch (id) {
        case StrategyId::FftDa: return PEFTConfig::fft();
        case StrategyId::DLora:
        case StrategyId::Tape: return PEFTConfig::lora(rank, Role::DomainAdapter);
        default: return std::nullopt;
    }
}

std::optional<PEFTConfig> task_peft(StrategyId id, std::int64_t rank) {
    if (id == StrategyId::TLora || id == StrategyId::Tape) return PEFTConfig::lora(rank, Role::TaskAdapter);
    return std::nullopt;
}

std::string FreezePlan::describe() const {
    std::string out;
    for (auto r : kAllRoles) {
        if (!trains(r)) continue;
        if (!out.empty()) out += '+';
        out += role_name(r);
    }
    return out.empty() ? "nothing" : out;
}

FreezePlan freeze_plan(StrategyId id) {
    FreezePlan plan;
    plan.allow(Role::Head);
    switch (id) {
        case StrategyId::StlOct:
        case StrategyId::Stl:
        case StrategyId::FftDa:
        case StrategyId::DLora: break;
        case StrategyId::FftTa: plan.allow(Role::Backbone); break;
        case StrategyId::TLora:
        case StrategyId::Tape: plan.allow(Role::TaskAdapter); break;
        default: throw ConfigError("freeze_plan: unknown strategy");
    }
    return plan;
}

FreezePlan stage1_freeze_plan(const PEFTConfig& domain) {
    FreezePlan plan;
    plan.allow(Role::Decoder);
    plan.allow(domain.kind == Kind::FFT ? Role::Backbone : Role::DomainAdapter);
    return plan;
}

void apply_freeze(ParamStore& params, const FreezePlan& plan) {
    for (auto& e : params.entries()) {
        e.tensor.clear_grad();
        e.tensor.set_requires_grad(plan.trains(e.role));
    }
}

}  // namespace tape::peft
