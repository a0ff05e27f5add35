// SPDX-License-Identifier: Apache-2.0
//
// The seven adaptation strategies and the freeze plan each one implies.
//
//   strategy  stage I          stage II trainable        modalities
//   stl-oct   -                head                      OCT only
//   stl       -                head                      OCT + OCTA
//   fft-ta    -                backbone + head           OCT + OCTA
//   tlora     -                task LoRA + head          OCT + OCTA
//   fft-da    FFT              head                      OCT + OCTA
//   dlora     domain LoRA      head                      OCT + OCTA
//   tape      domain LoRA      task LoRA + head          OCT + OCTA

#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

#include "tape/numeric/params.hpp"
#include "tape/peft/peft.hpp"

namespace tape::peft {

enum class StrategyId : std::uint8_t { StlOct, Stl, FftTa, TLora, FftDa, DLora, Tape };

inline constexpr std::array<StrategyId, 7> kAllStrategies = {
    StrategyId::StlOct, StrategyId::Stl,   StrategyId::FftTa, StrategyId::TLora,
    StrategyId::FftDa,  StrategyId::DLora, StrategyId::Tape,
};

/// CLI spelling: stl-oct, stl, fft-ta, tlora, fft-da, dlora, tape.
std::string_view strategy_name(StrategyId id);
StrategyId parse_strategy(std::string_view name);
bool is_two_stage(StrategyId id);
/// false only for stl-oct.
bool uses_octa(StrategyId id);

/// Stage-I adapter of a two-stage strategy (FFT or domain LoRA).
std::optional<PEFTConfig> stage1_peft(StrategyId id, std::int64_t rank = 8);
/// Stage-II task adapter (task LoRA for tlora and tape).
std::optional<PEFTConfig> task_peft(StrategyId id, std::int64_t rank = 8);

/// Which roles receive gradients. Every parameter falls into exactly one role.
struct FreezePlan {
    std::array<bool, 5> trainable{};

    bool trains(Role role) const { return trainable[static_cast<std::size_t>(role)]; }
    FreezePlan& allow(Role role) {
        trainable[static_cast<std::size_t>(role)] = true;
        return *this;
    }
    std::string describe() const;
    bool operator==(const FreezePlan&) const = default;
};

/// Stage-II plan of a strategy.
FreezePlan freeze_plan(StrategyId id);
/// Stage-I plan: FFT trains backbone + decoder, any PEFT kind trains domain adapter + decoder.
FreezePlan stage1_freeze_plan(const PEFTConfig& domain);

/// Sets requires_grad on every tensor from its role; clears stale gradients.
void apply_freeze(ParamStore& params, const FreezePlan& plan);

}  // namespace tape::peft
