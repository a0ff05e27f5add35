// SPDX-License-Identifier: Apache-2.0
//
// Closed-form parameter budgets. Counts come from shape layouts, so auditing
// the full ViT-Large geometry allocates nothing.

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "tape/numeric/params.hpp"
#include "tape/peft/peft.hpp"
#include "tape/vit/config.hpp"

namespace tape::peft {

struct AuditReport {
    std::string preset;
    std::string method;             // fft | lora | adapter | vpt
    std::int64_t encoder = 0;       // backbone tensors
    std::int64_t decoder = 0;       // MIM decoder tensors
    std::int64_t adapter = 0;       // added adapter tensors
    std::int64_t total = 0;         // encoder + decoder + adapter
    std::int64_t trainable = 0;     // FFT: everything; PEFT: adapter only
    std::int64_t trainable_with_decoder = 0;  // PEFT: adapter + fully trained decoder
    double percent = 0.0;           // trainable / total * 100
    double percent_with_decoder = 0.0;
};

AuditReport audit(const vit::ViTConfig& cfg, const PEFTConfig& peft_cfg);
AuditReport audit(std::string_view preset_name, const PEFTConfig& peft_cfg);

/// Live-store counts: every parameter, or only those currently requiring grad.
enum class CountWhich { Total, Trainable };
std::int64_t count_params(const ParamStore& params, CountWhich which);

/// 3145728 -> "3,145,728"
std::string format_count(std::int64_t value);
/// Two decimals, three below 0.01: 0.9455 -> "0.95%", 0.0031 -> "0.003%".
std::string format_percent(double percent);
/// 3145728 -> "3.15 M", 10240 -> "10.24 K"
std::string format_short(std::int64_t value);

/// Aligned plain-text table, one line per report.
std::string format_audit_table(const std::vector<AuditReport>& reports);
/// CSV with header name,total,trainable,percent,trainable_with_decoder,percent_with_decoder.
std::string format_audit_rows(const std::vector<AuditReport>& reports);

}  // namespace tape::peft
