// SPDX-License-Identifier: Apache-2.0

#include "tape/peft/audit.hpp"

#include <cstdio>
#include <sstream>

namespace tape::peft {

AuditReport audit(const vit::ViTConfig& cfg, const PEFTConfig& peft_cfg) {
    AuditReport r;
    r.preset = cfg.name;
    r.method = std::string(kind_name(peft_cfg.kind));
    r.encoder = vit::total_numel(vit::encoder_layout(cfg));
    r.decoder = vit::total_numel(vit::decoder_layout(cfg));
    r.adapter = vit::total_numel(adapter_layout(cfg, peft_cfg));
    r.total = r.encoder + r.decoder + r.adapter;
    if (peft_cfg.kind == Kind::FFT) {
        r.trainable = r.total;
        r.trainable_with_decoder = r.total;
    } else {
        r.trainable = r.adapter;
        r.trainable_with_decoder = r.adapter + r.decoder;
    }
    r.percent = 100.0 * static_cast<double>(r.trainable) / static_cast<double>(r.total);
    r.percent_with_decoder = 100.0 * static_cast<double>(r.trainable_with_decoder) / static_cast<double>(r.total);
    return r;
}

AuditReport audit(std::string_view preset_name, const PEFTConfig& peft_cfg) {
    return audit(vit::preset(preset_name), peft_cfg);
}

std::int64_t count_params(const ParamStore& params, CountWhich which) {
    return which == CountWhich::Total ? params.count_all() : params.count_trainable();
}

std::string format_count(std::int64_t value) {
    auto digits = std::to_string(value < 0 ? -value : value);
    std::string out;
    const auto n = digits.size();
    for (std::size_t i = 0; i < n; ++i) {
        out += digits[i];
        if ((n - i - 1) % 3 == 0 && i + 1 < n) out += ',';
    }
    return value < 0 ? "-" + out : out;
}

std::string format_percent(double percent) {
    char buf[32];
    if (percent != 0.0 && percent < 0.01) {
        std::snprintf(buf, sizeof(buf), "%.3f%%", percent);
    } else {
        std::snprintf(buf, sizeof(buf), "%.2f%%", percent);
    }
    return buf;
}

std::string format_short(std::int64_t value) {
    char buf[32];
    const double v = static_cast<double>(value);
    if (value >= 1'000'000) {
        std::snprintf(buf, sizeof(buf), "%.2f M", v / 1e6);
    } else if (value >= 1'000) {
        std::snprintf(buf, sizeof(buf), "%.2f K", v / 1e3);
    } else {
        std::snprintf(buf, sizeof(buf), "%lld", static_cast<long long>(value));
    }
    return buf;
}

std::string format_audit_table(const std::vector<AuditReport>& reports) {
    std::ostringstream os;
    char line[256];
    std::snprintf(line, sizeof(line), "%-10s %-8s %14s %26s %26s\n", "preset", "method", "total", "trainable",
                  "trainable+decoder");
    os << line;
    for (const auto& r : reports) {
        const auto trainable = format_count(r.trainable) + " (" + format_percent(r.percent) + ")";
        const auto with_dec =
            format_count(r.trainable_with_decoder) + " (" + format_percent(r.percent_with_decoder) + ")";
        std::snprintf(line, sizeof(line), "%-10s %-8s %14s %26s %26s\n", r.preset.c_str(), r.method.c_str(),
                      format_count(r.total).c_str(), trainable.c_str(), with_dec.c_str());
        os << line;
    }
    return os.str();
}

std::string format_audit_rows(const std::vector<AuditReport>& reports) {
    std::ostringstream os;
    os << "name,total,trainable,percent,trainable_with_decoder,percent_with_decoder\n";
    char buf[64];
    for (const auto& r : reports) {
        os << r.preset << '/' << r.method << ',' << r.total << ',' << r.trainable << ',';
        std::snprintf(buf, sizeof(buf), "%.6f", r.percent);
        os << buf << ',' << r.trainable_with_decoder << ',';
        std::snprintf(buf, sizeof(buf), "%.6f", r.percent_with_decoder);
        os << buf << '\n';
    }
    return os.str();
}

}  // namespace tape::peft
