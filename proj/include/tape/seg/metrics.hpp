// SPDX-License-Identifier: Apache-2.0
//
// Overlap metrics. A class absent from both prediction and ground truth
// scores 1 (nothing to find, nothing wrongly found). Means skip class 0
// (background).

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tape/numeric/tensor.hpp"

namespace tape::seg {

struct SegMetrics {
    std::vector<double> dice;  // per class
    std::vector<double> iou;   // per class
    double mdice = 0.0;
    double miou = 0.0;
};

/// Throws ConfigError for labels >= classes, ShapeError for mismatched sizes.
SegMetrics compute_metrics(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, int classes);

/// Per-pixel argmax over the class axis of logits [C x H x W]; ties pick the lower class.
std::vector<std::uint8_t> argmax_labels(const Tensor& logits);

/// Running per-class means over images.
class MetricAccumulator {
public:
    explicit MetricAccumulator(int classes);
    void add(const SegMetrics& m);
    std::int64_t count() const { return count_; }
    /// Per-class means and their foreground means; throws when empty.
    SegMetrics mean() const;

private:
    int classes_;
    std::int64_t count_ = 0;
    std::vector<double> dice_sum_;
    std::vector<double> iou_sum_;
};

}  // namespace tape::seg
