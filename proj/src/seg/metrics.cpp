// SPDX-License-Identifier: Apache-2.0

#include "tape/seg/metrics.hpp"

#include <string>

#include "tape/numeric/errors.hpp"

namespace tape::seg {

namespace {

void fill_means(SegMetrics& m) {
    const auto c = m.dice.size();
    if (c < 2) {
        m.mdice = m.dice.empty() ? 0.0 : m.dice[0];
        m.miou = m.iou.empty() ? 0.0 : m.iou[0];
        return;
    }
    double d = 0.0, i = 0.0;
    for (std::size_t k = 1; k < c; ++k) {
        d += m.dice[k];
        i += m.iou[k];
    }
    m.mdice = d / static_cast<double>(c - 1);
    m.miou = i / static_cast<double>(c - 1);
}

}  // namespace

SegMetrics compute_metrics(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, int classes) {
    if (classes < 1) throw ConfigError("compute_metrics: classes must be positive");
    if (pred.size() != gt.size())
        throw ShapeError("compute_metrics: prediction has " + std::to_string(pred.size()) + " pixels, truth " +
                         std::to_string(gt.size()));
    std::vector<std::int64_t> inter(static_cast<std::size_t>(classes), 0);
    std::vector<std::int64_t> n_pred(static_cast<std::size_t>(classes), 0);
    std::vector<std::int64_t> n_gt(static_cast<std::size_t>(classes), 0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const auto p = pred[i];
        const auto g = gt[i];
        if (p >= classes || g >= classes)
            throw ConfigError("compute_metrics: label " + std::to_string(p >= classes ? p : g) + " out of range [0, " +
                              std::to_string(classes) + ")");
        ++n_pred[p];
        ++n_gt[g];
        if (p == g) ++inter[p];
    }
    SegMetrics m;
    for (int c = 0; c < classes; ++c) {
        const auto in = static_cast<double>(inter[static_cast<std::size_t>(c)]);
        const auto sp = static_cast<double>(n_pred[static_cast<std::size_t>(c)]);
        const auto sg = static_cast<double>(n_gt[static_cast<std::size_t>(c)]);
        if (sp + sg == 0.0) {
            m.dice.push_back(1.0);
            m.iou.push_back(1.0);
        } else {
            m.dice.push_back(2.0 * in / (sp + sg));
            m.iou.push_back(in / (sp + sg - in));
        }
    }
    fill_means(m);
    return m;
}

std::vector<std::uint8_t> argmax_labels(const Tensor& logits) {
    if (logits.rank() != 3) throw ShapeError("argmax_labels: expected [C x H x W], got " + shape_str(logits.shape()));
    const auto c = logits.dim(0);
    if (c > 256) throw ConfigError("argmax_labels: more than 256 classes");
    const auto hw = static_cast<std::size_t>(logits.dim(1) * logits.dim(2));
    const auto v = logits.data();
    std::vector<std::uint8_t> out(hw, 0);
    for (std::size_t i = 0; i < hw; ++i) {
        float best = v[i];
        for (std::int64_t k = 1; k < c; ++k) {
            const float x = v[static_cast<std::size_t>(k) * hw + i];
            if (x > best) {
                best = x;
                out[i] = static_cast<std::uint8_t>(k);
            }
        }
    }
    return out;
}

MetricAccumulator::MetricAccumulator(int classes)
    : classes_(classes),
      dice_sum_(static_cast<std::size_t>(classes), 0.0),
      iou_sum_(static_cast<std::size_t>(classes), 0.0) {}

void MetricAccumulator::add(const SegMetrics& m) {
    if (static_cast<int>(m.dice.size()) != classes_) throw ShapeError("MetricAccumulator: class count mismatch");
    for (int c = 0; c < classes_; ++c) {
        dice_sum_[static_cast<std::size_t>(c)] += m.dice[static_cast<std::size_t>(c)];
        iou_sum_[static_cast<std::size_t>(c)] += m.iou[static_cast<std::size_t>(c)];
    }
    ++count_;
}

SegMetrics MetricAccumulator::mean() const {
    if (count_ == 0) throw ConfigError("MetricAccumulator: no images");
    SegMetrics m;
    for (int c = 0; c < classes_; ++c) {
        m.dice.push_back(dice_sum_[static_cast<std::size_t>(c)] / static_cast<double>(count_));
        m.iou.push_back(iou_sum_[static_cast<std::size_t>(c)] / static_cast<double>(count_));
    }
    fill_means(m);
    return m;
}

}  // namespace tape::seg
