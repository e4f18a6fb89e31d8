#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dualseg/image.hpp"
#include "dualseg/ops.hpp"

namespace dualseg {

// Pixel confusion counts between a predicted and a reference mask.
struct ConfusionCounts {
    int64_t tp = 0, fp = 0, fn = 0, tn = 0;
    int64_t total() const { return tp + fp + fn + tn; }
};

struct LossValue {
    double bce = 0.0;
    double iou_loss = 0.0;
    double total = 0.0;
};

template <typename T>
Tensor<T> bce_loss(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& gt) {
    return ops::bce_mean(tape, pred, gt);
}

template <typename T>
Tensor<T> soft_iou_loss(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& gt) {
    return ops::soft_iou(tape, pred, gt);
}

// Sum of the two components; the scalar tensor feeds backward(), the
// LossValue carries the logged numbers (total is the same float sum).
template <typename T>
struct TotalLoss {
    Tensor<T> tensor;
    LossValue value;
};

template <typename T>
TotalLoss<T> total_loss(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& gt) {
    Tensor<T> bce = bce_loss(tape, pred, gt);
    Tensor<T> iou = soft_iou_loss(tape, pred, gt);
    Tensor<T> tot = ops::add(tape, bce, iou);
    return {tot, LossValue{static_cast<double>(bce.item()), static_cast<double>(iou.item()),
                           static_cast<double>(tot.item())}};
}

inline ConfusionCounts confusion_counts(const Image8& pred_mask, const Image8& gt_mask) {
    if (pred_mask.w != gt_mask.w || pred_mask.h != gt_mask.h || pred_mask.c != 1 || gt_mask.c != 1)
        throw ShapeError("confusion_counts: mask dims mismatch " + pred_mask.dims_str() + " vs " +
                         gt_mask.dims_str());
    ConfusionCounts cc;
    const size_t n = pred_mask.px.size();
    for (size_t i = 0; i < n; ++i) {
        const bool p = pred_mask.px[i] != 0;
        const bool g = gt_mask.px[i] != 0;
        if (p && g)
            ++cc.tp;
        else if (p && !g)
            ++cc.fp;
        else if (!p && g)
            ++cc.fn;
        else
            ++cc.tn;
    }
    return cc;
}

// TP / (TP + FP + FN). Two empty masks agree that there is nothing to
// segment, so that case scores 1.
inline double iou_score(const Image8& pred_mask, const Image8& gt_mask) {
    const ConfusionCounts cc = confusion_counts(pred_mask, gt_mask);
    const int64_t denom = cc.tp + cc.fp + cc.fn;
    return denom == 0 ? 1.0 : static_cast<double>(cc.tp) / static_cast<double>(denom);
}

// Median by the midpoint-of-two rule; IQR = Q3 - Q1 with linearly
// interpolated quantiles (positions (n-1)*q).
inline std::pair<double, double> median_iqr(std::vector<double> values) {
    if (values.empty()) throw ValueError("median_iqr: empty list");
    std::sort(values.begin(), values.end());
    const size_t n = values.size();
    auto quantile = [&](double q) {
        const double pos = q * static_cast<double>(n - 1);
        const size_t lo = static_cast<size_t>(pos);
        const size_t hi = std::min(lo + 1, n - 1);
        const double frac = pos - static_cast<double>(lo);
        return values[lo] + (values[hi] - values[lo]) * frac;
    };
    const double median = n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
    return {median, quantile(0.75) - quantile(0.25)};
}

}  // namespace dualseg
