#pragma once

// Segmentation metrics: confusion counts, sensitivity/specificity/accuracy/F1,
// ROC + AUC (Mann-Whitney via average ranks), and the smoothed macro Dice
// loss used for training. Metrics that are 0/0 are reported as undefined
// (std::nullopt), never silently coerced to 0 or 1.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "lmbf/tensor.hpp"

namespace lmbf {

// ---------------------------------------------------------------------------
// Confusion counts and scalar metrics
// ---------------------------------------------------------------------------

struct ConfusionCounts {
    int64_t tp = 0;
    int64_t tn = 0;
    int64_t fp = 0;
    int64_t fn = 0;

    int64_t total() const { return tp + tn + fp + fn; }

    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        tn += o.tn;
        fp += o.fp;
        fn += o.fn;
        return *this;
    }
};

template <typename T>
inline ConfusionCounts confusion(const Tensor<T>& pred, const Tensor<T>& gt) {
    if (pred.shape() != gt.shape())
        throw contract_error("confusion: shape mismatch " + shape_str(pred.shape()) + " vs " +
                             shape_str(gt.shape()));
    ConfusionCounts c;
    const T* p = pred.ptr();
    const T* g = gt.ptr();
    const int64_t n = pred.numel();
    for (int64_t i = 0; i < n; ++i) {
        const bool pb = p[i] == T(1);
        const bool gb = g[i] == T(1);
        if (!pb && p[i] != T(0))
            throw contract_error("confusion: non-binary prediction value at element " + std::to_string(i));
        if (!gb && g[i] != T(0))
            throw contract_error("confusion: non-binary ground-truth value at element " + std::to_string(i));
        if (pb && gb) ++c.tp;
        else if (pb && !gb) ++c.fp;
        else if (!pb && gb) ++c.fn;
        else ++c.tn;
    }
    return c;
}

struct ScalarMetrics {
    std::optional<double> sn;   // tp / (tp + fn)
    std::optional<double> sp;   // tn / (tn + fp)
    std::optional<double> acc;  // (tp + tn) / total
    std::optional<double> f1;   // 2 tp / (2 tp + fp + fn)
};

inline ScalarMetrics scalar_metrics(const ConfusionCounts& c) {
    ScalarMetrics m;
    const auto ratio = [](int64_t num, int64_t den) -> std::optional<double> {
        if (den == 0) return std::nullopt;
        return static_cast<double>(num) / static_cast<double>(den);
    };
    m.sn = ratio(c.tp, c.tp + c.fn);
    m.sp = ratio(c.tn, c.tn + c.fp);
    m.acc = ratio(c.tp + c.tn, c.total());
    m.f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
    return m;
}

// ---------------------------------------------------------------------------
// AUC (Mann-Whitney) and ROC curve
// ---------------------------------------------------------------------------

// Fraction of (positive, negative) pairs ranked correctly, ties worth 1/2,
// computed in O(n log n) with average ranks. Single-class label sets have no
// ranking information: nullopt.
inline std::optional<double> auc(const std::vector<double>& scores,
                                 const std::vector<uint8_t>& labels) {
    if (scores.size() != labels.size())
        throw contract_error("auc: " + std::to_string(scores.size()) + " scores vs " +
                             std::to_string(labels.size()) + " labels");
    int64_t n1 = 0, n0 = 0;
    for (uint8_t l : labels) {
        if (l == 1) ++n1;
        else if (l == 0) ++n0;
        else throw contract_error("auc: labels must be 0 or 1");
    }
    for (double s : scores)
        if (!std::isfinite(s)) throw numeric_error("auc: non-finite score");
    if (n1 == 0 || n0 == 0) return std::nullopt;

    const size_t n = scores.size();
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j)); // 1-based
        for (size_t k = i; k < j; ++k)
            if (labels[idx[k]] == 1) rank_sum_pos += avg_rank;
        i = j;
    }
    const double u = rank_sum_pos - 0.5 * static_cast<double>(n1) * static_cast<double>(n1 + 1);
    return u / (static_cast<double>(n1) * static_cast<double>(n0));
}

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
};

struct RocCurve {
    std::vector<RocPoint> points; // from (0,0) to (1,1), monotone in both axes
    std::optional<double> auc;
};

// Threshold sweep over distinct scores, descending. Tied scores enter the
// curve together, so the trapezoid area under the points equals the
// Mann-Whitney value exactly.
inline RocCurve roc_curve(const std::vector<double>& scores, const std::vector<uint8_t>& labels) {
    RocCurve c;
    c.auc = auc(scores, labels);
    if (!c.auc) return c; // no curve without both classes

    const size_t n = scores.size();
    int64_t n1 = 0, n0 = 0;
    for (uint8_t l : labels) (l == 1 ? n1 : n0)++;
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });

    c.points.push_back({0.0, 0.0});
    int64_t tp = 0, fp = 0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
        for (size_t k = i; k < j; ++k)
            (labels[idx[k]] == 1 ? tp : fp)++;
        c.points.push_back({static_cast<double>(fp) / static_cast<double>(n0),
                            static_cast<double>(tp) / static_cast<double>(n1)});
        i = j;
    }
    return c;
}

// ---------------------------------------------------------------------------
// Dice loss: 1 - mean_c (2*sum(p_c*g_c) + eps) / (sum(p_c^2) + sum(g_c^2) + eps)
//
// The squared-denominator (soft Dice) form; smoothing eps = 1e-5; classes
// averaged with equal weight. Implemented as one fused node with an analytic
// backward rule for both arguments.
// ---------------------------------------------------------------------------

inline constexpr double kDiceEps = 1e-5;

template <typename T>
inline Tensor<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& gt_onehot) {
    if (probs.shape() != gt_onehot.shape())
        throw contract_error("dice_loss: shape mismatch " + shape_str(probs.shape()) + " vs " +
                             shape_str(gt_onehot.shape()));
    if (probs.shape().size() != 4)
        throw contract_error("dice_loss: expected NCHW input, got " + shape_str(probs.shape()));
    const int64_t N = probs.dim(0), C = probs.dim(1), HW = probs.dim(2) * probs.dim(3);
    const T eps = T(kDiceEps);

    // Per-class reductions over batch and space.
    std::vector<T> inter(C, T(0)), denom(C, T(0));
    const T* p = probs.ptr();
    const T* g = gt_onehot.ptr();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const int64_t off = (n * C + c) * HW;
            T i_acc = T(0), d_acc = T(0);
            for (int64_t k = 0; k < HW; ++k) {
                i_acc += p[off + k] * g[off + k];
                d_acc += p[off + k] * p[off + k] + g[off + k] * g[off + k];
            }
            inter[c] += i_acc;
            denom[c] += d_acc;
        }
    T mean_dice = T(0);
    for (int64_t c = 0; c < C; ++c) mean_dice += (T(2) * inter[c] + eps) / (denom[c] + eps);
    mean_dice /= T(C);
    Tensor<T> out = Tensor<T>::from_data({1}, {T(1) - mean_dice});

    detail::maybe_record<T>("dice_loss", {probs, gt_onehot}, out,
        [probs, gt_onehot, out, inter, denom, N, C, HW, eps](GradBuffers<T>& gb) {
            const T gy = gb.of(out)[0];
            const T* p = probs.ptr();
            const T* g = gt_onehot.ptr();
            for (int64_t c = 0; c < C; ++c) {
                const T d = denom[c] + eps;
                const T num = T(2) * inter[c] + eps;
                // d(dice_c)/dp_i = (2 g_i d - num * 2 p_i) / d^2, and the loss
                // carries -1/C of each class dice.
                const T f = -gy / (T(C) * d * d);
                if (probs.requires_grad()) {
                    auto& gp = gb.of(probs);
                    for (int64_t n = 0; n < N; ++n) {
                        const int64_t off = (n * C + c) * HW;
                        for (int64_t k = 0; k < HW; ++k)
                            gp[off + k] += f * (T(2) * g[off + k] * d - num * T(2) * p[off + k]);
                    }
                }
                if (gt_onehot.requires_grad()) {
                    auto& gg = gb.of(gt_onehot);
                    for (int64_t n = 0; n < N; ++n) {
                        const int64_t off = (n * C + c) * HW;
                        for (int64_t k = 0; k < HW; ++k)
                            gg[off + k] += f * (T(2) * p[off + k] * d - num * T(2) * g[off + k]);
                    }
                }
            }
        });
    return out;
}

// ---------------------------------------------------------------------------
// Metric report CSV: method,dataset,sn,sp,acc,auc,f1 as percentages with two
// decimals; undefined values print "-".
// ---------------------------------------------------------------------------

struct MetricRow {
    std::string method;
    std::string dataset;
    ScalarMetrics metrics;
    std::optional<double> auc;
};

inline void write_metric_report(std::ostream& os, const std::vector<MetricRow>& rows) {
    const auto cell = [&os](const std::optional<double>& v) {
        if (v)
            os << std::fixed << std::setprecision(2) << (*v * 100.0);
        else
            os << '-';
    };
    os << "method,dataset,sn,sp,acc,auc,f1\n";
    for (const auto& r : rows) {
        os << r.method << ',' << r.dataset << ',';
        cell(r.metrics.sn);
        os << ',';
        cell(r.metrics.sp);
        os << ',';
        cell(r.metrics.acc);
        os << ',';
        cell(r.auc);
        os << ',';
        cell(r.metrics.f1);
        os << '\n';
    }
}

} // namespace lmbf
