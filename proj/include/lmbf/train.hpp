#pragma once

// Training: Adam with bias correction, the patch-based training loop
// (per-epoch iteration cap, seeded shuffling, per-epoch checkpoints, history),
// and full-image evaluation by tiling, predicting, stitching and thresholding.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "lmbf/checkpoint.hpp"
#include "lmbf/metrics.hpp"
#include "lmbf/net.hpp"
#include "lmbf/patch.hpp"

namespace lmbf {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename T>
struct AdamState {
    struct Slot {
        std::string name;
        Tensor<T> param;
        std::vector<T> m, v;
    };
    std::vector<Slot> slots;
    int64_t t = 0;
    T lr = T(1e-3);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
};

template <typename T>
inline AdamState<T> make_adam(std::vector<std::pair<std::string, Tensor<T>>> params, T lr) {
    AdamState<T> st;
    st.lr = lr;
    for (auto& [name, p] : params) {
        typename AdamState<T>::Slot s;
        s.name = name;
        s.param = p;
        s.m.assign(static_cast<size_t>(p.numel()), T(0));
        s.v.assign(static_cast<size_t>(p.numel()), T(0));
        st.slots.push_back(std::move(s));
    }
    return st;
}

template <typename T>
inline AdamState<T> make_adam(LmbfNet<T>& model, T lr) {
    std::vector<std::pair<std::string, Tensor<T>>> params;
    visit_params(model, [&params](const std::string& n, Tensor<T>& p) { params.emplace_back(n, p); });
    return make_adam(std::move(params), lr);
}

// One bias-corrected update from the gradients currently held by the
// parameters: m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2;
// p <- p - lr * m-hat / (sqrt(v-hat) + eps).
template <typename T>
inline void adam_step(AdamState<T>& st) {
    for (auto& s : st.slots)
        if (!s.param.has_grad())
            throw contract_error("adam_step: parameter '" + s.name + "' has no gradient");
    st.t += 1;
    const T bc1 = T(1) - static_cast<T>(std::pow(double(st.beta1), double(st.t)));
    const T bc2 = T(1) - static_cast<T>(std::pow(double(st.beta2), double(st.t)));
    for (auto& s : st.slots) {
        auto& p = s.param.data();
        const auto& g = s.param.grad();
        for (size_t i = 0; i < p.size(); ++i) {
            s.m[i] = st.beta1 * s.m[i] + (T(1) - st.beta1) * g[i];
            s.v[i] = st.beta2 * s.v[i] + (T(1) - st.beta2) * g[i] * g[i];
            const T mhat = s.m[i] / bc1;
            const T vhat = s.v[i] / bc2;
            p[i] -= st.lr * mhat / (static_cast<T>(std::sqrt(double(vhat))) + st.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Train configuration
// ---------------------------------------------------------------------------

enum class TrainTask { vessels, lesion };

inline std::string to_string(TrainTask t) { return t == TrainTask::vessels ? "vessels" : "lesion"; }

inline TrainTask parse_task(const std::string& s) {
    if (s == "vessels") return TrainTask::vessels;
    if (s == "lesion") return TrainTask::lesion;
    throw config_error("unknown task '" + s + "' (want vessels|lesion)");
}

inline int64_t default_batch_size(TrainTask t) { return t == TrainTask::vessels ? 16 : 4; }

struct TrainConfig {
    double lr = 1e-3;
    int64_t epochs = 150;
    int64_t iters_per_epoch = 250;
    int64_t batch_size = 0; // 0: derive from task (16 vessels, 4 lesion)
    uint64_t seed = 0;
    TrainTask task = TrainTask::vessels;
    std::string checkpoint_dir; // empty: no checkpoints written

    int64_t resolved_batch_size() const { return batch_size > 0 ? batch_size : default_batch_size(task); }
};

inline void validate(const TrainConfig& c) {
    // lr 0 is allowed: it makes the parameter vector a fixed point of train.
    if (c.lr < 0) throw config_error("train: lr must be non-negative");
    if (c.epochs < 1) throw config_error("train: epochs must be positive");
    if (c.iters_per_epoch < 1) throw config_error("train: iters_per_epoch must be positive");
    if (c.resolved_batch_size() < 1) throw config_error("train: batch size must be positive");
}

struct EpochRecord {
    int64_t epoch = 0; // 1-based
    double loss = 0.0; // mean dice loss over the epoch's steps
    ScalarMetrics metrics;
    std::optional<double> auc;
};

// History CSV: epoch,loss,sn,sp,acc,f1,auc; undefined metrics print "-".
inline void write_history_csv(std::ostream& os, const std::vector<EpochRecord>& history) {
    auto cell = [](const std::optional<double>& v) {
        if (!v) return std::string("-");
        std::ostringstream ss;
        ss.precision(9);
        ss << *v;
        return ss.str();
    };
    os << "epoch,loss,sn,sp,acc,f1,auc\n";
    for (const auto& e : history) {
        std::ostringstream loss;
        loss.precision(9);
        loss << e.loss;
        os << e.epoch << ',' << loss.str() << ',' << cell(e.metrics.sn) << ',' << cell(e.metrics.sp) << ','
           << cell(e.metrics.acc) << ',' << cell(e.metrics.f1) << ',' << cell(e.auc) << '\n';
    }
}

inline void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw parse_error(path.string() + ": cannot open for writing");
    write_history_csv(os, history);
    if (!os) throw parse_error(path.string() + ": write failed");
}

// ---------------------------------------------------------------------------
// Batch assembly and thresholding
// ---------------------------------------------------------------------------

namespace detail {

// Stacks selected patches into x [B,3,P,P] and one-hot targets [B,2,P,P]
// (channel 0 background, channel 1 foreground).
template <typename T>
inline std::pair<Tensor<T>, Tensor<T>> make_batch(const std::vector<PatchRecord<T>>& patches,
                                                  const std::vector<size_t>& order, size_t first, int64_t B) {
    const auto& p0 = patches[order[first]];
    const int64_t C = p0.image_patch.dim(0), P = p0.image_patch.dim(1), Q = p0.image_patch.dim(2);
    Tensor<T> x = Tensor<T>::zeros({B, C, P, Q});
    Tensor<T> g = Tensor<T>::zeros({B, 2, P, Q});
    const int64_t hw = P * Q;
    for (int64_t b = 0; b < B; ++b) {
        const auto& pr = patches[order[first + static_cast<size_t>(b)]];
        if (pr.image_patch.shape() != p0.image_patch.shape() || pr.mask_patch.dim(1) != P ||
            pr.mask_patch.dim(2) != Q)
            throw contract_error("train: patches in one batch must share a shape");
        std::copy_n(pr.image_patch.ptr(), C * hw, x.ptr() + b * C * hw);
        const T* m = pr.mask_patch.ptr();
        T* bg = g.ptr() + (b * 2 + 0) * hw;
        T* fg = g.ptr() + (b * 2 + 1) * hw;
        for (int64_t i = 0; i < hw; ++i) {
            fg[i] = m[i];
            bg[i] = T(1) - m[i];
        }
    }
    return {std::move(x), std::move(g)};
}

} // namespace detail

// probs [1,H,W] -> binary mask [1,H,W], foreground where p > 0.5.
template <typename T>
inline Tensor<T> binarize(const Tensor<T>& probs, T threshold = T(0.5)) {
    Tensor<T> out = Tensor<T>::zeros(probs.shape());
    for (int64_t i = 0; i < probs.numel(); ++i) out.ptr()[i] = probs.ptr()[i] > threshold ? T(1) : T(0);
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation: tile -> predict -> stitch -> threshold -> metrics.
// ---------------------------------------------------------------------------

struct EvalImageResult {
    std::string id;
    ConfusionCounts counts;
    ScalarMetrics metrics;
    std::optional<double> auc;
};

struct EvalReport {
    std::vector<EvalImageResult> per_image;
    ConfusionCounts pooled;
    ScalarMetrics pooled_metrics;
    std::optional<double> pooled_auc; // pixel-pooled across all images
};

// predict: const Tensor<T>& image_patch [3,P,P] -> foreground probability map
// [1,P,P]. The model-backed overload below supplies the network as predictor.
template <typename T, typename Predictor>
inline EvalReport evaluate_with(Predictor&& predict, const std::vector<ImageRecord<T>>& records,
                                int64_t patch) {
    if (records.empty()) throw contract_error("evaluate: no records");
    EvalReport report;
    std::vector<double> pooled_scores;
    std::vector<uint8_t> pooled_labels;
    for (const auto& rec : records) {
        if (!rec.mask.defined() || rec.mask.numel() == 0)
            throw contract_error("evaluate: record '" + rec.id + "' is missing its mask");
        std::vector<PatchRecord<T>> tiles = tile(rec, patch);
        int64_t rows = 0, cols = 0;
        for (const auto& t : tiles) {
            rows = std::max(rows, t.grid_row + 1);
            cols = std::max(cols, t.grid_col + 1);
        }
        std::vector<Tensor<T>> prob_patches;
        prob_patches.reserve(tiles.size());
        for (const auto& t : tiles) {
            Tensor<T> p = predict(t.image_patch);
            if (p.shape() != (Shape{1, patch, patch}))
                throw contract_error("evaluate: predictor returned " + shape_str(p.shape()) + ", want " +
                                     shape_str({1, patch, patch}));
            prob_patches.push_back(std::move(p));
        }
        Tensor<T> probs = stitch(prob_patches, rows, cols);
        Tensor<T> pred = binarize(probs);

        EvalImageResult r;
        r.id = rec.id;
        r.counts = confusion(pred, rec.mask);
        r.metrics = scalar_metrics(r.counts);
        std::vector<double> scores(probs.data().begin(), probs.data().end());
        std::vector<uint8_t> labels(rec.mask.numel());
        for (int64_t i = 0; i < rec.mask.numel(); ++i)
            labels[static_cast<size_t>(i)] = rec.mask.ptr()[i] > T(0.5) ? 1 : 0;
        r.auc = auc(scores, labels);
        report.pooled += r.counts;
        pooled_scores.insert(pooled_scores.end(), scores.begin(), scores.end());
        pooled_labels.insert(pooled_labels.end(), labels.begin(), labels.end());
        report.per_image.push_back(std::move(r));
    }
    report.pooled_metrics = scalar_metrics(report.pooled);
    report.pooled_auc = auc(pooled_scores, pooled_labels);
    return report;
}

// Runs the network in eval mode (frozen batch-norm statistics, no taping).
template <typename T>
inline EvalReport evaluate(LmbfNet<T>& model, const std::vector<ImageRecord<T>>& records) {
    set_training(model, false);
    NoGradGuard ng;
    auto predict = [&model](const Tensor<T>& img) {
        const int64_t C = img.dim(0), P = img.dim(1), Q = img.dim(2);
        Tensor<T> batch = Tensor<T>::from_data({1, C, P, Q}, img.data());
        Tensor<T> out = forward(model, batch);
        Tensor<T> fg = detail::slice_channels(out, 1, 2); // [1,1,P,Q]
        return Tensor<T>::from_data({1, P, Q}, fg.data());
    };
    return evaluate_with<T>(predict, records, model.cfg.patch_size);
}

// ---------------------------------------------------------------------------
// The training loop
// ---------------------------------------------------------------------------

namespace detail {

// Accumulates hard-threshold confusion counts and score/label pairs from a
// training batch's predictions, so per-epoch training metrics come for free
// from the forward passes the optimizer already ran.
template <typename T>
inline void accumulate_batch_metrics(const Tensor<T>& probs, const Tensor<T>& gt_onehot,
                                     ConfusionCounts& counts, std::vector<double>& scores,
                                     std::vector<uint8_t>& labels) {
    const int64_t B = probs.dim(0), hw = probs.dim(2) * probs.dim(3), C = probs.dim(1);
    for (int64_t b = 0; b < B; ++b) {
        const T* fg = probs.ptr() + (b * C + 1) * hw;
        const T* g = gt_onehot.ptr() + (b * 2 + 1) * hw;
        for (int64_t i = 0; i < hw; ++i) {
            const bool p = fg[i] > T(0.5), t = g[i] > T(0.5);
            if (p && t) counts.tp++;
            else if (p) counts.fp++;
            else if (t) counts.fn++;
            else counts.tn++;
            scores.push_back(double(fg[i]));
            labels.push_back(t ? 1 : 0);
        }
    }
}

} // namespace detail

// Runs cfg.epochs x min(cfg.iters_per_epoch, available full batches) Adam
// steps on the macro dice loss. Batch order is shuffled without replacement
// each epoch from a generator seeded once with cfg.seed. A checkpoint is
// written per epoch when cfg.checkpoint_dir is set. Aborts with
// divergence_error on a non-finite loss.
template <typename T>
inline std::vector<EpochRecord> train(LmbfNet<T>& model, const std::vector<PatchRecord<T>>& patches,
                                      const TrainConfig& cfg) {
    validate(cfg);
    const int64_t B = cfg.resolved_batch_size();
    const int64_t batches_available = static_cast<int64_t>(patches.size()) / B;
    if (batches_available < 1)
        throw contract_error("train: " + std::to_string(patches.size()) + " patches cannot fill one batch of " +
                             std::to_string(B));
    const int64_t steps = std::min(cfg.iters_per_epoch, batches_available);

    set_requires_grad(model, true);
    set_training(model, true);
    AdamState<T> adam = make_adam(model, static_cast<T>(cfg.lr));
    auto& tape = Graph<T>::current();

    std::mt19937_64 rng(cfg.seed);
    std::vector<size_t> order(patches.size());
    std::iota(order.begin(), order.end(), size_t{0});

    std::vector<EpochRecord> history;
    history.reserve(static_cast<size_t>(cfg.epochs));
    for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        ConfusionCounts epoch_counts;
        std::vector<double> epoch_scores;
        std::vector<uint8_t> epoch_labels;
        for (int64_t step = 0; step < steps; ++step) {
            auto [x, gt] = detail::make_batch(patches, order, static_cast<size_t>(step * B), B);
            visit_params(model, [](const std::string&, Tensor<T>& p) {
                p.grad();      // ensure the buffer exists even off the active path
                p.zero_grad();
            });
            tape.clear();
            Tensor<T> probs = forward(model, x);
            Tensor<T> loss = dice_loss(probs, gt);
            const double lv = double(loss.data()[0]);
            if (!std::isfinite(lv))
                throw divergence_error("training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                                       " iteration " + std::to_string(step + 1));
            tape.backward(loss);
            tape.clear();
            adam_step(adam);
            loss_sum += lv;
            detail::accumulate_batch_metrics(probs, gt, epoch_counts, epoch_scores, epoch_labels);
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.loss = loss_sum / double(steps);
        rec.metrics = scalar_metrics(epoch_counts);
        rec.auc = auc(epoch_scores, epoch_labels);
        if (!cfg.checkpoint_dir.empty()) {
            std::ostringstream name;
            name << "epoch_" << std::setw(4) << std::setfill('0') << epoch;
            save_checkpoint(model, std::filesystem::path(cfg.checkpoint_dir) / name.str());
        }
        history.push_back(rec);
    }
    set_training(model, false);
    return history;
}

} // namespace lmbf
