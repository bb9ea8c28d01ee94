#pragma once

// Segmentation quality and probabilistic calibration metrics: per-class
// Dice overlap, average symmetric surface distance, expected calibration
// error over equal-width confidence bins, Brier score, negative
// log-likelihood, and the rank correlation used by failure analyses.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "coldseg/tensor.hpp"

namespace coldseg {

// Dice overlap of one class between a prediction and the reference.
// Both-empty counts as a perfect score.
inline double dice_binary(const LabelMap& pred, const LabelMap& ref, int cls) {
    if (pred.shape != ref.shape) throw std::invalid_argument("dice_binary: shape mismatch");
    long inter = 0, a = 0, b = 0;
    for (std::size_t i = 0; i < pred.v.size(); ++i) {
        const bool pa = pred.v[i] == cls, pb = ref.v[i] == cls;
        a += pa;
        b += pb;
        inter += pa && pb;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

// Mean Dice over classes 1..C-1 (background excluded).
inline double mean_foreground_dice(const LabelMap& pred, const LabelMap& ref, int classes) {
    if (classes < 2) throw std::invalid_argument("mean_foreground_dice: need at least two classes");
    double acc = 0.0;
    for (int c = 1; c < classes; ++c) acc += dice_binary(pred, ref, c);
    return acc / static_cast<double>(classes - 1);
}

struct AssdResult {
    bool defined = false;  // false when either mask is empty
    double value = 0.0;
};

namespace detail {

// Border voxels of a binary mask: mask voxels with at least one
// 4-neighbor outside the mask (image boundary counts as outside).
inline std::vector<std::pair<int, int>> border_voxels(const LabelMap& mask, int cls) {
    const int h = mask.dim(0), w = mask.dim(1);
    std::vector<std::pair<int, int>> out;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (mask.at(y, x) != cls) continue;
            const bool edge = y == 0 || y == h - 1 || x == 0 || x == w - 1 ||
                              mask.at(y - 1, x) != cls || mask.at(y + 1, x) != cls ||
                              mask.at(y, x - 1) != cls || mask.at(y, x + 1) != cls;
            if (edge) out.emplace_back(y, x);
        }
    return out;
}

inline double mean_min_distance(const std::vector<std::pair<int, int>>& from,
                                const std::vector<std::pair<int, int>>& to) {
    double acc = 0.0;
    for (const auto& [fy, fx] : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& [ty, tx] : to) {
            const double dy = fy - ty, dx = fx - tx;
            best = std::min(best, dy * dy + dx * dx);
        }
        acc += std::sqrt(best);
    }
    return acc / static_cast<double>(from.size());
}

}  // namespace detail

// Average symmetric surface distance between the class-cls regions of two
// label maps: the mean of the two directed mean border-to-border
// distances. Undefined when either region is empty.
inline AssdResult assd(const LabelMap& pred, const LabelMap& ref, int cls) {
    if (pred.shape != ref.shape) throw std::invalid_argument("assd: shape mismatch");
    if (pred.rank() != 2) throw std::invalid_argument("assd expects [H,W] labels");
    const auto bp = detail::border_voxels(pred, cls);
    const auto br = detail::border_voxels(ref, cls);
    if (bp.empty() || br.empty()) return {};
    return {true, 0.5 * (detail::mean_min_distance(bp, br) + detail::mean_min_distance(br, bp))};
}

struct CalibrationBin {
    double lo = 0.0, hi = 0.0;  // confidence interval (lo, hi]
    long count = 0;
    double conf_sum = 0.0;
    double acc_sum = 0.0;
};

struct CalibrationReport {
    std::vector<CalibrationBin> bins;
    double ece = 0.0;
    double brier = 0.0;
    double nll = 0.0;
    long n = 0;
};

// Streams (probability vector, true class) pairs into a calibration
// report. Confidence is the max probability; a prediction is accurate when
// its argmax matches the true class. Bins are right-closed equal-width
// intervals of [0, 1].
class CalibrationAccumulator {
  public:
    explicit CalibrationAccumulator(int classes, int bins = 10, double floor = 1e-12)
        : classes_(classes), floor_(floor), bins_(static_cast<std::size_t>(bins)) {
        if (classes < 2) throw std::invalid_argument("calibration: need at least two classes");
        if (bins < 1) throw std::invalid_argument("calibration: need at least one bin");
        for (int b = 0; b < bins; ++b) {
            bins_[static_cast<std::size_t>(b)].lo = static_cast<double>(b) / bins;
            bins_[static_cast<std::size_t>(b)].hi = static_cast<double>(b + 1) / bins;
        }
    }

    void add(std::span<const double> probs, int true_class) {
        if (static_cast<int>(probs.size()) != classes_) throw std::invalid_argument("calibration: class count mismatch");
        if (true_class < 0 || true_class >= classes_) throw std::invalid_argument("calibration: label out of range");
        int arg = 0;
        double conf = probs[0];
        for (int c = 1; c < classes_; ++c)
            if (probs[static_cast<std::size_t>(c)] > conf) {
                conf = probs[static_cast<std::size_t>(c)];
                arg = c;
            }
        const int nb = static_cast<int>(bins_.size());
        // Right-closed bins: conf in ((b)/B, (b+1)/B] maps to bin b.
        int b = static_cast<int>(std::ceil(conf * nb)) - 1;
        b = std::clamp(b, 0, nb - 1);
        CalibrationBin& bin = bins_[static_cast<std::size_t>(b)];
        bin.count++;
        bin.conf_sum += conf;
        bin.acc_sum += arg == true_class ? 1.0 : 0.0;

        double sq = 0.0;
        for (int c = 0; c < classes_; ++c) {
            const double y = c == true_class ? 1.0 : 0.0;
            const double d = probs[static_cast<std::size_t>(c)] - y;
            sq += d * d;
        }
        brier_sum_ += sq;
        nll_sum_ -= std::log(std::max(probs[static_cast<std::size_t>(true_class)], floor_));
        n_++;
    }

    // Convenience: every pixel of a probability map against its label.
    template <typename S>
    void add_map(const Tensor<S>& probs, const LabelMap& label) {
        if (probs.rank() != 3) throw std::invalid_argument("calibration: expects [C,H,W]");
        const int c = probs.dim(0), h = probs.dim(1), w = probs.dim(2);
        if (label.dim(0) != h || label.dim(1) != w) throw std::invalid_argument("calibration: label shape mismatch");
        std::vector<double> p(static_cast<std::size_t>(c));
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                for (int ci = 0; ci < c; ++ci) p[static_cast<std::size_t>(ci)] = probs.at(ci, y, x);
                add(p, label.at(y, x));
            }
    }

    CalibrationReport report() const {
        CalibrationReport out;
        out.bins = bins_;
        out.n = n_;
        if (n_ == 0) return out;
        for (const CalibrationBin& b : bins_) {
            if (b.count == 0) continue;
            const double gap = std::abs(b.acc_sum / b.count - b.conf_sum / b.count);
            out.ece += gap * static_cast<double>(b.count) / static_cast<double>(n_);
        }
        out.brier = brier_sum_ / static_cast<double>(n_);
        out.nll = nll_sum_ / static_cast<double>(n_);
        return out;
    }

  private:
    int classes_;
    double floor_;
    std::vector<CalibrationBin> bins_;
    double brier_sum_ = 0.0;
    double nll_sum_ = 0.0;
    long n_ = 0;
};

struct RocPoint {
    double threshold = 0.0;
    double fpr = 0.0;
    double tpr = 0.0;
};

struct RocResult {
    double auc = 0.0;
    std::vector<RocPoint> points;
};

// ROC for detecting positives by LOW score: an instance is predicted
// positive when its score is <= threshold. Sweeping the threshold upward
// traces the curve from (0,0) to (1,1); the area equals the probability
// that a random positive scores below a random negative (ties half).
inline RocResult roc_low_score(std::span<const double> scores, std::span<const uint8_t> labels) {
    if (scores.size() != labels.size()) throw std::invalid_argument("roc: size mismatch");
    long pos = 0, neg = 0;
    for (uint8_t l : labels) (l ? pos : neg)++;
    if (pos == 0 || neg == 0) throw std::invalid_argument("roc: need both classes");

    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    RocResult out;
    out.points.push_back({-std::numeric_limits<double>::infinity(), 0.0, 0.0});
    long tp = 0, fp = 0;
    double auc2 = 0.0;  // trapezoid accumulator, doubled
    double prev_fpr = 0.0, prev_tpr = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        const double s = scores[order[i]];
        // Consume the whole tie group at this threshold.
        while (i < order.size() && scores[order[i]] == s) {
            (labels[order[i]] ? tp : fp)++;
            ++i;
        }
        const double fpr = static_cast<double>(fp) / static_cast<double>(neg);
        const double tpr = static_cast<double>(tp) / static_cast<double>(pos);
        auc2 += (fpr - prev_fpr) * (tpr + prev_tpr);
        out.points.push_back({s, fpr, tpr});
        prev_fpr = fpr;
        prev_tpr = tpr;
    }
    out.auc = 0.5 * auc2;
    return out;
}

// Spearman rank correlation with average ranks for ties.
inline double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("spearman: size mismatch");
    if (a.size() < 2) throw std::invalid_argument("spearman: need at least two points");
    auto ranks = [](std::span<const double> v) {
        std::vector<std::size_t> order(v.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
        std::vector<double> r(v.size());
        std::size_t i = 0;
        while (i < order.size()) {
            std::size_t j = i;
            while (j < order.size() && v[order[j]] == v[order[i]]) ++j;
            const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j - 1)) + 1.0;
            for (std::size_t k = i; k < j; ++k) r[order[k]] = avg;
            i = j;
        }
        return r;
    };
    const std::vector<double> ra = ranks(a), rb = ranks(b);
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= static_cast<double>(ra.size());
    mb /= static_cast<double>(rb.size());
    double num = 0.0, da = 0.0, db = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    if (da == 0.0 || db == 0.0) throw std::invalid_argument("spearman: a sequence is constant");
    return num / std::sqrt(da * db);
}

}  // namespace coldseg
