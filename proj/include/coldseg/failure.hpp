#pragma once

// Image-level failure detection: fold a per-class uncertainty map and the
// predicted mask into soft true-foreground / false-foreground /
// false-background masses, score each (image, class) pair with a
// Dice-shaped confidence, label true failures against the reference
// segmentation, and evaluate the detector with ROC/AUC.

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "coldseg/inference.hpp"
#include "coldseg/metrics.hpp"
#include "coldseg/tensor.hpp"

namespace coldseg {

struct SoftMasses {
    double tf = 0.0;  // sum of S_c * (1 - H_c): confident foreground
    double ff = 0.0;  // sum of S_c * H_c: uncertain foreground
    double fb = 0.0;  // sum of (1 - S_c) * H_c: uncertain background
};

// Per-class entropy map normalized to [0,1] (binary entropy over ln 2).
template <typename S>
Tensor<double> normalized_class_entropy(const Tensor<S>& probs, int cls) {
    Tensor<double> h = binary_entropy(probs, cls);
    for (double& v : h.v) v /= std::numbers::ln2;
    return h;
}

// Soft mass decomposition of a predicted binary mask under an uncertainty
// map with values in [0,1].
inline SoftMasses tf_ff_fb(const LabelMap& mask, const Tensor<double>& h) {
    if (mask.shape != h.shape) throw std::invalid_argument("tf_ff_fb: shape mismatch");
    SoftMasses m;
    for (std::size_t i = 0; i < mask.v.size(); ++i) {
        const double hi = h.v[i];
        if (hi < 0.0 || hi > 1.0 + 1e-9) throw std::invalid_argument("tf_ff_fb: entropy out of [0,1]");
        if (mask.v[i]) {
            m.tf += 1.0 - hi;
            m.ff += hi;
        } else {
            m.fb += hi;
        }
    }
    return m;
}

struct ConfidenceScore {
    double value = 0.0;
    bool degenerate = false;  // empty mask and zero entropy: no evidence at all
};

// Dice-shaped confidence: 2 TF / (2 TF + FF + FB). An empty prediction with
// zero uncertainty has no evidence either way and scores 0 with a flag.
inline ConfidenceScore confidence_score(const SoftMasses& m) {
    const double den = 2.0 * m.tf + m.ff + m.fb;
    if (den == 0.0) return {0.0, true};
    return {2.0 * m.tf / den, false};
}

inline ConfidenceScore confidence_score(const LabelMap& mask, const Tensor<double>& h) {
    return confidence_score(tf_ff_fb(mask, h));
}

struct FailurePolicy {
    double dice_thresh = 0.8;
    double assd_thresh = 2.0;  // in voxels
    bool require_both = true;  // failure needs low dice AND high surface distance
};

// True failure label from quality metrics against the reference; an
// undefined surface distance (an empty region on either side) satisfies the
// distance condition.
inline bool label_failure(double dice, const AssdResult& assd, const FailurePolicy& policy = {}) {
    const bool low_dice = dice < policy.dice_thresh;
    const bool far_surface = !assd.defined || assd.value > policy.assd_thresh;
    return policy.require_both ? low_dice && far_surface : low_dice || far_surface;
}

struct FailureRow {
    std::string id;
    int cls = 0;
    double dice = 0.0;
    AssdResult assd;
    double confidence = 0.0;
    bool degenerate = false;
    bool failure = false;
};

struct ClassAuc {
    int cls = 0;
    bool defined = false;  // needs both failures and non-failures in the class
    RocResult roc;
};

struct FailureReport {
    std::vector<FailureRow> rows;
    std::vector<ClassAuc> per_class;
    bool pooled_defined = false;
    RocResult pooled;            // all rows together
    bool spearman_defined = false;
    double spearman_conf_dice = 0.0;
};

// Scores every (image, foreground class) pair of an evaluation set. The
// predicted mask and its uncertainty both come from the ensemble
// probability map; dice/assd against the reference define the true label.
template <typename S>
FailureReport failure_report(std::span<const Tensor<S>> prob_maps, std::span<const LabelMap> refs,
                             std::span<const std::string> ids, int classes,
                             const FailurePolicy& policy = {}) {
    if (prob_maps.size() != refs.size() || prob_maps.size() != ids.size())
        throw std::invalid_argument("failure_report: input count mismatch");
    if (classes < 2) throw std::invalid_argument("failure_report: need at least two classes");

    FailureReport rep;
    for (std::size_t i = 0; i < prob_maps.size(); ++i) {
        const LabelMap seg = argmax_segmentation(prob_maps[i]);
        for (int c = 1; c < classes; ++c) {
            LabelMap mask(seg.shape);
            for (std::size_t k = 0; k < seg.v.size(); ++k) mask.v[k] = seg.v[k] == c ? 1 : 0;
            const Tensor<double> h = normalized_class_entropy(prob_maps[i], c);
            const ConfidenceScore conf = confidence_score(mask, h);

            FailureRow row;
            row.id = ids[i];
            row.cls = c;
            row.dice = dice_binary(seg, refs[i], c);
            row.assd = assd(seg, refs[i], c);
            row.confidence = conf.value;
            row.degenerate = conf.degenerate;
            row.failure = label_failure(row.dice, row.assd, policy);
            rep.rows.push_back(std::move(row));
        }
    }

    auto evaluate = [&](int cls_filter) -> std::pair<bool, RocResult> {
        std::vector<double> scores;
        std::vector<uint8_t> labels;
        for (const FailureRow& r : rep.rows) {
            if (cls_filter > 0 && r.cls != cls_filter) continue;
            scores.push_back(r.confidence);
            labels.push_back(r.failure ? 1 : 0);
        }
        bool has[2] = {false, false};
        for (uint8_t l : labels) has[l] = true;
        if (!has[0] || !has[1]) return {false, {}};
        return {true, roc_low_score(scores, labels)};
    };

    for (int c = 1; c < classes; ++c) {
        ClassAuc ca;
        ca.cls = c;
        auto [ok, roc] = evaluate(c);
        ca.defined = ok;
        ca.roc = std::move(roc);
        rep.per_class.push_back(std::move(ca));
    }
    auto [ok, roc] = evaluate(0);
    rep.pooled_defined = ok;
    rep.pooled = std::move(roc);

    // Rank correlation between the confidence score and the true quality.
    std::vector<double> confs, dices;
    for (const FailureRow& r : rep.rows) {
        confs.push_back(r.confidence);
        dices.push_back(r.dice);
    }
    if (confs.size() >= 2) {
        bool conf_varies = false, dice_varies = false;
        for (std::size_t i = 1; i < confs.size(); ++i) {
            conf_varies = conf_varies || confs[i] != confs[0];
            dice_varies = dice_varies || dices[i] != dices[0];
        }
        if (conf_varies && dice_varies) {
            rep.spearman_defined = true;
            rep.spearman_conf_dice = spearman(confs, dices);
        }
    }
    return rep;
}

}  // namespace coldseg
