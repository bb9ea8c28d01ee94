#pragma once

// Ensemble inference: averaging the class-probability maps of several
// weight samples (or several stochastic dropout passes of one sample) into
// one predictive distribution, plus the entropy maps and argmax
// segmentation derived from it.

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "coldseg/model.hpp"
#include "coldseg/rng.hpp"
#include "coldseg/tensor.hpp"

namespace coldseg {

// Mean probability map over an ensemble of weight vectors.
template <typename S>
Tensor<S> ensemble_predict(const Model& m, std::span<const std::vector<S>> members,
                           const Tensor<S>& image) {
    if (members.empty()) throw std::invalid_argument("ensemble_predict: no members");
    Tensor<S> acc = predict<S>(m, members.front(), image);
    for (std::size_t k = 1; k < members.size(); ++k) {
        const Tensor<S> p = predict<S>(m, members[k], image);
        for (std::size_t i = 0; i < acc.v.size(); ++i) acc.v[i] += p.v[i];
    }
    const S inv = static_cast<S>(1.0 / static_cast<double>(members.size()));
    for (S& v : acc.v) v *= inv;
    return acc;
}

// Mean probability map over repeated stochastic forward passes of a single
// weight vector with dropout sampling on.
template <typename S>
Tensor<S> mc_dropout_predict(const Model& m, std::span<const S> w, const Tensor<S>& image,
                             int passes, RngStream& rng) {
    if (passes < 1) throw std::invalid_argument("mc_dropout_predict: passes must be positive");
    Tensor<S> acc = predict<S>(m, w, image, true, &rng);
    for (int k = 1; k < passes; ++k) {
        const Tensor<S> p = predict<S>(m, w, image, true, &rng);
        for (std::size_t i = 0; i < acc.v.size(); ++i) acc.v[i] += p.v[i];
    }
    const S inv = static_cast<S>(1.0 / static_cast<double>(passes));
    for (S& v : acc.v) v *= inv;
    return acc;
}

// Per-pixel entropy of the categorical predictive distribution, in nats.
template <typename S>
Tensor<double> categorical_entropy(const Tensor<S>& probs) {
    if (probs.rank() != 3) throw std::invalid_argument("categorical_entropy expects [C,H,W]");
    const int c = probs.dim(0), h = probs.dim(1), w = probs.dim(2);
    Tensor<double> ent({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int ci = 0; ci < c; ++ci) {
                const double p = probs.at(ci, y, x);
                if (p > 0.0) acc -= p * std::log(p);
            }
            ent.at(y, x) = acc;
        }
    return ent;
}

// Per-pixel binary entropy of "class cls vs rest", in nats.
template <typename S>
Tensor<double> binary_entropy(const Tensor<S>& probs, int cls) {
    if (probs.rank() != 3) throw std::invalid_argument("binary_entropy expects [C,H,W]");
    if (cls < 0 || cls >= probs.dim(0)) throw std::invalid_argument("binary_entropy: class out of range");
    const int h = probs.dim(1), w = probs.dim(2);
    Tensor<double> ent({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double p = probs.at(cls, y, x);
            double acc = 0.0;
            if (p > 0.0) acc -= p * std::log(p);
            if (p < 1.0) acc -= (1.0 - p) * std::log(1.0 - p);
            ent.at(y, x) = acc;
        }
    return ent;
}

// Hard segmentation by per-pixel argmax; ties go to the lowest class id.
template <typename S>
LabelMap argmax_segmentation(const Tensor<S>& probs) {
    if (probs.rank() != 3) throw std::invalid_argument("argmax_segmentation expects [C,H,W]");
    const int c = probs.dim(0), h = probs.dim(1), w = probs.dim(2);
    if (c > 255) throw std::invalid_argument("argmax_segmentation: too many classes for a byte label");
    LabelMap seg({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            int best = 0;
            S best_p = probs.at(0, y, x);
            for (int ci = 1; ci < c; ++ci)
                if (probs.at(ci, y, x) > best_p) {
                    best = ci;
                    best_p = probs.at(ci, y, x);
                }
            seg.at(y, x) = static_cast<uint8_t>(best);
        }
    return seg;
}

// Per-pixel confidence: the probability of the predicted (argmax) class.
template <typename S>
Tensor<double> max_probability(const Tensor<S>& probs) {
    if (probs.rank() != 3) throw std::invalid_argument("max_probability expects [C,H,W]");
    const int c = probs.dim(0), h = probs.dim(1), w = probs.dim(2);
    Tensor<double> conf({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double best = probs.at(0, y, x);
            for (int ci = 1; ci < c; ++ci) best = std::max(best, static_cast<double>(probs.at(ci, y, x)));
            conf.at(y, x) = best;
        }
    return conf;
}

}  // namespace coldseg
