#pragma once

// Posterior energy U(w) = sum of per-example losses plus the Gaussian prior
// term (lambda/2)*||w||^2, and the minibatch loss gradient that drives the
// samplers: mean of per-example loss gradients plus lambda*w.
//
// The per-example loss is soft-Dice plus cross-entropy. It exists twice on
// purpose: as plain functions over probability maps (used by reports and by
// tests as a cross-check) and inside every model's training graph (used for
// gradients). A unit test pins both routes to the same value.

#include <cmath>
#include <map>
#include <span>
#include <stdexcept>
#include <vector>

#include "coldseg/data.hpp"
#include "coldseg/graph.hpp"
#include "coldseg/model.hpp"
#include "coldseg/tensor.hpp"

namespace coldseg {

struct EnergyConfig {
    double lambda = 3e-5;       // prior precision
    double temperature = 1e-5;  // cold posterior temperature, consumed by samplers

    void validate() const {
        if (lambda < 0.0) throw std::invalid_argument("lambda must be nonnegative");
        if (temperature < 0.0) throw std::invalid_argument("temperature must be nonnegative");
    }
};

// Smoothed negative soft-Dice over all classes; in [-C, 0]. A one-hot
// prediction matching the labels approaches -C.
template <typename S>
double soft_dice_loss(const Tensor<S>& probs, const LabelMap& label, double smooth = 1e-5) {
    if (probs.rank() != 3) throw std::invalid_argument("soft_dice_loss expects [C,H,W] probabilities");
    const int c = probs.dim(0), h = probs.dim(1), w = probs.dim(2);
    if (label.rank() != 2 || label.dim(0) != h || label.dim(1) != w)
        throw std::invalid_argument("soft_dice_loss: label shape mismatch");
    double acc = 0.0;
    for (int ci = 0; ci < c; ++ci) {
        double inter = 0.0, psum = 0.0, tsum = 0.0;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double p = probs.at(ci, y, x);
                psum += p;
                if (label.at(y, x) == ci) {
                    inter += p;
                    tsum += 1.0;
                }
            }
        acc += (inter + smooth) / (psum + tsum + 2.0 * smooth);
    }
    return -2.0 * acc;
}

// Mean over pixels of -log p(true class), probabilities floored for safety.
template <typename S>
double cross_entropy_loss(const Tensor<S>& probs, const LabelMap& label, double floor = 1e-12) {
    if (probs.rank() != 3) throw std::invalid_argument("cross_entropy_loss expects [C,H,W] probabilities");
    const int h = probs.dim(1), w = probs.dim(2);
    if (label.rank() != 2 || label.dim(0) != h || label.dim(1) != w)
        throw std::invalid_argument("cross_entropy_loss: label shape mismatch");
    double acc = 0.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            acc -= std::log(std::max(static_cast<double>(probs.at(label.at(y, x), y, x)), floor));
    return acc / (static_cast<double>(h) * w);
}

namespace detail {

// Builds the "onehot" training-graph input from a label map, matching the
// graph's expected rank (rank 1 for vector models).
template <typename S>
Tensor<S> onehot_for(const Model& m, const LabelMap& label) {
    const Shape& want = m.train.node(m.train.input_id("onehot")).shape;
    if (want.size() == 3) return one_hot<S>(label, want[0]);
    Tensor<S> t(want);
    const int cls = label.v.at(0);
    if (cls < 0 || cls >= want[0]) throw std::invalid_argument("label id out of range");
    t.v[static_cast<std::size_t>(cls)] = S(1);
    return t;
}

}  // namespace detail

// Total training loss of one example via the model's training graph, with
// the dice and cross-entropy components available on request.
template <typename S>
double example_loss(const Model& m, std::span<const S> w, const Example<S>& ex,
                    double* dice_out = nullptr, double* ce_out = nullptr,
                    bool dropout = false, RngStream* rng = nullptr) {
    EvalOptions<S> opt;
    opt.dropout_active = dropout;
    opt.rng = rng;
    std::map<std::string, Tensor<S>> inputs{{"image", ex.image}, {"onehot", detail::onehot_for<S>(m, ex.label)}};
    Evaluation<S> ev = evaluate<S>(m.train, inputs, w, opt);
    if (dice_out) *dice_out = static_cast<double>(ev.val[static_cast<std::size_t>(m.train.output("dice"))].v[0]);
    if (ce_out) *ce_out = static_cast<double>(ev.val[static_cast<std::size_t>(m.train.output("ce"))].v[0]);
    return static_cast<double>(ev.val[static_cast<std::size_t>(m.train.output("loss"))].v[0]);
}

// Posterior energy over a dataset: summed losses plus the prior.
template <typename S>
double posterior_energy(const Model& m, std::span<const S> w, const Dataset<S>& data, double lambda) {
    double u = 0.0;
    for (const Example<S>& ex : data) u += example_loss<S>(m, w, ex);
    double sq = 0.0;
    for (S wi : w) sq += static_cast<double>(wi) * static_cast<double>(wi);
    return u + 0.5 * lambda * sq;
}

// Loss gradient of a single example, flat in canonical layout order.
template <typename S>
std::vector<S> example_gradient(const Model& m, std::span<const S> w, const Example<S>& ex,
                                bool dropout = false, RngStream* rng = nullptr,
                                double* loss_out = nullptr) {
    EvalOptions<S> opt;
    opt.dropout_active = dropout;
    opt.rng = rng;
    std::map<std::string, Tensor<S>> inputs{{"image", ex.image}, {"onehot", detail::onehot_for<S>(m, ex.label)}};
    Evaluation<S> ev = evaluate<S>(m.train, inputs, w, opt);
    const int loss = m.train.output("loss");
    if (loss_out) *loss_out = static_cast<double>(ev.val[static_cast<std::size_t>(loss)].v[0]);
    return backward_params(m.train, ev, loss);
}

// Mean per-example loss gradient over a batch plus lambda*w. This is the
// quantity the samplers consume each iteration.
template <typename S>
std::vector<S> minibatch_gradient(const Model& m, std::span<const S> w,
                                  std::span<const Example<S>* const> batch, double lambda,
                                  bool dropout = false, RngStream* rng = nullptr,
                                  double* mean_loss_out = nullptr) {
    if (batch.empty()) throw std::invalid_argument("minibatch_gradient: empty batch");
    std::vector<S> g(w.size(), S(0));
    double loss_acc = 0.0;
    for (const Example<S>* ex : batch) {
        double loss = 0.0;
        const std::vector<S> gi = example_gradient<S>(m, w, *ex, dropout, rng, &loss);
        loss_acc += loss;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gi[i];
    }
    const S inv = static_cast<S>(1.0 / static_cast<double>(batch.size()));
    const S lam = static_cast<S>(lambda);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = g[i] * inv + lam * w[i];
    if (mean_loss_out) *mean_loss_out = loss_acc / static_cast<double>(batch.size());
    return g;
}

}  // namespace coldseg
