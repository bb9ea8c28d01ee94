#pragma once

// Model zoo: a miniature U-Net for dense segmentation and a small MLP used
// as a cheap stand-in by sampler tests. Both are described by one config and
// compiled into two graphs over the same parameter layout: a prediction
// graph (image -> class probabilities) and a training graph that appends the
// segmentation loss (soft-Dice plus cross-entropy).
//
// Canonical flat weight order is registration order: encoder to decoder,
// within each convolution kernel before bias, then the norm's gamma and
// beta. Checkpoints, samplers and diversity analyses all share this layout.

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "coldseg/graph.hpp"
#include "coldseg/rng.hpp"
#include "coldseg/tensor.hpp"

namespace coldseg {

struct ModelConfig {
    std::string arch = "mini-unet";  // "mini-unet" or "mlp"
    int levels = 3;
    int base_channels = 8;
    int in_channels = 1;
    int classes = 4;
    int image_h = 32;
    int image_w = 32;
    double dropout_p = 0.0;
    // Level ids that receive dropout after their encoder stage and, when the
    // level has one, after the matching decoder stage. Empty means the
    // default: the innermost encoder and decoder stages.
    std::vector<int> dropout_sites;
    std::vector<int> mlp_layers = {2, 8, 2};
    double leaky_slope = 0.01;
    double norm_eps = 1e-5;
    double loss_smooth = 1e-5;
    double prob_floor = 1e-12;
};

inline std::vector<int> resolved_dropout_sites(const ModelConfig& cfg) {
    if (!cfg.dropout_sites.empty()) return cfg.dropout_sites;
    if (cfg.levels < 2) return {cfg.levels - 1};
    return {cfg.levels - 2, cfg.levels - 1};
}

struct Model {
    ModelConfig cfg;
    Graph predict;  // inputs: image; outputs: probs
    Graph train;    // inputs: image, onehot; outputs: loss, dice, ce, probs
    std::size_t n_params = 0;
    int out_classes = 0;
};

namespace detail {

// Appends dice + cross-entropy on top of a probability node. N is the number
// of pixels the cross-entropy averages over.
inline void append_loss(Graph& g, int probs, const Shape& label_shape, const ModelConfig& cfg) {
    const int onehot = g.input("onehot", label_shape);
    const int inter = g.spatial_sum(g.mul(probs, onehot));
    const int psum = g.spatial_sum(probs);
    const int tsum = g.spatial_sum(onehot);
    const int num = g.add_const(inter, cfg.loss_smooth);
    const int den = g.add_const(g.add(psum, tsum), 2.0 * cfg.loss_smooth);
    const int dice = g.mul_const(g.sum_all(g.div(num, den)), -2.0);

    const std::size_t pixels = shape_numel(label_shape) / static_cast<std::size_t>(label_shape[0]);
    const int logp = g.log(g.clamp_min(probs, cfg.prob_floor));
    const int ce = g.mul_const(g.sum_all(g.mul(onehot, logp)), -1.0 / static_cast<double>(pixels));

    g.mark_output("dice", dice);
    g.mark_output("ce", ce);
    g.mark_output("loss", g.add(dice, ce));
}

inline int conv_block(Graph& g, int x, int in_ch, int out_ch, const std::string& name,
                      const ModelConfig& cfg) {
    const int k = g.param(name + ".k", {out_ch, in_ch, 3, 3}, in_ch * 9);
    const int b = g.param(name + ".b", {out_ch}, in_ch * 9);
    int y = g.conv2d(x, k, b, 1);
    const int gamma = g.param(name + ".ng", {out_ch}, 1, InitKind::Ones);
    const int beta = g.param(name + ".nb", {out_ch}, 1, InitKind::Zeros);
    y = g.instance_norm(y, gamma, beta, cfg.norm_eps);
    return g.leaky_relu(y, cfg.leaky_slope);
}

inline int unet_stage(Graph& g, int x, int in_ch, int out_ch, const std::string& prefix,
                      const ModelConfig& cfg) {
    x = conv_block(g, x, in_ch, out_ch, prefix + ".c1", cfg);
    return conv_block(g, x, out_ch, out_ch, prefix + ".c2", cfg);
}

inline Graph build_unet_graph(const ModelConfig& cfg, bool with_loss) {
    if (cfg.levels < 1) throw std::invalid_argument("mini-unet needs at least one level");
    if (cfg.base_channels < 1) throw std::invalid_argument("base_channels must be positive");
    const int div = 1 << (cfg.levels - 1);
    if (cfg.image_h % div || cfg.image_w % div)
        throw std::invalid_argument("image extents must be divisible by 2^(levels-1)");

    const std::vector<int> sites = resolved_dropout_sites(cfg);
    auto has_site = [&](int level) {
        return cfg.dropout_p > 0.0 && std::find(sites.begin(), sites.end(), level) != sites.end();
    };

    Graph g;
    int x = g.input("image", {cfg.in_channels, cfg.image_h, cfg.image_w});

    std::vector<int> skips;
    int ch_prev = cfg.in_channels;
    for (int l = 0; l < cfg.levels; ++l) {
        const int ch = cfg.base_channels << l;
        x = unet_stage(g, x, ch_prev, ch, "enc" + std::to_string(l), cfg);
        if (has_site(l)) x = g.dropout(x, cfg.dropout_p);
        if (l + 1 < cfg.levels) {
            skips.push_back(x);
            x = g.maxpool2(x);
        }
        ch_prev = ch;
    }
    for (int l = cfg.levels - 2; l >= 0; --l) {
        const int ch = cfg.base_channels << l;
        x = g.concat_c(g.upsample2(x), skips[static_cast<std::size_t>(l)]);
        x = unet_stage(g, x, ch_prev + ch, ch, "dec" + std::to_string(l), cfg);
        if (has_site(l)) x = g.dropout(x, cfg.dropout_p);
        ch_prev = ch;
    }

    const int hk = g.param("head.k", {cfg.classes, ch_prev, 1, 1}, ch_prev);
    const int hb = g.param("head.b", {cfg.classes}, ch_prev);
    const int probs = g.softmax_c(g.conv2d(x, hk, hb, 0));
    g.mark_output("probs", probs);

    if (with_loss) append_loss(g, probs, {cfg.classes, cfg.image_h, cfg.image_w}, cfg);
    return g;
}

inline Graph build_mlp_graph(const ModelConfig& cfg, bool with_loss) {
    if (cfg.mlp_layers.size() < 2) throw std::invalid_argument("mlp needs at least two layer sizes");
    Graph g;
    int x = g.input("image", {cfg.mlp_layers.front()});
    for (std::size_t i = 0; i + 1 < cfg.mlp_layers.size(); ++i) {
        const int ni = cfg.mlp_layers[i], no = cfg.mlp_layers[i + 1];
        const std::string name = "fc" + std::to_string(i);
        const int w = g.param(name + ".w", {ni, no}, ni);
        const int b = g.param(name + ".b", {no}, ni);
        x = g.linear(x, w, b);
        if (i + 2 < cfg.mlp_layers.size()) x = g.leaky_relu(x, cfg.leaky_slope);
    }
    const int probs = g.softmax_c(x);
    g.mark_output("probs", probs);
    if (with_loss) append_loss(g, probs, {cfg.mlp_layers.back()}, cfg);
    return g;
}

}  // namespace detail

inline Model build_model(const ModelConfig& cfg) {
    Model m;
    m.cfg = cfg;
    if (cfg.arch == "mini-unet") {
        m.predict = detail::build_unet_graph(cfg, false);
        m.train = detail::build_unet_graph(cfg, true);
        m.out_classes = cfg.classes;
    } else if (cfg.arch == "mlp") {
        m.predict = detail::build_mlp_graph(cfg, false);
        m.train = detail::build_mlp_graph(cfg, true);
        m.out_classes = cfg.mlp_layers.back();
    } else {
        throw std::invalid_argument("unknown arch: " + cfg.arch);
    }
    m.n_params = m.predict.total_params();
    if (m.train.total_params() != m.n_params)
        throw std::logic_error("predict/train graphs disagree on parameter layout");
    return m;
}

// Fan-in scaled uniform init; norm affines start at identity.
template <typename S>
std::vector<S> init_weights(const Model& m, RngStream& rng) {
    std::vector<S> w(m.n_params);
    for (const ParamSpec& p : m.predict.params()) {
        switch (p.init) {
            case InitKind::FanInUniform: {
                const double bound = 1.0 / std::sqrt(static_cast<double>(p.fan_in));
                for (std::size_t i = 0; i < p.count; ++i)
                    w[p.offset + i] = static_cast<S>(rng.uniform(-bound, bound));
                break;
            }
            case InitKind::Ones:
                for (std::size_t i = 0; i < p.count; ++i) w[p.offset + i] = S(1);
                break;
            case InitKind::Zeros:
                for (std::size_t i = 0; i < p.count; ++i) w[p.offset + i] = S(0);
                break;
        }
    }
    return w;
}

// Single forward pass to class probabilities. Dropout stays off unless a
// stochastic pass is requested with an RNG stream (MC-dropout inference).
template <typename S>
Tensor<S> predict(const Model& m, std::span<const S> w, const Tensor<S>& image,
                  bool stochastic = false, RngStream* rng = nullptr) {
    EvalOptions<S> opt;
    opt.dropout_active = stochastic;
    opt.rng = rng;
    if (stochastic && !rng) throw std::invalid_argument("predict: stochastic pass needs an RNG stream");
    std::map<std::string, Tensor<S>> inputs{{"image", image}};
    Evaluation<S> ev = evaluate<S>(m.predict, inputs, w, opt);
    return ev.val[static_cast<std::size_t>(m.predict.output("probs"))];
}

}  // namespace coldseg
