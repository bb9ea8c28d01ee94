#pragma once

// Static computation graph with reverse-mode differentiation. Graphs are
// built once per model configuration; evaluation state lives in a separate
// Evaluation object so the same graph can serve many forward/backward passes
// (and, if desired, several evaluations concurrently).
//
// The scalar type is a template parameter of evaluation, not of the graph:
// training runs in float, gradient oracles in double, on identical topology.

#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "coldseg/rng.hpp"
#include "coldseg/tensor.hpp"

namespace coldseg {

enum class Op {
    Input,
    Param,
    Conv2d,        // x [Cin,H,W], kernel [Cout,Cin,kh,kw], bias [Cout]; attr_i = zero padding
    Linear,        // x [n_in], weight [n_in,n_out], bias [n_out]
    MaxPool2,      // 2x2, stride 2; spatial dims must be even
    Upsample2,     // nearest neighbour, factor 2
    ConcatC,       // concatenate along the channel axis
    LeakyRelu,     // attr_f = negative slope
    SoftmaxC,      // rank 3: per-pixel over channels; rank 1: over the vector
    InstanceNorm,  // x [C,H,W], gamma [C], beta [C]; attr_f = eps
    Dropout,       // attr_f = drop probability, inverted scaling
    Add,
    Mul,
    Div,
    Log,
    ClampMin,   // attr_f = floor
    AddConst,   // attr_f
    MulConst,   // attr_f
    SpatialSum, // [C,H,W] -> [C]; rank 1 passes through
    SumAll,     // -> scalar
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Input: return "input";
        case Op::Param: return "param";
        case Op::Conv2d: return "conv2d";
        case Op::Linear: return "linear";
        case Op::MaxPool2: return "maxpool2";
        case Op::Upsample2: return "upsample2";
        case Op::ConcatC: return "concat";
        case Op::LeakyRelu: return "leaky_relu";
        case Op::SoftmaxC: return "softmax";
        case Op::InstanceNorm: return "instance_norm";
        case Op::Dropout: return "dropout";
        case Op::Add: return "add";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::Log: return "log";
        case Op::ClampMin: return "clamp_min";
        case Op::AddConst: return "add_const";
        case Op::MulConst: return "mul_const";
        case Op::SpatialSum: return "spatial_sum";
        case Op::SumAll: return "sum_all";
    }
    return "?";
}

struct Node {
    Op op;
    std::array<int, 3> in{-1, -1, -1};
    int n_in = 0;
    Shape shape;
    double attr_f = 0.0;
    int attr_i = 0;
    std::string name;  // inputs and params only
};

enum class InitKind { FanInUniform, Ones, Zeros };

struct ParamSpec {
    std::string name;
    Shape shape;
    std::size_t offset = 0;
    std::size_t count = 0;
    int fan_in = 1;
    InitKind init = InitKind::FanInUniform;
    int node = -1;
};

class Graph {
  public:
    int input(const std::string& name, Shape shape) {
        if (input_ids_.count(name)) throw std::invalid_argument("duplicate input name: " + name);
        Node n{Op::Input, {-1, -1, -1}, 0, std::move(shape)};
        n.name = name;
        const int id = push(std::move(n));
        input_ids_[name] = id;
        return id;
    }

    int param(const std::string& name, Shape shape, int fan_in, InitKind init = InitKind::FanInUniform) {
        ParamSpec spec;
        spec.name = name;
        spec.shape = shape;
        spec.offset = total_params_;
        spec.count = shape_numel(shape);
        spec.fan_in = fan_in;
        spec.init = init;
        Node n{Op::Param, {-1, -1, -1}, 0, std::move(shape)};
        n.name = name;
        n.attr_i = static_cast<int>(params_.size());
        spec.node = push(std::move(n));
        total_params_ += spec.count;
        params_.push_back(std::move(spec));
        return params_.back().node;
    }

    int conv2d(int x, int kernel, int bias, int pad) {
        const Shape& xs = shape_of(x, 3, "conv2d input");
        const Shape& ks = shape_of(kernel, 4, "conv2d kernel");
        const Shape& bs = shape_of(bias, 1, "conv2d bias");
        if (ks[1] != xs[0]) throw std::invalid_argument("conv2d: kernel in-channels mismatch");
        if (bs[0] != ks[0]) throw std::invalid_argument("conv2d: bias size mismatch");
        if (pad < 0) throw std::invalid_argument("conv2d: negative padding");
        const int ho = xs[1] + 2 * pad - ks[2] + 1;
        const int wo = xs[2] + 2 * pad - ks[3] + 1;
        if (ho < 1 || wo < 1) throw std::invalid_argument("conv2d: output would be empty");
        Node n{Op::Conv2d, {x, kernel, bias}, 3, {ks[0], ho, wo}};
        n.attr_i = pad;
        return push(std::move(n));
    }

    int linear(int x, int weight, int bias) {
        const Shape& xs = shape_of(x, 1, "linear input");
        const Shape& ws = shape_of(weight, 2, "linear weight");
        const Shape& bs = shape_of(bias, 1, "linear bias");
        if (ws[0] != xs[0] || ws[1] != bs[0]) throw std::invalid_argument("linear: shape mismatch");
        return push(Node{Op::Linear, {x, weight, bias}, 3, {ws[1]}});
    }

    int maxpool2(int x) {
        const Shape& xs = shape_of(x, 3, "maxpool2 input");
        if (xs[1] % 2 || xs[2] % 2) throw std::invalid_argument("maxpool2: spatial dims must be even");
        return push(Node{Op::MaxPool2, {x, -1, -1}, 1, {xs[0], xs[1] / 2, xs[2] / 2}});
    }

    int upsample2(int x) {
        const Shape& xs = shape_of(x, 3, "upsample2 input");
        return push(Node{Op::Upsample2, {x, -1, -1}, 1, {xs[0], xs[1] * 2, xs[2] * 2}});
    }

    int concat_c(int a, int b) {
        const Shape& as = shape_of(a, 3, "concat input");
        const Shape& bs = shape_of(b, 3, "concat input");
        if (as[1] != bs[1] || as[2] != bs[2]) throw std::invalid_argument("concat: spatial dims differ");
        return push(Node{Op::ConcatC, {a, b, -1}, 2, {as[0] + bs[0], as[1], as[2]}});
    }

    int leaky_relu(int x, double slope) {
        Node n{Op::LeakyRelu, {x, -1, -1}, 1, node(x).shape};
        n.attr_f = slope;
        return push(std::move(n));
    }

    int softmax_c(int x) {
        const int r = static_cast<int>(node(x).shape.size());
        if (r != 1 && r != 3) throw std::invalid_argument("softmax: expects rank 1 or 3");
        return push(Node{Op::SoftmaxC, {x, -1, -1}, 1, node(x).shape});
    }

    int instance_norm(int x, int gamma, int beta, double eps) {
        const Shape& xs = shape_of(x, 3, "instance_norm input");
        const Shape& gs = shape_of(gamma, 1, "instance_norm gamma");
        const Shape& bs = shape_of(beta, 1, "instance_norm beta");
        if (gs[0] != xs[0] || bs[0] != xs[0]) throw std::invalid_argument("instance_norm: affine size mismatch");
        Node n{Op::InstanceNorm, {x, gamma, beta}, 3, xs};
        n.attr_f = eps;
        return push(std::move(n));
    }

    int dropout(int x, double p) {
        if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0,1)");
        Node n{Op::Dropout, {x, -1, -1}, 1, node(x).shape};
        n.attr_f = p;
        return push(std::move(n));
    }

    int add(int a, int b) { return binary(Op::Add, a, b); }
    int mul(int a, int b) { return binary(Op::Mul, a, b); }
    int div(int a, int b) { return binary(Op::Div, a, b); }

    int log(int x) { return push(Node{Op::Log, {x, -1, -1}, 1, node(x).shape}); }

    int clamp_min(int x, double floor) {
        Node n{Op::ClampMin, {x, -1, -1}, 1, node(x).shape};
        n.attr_f = floor;
        return push(std::move(n));
    }

    int add_const(int x, double c) {
        Node n{Op::AddConst, {x, -1, -1}, 1, node(x).shape};
        n.attr_f = c;
        return push(std::move(n));
    }

    int mul_const(int x, double c) {
        Node n{Op::MulConst, {x, -1, -1}, 1, node(x).shape};
        n.attr_f = c;
        return push(std::move(n));
    }

    int spatial_sum(int x) {
        const int r = static_cast<int>(node(x).shape.size());
        if (r == 1) return push(Node{Op::SpatialSum, {x, -1, -1}, 1, node(x).shape});
        if (r != 3) throw std::invalid_argument("spatial_sum: expects rank 1 or 3");
        return push(Node{Op::SpatialSum, {x, -1, -1}, 1, {node(x).shape[0]}});
    }

    int sum_all(int x) { return push(Node{Op::SumAll, {x, -1, -1}, 1, Shape{}}); }

    int mean_all(int x) {
        return mul_const(sum_all(x), 1.0 / static_cast<double>(shape_numel(node(x).shape)));
    }

    void mark_output(const std::string& name, int id) {
        check_id(id);
        output_ids_[name] = id;
    }

    int output(const std::string& name) const {
        auto it = output_ids_.find(name);
        if (it == output_ids_.end()) throw std::invalid_argument("unknown graph output: " + name);
        return it->second;
    }

    int input_id(const std::string& name) const {
        auto it = input_ids_.find(name);
        if (it == input_ids_.end()) throw std::invalid_argument("unknown graph input: " + name);
        return it->second;
    }

    const Node& node(int id) const {
        check_id(id);
        return nodes_[static_cast<std::size_t>(id)];
    }
    const std::vector<Node>& nodes() const { return nodes_; }
    const std::vector<ParamSpec>& params() const { return params_; }
    std::size_t total_params() const { return total_params_; }
    const std::map<std::string, int>& inputs() const { return input_ids_; }
    const std::map<std::string, int>& outputs() const { return output_ids_; }

  private:
    int push(Node n) {
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    int binary(Op op, int a, int b) {
        if (node(a).shape != node(b).shape)
            throw std::invalid_argument(std::string(op_name(op)) + ": operand shapes differ");
        return push(Node{op, {a, b, -1}, 2, node(a).shape});
    }

    const Shape& shape_of(int id, int rank, const char* what) const {
        const Shape& s = node(id).shape;
        if (static_cast<int>(s.size()) != rank)
            throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(rank) +
                                        ", got " + shape_str(s));
        return s;
    }

    void check_id(int id) const {
        if (id < 0 || id >= static_cast<int>(nodes_.size()))
            throw std::invalid_argument("graph node id out of range");
    }

    std::vector<Node> nodes_;
    std::vector<ParamSpec> params_;
    std::size_t total_params_ = 0;
    std::map<std::string, int> input_ids_;
    std::map<std::string, int> output_ids_;
};


template <typename S>
struct Evaluation {
    std::vector<Tensor<S>> val;
    std::vector<Tensor<S>> aux;   // dropout masks, pool indices, norm statistics
    std::vector<Tensor<S>> grad;  // filled by backward_params
};

template <typename S>
struct EvalOptions {
    bool dropout_active = false;          // sample dropout masks (training / MC passes)
    RngStream* rng = nullptr;             // required when dropout is active with p > 0
    bool check_finite = false;            // scan every node output for NaN/Inf
    const Evaluation<S>* reuse_aux = nullptr;  // reuse stochastic state from a prior pass
};

namespace detail {

template <typename S>
void conv2d_forward(const Tensor<S>& x, const Tensor<S>& k, const Tensor<S>& b, int pad, Tensor<S>& out) {
    const int cin = x.shape[0], h = x.shape[1], w = x.shape[2];
    const int cout = k.shape[0], kh = k.shape[2], kw = k.shape[3];
    const int ho = out.shape[1], wo = out.shape[2];
    for (int co = 0; co < cout; ++co) {
        S* plane = &out.v[static_cast<std::size_t>(co) * ho * wo];
        const S bias = b.v[co];
        for (int i = 0; i < ho * wo; ++i) plane[i] = bias;
    }
    for (int co = 0; co < cout; ++co)
        for (int ci = 0; ci < cin; ++ci)
            for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                    const S wv = k.v[((static_cast<std::size_t>(co) * cin + ci) * kh + ky) * kw + kx];
                    if (wv == S(0)) continue;
                    const int y0 = std::max(0, pad - ky), y1 = std::min(ho, h + pad - ky);
                    const int x0 = std::max(0, pad - kx), x1 = std::min(wo, w + pad - kx);
                    for (int y = y0; y < y1; ++y) {
                        S* orow = &out.v[(static_cast<std::size_t>(co) * ho + y) * wo];
                        const S* irow = &x.v[(static_cast<std::size_t>(ci) * h + (y + ky - pad)) * w + (kx - pad)];
                        for (int xx = x0; xx < x1; ++xx) orow[xx] += wv * irow[xx];
                    }
                }
}

template <typename S>
void conv2d_backward(const Tensor<S>& x, const Tensor<S>& k, int pad, const Tensor<S>& gout,
                     Tensor<S>& gx, Tensor<S>& gk, Tensor<S>& gb) {
    const int cin = x.shape[0], h = x.shape[1], w = x.shape[2];
    const int cout = k.shape[0], kh = k.shape[2], kw = k.shape[3];
    const int ho = gout.shape[1], wo = gout.shape[2];
    for (int co = 0; co < cout; ++co) {
        S acc = S(0);
        const S* plane = &gout.v[static_cast<std::size_t>(co) * ho * wo];
        for (int i = 0; i < ho * wo; ++i) acc += plane[i];
        gb.v[co] += acc;
    }
    for (int co = 0; co < cout; ++co)
        for (int ci = 0; ci < cin; ++ci)
            for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                    const int y0 = std::max(0, pad - ky), y1 = std::min(ho, h + pad - ky);
                    const int x0 = std::max(0, pad - kx), x1 = std::min(wo, w + pad - kx);
                    const S wv = k.v[((static_cast<std::size_t>(co) * cin + ci) * kh + ky) * kw + kx];
                    S wacc = S(0);
                    for (int y = y0; y < y1; ++y) {
                        const S* grow = &gout.v[(static_cast<std::size_t>(co) * ho + y) * wo];
                        const S* irow = &x.v[(static_cast<std::size_t>(ci) * h + (y + ky - pad)) * w + (kx - pad)];
                        S* gxrow = &gx.v[(static_cast<std::size_t>(ci) * h + (y + ky - pad)) * w + (kx - pad)];
                        for (int xx = x0; xx < x1; ++xx) {
                            wacc += grow[xx] * irow[xx];
                            gxrow[xx] += wv * grow[xx];
                        }
                    }
                    gk.v[((static_cast<std::size_t>(co) * cin + ci) * kh + ky) * kw + kx] += wacc;
                }
}

}  // namespace detail

template <typename S>
Evaluation<S> evaluate(const Graph& g, const std::map<std::string, Tensor<S>>& inputs,
                       std::span<const S> weights, const EvalOptions<S>& opt = {}) {
    if (weights.size() != g.total_params())
        throw std::invalid_argument("evaluate: weight vector has " + std::to_string(weights.size()) +
                                    " entries, graph expects " + std::to_string(g.total_params()));
    const auto& nodes = g.nodes();
    Evaluation<S> ev;
    ev.val.resize(nodes.size());
    ev.aux.resize(nodes.size());

    for (std::size_t id = 0; id < nodes.size(); ++id) {
        const Node& n = nodes[id];
        Tensor<S>& out = ev.val[id];
        auto in = [&](int slot) -> const Tensor<S>& { return ev.val[static_cast<std::size_t>(n.in[slot])]; };

        switch (n.op) {
            case Op::Input: {
                auto it = inputs.find(n.name);
                if (it == inputs.end()) throw std::invalid_argument("evaluate: missing input " + n.name);
                if (it->second.shape != n.shape)
                    throw std::invalid_argument("evaluate: input " + n.name + " has shape " +
                                                shape_str(it->second.shape) + ", expected " + shape_str(n.shape));
                out = it->second;
                break;
            }
            case Op::Param: {
                const ParamSpec& spec = g.params()[static_cast<std::size_t>(n.attr_i)];
                out = Tensor<S>(spec.shape);
                for (std::size_t i = 0; i < spec.count; ++i) out.v[i] = weights[spec.offset + i];
                break;
            }
            case Op::Conv2d: {
                out = Tensor<S>(n.shape);
                detail::conv2d_forward(in(0), in(1), in(2), n.attr_i, out);
                break;
            }
            case Op::Linear: {
                const Tensor<S>& x = in(0);
                const Tensor<S>& wm = in(1);
                const Tensor<S>& b = in(2);
                out = Tensor<S>(n.shape);
                const int ni = wm.shape[0], no = wm.shape[1];
                for (int j = 0; j < no; ++j) out.v[j] = b.v[j];
                for (int i = 0; i < ni; ++i) {
                    const S xi = x.v[i];
                    const S* wrow = &wm.v[static_cast<std::size_t>(i) * no];
                    for (int j = 0; j < no; ++j) out.v[j] += xi * wrow[j];
                }
                break;
            }
            case Op::MaxPool2: {
                const Tensor<S>& x = in(0);
                const int c = x.shape[0], h = x.shape[1], w = x.shape[2];
                out = Tensor<S>(n.shape);
                Tensor<S>& idx = ev.aux[id];
                idx = Tensor<S>(n.shape);
                for (int ci = 0; ci < c; ++ci)
                    for (int y = 0; y < h / 2; ++y)
                        for (int xx = 0; xx < w / 2; ++xx) {
                            std::size_t best = (static_cast<std::size_t>(ci) * h + 2 * y) * w + 2 * xx;
                            S bv = x.v[best];
                            const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
                            for (std::size_t cd : cand)
                                if (x.v[cd] > bv) { bv = x.v[cd]; best = cd; }
                            out.at(ci, y, xx) = bv;
                            idx.at(ci, y, xx) = static_cast<S>(best);
                        }
                break;
            }
            case Op::Upsample2: {
                const Tensor<S>& x = in(0);
                out = Tensor<S>(n.shape);
                const int c = x.shape[0], h = x.shape[1], w = x.shape[2];
                for (int ci = 0; ci < c; ++ci)
                    for (int y = 0; y < 2 * h; ++y) {
                        const S* irow = &x.v[(static_cast<std::size_t>(ci) * h + y / 2) * w];
                        S* orow = &out.v[(static_cast<std::size_t>(ci) * 2 * h + y) * 2 * w];
                        for (int xx = 0; xx < 2 * w; ++xx) orow[xx] = irow[xx / 2];
                    }
                break;
            }
            case Op::ConcatC: {
                const Tensor<S>& a = in(0);
                const Tensor<S>& b = in(1);
                out = Tensor<S>(n.shape);
                std::copy(a.v.begin(), a.v.end(), out.v.begin());
                std::copy(b.v.begin(), b.v.end(), out.v.begin() + a.v.size());
                break;
            }
            case Op::LeakyRelu: {
                const Tensor<S>& x = in(0);
                const S slope = static_cast<S>(n.attr_f);
                out = Tensor<S>(n.shape);
                for (std::size_t i = 0; i < x.v.size(); ++i)
                    out.v[i] = x.v[i] > S(0) ? x.v[i] : slope * x.v[i];
                break;
            }
            case Op::SoftmaxC: {
                const Tensor<S>& x = in(0);
                out = Tensor<S>(n.shape);
                if (n.shape.size() == 1) {
                    const int c = n.shape[0];
                    S m = x.v[0];
                    for (int i = 1; i < c; ++i) m = std::max(m, x.v[i]);
                    S z = S(0);
                    for (int i = 0; i < c; ++i) z += (out.v[i] = std::exp(x.v[i] - m));
                    for (int i = 0; i < c; ++i) out.v[i] /= z;
                } else {
                    const int c = n.shape[0], hw = n.shape[1] * n.shape[2];
                    for (int px = 0; px < hw; ++px) {
                        S m = x.v[px];
                        for (int ci = 1; ci < c; ++ci)
                            m = std::max(m, x.v[static_cast<std::size_t>(ci) * hw + px]);
                        S z = S(0);
                        for (int ci = 0; ci < c; ++ci) {
                            const S e = std::exp(x.v[static_cast<std::size_t>(ci) * hw + px] - m);
                            out.v[static_cast<std::size_t>(ci) * hw + px] = e;
                            z += e;
                        }
                        for (int ci = 0; ci < c; ++ci) out.v[static_cast<std::size_t>(ci) * hw + px] /= z;
                    }
                }
                break;
            }
            case Op::InstanceNorm: {
                const Tensor<S>& x = in(0);
                const Tensor<S>& gamma = in(1);
                const Tensor<S>& beta = in(2);
                const int c = x.shape[0], hw = x.shape[1] * x.shape[2];
                out = Tensor<S>(n.shape);
                Tensor<S>& stats = ev.aux[id];
                stats = Tensor<S>({c, 2});
                for (int ci = 0; ci < c; ++ci) {
                    const S* plane = &x.v[static_cast<std::size_t>(ci) * hw];
                    S mean = S(0), sq = S(0);
                    for (int i = 0; i < hw; ++i) {
                        mean += plane[i];
                        sq += plane[i] * plane[i];
                    }
                    mean /= static_cast<S>(hw);
                    S var = sq / static_cast<S>(hw) - mean * mean;
                    if (var < S(0)) var = S(0);
                    const S inv_std = S(1) / std::sqrt(var + static_cast<S>(n.attr_f));
                    stats.at(ci, 0) = mean;
                    stats.at(ci, 1) = inv_std;
                    S* oplane = &out.v[static_cast<std::size_t>(ci) * hw];
                    for (int i = 0; i < hw; ++i)
                        oplane[i] = gamma.v[ci] * (plane[i] - mean) * inv_std + beta.v[ci];
                }
                break;
            }
            case Op::Dropout: {
                const Tensor<S>& x = in(0);
                if (!opt.dropout_active || n.attr_f == 0.0) {
                    out = x;
                    break;
                }
                Tensor<S>& mask = ev.aux[id];
                if (opt.reuse_aux) {
                    mask = opt.reuse_aux->aux[id];
                    if (mask.v.size() != x.v.size())
                        throw std::runtime_error("dropout: no reusable mask for this node");
                } else {
                    if (!opt.rng) throw std::invalid_argument("dropout: active mode needs an RNG stream");
                    const double keep = 1.0 - n.attr_f;
                    const S scale = static_cast<S>(1.0 / keep);
                    mask = Tensor<S>(n.shape);
                    for (auto& m : mask.v) m = opt.rng->uniform() < keep ? scale : S(0);
                }
                out = Tensor<S>(n.shape);
                for (std::size_t i = 0; i < x.v.size(); ++i) out.v[i] = x.v[i] * mask.v[i];
                break;
            }
            case Op::Add: {
                const Tensor<S>& a = in(0);
                const Tensor<S>& b = in(1);
                out = Tensor<S>(n.shape);
                for (std::size_t i = 0; i < a.v.size(); ++i) out.v[i] = a.v[i] + b.v[i];
                break;
            }
            case Op::Mul: {
                const Tensor<S>& a = in(0);
                const Tensor<S>& b = in(1);
                out = Tensor<S>(n.shape);
                for (std::size_t i = 0; i < a.v.size(); ++i) out.v[i] = a.v[i] * b.v[i];
                break;
            }
            case Op::Div: {
                const Tensor<S>& a = in(0);
                const Tensor<S>& b = in(1);
                out = Tensor<S>(n.shape);
                for (std::size_t i = 0; i < a.v.size(); ++i) out.v[i] = a.v[i] / b.v[i];
                break;
            }
            case Op::Log: {
                const Tensor<S>& x = in(0);
                out = Tensor<S>(n.shape);
                for (std::size_t i = 0; i < x.v.size(); ++i) out.v[i] = std::log(x.v[i]);
                break;
            }
            case Op::ClampMin: {
                const Tensor<S>& x = in(0);
                const S floor = static_cast<S>(n.attr_f);
                out = Tensor<S>(n.shape);
                for (std::size_t i = 0; i < x.v.size(); ++i) out.v[i] = std::max(x.v[i], floor);
                break;
            }
            case Op::AddConst: {
                const Tensor<S>& x = in(0);
                out = Tensor<S>(n.shape);
                const S c = static_cast<S>(n.attr_f);
                for (std::size_t i = 0; i < x.v.size(); ++i) out.v[i] = x.v[i] + c;
                break;
            }
            case Op::MulConst: {
                const Tensor<S>& x = in(0);
                out = Tensor<S>(n.shape);
                const S c = static_cast<S>(n.attr_f);
                for (std::size_t i = 0; i < x.v.size(); ++i) out.v[i] = x.v[i] * c;
                break;
            }
            case Op::SpatialSum: {
                const Tensor<S>& x = in(0);
                out = Tensor<S>(n.shape);
                if (x.rank() == 1) {
                    out.v = x.v;
                } else {
                    const int c = x.shape[0], hw = x.shape[1] * x.shape[2];
                    for (int ci = 0; ci < c; ++ci) {
                        S acc = S(0);
                        const S* plane = &x.v[static_cast<std::size_t>(ci) * hw];
                        for (int i = 0; i < hw; ++i) acc += plane[i];
                        out.v[ci] = acc;
                    }
                }
                break;
            }
            case Op::SumAll: {
                const Tensor<S>& x = in(0);
                out = Tensor<S>(Shape{});
                S acc = S(0);
                for (S v : x.v) acc += v;
                out.v[0] = acc;
                break;
            }
        }

        if (opt.check_finite)
            for (S v : out.v)
                if (!std::isfinite(static_cast<double>(v)))
                    throw std::runtime_error(std::string("non-finite value after ") + op_name(n.op) +
                                             " (node " + std::to_string(id) + ")");
    }
    return ev;
}

// Reverse pass from a scalar output; returns the flat parameter gradient in
// canonical layout order. Per-node gradients remain available in ev.grad.
template <typename S>
std::vector<S> backward_params(const Graph& g, Evaluation<S>& ev, int out_node) {
    const auto& nodes = g.nodes();
    if (shape_numel(nodes[static_cast<std::size_t>(out_node)].shape) != 1)
        throw std::invalid_argument("backward_params: output must be scalar");
    ev.grad.assign(nodes.size(), Tensor<S>{});
    auto grad_of = [&](int id) -> Tensor<S>& {
        Tensor<S>& gt = ev.grad[static_cast<std::size_t>(id)];
        if (gt.v.empty() && shape_numel(nodes[static_cast<std::size_t>(id)].shape) > 0)
            gt = Tensor<S>(nodes[static_cast<std::size_t>(id)].shape);
        return gt;
    };
    grad_of(out_node).v[0] = S(1);

    for (int id = out_node; id >= 0; --id) {
        const Node& n = nodes[static_cast<std::size_t>(id)];
        Tensor<S>& gt = ev.grad[static_cast<std::size_t>(id)];
        if (gt.v.empty()) continue;  // not on a path to the output
        auto in_val = [&](int slot) -> const Tensor<S>& { return ev.val[static_cast<std::size_t>(n.in[slot])]; };
        auto in_grad = [&](int slot) -> Tensor<S>& { return grad_of(n.in[slot]); };

        switch (n.op) {
            case Op::Input:
            case Op::Param:
                break;
            case Op::Conv2d:
                detail::conv2d_backward(in_val(0), in_val(1), n.attr_i, gt, in_grad(0), in_grad(1), in_grad(2));
                break;
            case Op::Linear: {
                const Tensor<S>& x = in_val(0);
                const Tensor<S>& wm = in_val(1);
                Tensor<S>& gx = in_grad(0);
                Tensor<S>& gw = in_grad(1);
                Tensor<S>& gb = in_grad(2);
                const int ni = wm.shape[0], no = wm.shape[1];
                for (int j = 0; j < no; ++j) gb.v[j] += gt.v[j];
                for (int i = 0; i < ni; ++i) {
                    const S* wrow = &wm.v[static_cast<std::size_t>(i) * no];
                    S* gwrow = &gw.v[static_cast<std::size_t>(i) * no];
                    S acc = S(0);
                    for (int j = 0; j < no; ++j) {
                        acc += wrow[j] * gt.v[j];
                        gwrow[j] += x.v[i] * gt.v[j];
                    }
                    gx.v[i] += acc;
                }
                break;
            }
            case Op::MaxPool2: {
                Tensor<S>& gx = in_grad(0);
                const Tensor<S>& idx = ev.aux[static_cast<std::size_t>(id)];
                for (std::size_t i = 0; i < gt.v.size(); ++i)
                    gx.v[static_cast<std::size_t>(idx.v[i])] += gt.v[i];
                break;
            }
            case Op::Upsample2: {
                Tensor<S>& gx = in_grad(0);
                const int c = gx.shape[0], h = gx.shape[1], w = gx.shape[2];
                for (int ci = 0; ci < c; ++ci)
                    for (int y = 0; y < 2 * h; ++y) {
                        const S* grow = &gt.v[(static_cast<std::size_t>(ci) * 2 * h + y) * 2 * w];
                        S* gxrow = &gx.v[(static_cast<std::size_t>(ci) * h + y / 2) * w];
                        for (int xx = 0; xx < 2 * w; ++xx) gxrow[xx / 2] += grow[xx];
                    }
                break;
            }
            case Op::ConcatC: {
                Tensor<S>& ga = in_grad(0);
                Tensor<S>& gb = in_grad(1);
                for (std::size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += gt.v[i];
                for (std::size_t i = 0; i < gb.v.size(); ++i) gb.v[i] += gt.v[ga.v.size() + i];
                break;
            }
            case Op::LeakyRelu: {
                const Tensor<S>& x = in_val(0);
                Tensor<S>& gx = in_grad(0);
                const S slope = static_cast<S>(n.attr_f);
                for (std::size_t i = 0; i < x.v.size(); ++i)
                    gx.v[i] += gt.v[i] * (x.v[i] > S(0) ? S(1) : slope);
                break;
            }
            case Op::SoftmaxC: {
                const Tensor<S>& p = ev.val[static_cast<std::size_t>(id)];
                Tensor<S>& gx = in_grad(0);
                if (n.shape.size() == 1) {
                    const int c = n.shape[0];
                    S dot = S(0);
                    for (int i = 0; i < c; ++i) dot += gt.v[i] * p.v[i];
                    for (int i = 0; i < c; ++i) gx.v[i] += p.v[i] * (gt.v[i] - dot);
                } else {
                    const int c = n.shape[0], hw = n.shape[1] * n.shape[2];
                    for (int px = 0; px < hw; ++px) {
                        S dot = S(0);
                        for (int ci = 0; ci < c; ++ci) {
                            const std::size_t k = static_cast<std::size_t>(ci) * hw + px;
                            dot += gt.v[k] * p.v[k];
                        }
                        for (int ci = 0; ci < c; ++ci) {
                            const std::size_t k = static_cast<std::size_t>(ci) * hw + px;
                            gx.v[k] += p.v[k] * (gt.v[k] - dot);
                        }
                    }
                }
                break;
            }
            case Op::InstanceNorm: {
                const Tensor<S>& x = in_val(0);
                const Tensor<S>& gamma = in_val(1);
                Tensor<S>& gx = in_grad(0);
                Tensor<S>& ggamma = in_grad(1);
                Tensor<S>& gbeta = in_grad(2);
                const Tensor<S>& stats = ev.aux[static_cast<std::size_t>(id)];
                const int c = x.shape[0], hw = x.shape[1] * x.shape[2];
                for (int ci = 0; ci < c; ++ci) {
                    const S mean = stats.at(ci, 0), inv_std = stats.at(ci, 1);
                    const S* xp = &x.v[static_cast<std::size_t>(ci) * hw];
                    const S* gp = &gt.v[static_cast<std::size_t>(ci) * hw];
                    S* gxp = &gx.v[static_cast<std::size_t>(ci) * hw];
                    S sum_g = S(0), sum_gx = S(0);
                    for (int i = 0; i < hw; ++i) {
                        const S xh = (xp[i] - mean) * inv_std;
                        sum_g += gp[i];
                        sum_gx += gp[i] * xh;
                    }
                    ggamma.v[ci] += sum_gx;
                    gbeta.v[ci] += sum_g;
                    const S mg = sum_g / static_cast<S>(hw);
                    const S mgx = sum_gx / static_cast<S>(hw);
                    const S scale = gamma.v[ci] * inv_std;
                    for (int i = 0; i < hw; ++i) {
                        const S xh = (xp[i] - mean) * inv_std;
                        gxp[i] += scale * (gp[i] - mg - xh * mgx);
                    }
                }
                break;
            }
            case Op::Dropout: {
                Tensor<S>& gx = in_grad(0);
                const Tensor<S>& mask = ev.aux[static_cast<std::size_t>(id)];
                if (mask.v.empty()) {
                    for (std::size_t i = 0; i < gx.v.size(); ++i) gx.v[i] += gt.v[i];
                } else {
                    for (std::size_t i = 0; i < gx.v.size(); ++i) gx.v[i] += gt.v[i] * mask.v[i];
                }
                break;
            }
            case Op::Add: {
                Tensor<S>& ga = in_grad(0);
                Tensor<S>& gb = in_grad(1);
                for (std::size_t i = 0; i < gt.v.size(); ++i) {
                    ga.v[i] += gt.v[i];
                    gb.v[i] += gt.v[i];
                }
                break;
            }
            case Op::Mul: {
                const Tensor<S>& a = in_val(0);
                const Tensor<S>& b = in_val(1);
                Tensor<S>& ga = in_grad(0);
                Tensor<S>& gb = in_grad(1);
                for (std::size_t i = 0; i < gt.v.size(); ++i) {
                    ga.v[i] += gt.v[i] * b.v[i];
                    gb.v[i] += gt.v[i] * a.v[i];
                }
                break;
            }
            case Op::Div: {
                const Tensor<S>& a = in_val(0);
                const Tensor<S>& b = in_val(1);
                Tensor<S>& ga = in_grad(0);
                Tensor<S>& gb = in_grad(1);
                for (std::size_t i = 0; i < gt.v.size(); ++i) {
                    ga.v[i] += gt.v[i] / b.v[i];
                    gb.v[i] -= gt.v[i] * a.v[i] / (b.v[i] * b.v[i]);
                }
                break;
            }
            case Op::Log: {
                const Tensor<S>& x = in_val(0);
                Tensor<S>& gx = in_grad(0);
                for (std::size_t i = 0; i < gt.v.size(); ++i) gx.v[i] += gt.v[i] / x.v[i];
                break;
            }
            case Op::ClampMin: {
                const Tensor<S>& x = in_val(0);
                Tensor<S>& gx = in_grad(0);
                const S floor = static_cast<S>(n.attr_f);
                for (std::size_t i = 0; i < gt.v.size(); ++i)
                    if (x.v[i] > floor) gx.v[i] += gt.v[i];
                break;
            }
            case Op::AddConst: {
                Tensor<S>& gx = in_grad(0);
                for (std::size_t i = 0; i < gt.v.size(); ++i) gx.v[i] += gt.v[i];
                break;
            }
            case Op::MulConst: {
                Tensor<S>& gx = in_grad(0);
                const S c = static_cast<S>(n.attr_f);
                for (std::size_t i = 0; i < gt.v.size(); ++i) gx.v[i] += gt.v[i] * c;
                break;
            }
            case Op::SpatialSum: {
                Tensor<S>& gx = in_grad(0);
                if (gx.rank() == 1) {
                    for (std::size_t i = 0; i < gt.v.size(); ++i) gx.v[i] += gt.v[i];
                } else {
                    const int c = gx.shape[0], hw = gx.shape[1] * gx.shape[2];
                    for (int ci = 0; ci < c; ++ci) {
                        S* plane = &gx.v[static_cast<std::size_t>(ci) * hw];
                        const S gc = gt.v[ci];
                        for (int i = 0; i < hw; ++i) plane[i] += gc;
                    }
                }
                break;
            }
            case Op::SumAll: {
                Tensor<S>& gx = in_grad(0);
                const S gv = gt.v[0];
                for (auto& e : gx.v) e += gv;
                break;
            }
        }
    }

    std::vector<S> flat(g.total_params(), S(0));
    for (const ParamSpec& p : g.params()) {
        const Tensor<S>& gp = ev.grad[static_cast<std::size_t>(p.node)];
        if (gp.v.empty()) continue;
        std::copy(gp.v.begin(), gp.v.end(), flat.begin() + static_cast<std::ptrdiff_t>(p.offset));
    }
    return flat;
}

struct FdReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
};

// Compare the analytic parameter gradient against central finite differences,
// element by element, in double precision. Stochastic nodes (dropout) keep
// the masks of the reference pass for every probe evaluation.
inline FdReport finite_diff_check(const Graph& g, const std::map<std::string, Tensor<double>>& inputs,
                                  std::vector<double> w, const std::string& output, double eps,
                                  RngStream* rng = nullptr, bool dropout_active = false) {
    if (eps < 1e-7 || eps > 1e-3) throw std::invalid_argument("finite_diff_check: eps outside [1e-7, 1e-3]");
    const int out = g.output(output);

    EvalOptions<double> ref_opt;
    ref_opt.dropout_active = dropout_active;
    ref_opt.rng = rng;
    Evaluation<double> ref = evaluate<double>(g, inputs, w, ref_opt);
    const std::vector<double> analytic = backward_params(g, ref, out);

    EvalOptions<double> probe_opt;
    probe_opt.dropout_active = dropout_active;
    probe_opt.reuse_aux = &ref;

    FdReport report;
    for (const ParamSpec& p : g.params()) {
        for (std::size_t i = 0; i < p.count; ++i) {
            const std::size_t k = p.offset + i;
            const double saved = w[k];
            w[k] = saved + eps;
            const double fp = evaluate<double>(g, inputs, w, probe_opt).val[static_cast<std::size_t>(out)].v[0];
            w[k] = saved - eps;
            const double fm = evaluate<double>(g, inputs, w, probe_opt).val[static_cast<std::size_t>(out)].v[0];
            w[k] = saved;
            const double fd = (fp - fm) / (2.0 * eps);
            const double a = analytic[k];
            double rel = 0.0;
            if (std::abs(a) > 1e-5 || std::abs(fd) > 1e-5)
                rel = std::abs(a - fd) / std::max(std::abs(a), std::abs(fd));
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = p.name;
                report.worst_index = i;
            }
        }
    }
    return report;
}

}  // namespace coldseg
