#pragma once

// Stochastic-gradient Hamiltonian Monte Carlo over the tempered posterior,
// with the momentum variable reparameterized so that temperature zero
// degenerates exactly to SGD with momentum (1 - mu):
//
//   r <- (1 - mu) * r - eta * g + sqrt(2 * eta * mu * T) * xi
//   w <- w + r
//
// g is the mean minibatch loss gradient plus lambda*w, xi is standard
// normal, and the noise draw is skipped entirely at T = 0 so the two update
// rules stay bit-identical there.
//
// Learning rates follow a cyclical annealing schedule: a short restart
// phase at eta_restart, a polynomial decay, then a constant exploitation
// tail over which checkpoints are collected at a fixed thinning stride.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "coldseg/data.hpp"
#include "coldseg/energy.hpp"
#include "coldseg/model.hpp"
#include "coldseg/rng.hpp"

namespace coldseg {

enum class ScheduleKind {
    Cyclical,  // restart, decay, constant tail; repeats every cycle
    Constant,  // eta0 throughout (single-cycle constant-rate baseline)
    Decay,     // one full polynomial decay over all epochs, no tail
};

struct SamplerConfig {
    int epochs = 1000;          // T_E
    int cycles = 3;             // N_C; cycle length is epochs / cycles
    double gamma = 0.6;         // fraction of a cycle spent decaying
    double eta0 = 0.02;         // base learning rate
    double eta_restart = 0.2;   // learning rate during the restart phase
    int restart_epochs = 10;    // T_r
    double decay_power = 0.9;
    double mu = 0.01;           // friction
    double temperature = 1e-5;  // T
    int batch = 40;
    int thinning = 4;           // keep every thinning-th epoch end, post burn-in
    ScheduleKind schedule = ScheduleKind::Cyclical;
    // Divergence guard: abort when the mean epoch loss is non-finite, or
    // exceeds divergence_factor times the first epoch's loss for
    // divergence_patience consecutive epochs.
    double divergence_factor = 10.0;
    int divergence_patience = 3;
};

inline void validate(const SamplerConfig& c) {
    if (c.epochs < 1) throw std::invalid_argument("sampler: epochs must be positive");
    if (c.cycles < 1 || c.cycles > c.epochs) throw std::invalid_argument("sampler: bad cycle count");
    if (!(c.gamma > 0.0 && c.gamma < 1.0)) throw std::invalid_argument("sampler: gamma must be in (0,1)");
    if (c.eta0 <= 0.0 || c.eta_restart <= 0.0) throw std::invalid_argument("sampler: learning rates must be positive");
    if (!(c.mu > 0.0 && c.mu <= 1.0)) throw std::invalid_argument("sampler: mu must be in (0,1]");
    if (c.temperature < 0.0) throw std::invalid_argument("sampler: temperature must be non-negative");
    if (c.batch < 1) throw std::invalid_argument("sampler: batch must be positive");
    if (c.thinning < 1) throw std::invalid_argument("sampler: thinning stride must be positive");
    if (c.restart_epochs < 0) throw std::invalid_argument("sampler: restart_epochs must be non-negative");
}

inline int cycle_length(const SamplerConfig& c) { return c.epochs / c.cycles; }

// Learning rate for a 0-based epoch index.
inline double lr_schedule(int epoch, const SamplerConfig& c) {
    if (epoch < 0 || epoch >= c.epochs) throw std::invalid_argument("lr_schedule: epoch out of range");
    switch (c.schedule) {
        case ScheduleKind::Constant:
            return c.eta0;
        case ScheduleKind::Decay:
            return c.eta0 * std::pow(1.0 - static_cast<double>(epoch) / c.epochs, c.decay_power);
        case ScheduleKind::Cyclical:
            break;
    }
    const int tc = epoch % cycle_length(c);
    if (tc < c.restart_epochs) return c.eta_restart;
    const double span = static_cast<double>(cycle_length(c));
    const double t = std::min(static_cast<double>(tc), c.gamma * span);
    return c.eta0 * std::pow(1.0 - t / span, c.decay_power);
}

// True when the end of 0-based epoch `epoch` lands a checkpoint: inside the
// constant exploitation tail of its cycle and on the thinning stride.
inline bool collects_checkpoint(int epoch, const SamplerConfig& c) {
    if (c.schedule == ScheduleKind::Decay) return false;
    const int tc = epoch % cycle_length(c);
    return static_cast<double>(tc) >= c.gamma * cycle_length(c) && (epoch + 1) % c.thinning == 0;
}

template <typename S>
void sghmc_step(std::span<S> w, std::span<S> r, std::span<const S> g, double eta, double mu,
                double temperature, RngStream& rng) {
    if (w.size() != r.size() || w.size() != g.size()) throw std::invalid_argument("sghmc_step: size mismatch");
    if (eta <= 0.0) throw std::invalid_argument("sghmc_step: eta must be positive");
    if (!(mu > 0.0 && mu <= 1.0)) throw std::invalid_argument("sghmc_step: mu must be in (0,1]");
    if (temperature < 0.0) throw std::invalid_argument("sghmc_step: negative temperature");
    const S beta = static_cast<S>(1.0 - mu);
    const S e = static_cast<S>(eta);
    if (temperature > 0.0) {
        const S noise = static_cast<S>(std::sqrt(2.0 * eta * mu * temperature));
        for (std::size_t i = 0; i < w.size(); ++i)
            r[i] = beta * r[i] - e * g[i] + noise * static_cast<S>(rng.normal());
    } else {
        for (std::size_t i = 0; i < w.size(); ++i) r[i] = beta * r[i] - e * g[i];
    }
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += r[i];
}

// Heavy-ball SGD, the deterministic twin of sghmc_step at T = 0.
template <typename S>
void sgd_momentum_step(std::span<S> w, std::span<S> v, std::span<const S> g, double eta, double momentum) {
    if (w.size() != v.size() || w.size() != g.size())
        throw std::invalid_argument("sgd_momentum_step: size mismatch");
    const S beta = static_cast<S>(momentum);
    const S e = static_cast<S>(eta);
    for (std::size_t i = 0; i < w.size(); ++i) v[i] = beta * v[i] - e * g[i];
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += v[i];
}

template <typename S>
struct ChainCheckpoint {
    int epoch = 0;  // 1-based epoch whose end produced this checkpoint
    int cycle = 0;
    double eta = 0.0;
    std::vector<S> w;
};

template <typename S>
struct CheckpointStore {
    std::vector<ChainCheckpoint<S>> entries;
};

struct ChainTraceRow {
    int epoch = 0;  // 1-based
    double eta = 0.0;
    double mean_loss = 0.0;
};

template <typename S>
struct ChainResult {
    CheckpointStore<S> store;
    std::vector<ChainTraceRow> trace;
    std::vector<S> final_w;
    bool diverged = false;
    int aborted_epoch = -1;  // 1-based epoch at which the guard fired
};

template <typename S>
using AugmentFn = std::function<Example<S>(const Example<S>&, RngStream&)>;

struct ChainMode {
    bool final_only = false;     // keep only the final weights (ensemble member training)
    bool train_dropout = false;  // sample dropout masks during training
    bool sgd_update = false;     // use the plain momentum update (with momentum 1-mu)
};

// Runs one chain over the training set. Batches are drawn by shuffling
// without replacement each epoch; every stochastic choice comes from a
// stream derived from (seed, purpose, index), so reruns are bit-identical.
template <typename S>
ChainResult<S> run_chain(const Model& model, const Dataset<S>& train, std::vector<S> w,
                         const SamplerConfig& cfg, double lambda, std::uint64_t seed,
                         const AugmentFn<S>& augment = nullptr, const ChainMode& mode = {}) {
    validate(cfg);
    if (train.empty()) throw std::invalid_argument("run_chain: empty training set");
    if (w.size() != model.n_params) throw std::invalid_argument("run_chain: weight size mismatch");

    const int n = static_cast<int>(train.size());
    const int iters = (n + cfg.batch - 1) / cfg.batch;
    std::vector<S> r(w.size(), S(0));
    RngStream noise = derive_stream(seed, "sghmc-noise");

    ChainResult<S> out;
    double first_loss = 0.0;
    int over_budget = 0;

    std::vector<int> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double eta = lr_schedule(epoch, cfg);

        RngStream shuffle = derive_stream(seed, "shuffle", static_cast<std::uint64_t>(epoch));
        for (int i = n - 1; i > 0; --i)
            std::swap(order[static_cast<std::size_t>(i)],
                      order[static_cast<std::size_t>(shuffle.below(static_cast<std::uint64_t>(i + 1)))]);

        double epoch_loss = 0.0;
        for (int it = 0; it < iters; ++it) {
            const int lo = it * cfg.batch;
            const int hi = std::min(n, lo + cfg.batch);
            const std::uint64_t tick = (static_cast<std::uint64_t>(epoch) << 32) | static_cast<std::uint64_t>(it);

            std::vector<Example<S>> augmented;
            std::vector<const Example<S>*> batch;
            batch.reserve(static_cast<std::size_t>(hi - lo));
            if (augment) {
                augmented.reserve(static_cast<std::size_t>(hi - lo));
                for (int i = lo; i < hi; ++i) {
                    RngStream astream = derive_stream(seed, "augment", tick * 1000 + static_cast<std::uint64_t>(i - lo));
                    augmented.push_back(augment(train[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])], astream));
                }
                for (const Example<S>& ex : augmented) batch.push_back(&ex);
            } else {
                for (int i = lo; i < hi; ++i)
                    batch.push_back(&train[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
            }

            RngStream dstream = derive_stream(seed, "dropout", tick);
            double mean_loss = 0.0;
            const std::vector<S> g = minibatch_gradient<S>(model, w, batch, lambda, mode.train_dropout,
                                                           mode.train_dropout ? &dstream : nullptr, &mean_loss);
            epoch_loss += mean_loss;

            if (mode.sgd_update)
                sgd_momentum_step<S>(w, r, g, eta, 1.0 - cfg.mu);
            else
                sghmc_step<S>(w, r, g, eta, cfg.mu, cfg.temperature, noise);
        }
        epoch_loss /= iters;
        out.trace.push_back({epoch + 1, eta, epoch_loss});

        if (!std::isfinite(epoch_loss)) {
            out.diverged = true;
            out.aborted_epoch = epoch + 1;
            break;
        }
        if (epoch == 0) first_loss = epoch_loss;
        if (epoch > 0 && epoch_loss > cfg.divergence_factor * std::max(first_loss, 1e-12)) {
            if (++over_budget >= cfg.divergence_patience) {
                out.diverged = true;
                out.aborted_epoch = epoch + 1;
                break;
            }
        } else {
            over_budget = 0;
        }

        if (!mode.final_only && collects_checkpoint(epoch, cfg))
            out.store.entries.push_back({epoch + 1, epoch / cycle_length(cfg), eta, w});
    }

    out.final_w = std::move(w);
    if (mode.final_only && !out.diverged)
        out.store.entries.push_back({cfg.epochs, 0, lr_schedule(cfg.epochs - 1, cfg), out.final_w});
    return out;
}

enum class SelectMode { Even, Last };

// Picks M checkpoint indices. Even mode spreads the picks over the store
// while keeping the per-cycle counts balanced (earlier cycles get the
// remainder); Last takes the newest M. Asking for more than the store holds
// returns everything and sets *truncated.
template <typename S>
std::vector<int> select_samples(const CheckpointStore<S>& store, int m, SelectMode mode,
                                bool* truncated = nullptr) {
    if (m < 1) throw std::invalid_argument("select_samples: m must be positive");
    const int total = static_cast<int>(store.entries.size());
    if (truncated) *truncated = m > total;
    if (m >= total) {
        std::vector<int> all(store.entries.size());
        std::iota(all.begin(), all.end(), 0);
        return all;
    }
    if (mode == SelectMode::Last) {
        std::vector<int> idx;
        for (int i = total - m; i < total; ++i) idx.push_back(i);
        return idx;
    }

    // Group store indices by cycle, preserving chronological order.
    std::vector<int> cycles;
    std::vector<std::vector<int>> groups;
    for (int i = 0; i < total; ++i) {
        const int c = store.entries[static_cast<std::size_t>(i)].cycle;
        std::size_t gi = 0;
        for (; gi < cycles.size(); ++gi)
            if (cycles[gi] == c) break;
        if (gi == cycles.size()) {
            cycles.push_back(c);
            groups.emplace_back();
        }
        groups[gi].push_back(i);
    }

    const int nc = static_cast<int>(groups.size());
    std::vector<int> quota(static_cast<std::size_t>(nc), m / nc);
    for (int i = 0; i < m % nc; ++i) quota[static_cast<std::size_t>(i)]++;
    // Rebalance quotas that exceed what a cycle holds.
    for (int pass = 0; pass < nc; ++pass)
        for (int i = 0; i < nc; ++i) {
            int spare = quota[static_cast<std::size_t>(i)] - static_cast<int>(groups[static_cast<std::size_t>(i)].size());
            if (spare <= 0) continue;
            quota[static_cast<std::size_t>(i)] -= spare;
            for (int j = 0; j < nc && spare > 0; ++j) {
                const int cap = static_cast<int>(groups[static_cast<std::size_t>(j)].size()) - quota[static_cast<std::size_t>(j)];
                const int take = std::min(spare, cap);
                quota[static_cast<std::size_t>(j)] += take;
                spare -= take;
            }
        }

    std::vector<int> idx;
    for (int gi = 0; gi < nc; ++gi) {
        const auto& grp = groups[static_cast<std::size_t>(gi)];
        const int q = quota[static_cast<std::size_t>(gi)];
        const int len = static_cast<int>(grp.size());
        for (int j = 0; j < q; ++j)
            idx.push_back(grp[static_cast<std::size_t>((j + 1) * len / q - 1)]);
    }
    std::sort(idx.begin(), idx.end());
    return idx;
}

}  // namespace coldseg
