#pragma once

// Training and inference protocols. A protocol decides how many chains run,
// which schedule and update rule they use, which checkpoints become
// ensemble members, and whether inference itself is stochastic:
//
//   vanilla         one deterministic SGD run, final weights only
//   mc-dropout      one SGD run trained with dropout; stochastic passes at
//                   inference time
//   deep-ensembles  `members` independent SGD runs from independent inits
//   sgd-const       one zero-temperature chain at a constant rate, thinned
//   sghmc-single    one cyclical SGHMC chain, members from the last cycle
//   sghmc-multi     one cyclical SGHMC chain, members from every cycle
//
// Protocol identity fixes the schedule, update rule and temperature; the
// shared sampler section of the config supplies everything else (epochs,
// rates, friction, batch, thinning).

#include <chrono>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "coldseg/config.hpp"
#include "coldseg/data.hpp"
#include "coldseg/diversity.hpp"
#include "coldseg/inference.hpp"
#include "coldseg/metrics.hpp"
#include "coldseg/model.hpp"
#include "coldseg/rng.hpp"
#include "coldseg/sampler.hpp"
#include "coldseg/synth.hpp"

namespace coldseg {

// The sampler settings a protocol actually runs with.
inline SamplerConfig effective_sampler(const RunConfig& cfg) {
    SamplerConfig s = cfg.sampler;
    const std::string& p = cfg.protocol.name;
    if (p == "vanilla" || p == "mc-dropout" || p == "deep-ensembles") {
        s.schedule = ScheduleKind::Decay;
        s.temperature = 0.0;
    } else if (p == "sgd-const") {
        s.schedule = ScheduleKind::Constant;
        s.cycles = 1;
        s.temperature = 0.0;
    } else {
        s.schedule = ScheduleKind::Cyclical;
    }
    return s;
}

struct TrainedProtocol {
    std::string name;
    ChainResult<float> chain;                 // the single chain, or the last member's
    CheckpointStore<float> pool;              // checkpoints eligible as ensemble members
    std::vector<std::vector<float>> members;  // selected inference members
    std::vector<std::uint64_t> member_seeds;  // chain seeds, one per independent chain
    bool dropout_inference = false;
    bool truncated = false;  // fewer checkpoints than requested members
    bool diverged = false;
    double wall_ms = 0.0;
};

inline CheckpointStore<float> last_cycle_only(const CheckpointStore<float>& store, int cycles) {
    CheckpointStore<float> out;
    for (const ChainCheckpoint<float>& e : store.entries)
        if (e.cycle == cycles - 1) out.entries.push_back(e);
    return out;
}

inline AugmentFn<float> make_augment(const RunConfig& cfg) {
    if (!cfg.augment.enabled) return nullptr;
    const AugmentConfig acfg = cfg.augment;
    const float bg = static_cast<float>(cfg.scene.class_mean[0]);
    return [acfg, bg](const Example<float>& ex, RngStream& rng) {
        return augment_example(ex, acfg, rng, bg);
    };
}

inline TrainedProtocol train_protocol(const RunConfig& cfg, const Model& model,
                                      const Dataset<float>& train) {
    cfg.protocol.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const std::string& name = cfg.protocol.name;
    const SamplerConfig sampler = effective_sampler(cfg);
    const AugmentFn<float> augment = make_augment(cfg);

    TrainedProtocol out;
    out.name = name;
    out.dropout_inference = (name == "mc-dropout");
    if ((name == "mc-dropout") && cfg.model.dropout_p <= 0.0)
        throw std::invalid_argument("mc-dropout needs model.dropout_p > 0");

    ChainMode mode;
    if (name == "vanilla" || name == "mc-dropout" || name == "deep-ensembles") {
        mode.final_only = true;
        mode.sgd_update = true;
        mode.train_dropout = (name == "mc-dropout");
    }

    const int chains = (name == "deep-ensembles") ? cfg.protocol.members : 1;
    for (int m = 0; m < chains; ++m) {
        const std::uint64_t chain_seed =
            (chains == 1) ? cfg.seed : derive_seed(cfg.seed, "member", static_cast<std::uint64_t>(m));
        RngStream init_rng = derive_stream(chain_seed, "init");
        std::vector<float> w0 = init_weights<float>(model, init_rng);
        ChainResult<float> r =
            run_chain<float>(model, train, std::move(w0), sampler, cfg.energy.lambda, chain_seed,
                             augment, mode);
        out.diverged = out.diverged || r.diverged;
        out.member_seeds.push_back(chain_seed);
        for (ChainCheckpoint<float>& e : r.store.entries) out.pool.entries.push_back(std::move(e));
        if (m == chains - 1) {
            r.store.entries.clear();
            out.chain = std::move(r);
        }
    }

    if (name == "sghmc-single")
        out.pool = last_cycle_only(out.pool, sampler.cycles);

    const std::vector<int> picks =
        select_samples(out.pool, cfg.protocol.samples, SelectMode::Even, &out.truncated);
    out.members.reserve(picks.size());
    for (int i : picks) out.members.push_back(out.pool.entries[static_cast<std::size_t>(i)].w);

    out.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

// Predictive distribution for one image under a trained protocol. The salt
// (typically the example id) pins the MC-dropout noise to the image, so
// evaluation order never changes results.
inline Tensor<float> protocol_distribution(const Model& model, const TrainedProtocol& tp,
                                           const ProtocolConfig& pcfg, const Tensor<float>& image,
                                           std::uint64_t seed, std::string_view salt) {
    if (tp.dropout_inference) {
        RngStream rng = derive_stream(derive_seed(seed, "mc-dropout"), salt);
        return mc_dropout_predict<float>(model, tp.members.front(), image, pcfg.dropout_passes, rng);
    }
    return ensemble_predict<float>(model, tp.members, image);
}

struct SplitEvaluation {
    CalibrationReport calibration;
    double mean_dice = 0.0;                    // mean over images of mean foreground dice
    std::vector<double> image_dice;
    std::vector<Tensor<float>> distributions;  // per-image predictive probabilities
    std::vector<LabelMap> predictions;
};

inline SplitEvaluation evaluate_split(const Model& model, const TrainedProtocol& tp,
                                      const ProtocolConfig& pcfg, const Dataset<float>& split,
                                      int classes, std::uint64_t seed) {
    if (split.empty()) throw std::invalid_argument("evaluate_split: empty split");
    SplitEvaluation out;
    CalibrationAccumulator acc(classes);
    double dice_sum = 0.0;
    for (const Example<float>& ex : split) {
        Tensor<float> probs = protocol_distribution(model, tp, pcfg, ex.image, seed, ex.id);
        LabelMap pred = argmax_segmentation(probs);
        acc.add_map(probs, ex.label);
        const double d = mean_foreground_dice(pred, ex.label, classes);
        dice_sum += d;
        out.image_dice.push_back(d);
        out.distributions.push_back(std::move(probs));
        out.predictions.push_back(std::move(pred));
    }
    out.calibration = acc.report();
    out.mean_dice = dice_sum / static_cast<double>(split.size());
    return out;
}

// Mean pairwise functional distance among the members (ensemble row and
// diagonal excluded); the spread of the ensemble in function space.
inline double member_functional_diversity(const DiversityReport& rep, bool* defined = nullptr) {
    const int m = rep.functional.dim(0) - 1;
    double sum = 0.0;
    int n = 0;
    for (int i = 0; i < m; ++i)
        for (int j = i + 1; j < m; ++j) {
            const double v = rep.functional.at(i, j);
            if (std::isfinite(v)) {
                sum += v;
                ++n;
            }
        }
    if (defined) *defined = n > 0;
    return n > 0 ? sum / n : 0.0;
}

// Functional confusion on the split, completed with the weight-space views
// (pairwise cosines and explored volume) when enough members exist for them.
inline DiversityReport protocol_diversity(const Model& model, const TrainedProtocol& tp,
                                          const Dataset<float>& split, int classes,
                                          double smooth = 1e-5, int n_sigma = 5) {
    std::vector<std::vector<LabelMap>> sample_preds(tp.members.size());
    std::vector<LabelMap> ensemble_preds, truth;
    for (const Example<float>& ex : split) {
        for (std::size_t k = 0; k < tp.members.size(); ++k)
            sample_preds[k].push_back(argmax_segmentation(predict<float>(model, tp.members[k], ex.image)));
        ensemble_preds.push_back(argmax_segmentation(ensemble_predict<float>(model, tp.members, ex.image)));
        truth.push_back(ex.label);
    }
    DiversityReport rep = diversity_confusion(sample_preds, ensemble_preds, truth, classes, smooth);
    if (tp.members.size() >= 2) rep.cosine = cosine_matrix<float>(tp.members);
    if (static_cast<int>(tp.members.size()) >= n_sigma)
        rep.volume = explored_volume<float>(tp.members, n_sigma);
    return rep;
}

struct SweepRow {
    double temperature = 0.0;
    double lambda = 0.0;
    bool augmented = false;
    double nll = 0.0;
    double ece = 0.0;
    double mean_dice = 0.0;
    double functional_diversity = 0.0;
    bool functional_defined = false;
    double explored_volume = 0.0;
    bool volume_rank_deficient = false;
    bool diverged = false;
};

// Grid sweep over temperature, prior strength and augmentation. Each cell
// trains one cyclical multi-cycle chain and reports test calibration and
// accuracy, functional spread on the validation split, and the weight-space
// volume covered by the selected members.
inline std::vector<SweepRow> temperature_sweep(const RunConfig& base, const DatasetBundle& data,
                                               std::span<const double> temps,
                                               std::span<const double> lambdas,
                                               std::span<const bool> aug_flags) {
    if (temps.empty() || lambdas.empty() || aug_flags.empty())
        throw std::invalid_argument("temperature_sweep: empty grid axis");
    std::vector<SweepRow> rows;
    for (const bool aug : aug_flags)
        for (const double lambda : lambdas)
            for (const double T : temps) {
                RunConfig cfg = base;
                cfg.protocol.name = "sghmc-multi";
                cfg.sampler.temperature = T;
                cfg.energy.lambda = lambda;
                cfg.augment.enabled = aug;
                cfg.validate();

                const Model model = build_model(cfg.model);
                const TrainedProtocol tp = train_protocol(cfg, model, data.train);

                SweepRow row;
                row.temperature = T;
                row.lambda = lambda;
                row.augmented = aug;
                row.diverged = tp.diverged;
                const SplitEvaluation ev =
                    evaluate_split(model, tp, cfg.protocol, data.test_in, cfg.model.classes, cfg.seed);
                row.nll = ev.calibration.nll;
                row.ece = ev.calibration.ece;
                row.mean_dice = ev.mean_dice;

                const DiversityReport rep =
                    protocol_diversity(model, tp, data.val, cfg.model.classes, cfg.model.loss_smooth);
                row.functional_diversity = member_functional_diversity(rep, &row.functional_defined);
                row.explored_volume = rep.volume.volume;
                row.volume_rank_deficient = rep.volume.rank_deficient;
                rows.push_back(row);
            }
    return rows;
}

struct Provenance {
    std::uint64_t seed = 0;
    std::uint64_t config_hash = 0;
    std::string protocol;
    double wall_ms = 0.0;
    std::vector<std::uint64_t> member_seeds;
    bool truncated = false;
    bool diverged = false;
};

inline Provenance provenance_of(const RunConfig& cfg, const TrainedProtocol& tp) {
    Provenance p;
    p.seed = cfg.seed;
    p.config_hash = config_hash(cfg);
    p.protocol = tp.name;
    p.wall_ms = tp.wall_ms;
    p.member_seeds = tp.member_seeds;
    p.truncated = tp.truncated;
    p.diverged = tp.diverged;
    return p;
}

// Wall time is reported but deliberately not part of the identity: a rerun
// with the same seed and config hash must reproduce everything else bitwise.
inline nlohmann::json provenance_json(const Provenance& p) {
    return {{"seed", p.seed},
            {"config_hash", p.config_hash},
            {"protocol", p.protocol},
            {"wall_ms", p.wall_ms},
            {"member_seeds", p.member_seeds},
            {"truncated", p.truncated},
            {"diverged", p.diverged}};
}

}  // namespace coldseg
