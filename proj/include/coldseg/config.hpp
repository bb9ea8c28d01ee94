#pragma once

// One JSON-serializable configuration for a whole run: model, energy,
// sampler, data generation, augmentation, protocol knobs. Parsing rejects
// unknown keys at every nesting level so a typo'd option fails loudly
// instead of silently running the defaults. The canonical dump (sorted
// keys, fixed layout) is hashed into a run identity that checkpoints carry.

#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coldseg/energy.hpp"
#include "coldseg/model.hpp"
#include "coldseg/rng.hpp"
#include "coldseg/sampler.hpp"
#include "coldseg/synth.hpp"

namespace coldseg {

struct ProtocolConfig {
    std::string name = "sghmc-multi";
    int members = 5;         // independent chains for deep ensembles
    int dropout_passes = 16; // stochastic forward passes for mc-dropout
    int samples = 16;        // ensemble members drawn from a checkpoint store

    void validate() const {
        static const std::set<std::string> known = {"vanilla",      "mc-dropout", "deep-ensembles",
                                                    "sgd-const",    "sghmc-single", "sghmc-multi"};
        if (!known.count(name)) throw std::invalid_argument("protocol: unknown name '" + name + "'");
        if (members < 1) throw std::invalid_argument("protocol: members must be positive");
        if (dropout_passes < 1) throw std::invalid_argument("protocol: dropout_passes must be positive");
        if (samples < 1) throw std::invalid_argument("protocol: samples must be positive");
    }
};

struct RunConfig {
    std::uint64_t seed = 1;
    std::string out = "runs/run";
    ModelConfig model;
    EnergyConfig energy;
    SamplerConfig sampler;
    SceneConfig scene;
    ShiftConfig shift;
    AugmentConfig augment;
    SplitCounts counts;
    ProtocolConfig protocol;

    void validate() const {
        coldseg::validate(sampler);
        energy.validate();
        scene.validate();
        shift.validate();
        augment.validate();
        counts.validate();
        protocol.validate();
        if (model.classes != kSceneClasses)
            throw std::invalid_argument("config: model classes must match the scene's four classes");
        if (model.image_h != scene.size || model.image_w != scene.size)
            throw std::invalid_argument("config: model image size must match scene size");
    }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known,
                           const std::string& where) {
    if (!j.is_object()) throw std::invalid_argument("config: " + where + " must be an object");
    for (const auto& item : j.items())
        if (!known.count(item.key()))
            throw std::invalid_argument("config: unknown key '" + item.key() + "' in " + where);
}

template <typename T>
void take(const nlohmann::json& j, const char* key, T& dst) {
    if (j.contains(key)) dst = j.at(key).get<T>();
}

inline ScheduleKind schedule_from_name(const std::string& name) {
    if (name == "cyclical") return ScheduleKind::Cyclical;
    if (name == "constant") return ScheduleKind::Constant;
    if (name == "decay") return ScheduleKind::Decay;
    throw std::invalid_argument("config: unknown schedule '" + name + "'");
}

inline const char* schedule_name(ScheduleKind k) {
    switch (k) {
        case ScheduleKind::Cyclical: return "cyclical";
        case ScheduleKind::Constant: return "constant";
        default: return "decay";
    }
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
    using detail::reject_unknown;
    using detail::take;

    reject_unknown(j, {"seed", "out", "model", "energy", "sampler", "scene", "shift", "augment",
                       "counts", "protocol"},
                   "the top level");
    RunConfig c;
    take(j, "seed", c.seed);
    take(j, "out", c.out);

    if (j.contains("model")) {
        const nlohmann::json& m = j.at("model");
        reject_unknown(m, {"arch", "levels", "base_channels", "in_channels", "classes", "image_h",
                           "image_w", "dropout_p", "dropout_sites", "mlp_layers", "leaky_slope",
                           "norm_eps", "loss_smooth", "prob_floor"},
                       "model");
        take(m, "arch", c.model.arch);
        take(m, "levels", c.model.levels);
        take(m, "base_channels", c.model.base_channels);
        take(m, "in_channels", c.model.in_channels);
        take(m, "classes", c.model.classes);
        take(m, "image_h", c.model.image_h);
        take(m, "image_w", c.model.image_w);
        take(m, "dropout_p", c.model.dropout_p);
        take(m, "dropout_sites", c.model.dropout_sites);
        take(m, "mlp_layers", c.model.mlp_layers);
        take(m, "leaky_slope", c.model.leaky_slope);
        take(m, "norm_eps", c.model.norm_eps);
        take(m, "loss_smooth", c.model.loss_smooth);
        take(m, "prob_floor", c.model.prob_floor);
    }
    if (j.contains("energy")) {
        const nlohmann::json& e = j.at("energy");
        reject_unknown(e, {"lambda", "temperature"}, "energy");
        take(e, "lambda", c.energy.lambda);
        take(e, "temperature", c.energy.temperature);
    }
    if (j.contains("sampler")) {
        const nlohmann::json& s = j.at("sampler");
        reject_unknown(s, {"epochs", "cycles", "gamma", "eta0", "eta_restart", "restart_epochs",
                           "decay_power", "mu", "temperature", "batch", "thinning", "schedule"},
                       "sampler");
        take(s, "epochs", c.sampler.epochs);
        take(s, "cycles", c.sampler.cycles);
        take(s, "gamma", c.sampler.gamma);
        take(s, "eta0", c.sampler.eta0);
        take(s, "eta_restart", c.sampler.eta_restart);
        take(s, "restart_epochs", c.sampler.restart_epochs);
        take(s, "decay_power", c.sampler.decay_power);
        take(s, "mu", c.sampler.mu);
        take(s, "temperature", c.sampler.temperature);
        take(s, "batch", c.sampler.batch);
        take(s, "thinning", c.sampler.thinning);
        if (s.contains("schedule"))
            c.sampler.schedule = detail::schedule_from_name(s.at("schedule").get<std::string>());
    }
    if (j.contains("scene")) {
        const nlohmann::json& s = j.at("scene");
        reject_unknown(s, {"size", "class_mean", "noise_std", "disk_r_lo", "disk_r_hi", "ring_t_lo",
                           "ring_t_hi", "blob_r_lo", "blob_r_hi", "center_jitter", "blob_angle_lo",
                           "blob_angle_hi", "illum_slope", "max_tries"},
                       "scene");
        take(s, "size", c.scene.size);
        take(s, "class_mean", c.scene.class_mean);
        take(s, "noise_std", c.scene.noise_std);
        take(s, "disk_r_lo", c.scene.disk_r_lo);
        take(s, "disk_r_hi", c.scene.disk_r_hi);
        take(s, "ring_t_lo", c.scene.ring_t_lo);
        take(s, "ring_t_hi", c.scene.ring_t_hi);
        take(s, "blob_r_lo", c.scene.blob_r_lo);
        take(s, "blob_r_hi", c.scene.blob_r_hi);
        take(s, "center_jitter", c.scene.center_jitter);
        take(s, "blob_angle_lo", c.scene.blob_angle_lo);
        take(s, "blob_angle_hi", c.scene.blob_angle_hi);
        take(s, "illum_slope", c.scene.illum_slope);
        take(s, "max_tries", c.scene.max_tries);
    }
    if (j.contains("shift")) {
        const nlohmann::json& s = j.at("shift");
        reject_unknown(s, {"gamma_lo", "gamma_hi", "invert_p", "extra_noise"}, "shift");
        take(s, "gamma_lo", c.shift.gamma_lo);
        take(s, "gamma_hi", c.shift.gamma_hi);
        take(s, "invert_p", c.shift.invert_p);
        take(s, "extra_noise", c.shift.extra_noise);
    }
    if (j.contains("augment")) {
        const nlohmann::json& a = j.at("augment");
        reject_unknown(a, {"enabled", "hflip_p", "vflip_p", "rot_max_deg", "scale_lo", "scale_hi",
                           "noise_std"},
                       "augment");
        take(a, "enabled", c.augment.enabled);
        take(a, "hflip_p", c.augment.hflip_p);
        take(a, "vflip_p", c.augment.vflip_p);
        take(a, "rot_max_deg", c.augment.rot_max_deg);
        take(a, "scale_lo", c.augment.scale_lo);
        take(a, "scale_hi", c.augment.scale_hi);
        take(a, "noise_std", c.augment.noise_std);
    }
    if (j.contains("counts")) {
        const nlohmann::json& n = j.at("counts");
        reject_unknown(n, {"train", "val", "test"}, "counts");
        take(n, "train", c.counts.train);
        take(n, "val", c.counts.val);
        take(n, "test", c.counts.test);
    }
    if (j.contains("protocol")) {
        const nlohmann::json& p = j.at("protocol");
        reject_unknown(p, {"name", "members", "dropout_passes", "samples"}, "protocol");
        take(p, "name", c.protocol.name);
        take(p, "members", c.protocol.members);
        take(p, "dropout_passes", c.protocol.dropout_passes);
        take(p, "samples", c.protocol.samples);
    }
    return c;
}

inline nlohmann::json config_to_json(const RunConfig& c) {
    nlohmann::json j;
    j["seed"] = c.seed;
    j["out"] = c.out;
    j["model"] = {{"arch", c.model.arch},
                  {"levels", c.model.levels},
                  {"base_channels", c.model.base_channels},
                  {"in_channels", c.model.in_channels},
                  {"classes", c.model.classes},
                  {"image_h", c.model.image_h},
                  {"image_w", c.model.image_w},
                  {"dropout_p", c.model.dropout_p},
                  {"dropout_sites", c.model.dropout_sites},
                  {"mlp_layers", c.model.mlp_layers},
                  {"leaky_slope", c.model.leaky_slope},
                  {"norm_eps", c.model.norm_eps},
                  {"loss_smooth", c.model.loss_smooth},
                  {"prob_floor", c.model.prob_floor}};
    j["energy"] = {{"lambda", c.energy.lambda}, {"temperature", c.energy.temperature}};
    j["sampler"] = {{"epochs", c.sampler.epochs},
                    {"cycles", c.sampler.cycles},
                    {"gamma", c.sampler.gamma},
                    {"eta0", c.sampler.eta0},
                    {"eta_restart", c.sampler.eta_restart},
                    {"restart_epochs", c.sampler.restart_epochs},
                    {"decay_power", c.sampler.decay_power},
                    {"mu", c.sampler.mu},
                    {"temperature", c.sampler.temperature},
                    {"batch", c.sampler.batch},
                    {"thinning", c.sampler.thinning},
                    {"schedule", detail::schedule_name(c.sampler.schedule)}};
    j["scene"] = {{"size", c.scene.size},
                  {"class_mean", c.scene.class_mean},
                  {"noise_std", c.scene.noise_std},
                  {"disk_r_lo", c.scene.disk_r_lo},
                  {"disk_r_hi", c.scene.disk_r_hi},
                  {"ring_t_lo", c.scene.ring_t_lo},
                  {"ring_t_hi", c.scene.ring_t_hi},
                  {"blob_r_lo", c.scene.blob_r_lo},
                  {"blob_r_hi", c.scene.blob_r_hi},
                  {"center_jitter", c.scene.center_jitter},
                  {"blob_angle_lo", c.scene.blob_angle_lo},
                  {"blob_angle_hi", c.scene.blob_angle_hi},
                  {"illum_slope", c.scene.illum_slope},
                  {"max_tries", c.scene.max_tries}};
    j["shift"] = {{"gamma_lo", c.shift.gamma_lo},
                  {"gamma_hi", c.shift.gamma_hi},
                  {"invert_p", c.shift.invert_p},
                  {"extra_noise", c.shift.extra_noise}};
    j["augment"] = {{"enabled", c.augment.enabled},
                    {"hflip_p", c.augment.hflip_p},
                    {"vflip_p", c.augment.vflip_p},
                    {"rot_max_deg", c.augment.rot_max_deg},
                    {"scale_lo", c.augment.scale_lo},
                    {"scale_hi", c.augment.scale_hi},
                    {"noise_std", c.augment.noise_std}};
    j["counts"] = {{"train", c.counts.train}, {"val", c.counts.val}, {"test", c.counts.test}};
    j["protocol"] = {{"name", c.protocol.name},
                     {"members", c.protocol.members},
                     {"dropout_passes", c.protocol.dropout_passes},
                     {"samples", c.protocol.samples}};
    return j;
}

inline RunConfig parse_config(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("config: invalid JSON: ") + e.what());
    }
    try {
        return config_from_json(j);
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("config: bad value type: ") + e.what());
    }
}

// Identity of a run setup. The out directory is excluded: where results are
// written must not change what gets computed. The seed is included, so two
// runs of the same hash are bit-identical reruns of each other.
inline std::uint64_t config_hash(const RunConfig& c) {
    nlohmann::json j = config_to_json(c);
    j.erase("out");
    return fnv1a(j.dump());
}

}  // namespace coldseg
