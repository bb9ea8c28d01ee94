#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "coldseg/protocol.hpp"

using namespace coldseg;

namespace {

// Small but real: a two-level net on 16x16 scenes, a handful of epochs.
RunConfig desk_config(const std::string& protocol) {
    RunConfig cfg;
    cfg.seed = 17;
    cfg.scene.size = 16;
    cfg.model.image_h = cfg.model.image_w = 16;
    cfg.model.levels = 2;
    cfg.model.base_channels = 4;
    cfg.sampler.epochs = 8;
    cfg.sampler.cycles = 2;
    cfg.sampler.gamma = 0.5;
    cfg.sampler.batch = 3;
    cfg.sampler.thinning = 1;
    cfg.sampler.restart_epochs = 1;
    cfg.sampler.eta0 = 0.05;
    cfg.sampler.eta_restart = 0.1;
    cfg.counts = {6, 3, 3};
    cfg.protocol.name = protocol;
    cfg.protocol.samples = 4;
    cfg.protocol.members = 3;
    cfg.protocol.dropout_passes = 4;
    cfg.augment.enabled = false;
    cfg.validate();
    return cfg;
}

struct Fixture {
    RunConfig cfg;
    DatasetBundle data;
    Model model;

    explicit Fixture(const std::string& protocol)
        : cfg(desk_config(protocol)),
          data(generate_dataset(cfg.scene, cfg.shift, cfg.counts, cfg.seed)),
          model(build_model(cfg.model)) {}
};

}  // namespace

TEST_CASE("protocol identity fixes schedule, update and temperature") {
    for (const char* name : {"vanilla", "mc-dropout", "deep-ensembles"}) {
        RunConfig cfg = desk_config(name);
        const SamplerConfig s = effective_sampler(cfg);
        REQUIRE(s.schedule == ScheduleKind::Decay);
        REQUIRE(s.temperature == 0.0);
    }
    {
        RunConfig cfg = desk_config("sgd-const");
        const SamplerConfig s = effective_sampler(cfg);
        REQUIRE(s.schedule == ScheduleKind::Constant);
        REQUIRE(s.cycles == 1);
        REQUIRE(s.temperature == 0.0);
    }
    for (const char* name : {"sghmc-single", "sghmc-multi"}) {
        RunConfig cfg = desk_config(name);
        cfg.sampler.temperature = 2e-5;
        const SamplerConfig s = effective_sampler(cfg);
        REQUIRE(s.schedule == ScheduleKind::Cyclical);
        REQUIRE(s.temperature == 2e-5);
        REQUIRE(s.cycles == cfg.sampler.cycles);
    }
}

TEST_CASE("vanilla trains one model and keeps only its final weights") {
    Fixture f("vanilla");
    TrainedProtocol tp = train_protocol(f.cfg, f.model, f.data.train);
    REQUIRE(tp.pool.entries.size() == 1);
    REQUIRE(tp.members.size() == 1);
    REQUIRE(tp.truncated);  // asked for 4 members, a single run yields one
    REQUIRE(tp.members[0] == tp.chain.final_w);
    REQUIRE_FALSE(tp.dropout_inference);
    REQUIRE(tp.member_seeds == std::vector<std::uint64_t>{f.cfg.seed});
}

TEST_CASE("mc-dropout wants dropout and keeps inference stochastic but pinned") {
    RunConfig cfg = desk_config("mc-dropout");
    DatasetBundle data = generate_dataset(cfg.scene, cfg.shift, cfg.counts, cfg.seed);

    SECTION("a zero dropout rate is refused") {
        Model model = build_model(cfg.model);
        REQUIRE_THROWS_WITH(train_protocol(cfg, model, data.train),
                            Catch::Matchers::ContainsSubstring("dropout_p"));
    }

    SECTION("stochastic inference depends on the salt, not the call order") {
        cfg.model.dropout_p = 0.2;
        Model model = build_model(cfg.model);
        TrainedProtocol tp = train_protocol(cfg, model, data.train);
        REQUIRE(tp.dropout_inference);
        REQUIRE(tp.members.size() == 1);

        const Tensor<float>& img = data.test_in[0].image;
        Tensor<float> a = protocol_distribution(model, tp, cfg.protocol, img, cfg.seed, "test-000");
        Tensor<float> b = protocol_distribution(model, tp, cfg.protocol, img, cfg.seed, "test-000");
        Tensor<float> c = protocol_distribution(model, tp, cfg.protocol, img, cfg.seed, "test-001");
        REQUIRE(a.v == b.v);
        REQUIRE(a.v != c.v);
    }
}

TEST_CASE("deep ensembles trains independent members") {
    Fixture f("deep-ensembles");
    TrainedProtocol tp = train_protocol(f.cfg, f.model, f.data.train);
    REQUIRE(tp.pool.entries.size() == 3);
    REQUIRE(tp.members.size() == 3);
    REQUIRE(tp.member_seeds.size() == 3);
    REQUIRE(std::set<std::uint64_t>(tp.member_seeds.begin(), tp.member_seeds.end()).size() == 3);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = i + 1; j < 3; ++j) REQUIRE(tp.members[i] != tp.members[j]);
}

TEST_CASE("single-cycle selection is a subset of the multi-cycle pool") {
    Fixture multi("sghmc-multi");
    TrainedProtocol tp_multi = train_protocol(multi.cfg, multi.model, multi.data.train);

    RunConfig single_cfg = multi.cfg;
    single_cfg.protocol.name = "sghmc-single";
    TrainedProtocol tp_single = train_protocol(single_cfg, multi.model, multi.data.train);

    // The chain is identical (protocol name does not feed the sampler), so
    // every last-cycle pool entry must appear verbatim in the multi pool.
    REQUIRE(tp_multi.chain.final_w == tp_single.chain.final_w);
    std::set<int> multi_cycles;
    for (const auto& e : tp_multi.pool.entries) multi_cycles.insert(e.cycle);
    REQUIRE(multi_cycles.size() == 2);
    REQUIRE_FALSE(tp_single.pool.entries.empty());
    for (const auto& e : tp_single.pool.entries) {
        REQUIRE(e.cycle == multi.cfg.sampler.cycles - 1);
        const bool found = std::any_of(tp_multi.pool.entries.begin(), tp_multi.pool.entries.end(),
                                       [&](const auto& o) { return o.epoch == e.epoch && o.w == e.w; });
        REQUIRE(found);
    }
}

TEST_CASE("sgd-const is the zero-temperature constant-rate chain") {
    Fixture f("sgd-const");
    TrainedProtocol tp = train_protocol(f.cfg, f.model, f.data.train);

    SamplerConfig manual = effective_sampler(f.cfg);
    RngStream init_rng = derive_stream(f.cfg.seed, "init");
    std::vector<float> w0 = init_weights<float>(f.model, init_rng);
    ChainResult<float> chain =
        run_chain<float>(f.model, f.data.train, std::move(w0), manual, f.cfg.energy.lambda, f.cfg.seed);
    REQUIRE(tp.chain.final_w == chain.final_w);
    REQUIRE(tp.pool.entries.size() == chain.store.entries.size());
    for (std::size_t i = 0; i < tp.pool.entries.size(); ++i) {
        REQUIRE(tp.pool.entries[i].cycle == 0);
        REQUIRE(tp.pool.entries[i].w == chain.store.entries[i].w);
    }
}

TEST_CASE("protocol training is a pure function of config and seed") {
    Fixture f("sghmc-multi");
    TrainedProtocol a = train_protocol(f.cfg, f.model, f.data.train);
    TrainedProtocol b = train_protocol(f.cfg, f.model, f.data.train);
    REQUIRE(a.members.size() == b.members.size());
    for (std::size_t i = 0; i < a.members.size(); ++i) REQUIRE(a.members[i] == b.members[i]);

    RunConfig other = f.cfg;
    other.seed = 18;
    TrainedProtocol c = train_protocol(other, f.model, f.data.train);
    REQUIRE(a.members[0] != c.members[0]);
}

TEST_CASE("split evaluation aggregates calibration and accuracy") {
    Fixture f("sghmc-multi");
    TrainedProtocol tp = train_protocol(f.cfg, f.model, f.data.train);
    SplitEvaluation ev = evaluate_split(f.model, tp, f.cfg.protocol, f.data.test_in, 4, f.cfg.seed);

    const std::size_t n_img = f.data.test_in.size();
    REQUIRE(ev.image_dice.size() == n_img);
    REQUIRE(ev.distributions.size() == n_img);
    REQUIRE(ev.predictions.size() == n_img);
    REQUIRE(ev.calibration.n == n_img * 16 * 16);
    REQUIRE(ev.mean_dice >= 0.0);
    REQUIRE(ev.mean_dice <= 1.0);
    REQUIRE(ev.calibration.nll > 0.0);
    for (const Tensor<float>& p : ev.distributions) {
        REQUIRE(p.shape == Shape({4, 16, 16}));
        double s = 0.0;
        for (int c = 0; c < 4; ++c) s += p.at(c, 3, 3);
        REQUIRE(s == Catch::Approx(1.0).margin(1e-4));
    }
    REQUIRE_THROWS_AS(evaluate_split(f.model, tp, f.cfg.protocol, Dataset<float>{}, 4, f.cfg.seed),
                      std::invalid_argument);
}

TEST_CASE("member functional diversity averages the member block") {
    DiversityReport rep;
    rep.cosine = Tensor<double>({3, 3});
    rep.functional = Tensor<double>({4, 4});
    // Member block entries (0,1)=0.2 (0,2)=0.4 (1,2)=0.6; ensemble row holds
    // garbage that must not be touched.
    rep.functional.at(0, 1) = rep.functional.at(1, 0) = 0.2;
    rep.functional.at(0, 2) = rep.functional.at(2, 0) = 0.4;
    rep.functional.at(1, 2) = rep.functional.at(2, 1) = 0.6;
    rep.functional.at(0, 3) = rep.functional.at(3, 0) = 99.0;
    bool defined = false;
    REQUIRE(member_functional_diversity(rep, &defined) == Catch::Approx(0.4));
    REQUIRE(defined);

    // All-NaN member block means no defined pair.
    const double nan = std::nan("");
    rep.functional.at(0, 1) = rep.functional.at(0, 2) = rep.functional.at(1, 2) = nan;
    rep.functional.at(1, 0) = rep.functional.at(2, 0) = rep.functional.at(2, 1) = nan;
    REQUIRE(member_functional_diversity(rep, &defined) == 0.0);
    REQUIRE_FALSE(defined);
}

TEST_CASE("temperature sweep reports one row per grid cell") {
    Fixture f("sghmc-multi");
    RunConfig cfg = f.cfg;
    cfg.protocol.samples = 5;  // volume needs at least n_sigma members
    cfg.sampler.thinning = 1;
    cfg.sampler.epochs = 12;  // three collected epochs per cycle, six total
    const double temps[] = {0.0, 1e-4};
    const double lambdas[] = {3e-5};
    const bool augs[] = {false};
    std::vector<SweepRow> rows = temperature_sweep(cfg, f.data, temps, lambdas, augs);
    REQUIRE(rows.size() == 2);
    REQUIRE(rows[0].temperature == 0.0);
    REQUIRE(rows[1].temperature == 1e-4);
    for (const SweepRow& r : rows) {
        REQUIRE(r.lambda == 3e-5);
        REQUIRE_FALSE(r.augmented);
        REQUIRE_FALSE(r.diverged);
        REQUIRE(r.nll > 0.0);
        REQUIRE(r.ece >= 0.0);
        REQUIRE(r.mean_dice >= 0.0);
        REQUIRE(r.explored_volume >= 0.0);
    }
    // A warm chain wiggles; identical samples would zero the volume.
    REQUIRE(rows[1].explored_volume > 0.0);

    REQUIRE_THROWS_AS(temperature_sweep(cfg, f.data, std::span<const double>{}, lambdas, augs),
                      std::invalid_argument);
}

TEST_CASE("provenance records the run identity without the wall clock") {
    Fixture f("sghmc-multi");
    TrainedProtocol tp = train_protocol(f.cfg, f.model, f.data.train);
    Provenance p = provenance_of(f.cfg, tp);
    REQUIRE(p.seed == f.cfg.seed);
    REQUIRE(p.config_hash == config_hash(f.cfg));
    REQUIRE(p.protocol == "sghmc-multi");
    REQUIRE(p.member_seeds == tp.member_seeds);

    nlohmann::json j = provenance_json(p);
    REQUIRE(j.at("seed").get<std::uint64_t>() == f.cfg.seed);
    REQUIRE(j.at("config_hash").get<std::uint64_t>() == p.config_hash);
    REQUIRE(j.at("protocol").get<std::string>() == "sghmc-multi");
    REQUIRE(j.contains("wall_ms"));
    REQUIRE(j.at("member_seeds").size() == 1);
}
