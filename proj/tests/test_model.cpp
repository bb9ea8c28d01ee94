#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "coldseg/model.hpp"

using namespace coldseg;

TEST_CASE("mlp [2,8,2] has 42 parameters") {
    ModelConfig cfg;
    cfg.arch = "mlp";
    cfg.mlp_layers = {2, 8, 2};
    const Model m = build_model(cfg);
    REQUIRE(m.n_params == 42);
    REQUIRE(m.out_classes == 2);
}

TEST_CASE("parameter count is a pure function of the config") {
    ModelConfig cfg;
    cfg.levels = 3;
    cfg.base_channels = 8;
    cfg.classes = 3;
    cfg.image_h = 32;
    cfg.image_w = 32;
    const Model a = build_model(cfg);
    const Model b = build_model(cfg);
    REQUIRE(a.n_params == b.n_params);
    REQUIRE(a.predict.params().size() == b.predict.params().size());
    for (std::size_t i = 0; i < a.predict.params().size(); ++i) {
        REQUIRE(a.predict.params()[i].name == b.predict.params()[i].name);
        REQUIRE(a.predict.params()[i].offset == b.predict.params()[i].offset);
    }
    // Image size must not change the parameter count.
    cfg.image_h = 16;
    cfg.image_w = 16;
    REQUIRE(build_model(cfg).n_params == a.n_params);
}

TEST_CASE("canonical layout tiles the weight vector encoder to decoder") {
    ModelConfig cfg;
    cfg.levels = 2;
    cfg.base_channels = 2;
    cfg.classes = 2;
    cfg.image_h = 8;
    cfg.image_w = 8;
    const Model m = build_model(cfg);
    std::size_t expect = 0;
    bool seen_decoder = false;
    for (const ParamSpec& p : m.predict.params()) {
        REQUIRE(p.offset == expect);
        expect += p.count;
        if (p.name.rfind("dec", 0) == 0) seen_decoder = true;
        if (p.name.rfind("enc", 0) == 0) REQUIRE_FALSE(seen_decoder);
    }
    REQUIRE(expect == m.n_params);
    // Within a conv block: kernel, bias, then the norm affine pair.
    const auto& ps = m.predict.params();
    REQUIRE(ps[0].name == "enc0.c1.k");
    REQUIRE(ps[1].name == "enc0.c1.b");
    REQUIRE(ps[2].name == "enc0.c1.ng");
    REQUIRE(ps[3].name == "enc0.c1.nb");
}

TEST_CASE("image extents must divide by 2^(levels-1)") {
    ModelConfig cfg;
    cfg.levels = 3;
    cfg.image_h = 30;  // not divisible by 4
    cfg.image_w = 32;
    REQUIRE_THROWS_AS(build_model(cfg), std::invalid_argument);
}

TEST_CASE("init respects kinds and predict outputs a distribution") {
    ModelConfig cfg;
    cfg.levels = 3;
    cfg.base_channels = 4;
    cfg.classes = 4;
    cfg.image_h = 16;
    cfg.image_w = 16;
    const Model m = build_model(cfg);

    RngStream rng = derive_stream(1, "init");
    const std::vector<float> w = init_weights<float>(m, rng);
    for (const ParamSpec& p : m.predict.params()) {
        if (p.init == InitKind::Ones)
            for (std::size_t i = 0; i < p.count; ++i) REQUIRE(w[p.offset + i] == 1.0f);
        if (p.init == InitKind::Zeros)
            for (std::size_t i = 0; i < p.count; ++i) REQUIRE(w[p.offset + i] == 0.0f);
        if (p.init == InitKind::FanInUniform) {
            const float bound = 1.0f / std::sqrt(static_cast<float>(p.fan_in));
            for (std::size_t i = 0; i < p.count; ++i) {
                REQUIRE(w[p.offset + i] >= -bound);
                REQUIRE(w[p.offset + i] <= bound);
            }
        }
    }

    RngStream rng2 = derive_stream(1, "init");
    REQUIRE(init_weights<float>(m, rng2) == w);

    Tensor<float> image({1, 16, 16});
    RngStream irng(5);
    for (auto& v : image.v) v = static_cast<float>(irng.uniform());
    const Tensor<float> probs = predict<float>(m, w, image);
    REQUIRE(probs.shape == Shape({4, 16, 16}));
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            float s = 0.0f;
            for (int c = 0; c < 4; ++c) s += probs.at(c, y, x);
            REQUIRE(std::abs(s - 1.0f) < 1e-5f);
        }
}

TEST_CASE("deterministic predictions repeat; stochastic passes vary") {
    ModelConfig cfg;
    cfg.levels = 2;
    cfg.base_channels = 4;
    cfg.classes = 3;
    cfg.image_h = 8;
    cfg.image_w = 8;
    cfg.dropout_p = 0.5;
    const Model m = build_model(cfg);
    RngStream rng(3);
    const std::vector<float> w = init_weights<float>(m, rng);
    Tensor<float> image({1, 8, 8});
    for (auto& v : image.v) v = static_cast<float>(rng.uniform());

    const auto p1 = predict<float>(m, w, image);
    const auto p2 = predict<float>(m, w, image);
    REQUIRE(p1.v == p2.v);

    RngStream d1 = derive_stream(9, "mc", 0), d2 = derive_stream(9, "mc", 1);
    const auto s1 = predict<float>(m, w, image, true, &d1);
    const auto s2 = predict<float>(m, w, image, true, &d2);
    REQUIRE(s1.v != s2.v);

    REQUIRE_THROWS_AS(predict<float>(m, w, image, true, nullptr), std::invalid_argument);
}

TEST_CASE("dropout sites default to the innermost stages") {
    ModelConfig cfg;
    cfg.levels = 3;
    REQUIRE(resolved_dropout_sites(cfg) == std::vector<int>({1, 2}));
    cfg.dropout_sites = {0};
    REQUIRE(resolved_dropout_sites(cfg) == std::vector<int>({0}));
}

TEST_CASE("unknown arch is rejected") {
    ModelConfig cfg;
    cfg.arch = "transformer";
    REQUIRE_THROWS_AS(build_model(cfg), std::invalid_argument);
}
