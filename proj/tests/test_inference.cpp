#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "coldseg/inference.hpp"
#include "coldseg/model.hpp"

using namespace coldseg;

namespace {

Model small_unet(double dropout_p = 0.0) {
    ModelConfig cfg;
    cfg.levels = 2;
    cfg.base_channels = 4;
    cfg.classes = 3;
    cfg.image_h = 8;
    cfg.image_w = 8;
    cfg.dropout_p = dropout_p;
    return build_model(cfg);
}

Tensor<float> random_image(uint64_t seed, int h, int w) {
    RngStream rng(seed);
    Tensor<float> img({1, h, w});
    for (auto& v : img.v) v = static_cast<float>(rng.uniform());
    return img;
}

}  // namespace

TEST_CASE("ensemble prediction is the member mean and stays a distribution") {
    const Model m = small_unet();
    std::vector<std::vector<float>> members;
    for (uint64_t s = 0; s < 3; ++s) {
        RngStream rng = derive_stream(s, "init");
        members.push_back(init_weights<float>(m, rng));
    }
    const Tensor<float> image = random_image(50, 8, 8);

    const Tensor<float> ens = ensemble_predict<float>(m, members, image);
    std::vector<Tensor<float>> singles;
    for (const auto& w : members) singles.push_back(predict<float>(m, w, image));

    for (std::size_t i = 0; i < ens.v.size(); ++i) {
        const double mean = (singles[0].v[i] + singles[1].v[i] + singles[2].v[i]) / 3.0;
        REQUIRE(ens.v[i] == Catch::Approx(mean).margin(1e-6));
    }
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            float s = 0.0f;
            for (int c = 0; c < 3; ++c) s += ens.at(c, y, x);
            REQUIRE(std::abs(s - 1.0f) < 1e-5f);
        }

    REQUIRE_THROWS_AS(ensemble_predict<float>(m, std::span<const std::vector<float>>{}, image),
                      std::invalid_argument);
}

TEST_CASE("mc-dropout prediction is deterministic given the stream") {
    const Model m = small_unet(0.5);
    RngStream init = derive_stream(3, "init");
    const std::vector<float> w = init_weights<float>(m, init);
    const Tensor<float> image = random_image(51, 8, 8);

    RngStream a = derive_stream(77, "mc"), b = derive_stream(77, "mc");
    const Tensor<float> pa = mc_dropout_predict<float>(m, w, image, 8, a);
    const Tensor<float> pb = mc_dropout_predict<float>(m, w, image, 8, b);
    REQUIRE(pa.v == pb.v);

    // A single pass equals predict with the same stream state.
    RngStream c = derive_stream(78, "mc"), d = derive_stream(78, "mc");
    const Tensor<float> one = mc_dropout_predict<float>(m, w, image, 1, c);
    const Tensor<float> ref = predict<float>(m, w, image, true, &d);
    REQUIRE(one.v == ref.v);

    // Averaging distinct passes changes the map.
    RngStream e = derive_stream(77, "mc");
    const Tensor<float> many = mc_dropout_predict<float>(m, w, image, 2, e);
    REQUIRE(many.v != pa.v);
}

TEST_CASE("categorical entropy spans zero to ln C") {
    Tensor<double> probs({4, 1, 2});
    for (int c = 0; c < 4; ++c) probs.at(c, 0, 0) = 0.25;  // uniform pixel
    probs.at(2, 0, 1) = 1.0;                               // certain pixel
    const Tensor<double> ent = categorical_entropy(probs);
    REQUIRE(ent.at(0, 0) == Catch::Approx(std::log(4.0)).epsilon(1e-12));
    REQUIRE(ent.at(0, 1) == 0.0);
}

TEST_CASE("binary entropy peaks at half") {
    Tensor<double> probs({2, 1, 3});
    probs.at(0, 0, 0) = 0.5;
    probs.at(1, 0, 0) = 0.5;
    probs.at(0, 0, 1) = 1.0;
    probs.at(0, 0, 2) = 0.9;
    probs.at(1, 0, 2) = 0.1;
    const Tensor<double> ent = binary_entropy(probs, 0);
    REQUIRE(ent.at(0, 0) == Catch::Approx(std::log(2.0)).epsilon(1e-12));
    REQUIRE(ent.at(0, 1) == 0.0);
    REQUIRE(ent.at(0, 2) > 0.0);
    REQUIRE(ent.at(0, 2) < ent.at(0, 0));
    REQUIRE_THROWS_AS(binary_entropy(probs, 5), std::invalid_argument);
}

TEST_CASE("argmax segmentation breaks ties toward the lowest class") {
    Tensor<float> probs({3, 2, 2});
    // Pixel (0,0): clear winner class 2.
    probs.at(0, 0, 0) = 0.1f;
    probs.at(1, 0, 0) = 0.2f;
    probs.at(2, 0, 0) = 0.7f;
    // Pixel (0,1): tie between classes 0 and 2.
    probs.at(0, 0, 1) = 0.4f;
    probs.at(1, 0, 1) = 0.2f;
    probs.at(2, 0, 1) = 0.4f;
    // Pixel (1,0): tie between classes 1 and 2.
    probs.at(0, 1, 0) = 0.2f;
    probs.at(1, 1, 0) = 0.4f;
    probs.at(2, 1, 0) = 0.4f;
    // Pixel (1,1): all equal.
    for (int c = 0; c < 3; ++c) probs.at(c, 1, 1) = 1.0f / 3.0f;

    const LabelMap seg = argmax_segmentation(probs);
    REQUIRE(seg.at(0, 0) == 2);
    REQUIRE(seg.at(0, 1) == 0);
    REQUIRE(seg.at(1, 0) == 1);
    REQUIRE(seg.at(1, 1) == 0);

    const Tensor<double> conf = max_probability(probs);
    REQUIRE(conf.at(0, 0) == Catch::Approx(0.7).margin(1e-7));
    REQUIRE(conf.at(1, 1) == Catch::Approx(1.0 / 3.0).margin(1e-7));
}
