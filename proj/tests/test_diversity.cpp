#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "coldseg/diversity.hpp"
#include "coldseg/rng.hpp"

using namespace coldseg;

namespace {

std::vector<double> axis(int d, int k, double scale) {
    std::vector<double> v(static_cast<std::size_t>(d), 0.0);
    v[static_cast<std::size_t>(k)] = scale;
    return v;
}

}  // namespace

TEST_CASE("cosine matrix basics") {
    std::vector<std::vector<double>> s = {
        {1.0, 0.0, 0.0},
        {2.0, 0.0, 0.0},  // same direction, different scale
        {0.0, 3.0, 0.0},  // orthogonal
        {-1.0, 0.0, 0.0},
    };
    const Tensor<double> c = cosine_matrix<double>(s);
    REQUIRE(c.shape == Shape({4, 4}));
    for (int i = 0; i < 4; ++i) REQUIRE(c.at(i, i) == 1.0);
    REQUIRE(c.at(0, 1) == Catch::Approx(1.0).epsilon(1e-15));
    REQUIRE(c.at(0, 2) == 0.0);
    REQUIRE(c.at(0, 3) == Catch::Approx(-1.0).epsilon(1e-15));
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) REQUIRE(c.at(i, j) == c.at(j, i));

    s.push_back({0.0, 0.0, 0.0});
    REQUIRE_THROWS_AS(cosine_matrix<double>(s), std::invalid_argument);
    const std::vector<std::vector<double>> one = {{1.0, 0.0, 0.0}};
    REQUIRE_THROWS_AS(cosine_matrix<double>(one), std::invalid_argument);
}

TEST_CASE("cosine matrix ignores a global rescale") {
    RngStream rng(60);
    std::vector<std::vector<double>> s(4, std::vector<double>(10));
    for (auto& v : s)
        for (auto& x : v) x = rng.normal();
    std::vector<std::vector<double>> scaled = s;
    for (auto& v : scaled)
        for (auto& x : v) x *= 7.5;
    const Tensor<double> a = cosine_matrix<double>(s);
    const Tensor<double> b = cosine_matrix<double>(scaled);
    for (std::size_t i = 0; i < a.v.size(); ++i) REQUIRE(b.v[i] == Catch::Approx(a.v[i]).margin(1e-12));
}

TEST_CASE("explored volume of orthogonal samples is the norm product") {
    std::vector<std::vector<double>> s;
    for (int k = 0; k < 5; ++k) s.push_back(axis(8, k, static_cast<double>(k + 1)));
    const VolumeResult r = explored_volume<double>(s, 5);
    REQUIRE_FALSE(r.rank_deficient);
    REQUIRE(r.volume == Catch::Approx(120.0).epsilon(1e-9));
    REQUIRE(r.sigmas.size() == 5);
    for (int k = 0; k < 5; ++k) REQUIRE(r.sigmas[static_cast<std::size_t>(k)] == Catch::Approx(5.0 - k).epsilon(1e-9));

    REQUIRE_THROWS_AS(explored_volume<double>(s, 6), std::invalid_argument);
}

TEST_CASE("explored volume flags rank deficiency") {
    std::vector<std::vector<double>> s(6, axis(8, 2, 3.0));  // six identical samples
    const VolumeResult r = explored_volume<double>(s, 2);
    REQUIRE(r.rank_deficient);
    REQUIRE(r.volume == 0.0);
}

TEST_CASE("explored volume scales as the n_sigma power") {
    RngStream rng(61);
    std::vector<std::vector<double>> s(6, std::vector<double>(12));
    for (auto& v : s)
        for (auto& x : v) x = rng.normal();
    std::vector<std::vector<double>> scaled = s;
    for (auto& v : scaled)
        for (auto& x : v) x *= 2.0;
    const VolumeResult a = explored_volume<double>(s, 3);
    const VolumeResult b = explored_volume<double>(scaled, 3);
    REQUIRE_FALSE(a.rank_deficient);
    REQUIRE(b.volume == Catch::Approx(8.0 * a.volume).epsilon(1e-9));
}

TEST_CASE("gram-route singular values match the transposed route") {
    // XX' and X'X share nonzero eigenvalues, so the sample-side Gram must
    // reproduce the feature-side spectrum.
    RngStream rng(62);
    const int m = 7, d = 5;
    std::vector<std::vector<double>> s(m, std::vector<double>(d));
    for (auto& v : s)
        for (auto& x : v) x = rng.normal();

    const std::vector<double> sig = sample_singular_values<double>(s);

    Tensor<double> feat({d, d});
    for (int a = 0; a < d; ++a)
        for (int b = 0; b < d; ++b) {
            double acc = 0.0;
            for (int i = 0; i < m; ++i)
                acc += s[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)] *
                       s[static_cast<std::size_t>(i)][static_cast<std::size_t>(b)];
            feat.at(a, b) = acc;
        }
    const EigenSym eig = eigen_symmetric(feat);
    for (int k = 0; k < d; ++k)
        REQUIRE(sig[static_cast<std::size_t>(k)] ==
                Catch::Approx(std::sqrt(std::max(eig.values[static_cast<std::size_t>(k)], 0.0))).epsilon(1e-9));
    // The extra sample-side values vanish.
    for (int k = d; k < m; ++k) REQUIRE(sig[static_cast<std::size_t>(k)] < 1e-6 * sig[0]);
}

TEST_CASE("error mask marks disagreements") {
    LabelMap pred({2, 2}), ref({2, 2});
    pred.v = {0, 1, 2, 0};
    ref.v = {0, 1, 0, 1};
    const LabelMap e = error_mask(pred, ref);
    REQUIRE(e.v == std::vector<uint8_t>({0, 0, 1, 1}));
}

TEST_CASE("functional distance over error voxels") {
    // One 4x4 image; the mask selects the last row.
    LabelMap mask({4, 4});
    for (int x = 0; x < 4; ++x) mask.at(3, x) = 1;

    LabelMap a({4, 4}), b({4, 4}), c({4, 4});
    for (int x = 0; x < 4; ++x) {
        a.at(3, x) = 1;
        b.at(3, x) = 1;
        c.at(3, x) = 2;
    }
    // Predictions may differ off-mask without affecting the distance.
    a.at(0, 0) = 2;

    const std::vector<LabelMap> masks = {mask};
    SECTION("identical on the mask gives exactly zero") {
        const FunctionalDistance d = functional_distance({&a, 1}, {&b, 1}, masks, 3);
        REQUIRE(d.defined);
        REQUIRE(d.used_images == 1);
        REQUIRE(d.value == 0.0);
    }
    SECTION("total disagreement approaches one") {
        const FunctionalDistance d = functional_distance({&a, 1}, {&c, 1}, masks, 3);
        REQUIRE(d.defined);
        REQUIRE(d.value == Catch::Approx(1.0).margin(1e-3));
    }
    SECTION("symmetry") {
        const FunctionalDistance ab = functional_distance({&a, 1}, {&c, 1}, masks, 3);
        const FunctionalDistance ba = functional_distance({&c, 1}, {&a, 1}, masks, 3);
        REQUIRE(ab.value == ba.value);
    }
    SECTION("empty masks are skipped, all-empty is undefined") {
        const LabelMap none({4, 4});
        const std::vector<LabelMap> empty_masks = {none};
        const FunctionalDistance d = functional_distance({&a, 1}, {&c, 1}, empty_masks, 3);
        REQUIRE_FALSE(d.defined);
        REQUIRE(d.used_images == 0);
    }
}

TEST_CASE("diversity confusion matrix includes the ensemble") {
    // Ground truth all background; the ensemble wrongly marks two voxels as
    // class 1, defining the error region. Sample A agrees with the
    // ensemble there, sample B predicts background.
    const int n = 1;
    LabelMap gt({4, 4});
    LabelMap ens({4, 4});
    ens.at(1, 1) = 1;
    ens.at(1, 2) = 1;
    LabelMap sa = ens;
    LabelMap sb({4, 4});

    const std::vector<std::vector<LabelMap>> sample_preds = {{sa}, {sb}};
    const std::vector<LabelMap> ens_preds(static_cast<std::size_t>(n), ens);
    const std::vector<LabelMap> gts(static_cast<std::size_t>(n), gt);

    const DiversityReport rep = diversity_confusion(sample_preds, ens_preds, gts, 3);
    REQUIRE(rep.functional.shape == Shape({3, 3}));
    REQUIRE(rep.functional_defined);
    REQUIRE(rep.skipped_images == 0);
    for (int i = 0; i < 3; ++i) REQUIRE(rep.functional.at(i, i) == 0.0);
    // A matches the ensemble on the error voxels; B disagrees with both.
    REQUIRE(rep.functional.at(0, 2) == 0.0);
    REQUIRE(rep.functional.at(0, 1) == Catch::Approx(1.0).margin(1e-3));
    REQUIRE(rep.functional.at(1, 2) == Catch::Approx(1.0).margin(1e-3));
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) REQUIRE(rep.functional.at(i, j) == rep.functional.at(j, i));
    REQUIRE(rep.functional_row_mean[0] == Catch::Approx(rep.functional.at(0, 1) / 2.0).epsilon(1e-12));

    SECTION("identical samples give a zero block") {
        const std::vector<std::vector<LabelMap>> same = {{sa}, {sa}};
        const DiversityReport r2 = diversity_confusion(same, ens_preds, gts, 3);
        REQUIRE(r2.functional.at(0, 1) == 0.0);
    }
    SECTION("a perfect ensemble leaves the distance undefined") {
        const std::vector<LabelMap> perfect(static_cast<std::size_t>(n), gt);
        const DiversityReport r3 = diversity_confusion(sample_preds, perfect, gts, 3);
        REQUIRE_FALSE(r3.functional_defined);
        REQUIRE(r3.skipped_images == 1);
    }
}

TEST_CASE("gram-schmidt plane recovers its anchors") {
    const std::vector<double> w1 = {1.0, 1.0, 1.0, 1.0};
    const std::vector<double> w2 = {4.0, 1.0, 1.0, 1.0};  // w2 - w1 = 3 e0
    const std::vector<double> w3 = {2.0, 3.0, 1.0, 1.0};  // w3 - w1 = (1, 2, 0, 0)

    const PlaneBasis basis = plane_gram_schmidt(w1, w2, w3);
    REQUIRE(basis.origin == w1);
    REQUIRE(basis.dir_a == std::vector<double>({1.0, 0.0, 0.0, 0.0}));
    REQUIRE(basis.dir_b[0] == Catch::Approx(0.0).margin(1e-15));
    REQUIRE(basis.dir_b[1] == Catch::Approx(1.0).epsilon(1e-15));

    // Loss = squared distance to w2; the grid hits zero exactly at w2's
    // plane coordinates (a, b) = (|w2 - w1|, 0).
    auto loss = [&](const std::vector<double>& p) {
        double s = 0.0;
        for (std::size_t k = 0; k < p.size(); ++k) s += (p[k] - w2[k]) * (p[k] - w2[k]);
        return s;
    };
    const PlaneGrid grid = loss_plane_grid(basis, 0.0, 3.0, 0.0, 2.0, 4, 3, loss);
    REQUIRE(grid.a_coords == std::vector<double>({0.0, 1.0, 2.0, 3.0}));
    REQUIRE(grid.b_coords == std::vector<double>({0.0, 1.0, 2.0}));
    REQUIRE(grid.loss.at(3, 0) == Catch::Approx(0.0).margin(1e-12));   // at w2
    REQUIRE(grid.loss.at(0, 0) == Catch::Approx(9.0).epsilon(1e-12));  // at w1
    REQUIRE_THROWS_AS(loss_plane_grid(basis, 0.0, 3.0, 0.0, 2.0, 4, 3, nullptr), std::invalid_argument);

    // Collinear anchors are rejected.
    const std::vector<double> w3_bad = {7.0, 1.0, 1.0, 1.0};
    REQUIRE_THROWS_AS(plane_gram_schmidt(w1, w2, w3_bad), std::invalid_argument);
    REQUIRE_THROWS_AS(plane_gram_schmidt(w1, w1, w3), std::invalid_argument);
}

TEST_CASE("pca plane axes follow the spread of the cloud") {
    // Eight samples at the corners of a box with side lengths 8, 4, 2
    // along axes 0, 1, 2 of a 5-d space, centered at a nonzero mean.
    const std::vector<double> mean = {10.0, -3.0, 0.5, 7.0, -2.0};
    std::vector<std::vector<double>> s;
    for (int mask = 0; mask < 8; ++mask) {
        std::vector<double> v = mean;
        v[0] += (mask & 1) ? 4.0 : -4.0;
        v[1] += (mask & 2) ? 2.0 : -2.0;
        v[2] += (mask & 4) ? 1.0 : -1.0;
        s.push_back(std::move(v));
    }

    const PlaneBasis basis = plane_pca<double>(s, 2, 3);
    for (std::size_t k = 0; k < mean.size(); ++k)
        REQUIRE(basis.origin[k] == Catch::Approx(mean[k]).margin(1e-12));
    // Component 2 is the medium axis (1), component 3 the small axis (2).
    REQUIRE(std::abs(basis.dir_a[1]) == Catch::Approx(1.0).epsilon(1e-9));
    REQUIRE(std::abs(basis.dir_b[2]) == Catch::Approx(1.0).epsilon(1e-9));
    REQUIRE(std::abs(detail::dot(basis.dir_a, basis.dir_b)) < 1e-9);

    // Too few samples or out-of-range components are rejected.
    std::vector<std::vector<double>> few(s.begin(), s.begin() + 5);
    REQUIRE_THROWS_AS(plane_pca<double>(few, 2, 3), std::invalid_argument);
    REQUIRE_THROWS_AS(plane_pca<double>(s, 2, 2), std::invalid_argument);
    REQUIRE_THROWS_AS(plane_pca<double>(s, 1, 8), std::invalid_argument);
    // Components beyond the box's rank are numerically zero.
    REQUIRE_THROWS_AS(plane_pca<double>(s, 4, 5), std::invalid_argument);
}
