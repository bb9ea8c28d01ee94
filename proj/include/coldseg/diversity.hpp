#pragma once

// Diversity analyses over a set of weight samples and their predictions:
// weight-space cosine similarity, explored volume (product of leading
// singular values of the sample matrix), function-space distances restricted
// to ensemble error voxels, and 2-D loss-plane grids through weight space.

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "coldseg/linalg.hpp"
#include "coldseg/tensor.hpp"

namespace coldseg {

// Pairwise cosine similarities of the sample vectors; symmetric with unit
// diagonal.
template <typename S>
Tensor<double> cosine_matrix(std::span<const std::vector<S>> samples) {
    const int m = static_cast<int>(samples.size());
    if (m < 2) throw std::invalid_argument("cosine_matrix: need at least two samples");
    std::vector<double> norms(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        double sq = 0.0;
        for (S v : samples[static_cast<std::size_t>(i)]) sq += static_cast<double>(v) * v;
        if (sq == 0.0) throw std::invalid_argument("cosine_matrix: zero-norm sample");
        norms[static_cast<std::size_t>(i)] = std::sqrt(sq);
    }
    Tensor<double> out({m, m});
    for (int i = 0; i < m; ++i) {
        out.at(i, i) = 1.0;
        for (int j = i + 1; j < m; ++j) {
            if (samples[static_cast<std::size_t>(j)].size() != samples[static_cast<std::size_t>(i)].size())
                throw std::invalid_argument("cosine_matrix: mixed sample sizes");
            double dot = 0.0;
            for (std::size_t k = 0; k < samples[static_cast<std::size_t>(i)].size(); ++k)
                dot += static_cast<double>(samples[static_cast<std::size_t>(i)][k]) *
                       static_cast<double>(samples[static_cast<std::size_t>(j)][k]);
            out.at(i, j) = out.at(j, i) = dot / (norms[static_cast<std::size_t>(i)] * norms[static_cast<std::size_t>(j)]);
        }
    }
    return out;
}

// Singular values of the sample matrix [w_1 ... w_M], largest first,
// obtained from the M x M Gram matrix so the weight dimension never enters
// a decomposition.
template <typename S>
std::vector<double> sample_singular_values(std::span<const std::vector<S>> samples) {
    const int m = static_cast<int>(samples.size());
    if (m < 1) throw std::invalid_argument("sample_singular_values: no samples");
    Tensor<double> gram({m, m});
    for (int i = 0; i < m; ++i)
        for (int j = i; j < m; ++j) {
            if (samples[static_cast<std::size_t>(j)].size() != samples[static_cast<std::size_t>(i)].size())
                throw std::invalid_argument("sample_singular_values: mixed sample sizes");
            double dot = 0.0;
            for (std::size_t k = 0; k < samples[static_cast<std::size_t>(i)].size(); ++k)
                dot += static_cast<double>(samples[static_cast<std::size_t>(i)][k]) *
                       static_cast<double>(samples[static_cast<std::size_t>(j)][k]);
            gram.at(i, j) = gram.at(j, i) = dot;
        }
    const EigenSym eig = eigen_symmetric(gram);
    std::vector<double> sigma;
    sigma.reserve(static_cast<std::size_t>(m));
    for (double lambda : eig.values) sigma.push_back(std::sqrt(std::max(lambda, 0.0)));
    return sigma;
}

struct VolumeResult {
    double volume = 0.0;
    std::vector<double> sigmas;   // all singular values, descending
    bool rank_deficient = false;  // fewer than n_sigma numerically nonzero
};

// Explored volume: the product of the first n_sigma singular values of the
// sample matrix. A numerical rank below n_sigma reports volume zero with
// the flag set instead of multiplying noise.
template <typename S>
VolumeResult explored_volume(std::span<const std::vector<S>> samples, int n_sigma = 5) {
    if (n_sigma < 1) throw std::invalid_argument("explored_volume: n_sigma must be positive");
    if (static_cast<int>(samples.size()) < n_sigma)
        throw std::invalid_argument("explored_volume: need at least n_sigma samples");
    VolumeResult out;
    out.sigmas = sample_singular_values(samples);
    const double tol = 1e-7 * out.sigmas.front();
    double vol = 1.0;
    for (int k = 0; k < n_sigma; ++k) {
        if (out.sigmas[static_cast<std::size_t>(k)] <= tol) {
            out.rank_deficient = true;
            out.volume = 0.0;
            return out;
        }
        vol *= out.sigmas[static_cast<std::size_t>(k)];
    }
    out.volume = vol;
    return out;
}

// Voxels where a prediction disagrees with the reference.
inline LabelMap error_mask(const LabelMap& pred, const LabelMap& ref) {
    if (pred.shape != ref.shape) throw std::invalid_argument("error_mask: shape mismatch");
    LabelMap e(pred.shape);
    for (std::size_t i = 0; i < e.v.size(); ++i) e.v[i] = pred.v[i] != ref.v[i] ? 1 : 0;
    return e;
}

namespace detail {

// Smoothed Dice between two hard predictions restricted to masked voxels,
// averaged over the foreground classes present in the masked region of
// either prediction. Nothing present means the predictions agree there.
inline double masked_dice(const LabelMap& a, const LabelMap& b, const LabelMap& mask, int classes,
                          double smooth) {
    if (a.shape != b.shape || a.shape != mask.shape)
        throw std::invalid_argument("masked_dice: shape mismatch");
    double acc = 0.0;
    int used = 0;
    for (int c = 1; c < classes; ++c) {
        long na = 0, nb = 0, inter = 0;
        for (std::size_t i = 0; i < mask.v.size(); ++i) {
            if (!mask.v[i]) continue;
            const bool ia = a.v[i] == c, ib = b.v[i] == c;
            na += ia;
            nb += ib;
            inter += ia && ib;
        }
        if (na + nb == 0) continue;
        acc += (2.0 * static_cast<double>(inter) + 2.0 * smooth) /
               (static_cast<double>(na + nb) + 2.0 * smooth);
        ++used;
    }
    return used == 0 ? 1.0 : acc / used;
}

}  // namespace detail

struct FunctionalDistance {
    double value = 0.0;
    bool defined = false;  // false when every image's error mask is empty
    int used_images = 0;
};

// Function-space distance between two prediction sets over a validation
// set: one minus the mean masked Dice, where the mask marks voxels the
// ensemble got wrong. Images the ensemble segments perfectly are skipped.
inline FunctionalDistance functional_distance(std::span<const LabelMap> preds_a,
                                              std::span<const LabelMap> preds_b,
                                              std::span<const LabelMap> error_masks, int classes,
                                              double smooth = 1e-5) {
    if (preds_a.size() != preds_b.size() || preds_a.size() != error_masks.size())
        throw std::invalid_argument("functional_distance: image count mismatch");
    FunctionalDistance out;
    double acc = 0.0;
    for (std::size_t i = 0; i < preds_a.size(); ++i) {
        bool any = false;
        for (uint8_t v : error_masks[i].v)
            if (v) {
                any = true;
                break;
            }
        if (!any) continue;
        acc += detail::masked_dice(preds_a[i], preds_b[i], error_masks[i], classes, smooth);
        out.used_images++;
    }
    if (out.used_images == 0) return out;
    out.defined = true;
    out.value = 1.0 - acc / out.used_images;
    return out;
}

struct DiversityReport {
    Tensor<double> cosine;      // M x M
    VolumeResult volume;        // over the raw weight samples
    Tensor<double> functional;  // (M+1) x (M+1), ensemble last
    std::vector<double> functional_row_mean;
    bool functional_defined = false;
    int skipped_images = 0;  // images whose error mask was empty
};

// Pairwise functional-distance matrix over per-sample prediction sets with
// the ensemble prediction appended as the last row and column. The error
// mask comes from the ensemble against the ground truth.
inline DiversityReport diversity_confusion(
    const std::vector<std::vector<LabelMap>>& sample_preds,  // [M][n_images]
    const std::vector<LabelMap>& ensemble_pred, const std::vector<LabelMap>& ground_truth,
    int classes, double smooth = 1e-5) {
    const int m = static_cast<int>(sample_preds.size());
    if (m < 2) throw std::invalid_argument("diversity_confusion: need at least two samples");
    const std::size_t n = ensemble_pred.size();
    if (ground_truth.size() != n) throw std::invalid_argument("diversity_confusion: image count mismatch");
    for (const auto& sp : sample_preds)
        if (sp.size() != n) throw std::invalid_argument("diversity_confusion: image count mismatch");

    std::vector<LabelMap> masks;
    masks.reserve(n);
    int nonempty = 0;
    for (std::size_t i = 0; i < n; ++i) {
        masks.push_back(error_mask(ensemble_pred[i], ground_truth[i]));
        bool any = false;
        for (uint8_t v : masks.back().v)
            if (v) {
                any = true;
                break;
            }
        nonempty += any;
    }

    DiversityReport out;
    out.skipped_images = static_cast<int>(n) - nonempty;
    out.functional = Tensor<double>({m + 1, m + 1});
    auto row = [&](int i) -> std::span<const LabelMap> {
        return i < m ? std::span<const LabelMap>(sample_preds[static_cast<std::size_t>(i)])
                     : std::span<const LabelMap>(ensemble_pred);
    };
    out.functional_defined = nonempty > 0;
    for (int i = 0; i <= m; ++i)
        for (int j = i + 1; j <= m; ++j) {
            const FunctionalDistance d = functional_distance(row(i), row(j), masks, classes, smooth);
            const double v = d.defined ? d.value : 0.0;
            out.functional.at(i, j) = out.functional.at(j, i) = v;
        }
    out.functional_row_mean.assign(static_cast<std::size_t>(m) + 1, 0.0);
    for (int i = 0; i <= m; ++i) {
        double s = 0.0;
        for (int j = 0; j <= m; ++j)
            if (j != i) s += out.functional.at(i, j);
        out.functional_row_mean[static_cast<std::size_t>(i)] = s / m;
    }
    return out;
}

struct PlaneBasis {
    std::vector<double> origin;
    std::vector<double> dir_a;  // unit
    std::vector<double> dir_b;  // unit, orthogonal to dir_a
};

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace detail

// Plane through the sample mean spanned by two principal components of the
// centered samples (1-indexed; the loss-surface slices use 2 and 3).
template <typename S>
PlaneBasis plane_pca(std::span<const std::vector<S>> samples, int comp_a = 2, int comp_b = 3) {
    const int m = static_cast<int>(samples.size());
    if (m < 6) throw std::invalid_argument("plane_pca: need at least six samples");
    if (comp_a < 1 || comp_b < 1 || comp_a == comp_b)
        throw std::invalid_argument("plane_pca: component indices must be distinct and positive");
    if (std::max(comp_a, comp_b) > m - 1)
        throw std::invalid_argument("plane_pca: component index exceeds the centered rank");
    const std::size_t d = samples.front().size();

    PlaneBasis basis;
    basis.origin.assign(d, 0.0);
    for (const auto& s : samples)
        for (std::size_t k = 0; k < d; ++k) basis.origin[k] += static_cast<double>(s[k]);
    for (double& v : basis.origin) v /= m;

    std::vector<std::vector<double>> x(static_cast<std::size_t>(m), std::vector<double>(d));
    for (int i = 0; i < m; ++i)
        for (std::size_t k = 0; k < d; ++k)
            x[static_cast<std::size_t>(i)][k] = static_cast<double>(samples[static_cast<std::size_t>(i)][k]) - basis.origin[k];

    Tensor<double> gram({m, m});
    for (int i = 0; i < m; ++i)
        for (int j = i; j < m; ++j)
            gram.at(i, j) = gram.at(j, i) = detail::dot(x[static_cast<std::size_t>(i)], x[static_cast<std::size_t>(j)]);
    const EigenSym eig = eigen_symmetric(gram);

    auto component = [&](int comp) {
        const double lambda = eig.values[static_cast<std::size_t>(comp - 1)];
        if (lambda <= 1e-12 * std::max(eig.values.front(), 1.0))
            throw std::invalid_argument("plane_pca: requested component is numerically zero");
        std::vector<double> v(d, 0.0);
        for (int i = 0; i < m; ++i) {
            const double u = eig.vectors.at(i, comp - 1);
            for (std::size_t k = 0; k < d; ++k) v[k] += u * x[static_cast<std::size_t>(i)][k];
        }
        const double inv = 1.0 / std::sqrt(detail::dot(v, v));
        for (double& vk : v) vk *= inv;
        return v;
    };
    basis.dir_a = component(comp_a);
    basis.dir_b = component(comp_b);
    return basis;
}

// Plane anchored at w1 spanned by the Gram-Schmidt orthonormalization of
// (w2 - w1, w3 - w1).
inline PlaneBasis plane_gram_schmidt(std::span<const double> w1, std::span<const double> w2,
                                     std::span<const double> w3) {
    if (w1.size() != w2.size() || w1.size() != w3.size())
        throw std::invalid_argument("plane_gram_schmidt: size mismatch");
    const std::size_t d = w1.size();
    PlaneBasis basis;
    basis.origin.assign(w1.begin(), w1.end());
    basis.dir_a.resize(d);
    for (std::size_t k = 0; k < d; ++k) basis.dir_a[k] = w2[k] - w1[k];
    const double na = std::sqrt(detail::dot(basis.dir_a, basis.dir_a));
    if (na == 0.0) throw std::invalid_argument("plane_gram_schmidt: w2 equals w1");
    for (double& v : basis.dir_a) v /= na;

    basis.dir_b.resize(d);
    for (std::size_t k = 0; k < d; ++k) basis.dir_b[k] = w3[k] - w1[k];
    const double proj = detail::dot(basis.dir_b, basis.dir_a);
    for (std::size_t k = 0; k < d; ++k) basis.dir_b[k] -= proj * basis.dir_a[k];
    const double nb = std::sqrt(detail::dot(basis.dir_b, basis.dir_b));
    if (nb <= 1e-12 * (1.0 + std::abs(proj)))
        throw std::invalid_argument("plane_gram_schmidt: anchors are collinear");
    for (double& v : basis.dir_b) v /= nb;
    return basis;
}

struct PlaneGrid {
    std::vector<double> a_coords;
    std::vector<double> b_coords;
    Tensor<double> loss;  // [len(a_coords), len(b_coords)]
};

// Evaluates a loss functional on a regular grid over the plane:
// L(origin + a * dir_a + b * dir_b).
inline PlaneGrid loss_plane_grid(const PlaneBasis& basis, double a_min, double a_max, double b_min,
                                 double b_max, int na, int nb,
                                 const std::function<double(const std::vector<double>&)>& loss) {
    if (na < 2 || nb < 2) throw std::invalid_argument("loss_plane_grid: need at least a 2x2 grid");
    if (!loss) throw std::invalid_argument("loss_plane_grid: missing loss evaluator");
    PlaneGrid grid;
    for (int i = 0; i < na; ++i)
        grid.a_coords.push_back(a_min + (a_max - a_min) * static_cast<double>(i) / (na - 1));
    for (int j = 0; j < nb; ++j)
        grid.b_coords.push_back(b_min + (b_max - b_min) * static_cast<double>(j) / (nb - 1));
    grid.loss = Tensor<double>({na, nb});
    std::vector<double> point(basis.origin.size());
    for (int i = 0; i < na; ++i)
        for (int j = 0; j < nb; ++j) {
            const double a = grid.a_coords[static_cast<std::size_t>(i)];
            const double b = grid.b_coords[static_cast<std::size_t>(j)];
            for (std::size_t k = 0; k < point.size(); ++k)
                point[k] = basis.origin[k] + a * basis.dir_a[k] + b * basis.dir_b[k];
            grid.loss.at(i, j) = loss(point);
        }
    return grid;
}

}  // namespace coldseg
