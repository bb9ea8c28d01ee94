#pragma once

// Small dense linear algebra in double precision: enough for d<=10 target
// covariances and M x M Gram matrices. Not a general-purpose BLAS.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "coldseg/tensor.hpp"

namespace coldseg {

inline Tensor<double> mat_identity(int n) {
    Tensor<double> m({n, n});
    for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

inline std::vector<double> mat_vec(const Tensor<double>& a, const std::vector<double>& x) {
    const int n = a.dim(0), m = a.dim(1);
    if (static_cast<int>(x.size()) != m) throw std::invalid_argument("mat_vec size mismatch");
    std::vector<double> y(n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) y[i] += a.at(i, j) * x[j];
    return y;
}

inline double frobenius(const Tensor<double>& a) {
    double s = 0.0;
    for (double v : a.v) s += v * v;
    return std::sqrt(s);
}

// Gauss-Jordan inverse with partial pivoting. Throws on singular input.
inline Tensor<double> mat_inverse(Tensor<double> a) {
    if (a.rank() != 2 || a.dim(0) != a.dim(1)) throw std::invalid_argument("mat_inverse expects square matrix");
    const int n = a.dim(0);
    Tensor<double> inv = mat_identity(n);
    for (int col = 0; col < n; ++col) {
        int pivot = col;
        for (int r = col + 1; r < n; ++r)
            if (std::abs(a.at(r, col)) > std::abs(a.at(pivot, col))) pivot = r;
        if (std::abs(a.at(pivot, col)) < 1e-300) throw std::runtime_error("mat_inverse: singular matrix");
        if (pivot != col)
            for (int j = 0; j < n; ++j) {
                std::swap(a.at(pivot, j), a.at(col, j));
                std::swap(inv.at(pivot, j), inv.at(col, j));
            }
        const double d = a.at(col, col);
        for (int j = 0; j < n; ++j) {
            a.at(col, j) /= d;
            inv.at(col, j) /= d;
        }
        for (int r = 0; r < n; ++r) {
            if (r == col) continue;
            const double f = a.at(r, col);
            if (f == 0.0) continue;
            for (int j = 0; j < n; ++j) {
                a.at(r, j) -= f * a.at(col, j);
                inv.at(r, j) -= f * inv.at(col, j);
            }
        }
    }
    return inv;
}

struct EigenSym {
    std::vector<double> values;  // descending
    Tensor<double> vectors;      // columns are eigenvectors, aligned with values
};

// Cyclic Jacobi eigendecomposition for symmetric matrices.
inline EigenSym eigen_symmetric(Tensor<double> a, int max_sweeps = 64) {
    if (a.rank() != 2 || a.dim(0) != a.dim(1)) throw std::invalid_argument("eigen_symmetric expects square matrix");
    const int n = a.dim(0);
    Tensor<double> v = mat_identity(n);

    auto off_norm = [&]() {
        double s = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) s += a.at(p, q) * a.at(p, q);
        return std::sqrt(2.0 * s);
    };

    double scale = frobenius(a);
    if (scale == 0.0) scale = 1.0;
    for (int sweep = 0; sweep < max_sweeps && off_norm() > 1e-14 * scale; ++sweep) {
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                const double apq = a.at(p, q);
                if (std::abs(apq) <= 1e-300) continue;
                const double tau = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                const double t = (tau >= 0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = a.at(k, p), akq = a.at(k, q);
                    a.at(k, p) = c * akp - s * akq;
                    a.at(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a.at(p, k), aqk = a.at(q, k);
                    a.at(p, k) = c * apk - s * aqk;
                    a.at(q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = v.at(k, p), vkq = v.at(k, q);
                    v.at(k, p) = c * vkp - s * vkq;
                    v.at(k, q) = s * vkp + c * vkq;
                }
            }
    }

    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](int i, int j) { return a.at(i, i) > a.at(j, j); });

    EigenSym out;
    out.values.resize(n);
    out.vectors = Tensor<double>({n, n});
    for (int j = 0; j < n; ++j) {
        out.values[j] = a.at(order[j], order[j]);
        for (int i = 0; i < n; ++i) out.vectors.at(i, j) = v.at(i, order[j]);
    }
    return out;
}

}  // namespace coldseg
