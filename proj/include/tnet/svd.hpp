#pragma once

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "tnet/errors.hpp"
#include "tnet/tensor.hpp"

namespace tnet {

struct EighResult {
    std::vector<double> values;  // descending
    Matrix vectors;              // column k pairs with values[k]
};

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Deterministic: fixed sweep order, stable descending sort of eigenvalues.
inline EighResult jacobi_eigh(const Matrix& a, std::size_t max_sweeps = 64) {
    if (a.rows != a.cols) throw shape_error("jacobi_eigh: matrix must be square");
    const std::size_t n = a.rows;
    Matrix w = a;
    Matrix vec = Matrix::identity(n);

    const double fro = frobenius_norm(a);
    const double tol = static_cast<double>(n) * DBL_EPSILON * fro;

    auto off_norm = [&]() {
        double s = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) s += 2.0 * w(p, q) * w(p, q);
        return std::sqrt(s);
    };

    std::size_t sweep = 0;
    bool converged = off_norm() <= tol;
    for (; sweep < max_sweeps && !converged; ++sweep) {
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = w(p, q);
                if (apq == 0.0) continue;
                const double tau = (w(q, q) - w(p, p)) / (2.0 * apq);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double wkp = w(k, p), wkq = w(k, q);
                    w(k, p) = c * wkp - s * wkq;
                    w(k, q) = s * wkp + c * wkq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double wpk = w(p, k), wqk = w(q, k);
                    w(p, k) = c * wpk - s * wqk;
                    w(q, k) = s * wpk + c * wqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = vec(k, p), vkq = vec(k, q);
                    vec(k, p) = c * vkp - s * vkq;
                    vec(k, q) = s * vkp + c * vkq;
                }
            }
        }
        converged = off_norm() <= tol;
    }
    if (!converged) throw convergence_error("jacobi eigendecomposition did not converge", sweep);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return w(i, i) > w(j, j); });

    EighResult out;
    out.values.resize(n);
    out.vectors = Matrix(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        out.values[k] = w(order[k], order[k]);
        for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = vec(i, order[k]);
    }
    return out;
}

struct SvdResult {
    Matrix u;               // rows × r, orthonormal columns
    std::vector<double> s;  // r values, nonincreasing, >= 0
    Matrix v;               // cols × r, orthonormal columns (empty if not requested)
};

namespace detail {

/// Flip a column so its largest-magnitude entry is positive (first such
/// entry wins ties).
inline void fix_column_sign(Matrix& m, std::size_t col) {
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double mag = std::abs(m(i, col));
        if (mag > best) {
            best = mag;
            arg = i;
        }
    }
    if (m(arg, col) < 0.0) {
        for (std::size_t i = 0; i < m.rows; ++i) m(i, col) = -m(i, col);
    }
}

/// Fill column `col` with a unit vector orthogonal to columns [0, col),
/// chosen deterministically by Gram-Schmidt over the standard basis.
inline void orthonormal_completion(Matrix& m, std::size_t col) {
    std::vector<double> w(m.rows);
    for (std::size_t cand = 0; cand < m.rows; ++cand) {
        for (std::size_t i = 0; i < m.rows; ++i) w[i] = (i == cand) ? 1.0 : 0.0;
        for (std::size_t k = 0; k < col; ++k) {
            double dot = 0.0;
            for (std::size_t i = 0; i < m.rows; ++i) dot += m(i, k) * w[i];
            for (std::size_t i = 0; i < m.rows; ++i) w[i] -= dot * m(i, k);
        }
        double norm = 0.0;
        for (double x : w) norm += x * x;
        norm = std::sqrt(norm);
        if (norm > 0.5) {
            for (std::size_t i = 0; i < m.rows; ++i) m(i, col) = w[i] / norm;
            fix_column_sign(m, col);
            return;
        }
    }
    throw convergence_error("orthonormal completion found no candidate", col);
}

}  // namespace detail

/// Rank-r truncated SVD via eigendecomposition of the smaller Gram matrix
/// (X·Xᵀ when rows ≤ cols, Xᵀ·X otherwise). Columns beyond the numerical
/// rank get zero singular values and orthonormal completion vectors.
/// Set want_v = false to skip deriving V when only U and S are needed.
inline SvdResult truncated_svd(const Matrix& x, std::size_t r, bool want_v = true,
                               std::size_t max_sweeps = 64) {
    const std::size_t kmin = std::min(x.rows, x.cols);
    if (r < 1 || r > kmin) {
        throw rank_error("truncated_svd: rank " + std::to_string(r) + " out of range [1, " +
                         std::to_string(kmin) + "]");
    }

    const bool gram_is_rows = x.rows <= x.cols;
    const std::size_t g = gram_is_rows ? x.rows : x.cols;

    Matrix gram(g, g);
    if (gram_is_rows) {
        for (std::size_t i = 0; i < g; ++i) {
            for (std::size_t j = i; j < g; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < x.cols; ++k) s += x(i, k) * x(j, k);
                gram(i, j) = s;
                gram(j, i) = s;
            }
        }
    } else {
        for (std::size_t i = 0; i < g; ++i) {
            for (std::size_t j = i; j < g; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < x.rows; ++k) s += x(k, i) * x(k, j);
                gram(i, j) = s;
                gram(j, i) = s;
            }
        }
    }

    EighResult eig = jacobi_eigh(gram, max_sweeps);

    // Numerical rank is decided on the Gram eigenvalues: anything at the
    // level of lambda_max * dim * eps is squared-away noise, so the matching
    // singular value (its square root, ~sigma_max * sqrt(eps)) is zeroed.
    const double lambda_cut = std::max(eig.values[0], 0.0) *
                              static_cast<double>(std::max(x.rows, x.cols)) * DBL_EPSILON;

    SvdResult out;
    out.s.resize(r);
    for (std::size_t k = 0; k < r; ++k) {
        out.s[k] = eig.values[k] > lambda_cut ? std::sqrt(eig.values[k]) : 0.0;
    }

    Matrix side(g, r);
    for (std::size_t k = 0; k < r; ++k) {
        for (std::size_t i = 0; i < g; ++i) side(i, k) = eig.vectors(i, k);
        detail::fix_column_sign(side, k);
    }

    if (gram_is_rows) {
        out.u = std::move(side);
        if (want_v) {
            out.v = Matrix(x.cols, r);
            for (std::size_t k = 0; k < r; ++k) {
                if (out.s[k] > 0.0) {
                    for (std::size_t j = 0; j < x.cols; ++j) {
                        double dot = 0.0;
                        for (std::size_t i = 0; i < x.rows; ++i) dot += x(i, j) * out.u(i, k);
                        out.v(j, k) = dot / out.s[k];
                    }
                } else {
                    detail::orthonormal_completion(out.v, k);
                }
            }
        }
    } else {
        Matrix v = std::move(side);
        out.u = Matrix(x.rows, r);
        for (std::size_t k = 0; k < r; ++k) {
            if (out.s[k] > 0.0) {
                for (std::size_t i = 0; i < x.rows; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < x.cols; ++j) dot += x(i, j) * v(j, k);
                    out.u(i, k) = dot / out.s[k];
                }
            } else {
                detail::orthonormal_completion(out.u, k);
            }
        }
        if (want_v) out.v = std::move(v);
    }
    return out;
}

}  // namespace tnet
