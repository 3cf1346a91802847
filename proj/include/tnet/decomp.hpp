#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "tnet/errors.hpp"
#include "tnet/svd.hpp"
#include "tnet/tensor.hpp"

namespace tnet {

// ---------------------------------------------------------------------------
// Tucker form: core tensor plus one factor matrix per mode.
// ---------------------------------------------------------------------------

struct TuckerFactors {
    DenseTensor core;             // shape (R_0, ..., R_N)
    std::vector<Matrix> factors;  // factor k: I_k x R_k

    Shape shape() const {
        Shape s(factors.size());
        for (std::size_t k = 0; k < factors.size(); ++k) s[k] = factors[k].rows;
        return s;
    }

    Shape ranks() const { return core.shape; }

    void validate() const {
        if (factors.size() != core.order()) {
            throw shape_error("tucker: " + std::to_string(factors.size()) + " factors for core of order " +
                              std::to_string(core.order()));
        }
        for (std::size_t k = 0; k < factors.size(); ++k) {
            if (factors[k].cols != core.shape[k]) {
                throw shape_error("tucker: factor " + std::to_string(k) + " has " +
                                  std::to_string(factors[k].cols) + " cols, core extent is " +
                                  std::to_string(core.shape[k]));
            }
            if (core.shape[k] < 1 || core.shape[k] > factors[k].rows) {
                throw rank_error("tucker: rank " + std::to_string(core.shape[k]) + " at mode " +
                                 std::to_string(k) + " outside [1, " + std::to_string(factors[k].rows) + "]");
            }
        }
    }
};

inline DenseTensor tucker_reconstruct(const TuckerFactors& f) {
    f.validate();
    DenseTensor t = f.core;
    for (std::size_t k = 0; k < f.factors.size(); ++k) t = mode_n_product(t, f.factors[k], k);
    return t;
}

namespace detail {

inline void validate_tucker_ranks(const Shape& shape, const Shape& ranks) {
    if (ranks.size() != shape.size()) {
        throw rank_error("expected " + std::to_string(shape.size()) + " ranks, got " +
                         std::to_string(ranks.size()));
    }
    for (std::size_t k = 0; k < shape.size(); ++k) {
        if (ranks[k] < 1 || ranks[k] > shape[k]) {
            throw rank_error("rank " + std::to_string(ranks[k]) + " at mode " + std::to_string(k) +
                             " outside [1, " + std::to_string(shape[k]) + "]");
        }
    }
}

}  // namespace detail

/// Higher-order SVD: factor k holds the top-R_k left singular vectors of
/// unfold(t, k); the core is t contracted with every factor transposed.
inline TuckerFactors hosvd(const DenseTensor& t, const Shape& ranks) {
    detail::validate_tucker_ranks(t.shape, ranks);
    TuckerFactors f;
    f.factors.reserve(t.order());
    for (std::size_t k = 0; k < t.order(); ++k) {
        f.factors.push_back(truncated_svd(unfold(t, k), ranks[k], false).u);
    }
    f.core = t;
    for (std::size_t k = 0; k < t.order(); ++k) {
        f.core = mode_n_product(f.core, transpose(f.factors[k]), k);
    }
    return f;
}

struct HooiResult {
    TuckerFactors factors;
    std::vector<double> fit_history;  // relative reconstruction error per sweep, [0] = HOSVD
};

/// Higher-order orthogonal iteration starting from HOSVD. Each sweep updates
/// every factor in mode order 0..N; the fit is the relative reconstruction
/// error, computed from the core norm (valid because factors stay
/// orthonormal). Stops when the fit change drops below tol.
inline HooiResult hooi(const DenseTensor& t, const Shape& ranks, double tol = 1e-6,
                       std::size_t max_iter = 100) {
    detail::validate_tucker_ranks(t.shape, ranks);
    const double t_norm = frobenius_norm(t);

    auto fit_of = [&](const DenseTensor& core) {
        if (t_norm == 0.0) return 0.0;
        const double c = frobenius_norm(core);
        return std::sqrt(std::max(0.0, t_norm * t_norm - c * c)) / t_norm;
    };

    HooiResult r;
    r.factors = hosvd(t, ranks);
    r.fit_history.push_back(fit_of(r.factors.core));

    for (std::size_t iter = 0; iter < max_iter; ++iter) {
        DenseTensor partial;  // set per mode below
        for (std::size_t k = 0; k < t.order(); ++k) {
            partial = t;
            for (std::size_t j = 0; j < t.order(); ++j) {
                if (j == k) continue;
                partial = mode_n_product(partial, transpose(r.factors.factors[j]), j);
            }
            r.factors.factors[k] = truncated_svd(unfold(partial, k), ranks[k], false).u;
        }
        r.factors.core = mode_n_product(partial, transpose(r.factors.factors.back()), t.order() - 1);

        const double fit = fit_of(r.factors.core);
        if (!std::isfinite(fit)) throw convergence_error("hooi fit became non-finite", iter + 1);
        const double prev = r.fit_history.back();
        r.fit_history.push_back(fit);
        if (std::abs(prev - fit) < tol) break;
    }
    return r;
}

// ---------------------------------------------------------------------------
// MPS / tensor-train form: chain of third-order cores.
// ---------------------------------------------------------------------------

struct MPSCores {
    std::vector<DenseTensor> cores;  // core k: (R_k, I_k, R_{k+1})

    Shape shape() const {
        Shape s(cores.size());
        for (std::size_t k = 0; k < cores.size(); ++k) s[k] = cores[k].shape[1];
        return s;
    }

    /// Full chain (R_0, ..., R_N) including the unit boundaries.
    Shape rank_chain() const {
        Shape r;
        r.reserve(cores.size() + 1);
        for (const auto& c : cores) r.push_back(c.shape[0]);
        r.push_back(cores.empty() ? 1 : cores.back().shape[2]);
        return r;
    }

    void validate() const {
        if (cores.empty()) throw shape_error("mps: no cores");
        for (std::size_t k = 0; k < cores.size(); ++k) {
            if (cores[k].order() != 3) {
                throw shape_error("mps: core " + std::to_string(k) + " must be third-order");
            }
        }
        if (cores.front().shape[0] != 1 || cores.back().shape[2] != 1) {
            throw rank_error("mps: boundary ranks must both be 1");
        }
        std::size_t left_prod = 1;
        std::size_t right_prod = 1;
        for (const auto& c : cores) right_prod *= c.shape[1];
        for (std::size_t k = 0; k + 1 < cores.size(); ++k) {
            if (cores[k].shape[2] != cores[k + 1].shape[0]) {
                throw shape_error("mps: link rank mismatch between cores " + std::to_string(k) +
                                  " and " + std::to_string(k + 1));
            }
            left_prod *= cores[k].shape[1];
            right_prod /= cores[k].shape[1];
            const std::size_t bound = std::min(left_prod, right_prod);
            if (cores[k].shape[2] > bound) {
                throw rank_error("mps: rank " + std::to_string(cores[k].shape[2]) + " at link " +
                                 std::to_string(k + 1) + " exceeds attainable bound " +
                                 std::to_string(bound));
            }
        }
    }
};

namespace detail {

/// One step of the left-to-right chain contraction:
/// out[r'] = sum_r v[r] * g(r, i, r'), r ascending. Shared by the full
/// reconstruction and the single-element formula so both produce identical
/// floating-point results.
inline void chain_step(const double* v, const DenseTensor& g, std::size_t i, double* out) {
    const std::size_t rl = g.shape[0];
    const std::size_t cols = g.shape[2];
    for (std::size_t rr = 0; rr < cols; ++rr) out[rr] = 0.0;
    const double* base = g.data.data() + i * cols;
    const std::size_t slice = g.shape[1] * cols;
    for (std::size_t r = 0; r < rl; ++r) {
        const double vr = v[r];
        const double* row = base + r * slice;
        for (std::size_t rr = 0; rr < cols; ++rr) out[rr] += vr * row[rr];
    }
}

}  // namespace detail

inline DenseTensor mps_reconstruct(const MPSCores& c) {
    c.validate();
    const std::size_t n = c.cores.size();

    // q holds (prefix count) rows of the running left contraction.
    std::vector<double> q(c.cores[0].shape[1] * c.cores[0].shape[2]);
    std::size_t rows = c.cores[0].shape[1];
    std::size_t width = c.cores[0].shape[2];
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t rr = 0; rr < width; ++rr) q[i * width + rr] = c.cores[0](0, i, rr);

    for (std::size_t k = 1; k < n; ++k) {
        const std::size_t ik = c.cores[k].shape[1];
        const std::size_t next_width = c.cores[k].shape[2];
        std::vector<double> next(rows * ik * next_width);
        for (std::size_t m = 0; m < rows; ++m) {
            for (std::size_t i = 0; i < ik; ++i) {
                detail::chain_step(q.data() + m * width, c.cores[k], i,
                                   next.data() + (m * ik + i) * next_width);
            }
        }
        q = std::move(next);
        rows *= ik;
        width = next_width;
    }
    return DenseTensor(c.shape(), std::move(q));
}

/// W(i_0, ..., i_N) as the chain product of core slices, left to right.
inline double mps_element(const MPSCores& c, std::span<const std::size_t> idx) {
    if (idx.size() != c.cores.size()) {
        throw shape_error("mps_element: index order " + std::to_string(idx.size()) +
                          " does not match core count " + std::to_string(c.cores.size()));
    }
    std::vector<double> v(c.cores[0].shape[2]);
    for (std::size_t rr = 0; rr < v.size(); ++rr) v[rr] = c.cores[0](0, idx[0], rr);
    std::vector<double> next;
    for (std::size_t k = 1; k < c.cores.size(); ++k) {
        next.assign(c.cores[k].shape[2], 0.0);
        detail::chain_step(v.data(), c.cores[k], idx[k], next.data());
        v = next;
    }
    return v[0];
}

struct RankClamp {
    std::size_t position;   // subscript into the rank chain (1..N-1)
    std::size_t requested;
    std::size_t used;
};

struct TtSvdResult {
    MPSCores cores;
    std::vector<RankClamp> clamps;
};

/// Tensor-train decomposition by a sequential truncated-SVD sweep. Interior
/// ranks above the attainable bound are clamped and reported, not rejected.
/// The carry matrix is built as Uᵀ·X, so the wide right factor is never
/// materialized.
inline TtSvdResult tt_svd(const DenseTensor& t, const Shape& interior_ranks) {
    const std::size_t n = t.order();
    if (interior_ranks.size() + 1 != n) {
        throw rank_error("tt_svd: expected " + std::to_string(n ? n - 1 : 0) + " interior ranks, got " +
                         std::to_string(interior_ranks.size()));
    }
    for (std::size_t k = 0; k < interior_ranks.size(); ++k) {
        if (interior_ranks[k] < 1) {
            throw rank_error("tt_svd: rank at link " + std::to_string(k + 1) + " must be >= 1");
        }
    }

    TtSvdResult out;
    if (n == 1) {
        DenseTensor core(Shape{1, t.shape[0], 1});
        std::copy(t.data.begin(), t.data.end(), core.data.begin());
        out.cores.cores.push_back(std::move(core));
        return out;
    }

    std::size_t left_rank = 1;
    std::size_t tail = t.size() / t.shape[0];
    Matrix carry(t.shape[0], tail);
    std::copy(t.data.begin(), t.data.end(), carry.data.data());

    for (std::size_t k = 0; k + 1 < n; ++k) {
        const std::size_t rows = left_rank * t.shape[k];
        const std::size_t cols = carry.size() / rows;
        Matrix m(rows, cols);
        std::copy(carry.data.begin(), carry.data.end(), m.data.data());

        std::size_t r = interior_ranks[k];
        const std::size_t bound = std::min(rows, cols);
        if (r > bound) {
            out.clamps.push_back({k + 1, r, bound});
            r = bound;
        }

        SvdResult f = truncated_svd(m, r, false);

        DenseTensor core(Shape{left_rank, t.shape[k], r});
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < r; ++j) core.data[i * r + j] = f.u(i, j);
        out.cores.cores.push_back(std::move(core));

        carry = matmul(transpose(f.u), m);  // r x cols, equals S·Vᵀ
        left_rank = r;
    }

    DenseTensor last(Shape{left_rank, t.shape[n - 1], 1});
    std::copy(carry.data.begin(), carry.data.end(), last.data.begin());
    out.cores.cores.push_back(std::move(last));
    return out;
}

inline double relative_error(const DenseTensor& a, const DenseTensor& b) {
    if (a.shape != b.shape) {
        throw shape_error("relative_error: shapes " + shape_to_string(a.shape) + " vs " +
                          shape_to_string(b.shape));
    }
    double diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        diff += d * d;
    }
    const double an = frobenius_norm(a);
    if (an == 0.0) {
        if (diff == 0.0) return 0.0;
        throw std::invalid_argument("relative_error: reference is zero but argument is not");
    }
    return std::sqrt(diff) / an;
}

}  // namespace tnet
