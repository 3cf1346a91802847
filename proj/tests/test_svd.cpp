#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "tnet/rng.hpp"
#include "tnet/svd.hpp"
#include "tnet/tensor.hpp"

using namespace tnet;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    Matrix m(r, c);
    Rng rng(seed);
    for (auto& v : m.data) v = rng.uniform(-1.0, 1.0);
    return m;
}

Matrix reconstruct(const SvdResult& f) {
    Matrix sv(f.s.size(), f.v.rows);
    for (std::size_t k = 0; k < f.s.size(); ++k)
        for (std::size_t j = 0; j < f.v.rows; ++j) sv(k, j) = f.s[k] * f.v(j, k);
    return matmul(f.u, sv);
}

double rel_recon_error(const Matrix& x, const SvdResult& f) {
    Matrix xr = reconstruct(f);
    double num = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x.data[i] - xr.data[i];
        num += d * d;
    }
    return std::sqrt(num) / frobenius_norm(x);
}

double orthonormality_defect(const Matrix& m) {
    double worst = 0.0;
    for (std::size_t a = 0; a < m.cols; ++a) {
        for (std::size_t b = 0; b < m.cols; ++b) {
            double dot = 0.0;
            for (std::size_t i = 0; i < m.rows; ++i) dot += m(i, a) * m(i, b);
            worst = std::max(worst, std::abs(dot - (a == b ? 1.0 : 0.0)));
        }
    }
    return worst;
}

// Independent spectrum oracle: power iteration with deflation on the Gram
// matrix, no code shared with the Jacobi path.
std::vector<double> gram_spectrum_oracle(const Matrix& x, std::size_t count) {
    const std::size_t n = std::min(x.rows, x.cols);
    Matrix g(n, n);
    const bool rows_side = x.rows <= x.cols;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            if (rows_side) {
                for (std::size_t k = 0; k < x.cols; ++k) s += x(i, k) * x(j, k);
            } else {
                for (std::size_t k = 0; k < x.rows; ++k) s += x(k, i) * x(k, j);
            }
            g(i, j) = s;
        }
    }
    std::vector<double> sigmas;
    for (std::size_t m = 0; m < count; ++m) {
        std::vector<double> v(n, 1.0);
        v[m % n] += 0.5;
        double lambda = 0.0;
        for (int it = 0; it < 5000; ++it) {
            std::vector<double> gv(n, 0.0);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j) gv[i] += g(i, j) * v[j];
            double norm = 0.0;
            for (double t : gv) norm += t * t;
            norm = std::sqrt(norm);
            if (norm == 0.0) break;
            for (std::size_t i = 0; i < n; ++i) v[i] = gv[i] / norm;
            lambda = norm;
        }
        sigmas.push_back(std::sqrt(std::max(lambda, 0.0)));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) g(i, j) -= lambda * v[i] * v[j];
    }
    return sigmas;
}

}  // namespace

TEST_CASE("diagonal matrix keeps its top singular values", "[svd]") {
    Matrix x(3, 3);
    x(0, 0) = 3.0;
    x(1, 1) = 2.0;
    x(2, 2) = 1.0;
    SvdResult f = truncated_svd(x, 2);
    CHECK(f.s[0] == Catch::Approx(3.0).margin(1e-12));
    CHECK(f.s[1] == Catch::Approx(2.0).margin(1e-12));
    Matrix xr = reconstruct(f);
    double err = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x.data[i] - xr.data[i];
        err += d * d;
    }
    CHECK(std::sqrt(err) == Catch::Approx(1.0).margin(1e-10));
}

TEST_CASE("rank-1 outer product is reconstructed exactly at r=1", "[svd]") {
    Rng rng(5);
    Matrix x(7, 9);
    std::vector<double> a(7), b(9);
    for (auto& v : a) v = rng.uniform(-2.0, 2.0);
    for (auto& v : b) v = rng.uniform(-2.0, 2.0);
    for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t j = 0; j < 9; ++j) x(i, j) = a[i] * b[j];
    SvdResult f = truncated_svd(x, 1);
    CHECK(rel_recon_error(x, f) <= 1e-10);
}

TEST_CASE("short-fat full-row-rank matrix reconstructs through its Gram spectrum", "[svd]") {
    Matrix x = random_matrix(6, 40, 17);
    SvdResult f = truncated_svd(x, 6);
    CHECK(rel_recon_error(x, f) <= 1e-8);
    std::vector<double> oracle = gram_spectrum_oracle(x, 6);
    for (std::size_t k = 0; k < 6; ++k) {
        CHECK(f.s[k] == Catch::Approx(oracle[k]).epsilon(1e-6));
    }
}

TEST_CASE("factors are orthonormal and singular values ordered", "[svd]") {
    for (auto [rows, cols] : {std::pair<std::size_t, std::size_t>{8, 5}, {5, 8}, {6, 6}}) {
        Matrix x = random_matrix(rows, cols, rows * 100 + cols);
        for (std::size_t r : {std::size_t{1}, std::size_t{3}, std::min(rows, cols)}) {
            SvdResult f = truncated_svd(x, r);
            CHECK(orthonormality_defect(f.u) <= 1e-10);
            CHECK(orthonormality_defect(f.v) <= 1e-10);
            for (std::size_t k = 0; k < r; ++k) {
                CHECK(f.s[k] >= 0.0);
                if (k) CHECK(f.s[k] <= f.s[k - 1]);
            }
        }
    }
}

TEST_CASE("approximation error is nonincreasing in rank", "[svd]") {
    Matrix x = random_matrix(7, 10, 19);
    double prev = 2.0;
    for (std::size_t r = 1; r <= 7; ++r) {
        double err = rel_recon_error(x, truncated_svd(x, r));
        CHECK(err <= prev + 1e-12);
        prev = err;
    }
}

TEST_CASE("rank below numerical rank pads with zeros and completion vectors", "[svd]") {
    Rng rng(29);
    Matrix x(5, 7);
    for (int pass = 0; pass < 2; ++pass) {
        std::vector<double> a(5), b(7);
        for (auto& v : a) v = rng.uniform(-1.0, 1.0);
        for (auto& v : b) v = rng.uniform(-1.0, 1.0);
        for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t j = 0; j < 7; ++j) x(i, j) += a[i] * b[j];
    }
    SvdResult f = truncated_svd(x, 4);
    CHECK(f.s[2] == 0.0);
    CHECK(f.s[3] == 0.0);
    CHECK(orthonormality_defect(f.u) <= 1e-10);
    CHECK(orthonormality_defect(f.v) <= 1e-10);
    double err2 = rel_recon_error(x, truncated_svd(x, 2));
    CHECK(rel_recon_error(x, f) == Catch::Approx(err2).margin(1e-10));
}

TEST_CASE("results are deterministic and sign-fixed", "[svd]") {
    Matrix x = random_matrix(6, 9, 31);
    SvdResult f1 = truncated_svd(x, 4);
    SvdResult f2 = truncated_svd(x, 4);
    CHECK(std::memcmp(f1.u.data.data(), f2.u.data.data(), f1.u.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(f1.v.data.data(), f2.v.data.data(), f1.v.size() * sizeof(double)) == 0);
    for (std::size_t k = 0; k < 4; ++k) {
        double best = -1.0;
        double at_best = 0.0;
        for (std::size_t i = 0; i < f1.u.rows; ++i) {
            if (std::abs(f1.u(i, k)) > best) {
                best = std::abs(f1.u(i, k));
                at_best = f1.u(i, k);
            }
        }
        CHECK(at_best > 0.0);
    }
}

TEST_CASE("invalid rank and non-convergence raise typed errors", "[svd]") {
    Matrix x = random_matrix(4, 6, 37);
    CHECK_THROWS_AS(truncated_svd(x, 0), rank_error);
    CHECK_THROWS_AS(truncated_svd(x, 5), rank_error);
    try {
        truncated_svd(x, 2, true, 0);
        FAIL("expected convergence_error");
    } catch (const convergence_error& e) {
        CHECK(e.iterations == 0);
    }
}

TEST_CASE("want_v=false skips the right factor", "[svd]") {
    Matrix x = random_matrix(4, 50, 41);
    SvdResult f = truncated_svd(x, 3, false);
    CHECK(f.v.size() == 0);
    CHECK(f.u.rows == 4);
    CHECK(f.u.cols == 3);
    SvdResult full = truncated_svd(x, 3, true);
    CHECK(std::memcmp(f.u.data.data(), full.u.data.data(), f.u.size() * sizeof(double)) == 0);
}
