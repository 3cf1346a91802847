#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

#include "tnet/grad.hpp"
#include "tnet/rng.hpp"

using namespace tnet;

namespace {

DenseTensor random_tensor(const Shape& shape, std::uint64_t seed, double scale = 1.0) {
    DenseTensor t(shape);
    Rng rng(seed);
    for (auto& v : t.data) v = rng.normal(0.0, scale);
    return t;
}

double dot_all(const DenseTensor& a, const DenseTensor& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a.data[i] * b.data[i];
    return acc;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

TuckerFactors identity_parametrization(const DenseTensor& core) {
    TuckerFactors f;
    f.core = core;
    for (std::size_t k = 0; k < core.order(); ++k) f.factors.push_back(Matrix::identity(core.shape[k]));
    return f;
}

ArchConfig toy_arch() {
    ArchConfig a;
    a.n_hg = 2;
    a.hg_depth = 2;
    a.hg_subnet = 3;
    a.b_depth = 2;
    a.f_in = 8;
    a.f_out = 8;
    a.kernel_h = 3;
    a.kernel_w = 3;
    return a;
}

Shape full_ranks(const ArchConfig& a) {
    return Shape{a.n_hg, a.hg_depth, a.hg_subnet, a.b_depth, a.f_in, a.f_out, a.kernel_h, a.kernel_w};
}

}  // namespace

TEST_CASE("projection with identity factors passes the dense gradient through", "[grad]") {
    const DenseTensor core = random_tensor({2, 3, 2}, 11);
    const TuckerFactors f = identity_parametrization(core);
    const DenseTensor dw = random_tensor({2, 3, 2}, 12);

    const TuckerGradients g = project_gradients(f, dw);

    REQUIRE(g.d_core.shape == dw.shape);
    for (std::size_t i = 0; i < dw.size(); ++i) REQUIRE(g.d_core.data[i] == dw.data[i]);
    for (std::size_t k = 0; k < 3; ++k) {
        const Matrix expect = matmul(unfold(dw, k), transpose(unfold(core, k)));
        REQUIRE(max_abs_diff(g.d_factors[k], expect) == 0.0);
    }
}

TEST_CASE("zero upstream gradient projects to zero", "[grad]") {
    const DenseTensor w = random_tensor({3, 4, 5}, 21);
    const TuckerFactors f = hosvd(w, {2, 3, 2});
    const TuckerGradients g = project_gradients(f, DenseTensor(w.shape));
    for (std::size_t i = 0; i < g.d_core.size(); ++i) REQUIRE(g.d_core.data[i] == 0.0);
    for (const auto& m : g.d_factors)
        for (std::size_t i = 0; i < m.size(); ++i) REQUIRE(m.data[i] == 0.0);
}

TEST_CASE("projection is linear in the upstream gradient", "[grad]") {
    const DenseTensor w = random_tensor({3, 4, 5}, 31);
    const TuckerFactors f = hosvd(w, {2, 3, 3});
    const DenseTensor x = random_tensor(w.shape, 32);
    const DenseTensor y = random_tensor(w.shape, 33);
    const double a = 0.75, b = -1.5;

    DenseTensor mix(w.shape);
    for (std::size_t i = 0; i < mix.size(); ++i) mix.data[i] = a * x.data[i] + b * y.data[i];

    const TuckerGradients gm = project_gradients(f, mix);
    const TuckerGradients gx = project_gradients(f, x);
    const TuckerGradients gy = project_gradients(f, y);

    for (std::size_t i = 0; i < gm.d_core.size(); ++i) {
        REQUIRE(gm.d_core.data[i] ==
                Catch::Approx(a * gx.d_core.data[i] + b * gy.d_core.data[i]).margin(1e-12));
    }
    for (std::size_t k = 0; k < 3; ++k) {
        for (std::size_t i = 0; i < gm.d_factors[k].size(); ++i) {
            REQUIRE(gm.d_factors[k].data[i] ==
                    Catch::Approx(a * gx.d_factors[k].data[i] + b * gy.d_factors[k].data[i])
                        .margin(1e-12));
        }
    }
}

TEST_CASE("projected gradients agree with central differences", "[grad]") {
    auto quadratic = [](const TuckerFactors& f) {
        const DenseTensor w = tucker_reconstruct(f);
        return 0.5 * dot_all(w, w);
    };

    SECTION("small parametrization, every parameter checked") {
        const DenseTensor w = random_tensor({3, 4, 5}, 41, 0.3);
        const TuckerFactors f = hosvd(w, {2, 3, 2});
        const TuckerGradients g = project_gradients(f, tucker_reconstruct(f));
        REQUIRE(finite_difference_check(quadratic, f, g, 1e-5) <= 1e-6);
    }

    SECTION("network-scale parametrization, seeded subset") {
        const DenseTensor w = random_tensor({2, 2, 3, 2, 4, 4, 3, 3}, 42, 0.2);
        const TuckerFactors f = hosvd(w, {2, 2, 3, 2, 4, 4, 3, 3});
        const TuckerGradients g = project_gradients(f, tucker_reconstruct(f));
        REQUIRE(finite_difference_check(quadratic, f, g, 1e-5) <= 1e-6);
    }
}

TEST_CASE("finite differences boundary cases", "[grad]") {
    const DenseTensor w = random_tensor({3, 3, 3}, 51);
    const TuckerFactors f = hosvd(w, {2, 2, 2});

    SECTION("constant loss has exactly zero discrepancy") {
        TuckerGradients zero;
        zero.d_core = DenseTensor(f.core.shape);
        for (const auto& u : f.factors) zero.d_factors.push_back(Matrix(u.rows, u.cols));
        auto constant = [](const TuckerFactors&) { return 3.0; };
        REQUIRE(finite_difference_check(constant, f, zero, 1e-5) == 0.0);
    }

    SECTION("loss linear in the reconstruction is matched to rounding") {
        const DenseTensor a = random_tensor(w.shape, 52);
        auto linear = [&a](const TuckerFactors& g) { return dot_all(tucker_reconstruct(g), a); };
        const TuckerGradients g = project_gradients(f, a);
        REQUIRE(finite_difference_check(linear, f, g, 1e-5) <= 1e-8);
    }

    SECTION("non-finite loss is rejected") {
        TuckerGradients zero;
        zero.d_core = DenseTensor(f.core.shape);
        for (const auto& u : f.factors) zero.d_factors.push_back(Matrix(u.rows, u.cols));
        auto bad = [](const TuckerFactors&) { return std::numeric_limits<double>::quiet_NaN(); };
        REQUIRE_THROWS_AS(finite_difference_check(bad, f, zero, 1e-5), convergence_error);
    }

    SECTION("step must be positive") {
        TuckerGradients zero;
        zero.d_core = DenseTensor(f.core.shape);
        for (const auto& u : f.factors) zero.d_factors.push_back(Matrix(u.rows, u.cols));
        auto constant = [](const TuckerFactors&) { return 1.0; };
        REQUIRE_THROWS_AS(finite_difference_check(constant, f, zero, 0.0), std::invalid_argument);
    }
}

TEST_CASE("projection rejects mismatched upstream shape", "[grad]") {
    const DenseTensor w = random_tensor({3, 4, 5}, 61);
    const TuckerFactors f = hosvd(w, {2, 2, 2});
    REQUIRE_THROWS_AS(project_gradients(f, DenseTensor(Shape{3, 4, 4})), shape_error);
}

TEST_CASE("rmsprop update matches the closed form", "[grad]") {
    RmsPropState s;
    s.lr = 0.1;
    s.rho = 0.9;
    s.eps = 1e-8;

    std::vector<double> p{1.0};
    std::vector<double> g{1.0};
    rmsprop_step(s, p, g);

    REQUIRE(s.acc[0] == Catch::Approx(0.1).margin(1e-15));
    const double expected = 1.0 - 0.1 * 1.0 / (std::sqrt(0.1) + 1e-8);
    REQUIRE(p[0] == Catch::Approx(expected).margin(1e-15));
    REQUIRE(1.0 - p[0] == Catch::Approx(0.3162).margin(5e-4));

    SECTION("a second identical gradient takes a smaller step") {
        const double first = 1.0 - p[0];
        const double before = p[0];
        rmsprop_step(s, p, g);
        const double second = before - p[0];
        REQUIRE(second < first);
        REQUIRE(second > 0.0);
    }
}

TEST_CASE("rmsprop with zero gradient leaves parameters alone", "[grad]") {
    RmsPropState s;
    std::vector<double> p{2.5, -1.0};
    std::vector<double> g{0.0, 0.0};
    rmsprop_step(s, p, g);
    REQUIRE(p[0] == 2.5);
    REQUIRE(p[1] == -1.0);
}

TEST_CASE("rmsprop rejects size mismatches", "[grad]") {
    RmsPropState s;
    std::vector<double> p{1.0, 2.0};
    std::vector<double> g{1.0};
    REQUIRE_THROWS_AS(rmsprop_step(s, p, g), shape_error);
}

TEST_CASE("toy task is deterministic and bounded", "[grad]") {
    const ToyTask a = ToyTask::make(9, 4, 3, 16, 16, 2, 1.5);
    const ToyTask b = ToyTask::make(9, 4, 3, 16, 16, 2, 1.5);

    REQUIRE(a.inputs.size() == 4);
    REQUIRE(a.targets.size() == 4);
    REQUIRE(a.targets[0].channels == 2);
    for (std::size_t s = 0; s < a.inputs.size(); ++s) {
        REQUIRE(std::memcmp(a.inputs[s].data.data(), b.inputs[s].data.data(),
                            a.inputs[s].size() * sizeof(double)) == 0);
        REQUIRE(std::memcmp(a.targets[s].data.data(), b.targets[s].data.data(),
                            a.targets[s].size() * sizeof(double)) == 0);
        double peak = 0.0;
        for (std::size_t i = 0; i < a.targets[s].size(); ++i) {
            REQUIRE(a.targets[s].data[i] >= 0.0);
            REQUIRE(a.targets[s].data[i] <= 1.0);
            peak = std::max(peak, a.targets[s].data[i]);
        }
        REQUIRE(peak > 0.9);  // every sample has an on-grid bump center
    }

    const ToyTask c = ToyTask::make(10, 4, 3, 16, 16, 2, 1.5);
    REQUIRE(std::memcmp(a.inputs[0].data.data(), c.inputs[0].data.data(),
                        a.inputs[0].size() * sizeof(double)) != 0);
}

TEST_CASE("training is bit-reproducible for a fixed seed", "[grad]") {
    const ArchConfig arch = toy_arch();
    const ToyTask task = ToyTask::make(7);
    const TrainResult a = train_toy(arch, full_ranks(arch), task, 12);
    const TrainResult b = train_toy(arch, full_ranks(arch), task, 12);

    REQUIRE(a.loss_history.size() == 12);
    for (std::size_t i = 0; i < a.loss_history.size(); ++i) {
        REQUIRE(a.loss_history[i] == b.loss_history[i]);
    }
    REQUIRE(std::memcmp(a.factors.core.data.data(), b.factors.core.data.data(),
                        a.factors.core.size() * sizeof(double)) == 0);
    for (std::size_t k = 0; k < a.factors.factors.size(); ++k) {
        REQUIRE(std::memcmp(a.factors.factors[k].data.data(), b.factors.factors[k].data.data(),
                            a.factors.factors[k].size() * sizeof(double)) == 0);
    }
}

TEST_CASE("zero learning rate freezes the loss", "[grad]") {
    const ArchConfig arch = toy_arch();
    const ToyTask task = ToyTask::make(7);
    TrainOptions opt;
    opt.lr = 0.0;
    const TrainResult r = train_toy(arch, full_ranks(arch), task, 5, opt);
    for (std::size_t i = 1; i < r.loss_history.size(); ++i) {
        REQUIRE(r.loss_history[i] == r.loss_history[0]);
    }
}

TEST_CASE("loss falls on the standard toy run", "[grad]") {
    const ArchConfig arch = toy_arch();
    const ToyTask task = ToyTask::make(42);
    const TrainResult r = train_toy(arch, full_ranks(arch), task, 80);
    REQUIRE(r.loss_history.front() > 0.0);
    REQUIRE(r.loss_history.back() < 0.1 * r.loss_history.front());
}

TEST_CASE("rank-one parametrization still trains", "[grad]") {
    const ArchConfig arch = toy_arch();
    const ToyTask task = ToyTask::make(42);
    const TrainResult r = train_toy(arch, Shape{1, 1, 1, 1, 1, 1, 1, 1}, task, 50);
    const auto mean = [&](std::size_t lo, std::size_t hi) {
        return std::accumulate(r.loss_history.begin() + lo, r.loss_history.begin() + hi, 0.0) /
               static_cast<double>(hi - lo);
    };
    REQUIRE(mean(40, 50) < mean(0, 10));
}

TEST_CASE("factorized forward matches the dense reconstruction along training", "[grad]") {
    const ArchConfig arch = toy_arch();
    const ToyTask task = ToyTask::make(5);
    TrainOptions opt;
    opt.record_dense_loss = true;
    const TrainResult r = train_toy(arch, full_ranks(arch), task, 20, opt);
    REQUIRE(r.dense_loss_history.size() == 20);
    for (std::size_t i = 0; i < 20; ++i) {
        REQUIRE(std::abs(r.dense_loss_history[i] - r.loss_history[i]) <= 1e-6);
    }
}

TEST_CASE("non-finite losses abort training with the failing step", "[grad]") {
    const ArchConfig arch = toy_arch();
    ToyTask task = ToyTask::make(3);
    task.targets[0].at(0, 0, 0) = std::numeric_limits<double>::infinity();
    try {
        train_toy(arch, full_ranks(arch), task, 5);
        FAIL("expected a convergence error");
    } catch (const convergence_error& e) {
        REQUIRE(e.iterations == 0);
    }
}

TEST_CASE("trainer validates its architecture", "[grad]") {
    const ToyTask task = ToyTask::make(1, 2);

    ArchConfig uneven = toy_arch();
    uneven.f_out = 6;
    REQUIRE_THROWS_AS(train_toy(uneven, Shape{2, 2, 3, 2, 8, 6, 3, 3}, task, 1), shape_error);

    ArchConfig even_kernel = toy_arch();
    even_kernel.kernel_h = 2;
    REQUIRE_THROWS_AS(train_toy(even_kernel, Shape{2, 2, 3, 2, 8, 8, 2, 3}, task, 1), shape_error);

    ArchConfig deep = toy_arch();
    deep.hg_depth = 5;
    REQUIRE_THROWS_AS(train_toy(deep, Shape{2, 5, 3, 2, 8, 8, 3, 3}, task, 1), shape_error);

    ArchConfig pathways = toy_arch();
    pathways.hg_subnet = 2;
    REQUIRE_THROWS_AS(train_toy(pathways, Shape{2, 2, 2, 2, 8, 8, 3, 3}, task, 1), shape_error);
}
