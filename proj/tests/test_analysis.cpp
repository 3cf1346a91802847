#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "tnet/analysis.hpp"
#include "tnet/rng.hpp"

using namespace tnet;

namespace {

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

ArchConfig random_arch(Rng& rng) {
    ArchConfig a;
    a.n_hg = 1 + rng.uniform_index(4);
    a.hg_depth = 1 + rng.uniform_index(4);
    a.hg_subnet = 1 + rng.uniform_index(3);
    a.b_depth = 1 + rng.uniform_index(3);
    a.f_in = 1 + rng.uniform_index(12);
    a.f_out = 1 + rng.uniform_index(12);
    a.kernel_h = 1 + rng.uniform_index(4);
    a.kernel_w = 1 + rng.uniform_index(4);
    return a;
}

double table2_fit_error(Count overhead) {
    const ArchConfig arch = full_scale_arch();
    double sse = 0.0;
    const auto rows = reproduce_table2(arch, overhead);
    const auto& ref = table2_reference();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const double d = rows[i].ratio - ref[i].printed;
        sse += d * d;
    }
    return sse;
}

}  // namespace

TEST_CASE("dense parameter counts", "[analysis]") {
    REQUIRE(count_dense(full_scale_arch()) == 14'155'776ULL);
    REQUIRE(count_dense(toy_arch()) == 13'824ULL);

    ArchConfig ones;
    ones.n_hg = ones.hg_depth = ones.hg_subnet = ones.b_depth = 1;
    ones.f_in = ones.f_out = ones.kernel_h = ones.kernel_w = 1;
    REQUIRE(count_dense(ones) == 1ULL);
}

TEST_CASE("tucker parameter count follows core plus factors", "[analysis]") {
    const ArchConfig arch = full_scale_arch();

    SECTION("depth-compressed reference row") {
        REQUIRE(count_tucker(arch, {4, 3, 3, 2, 128, 128, 3, 3}) == 10'649'659ULL);
    }

    SECTION("full ranks exceed the dense count by the factor squares") {
        const Shape dims = weight_tensor_shape(arch);
        Count squares = 0;
        for (std::size_t e : dims) squares += static_cast<Count>(e) * e;
        REQUIRE(count_tucker(arch, dims) == count_dense(arch) + squares);
        REQUIRE(count_tucker(arch, dims) > count_dense(arch));
    }

    SECTION("all-ones ranks collapse to one core entry plus mode sums") {
        Count sum = 0;
        for (std::size_t e : weight_tensor_shape(arch)) sum += e;
        REQUIRE(count_tucker(arch, {1, 1, 1, 1, 1, 1, 1, 1}) == 1 + sum);
    }

    SECTION("count grows strictly with every rank component") {
        Rng rng(71);
        for (int trial = 0; trial < 10; ++trial) {
            const ArchConfig a = random_arch(rng);
            const Shape dims = weight_tensor_shape(a);
            Shape ranks(dims.size());
            for (std::size_t k = 0; k < dims.size(); ++k) ranks[k] = 1 + rng.uniform_index(dims[k]);
            const Count base = count_tucker(a, ranks);
            for (std::size_t k = 0; k < dims.size(); ++k) {
                if (ranks[k] == dims[k]) continue;
                Shape bumped = ranks;
                bumped[k] += 1;
                REQUIRE(count_tucker(a, bumped) > base);
            }
        }
    }

    SECTION("rank validation") {
        REQUIRE_THROWS_AS(count_tucker(arch, {4, 4, 3, 2}), rank_error);
        REQUIRE_THROWS_AS(count_tucker(arch, {0, 4, 3, 2, 128, 128, 3, 3}), rank_error);
        REQUIRE_THROWS_AS(count_tucker(arch, {5, 4, 3, 2, 128, 128, 3, 3}), rank_error);
    }
}

TEST_CASE("mps parameter count sums the chain cores", "[analysis]") {
    const ArchConfig arch = full_scale_arch();

    REQUIRE(count_mps(arch, {1, 4, 4, 12, 24, 110, 9, 3, 1}) == 465'530ULL);

    SECTION("all-ones chain stores one slice per mode") {
        Count sum = 0;
        for (std::size_t e : weight_tensor_shape(arch)) sum += e;
        REQUIRE(count_mps(arch, {1, 1, 1, 1, 1, 1, 1, 1, 1}) == sum);
    }

    SECTION("chain validation") {
        REQUIRE_THROWS_AS(count_mps(arch, {1, 4, 4, 12, 24, 110, 9, 3}), rank_error);
        REQUIRE_THROWS_AS(count_mps(arch, {2, 4, 4, 12, 24, 110, 9, 3, 1}), rank_error);
        REQUIRE_THROWS_AS(count_mps(arch, {1, 4, 4, 12, 24, 110, 9, 3, 2}), rank_error);
        REQUIRE_THROWS_AS(count_mps(arch, {1, 5, 4, 12, 24, 110, 9, 3, 1}), rank_error);
    }
}

TEST_CASE("layer-by-layer baseline count and the shared-mixer savings", "[analysis]") {
    const ArchConfig arch = full_scale_arch();
    REQUIRE(count_layerwise(arch, 64, 64) == 5'111'808ULL);

    SECTION("never cheaper than dense at full feature ranks") {
        REQUIRE(count_layerwise(arch, 128, 128) > count_dense(arch));
    }

    SECTION("savings identity against the feature-only whole-network count") {
        Rng rng(72);
        for (int trial = 0; trial < 10; ++trial) {
            const ArchConfig a = random_arch(rng);
            const std::size_t r4 = 1 + rng.uniform_index(a.f_in);
            const std::size_t r5 = 1 + rng.uniform_index(a.f_out);
            const Count n_conv =
                static_cast<Count>(a.n_hg) * a.hg_depth * a.hg_subnet * a.b_depth;
            const Count expected =
                (n_conv - 1) * (static_cast<Count>(r4) * a.f_in + static_cast<Count>(r5) * a.f_out);
            REQUIRE(count_layerwise(a, r4, r5) - count_tnet_feature_only(a, r4, r5) == expected);
        }
    }

    SECTION("feature rank validation") {
        REQUIRE_THROWS_AS(count_layerwise(arch, 0, 64), rank_error);
        REQUIRE_THROWS_AS(count_layerwise(arch, 64, 129), rank_error);
        REQUIRE_THROWS_AS(count_tnet_feature_only(arch, 129, 64), rank_error);
    }
}

TEST_CASE("trimmed baseline narrows the feature modes", "[analysis]") {
    const ArchConfig arch = full_scale_arch();
    REQUIRE(count_trimmed(arch, 64) == 3'538'944ULL);
    REQUIRE(count_trimmed(arch, arch.f_in) == count_dense(arch));
    REQUIRE(count_trimmed(arch, 1) == 864ULL);
    REQUIRE_THROWS_AS(count_trimmed(arch, 0), rank_error);
    REQUIRE_THROWS_AS(count_trimmed(arch, 129), rank_error);
}

TEST_CASE("counts match a wide-integer oracle on random configurations", "[analysis]") {
    Rng rng(73);
    for (int trial = 0; trial < 10; ++trial) {
        const ArchConfig a = random_arch(rng);
        const Shape dims = weight_tensor_shape(a);

        Shape ranks(dims.size());
        for (std::size_t k = 0; k < dims.size(); ++k) ranks[k] = 1 + rng.uniform_index(dims[k]);

        __int128 dense = 1;
        for (std::size_t e : dims) dense *= static_cast<__int128>(e);
        __int128 core = 1, factors = 0;
        for (std::size_t k = 0; k < dims.size(); ++k) {
            core *= static_cast<__int128>(ranks[k]);
            factors += static_cast<__int128>(ranks[k]) * static_cast<__int128>(dims[k]);
        }
        REQUIRE(static_cast<__int128>(count_dense(a)) == dense);
        REQUIRE(static_cast<__int128>(count_tucker(a, ranks)) == core + factors);
    }
}

TEST_CASE("compression ratio conventions", "[analysis]") {
    REQUIRE(compression_ratio(100, 100) == 1.0);
    REQUIRE(compression_ratio(50, 100) == 2.0);
    REQUIRE_THROWS_AS(compression_ratio(0, 100), std::invalid_argument);

    SECTION("single-stack reference row with the externally quoted overhead") {
        const ArchConfig arch = full_scale_arch();
        const Count overhead = 1'642'000;
        const Count method = count_tucker(arch, {1, 4, 3, 2, 128, 128, 3, 3});
        REQUIRE(method == 3'571'763ULL);
        const double ratio = compression_ratio(method + overhead, count_dense(arch) + overhead);
        REQUIRE(ratio == Catch::Approx(3.03).margin(0.01));
    }

    SECTION("ratio exceeds one exactly when the method total is smaller") {
        REQUIRE(compression_ratio(99, 100) > 1.0);
        REQUIRE(compression_ratio(101, 100) < 1.0);
    }
}

TEST_CASE("ratio formatting uses banker's rounding", "[analysis]") {
    REQUIRE(format_ratio(5.2, 1) == "5.2x");
    REQUIRE(format_ratio(7.4, 1) == "7.4x");
    REQUIRE(format_ratio(1.98) == "1.98x");
    REQUIRE(format_ratio(2.5, 2) == "2.50x");
    REQUIRE(format_ratio(1.25, 1) == "1.2x");  // ties to even
    REQUIRE(format_ratio(1.75, 1) == "1.8x");
    REQUIRE(format_ratio(2.6, 0) == "3x");
    REQUIRE_THROWS_AS(format_ratio(1.0, 7), std::invalid_argument);
}

TEST_CASE("redundancy-study ratios reproduce within a tenth", "[analysis]") {
    const auto rows = reproduce_table2(full_scale_arch(), default_overhead_params);
    const auto& ref = table2_reference();
    REQUIRE(rows.size() == 13);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        INFO("row " << i << " ranks " << rows[i].descriptor);
        REQUIRE(rows[i].ratio == Catch::Approx(ref[i].printed).margin(0.1));
    }

    REQUIRE(rows[9].ratio == Catch::Approx(1.64).margin(0.1));   // features at 96
    REQUIRE(rows[11].ratio == Catch::Approx(6.25).margin(0.1));  // features at 32
    REQUIRE(rows[2].ratio == Catch::Approx(3.03).margin(0.1));   // single stack
    REQUIRE(rows[12].ratio == Catch::Approx(1.98).margin(0.1));  // 2x2 kernels
}

TEST_CASE("comparison-table ratios reproduce within 0.15", "[analysis]") {
    const auto rows = reproduce_table3(full_scale_arch(), default_overhead_params);
    REQUIRE(rows.size() == 7);
    const auto& tucker_ref = table3_tucker_reference();
    for (std::size_t i = 0; i < tucker_ref.size(); ++i) {
        INFO("row " << i << " ranks " << rows[i].descriptor);
        REQUIRE(rows[i].method == "tucker");
        REQUIRE(rows[i].ratio == Catch::Approx(tucker_ref[i].printed).margin(0.15));
    }
    REQUIRE(rows.back().method == "mps");
    REQUIRE(rows.back().ratio == Catch::Approx(7.4).margin(0.15));
}

TEST_CASE("the default overhead constant is the least-squares fit", "[analysis]") {
    Count best = 0;
    double best_sse = std::numeric_limits<double>::infinity();
    for (Count e = 0; e <= 5'000'000; e += 1'000) {
        const double sse = table2_fit_error(e);
        if (sse < best_sse) {
            best_sse = sse;
            best = e;
        }
    }
    REQUIRE(best == default_overhead_params);
    REQUIRE(best_sse < 0.01);
}

TEST_CASE("report rows carry consistent totals", "[analysis]") {
    const auto rows = reproduce_table2(full_scale_arch(), default_overhead_params);
    const Count dense_total = count_dense(full_scale_arch()) + default_overhead_params;
    for (const auto& r : rows) {
        REQUIRE(r.total == r.tensorized + r.overhead);
        REQUIRE(r.overhead == default_overhead_params);
        REQUIRE(r.ratio == compression_ratio(r.total, dense_total));
    }
}
