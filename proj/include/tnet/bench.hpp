#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <vector>

#include "tnet/rng.hpp"
#include "tnet/tnet.hpp"

namespace tnet {

// Timing harness for the single-layer speedup experiment: a 3x3 convolution
// preserving the channel count on a 128-channel 64x64 input, optionally scaled
// down for small machines. Single-threaded by construction; absolute times are
// hardware-dependent, the MAC counts are not.

struct BenchConfig {
    double scale = 1.0;
    std::vector<std::size_t> ranks;  // empty selects the default rank sweep
    std::size_t repeats = 30;
    std::size_t warmup = 5;
    std::uint64_t seed = 2024;
};

struct BenchRow {
    std::size_t rank = 0;
    ConvFlops macs;
    double mac_ratio = 0.0;
    double reference_ms = 0.0;
    double factorized_ms = 0.0;
    double measured_speedup = 0.0;
};

struct BenchReport {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t kernel = 3;
    std::vector<BenchRow> rows;
    double checksum = 0.0;  // consumes every output so the timed work cannot be elided
};

namespace detail {

inline double median_ms(std::vector<double>& samples) {
    const std::size_t mid = samples.size() / 2;
    std::nth_element(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(mid),
                     samples.end());
    return samples[mid];
}

template <typename F>
double time_median_ms(F&& body, std::size_t warmup, std::size_t repeats) {
    for (std::size_t i = 0; i < warmup; ++i) body();
    std::vector<double> samples;
    samples.reserve(repeats);
    for (std::size_t i = 0; i < repeats; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        body();
        const auto t1 = std::chrono::steady_clock::now();
        samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    return median_ms(samples);
}

}  // namespace detail

inline std::vector<std::size_t> default_bench_ranks(std::size_t channels, double scale) {
    std::vector<std::size_t> out;
    for (std::size_t base : {std::size_t{96}, std::size_t{64}, std::size_t{50}, std::size_t{32}}) {
        auto r = static_cast<std::size_t>(
            std::max<long long>(1, std::llround(static_cast<double>(base) * scale)));
        r = std::min(r, channels);
        if (out.empty() || out.back() != r) out.push_back(r);
    }
    return out;
}

inline BenchReport run_bench(const BenchConfig& cfg) {
    if (!(cfg.scale > 0.0) || cfg.scale > 1.0) {
        throw std::invalid_argument("bench scale must lie in (0, 1]");
    }
    if (cfg.repeats < 1) throw std::invalid_argument("bench needs at least one repeat");

    BenchReport report;
    report.channels = static_cast<std::size_t>(
        std::max<long long>(1, std::llround(128.0 * cfg.scale)));
    report.height = static_cast<std::size_t>(
        std::max<long long>(3, std::llround(64.0 * cfg.scale)));
    report.width = report.height;
    report.kernel = 3;

    std::vector<std::size_t> ranks =
        cfg.ranks.empty() ? default_bench_ranks(report.channels, cfg.scale) : cfg.ranks;
    for (std::size_t r : ranks) {
        if (r < 1 || r > report.channels) {
            throw rank_error("bench rank " + std::to_string(r) + " outside [1, " +
                             std::to_string(report.channels) + "]");
        }
    }

    Rng rng(cfg.seed);
    FeatureMap input(report.channels, report.height, report.width);
    for (std::size_t i = 0; i < input.size(); ++i) input.data[i] = rng.normal();

    DenseTensor dense_kernel(Shape{report.channels, report.channels, report.kernel, report.kernel});
    for (auto& v : dense_kernel.data) v = rng.normal(0.0, 0.1);

    double sink = 0.0;
    const double reference_ms = detail::time_median_ms(
        [&] {
            const FeatureMap y = conv2d_reference(input, dense_kernel, 1, 1);
            sink += y.at(0, 0, 0);
        },
        cfg.warmup, cfg.repeats);

    for (std::size_t r : ranks) {
        FactorizedConv fc;
        fc.u_in = Matrix(report.channels, r);
        fc.u_out = Matrix(report.channels, r);
        fc.partial_core = DenseTensor(Shape{r, r, report.kernel, report.kernel});
        for (std::size_t i = 0; i < fc.u_in.size(); ++i) fc.u_in.data[i] = rng.normal(0.0, 0.1);
        for (std::size_t i = 0; i < fc.u_out.size(); ++i) fc.u_out.data[i] = rng.normal(0.0, 0.1);
        for (auto& v : fc.partial_core.data) v = rng.normal(0.0, 0.1);

        BenchRow row;
        row.rank = r;
        row.macs = conv_flops(report.channels, report.channels, report.kernel, report.kernel,
                              report.height, report.width, r, r);
        row.mac_ratio =
            static_cast<double>(row.macs.baseline) / static_cast<double>(row.macs.factorized);
        row.reference_ms = reference_ms;
        row.factorized_ms = detail::time_median_ms(
            [&] {
                const FeatureMap y = factorized_conv2d(input, fc, 1, 1);
                sink += y.at(0, 0, 0);
            },
            cfg.warmup, cfg.repeats);
        row.measured_speedup = row.factorized_ms > 0.0 ? reference_ms / row.factorized_ms : 0.0;
        report.rows.push_back(row);
    }
    report.checksum = sink;
    return report;
}

}  // namespace tnet
