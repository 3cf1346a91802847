#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tnet/errors.hpp"
#include "tnet/tensor.hpp"
#include "tnet/tnet.hpp"

namespace tnet {

using Count = unsigned long long;

/// Untensorized parameters (stem, heads, batch norms) folded into one additive
/// constant on both sides of every compression ratio. Fitted once by a least
/// squares scan against the reference ratio tables (see the analysis tests,
/// which re-derive it).
inline constexpr Count default_overhead_params = 1'633'000;

/// The full-scale architecture the reference tables are computed against.
inline ArchConfig full_scale_arch() {
    ArchConfig a;
    a.n_hg = 4;
    a.hg_depth = 4;
    a.hg_subnet = 3;
    a.b_depth = 2;
    a.f_in = 128;
    a.f_out = 128;
    a.kernel_h = 3;
    a.kernel_w = 3;
    a.overhead_params = static_cast<double>(default_overhead_params);
    return a;
}

inline Count count_dense(const ArchConfig& arch) {
    Count n = 1;
    for (std::size_t e : weight_tensor_shape(arch)) n *= e;
    return n;
}

namespace detail {

inline void check_ranks_against(const Shape& dims, const Shape& ranks) {
    if (ranks.size() != dims.size()) {
        throw rank_error("expected " + std::to_string(dims.size()) + " ranks, got " +
                         std::to_string(ranks.size()));
    }
    for (std::size_t k = 0; k < dims.size(); ++k) {
        if (ranks[k] < 1 || ranks[k] > dims[k]) {
            throw rank_error("rank " + std::to_string(ranks[k]) + " invalid for mode extent " +
                             std::to_string(dims[k]));
        }
    }
}

}  // namespace detail

/// Tucker parameter count: prod of ranks (core) plus one I_k x R_k factor per mode.
inline Count count_tucker(const ArchConfig& arch, const Shape& ranks) {
    const Shape dims = weight_tensor_shape(arch);
    detail::check_ranks_against(dims, ranks);
    Count core = 1;
    Count factors = 0;
    for (std::size_t k = 0; k < dims.size(); ++k) {
        core *= ranks[k];
        factors += static_cast<Count>(ranks[k]) * dims[k];
    }
    return core + factors;
}

/// MPS parameter count: sum of R_k x I_k x R_{k+1} cores over the chain.
inline Count count_mps(const ArchConfig& arch, const Shape& chain) {
    const Shape dims = weight_tensor_shape(arch);
    if (chain.size() != dims.size() + 1) {
        throw rank_error("rank chain must have " + std::to_string(dims.size() + 1) + " entries");
    }
    if (chain.front() != 1 || chain.back() != 1) {
        throw rank_error("boundary ranks of the chain must be 1");
    }
    for (std::size_t k = 1; k < dims.size(); ++k) {
        if (chain[k] < 1) throw rank_error("chain ranks must be >= 1");
        Count left = 1, right = 1;
        for (std::size_t j = 0; j < k; ++j) left *= dims[j];
        for (std::size_t j = k; j < dims.size(); ++j) right *= dims[j];
        if (chain[k] > std::min(left, right)) {
            throw rank_error("chain rank " + std::to_string(chain[k]) +
                             " exceeds the attainable bound at position " + std::to_string(k));
        }
    }
    Count n = 0;
    for (std::size_t k = 0; k < dims.size(); ++k) {
        n += static_cast<Count>(chain[k]) * dims[k] * chain[k + 1];
    }
    return n;
}

/// Layer-by-layer factorization baseline: every one of the N_conv = I0*I1*I2*I3
/// convolutions stores its own spatial core and channel mixers.
inline Count count_layerwise(const ArchConfig& arch, std::size_t r4, std::size_t r5) {
    if (r4 < 1 || r4 > arch.f_in || r5 < 1 || r5 > arch.f_out) {
        throw rank_error("feature ranks must lie in [1, feature extent]");
    }
    const Count n_conv =
        static_cast<Count>(arch.n_hg) * arch.hg_depth * arch.hg_subnet * arch.b_depth;
    const Count per_layer = static_cast<Count>(r4) * r5 * arch.kernel_h * arch.kernel_w +
                            static_cast<Count>(r4) * arch.f_in +
                            static_cast<Count>(r5) * arch.f_out;
    return n_conv * per_layer;
}

/// Whole-network factorization restricted to the two feature modes: the
/// spatial cores stay per-layer but the channel mixers are shared once.
inline Count count_tnet_feature_only(const ArchConfig& arch, std::size_t r4, std::size_t r5) {
    if (r4 < 1 || r4 > arch.f_in || r5 < 1 || r5 > arch.f_out) {
        throw rank_error("feature ranks must lie in [1, feature extent]");
    }
    const Count n_conv =
        static_cast<Count>(arch.n_hg) * arch.hg_depth * arch.hg_subnet * arch.b_depth;
    return n_conv * (static_cast<Count>(r4) * r5 * arch.kernel_h * arch.kernel_w) +
           static_cast<Count>(r4) * arch.f_in + static_cast<Count>(r5) * arch.f_out;
}

/// Baseline that shrinks the network by narrowing every block to new_f channels.
inline Count count_trimmed(const ArchConfig& arch, std::size_t new_f) {
    if (new_f < 1 || new_f > arch.f_in) {
        throw rank_error("trimmed width must lie in [1, f_in]");
    }
    ArchConfig t = arch;
    t.f_in = new_f;
    t.f_out = new_f;
    return count_dense(t);
}

/// Ratio of totals (tensorized + overhead on both sides).
inline double compression_ratio(Count method_total, Count dense_total) {
    if (method_total == 0 || dense_total == 0) {
        throw std::invalid_argument("compression ratio needs positive totals");
    }
    return static_cast<double>(dense_total) / static_cast<double>(method_total);
}

/// Fixed-point decimal formatting with round-half-even, e.g. 5.2x / 1.28x.
inline std::string format_ratio(double ratio, int decimals = 2) {
    if (decimals < 0 || decimals > 6) throw std::invalid_argument("decimals out of range");
    double pow10 = 1.0;
    for (int i = 0; i < decimals; ++i) pow10 *= 10.0;
    const auto scaled = static_cast<long long>(std::nearbyint(ratio * pow10));
    const long long whole = scaled / static_cast<long long>(pow10);
    long long frac = scaled % static_cast<long long>(pow10);
    if (frac < 0) frac = -frac;
    std::string s = std::to_string(whole);
    if (decimals > 0) {
        std::string f = std::to_string(frac);
        s += "." + std::string(static_cast<std::size_t>(decimals) - f.size(), '0') + f;
    }
    return s + "x";
}

// ---------------------------------------------------------------------------
// Reference ratio tables (redundancy study + method comparison)
// ---------------------------------------------------------------------------

struct RatioRow {
    Shape ranks;     // Tucker ranks, or the full rank chain for the MPS row
    double printed;  // ratio the reference table reports
};

/// Redundancy study: one mode group compressed at a time on the full-scale arch.
inline const std::vector<RatioRow>& table2_reference() {
    static const std::vector<RatioRow> rows = {
        {{3, 4, 3, 2, 128, 128, 3, 3}, 1.28}, {{2, 4, 3, 2, 128, 128, 3, 3}, 1.82},
        {{1, 4, 3, 2, 128, 128, 3, 3}, 3.03}, {{4, 3, 3, 2, 128, 128, 3, 3}, 1.28},
        {{4, 2, 3, 2, 128, 128, 3, 3}, 1.82}, {{4, 1, 3, 2, 128, 128, 3, 3}, 3.03},
        {{4, 4, 2, 2, 128, 128, 3, 3}, 1.43}, {{4, 4, 1, 2, 128, 128, 3, 3}, 2.50},
        {{4, 4, 3, 1, 128, 128, 3, 3}, 1.82}, {{4, 4, 3, 2, 96, 96, 3, 3}, 1.64},
        {{4, 4, 3, 2, 64, 64, 3, 3}, 3.03},   {{4, 4, 3, 2, 32, 32, 3, 3}, 6.25},
        {{4, 4, 3, 2, 128, 128, 2, 2}, 1.98},
    };
    return rows;
}

/// Method comparison, Tucker rows.
inline const std::vector<RatioRow>& table3_tucker_reference() {
    static const std::vector<RatioRow> rows = {
        {{4, 3, 3, 2, 110, 110, 3, 3}, 1.7}, {{4, 4, 2, 2, 110, 110, 3, 3}, 1.8},
        {{3, 3, 3, 2, 110, 110, 2, 2}, 3.7}, {{3, 2, 3, 2, 96, 96, 3, 3}, 3.4},
        {{3, 3, 2, 2, 80, 80, 3, 3}, 4.2},   {{2, 2, 2, 2, 96, 96, 3, 3}, 5.2},
    };
    return rows;
}

/// Method comparison, MPS row (boundary ranks included).
inline const RatioRow& table3_mps_reference() {
    static const RatioRow row = {{1, 4, 4, 12, 24, 110, 9, 3, 1}, 7.4};
    return row;
}

struct ParamReport {
    std::string method;
    std::string descriptor;
    Count tensorized = 0;
    Count overhead = 0;
    Count total = 0;
    double ratio = 1.0;
};

namespace detail {

inline std::string rank_list_string(const Shape& ranks) {
    std::string s;
    for (std::size_t i = 0; i < ranks.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(ranks[i]);
    }
    return s;
}

inline ParamReport make_report(std::string method, const Shape& ranks, Count tensorized,
                               Count overhead, Count dense) {
    ParamReport r;
    r.method = std::move(method);
    r.descriptor = rank_list_string(ranks);
    r.tensorized = tensorized;
    r.overhead = overhead;
    r.total = tensorized + overhead;
    r.ratio = compression_ratio(r.total, dense + overhead);
    return r;
}

}  // namespace detail

inline std::vector<ParamReport> reproduce_table2(const ArchConfig& arch, Count overhead) {
    const Count dense = count_dense(arch);
    std::vector<ParamReport> out;
    for (const RatioRow& row : table2_reference()) {
        out.push_back(
            detail::make_report("tucker", row.ranks, count_tucker(arch, row.ranks), overhead, dense));
    }
    return out;
}

inline std::vector<ParamReport> reproduce_table3(const ArchConfig& arch, Count overhead) {
    const Count dense = count_dense(arch);
    std::vector<ParamReport> out;
    for (const RatioRow& row : table3_tucker_reference()) {
        out.push_back(
            detail::make_report("tucker", row.ranks, count_tucker(arch, row.ranks), overhead, dense));
    }
    const RatioRow& mps = table3_mps_reference();
    out.push_back(detail::make_report("mps", mps.ranks, count_mps(arch, mps.ranks), overhead, dense));
    return out;
}

}  // namespace tnet
