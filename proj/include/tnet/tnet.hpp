#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "tnet/decomp.hpp"
#include "tnet/errors.hpp"
#include "tnet/tensor.hpp"

namespace tnet {

// ---------------------------------------------------------------------------
// Architecture description. The eight extents of the network weight tensor,
// in fixed mode order: (#hourglasses, hourglass depth, pathway, block depth,
// f_in, f_out, kernel height, kernel width).
// ---------------------------------------------------------------------------

struct ArchConfig {
    std::size_t n_hg = 1;
    std::size_t hg_depth = 1;
    std::size_t hg_subnet = 1;
    std::size_t b_depth = 1;
    std::size_t f_in = 1;
    std::size_t f_out = 1;
    std::size_t kernel_h = 1;
    std::size_t kernel_w = 1;
    double overhead_params = 0.0;  // untensorized parameter count

    void validate() const {
        const std::size_t e[] = {n_hg, hg_depth, hg_subnet, b_depth, f_in, f_out, kernel_h, kernel_w};
        for (std::size_t x : e) {
            if (x < 1) throw shape_error("arch: all extents must be >= 1");
        }
        if (!(overhead_params >= 0.0)) throw shape_error("arch: overhead_params must be >= 0");
    }
};

inline Shape weight_tensor_shape(const ArchConfig& a) {
    a.validate();
    return {a.n_hg, a.hg_depth, a.hg_subnet, a.b_depth, a.f_in, a.f_out, a.kernel_h, a.kernel_w};
}

/// Pathway role of mode 2. The index itself is what the weight tensor
/// stores; the toy network gives these three values meaning.
enum class Pathway : std::size_t { encoder = 0, decoder = 1, skip = 2 };

inline void to_json(nlohmann::json& j, const ArchConfig& a) {
    j = nlohmann::json{{"n_hg", a.n_hg},         {"hg_depth", a.hg_depth},
                       {"hg_subnet", a.hg_subnet}, {"b_depth", a.b_depth},
                       {"f_in", a.f_in},         {"f_out", a.f_out},
                       {"kernel_h", a.kernel_h}, {"kernel_w", a.kernel_w},
                       {"overhead_params", a.overhead_params}};
}

inline void from_json(const nlohmann::json& j, ArchConfig& a) {
    j.at("n_hg").get_to(a.n_hg);
    j.at("hg_depth").get_to(a.hg_depth);
    j.at("hg_subnet").get_to(a.hg_subnet);
    j.at("b_depth").get_to(a.b_depth);
    j.at("f_in").get_to(a.f_in);
    j.at("f_out").get_to(a.f_out);
    j.at("kernel_h").get_to(a.kernel_h);
    j.at("kernel_w").get_to(a.kernel_w);
    a.overhead_params = j.value("overhead_params", 0.0);
}

inline ArchConfig read_arch_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open " + path.string());
    nlohmann::json j;
    try {
        is >> j;
        ArchConfig a = j.get<ArchConfig>();
        a.validate();
        return a;
    } catch (const nlohmann::json::exception& e) {
        throw io_error("bad arch config " + path.string() + ": " + e.what());
    }
}

inline void write_arch_config(const std::filesystem::path& path, const ArchConfig& a) {
    std::ofstream os(path);
    if (!os) throw io_error("cannot write " + path.string());
    os << nlohmann::json(a).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Network weights: the full 8th-order tensor in dense, Tucker, or MPS form.
// ---------------------------------------------------------------------------

struct TNetWeights {
    ArchConfig arch;
    std::variant<DenseTensor, TuckerFactors, MPSCores> form;

    void validate() const {
        const Shape want = weight_tensor_shape(arch);
        const Shape got = std::visit(
            [](const auto& f) -> Shape {
                using T = std::decay_t<decltype(f)>;
                if constexpr (std::is_same_v<T, DenseTensor>) {
                    return f.shape;
                } else {
                    return f.shape();
                }
            },
            form);
        if (got != want) {
            throw shape_error("weights shape " + shape_to_string(got) + " does not match arch " +
                              shape_to_string(want));
        }
    }
};

// ---------------------------------------------------------------------------
// Feature maps and convolutions
// ---------------------------------------------------------------------------

struct FeatureMap {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    Buffer data;  // row-major (channel, y, x)

    FeatureMap() = default;
    FeatureMap(std::size_t c, std::size_t h, std::size_t w)
        : channels(c), height(h), width(w), data(c * h * w) {}

    std::size_t size() const { return data.size(); }
    double& at(std::size_t c, std::size_t y, std::size_t x) {
        return data[(c * height + y) * width + x];
    }
    double at(std::size_t c, std::size_t y, std::size_t x) const {
        return data[(c * height + y) * width + x];
    }
};

/// One layer's factorized kernel: input channel mixer, spatial core slice,
/// output channel mixer.
struct FactorizedConv {
    Matrix u_in;              // I4 x R4
    DenseTensor partial_core;  // (R4, R5, I6, I7)
    Matrix u_out;             // I5 x R5
    std::array<std::size_t, 4> layer_index{0, 0, 0, 0};

    void validate() const {
        if (partial_core.order() != 4) throw shape_error("factorized conv: core must be order 4");
        if (u_in.cols != partial_core.shape[0] || u_out.cols != partial_core.shape[1]) {
            throw shape_error("factorized conv: channel mixers do not match core ranks");
        }
    }
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                   std::size_t pad) {
    const std::size_t padded = in + 2 * pad;
    if (padded < kernel) throw shape_error("conv: kernel larger than padded input");
    return (padded - kernel) / stride + 1;
}

/// Direct cross-correlation with zero padding. Kernel axes follow the weight
/// tensor convention (f_in, f_out, h, w).
inline FeatureMap conv2d_reference(const FeatureMap& x, const DenseTensor& k, std::size_t stride = 1,
                                   std::size_t pad = 0) {
    if (k.order() != 4) throw shape_error("conv: kernel must be order 4 (f_in, f_out, h, w)");
    if (stride < 1) throw shape_error("conv: stride must be >= 1");
    const std::size_t ci = k.shape[0], co = k.shape[1], kh = k.shape[2], kw = k.shape[3];
    if (x.channels != ci) {
        throw shape_error("conv: input has " + std::to_string(x.channels) + " channels, kernel expects " +
                          std::to_string(ci));
    }
    const std::size_t oh = conv_out_extent(x.height, kh, stride, pad);
    const std::size_t ow = conv_out_extent(x.width, kw, stride, pad);

    FeatureMap out(co, oh, ow);
    for (std::size_t c = 0; c < co; ++c) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                double acc = 0.0;
                for (std::size_t s = 0; s < ci; ++s) {
                    for (std::size_t u = 0; u < kh; ++u) {
                        const std::ptrdiff_t iy =
                            static_cast<std::ptrdiff_t>(oy * stride + u) - static_cast<std::ptrdiff_t>(pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(x.height)) continue;
                        for (std::size_t v = 0; v < kw; ++v) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(ox * stride + v) - static_cast<std::ptrdiff_t>(pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(x.width)) continue;
                            acc += x.at(s, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) *
                                   k(s, c, u, v);
                        }
                    }
                }
                out.at(c, oy, ox) = acc;
            }
        }
    }
    return out;
}

namespace detail {

/// out(c') = sum_c m(c', c) * x(c), per pixel: a 1x1 convolution.
inline FeatureMap apply_channel_matrix(const FeatureMap& x, const Matrix& m) {
    if (m.cols != x.channels) throw shape_error("1x1 conv: channel mismatch");
    FeatureMap out(m.rows, x.height, x.width);
    const std::size_t hw = x.height * x.width;
    for (std::size_t c = 0; c < m.rows; ++c) {
        double* dst = out.data.data() + c * hw;
        for (std::size_t s = 0; s < x.channels; ++s) {
            const double w = m(c, s);
            if (w == 0.0) continue;
            const double* src = x.data.data() + s * hw;
            for (std::size_t i = 0; i < hw; ++i) dst[i] += w * src[i];
        }
    }
    return out;
}

}  // namespace detail

/// The three-convolution pipeline: 1x1 down to R4 channels, spatial conv
/// with the partial core, 1x1 back up to I5 channels.
inline FeatureMap factorized_conv2d(const FeatureMap& x, const FactorizedConv& fc,
                                    std::size_t stride = 1, std::size_t pad = 0) {
    fc.validate();
    if (x.channels != fc.u_in.rows) {
        throw shape_error("factorized conv: input has " + std::to_string(x.channels) +
                          " channels, expected " + std::to_string(fc.u_in.rows));
    }
    FeatureMap z = detail::apply_channel_matrix(x, transpose(fc.u_in));
    z = conv2d_reference(z, fc.partial_core, stride, pad);
    return detail::apply_channel_matrix(z, fc.u_out);
}

// ---------------------------------------------------------------------------
// Kernel slicing
// ---------------------------------------------------------------------------

namespace detail {

inline void check_layer_index(const Shape& shape, std::size_t i0, std::size_t i1, std::size_t i2,
                              std::size_t i3) {
    const std::size_t idx[] = {i0, i1, i2, i3};
    for (std::size_t k = 0; k < 4; ++k) {
        if (idx[k] >= shape[k]) {
            throw std::out_of_range("layer index " + std::to_string(idx[k]) + " out of range for mode " +
                                    std::to_string(k) + " extent " + std::to_string(shape[k]));
        }
    }
}

/// Contracts the first four Tucker modes at fixed indices in one pass over
/// the core: S(r4..r7) = sum_{r0..r3} G(r0..r7) * prod_k U_k(i_k, r_k).
/// Never touches anything sized like the full tensor.
inline DenseTensor tucker_leading_contract(const TuckerFactors& f, std::size_t i0, std::size_t i1,
                                           std::size_t i2, std::size_t i3) {
    const Shape& r = f.core.shape;
    const std::size_t inner = r[4] * r[5] * r[6] * r[7];
    DenseTensor s(Shape{r[4], r[5], r[6], r[7]});
    double* acc = s.data.data();
    const double* core = f.core.data.data();
    for (std::size_t r0 = 0; r0 < r[0]; ++r0) {
        const double w0 = f.factors[0](i0, r0);
        for (std::size_t r1 = 0; r1 < r[1]; ++r1) {
            const double w1 = w0 * f.factors[1](i1, r1);
            for (std::size_t r2 = 0; r2 < r[2]; ++r2) {
                const double w2 = w1 * f.factors[2](i2, r2);
                for (std::size_t r3 = 0; r3 < r[3]; ++r3) {
                    const double w3 = w2 * f.factors[3](i3, r3);
                    if (w3 == 0.0) continue;
                    const double* block = core + (((r0 * r[1] + r1) * r[2] + r2) * r[3] + r3) * inner;
                    for (std::size_t i = 0; i < inner; ++i) acc[i] += w3 * block[i];
                }
            }
        }
    }
    return s;
}

}  // namespace detail

/// The (I4, I5, I6, I7) kernel of one layer. Dense form slices directly;
/// compressed forms reconstruct only the slice, never the full tensor.
inline DenseTensor slice_kernel(const TNetWeights& w, std::size_t i0, std::size_t i1, std::size_t i2,
                                std::size_t i3) {
    const Shape full = weight_tensor_shape(w.arch);
    detail::check_layer_index(full, i0, i1, i2, i3);
    const Shape kshape{full[4], full[5], full[6], full[7]};

    if (const auto* dense = std::get_if<DenseTensor>(&w.form)) {
        const std::size_t block = num_elements(kshape);
        const std::size_t offset =
            (((i0 * full[1] + i1) * full[2] + i2) * full[3] + i3) * block;
        DenseTensor out(kshape);
        std::copy(dense->data.begin() + static_cast<std::ptrdiff_t>(offset),
                  dense->data.begin() + static_cast<std::ptrdiff_t>(offset + block),
                  out.data.begin());
        return out;
    }

    if (const auto* tucker = std::get_if<TuckerFactors>(&w.form)) {
        DenseTensor s = detail::tucker_leading_contract(*tucker, i0, i1, i2, i3);
        for (std::size_t m = 0; m < 4; ++m) s = mode_n_product(s, tucker->factors[4 + m], m);
        return s;
    }

    const auto& mps = std::get<MPSCores>(w.form);
    const std::size_t pick[] = {i0, i1, i2, i3};
    std::vector<double> v(mps.cores[0].shape[2]);
    for (std::size_t rr = 0; rr < v.size(); ++rr) v[rr] = mps.cores[0](0, pick[0], rr);
    for (std::size_t k = 1; k < 4; ++k) {
        std::vector<double> next(mps.cores[k].shape[2]);
        detail::chain_step(v.data(), mps.cores[k], pick[k], next.data());
        v = std::move(next);
    }

    std::size_t rows = 1;
    std::size_t width = v.size();
    std::vector<double> q = std::move(v);
    for (std::size_t k = 4; k < 8; ++k) {
        const std::size_t ik = mps.cores[k].shape[1];
        const std::size_t next_width = mps.cores[k].shape[2];
        std::vector<double> next(rows * ik * next_width);
        for (std::size_t m = 0; m < rows; ++m) {
            for (std::size_t i = 0; i < ik; ++i) {
                detail::chain_step(q.data() + m * width, mps.cores[k], i,
                                   next.data() + (m * ik + i) * next_width);
            }
        }
        q = std::move(next);
        rows *= ik;
        width = next_width;
    }
    return DenseTensor(kshape, std::move(q));
}

/// Tucker fast path for one layer: keeps the channel mixers U4, U5 apart and
/// contracts everything else into an (R4, R5, I6, I7) spatial core, so
/// kernel(s,t,j,k) = sum_{r4,r5} core(r4,r5,j,k) * U4(s,r4) * U5(t,r5).
inline FactorizedConv partial_core_contract(const TuckerFactors& f, std::size_t i0, std::size_t i1,
                                            std::size_t i2, std::size_t i3) {
    f.validate();
    detail::check_layer_index(f.shape(), i0, i1, i2, i3);
    DenseTensor s = detail::tucker_leading_contract(f, i0, i1, i2, i3);
    s = mode_n_product(s, f.factors[6], 2);
    s = mode_n_product(s, f.factors[7], 3);
    FactorizedConv fc;
    fc.u_in = f.factors[4];
    fc.u_out = f.factors[5];
    fc.partial_core = std::move(s);
    fc.layer_index = {i0, i1, i2, i3};
    return fc;
}

// ---------------------------------------------------------------------------
// Cost model
// ---------------------------------------------------------------------------

struct ConvFlops {
    unsigned long long baseline = 0;
    unsigned long long factorized = 0;
};

/// Multiply-accumulate counts over an H x W output grid. Rank 0 means full
/// rank for that side.
inline ConvFlops conv_flops(std::size_t i4, std::size_t i5, std::size_t i6, std::size_t i7,
                            std::size_t h, std::size_t w, std::size_t r4 = 0, std::size_t r5 = 0) {
    if (r4 == 0) r4 = i4;
    if (r5 == 0) r5 = i5;
    const unsigned long long hw = static_cast<unsigned long long>(h) * w;
    ConvFlops out;
    out.baseline = hw * i4 * i5 * i6 * i7;
    out.factorized = hw * (static_cast<unsigned long long>(i4) * r4 +
                           static_cast<unsigned long long>(r4) * r5 * i6 * i7 +
                           static_cast<unsigned long long>(r5) * i5);
    return out;
}

}  // namespace tnet
