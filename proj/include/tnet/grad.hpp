#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tnet/decomp.hpp"
#include "tnet/errors.hpp"
#include "tnet/rng.hpp"
#include "tnet/tensor.hpp"
#include "tnet/tnet.hpp"

namespace tnet {

// ---------------------------------------------------------------------------
// Gradient projection through the Tucker parametrization
// ---------------------------------------------------------------------------

struct TuckerGradients {
    DenseTensor d_core;
    std::vector<Matrix> d_factors;
};

/// Chain rule through W = G x_0 U0 ... x_N UN:
///   dG   = dW x_0 U0' ... x_N UN'
///   dUk  = unfold(dW, k) * unfold(G x_{j != k} Uj, k)'
inline TuckerGradients project_gradients(const TuckerFactors& f, const DenseTensor& dw) {
    f.validate();
    if (dw.shape != f.shape()) {
        throw shape_error("project_gradients: dW shape " + shape_to_string(dw.shape) +
                          " does not match weights " + shape_to_string(f.shape()));
    }
    const std::size_t n = f.factors.size();

    TuckerGradients g;
    g.d_core = dw;
    for (std::size_t k = 0; k < n; ++k) {
        g.d_core = mode_n_product(g.d_core, transpose(f.factors[k]), k);
    }

    g.d_factors.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        DenseTensor partial = f.core;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == k) continue;
            partial = mode_n_product(partial, f.factors[j], j);
        }
        g.d_factors.push_back(matmul(unfold(dw, k), transpose(unfold(partial, k))));
    }
    return g;
}

/// Central-difference validation of analytic gradients. Checks every
/// parameter, or a seeded random subset of at least `min_subset` when there
/// are more than 10^4 of them. Returns the worst relative discrepancy
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
inline double finite_difference_check(const std::function<double(const TuckerFactors&)>& loss,
                                      const TuckerFactors& f, const TuckerGradients& analytic,
                                      double step, std::size_t min_subset = 200,
                                      std::uint64_t subset_seed = 12345) {
    if (!(step > 0.0)) throw std::invalid_argument("finite_difference_check: step must be > 0");
    f.validate();

    std::size_t total = f.core.size();
    for (const auto& u : f.factors) total += u.size();

    std::vector<std::size_t> probe;
    if (total > 10000) {
        Rng rng(subset_seed);
        std::vector<bool> seen(total, false);
        const std::size_t want = std::min(std::max(min_subset, std::size_t{200}), total);
        while (probe.size() < want) {
            const std::size_t i = rng.uniform_index(total);
            if (!seen[i]) {
                seen[i] = true;
                probe.push_back(i);
            }
        }
        std::sort(probe.begin(), probe.end());
    } else {
        probe.resize(total);
        for (std::size_t i = 0; i < total; ++i) probe[i] = i;
    }

    auto param_ref = [](TuckerFactors& t, std::size_t flat) -> double& {
        if (flat < t.core.size()) return t.core.data[flat];
        flat -= t.core.size();
        for (auto& u : t.factors) {
            if (flat < u.size()) return u.data[flat];
            flat -= u.size();
        }
        throw std::out_of_range("parameter index out of range");
    };
    auto analytic_at = [&](std::size_t flat) -> double {
        if (flat < analytic.d_core.size()) return analytic.d_core.data[flat];
        flat -= analytic.d_core.size();
        for (const auto& u : analytic.d_factors) {
            if (flat < u.size()) return u.data[flat];
            flat -= u.size();
        }
        throw std::out_of_range("gradient index out of range");
    };

    TuckerFactors work = f;
    double worst = 0.0;
    for (std::size_t flat : probe) {
        double& p = param_ref(work, flat);
        const double saved = p;
        p = saved + step;
        const double up = loss(work);
        p = saved - step;
        const double down = loss(work);
        p = saved;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw convergence_error("finite_difference_check: non-finite loss", flat);
        }
        const double numeric = (up - down) / (2.0 * step);
        const double a = analytic_at(flat);
        const double d = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
        worst = std::max(worst, d);
    }
    return worst;
}

// ---------------------------------------------------------------------------
// RMSprop
// ---------------------------------------------------------------------------

struct RmsPropState {
    double lr = 2.5e-4;
    double rho = 0.99;
    double eps = 1e-8;
    std::vector<double> acc;  // lazily sized to the parameter block
};

inline void rmsprop_step(RmsPropState& s, std::span<double> params, std::span<const double> grads) {
    if (params.size() != grads.size()) throw shape_error("rmsprop: parameter/gradient size mismatch");
    if (s.acc.empty()) s.acc.assign(params.size(), 0.0);
    if (s.acc.size() != params.size()) throw shape_error("rmsprop: accumulator size mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        s.acc[i] = s.rho * s.acc[i] + (1.0 - s.rho) * g * g;
        params[i] -= s.lr * g / (std::sqrt(s.acc[i]) + s.eps);
    }
}

// ---------------------------------------------------------------------------
// Synthetic dense-prediction task: multi-channel images whose leading
// channels carry Gaussian keypoint bumps (plus noise), targets are the clean
// bumps. Small enough that spatial convolution still matters.
// ---------------------------------------------------------------------------

struct ToyTask {
    std::uint64_t seed = 0;
    std::vector<FeatureMap> inputs;
    std::vector<FeatureMap> targets;

    static ToyTask make(std::uint64_t seed, std::size_t samples = 6, std::size_t in_channels = 3,
                        std::size_t height = 16, std::size_t width = 16, std::size_t keypoints = 2,
                        double sigma = 1.5) {
        if (samples < 1 || in_channels < 1 || keypoints < 1) {
            throw shape_error("toy task: samples, channels and keypoints must be >= 1");
        }
        ToyTask t;
        t.seed = seed;
        Rng rng(seed);
        for (std::size_t s = 0; s < samples; ++s) {
            FeatureMap target(keypoints, height, width);
            FeatureMap input(in_channels, height, width);
            for (std::size_t k = 0; k < keypoints; ++k) {
                const double cy = static_cast<double>(rng.uniform_index(height));
                const double cx = static_cast<double>(rng.uniform_index(width));
                for (std::size_t y = 0; y < height; ++y) {
                    for (std::size_t x = 0; x < width; ++x) {
                        const double dy = static_cast<double>(y) - cy;
                        const double dx = static_cast<double>(x) - cx;
                        target.at(k, y, x) = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
                    }
                }
            }
            for (std::size_t c = 0; c < in_channels; ++c) {
                for (std::size_t y = 0; y < height; ++y) {
                    for (std::size_t x = 0; x < width; ++x) {
                        const double signal = c < keypoints ? 2.0 * target.at(c, y, x) : 0.0;
                        input.at(c, y, x) = signal + 0.2 * rng.normal();
                    }
                }
            }
            t.inputs.push_back(std::move(input));
            t.targets.push_back(std::move(target));
        }
        return t;
    }
};

// ---------------------------------------------------------------------------
// Toy stacked-hourglass trainer. Every tensorized convolution kernel is a
// slice of one Tucker-parametrized weight tensor; the stem, the batch norms
// and the head are the untensorized overhead.
// ---------------------------------------------------------------------------

/// Desk-scale architecture used by the trainer examples and the CLI default:
/// two stacks of depth-2 hourglasses with 8-channel blocks, 24 conv layers.
inline ArchConfig toy_scale_arch() {
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

struct TrainOptions {
    double lr = 2.5e-4;
    double rho = 0.99;
    double eps = 1e-8;
    bool record_dense_loss = false;  // also evaluate the densely reconstructed net each step
};

struct TrainResult {
    std::vector<double> loss_history;
    std::vector<double> dense_loss_history;  // filled when requested
    TuckerFactors factors;
};

namespace detail {

using Batch = std::vector<FeatureMap>;

// Stride-1 convolution gradients, kernel axes (f_in, f_out, h, w).
inline void conv2d_grad_kernel(const FeatureMap& x, const FeatureMap& dy, std::size_t kh,
                               std::size_t kw, std::size_t pad, DenseTensor& dk) {
    for (std::size_t s = 0; s < x.channels; ++s) {
        for (std::size_t t = 0; t < dy.channels; ++t) {
            for (std::size_t u = 0; u < kh; ++u) {
                for (std::size_t v = 0; v < kw; ++v) {
                    double acc = 0.0;
                    for (std::size_t oy = 0; oy < dy.height; ++oy) {
                        const std::ptrdiff_t iy =
                            static_cast<std::ptrdiff_t>(oy + u) - static_cast<std::ptrdiff_t>(pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(x.height)) continue;
                        for (std::size_t ox = 0; ox < dy.width; ++ox) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(ox + v) - static_cast<std::ptrdiff_t>(pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(x.width)) continue;
                            acc += x.at(s, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) *
                                   dy.at(t, oy, ox);
                        }
                    }
                    dk(s, t, u, v) += acc;
                }
            }
        }
    }
}

inline FeatureMap conv2d_grad_input(const DenseTensor& k, const FeatureMap& dy, std::size_t in_h,
                                    std::size_t in_w, std::size_t pad) {
    const std::size_t ci = k.shape[0], co = k.shape[1], kh = k.shape[2], kw = k.shape[3];
    FeatureMap dx(ci, in_h, in_w);
    for (std::size_t s = 0; s < ci; ++s) {
        for (std::size_t t = 0; t < co; ++t) {
            for (std::size_t u = 0; u < kh; ++u) {
                for (std::size_t v = 0; v < kw; ++v) {
                    const double w = k(s, t, u, v);
                    if (w == 0.0) continue;
                    for (std::size_t oy = 0; oy < dy.height; ++oy) {
                        const std::ptrdiff_t iy =
                            static_cast<std::ptrdiff_t>(oy + u) - static_cast<std::ptrdiff_t>(pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in_h)) continue;
                        for (std::size_t ox = 0; ox < dy.width; ++ox) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(ox + v) - static_cast<std::ptrdiff_t>(pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in_w)) continue;
                            dx.at(s, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) +=
                                w * dy.at(t, oy, ox);
                        }
                    }
                }
            }
        }
    }
    return dx;
}

enum class Op { input, conv_tensor, conv_param, bias, bn, relu, pool2, up2, add };

struct TapeNode {
    Op op = Op::input;
    int a = -1;
    int b = -1;
    int layer = -1;  // conv_tensor: flat layer id; conv_param/bias/bn: param block id
    Batch out;
    Batch saved;                    // bn: normalized activations
    std::vector<double> inv_std;    // bn: per channel
};

struct ParamBlock {
    std::vector<double> value;
    std::vector<double> grad;
    RmsPropState opt;
};

class ToyNet {
public:
    ToyNet(const ArchConfig& arch, const Shape& ranks, const ToyTask& task, const TrainOptions& opt)
        : arch_(arch), opt_(opt) {
        arch_.validate();
        if (arch_.f_in != arch_.f_out) {
            throw shape_error("toy net: f_in must equal f_out so blocks compose");
        }
        if (arch_.hg_subnet != 3) {
            throw shape_error("toy net: needs the three pathways encoder/decoder/skip");
        }
        if (arch_.kernel_h % 2 == 0 || arch_.kernel_w % 2 == 0) {
            throw shape_error("toy net: kernels must be odd for same-size padding");
        }
        if (task.inputs.empty() || task.inputs.size() != task.targets.size()) {
            throw shape_error("toy net: task must pair inputs with targets");
        }
        in_channels_ = task.inputs[0].channels;
        out_channels_ = task.targets[0].channels;
        height_ = task.inputs[0].height;
        width_ = task.inputs[0].width;
        for (std::size_t s = 0; s < task.inputs.size(); ++s) {
            const FeatureMap& in = task.inputs[s];
            const FeatureMap& tg = task.targets[s];
            if (in.channels != in_channels_ || in.height != height_ || in.width != width_ ||
                tg.channels != out_channels_ || tg.height != height_ || tg.width != width_) {
                throw shape_error("toy net: all samples must share one geometry");
            }
        }
        const std::size_t down = std::size_t{1} << arch_.hg_depth;
        if (height_ % down != 0 || width_ % down != 0) {
            throw shape_error("toy net: input extent must be divisible by 2^hg_depth");
        }

        // Kaiming-style dense init, then HOSVD at the requested ranks.
        Rng rng(task.seed + 0x9e3779b9);
        DenseTensor w0(weight_tensor_shape(arch_));
        const double std_w =
            std::sqrt(2.0 / static_cast<double>(arch_.f_in * arch_.kernel_h * arch_.kernel_w));
        for (auto& v : w0.data) v = rng.normal(0.0, std_w);
        factors_ = hosvd(w0, ranks);

        opt_core_ = make_opt();
        opt_factors_.assign(factors_.factors.size(), RmsPropState{});
        for (auto& s : opt_factors_) s = make_opt();

        stem_ = make_block(in_channels_ * arch_.f_in * arch_.kernel_h * arch_.kernel_w);
        const double std_stem =
            std::sqrt(2.0 / static_cast<double>(in_channels_ * arch_.kernel_h * arch_.kernel_w));
        for (auto& v : stem_.value) v = rng.normal(0.0, std_stem);
        stem_bn_ = make_bn(arch_.f_in);

        layer_count_ = arch_.n_hg * arch_.hg_depth * arch_.hg_subnet * arch_.b_depth;
        for (std::size_t i = 0; i < layer_count_; ++i) bns_.push_back(make_bn(arch_.f_out));

        head_ = make_block(arch_.f_out * out_channels_);  // zero init
        head_bias_ = make_block(out_channels_);
    }

    const TuckerFactors& factors() const { return factors_; }

    /// One full training step on the batch; returns the pre-update loss.
    double step(const Batch& inputs, const Batch& targets) {
        refresh_layer_cache();
        tape_.clear();
        const int pred = forward(inputs, false);
        const double loss = mse(tape_[pred].out, targets);
        backward(pred, targets);
        update();
        return loss;
    }

    /// Loss of the densely reconstructed network (reference convolutions)
    /// with the current parameters. No tape, no updates.
    double dense_loss(const Batch& inputs, const Batch& targets) {
        dense_full_ = tucker_reconstruct(factors_);
        tape_.clear();
        const int pred = forward(inputs, true);
        const double loss = mse(tape_[pred].out, targets);
        tape_.clear();
        return loss;
    }

    /// Loss with the given tensorized weights swapped in; every other
    /// parameter stays fixed and nothing is updated.
    double evaluate(const TuckerFactors& f, const Batch& inputs, const Batch& targets) {
        factors_ = f;
        refresh_layer_cache();
        tape_.clear();
        const int pred = forward(inputs, false);
        const double loss = mse(tape_[pred].out, targets);
        tape_.clear();
        return loss;
    }

    /// Projected gradient of the loss at the current tensorized weights.
    /// Fills the parameter blocks' grad fields as a side effect but
    /// applies no optimizer update.
    TuckerGradients loss_gradients(const Batch& inputs, const Batch& targets) {
        refresh_layer_cache();
        tape_.clear();
        const int pred = forward(inputs, false);
        backward(pred, targets);
        tape_.clear();
        return project_gradients(factors_, dw_);
    }

private:
    RmsPropState make_opt() const {
        RmsPropState s;
        s.lr = opt_.lr;
        s.rho = opt_.rho;
        s.eps = opt_.eps;
        return s;
    }

    ParamBlock make_block(std::size_t n) {
        ParamBlock b;
        b.value.assign(n, 0.0);
        b.grad.assign(n, 0.0);
        b.opt = make_opt();
        return b;
    }

    ParamBlock make_bn(std::size_t channels) {
        ParamBlock b = make_block(2 * channels);  // gamma then beta
        for (std::size_t c = 0; c < channels; ++c) b.value[c] = 1.0;
        return b;
    }

    std::size_t layer_id(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3) const {
        return ((i0 * arch_.hg_depth + i1) * arch_.hg_subnet + i2) * arch_.b_depth + i3;
    }

    void refresh_layer_cache() {
        layer_conv_.clear();
        layer_kernel_.clear();
        TNetWeights w;
        w.arch = arch_;
        w.form = factors_;
        for (std::size_t i0 = 0; i0 < arch_.n_hg; ++i0)
            for (std::size_t i1 = 0; i1 < arch_.hg_depth; ++i1)
                for (std::size_t i2 = 0; i2 < arch_.hg_subnet; ++i2)
                    for (std::size_t i3 = 0; i3 < arch_.b_depth; ++i3) {
                        layer_conv_.push_back(partial_core_contract(factors_, i0, i1, i2, i3));
                        layer_kernel_.push_back(slice_kernel(w, i0, i1, i2, i3));
                    }
    }

    int push(TapeNode node) {
        tape_.push_back(std::move(node));
        return static_cast<int>(tape_.size() - 1);
    }

    // ---- forward ops ----

    int node_input(const Batch& x) {
        TapeNode n;
        n.op = Op::input;
        n.out = x;
        return push(std::move(n));
    }

    int node_conv_tensor(int in, std::size_t layer, bool dense_path) {
        TapeNode n;
        n.op = Op::conv_tensor;
        n.a = in;
        n.layer = static_cast<int>(layer);
        const std::size_t pad_h = (arch_.kernel_h - 1) / 2;
        for (const auto& x : tape_[in].out) {
            if (dense_path) {
                n.out.push_back(conv2d_reference(x, dense_kernel(layer), 1, pad_h));
            } else {
                n.out.push_back(factorized_conv2d(x, layer_conv_[layer], 1, pad_h));
            }
        }
        return push(std::move(n));
    }

    int node_conv_param(int in, ParamBlock& block, int block_id, std::size_t ci, std::size_t co,
                        std::size_t kh, std::size_t kw) {
        TapeNode n;
        n.op = Op::conv_param;
        n.a = in;
        n.layer = block_id;
        DenseTensor k(Shape{ci, co, kh, kw}, block.value);
        const std::size_t pad = (kh - 1) / 2;
        for (const auto& x : tape_[in].out) n.out.push_back(conv2d_reference(x, k, 1, pad));
        return push(std::move(n));
    }

    int node_bias(int in, ParamBlock& block, int block_id) {
        TapeNode n;
        n.op = Op::bias;
        n.a = in;
        n.layer = block_id;
        for (const auto& x : tape_[in].out) {
            FeatureMap y = x;
            for (std::size_t c = 0; c < y.channels; ++c)
                for (std::size_t i = 0; i < y.height * y.width; ++i)
                    y.data[c * y.height * y.width + i] += block.value[c];
            n.out.push_back(std::move(y));
        }
        return push(std::move(n));
    }

    int node_bn(int in, ParamBlock& block, int block_id) {
        TapeNode n;
        n.op = Op::bn;
        n.a = in;
        n.layer = block_id;
        const Batch& x = tape_[in].out;
        const std::size_t channels = x[0].channels;
        const std::size_t hw = x[0].height * x[0].width;
        const double count = static_cast<double>(x.size() * hw);
        n.inv_std.resize(channels);
        n.saved.reserve(x.size());
        for (const auto& m : x) n.saved.push_back(FeatureMap(m.channels, m.height, m.width));
        n.out = n.saved;
        for (std::size_t c = 0; c < channels; ++c) {
            double mean = 0.0;
            for (const auto& m : x)
                for (std::size_t i = 0; i < hw; ++i) mean += m.data[c * hw + i];
            mean /= count;
            double var = 0.0;
            for (const auto& m : x)
                for (std::size_t i = 0; i < hw; ++i) {
                    const double d = m.data[c * hw + i] - mean;
                    var += d * d;
                }
            var /= count;
            const double inv = 1.0 / std::sqrt(var + 1e-5);
            n.inv_std[c] = inv;
            const double gamma = block.value[c];
            const double beta = block.value[channels + c];
            for (std::size_t s = 0; s < x.size(); ++s) {
                for (std::size_t i = 0; i < hw; ++i) {
                    const double xhat = (x[s].data[c * hw + i] - mean) * inv;
                    n.saved[s].data[c * hw + i] = xhat;
                    n.out[s].data[c * hw + i] = gamma * xhat + beta;
                }
            }
        }
        return push(std::move(n));
    }

    int node_relu(int in) {
        TapeNode n;
        n.op = Op::relu;
        n.a = in;
        for (const auto& x : tape_[in].out) {
            FeatureMap y = x;
            for (std::size_t i = 0; i < y.size(); ++i) y.data[i] = std::max(0.0, y.data[i]);
            n.out.push_back(std::move(y));
        }
        return push(std::move(n));
    }

    int node_pool2(int in) {
        TapeNode n;
        n.op = Op::pool2;
        n.a = in;
        for (const auto& x : tape_[in].out) {
            FeatureMap y(x.channels, x.height / 2, x.width / 2);
            for (std::size_t c = 0; c < x.channels; ++c)
                for (std::size_t oy = 0; oy < y.height; ++oy)
                    for (std::size_t ox = 0; ox < y.width; ++ox)
                        y.at(c, oy, ox) = 0.25 * (x.at(c, 2 * oy, 2 * ox) + x.at(c, 2 * oy, 2 * ox + 1) +
                                                  x.at(c, 2 * oy + 1, 2 * ox) +
                                                  x.at(c, 2 * oy + 1, 2 * ox + 1));
            n.out.push_back(std::move(y));
        }
        return push(std::move(n));
    }

    int node_up2(int in) {
        TapeNode n;
        n.op = Op::up2;
        n.a = in;
        for (const auto& x : tape_[in].out) {
            FeatureMap y(x.channels, x.height * 2, x.width * 2);
            for (std::size_t c = 0; c < x.channels; ++c)
                for (std::size_t oy = 0; oy < y.height; ++oy)
                    for (std::size_t ox = 0; ox < y.width; ++ox)
                        y.at(c, oy, ox) = x.at(c, oy / 2, ox / 2);
            n.out.push_back(std::move(y));
        }
        return push(std::move(n));
    }

    int node_add(int a, int b) {
        TapeNode n;
        n.op = Op::add;
        n.a = a;
        n.b = b;
        for (std::size_t s = 0; s < tape_[a].out.size(); ++s) {
            FeatureMap y = tape_[a].out[s];
            const FeatureMap& z = tape_[b].out[s];
            for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += z.data[i];
            n.out.push_back(std::move(y));
        }
        return push(std::move(n));
    }

    // ---- architecture ----

    int block(int x, std::size_t i0, std::size_t i1, std::size_t i2, bool dense_path) {
        for (std::size_t i3 = 0; i3 < arch_.b_depth; ++i3) {
            const std::size_t id = layer_id(i0, i1, i2, i3);
            x = node_conv_tensor(x, id, dense_path);
            x = node_bn(x, bns_[id], static_cast<int>(id));
            x = node_relu(x);
        }
        return x;
    }

    int hourglass(int x, std::size_t i0, std::size_t depth, bool dense_path) {
        const int skip = block(x, i0, depth, static_cast<std::size_t>(Pathway::skip), dense_path);
        int inner = node_pool2(x);
        inner = block(inner, i0, depth, static_cast<std::size_t>(Pathway::encoder), dense_path);
        if (depth + 1 < arch_.hg_depth) inner = hourglass(inner, i0, depth + 1, dense_path);
        inner = block(inner, i0, depth, static_cast<std::size_t>(Pathway::decoder), dense_path);
        return node_add(skip, node_up2(inner));
    }

    int forward(const Batch& inputs, bool dense_path) {
        int x = node_input(inputs);
        x = node_conv_param(x, stem_, -2, in_channels_, arch_.f_in, arch_.kernel_h, arch_.kernel_w);
        x = node_bn(x, stem_bn_, -3);
        x = node_relu(x);
        for (std::size_t i0 = 0; i0 < arch_.n_hg; ++i0) x = node_add(x, hourglass(x, i0, 0, dense_path));
        x = node_conv_param(x, head_, -4, arch_.f_out, out_channels_, 1, 1);
        x = node_bias(x, head_bias_, -5);
        return x;
    }

    DenseTensor dense_kernel(std::size_t layer) const {
        const std::size_t per = arch_.hg_depth * arch_.hg_subnet * arch_.b_depth;
        const std::size_t i0 = layer / per;
        std::size_t rest = layer % per;
        const std::size_t i1 = rest / (arch_.hg_subnet * arch_.b_depth);
        rest %= arch_.hg_subnet * arch_.b_depth;
        const std::size_t i2 = rest / arch_.b_depth;
        const std::size_t i3 = rest % arch_.b_depth;
        TNetWeights w;
        w.arch = arch_;
        w.form = dense_full_;
        return slice_kernel(w, i0, i1, i2, i3);
    }

    static double mse(const Batch& pred, const Batch& target) {
        double acc = 0.0;
        std::size_t count = 0;
        for (std::size_t s = 0; s < pred.size(); ++s) {
            for (std::size_t i = 0; i < pred[s].size(); ++i) {
                const double d = pred[s].data[i] - target[s].data[i];
                acc += d * d;
            }
            count += pred[s].size();
        }
        return acc / static_cast<double>(count);
    }

    // ---- backward ----

    void backward(int pred, const Batch& targets) {
        dw_ = DenseTensor(weight_tensor_shape(arch_));
        for (auto& b : bns_) std::fill(b.grad.begin(), b.grad.end(), 0.0);
        std::fill(stem_.grad.begin(), stem_.grad.end(), 0.0);
        std::fill(stem_bn_.grad.begin(), stem_bn_.grad.end(), 0.0);
        std::fill(head_.grad.begin(), head_.grad.end(), 0.0);
        std::fill(head_bias_.grad.begin(), head_bias_.grad.end(), 0.0);

        std::vector<Batch> grad(tape_.size());
        auto ensure = [&](int id) {
            if (grad[id].empty()) {
                for (const auto& m : tape_[id].out) grad[id].push_back(FeatureMap(m.channels, m.height, m.width));
            }
        };
        auto accumulate = [&](int id, std::size_t s, const FeatureMap& g) {
            ensure(id);
            for (std::size_t i = 0; i < g.size(); ++i) grad[id][s].data[i] += g.data[i];
        };

        // Seed with dL/dpred for the mean-squared error.
        ensure(pred);
        std::size_t count = 0;
        for (const auto& m : tape_[pred].out) count += m.size();
        for (std::size_t s = 0; s < targets.size(); ++s) {
            for (std::size_t i = 0; i < targets[s].size(); ++i) {
                grad[pred][s].data[i] =
                    2.0 * (tape_[pred].out[s].data[i] - targets[s].data[i]) / static_cast<double>(count);
            }
        }

        const std::size_t pad_h = (arch_.kernel_h - 1) / 2;
        for (int id = pred; id >= 0; --id) {
            if (grad[id].empty()) continue;
            TapeNode& n = tape_[id];
            const Batch& gy = grad[id];
            switch (n.op) {
                case Op::input:
                    break;
                case Op::conv_tensor: {
                    const std::size_t layer = static_cast<std::size_t>(n.layer);
                    const DenseTensor& k = layer_kernel_[layer];
                    DenseTensor dk(Shape{k.shape[0], k.shape[1], k.shape[2], k.shape[3]});
                    for (std::size_t s = 0; s < gy.size(); ++s) {
                        const FeatureMap& x = tape_[n.a].out[s];
                        conv2d_grad_kernel(x, gy[s], arch_.kernel_h, arch_.kernel_w, pad_h, dk);
                        accumulate(n.a, s, conv2d_grad_input(k, gy[s], x.height, x.width, pad_h));
                    }
                    scatter_kernel_grad(layer, dk);
                    break;
                }
                case Op::conv_param: {
                    ParamBlock& blk = param_block(n.layer);
                    const FeatureMap& x0 = tape_[n.a].out[0];
                    const std::size_t co = gy[0].channels;
                    const std::size_t kh = n.layer == -4 ? 1 : arch_.kernel_h;
                    const std::size_t kw = n.layer == -4 ? 1 : arch_.kernel_w;
                    const std::size_t pad = (kh - 1) / 2;
                    DenseTensor k(Shape{x0.channels, co, kh, kw}, blk.value);
                    DenseTensor dk(k.shape);
                    for (std::size_t s = 0; s < gy.size(); ++s) {
                        const FeatureMap& x = tape_[n.a].out[s];
                        conv2d_grad_kernel(x, gy[s], kh, kw, pad, dk);
                        accumulate(n.a, s, conv2d_grad_input(k, gy[s], x.height, x.width, pad));
                    }
                    for (std::size_t i = 0; i < dk.size(); ++i) blk.grad[i] += dk.data[i];
                    break;
                }
                case Op::bias: {
                    ParamBlock& blk = param_block(n.layer);
                    const std::size_t hw = gy[0].height * gy[0].width;
                    for (std::size_t s = 0; s < gy.size(); ++s) {
                        for (std::size_t c = 0; c < gy[s].channels; ++c) {
                            double acc = 0.0;
                            for (std::size_t i = 0; i < hw; ++i) acc += gy[s].data[c * hw + i];
                            blk.grad[c] += acc;
                        }
                        accumulate(n.a, s, gy[s]);
                    }
                    break;
                }
                case Op::bn: {
                    ParamBlock& blk = param_block(n.layer);
                    const std::size_t channels = gy[0].channels;
                    const std::size_t hw = gy[0].height * gy[0].width;
                    const double cnt = static_cast<double>(gy.size() * hw);
                    for (std::size_t c = 0; c < channels; ++c) {
                        double sum_dy = 0.0;
                        double sum_dy_xhat = 0.0;
                        for (std::size_t s = 0; s < gy.size(); ++s) {
                            for (std::size_t i = 0; i < hw; ++i) {
                                const double dy = gy[s].data[c * hw + i];
                                sum_dy += dy;
                                sum_dy_xhat += dy * n.saved[s].data[c * hw + i];
                            }
                        }
                        blk.grad[c] += sum_dy_xhat;             // dgamma
                        blk.grad[channels + c] += sum_dy;       // dbeta
                        const double gamma = blk.value[c];
                        const double scale = gamma * n.inv_std[c];
                        const double mean_dy = sum_dy / cnt;
                        const double mean_dy_xhat = sum_dy_xhat / cnt;
                        for (std::size_t s = 0; s < gy.size(); ++s) {
                            ensure(n.a);
                            for (std::size_t i = 0; i < hw; ++i) {
                                const double dy = gy[s].data[c * hw + i];
                                const double xhat = n.saved[s].data[c * hw + i];
                                grad[n.a][s].data[c * hw + i] +=
                                    scale * (dy - mean_dy - xhat * mean_dy_xhat);
                            }
                        }
                    }
                    break;
                }
                case Op::relu: {
                    for (std::size_t s = 0; s < gy.size(); ++s) {
                        FeatureMap g(gy[s].channels, gy[s].height, gy[s].width);
                        for (std::size_t i = 0; i < g.size(); ++i) {
                            g.data[i] = tape_[id].out[s].data[i] > 0.0 ? gy[s].data[i] : 0.0;
                        }
                        accumulate(n.a, s, g);
                    }
                    break;
                }
                case Op::pool2: {
                    for (std::size_t s = 0; s < gy.size(); ++s) {
                        const FeatureMap& in = tape_[n.a].out[s];
                        FeatureMap g(in.channels, in.height, in.width);
                        for (std::size_t c = 0; c < in.channels; ++c)
                            for (std::size_t oy = 0; oy < gy[s].height; ++oy)
                                for (std::size_t ox = 0; ox < gy[s].width; ++ox) {
                                    const double v = 0.25 * gy[s].at(c, oy, ox);
                                    g.at(c, 2 * oy, 2 * ox) = v;
                                    g.at(c, 2 * oy, 2 * ox + 1) = v;
                                    g.at(c, 2 * oy + 1, 2 * ox) = v;
                                    g.at(c, 2 * oy + 1, 2 * ox + 1) = v;
                                }
                        accumulate(n.a, s, g);
                    }
                    break;
                }
                case Op::up2: {
                    for (std::size_t s = 0; s < gy.size(); ++s) {
                        const FeatureMap& in = tape_[n.a].out[s];
                        FeatureMap g(in.channels, in.height, in.width);
                        for (std::size_t c = 0; c < in.channels; ++c)
                            for (std::size_t oy = 0; oy < gy[s].height; ++oy)
                                for (std::size_t ox = 0; ox < gy[s].width; ++ox)
                                    g.at(c, oy / 2, ox / 2) += gy[s].at(c, oy, ox);
                        accumulate(n.a, s, g);
                    }
                    break;
                }
                case Op::add: {
                    for (std::size_t s = 0; s < gy.size(); ++s) {
                        accumulate(n.a, s, gy[s]);
                        accumulate(n.b, s, gy[s]);
                    }
                    break;
                }
            }
            grad[id].clear();
        }
    }

    ParamBlock& param_block(int id) {
        switch (id) {
            case -2: return stem_;
            case -3: return stem_bn_;
            case -4: return head_;
            case -5: return head_bias_;
            default: return bns_[static_cast<std::size_t>(id)];
        }
    }

    void scatter_kernel_grad(std::size_t layer, const DenseTensor& dk) {
        const std::size_t block = dk.size();
        const std::size_t offset = layer * block;  // layer ids follow the mode-major order
        for (std::size_t i = 0; i < block; ++i) dw_.data[offset + i] += dk.data[i];
    }

    void update() {
        TuckerGradients g = project_gradients(factors_, dw_);
        rmsprop_step(opt_core_, std::span<double>(factors_.core.data.data(), factors_.core.size()),
                     std::span<const double>(g.d_core.data.data(), g.d_core.size()));
        for (std::size_t k = 0; k < factors_.factors.size(); ++k) {
            rmsprop_step(opt_factors_[k],
                         std::span<double>(factors_.factors[k].data.data(), factors_.factors[k].size()),
                         std::span<const double>(g.d_factors[k].data.data(), g.d_factors[k].size()));
        }
        for (ParamBlock* b : {&stem_, &stem_bn_, &head_, &head_bias_}) {
            rmsprop_step(b->opt, b->value, b->grad);
        }
        for (auto& b : bns_) rmsprop_step(b.opt, b.value, b.grad);
    }

    ArchConfig arch_;
    TrainOptions opt_;
    std::size_t in_channels_ = 0, out_channels_ = 0, height_ = 0, width_ = 0;
    std::size_t layer_count_ = 0;

    TuckerFactors factors_;
    RmsPropState opt_core_;
    std::vector<RmsPropState> opt_factors_;

    ParamBlock stem_, stem_bn_, head_, head_bias_;
    std::vector<ParamBlock> bns_;

    std::vector<FactorizedConv> layer_conv_;
    std::vector<DenseTensor> layer_kernel_;
    DenseTensor dense_full_;
    DenseTensor dw_;
    std::vector<TapeNode> tape_;
};

}  // namespace detail

/// Trains the toy stacked-hourglass network. Returns the per-step loss
/// (recorded before each update) and the final Tucker factors. Divergence
/// aborts with the failing step index.
inline TrainResult train_toy(const ArchConfig& arch, const Shape& ranks, const ToyTask& task,
                             std::size_t steps, const TrainOptions& opt = {}) {
    detail::ToyNet net(arch, ranks, task, opt);
    TrainResult out;
    out.loss_history.reserve(steps);
    for (std::size_t t = 0; t < steps; ++t) {
        if (opt.record_dense_loss) {
            out.dense_loss_history.push_back(net.dense_loss(task.inputs, task.targets));
        }
        const double loss = net.step(task.inputs, task.targets);
        if (!std::isfinite(loss)) throw convergence_error("training diverged", t);
        out.loss_history.push_back(loss);
    }
    out.factors = net.factors();
    return out;
}

}  // namespace tnet
