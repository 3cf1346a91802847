#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tnet/errors.hpp"

namespace tnet {

// ---------------------------------------------------------------------------
// Allocation accounting.
//
// Every Buffer (the storage behind DenseTensor and Matrix) reports its byte
// count to a thread-local tally. Tests use the peak to assert that compressed
// weight slicing never materializes the full weight tensor.
// ---------------------------------------------------------------------------

struct AllocStats {
    std::size_t current = 0;
    std::size_t peak = 0;
};

inline AllocStats& alloc_stats() {
    thread_local AllocStats stats;
    return stats;
}

/// Restart peak tracking from the currently live byte count.
inline void reset_alloc_peak() { alloc_stats().peak = alloc_stats().current; }

namespace detail {

inline void track_bytes(std::ptrdiff_t delta) {
    auto& s = alloc_stats();
    if (delta >= 0) {
        s.current += static_cast<std::size_t>(delta);
        s.peak = std::max(s.peak, s.current);
    } else {
        s.current -= static_cast<std::size_t>(-delta);
    }
}

}  // namespace detail

/// Contiguous double storage that keeps the thread-local byte tally exact
/// across copies, moves and destruction.
class Buffer {
public:
    Buffer() = default;

    explicit Buffer(std::size_t n, double fill = 0.0) : v_(n, fill) { retrack(); }

    Buffer(const Buffer& other) : v_(other.v_) { retrack(); }

    Buffer(Buffer&& other) noexcept : v_(std::move(other.v_)), tracked_(other.tracked_) {
        other.tracked_ = 0;
    }

    Buffer& operator=(const Buffer& other) {
        if (this != &other) {
            v_ = other.v_;
            retrack();
        }
        return *this;
    }

    Buffer& operator=(Buffer&& other) noexcept {
        if (this != &other) {
            detail::track_bytes(-static_cast<std::ptrdiff_t>(tracked_));
            v_ = std::move(other.v_);
            tracked_ = other.tracked_;
            other.tracked_ = 0;
        }
        return *this;
    }

    ~Buffer() { detail::track_bytes(-static_cast<std::ptrdiff_t>(tracked_)); }

    void assign(std::vector<double> values) {
        v_ = std::move(values);
        retrack();
    }

    std::size_t size() const { return v_.size(); }
    bool empty() const { return v_.empty(); }
    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }
    double& operator[](std::size_t i) { return v_[i]; }
    double operator[](std::size_t i) const { return v_[i]; }
    auto begin() { return v_.begin(); }
    auto end() { return v_.end(); }
    auto begin() const { return v_.begin(); }
    auto end() const { return v_.end(); }

private:
    void retrack() {
        detail::track_bytes(-static_cast<std::ptrdiff_t>(tracked_));
        tracked_ = v_.size() * sizeof(double);
        detail::track_bytes(static_cast<std::ptrdiff_t>(tracked_));
    }

    std::vector<double> v_;
    std::size_t tracked_ = 0;
};

// ---------------------------------------------------------------------------
// Shapes
// ---------------------------------------------------------------------------

using Shape = std::vector<std::size_t>;

inline std::size_t num_elements(std::span<const std::size_t> shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

inline std::string shape_to_string(std::span<const std::size_t> shape) {
    std::string s = "(";
    for (std::size_t k = 0; k < shape.size(); ++k) {
        if (k) s += ",";
        s += std::to_string(shape[k]);
    }
    return s + ")";
}

// ---------------------------------------------------------------------------
// DenseTensor: N-order dense real tensor, row-major (last index fastest).
// ---------------------------------------------------------------------------

class DenseTensor {
public:
    Shape shape;
    Buffer data;

    DenseTensor() = default;

    explicit DenseTensor(Shape s, double fill = 0.0) : shape(std::move(s)) {
        validate_shape(shape);
        data = Buffer(num_elements(shape), fill);
    }

    DenseTensor(Shape s, std::vector<double> values) : shape(std::move(s)) {
        validate_shape(shape);
        if (values.size() != num_elements(shape)) {
            throw shape_error("tensor data length " + std::to_string(values.size()) +
                              " does not match shape " + shape_to_string(shape));
        }
        data.assign(std::move(values));
    }

    std::size_t order() const { return shape.size(); }
    std::size_t size() const { return data.size(); }
    std::size_t extent(std::size_t mode) const { return shape[mode]; }

    /// Row-major linear index of a multi-index.
    std::size_t linear_index(std::span<const std::size_t> idx) const {
        std::size_t lin = 0;
        for (std::size_t k = 0; k < shape.size(); ++k) lin = lin * shape[k] + idx[k];
        return lin;
    }

    double& at(std::span<const std::size_t> idx) { return data[linear_index(idx)]; }
    double at(std::span<const std::size_t> idx) const { return data[linear_index(idx)]; }

    template <typename... Ix>
    double& operator()(Ix... ix) {
        const std::size_t idx[] = {static_cast<std::size_t>(ix)...};
        return data[linear_index(idx)];
    }

    template <typename... Ix>
    double operator()(Ix... ix) const {
        const std::size_t idx[] = {static_cast<std::size_t>(ix)...};
        return data[linear_index(idx)];
    }

private:
    static void validate_shape(const Shape& s) {
        if (s.empty()) throw shape_error("tensor order must be >= 1");
        for (std::size_t e : s) {
            if (e == 0) throw shape_error("tensor extents must be >= 1, got " + shape_to_string(s));
        }
    }
};

// ---------------------------------------------------------------------------
// Matrix: row-major 2D array (kept separate from DenseTensor to make the
// unfolding/factor contracts explicit in signatures).
// ---------------------------------------------------------------------------

class Matrix {
public:
    std::size_t rows = 0;
    std::size_t cols = 0;
    Buffer data;

    Matrix() = default;

    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c) {
        if (r == 0 || c == 0) throw shape_error("matrix dimensions must be >= 1");
        data = Buffer(r * c, fill);
    }

    Matrix(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c) {
        if (r == 0 || c == 0) throw shape_error("matrix dimensions must be >= 1");
        if (values.size() != r * c) {
            throw shape_error("matrix data length does not match " + std::to_string(r) + "x" +
                              std::to_string(c));
        }
        data.assign(std::move(values));
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t size() const { return data.size(); }

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

// ---------------------------------------------------------------------------
// Multilinear primitives
// ---------------------------------------------------------------------------

namespace detail {

/// Extents split around mode n: outer = prod of modes before n,
/// inner = prod of modes after n.
struct ModeSplit {
    std::size_t outer;
    std::size_t mode;
    std::size_t inner;
};

inline ModeSplit mode_split(const Shape& shape, std::size_t n) {
    ModeSplit s{1, shape[n], 1};
    for (std::size_t k = 0; k < n; ++k) s.outer *= shape[k];
    for (std::size_t k = n + 1; k < shape.size(); ++k) s.inner *= shape[k];
    return s;
}

}  // namespace detail

/// Mode-n unfolding: rows indexed by mode n, columns by the remaining modes
/// in their original order, row-major. Column of element (i_0,...,i_N) is
/// j = sum_{k != n} i_k * prod_{m > k, m != n} I_m.
inline Matrix unfold(const DenseTensor& t, std::size_t n) {
    if (n >= t.order()) {
        throw mode_error("unfold: mode " + std::to_string(n) + " out of range for order " +
                         std::to_string(t.order()));
    }
    const auto [outer, mode, inner] = detail::mode_split(t.shape, n);
    Matrix m(mode, outer * inner);
    const double* src = t.data.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t r = 0; r < mode; ++r) {
            const double* row = src + (o * mode + r) * inner;
            double* dst = m.data.data() + r * m.cols + o * inner;
            std::copy(row, row + inner, dst);
        }
    }
    return m;
}

/// Inverse of unfold: exact bit-for-bit round trip with unfold.
inline DenseTensor fold(const Matrix& m, std::size_t n, Shape target_shape) {
    if (n >= target_shape.size()) {
        throw mode_error("fold: mode " + std::to_string(n) + " out of range for order " +
                         std::to_string(target_shape.size()));
    }
    const auto [outer, mode, inner] = detail::mode_split(target_shape, n);
    if (m.rows != mode || m.cols != outer * inner) {
        throw shape_error("fold: matrix " + std::to_string(m.rows) + "x" + std::to_string(m.cols) +
                          " inconsistent with shape " + shape_to_string(target_shape) + " at mode " +
                          std::to_string(n));
    }
    DenseTensor t(std::move(target_shape));
    double* dst = t.data.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t r = 0; r < mode; ++r) {
            const double* row = m.data.data() + r * m.cols + o * inner;
            std::copy(row, row + inner, dst + (o * mode + r) * inner);
        }
    }
    return t;
}

/// Mode-n product t x_n m: contracts mode n of t (extent I_n) with the
/// columns of m, replacing the extent with m.rows. Satisfies
/// unfold(result, n) = m * unfold(t, n).
inline DenseTensor mode_n_product(const DenseTensor& t, const Matrix& m, std::size_t n) {
    if (n >= t.order()) {
        throw mode_error("mode_n_product: mode " + std::to_string(n) + " out of range");
    }
    if (m.cols != t.shape[n]) {
        throw shape_error("mode_n_product: matrix has " + std::to_string(m.cols) +
                          " cols, mode extent is " + std::to_string(t.shape[n]));
    }
    const auto [outer, mode, inner] = detail::mode_split(t.shape, n);
    Shape out_shape = t.shape;
    out_shape[n] = m.rows;
    DenseTensor out(std::move(out_shape));
    const double* src = t.data.data();
    double* dst = out.data.data();
    for (std::size_t o = 0; o < outer; ++o) {
        const double* t_block = src + o * mode * inner;
        double* o_block = dst + o * m.rows * inner;
        for (std::size_t r = 0; r < m.rows; ++r) {
            double* out_row = o_block + r * inner;
            for (std::size_t j = 0; j < mode; ++j) {
                const double w = m(r, j);
                if (w == 0.0) continue;
                const double* in_row = t_block + j * inner;
                for (std::size_t i = 0; i < inner; ++i) out_row[i] += w * in_row[i];
            }
        }
    }
    return out;
}

inline double frobenius_norm(const DenseTensor& t) {
    double s = 0.0;
    for (double v : t.data) s += v * v;
    return std::sqrt(s);
}

inline double frobenius_norm(const Matrix& m) {
    double s = 0.0;
    for (double v : m.data) s += v * v;
    return std::sqrt(s);
}

inline bool all_finite(const DenseTensor& t) {
    return std::all_of(t.data.begin(), t.data.end(), [](double v) { return std::isfinite(v); });
}

inline bool all_finite(const Matrix& m) {
    return std::all_of(m.data.begin(), m.data.end(), [](double v) { return std::isfinite(v); });
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) {
        throw shape_error("matmul: " + std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                          " * " + std::to_string(b.rows) + "x" + std::to_string(b.cols));
    }
    Matrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        double* out_row = out.data.data() + i * out.cols;
        const double* a_row = a.data.data() + i * a.cols;
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double v = a_row[k];
            if (v == 0.0) continue;
            const double* b_row = b.data.data() + k * b.cols;
            for (std::size_t j = 0; j < b.cols; ++j) out_row[j] += v * b_row[j];
        }
    }
    return out;
}

inline Matrix transpose(const Matrix& m) {
    Matrix out(m.cols, m.rows);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) out(j, i) = m(i, j);
    return out;
}

}  // namespace tnet
