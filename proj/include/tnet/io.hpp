#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "tnet/decomp.hpp"
#include "tnet/errors.hpp"
#include "tnet/tensor.hpp"

namespace tnet {

// ---------------------------------------------------------------------------
// .tnt tensor files: magic "TNT1", u8 order, order x u64 little-endian
// extents, then row-major float64 payload, little-endian. Round trips are
// bit-exact, including NaN payloads and signed zeros.
// ---------------------------------------------------------------------------

namespace detail {

inline void pack_u64le(unsigned char* out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out[i] = static_cast<unsigned char>(v >> (8 * i));
}

inline std::uint64_t unpack_u64le(const unsigned char* in) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline void write_tensor(const std::filesystem::path& path, const DenseTensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open for writing: " + path.string());

    unsigned char header[5] = {'T', 'N', 'T', '1', static_cast<unsigned char>(t.order())};
    if (t.order() > 255) throw io_error("tensor order exceeds format limit");
    os.write(reinterpret_cast<const char*>(header), 5);
    unsigned char word[8];
    for (std::size_t e : t.shape) {
        detail::pack_u64le(word, e);
        os.write(reinterpret_cast<const char*>(word), 8);
    }

    constexpr std::size_t chunk = 1 << 16;
    std::vector<unsigned char> buf(chunk * 8);
    std::size_t i = 0;
    while (i < t.size()) {
        const std::size_t n = std::min(chunk, t.size() - i);
        for (std::size_t k = 0; k < n; ++k) {
            std::uint64_t bits;
            std::memcpy(&bits, t.data.data() + i + k, 8);
            detail::pack_u64le(buf.data() + k * 8, bits);
        }
        os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(n * 8));
        i += n;
    }
    if (!os) throw io_error("write failed: " + path.string());
}

inline DenseTensor read_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open: " + path.string());

    unsigned char header[5];
    is.read(reinterpret_cast<char*>(header), 5);
    if (!is || std::memcmp(header, "TNT1", 4) != 0) {
        throw io_error("not a TNT1 tensor file: " + path.string());
    }
    const std::size_t order = header[4];
    if (order == 0) throw io_error("tensor order 0 in " + path.string());

    Shape shape(order);
    unsigned char word[8];
    std::size_t count = 1;
    for (std::size_t k = 0; k < order; ++k) {
        is.read(reinterpret_cast<char*>(word), 8);
        if (!is) throw io_error("truncated header in " + path.string());
        const std::uint64_t e = detail::unpack_u64le(word);
        if (e == 0) throw io_error("zero extent in " + path.string());
        if (e > std::numeric_limits<std::size_t>::max() / count) {
            throw io_error("extent product overflows in " + path.string());
        }
        shape[k] = static_cast<std::size_t>(e);
        count *= shape[k];
    }

    DenseTensor t(std::move(shape));
    constexpr std::size_t chunk = 1 << 16;
    std::vector<unsigned char> buf(chunk * 8);
    std::size_t i = 0;
    while (i < count) {
        const std::size_t n = std::min(chunk, count - i);
        is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 8));
        if (!is) throw io_error("truncated payload in " + path.string());
        for (std::size_t k = 0; k < n; ++k) {
            const std::uint64_t bits = detail::unpack_u64le(buf.data() + k * 8);
            std::memcpy(t.data.data() + i + k, &bits, 8);
        }
        i += n;
    }
    return t;
}

inline void write_matrix(const std::filesystem::path& path, const Matrix& m) {
    DenseTensor t(Shape{m.rows, m.cols});
    std::copy(m.data.begin(), m.data.end(), t.data.begin());
    write_tensor(path, t);
}

inline Matrix read_matrix(const std::filesystem::path& path) {
    DenseTensor t = read_tensor(path);
    if (t.order() != 2) throw io_error("expected a matrix (order 2) in " + path.string());
    Matrix m(t.shape[0], t.shape[1]);
    std::copy(t.data.begin(), t.data.end(), m.data.data());
    return m;
}

// ---------------------------------------------------------------------------
// Decomposition bundles: a directory with the tensor pieces plus meta.json
// {method, shape, ranks, relative_error, iterations}.
// ---------------------------------------------------------------------------

struct DecompBundle {
    std::string method;  // "tucker" or "mps"
    Shape shape;
    Shape ranks;  // Tucker: core extents; MPS: full chain (1, ..., 1)
    double relative_error = 0.0;
    std::size_t iterations = 0;
    TuckerFactors tucker;  // filled when method == "tucker"
    MPSCores mps;          // filled when method == "mps"
};

namespace detail {

inline void write_bundle_meta(const std::filesystem::path& dir, const std::string& method,
                              const Shape& shape, const Shape& ranks, double rel_err,
                              std::size_t iterations) {
    nlohmann::json meta;
    meta["method"] = method;
    meta["shape"] = shape;
    meta["ranks"] = ranks;
    meta["relative_error"] = rel_err;
    meta["iterations"] = iterations;
    std::ofstream os(dir / "meta.json");
    if (!os) throw io_error("cannot write " + (dir / "meta.json").string());
    os << meta.dump(2) << "\n";
}

}  // namespace detail

inline void save_bundle(const std::filesystem::path& dir, const TuckerFactors& f, double rel_err,
                        std::size_t iterations) {
    f.validate();
    std::filesystem::create_directories(dir);
    write_tensor(dir / "core.tnt", f.core);
    for (std::size_t k = 0; k < f.factors.size(); ++k) {
        write_matrix(dir / ("factors" + std::to_string(k) + ".tnt"), f.factors[k]);
    }
    detail::write_bundle_meta(dir, "tucker", f.shape(), f.ranks(), rel_err, iterations);
}

inline void save_bundle(const std::filesystem::path& dir, const MPSCores& c, double rel_err,
                        std::size_t iterations) {
    c.validate();
    std::filesystem::create_directories(dir);
    for (std::size_t k = 0; k < c.cores.size(); ++k) {
        write_tensor(dir / ("core" + std::to_string(k) + ".tnt"), c.cores[k]);
    }
    detail::write_bundle_meta(dir, "mps", c.shape(), c.rank_chain(), rel_err, iterations);
}

inline DecompBundle load_bundle(const std::filesystem::path& dir) {
    std::ifstream is(dir / "meta.json");
    if (!is) throw io_error("cannot open " + (dir / "meta.json").string());
    nlohmann::json meta;
    try {
        is >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw io_error("bad meta.json in " + dir.string() + ": " + e.what());
    }

    DecompBundle b;
    try {
        b.method = meta.at("method").get<std::string>();
        b.shape = meta.at("shape").get<Shape>();
        b.ranks = meta.at("ranks").get<Shape>();
        b.relative_error = meta.at("relative_error").get<double>();
        b.iterations = meta.at("iterations").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw io_error("bad meta.json in " + dir.string() + ": " + e.what());
    }

    if (b.method == "tucker") {
        b.tucker.core = read_tensor(dir / "core.tnt");
        for (std::size_t k = 0; k < b.shape.size(); ++k) {
            b.tucker.factors.push_back(read_matrix(dir / ("factors" + std::to_string(k) + ".tnt")));
        }
        b.tucker.validate();
    } else if (b.method == "mps") {
        for (std::size_t k = 0; k < b.shape.size(); ++k) {
            b.mps.cores.push_back(read_tensor(dir / ("core" + std::to_string(k) + ".tnt")));
        }
        b.mps.validate();
    } else {
        throw io_error("unknown bundle method '" + b.method + "' in " + dir.string());
    }
    return b;
}

}  // namespace tnet
