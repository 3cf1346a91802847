#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tnet {

/// Tensor/matrix extents do not match what an operation requires.
class shape_error : public std::invalid_argument {
public:
    explicit shape_error(const std::string& what) : std::invalid_argument(what) {}
};

/// A mode index lies outside [0, order).
class mode_error : public std::invalid_argument {
public:
    explicit mode_error(const std::string& what) : std::invalid_argument(what) {}
};

/// A requested decomposition rank violates its bounds.
class rank_error : public std::invalid_argument {
public:
    explicit rank_error(const std::string& what) : std::invalid_argument(what) {}
};

/// An iterative routine failed to converge or produced non-finite values.
/// `iterations` is the sweep/step count reached when the failure was detected.
class io_error : public std::runtime_error {
public:
    explicit io_error(const std::string& what) : std::runtime_error(what) {}
};

class convergence_error : public std::runtime_error {
public:
    convergence_error(const std::string& what, std::size_t iterations)
        : std::runtime_error(what + " (after " + std::to_string(iterations) + " iterations)"),
          iterations(iterations) {}

    std::size_t iterations;
};

}  // namespace tnet
