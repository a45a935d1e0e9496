#pragma once

#include "lorablend/linalg.hpp"

#include <cstdint>
#include <random>

namespace lorablend {

// mt19937_64 is fully specified by the standard and the uniform mapping below
// uses only exact integer-to-double conversion, so streams are identical on
// every platform (std::*_distribution offers no such guarantee).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    // [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    std::uint64_t next() { return engine_(); }
    // [lo, hi] inclusive; modulo bias is irrelevant for test-sized ranges.
    std::size_t index(std::size_t lo, std::size_t hi) { return lo + static_cast<std::size_t>(engine_() % (hi - lo + 1)); }

private:
    std::mt19937_64 engine_;
};

inline Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Matrix m(rows, cols);
    for (double& x : m.values()) x = rng.uniform(lo, hi);
    return m;
}

} // namespace lorablend
