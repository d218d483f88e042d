#pragma once

#include <cmath>
#include <cstdint>

#include "qattn/common.hpp"

namespace qattn {

/// Deterministic random stream: PCG32 (O'Neill's pcg32, the XSH-RR variant).
///
/// A stream is fully determined by (seed, stream id); the same pair yields the
/// same sample sequence on every run of the same build. Derived samplers are
/// implemented here so their draw counts and arithmetic are pinned:
///   - uniform():     53-bit mantissa double in [0, 1), two raw draws
///   - uniform_int(): rejection sampling, exact uniformity over [0, n)
///   - normal():      Box-Muller, the spare value is cached
class RngState {
  public:
    explicit RngState(uint64_t seed, uint64_t stream = 0)
        : seed_(seed) {
        inc_ = (stream << 1u) | 1u;
        state_ = 0u;
        next_u32();
        state_ += seed;
        next_u32();
    }

    uint32_t next_u32() {
        uint64_t old = state_;
        state_ = old * 6364136223846793005ULL + inc_;
        uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
        uint32_t rot = static_cast<uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
    }

    uint64_t next_u64() {
        uint64_t hi = next_u32();
        return (hi << 32) | next_u32();
    }

    /// Uniform double in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform integer in [0, n), n >= 1. Unbiased (rejection sampling).
    int64_t uniform_int(int64_t n) {
        check(n >= 1, "uniform_int: n must be positive");
        uint64_t un = static_cast<uint64_t>(n);
        uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return static_cast<int64_t>(v % un);
    }

    /// Standard normal via Box-Muller.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0, 1], keeps log() finite
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    /// Independent stream derived from the same root seed.
    RngState split(uint64_t stream) const { return RngState(seed_, stream); }

    uint64_t seed() const { return seed_; }

  private:
    uint64_t seed_;
    uint64_t state_ = 0;
    uint64_t inc_ = 1;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace qattn
