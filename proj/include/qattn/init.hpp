#pragma once

#include <cmath>

#include "qattn/tensor.hpp"

namespace qattn {

/// Fan-in-scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T>
inline Tensor<T> fan_in_uniform(Shape shape, int64_t fan_in, RngState& rng) {
    const T limit = static_cast<T>(1.0 / std::sqrt(static_cast<double>(fan_in)));
    return Tensor<T>::uniform(std::move(shape), rng, -limit, limit);
}

/// Sequence-compression projection init. Every row of a column holds the same
/// value, so the projection starts as scaled average pooling over the
/// sequence: position-agnostic mixing that training can specialize. Columns
/// carry a small jitter around 1/seq_len so they do not stay identical under
/// training (identical columns receive identical gradients).
template <typename T>
inline Tensor<T> seq_pool_init(int64_t seq_len, int64_t k, RngState& rng) {
    Tensor<T> t({seq_len, k});
    const double base = 1.0 / static_cast<double>(seq_len);
    for (int64_t j = 0; j < k; ++j) {
        const T c = static_cast<T>(base * (1.0 + 0.1 * rng.normal()));
        for (int64_t s = 0; s < seq_len; ++s) t[s * k + j] = c;
    }
    return t;
}

}  // namespace qattn
