#pragma once

#include "qattn/netcheck.hpp"
#include "qattn/qnet.hpp"

namespace qattn::testutil {

inline Tensor<double> identity_matrix(int64_t n) {
    Tensor<double> m = Tensor<double>::zeros({n, n});
    for (int64_t i = 0; i < n; ++i) m.data()[i * n + i] = 1.0;
    return m;
}

using nets::clear_relu_kinks;

}  // namespace qattn::testutil
