#pragma once

#include <algorithm>
#include <functional>

#include "qattn/autograd.hpp"

namespace qattn {

/// Compare reverse-mode gradients against central finite differences
/// (f(w+h) - f(w-h)) / 2h, coordinate by coordinate. Intended to run with
/// T = double; at 32-bit the difference quotient itself is too noisy to
/// separate rounding from real defects.
///
/// Returns the maximum relative error over all checked coordinates, with
/// denominator max(|analytic|, |numeric|, 1e-8). When a parameter has more
/// entries than max_coords_per_param, a random subset of coordinates is
/// probed (the analytic gradient is still the full reverse-mode sweep).
/// f builds the scalar as a Var; it must be deterministic between calls.
template <typename T>
inline double finite_difference_check(const std::function<Var<T>()>& f, const ParamRefs<T>& params,
                                      double h = 1e-4,
                                      int64_t max_coords_per_param = -1,
                                      RngState* coord_rng = nullptr) {
    zero_grads(params);
    {
        Var<T> out = f();
        backward(out);
    }

    auto eval = [&]() -> double {
        NoGradGuard ng;
        return static_cast<double>(f().value()[0]);
    };

    double max_rel = 0.0;
    for (auto* p : params) {
        const int64_t n = p->numel();
        std::vector<int64_t> coords;
        if (max_coords_per_param < 0 || n <= max_coords_per_param) {
            coords.resize(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
        } else {
            check(coord_rng != nullptr,
                  "finite_difference_check: sampled coordinates need an rng");
            for (int64_t i = 0; i < max_coords_per_param; ++i)
                coords.push_back(coord_rng->uniform_int(n));
        }
        for (int64_t idx : coords) {
            T* w = p->value.data();
            const T orig = w[idx];
            w[idx] = orig + static_cast<T>(h);
            const double f_plus = eval();
            w[idx] = orig - static_cast<T>(h);
            const double f_minus = eval();
            w[idx] = orig;

            const double numeric = (f_plus - f_minus) / (2.0 * h);
            const double analytic = static_cast<double>(p->grad[idx]);
            const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            max_rel = std::max(max_rel, std::abs(analytic - numeric) / denom);
        }
    }
    return max_rel;
}

}  // namespace qattn
