#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "qattn/qnet.hpp"

namespace qattn::nets {

namespace detail {

// Smallest |delta| such that every value of `z` ends up at least `margin`
// away from zero after adding delta. Central differences are only valid when
// no ReLU argument crosses zero inside the probe window, so gradient checks
// shift biases to clear that window first.
inline double kink_clearing_shift(std::vector<double> z, double margin) {
    std::sort(z.begin(), z.end());
    double best = std::numeric_limits<double>::quiet_NaN();
    auto consider = [&](double lo, double hi) {
        if (lo > hi) return;
        double p = std::clamp(0.0, lo, hi);
        if (std::isnan(best) || std::fabs(p) < std::fabs(best)) best = p;
    };
    consider(-std::numeric_limits<double>::infinity(), z.front() - margin);
    for (size_t i = 0; i + 1 < z.size(); ++i) consider(z[i] + margin, z[i + 1] - margin);
    consider(z.back() + margin, std::numeric_limits<double>::infinity());
    return -best;
}

// Shift each output channel's bias so every pre-activation of `pre` (laid out
// [1 x C x H x W] or [1 x C]) clears the margin, then report the adjustment.
template <typename T>
inline void clear_channel_kinks(Parameter<T>& bias, const Tensor<T>& pre, double margin) {
    const int64_t channels = pre.shape()[1];
    const int64_t per = pre.numel() / channels;
    for (int64_t c = 0; c < channels; ++c) {
        std::vector<double> z(static_cast<size_t>(per));
        for (int64_t i = 0; i < per; ++i)
            z[static_cast<size_t>(i)] = static_cast<double>(pre.data()[c * per + i]);
        bias.value.data()[c] += static_cast<T>(kink_clearing_shift(std::move(z), margin));
    }
}

}  // namespace detail

// Move conv (and fc, for the baseline) biases the minimal distance needed so
// that no ReLU pre-activation at `obs` lies within `margin` of zero. Finite
// differences with step h are then exact to O(h^2) as long as h (plus any
// downstream ripple) stays below the margin. Layers are fixed in order since
// each shift changes the inputs of the next layer.
template <typename T>
inline void clear_relu_kinks(ConvBackbone<T>& bb, const Tensor<T>& obs, double margin) {
    NoGradGuard guard;
    auto pre = [](const Var<T>& in, Parameter<T>& k, Parameter<T>& b, int64_t stride) {
        return conv2d(in, leaf(k), leaf(b), stride).value();
    };
    Var<T> x(obs);
    detail::clear_channel_kinks(bb.b1, pre(x, bb.k1, bb.b1, 4), margin);
    Var<T> a1 = relu(Var<T>(pre(x, bb.k1, bb.b1, 4)));
    detail::clear_channel_kinks(bb.b2, pre(a1, bb.k2, bb.b2, 2), margin);
    Var<T> a2 = relu(Var<T>(pre(a1, bb.k2, bb.b2, 2)));
    detail::clear_channel_kinks(bb.b3, pre(a2, bb.k3, bb.b3, 1), margin);
}

template <typename T>
inline void clear_relu_kinks(AttentiveQNet<T>& net, const Tensor<T>& obs, double margin) {
    clear_relu_kinks(net.backbone, obs, margin);
}

template <typename T>
inline void clear_relu_kinks(BaselineQNet<T>& net, const Tensor<T>& obs, double margin) {
    clear_relu_kinks(net.backbone, obs, margin);
    NoGradGuard guard;
    Var<T> feat = net.backbone.forward(Var<T>(obs));
    Var<T> flat = reshape(feat, {obs.shape()[0], 3136});
    Tensor<T> z = linear(flat, leaf(net.fc1_w), leaf(net.fc1_b)).value();
    detail::clear_channel_kinks(net.fc1_b, z, margin);
}

}  // namespace qattn::nets
