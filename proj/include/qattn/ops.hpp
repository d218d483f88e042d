#pragma once

#include <Eigen/Core>

#include <cmath>
#include <type_traits>
#include <vector>

#include "qattn/autograd.hpp"

namespace qattn {
namespace detail {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

template <typename T>
inline EMap<T> as_matrix(Tensor<T>& t, int64_t rows, int64_t cols) {
    return EMap<T>(t.data(), rows, cols);
}

template <typename T>
inline ECMap<T> as_matrix(const Tensor<T>& t, int64_t rows, int64_t cols) {
    return ECMap<T>(t.data(), rows, cols);
}

// Leading dims collapsed to rows, trailing dim as columns.
template <typename T>
inline int64_t lead_rows(const Tensor<T>& t) {
    return t.numel() / t.shape().back();
}

template <typename T>
inline Shape with_last_dim(const Tensor<T>& t, int64_t d) {
    Shape s = t.shape();
    s.back() = d;
    return s;
}

// Flat coefficient-wise views for transcendental-heavy ops.
template <typename T>
using EArr = Eigen::Array<T, Eigen::Dynamic, 1>;
template <typename T>
using EArrMap = Eigen::Map<EArr<T>>;
template <typename T>
using ECArrMap = Eigen::Map<const EArr<T>>;

template <typename T>
inline EArrMap<T> as_array(Tensor<T>& t) {
    return EArrMap<T>(t.data(), t.numel());
}

template <typename T>
inline ECArrMap<T> as_array(const Tensor<T>& t) {
    return ECArrMap<T>(t.data(), t.numel());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and structural ops
// ---------------------------------------------------------------------------

template <typename T>
inline Var<T> add(const Var<T>& a, const Var<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tensor<T> out(a.shape());
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    T* po = out.data();
    int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];

    if (!GradMode::enabled() || (!a.tracked() && !b.tracked())) return Var<T>(out);
    auto an = a.node();
    auto bn = b.node();
    return Var<T>::tracked(out, {an, bn}, [an, bn](detail::Node<T>& nd) {
        if (an) an->accumulate(nd.grad);
        if (bn) bn->accumulate(nd.grad);
    });
}

template <typename T>
inline Var<T> sub(const Var<T>& a, const Var<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tensor<T> out(a.shape());
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    T* po = out.data();
    int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];

    if (!GradMode::enabled() || (!a.tracked() && !b.tracked())) return Var<T>(out);
    auto an = a.node();
    auto bn = b.node();
    return Var<T>::tracked(out, {an, bn}, [an, bn](detail::Node<T>& nd) {
        if (an) an->accumulate(nd.grad);
        if (bn) {
            Tensor<T> g(nd.grad.shape());
            const T* src = nd.grad.data();
            T* dst = g.data();
            for (int64_t i = 0; i < g.numel(); ++i) dst[i] = -src[i];
            bn->accumulate(g);
        }
    });
}

template <typename T>
inline Var<T> mul(const Var<T>& a, const Var<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tensor<T> out(a.shape());
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    T* po = out.data();
    int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];

    if (!GradMode::enabled() || (!a.tracked() && !b.tracked())) return Var<T>(out);
    auto an = a.node();
    auto bn = b.node();
    Tensor<T> av = a.value();
    Tensor<T> bv = b.value();
    return Var<T>::tracked(out, {an, bn}, [an, bn, av, bv](detail::Node<T>& nd) {
        int64_t n = nd.grad.numel();
        if (an) {
            Tensor<T> g(nd.grad.shape());
            for (int64_t i = 0; i < n; ++i) g[i] = nd.grad[i] * bv[i];
            an->accumulate(g);
        }
        if (bn) {
            Tensor<T> g(nd.grad.shape());
            for (int64_t i = 0; i < n; ++i) g[i] = nd.grad[i] * av[i];
            bn->accumulate(g);
        }
    });
}

template <typename T>
inline Var<T> scale(const Var<T>& x, T c) {
    Tensor<T> out(x.shape());
    const T* px = x.value().data();
    T* po = out.data();
    int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = px[i] * c;

    if (!GradMode::enabled() || !x.tracked()) return Var<T>(out);
    auto xn = x.node();
    return Var<T>::tracked(out, {xn}, [xn, c](detail::Node<T>& nd) {
        Tensor<T> g(nd.grad.shape());
        for (int64_t i = 0; i < g.numel(); ++i) g[i] = nd.grad[i] * c;
        xn->accumulate(g);
    });
}

template <typename T>
inline Var<T> reshape(const Var<T>& x, Shape shape) {
    Tensor<T> out = x.value().reshaped(shape);
    if (!GradMode::enabled() || !x.tracked()) return Var<T>(out);
    auto xn = x.node();
    Shape orig = x.shape();
    return Var<T>::tracked(out, {xn}, [xn, orig](detail::Node<T>& nd) {
        xn->accumulate(nd.grad.reshaped(orig));
    });
}

template <typename T>
inline Var<T> sum(const Var<T>& x) {
    T acc = 0;
    const T* px = x.value().data();
    for (int64_t i = 0; i < x.value().numel(); ++i) acc += px[i];
    Tensor<T> out({1}, {acc});
    if (!GradMode::enabled() || !x.tracked()) return Var<T>(out);
    auto xn = x.node();
    Shape xs = x.shape();
    return Var<T>::tracked(out, {xn}, [xn, xs](detail::Node<T>& nd) {
        xn->accumulate(Tensor<T>::full(xs, nd.grad[0]));
    });
}

template <typename T>
inline Var<T> mean(const Var<T>& x) {
    int64_t n = x.value().numel();
    return scale(sum(x), T(1) / static_cast<T>(n));
}

// ---------------------------------------------------------------------------
// matmul / linear
// ---------------------------------------------------------------------------

/// Plain 2-d matrix product a[m x k] * b[k x n].
template <typename T>
inline Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor<T> out({m, n});
    detail::as_matrix(out, m, n).noalias() =
        detail::as_matrix(a.value(), m, k) * detail::as_matrix(b.value(), k, n);

    if (!GradMode::enabled() || (!a.tracked() && !b.tracked())) return Var<T>(out);
    auto an = a.node();
    auto bn = b.node();
    Tensor<T> av = a.value();
    Tensor<T> bv = b.value();
    return Var<T>::tracked(out, {an, bn}, [an, bn, av, bv, m, k, n](detail::Node<T>& nd) {
        auto g = detail::as_matrix(nd.grad, m, n);
        if (an) {
            Tensor<T> ga({m, k});
            detail::as_matrix(ga, m, k).noalias() = g * detail::as_matrix(bv, k, n).transpose();
            an->accumulate(ga);
        }
        if (bn) {
            Tensor<T> gb({k, n});
            detail::as_matrix(gb, k, n).noalias() = detail::as_matrix(av, m, k).transpose() * g;
            bn->accumulate(gb);
        }
    });
}

/// Affine map over the trailing dimension: x[... x d_in] -> [... x d_out],
/// weight[d_out x d_in], bias[d_out].
template <typename T>
inline Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    int64_t d_in = x.shape().back();
    if (weight.shape().size() != 2 || weight.shape()[1] != d_in)
        throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
    int64_t d_out = weight.shape()[0];
    if (bias.shape().size() != 1 || bias.shape()[0] != d_out)
        throw ShapeError("linear: bias " + shape_str(bias.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));

    int64_t rows = detail::lead_rows(x.value());
    Tensor<T> out(detail::with_last_dim(x.value(), d_out));
    auto xm = detail::as_matrix(x.value(), rows, d_in);
    auto om = detail::as_matrix(out, rows, d_out);
    om.noalias() = xm * detail::as_matrix(weight.value(), d_out, d_in).transpose();
    om.rowwise() += Eigen::Map<const Eigen::RowVectorX<T>>(bias.value().data(), d_out);

    if (!GradMode::enabled() || (!x.tracked() && !weight.tracked() && !bias.tracked()))
        return Var<T>(out);
    auto xn = x.node();
    auto wn = weight.node();
    auto bn = bias.node();
    Tensor<T> xv = x.value();
    Tensor<T> wv = weight.value();
    return Var<T>::tracked(
        out, {xn, wn, bn}, [xn, wn, bn, xv, wv, rows, d_in, d_out](detail::Node<T>& nd) {
            auto g = detail::as_matrix(nd.grad, rows, d_out);
            if (xn) {
                Tensor<T> gx(xv.shape());
                detail::as_matrix(gx, rows, d_in).noalias() =
                    g * detail::as_matrix(wv, d_out, d_in);
                xn->accumulate(gx);
            }
            if (wn) {
                Tensor<T> gw({d_out, d_in});
                detail::as_matrix(gw, d_out, d_in).noalias() =
                    g.transpose() * detail::as_matrix(xv, rows, d_in);
                wn->accumulate(gw);
            }
            if (bn) {
                Tensor<T> gb({d_out});
                Eigen::Map<Eigen::RowVectorX<T>>(gb.data(), d_out) = g.colwise().sum();
                bn->accumulate(gb);
            }
        });
}

// ---------------------------------------------------------------------------
// softmax / layernorm / activations
// ---------------------------------------------------------------------------

/// Row-stable softmax over the trailing axis.
template <typename T>
inline Var<T> softmax(const Var<T>& x) {
    int64_t d = x.shape().back();
    int64_t rows = detail::lead_rows(x.value());
    Tensor<T> out(x.shape());
    const T* px = x.value().data();
    T* po = out.data();
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        const T* xi = px + r * d;
        T* oi = po + r * d;
        T mx = xi[0];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xi[j]);
        if constexpr (std::is_same_v<T, float>) {
            // vectorized exp; the normalizing sum stays scalar so the
            // accumulation order is fixed
            detail::EArrMap<T>(oi, d) = (detail::ECArrMap<T>(xi, d) - mx).exp();
        } else {
            for (int64_t j = 0; j < d; ++j) oi[j] = std::exp(xi[j] - mx);
        }
        T z = 0;
        for (int64_t j = 0; j < d; ++j) z += oi[j];
        T inv = T(1) / z;
        for (int64_t j = 0; j < d; ++j) oi[j] *= inv;
    }

    if (!GradMode::enabled() || !x.tracked()) return Var<T>(out);
    auto xn = x.node();
    Tensor<T> y = out;
    return Var<T>::tracked(out, {xn}, [xn, y, rows, d](detail::Node<T>& nd) {
        Tensor<T> gx(y.shape());
        const T* py = y.data();
        const T* pg = nd.grad.data();
        T* po = gx.data();
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < rows; ++r) {
            const T* yi = py + r * d;
            const T* gi = pg + r * d;
            T* oi = po + r * d;
            T dot = 0;
            for (int64_t j = 0; j < d; ++j) dot += gi[j] * yi[j];
            for (int64_t j = 0; j < d; ++j) oi[j] = yi[j] * (gi[j] - dot);
        }
        xn->accumulate(gx);
    });
}

/// Per-row normalization over the trailing axis (biased variance), then
/// elementwise gain and shift.
template <typename T>
inline Var<T> layernorm(const Var<T>& x, const Var<T>& gain, const Var<T>& shift,
                        T epsilon = T(1e-5)) {
    int64_t d = x.shape().back();
    if (gain.shape() != Shape{d} || shift.shape() != Shape{d})
        throw ShapeError("layernorm: gain/shift " + shape_str(gain.shape()) + "/" +
                         shape_str(shift.shape()) + " must be [" + std::to_string(d) + "]");
    int64_t rows = detail::lead_rows(x.value());
    Tensor<T> out(x.shape());
    Tensor<T> xhat(x.shape());
    Tensor<T> inv_sd({rows > 0 ? rows : 1});
    const T* px = x.value().data();
    const T* pgain = gain.value().data();
    const T* pshift = shift.value().data();
    T* po = out.data();
    T* ph = xhat.data();
    T* pis = inv_sd.data();
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        const T* xi = px + r * d;
        T* oi = po + r * d;
        T* hi = ph + r * d;
        T mu = 0;
        for (int64_t j = 0; j < d; ++j) mu += xi[j];
        mu /= static_cast<T>(d);
        T var = 0;
        for (int64_t j = 0; j < d; ++j) {
            T c = xi[j] - mu;
            var += c * c;
        }
        var /= static_cast<T>(d);
        T inv = T(1) / std::sqrt(var + epsilon);
        pis[r] = inv;
        for (int64_t j = 0; j < d; ++j) {
            hi[j] = (xi[j] - mu) * inv;
            oi[j] = hi[j] * pgain[j] + pshift[j];
        }
    }

    if (!GradMode::enabled() || (!x.tracked() && !gain.tracked() && !shift.tracked()))
        return Var<T>(out);
    auto xn = x.node();
    auto gn = gain.node();
    auto sn = shift.node();
    Tensor<T> gv = gain.value();
    return Var<T>::tracked(
        out, {xn, gn, sn}, [xn, gn, sn, xhat, inv_sd, gv, rows, d](detail::Node<T>& nd) {
            const T* pg = nd.grad.data();
            const T* ph = xhat.data();
            const T* pgain = gv.data();
            if (xn) {
                Tensor<T> gx(xhat.shape());
                T* po = gx.data();
#pragma omp parallel for schedule(static)
                for (int64_t r = 0; r < rows; ++r) {
                    const T* gi = pg + r * d;
                    const T* hi = ph + r * d;
                    T* oi = po + r * d;
                    T sum_dh = 0, sum_dhh = 0;
                    for (int64_t j = 0; j < d; ++j) {
                        T dh = gi[j] * pgain[j];
                        sum_dh += dh;
                        sum_dhh += dh * hi[j];
                    }
                    T inv = inv_sd[r];
                    T invd = T(1) / static_cast<T>(d);
                    for (int64_t j = 0; j < d; ++j) {
                        T dh = gi[j] * pgain[j];
                        oi[j] = inv * (dh - invd * sum_dh - invd * hi[j] * sum_dhh);
                    }
                }
                xn->accumulate(gx);
            }
            if (gn) {
                Tensor<T> gg({d});
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < d; ++j) gg[j] += pg[r * d + j] * ph[r * d + j];
                gn->accumulate(gg);
            }
            if (sn) {
                Tensor<T> gs({d});
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < d; ++j) gs[j] += pg[r * d + j];
                sn->accumulate(gs);
            }
        });
}

template <typename T>
inline Var<T> relu(const Var<T>& x) {
    Tensor<T> out(x.shape());
    const T* px = x.value().data();
    T* po = out.data();
    int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = px[i] > T(0) ? px[i] : T(0);

    if (!GradMode::enabled() || !x.tracked()) return Var<T>(out);
    auto xn = x.node();
    Tensor<T> xv = x.value();
    return Var<T>::tracked(out, {xn}, [xn, xv](detail::Node<T>& nd) {
        Tensor<T> g(xv.shape());
        for (int64_t i = 0; i < g.numel(); ++i) g[i] = xv[i] > T(0) ? nd.grad[i] : T(0);
        xn->accumulate(g);
    });
}

namespace detail {
// tanh-approximation constants: sqrt(2/pi) and the cubic coefficient
constexpr double kGeluC = 0.7978845608028654;
constexpr double kGeluA = 0.044715;
}  // namespace detail

/// GELU, tanh approximation: 0.5 x (1 + tanh(c (x + a x^3))). The tanh is
/// evaluated through Eigen so float batches hit the vectorized kernel and
/// the backward pass reuses it instead of recomputing.
template <typename T>
inline Var<T> gelu(const Var<T>& x) {
    const T c = static_cast<T>(detail::kGeluC);
    const T a = static_cast<T>(detail::kGeluA);
    Tensor<T> out(x.shape());
    Tensor<T> th(x.shape());  // tanh(c (x + a x^3))
    {
        auto xv = detail::as_array(x.value());
        auto t = detail::as_array(th);
        t = (c * (xv + a * xv.cube())).tanh();
        detail::as_array(out) = T(0.5) * xv * (T(1) + t);
    }

    if (!GradMode::enabled() || !x.tracked()) return Var<T>(out);
    auto xn = x.node();
    Tensor<T> xv = x.value();
    return Var<T>::tracked(out, {xn}, [xn, xv, th, c, a](detail::Node<T>& nd) {
        Tensor<T> g(xv.shape());
        auto v = detail::as_array(xv);
        auto t = detail::as_array(th);
        detail::as_array(g) =
            detail::as_array(nd.grad) *
            (T(0.5) * (T(1) + t) +
             T(0.5) * v * (T(1) - t.square()) * (c * (T(1) + T(3) * a * v.square())));
        xn->accumulate(g);
    });
}

/// Inverted dropout. Training mode zeroes each element with probability
/// `rate` and scales survivors by 1/(1-rate); eval mode is the identity and
/// consumes no randomness.
template <typename T>
inline Var<T> dropout(const Var<T>& x, double rate, RngState& rng, bool training) {
    if (rate < 0.0 || rate >= 1.0)
        throw ConfigError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
    if (!training) return x;

    Tensor<T> mask(x.shape());
    Tensor<T> out(x.shape());
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    const T* px = x.value().data();
    T* pm = mask.data();
    T* po = out.data();
    const int64_t n = mask.numel();
    for (int64_t i = 0; i < n; ++i) {
        pm[i] = rng.uniform() < rate ? T(0) : keep_scale;
        po[i] = px[i] * pm[i];
    }

    if (!GradMode::enabled() || !x.tracked()) return Var<T>(out);
    auto xn = x.node();
    return Var<T>::tracked(out, {xn}, [xn, mask](detail::Node<T>& nd) {
        Tensor<T> g(mask.shape());
        for (int64_t i = 0; i < g.numel(); ++i) g[i] = nd.grad[i] * mask[i];
        xn->accumulate(g);
    });
}

// ---------------------------------------------------------------------------
// losses and gathers
// ---------------------------------------------------------------------------

/// Mean Huber penalty: quadratic within `delta` of the target, linear beyond.
/// The per-element gradient magnitude is bounded by delta / n.
template <typename T>
inline Var<T> huber_loss(const Var<T>& pred, const Var<T>& target, T delta = T(1)) {
    if (pred.shape() != target.shape())
        throw ShapeError("huber_loss: shape mismatch " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
    int64_t n = pred.value().numel();
    const T* pp = pred.value().data();
    const T* pt = target.value().data();
    T acc = 0;
    for (int64_t i = 0; i < n; ++i) {
        T e = pp[i] - pt[i];
        T ae = std::abs(e);
        acc += ae <= delta ? T(0.5) * e * e : delta * (ae - T(0.5) * delta);
    }
    Tensor<T> out({1}, {acc / static_cast<T>(n)});

    if (!GradMode::enabled() || (!pred.tracked() && !target.tracked())) return Var<T>(out);
    auto pn = pred.node();
    auto tn = target.node();
    Tensor<T> pv = pred.value();
    Tensor<T> tv = target.value();
    return Var<T>::tracked(out, {pn, tn}, [pn, tn, pv, tv, delta, n](detail::Node<T>& nd) {
        T g0 = nd.grad[0] / static_cast<T>(n);
        Tensor<T> g(pv.shape());
        for (int64_t i = 0; i < n; ++i) {
            T e = pv[i] - tv[i];
            g[i] = g0 * std::clamp(e, -delta, delta);
        }
        if (pn) pn->accumulate(g);
        if (tn) {
            Tensor<T> gt(g.shape());
            for (int64_t i = 0; i < n; ++i) gt[i] = -g[i];
            tn->accumulate(gt);
        }
    });
}

/// Pick q[i, actions[i]] for each row: [B x A] -> [B].
template <typename T>
inline Var<T> gather_actions(const Var<T>& q, const std::vector<int64_t>& actions) {
    if (q.shape().size() != 2 || static_cast<int64_t>(actions.size()) != q.shape()[0])
        throw ShapeError("gather_actions: q " + shape_str(q.shape()) + " vs " +
                         std::to_string(actions.size()) + " actions");
    int64_t b = q.shape()[0], a = q.shape()[1];
    for (int64_t i = 0; i < b; ++i)
        if (actions[static_cast<size_t>(i)] < 0 || actions[static_cast<size_t>(i)] >= a)
            throw InputError("gather_actions: action " +
                             std::to_string(actions[static_cast<size_t>(i)]) + " outside [0, " +
                             std::to_string(a) + ")");
    Tensor<T> out({b});
    const T* pq = q.value().data();
    for (int64_t i = 0; i < b; ++i) out[i] = pq[i * a + actions[i]];

    if (!GradMode::enabled() || !q.tracked()) return Var<T>(out);
    auto qn = q.node();
    return Var<T>::tracked(out, {qn}, [qn, actions, b, a](detail::Node<T>& nd) {
        Tensor<T> g({b, a});
        for (int64_t i = 0; i < b; ++i) g[i * a + actions[i]] = nd.grad[i];
        qn->accumulate(g);
    });
}

// ---------------------------------------------------------------------------
// plain tensor helpers (no gradient)
// ---------------------------------------------------------------------------

/// Row maxima of a [B x A] tensor.
template <typename T>
inline Tensor<T> rowwise_max(const Tensor<T>& q) {
    int64_t b = q.shape()[0], a = q.shape()[1];
    Tensor<T> out({b});
    for (int64_t i = 0; i < b; ++i) {
        T m = q[i * a];
        for (int64_t j = 1; j < a; ++j) m = std::max(m, q[i * a + j]);
        out[i] = m;
    }
    return out;
}

/// Index of the row maximum; ties resolve to the lowest index.
template <typename T>
inline int64_t argmax(const T* row, int64_t n) {
    int64_t best = 0;
    for (int64_t j = 1; j < n; ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

}  // namespace qattn
