#pragma once

#include "qattn/ops.hpp"

namespace qattn {
namespace detail {

// column p = (oy, ox), row = (ci, ky, kx); out is [C*kh*kw x P] row-major.
template <typename T>
inline void im2col(const T* x, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw,
                   int64_t stride, int64_t oh, int64_t ow, T* col) {
    const int64_t p = oh * ow;
    for (int64_t ci = 0; ci < c; ++ci) {
        const T* xc = x + ci * h * w;
        for (int64_t ky = 0; ky < kh; ++ky) {
            for (int64_t kx = 0; kx < kw; ++kx) {
                T* row = col + ((ci * kh + ky) * kw + kx) * p;
                for (int64_t oy = 0; oy < oh; ++oy) {
                    const T* src = xc + (oy * stride + ky) * w + kx;
                    for (int64_t ox = 0; ox < ow; ++ox) row[oy * ow + ox] = src[ox * stride];
                }
            }
        }
    }
}

template <typename T>
inline void col2im_add(const T* col, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw,
                       int64_t stride, int64_t oh, int64_t ow, T* x) {
    const int64_t p = oh * ow;
    for (int64_t ci = 0; ci < c; ++ci) {
        T* xc = x + ci * h * w;
        for (int64_t ky = 0; ky < kh; ++ky) {
            for (int64_t kx = 0; kx < kw; ++kx) {
                const T* row = col + ((ci * kh + ky) * kw + kx) * p;
                for (int64_t oy = 0; oy < oh; ++oy) {
                    T* dst = xc + (oy * stride + ky) * w + kx;
                    for (int64_t ox = 0; ox < ow; ++ox) dst[ox * stride] += row[oy * ow + ox];
                }
            }
        }
    }
}

}  // namespace detail

/// Valid (unpadded) 2-d cross-correlation with per-output-channel bias.
/// Input is [B x C_in x H x W] or [C_in x H x W]; kernels are
/// [C_out x C_in x kh x kw]. Implemented as im2col + GEMM per sample.
template <typename T>
inline Var<T> conv2d(const Var<T>& input, const Var<T>& kernels, const Var<T>& bias,
                     int64_t stride) {
    if (stride < 1) throw ConfigError("conv2d: stride must be positive");
    const bool batched = input.shape().size() == 4;
    if (!batched && input.shape().size() != 3)
        throw ShapeError("conv2d: input must be [B x C x H x W] or [C x H x W], got " +
                         shape_str(input.shape()));
    if (kernels.shape().size() != 4)
        throw ShapeError("conv2d: kernels must be [C_out x C_in x kh x kw], got " +
                         shape_str(kernels.shape()));

    const int64_t b = batched ? input.shape()[0] : 1;
    const int64_t c_in = input.shape()[batched ? 1 : 0];
    const int64_t h = input.shape()[batched ? 2 : 1];
    const int64_t w = input.shape()[batched ? 3 : 2];
    const int64_t c_out = kernels.shape()[0];
    const int64_t kh = kernels.shape()[2];
    const int64_t kw = kernels.shape()[3];
    if (kernels.shape()[1] != c_in)
        throw ShapeError("conv2d: input " + shape_str(input.shape()) + " vs kernels " +
                         shape_str(kernels.shape()) + " channel mismatch");
    if (kh > h || kw > w)
        throw ShapeError("conv2d: kernel " + shape_str(kernels.shape()) +
                         " larger than input " + shape_str(input.shape()));
    if (bias.shape() != Shape{c_out})
        throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " must be [" +
                         std::to_string(c_out) + "]");

    const int64_t oh = (h - kh) / stride + 1;
    const int64_t ow = (w - kw) / stride + 1;
    const int64_t p = oh * ow;
    const int64_t krows = c_in * kh * kw;

    Shape out_shape = batched ? Shape{b, c_out, oh, ow} : Shape{c_out, oh, ow};
    Tensor<T> out(out_shape);
    const T* px = input.value().data();
    const T* pk = kernels.value().data();
    const T* pb = bias.value().data();
    T* po = out.data();

#pragma omp parallel
    {
        std::vector<T> col(static_cast<size_t>(krows * p));
#pragma omp for schedule(static)
        for (int64_t s = 0; s < b; ++s) {
            detail::im2col(px + s * c_in * h * w, c_in, h, w, kh, kw, stride, oh, ow, col.data());
            detail::EMap<T> y(po + s * c_out * p, c_out, p);
            y.noalias() = detail::ECMap<T>(pk, c_out, krows) * detail::ECMap<T>(col.data(), krows, p);
            for (int64_t co = 0; co < c_out; ++co) y.row(co).array() += pb[co];
        }
    }

    if (!GradMode::enabled() || (!input.tracked() && !kernels.tracked() && !bias.tracked()))
        return Var<T>(out);
    auto in_n = input.node();
    auto k_n = kernels.node();
    auto b_n = bias.node();
    Tensor<T> xv = input.value();
    Tensor<T> kv = kernels.value();
    return Var<T>::tracked(
        out, {in_n, k_n, b_n},
        [in_n, k_n, b_n, xv, kv, b, c_in, h, w, c_out, kh, kw, stride, oh, ow, p,
         krows](detail::Node<T>& nd) {
            const T* pg = nd.grad.data();
            const T* px = xv.data();
            const T* pk = kv.data();
            Tensor<T> gk = k_n ? Tensor<T>(kv.shape()) : Tensor<T>();
            Tensor<T> gb = b_n ? Tensor<T>(Shape{c_out}) : Tensor<T>();
            Tensor<T> gx = in_n ? Tensor<T>(xv.shape()) : Tensor<T>();
            std::vector<T> col(static_cast<size_t>(krows * p));
            std::vector<T> dcol(static_cast<size_t>(krows * p));
            // serial over samples: weight/bias accumulation order is fixed
            for (int64_t s = 0; s < b; ++s) {
                detail::ECMap<T> gy(pg + s * c_out * p, c_out, p);
                if (k_n || in_n)
                    detail::im2col(px + s * c_in * h * w, c_in, h, w, kh, kw, stride, oh, ow,
                                   col.data());
                if (k_n)
                    detail::as_matrix(gk, c_out, krows).noalias() +=
                        gy * detail::ECMap<T>(col.data(), krows, p).transpose();
                if (b_n)
                    for (int64_t co = 0; co < c_out; ++co) gb[co] += gy.row(co).sum();
                if (in_n) {
                    detail::EMap<T>(dcol.data(), krows, p).noalias() =
                        detail::ECMap<T>(pk, c_out, krows).transpose() * gy;
                    detail::col2im_add(dcol.data(), c_in, h, w, kh, kw, stride, oh, ow,
                                       gx.data() + s * c_in * h * w);
                }
            }
            if (k_n) k_n->accumulate(gk);
            if (b_n) b_n->accumulate(gb);
            if (in_n) in_n->accumulate(gx);
        });
}

/// Reorder CNN feature maps into a token sequence:
/// [C x H x W] -> [(H*W) x C] (or batched [B x C x H x W] -> [B x (H*W) x C]).
/// token[r*W + c] is the channel vector at spatial position (r, c).
template <typename T>
inline Var<T> tokenize(const Var<T>& features) {
    const bool batched = features.shape().size() == 4;
    if (!batched && features.shape().size() != 3)
        throw ShapeError("tokenize: expected [C x H x W] or [B x C x H x W], got " +
                         shape_str(features.shape()));
    const int64_t b = batched ? features.shape()[0] : 1;
    const int64_t c = features.shape()[batched ? 1 : 0];
    const int64_t h = features.shape()[batched ? 2 : 1];
    const int64_t w = features.shape()[batched ? 3 : 2];
    const int64_t hw = h * w;

    Shape out_shape = batched ? Shape{b, hw, c} : Shape{hw, c};
    Tensor<T> out(out_shape);
    const T* px = features.value().data();
    T* po = out.data();
#pragma omp parallel for schedule(static)
    for (int64_t s = 0; s < b; ++s) {
        const T* xs = px + s * c * hw;
        T* os = po + s * hw * c;
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t t = 0; t < hw; ++t) os[t * c + ci] = xs[ci * hw + t];
    }

    if (!GradMode::enabled() || !features.tracked()) return Var<T>(out);
    auto fn = features.node();
    Shape in_shape = features.shape();
    return Var<T>::tracked(out, {fn}, [fn, in_shape, b, c, hw](detail::Node<T>& nd) {
        Tensor<T> g(in_shape);
        const T* pg = nd.grad.data();
        T* po = g.data();
        for (int64_t s = 0; s < b; ++s) {
            const T* gs = pg + s * hw * c;
            T* os = po + s * c * hw;
            for (int64_t ci = 0; ci < c; ++ci)
                for (int64_t t = 0; t < hw; ++t) os[ci * hw + t] = gs[t * c + ci];
        }
        fn->accumulate(g);
    });
}

/// Inverse of tokenize: [(H*W) x C] -> [C x H x W].
template <typename T>
inline Tensor<T> untokenize(const Tensor<T>& tokens, int64_t h, int64_t w) {
    if (tokens.shape().size() != 2 || tokens.shape()[0] != h * w)
        throw ShapeError("untokenize: tokens " + shape_str(tokens.shape()) +
                         " incompatible with " + std::to_string(h) + "x" + std::to_string(w));
    const int64_t c = tokens.shape()[1];
    Tensor<T> out({c, h, w});
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t t = 0; t < h * w; ++t) out[ci * h * w + t] = tokens[t * c + ci];
    return out;
}

}  // namespace qattn
