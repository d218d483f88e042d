#pragma once

#include "qattn/ops.hpp"

namespace qattn {

/// [B x S x D] -> [(B*H) x S x (D/H)], grouping the embedding into H head
/// slices. Pure data movement.
template <typename T>
inline Var<T> split_heads(const Var<T>& x, int64_t heads) {
    if (x.shape().size() != 3)
        throw ShapeError("split_heads: expected [B x S x D], got " + shape_str(x.shape()));
    const int64_t b = x.shape()[0], s = x.shape()[1], d = x.shape()[2];
    if (d % heads != 0)
        throw ShapeError("split_heads: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
    const int64_t dh = d / heads;
    Tensor<T> out({b * heads, s, dh});
    const T* px = x.value().data();
    T* po = out.data();
#pragma omp parallel for schedule(static)
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t hi = 0; hi < heads; ++hi)
            for (int64_t si = 0; si < s; ++si) {
                const T* src = px + (bi * s + si) * d + hi * dh;
                T* dst = po + ((bi * heads + hi) * s + si) * dh;
                for (int64_t k = 0; k < dh; ++k) dst[k] = src[k];
            }

    if (!GradMode::enabled() || !x.tracked()) return Var<T>(out);
    auto xn = x.node();
    return Var<T>::tracked(out, {xn}, [xn, b, s, d, heads, dh](detail::Node<T>& nd) {
        Tensor<T> g({b, s, d});
        const T* pg = nd.grad.data();
        T* po = g.data();
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t hi = 0; hi < heads; ++hi)
                for (int64_t si = 0; si < s; ++si) {
                    const T* src = pg + ((bi * heads + hi) * s + si) * dh;
                    T* dst = po + (bi * s + si) * d + hi * dh;
                    for (int64_t k = 0; k < dh; ++k) dst[k] = src[k];
                }
        xn->accumulate(g);
    });
}

/// Inverse of split_heads: [(B*H) x S x Dh] -> [B x S x (H*Dh)].
template <typename T>
inline Var<T> merge_heads(const Var<T>& x, int64_t heads) {
    if (x.shape().size() != 3 || x.shape()[0] % heads != 0)
        throw ShapeError("merge_heads: expected [(B*H) x S x Dh] with H=" +
                         std::to_string(heads) + ", got " + shape_str(x.shape()));
    const int64_t b = x.shape()[0] / heads, s = x.shape()[1], dh = x.shape()[2];
    const int64_t d = heads * dh;
    Tensor<T> out({b, s, d});
    const T* px = x.value().data();
    T* po = out.data();
#pragma omp parallel for schedule(static)
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t hi = 0; hi < heads; ++hi)
            for (int64_t si = 0; si < s; ++si) {
                const T* src = px + ((bi * heads + hi) * s + si) * dh;
                T* dst = po + (bi * s + si) * d + hi * dh;
                for (int64_t k = 0; k < dh; ++k) dst[k] = src[k];
            }

    if (!GradMode::enabled() || !x.tracked()) return Var<T>(out);
    auto xn = x.node();
    return Var<T>::tracked(out, {xn}, [xn, b, s, d, heads, dh](detail::Node<T>& nd) {
        Tensor<T> g({b * heads, s, dh});
        const T* pg = nd.grad.data();
        T* po = g.data();
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t hi = 0; hi < heads; ++hi)
                for (int64_t si = 0; si < s; ++si) {
                    const T* src = pg + (bi * s + si) * d + hi * dh;
                    T* dst = po + ((bi * heads + hi) * s + si) * dh;
                    for (int64_t k = 0; k < dh; ++k) dst[k] = src[k];
                }
        xn->accumulate(g);
    });
}

/// Batched matrix product over matching leading batches:
/// C[i] = op(A[i]) * op(B[i]) with optional transposes.
template <typename T>
inline Var<T> bmm(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false) {
    if (a.shape().size() != 3 || b.shape().size() != 3 || a.shape()[0] != b.shape()[0])
        throw ShapeError("bmm: expected matching 3-d batches, got " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
    const int64_t n = a.shape()[0];
    const int64_t am = a.shape()[1], ak = a.shape()[2];
    const int64_t bm = b.shape()[1], bk = b.shape()[2];
    const int64_t m = trans_a ? ak : am;
    const int64_t k = trans_a ? am : ak;
    const int64_t k2 = trans_b ? bk : bm;
    const int64_t r = trans_b ? bm : bk;
    if (k != k2)
        throw ShapeError("bmm: inner dims disagree for " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));

    Tensor<T> out({n, m, r});
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    T* po = out.data();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
        detail::ECMap<T> ma(pa + i * am * ak, am, ak);
        detail::ECMap<T> mb(pb + i * bm * bk, bm, bk);
        detail::EMap<T> mc(po + i * m * r, m, r);
        if (!trans_a && !trans_b)
            mc.noalias() = ma * mb;
        else if (!trans_a && trans_b)
            mc.noalias() = ma * mb.transpose();
        else if (trans_a && !trans_b)
            mc.noalias() = ma.transpose() * mb;
        else
            mc.noalias() = ma.transpose() * mb.transpose();
    }

    if (!GradMode::enabled() || (!a.tracked() && !b.tracked())) return Var<T>(out);
    auto an = a.node();
    auto bn = b.node();
    Tensor<T> av = a.value();
    Tensor<T> bv = b.value();
    return Var<T>::tracked(
        out, {an, bn},
        [an, bn, av, bv, n, am, ak, bm, bk, m, r, trans_a, trans_b](detail::Node<T>& nd) {
            const T* pg = nd.grad.data();
            if (an) {
                Tensor<T> ga({n, am, ak});
                T* po = ga.data();
#pragma omp parallel for schedule(static)
                for (int64_t i = 0; i < n; ++i) {
                    detail::ECMap<T> g(pg + i * m * r, m, r);
                    detail::ECMap<T> mb(bv.data() + i * bm * bk, bm, bk);
                    detail::EMap<T> out_a(po + i * am * ak, am, ak);
                    if (!trans_a) {
                        if (!trans_b)
                            out_a.noalias() = g * mb.transpose();
                        else
                            out_a.noalias() = g * mb;
                    } else {
                        if (!trans_b)
                            out_a.noalias() = mb * g.transpose();
                        else
                            out_a.noalias() = mb.transpose() * g.transpose();
                    }
                }
                an->accumulate(ga);
            }
            if (bn) {
                Tensor<T> gb({n, bm, bk});
                T* po = gb.data();
#pragma omp parallel for schedule(static)
                for (int64_t i = 0; i < n; ++i) {
                    detail::ECMap<T> g(pg + i * m * r, m, r);
                    detail::ECMap<T> ma(av.data() + i * am * ak, am, ak);
                    detail::EMap<T> out_b(po + i * bm * bk, bm, bk);
                    if (!trans_b) {
                        if (!trans_a)
                            out_b.noalias() = ma.transpose() * g;
                        else
                            out_b.noalias() = ma * g;
                    } else {
                        if (!trans_a)
                            out_b.noalias() = g.transpose() * ma;
                        else
                            out_b.noalias() = g.transpose() * ma.transpose();
                    }
                }
                bn->accumulate(gb);
            }
        });
}

/// Compress the sequence axis with a shared projection:
/// out[i] = P^T * x[i], x is [B x S x D], proj is [S x K] -> [B x K x D].
template <typename T>
inline Var<T> seq_project(const Var<T>& x, const Var<T>& proj) {
    if (x.shape().size() != 3 || proj.shape().size() != 2 || proj.shape()[0] != x.shape()[1])
        throw ShapeError("seq_project: x " + shape_str(x.shape()) + " vs projection " +
                         shape_str(proj.shape()));
    const int64_t b = x.shape()[0], s = x.shape()[1], d = x.shape()[2];
    const int64_t k = proj.shape()[1];
    Tensor<T> out({b, k, d});
    const T* px = x.value().data();
    const T* pp = proj.value().data();
    T* po = out.data();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < b; ++i)
        detail::EMap<T>(po + i * k * d, k, d).noalias() =
            detail::ECMap<T>(pp, s, k).transpose() * detail::ECMap<T>(px + i * s * d, s, d);

    if (!GradMode::enabled() || (!x.tracked() && !proj.tracked())) return Var<T>(out);
    auto xn = x.node();
    auto pn = proj.node();
    Tensor<T> xv = x.value();
    Tensor<T> pv = proj.value();
    return Var<T>::tracked(out, {xn, pn}, [xn, pn, xv, pv, b, s, d, k](detail::Node<T>& nd) {
        const T* pg = nd.grad.data();
        if (xn) {
            Tensor<T> gx({b, s, d});
            T* po = gx.data();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < b; ++i)
                detail::EMap<T>(po + i * s * d, s, d).noalias() =
                    detail::ECMap<T>(pv.data(), s, k) * detail::ECMap<T>(pg + i * k * d, k, d);
            xn->accumulate(gx);
        }
        if (pn) {
            Tensor<T> gp({s, k});
            auto gm = detail::as_matrix(gp, s, k);
            for (int64_t i = 0; i < b; ++i)
                gm.noalias() += detail::ECMap<T>(xv.data() + i * s * d, s, d) *
                                detail::ECMap<T>(pg + i * k * d, k, d).transpose();
            pn->accumulate(gp);
        }
    });
}

/// Rows [r0, r1) of a 2-d tensor.
template <typename T>
inline Var<T> slice_rows(const Var<T>& x, int64_t r0, int64_t r1) {
    if (x.shape().size() != 2 || r0 < 0 || r1 > x.shape()[0] || r0 >= r1)
        throw ShapeError("slice_rows: rows [" + std::to_string(r0) + ", " + std::to_string(r1) +
                         ") invalid for " + shape_str(x.shape()));
    const int64_t d = x.shape()[1];
    const int64_t rows = r1 - r0;
    Tensor<T> out({rows, d});
    const T* px = x.value().data() + r0 * d;
    std::copy(px, px + rows * d, out.data());

    if (!GradMode::enabled() || !x.tracked()) return Var<T>(out);
    auto xn = x.node();
    Shape xs = x.shape();
    return Var<T>::tracked(out, {xn}, [xn, xs, r0, rows, d](detail::Node<T>& nd) {
        Tensor<T> g(xs);
        std::copy(nd.grad.data(), nd.grad.data() + rows * d, g.data() + r0 * d);
        xn->accumulate(g);
    });
}

/// Add a shared [S x D] table to every sample of [B x S x D].
template <typename T>
inline Var<T> broadcast_add_rows(const Var<T>& x, const Var<T>& table) {
    if (x.shape().size() != 3 || table.shape().size() != 2 ||
        x.shape()[1] != table.shape()[0] || x.shape()[2] != table.shape()[1])
        throw ShapeError("broadcast_add_rows: x " + shape_str(x.shape()) + " vs table " +
                         shape_str(table.shape()));
    const int64_t b = x.shape()[0], sd = x.shape()[1] * x.shape()[2];
    Tensor<T> out(x.shape());
    const T* px = x.value().data();
    const T* pt = table.value().data();
    T* po = out.data();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < sd; ++j) po[i * sd + j] = px[i * sd + j] + pt[j];

    if (!GradMode::enabled() || (!x.tracked() && !table.tracked())) return Var<T>(out);
    auto xn = x.node();
    auto tn = table.node();
    Shape ts = table.shape();
    return Var<T>::tracked(out, {xn, tn}, [xn, tn, ts, b, sd](detail::Node<T>& nd) {
        if (xn) xn->accumulate(nd.grad);
        if (tn) {
            Tensor<T> g(ts);
            const T* pg = nd.grad.data();
            for (int64_t i = 0; i < b; ++i)
                for (int64_t j = 0; j < sd; ++j) g[j] += pg[i * sd + j];
            tn->accumulate(g);
        }
    });
}

/// Prepend a shared [1 x D] row to every sample: [B x S x D] -> [B x (S+1) x D].
template <typename T>
inline Var<T> prepend_row(const Var<T>& x, const Var<T>& row) {
    if (x.shape().size() != 3 || row.shape().size() != 2 || row.shape()[0] != 1 ||
        row.shape()[1] != x.shape()[2])
        throw ShapeError("prepend_row: x " + shape_str(x.shape()) + " vs row " +
                         shape_str(row.shape()));
    const int64_t b = x.shape()[0], s = x.shape()[1], d = x.shape()[2];
    Tensor<T> out({b, s + 1, d});
    const T* px = x.value().data();
    const T* pr = row.value().data();
    T* po = out.data();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < b; ++i) {
        T* dst = po + i * (s + 1) * d;
        std::copy(pr, pr + d, dst);
        std::copy(px + i * s * d, px + (i + 1) * s * d, dst + d);
    }

    if (!GradMode::enabled() || (!x.tracked() && !row.tracked())) return Var<T>(out);
    auto xn = x.node();
    auto rn = row.node();
    return Var<T>::tracked(out, {xn, rn}, [xn, rn, b, s, d](detail::Node<T>& nd) {
        const T* pg = nd.grad.data();
        if (rn) {
            Tensor<T> gr({1, d});
            for (int64_t i = 0; i < b; ++i) {
                const T* src = pg + i * (s + 1) * d;
                for (int64_t j = 0; j < d; ++j) gr[j] += src[j];
            }
            rn->accumulate(gr);
        }
        if (xn) {
            Tensor<T> gx({b, s, d});
            T* po = gx.data();
            for (int64_t i = 0; i < b; ++i)
                std::copy(pg + i * (s + 1) * d + d, pg + (i + 1) * (s + 1) * d, po + i * s * d);
            xn->accumulate(gx);
        }
    });
}

/// Extract one sequence row from every sample: [B x S x D] -> [B x D].
template <typename T>
inline Var<T> take_row(const Var<T>& x, int64_t row) {
    if (x.shape().size() != 3 || row < 0 || row >= x.shape()[1])
        throw ShapeError("take_row: row " + std::to_string(row) + " invalid for " +
                         shape_str(x.shape()));
    const int64_t b = x.shape()[0], s = x.shape()[1], d = x.shape()[2];
    Tensor<T> out({b, d});
    const T* px = x.value().data();
    for (int64_t i = 0; i < b; ++i)
        std::copy(px + (i * s + row) * d, px + (i * s + row + 1) * d, out.data() + i * d);

    if (!GradMode::enabled() || !x.tracked()) return Var<T>(out);
    auto xn = x.node();
    return Var<T>::tracked(out, {xn}, [xn, b, s, d, row](detail::Node<T>& nd) {
        Tensor<T> g({b, s, d});
        const T* pg = nd.grad.data();
        for (int64_t i = 0; i < b; ++i)
            std::copy(pg + i * d, pg + (i + 1) * d, g.data() + (i * s + row) * d);
        xn->accumulate(g);
    });
}

/// Concatenate a shared [S x D2] table onto the embedding axis of [B x S x D1].
template <typename T>
inline Var<T> concat_cols_broadcast(const Var<T>& x, const Var<T>& table) {
    if (x.shape().size() != 3 || table.shape().size() != 2 || x.shape()[1] != table.shape()[0])
        throw ShapeError("concat_cols_broadcast: x " + shape_str(x.shape()) + " vs table " +
                         shape_str(table.shape()));
    const int64_t b = x.shape()[0], s = x.shape()[1];
    const int64_t d1 = x.shape()[2], d2 = table.shape()[1];
    Tensor<T> out({b, s, d1 + d2});
    const T* px = x.value().data();
    const T* pt = table.value().data();
    T* po = out.data();
    for (int64_t i = 0; i < b; ++i)
        for (int64_t si = 0; si < s; ++si) {
            T* dst = po + (i * s + si) * (d1 + d2);
            std::copy(px + (i * s + si) * d1, px + (i * s + si + 1) * d1, dst);
            std::copy(pt + si * d2, pt + (si + 1) * d2, dst + d1);
        }

    if (!GradMode::enabled() || (!x.tracked() && !table.tracked())) return Var<T>(out);
    auto xn = x.node();
    auto tn = table.node();
    return Var<T>::tracked(out, {xn, tn}, [xn, tn, b, s, d1, d2](detail::Node<T>& nd) {
        const T* pg = nd.grad.data();
        if (xn) {
            Tensor<T> gx({b, s, d1});
            for (int64_t i = 0; i < b; ++i)
                for (int64_t si = 0; si < s; ++si)
                    std::copy(pg + (i * s + si) * (d1 + d2), pg + (i * s + si) * (d1 + d2) + d1,
                              gx.data() + (i * s + si) * d1);
            xn->accumulate(gx);
        }
        if (tn) {
            Tensor<T> gt({s, d2});
            for (int64_t i = 0; i < b; ++i)
                for (int64_t si = 0; si < s; ++si) {
                    const T* src = pg + (i * s + si) * (d1 + d2) + d1;
                    for (int64_t j = 0; j < d2; ++j) gt[si * d2 + j] += src[j];
                }
            tn->accumulate(gt);
        }
    });
}

}  // namespace qattn
