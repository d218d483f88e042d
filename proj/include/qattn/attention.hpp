#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "qattn/autograd.hpp"
#include "qattn/init.hpp"
#include "qattn/ops.hpp"
#include "qattn/seqops.hpp"

namespace qattn::attention {

struct AttentionConfig {
    int64_t d_model = 128;
    int64_t n_heads = 8;
    int64_t n_layers = 2;
    int64_t seq_len = 50;      // feature tokens + value token
    int64_t linformer_k = 32;  // compressed sequence length for keys/values
    int64_t mlp_hidden = 512;
    double dropout_rate = 0.1;
    bool tie_projections = false;  // share one compression matrix for K and V

    void validate() const {
        if (d_model <= 0 || n_heads <= 0 || n_layers < 0 || seq_len <= 0 || mlp_hidden <= 0)
            throw ConfigError("attention config requires positive dimensions");
        if (d_model % n_heads != 0)
            throw ConfigError("d_model " + std::to_string(d_model) +
                              " not divisible by n_heads " + std::to_string(n_heads));
        if (linformer_k < 1 || linformer_k > seq_len)
            throw ConfigError("linformer_k " + std::to_string(linformer_k) +
                              " outside [1, seq_len=" + std::to_string(seq_len) + "]");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0)
            throw ConfigError("dropout_rate must lie in [0, 1)");
    }

    int64_t head_dim() const { return d_model / n_heads; }
};

/// Scaled dot-product attention over a batch of sequences.
/// q: [N x n x d_k], k: [N x m x d_k], v: [N x m x d_v] -> [N x n x d_v].
/// 2D inputs are treated as a single sequence (N = 1) and returned as 2D.
template <typename T>
Var<T> scaled_dot_product_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v) {
    const bool flat = q.shape().size() == 2;
    if (flat != (k.shape().size() == 2) || flat != (v.shape().size() == 2))
        throw ShapeError("attention inputs must share rank, got q=" + shape_str(q.shape()) +
                         " k=" + shape_str(k.shape()) + " v=" + shape_str(v.shape()));
    Var<T> q3 = flat ? reshape(q, {1, q.shape()[0], q.shape()[1]}) : q;
    Var<T> k3 = flat ? reshape(k, {1, k.shape()[0], k.shape()[1]}) : k;
    Var<T> v3 = flat ? reshape(v, {1, v.shape()[0], v.shape()[1]}) : v;
    if (q3.shape().size() != 3)
        throw ShapeError("attention expects rank-2 or rank-3 inputs, got " + shape_str(q.shape()));
    if (q3.shape()[2] != k3.shape()[2])
        throw ShapeError("query/key width mismatch: " + shape_str(q.shape()) + " vs " +
                         shape_str(k.shape()));
    if (k3.shape()[1] != v3.shape()[1])
        throw ShapeError("key/value length mismatch: " + shape_str(k.shape()) + " vs " +
                         shape_str(v.shape()));

    const T inv_sqrt_dk = static_cast<T>(1.0 / std::sqrt(static_cast<double>(q3.shape()[2])));
    Var<T> scores = scale(bmm(q3, k3, false, true), inv_sqrt_dk);
    Var<T> out = bmm(softmax(scores), v3);
    if (flat) out = reshape(out, {out.shape()[1], out.shape()[2]});
    return out;
}

/// Linformer compression: project keys and values along the sequence axis.
/// k, v: [N x m x d] (or [m x d]); e, f: [m x r]. Returns (E^T K, F^T V),
/// each [N x r x d].
template <typename T>
std::pair<Var<T>, Var<T>> linformer_project(const Var<T>& k, const Var<T>& v, const Var<T>& e,
                                            const Var<T>& f) {
    const bool flat = k.shape().size() == 2;
    Var<T> k3 = flat ? reshape(k, {1, k.shape()[0], k.shape()[1]}) : k;
    Var<T> v3 = flat ? reshape(v, {1, v.shape()[0], v.shape()[1]}) : v;
    Var<T> kp = seq_project(k3, e);
    Var<T> vp = seq_project(v3, f);
    if (flat) {
        kp = reshape(kp, {kp.shape()[1], kp.shape()[2]});
        vp = reshape(vp, {vp.shape()[1], vp.shape()[2]});
    }
    return {kp, vp};
}

/// Parameters of one pre-norm encoder layer.
template <typename T>
struct EncoderLayerParams {
    Parameter<T> ln1_gain, ln1_shift;
    Parameter<T> wq, bq, wk, bk, wv, bv;
    Parameter<T> key_proj, val_proj;  // [seq_len x linformer_k]
    Parameter<T> wo, bo;
    Parameter<T> ln2_gain, ln2_shift;
    Parameter<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    bool tied = false;

    EncoderLayerParams(const AttentionConfig& cfg, const std::string& prefix, RngState& rng)
        : tied(cfg.tie_projections) {
        const int64_t d = cfg.d_model;
        auto lin = [&](Parameter<T>& w, Parameter<T>& b, const std::string& name, int64_t d_out,
                       int64_t d_in) {
            w = {prefix + name + ".weight", fan_in_uniform<T>({d_out, d_in}, d_in, rng)};
            b = {prefix + name + ".bias", Tensor<T>::zeros({d_out})};
        };
        ln1_gain = {prefix + "ln1.gain", Tensor<T>::ones({d})};
        ln1_shift = {prefix + "ln1.shift", Tensor<T>::zeros({d})};
        lin(wq, bq, "q", d, d);
        lin(wk, bk, "k", d, d);
        lin(wv, bv, "v", d, d);
        key_proj = {prefix + "key_proj", seq_pool_init<T>(cfg.seq_len, cfg.linformer_k, rng)};
        val_proj = {prefix + "val_proj",
                    tied ? key_proj.value : seq_pool_init<T>(cfg.seq_len, cfg.linformer_k, rng)};
        lin(wo, bo, "out", d, d);
        ln2_gain = {prefix + "ln2.gain", Tensor<T>::ones({d})};
        ln2_shift = {prefix + "ln2.shift", Tensor<T>::zeros({d})};
        lin(mlp_w1, mlp_b1, "mlp1", cfg.mlp_hidden, d);
        lin(mlp_w2, mlp_b2, "mlp2", d, cfg.mlp_hidden);
    }

    ParamRefs<T> parameters() {
        ParamRefs<T> p = {&ln1_gain, &ln1_shift, &wq, &bq, &wk, &bk, &wv, &bv, &key_proj};
        if (!tied) p.push_back(&val_proj);
        for (Parameter<T>* q : {&wo, &bo, &ln2_gain, &ln2_shift, &mlp_w1, &mlp_b1, &mlp_w2,
                                &mlp_b2})
            p.push_back(q);
        return p;
    }
};

/// Multi-head attention block with Linformer-compressed keys/values and a
/// trailing dropout on the output projection. x: [B x S x D] or [S x D].
template <typename T>
Var<T> multi_head_attention(const Var<T>& x, EncoderLayerParams<T>& layer,
                            const AttentionConfig& cfg, RngState& rng, bool training) {
    const bool flat = x.shape().size() == 2;
    Var<T> x3 = flat ? reshape(x, {1, x.shape()[0], x.shape()[1]}) : x;
    if (x3.shape().size() != 3 || x3.shape()[2] != cfg.d_model)
        throw ShapeError("attention input " + shape_str(x.shape()) + " does not end in d_model=" +
                         std::to_string(cfg.d_model));
    if (x3.shape()[1] != cfg.seq_len)
        throw ShapeError("attention input " + shape_str(x.shape()) + " has sequence length " +
                         std::to_string(x3.shape()[1]) + ", configured for " +
                         std::to_string(cfg.seq_len));

    Var<T> q = linear(x3, leaf(layer.wq), leaf(layer.bq));
    Var<T> k = linear(x3, leaf(layer.wk), leaf(layer.bk));
    Var<T> v = linear(x3, leaf(layer.wv), leaf(layer.bv));

    Var<T> e = leaf(layer.key_proj);
    Var<T> f = layer.tied ? e : leaf(layer.val_proj);
    auto [kp, vp] = linformer_project(k, v, e, f);

    const int64_t h = cfg.n_heads;
    Var<T> heads = scaled_dot_product_attention(split_heads(q, h), split_heads(kp, h),
                                                split_heads(vp, h));
    Var<T> out = linear(merge_heads(heads, h), leaf(layer.wo), leaf(layer.bo));
    out = dropout(out, static_cast<T>(cfg.dropout_rate), rng, training);
    if (flat) out = reshape(out, {out.shape()[1], out.shape()[2]});
    return out;
}

/// Position-wise feed-forward block: Linear -> GELU -> Dropout -> Linear.
template <typename T>
Var<T> mlp_block(const Var<T>& x, EncoderLayerParams<T>& layer, const AttentionConfig& cfg,
                 RngState& rng, bool training) {
    Var<T> h = gelu(linear(x, leaf(layer.mlp_w1), leaf(layer.mlp_b1)));
    h = dropout(h, static_cast<T>(cfg.dropout_rate), rng, training);
    return linear(h, leaf(layer.mlp_w2), leaf(layer.mlp_b2));
}

/// Pre-norm transformer encoder:
///   x <- x + MHA(LN(x));  x <- x + MLP(LN(x))   per layer.
template <typename T>
Var<T> encoder_forward(Var<T> x, std::vector<EncoderLayerParams<T>>& layers,
                       const AttentionConfig& cfg, RngState& rng, bool training) {
    cfg.validate();
    for (EncoderLayerParams<T>& layer : layers) {
        Var<T> normed = layernorm(x, leaf(layer.ln1_gain), leaf(layer.ln1_shift));
        x = add(x, multi_head_attention(normed, layer, cfg, rng, training));
        Var<T> normed2 = layernorm(x, leaf(layer.ln2_gain), leaf(layer.ln2_shift));
        x = add(x, mlp_block(normed2, layer, cfg, rng, training));
    }
    return x;
}

}  // namespace qattn::attention
