#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qattn/attention.hpp"
#include "qattn/conv.hpp"
#include "qattn/init.hpp"
#include "qattn/ops.hpp"
#include "qattn/seqops.hpp"

namespace qattn::nets {

enum class PositionalCombine { kAdd, kConcat };

inline const char* to_string(PositionalCombine c) {
    return c == PositionalCombine::kAdd ? "add" : "concat";
}

inline PositionalCombine positional_combine_from_string(const std::string& s) {
    if (s == "add") return PositionalCombine::kAdd;
    if (s == "concat") return PositionalCombine::kConcat;
    throw ConfigError("positional_combine must be 'add' or 'concat', got '" + s + "'");
}

struct QNetConfig {
    int64_t n_actions = 3;
    int64_t in_channels = 4;
    attention::AttentionConfig attn;  // d_model = token embedding width (pre-combine)
    PositionalCombine positional_combine = PositionalCombine::kAdd;

    static QNetConfig checked(QNetConfig c) {
        c.validate();
        return c;
    }

    void validate() const {
        if (n_actions <= 0) throw ConfigError("n_actions must be positive");
        if (in_channels <= 0) throw ConfigError("in_channels must be positive");
        attn.validate();
    }

    /// Width of the encoder stream; concat mode doubles it.
    int64_t encoder_dim() const {
        return positional_combine == PositionalCombine::kConcat ? 2 * attn.d_model : attn.d_model;
    }
};

/// Shared convolutional feature extractor: 32@8x8/4, 64@4x4/2, 64@3x3/1,
/// ReLU after each layer. 4x84x84 input yields 64x7x7 features.
template <typename T>
struct ConvBackbone {
    Parameter<T> k1, b1, k2, b2, k3, b3;

    ConvBackbone(const std::string& prefix, int64_t in_channels, RngState& rng) {
        auto conv = [&](Parameter<T>& k, Parameter<T>& b, const std::string& name, int64_t c_out,
                        int64_t c_in, int64_t ksz) {
            k = {prefix + name + ".kernel",
                 fan_in_uniform<T>({c_out, c_in, ksz, ksz}, c_in * ksz * ksz, rng)};
            b = {prefix + name + ".bias", Tensor<T>::zeros({c_out})};
        };
        conv(k1, b1, "conv1", 32, in_channels, 8);
        conv(k2, b2, "conv2", 64, 32, 4);
        conv(k3, b3, "conv3", 64, 64, 3);
    }

    Var<T> forward(const Var<T>& obs) {
        Var<T> h = relu(conv2d(obs, leaf(k1), leaf(b1), 4));
        h = relu(conv2d(h, leaf(k2), leaf(b2), 2));
        return relu(conv2d(h, leaf(k3), leaf(b3), 1));
    }

    ParamRefs<T> parameters() { return {&k1, &b1, &k2, &b2, &k3, &b3}; }
};

namespace detail {

template <typename T>
inline void expect_stage(const char* stage, const Var<T>& v, const Shape& want) {
    if (v.shape() != want)
        throw ShapeError(std::string("stage '") + stage + "' produced " + shape_str(v.shape()) +
                         ", expected " + shape_str(want));
}

template <typename T>
inline void require_obs(const Var<T>& obs, int64_t in_channels) {
    const Shape& s = obs.shape();
    if (s.size() != 4 || s[1] != in_channels || s[2] != 84 || s[3] != 84)
        throw ShapeError("observation batch must be [B x " + std::to_string(in_channels) +
                         " x 84 x 84], got " + shape_str(s));
}

}  // namespace detail

/// Nature-DQN control: backbone -> flatten -> 512 ReLU -> n_actions.
template <typename T>
struct BaselineQNet {
    QNetConfig cfg;
    ConvBackbone<T> backbone;
    Parameter<T> fc1_w, fc1_b, head_w, head_b;

    BaselineQNet(QNetConfig config, RngState& rng)
        : cfg(QNetConfig::checked(std::move(config))),
          backbone("backbone.", cfg.in_channels, rng) {
        fc1_w = {"fc1.weight", fan_in_uniform<T>({512, 3136}, 3136, rng)};
        fc1_b = {"fc1.bias", Tensor<T>::zeros({512})};
        head_w = {"head.weight", fan_in_uniform<T>({cfg.n_actions, 512}, 512, rng)};
        head_b = {"head.bias", Tensor<T>::zeros({cfg.n_actions})};
    }

    ParamRefs<T> parameters() {
        ParamRefs<T> p = backbone.parameters();
        for (Parameter<T>* q : {&fc1_w, &fc1_b, &head_w, &head_b}) p.push_back(q);
        return p;
    }

    Var<T> forward(const Var<T>& obs, RngState&, bool) {
        detail::require_obs(obs, cfg.in_channels);
        const int64_t b = obs.shape()[0];
        Var<T> f = backbone.forward(obs);
        detail::expect_stage("backbone", f, {b, 64, 7, 7});
        Var<T> flat = reshape(f, {b, 3136});
        Var<T> hidden = relu(linear(flat, leaf(fc1_w), leaf(fc1_b)));
        Var<T> q = linear(hidden, leaf(head_w), leaf(head_b));
        detail::expect_stage("q-head", q, {b, cfg.n_actions});
        return q;
    }
};

/// The attentive Q-network: backbone features become 49 tokens, joined by a
/// learned value token, run through a Linformer encoder; Q-values are read
/// from the value token through LayerNorm and a linear head.
template <typename T>
struct AttentiveQNet {
    QNetConfig cfg;
    attention::AttentionConfig enc_cfg;  // encoder-side config (d_model widened when concat)
    ConvBackbone<T> backbone;
    Parameter<T> tok_w, tok_b;          // token projection 64 -> d_model
    Parameter<T> pos;                   // [seq_len x d_model]
    Parameter<T> value_token;           // [1 x d_model]
    std::vector<attention::EncoderLayerParams<T>> layers;
    Parameter<T> head_ln_gain, head_ln_shift;
    Parameter<T> head_w, head_b;

    AttentiveQNet(QNetConfig config, RngState& rng)
        : cfg(QNetConfig::checked(std::move(config))),
          enc_cfg(cfg.attn),
          backbone("backbone.", cfg.in_channels, rng) {
        enc_cfg.d_model = cfg.encoder_dim();
        const int64_t d = cfg.attn.d_model;
        const int64_t s = cfg.attn.seq_len;
        tok_w = {"token_proj.weight", fan_in_uniform<T>({d, 64}, 64, rng)};
        tok_b = {"token_proj.bias", Tensor<T>::zeros({d})};
        pos = {"pos_embedding", Tensor<T>::normal({s, d}, rng, T(0), T(0.02))};
        value_token = {"value_token", Tensor<T>::normal({1, d}, rng, T(0), T(0.02))};
        layers.reserve(static_cast<size_t>(enc_cfg.n_layers));
        for (int64_t i = 0; i < enc_cfg.n_layers; ++i)
            layers.emplace_back(enc_cfg, "encoder." + std::to_string(i) + ".", rng);
        head_ln_gain = {"head_ln.gain", Tensor<T>::ones({enc_cfg.d_model})};
        head_ln_shift = {"head_ln.shift", Tensor<T>::zeros({enc_cfg.d_model})};
        head_w = {"head.weight", fan_in_uniform<T>({cfg.n_actions, enc_cfg.d_model},
                                                   enc_cfg.d_model, rng)};
        head_b = {"head.bias", Tensor<T>::zeros({cfg.n_actions})};
    }

    ParamRefs<T> parameters() {
        ParamRefs<T> p = backbone.parameters();
        for (Parameter<T>* q : {&tok_w, &tok_b, &pos, &value_token}) p.push_back(q);
        for (auto& layer : layers)
            for (Parameter<T>* q : layer.parameters()) p.push_back(q);
        for (Parameter<T>* q : {&head_ln_gain, &head_ln_shift, &head_w, &head_b}) p.push_back(q);
        return p;
    }

    Var<T> forward(const Var<T>& obs, RngState& rng, bool training) {
        detail::require_obs(obs, cfg.in_channels);
        Var<T> f = backbone.forward(obs);
        detail::expect_stage("backbone", f, {obs.shape()[0], 64, 7, 7});
        return forward_features(f, rng, training);
    }

    /// Everything downstream of the backbone; exposed so feature-level
    /// properties (e.g. spatial permutation of the 49 tokens) can be probed
    /// through the exact production path.
    Var<T> forward_features(const Var<T>& f, RngState& rng, bool training) {
        const int64_t b = f.shape()[0];
        const int64_t s = cfg.attn.seq_len;   // 50: 49 feature tokens + value token
        const int64_t d = cfg.attn.d_model;

        Var<T> tokens = tokenize(f);
        detail::expect_stage("tokenize", tokens, {b, 49, 64});
        Var<T> embedded = linear(tokens, leaf(tok_w), leaf(tok_b));
        detail::expect_stage("token-projection", embedded, {b, 49, d});

        Var<T> pos_table = leaf(pos);
        Var<T> feat_pos = slice_rows(pos_table, 0, s - 1);
        Var<T> value_pos = slice_rows(pos_table, s - 1, s);
        Var<T> vtok = leaf(value_token);
        Var<T> x, vrow;
        if (cfg.positional_combine == PositionalCombine::kAdd) {
            x = broadcast_add_rows(embedded, feat_pos);
            vrow = add(vtok, value_pos);
        } else {
            x = concat_cols_broadcast(embedded, feat_pos);
            Var<T> v3 = concat_cols_broadcast(reshape(vtok, {1, 1, d}), value_pos);
            vrow = reshape(v3, {1, 2 * d});
        }
        x = prepend_row(x, vrow);
        detail::expect_stage("token-sequence", x, {b, s, enc_cfg.d_model});

        x = attention::encoder_forward(x, layers, enc_cfg, rng, training);
        detail::expect_stage("encoder", x, {b, s, enc_cfg.d_model});

        Var<T> value = take_row(x, 0);
        detail::expect_stage("value-token", value, {b, enc_cfg.d_model});
        value = layernorm(value, leaf(head_ln_gain), leaf(head_ln_shift));
        Var<T> q = linear(value, leaf(head_w), leaf(head_b));
        detail::expect_stage("q-head", q, {b, cfg.n_actions});
        return q;
    }
};

template <typename T>
Var<T> baseline_forward(BaselineQNet<T>& net, const Var<T>& obs) {
    RngState unused(0);
    return net.forward(obs, unused, false);
}

template <typename T>
Var<T> attentive_forward(AttentiveQNet<T>& net, const Var<T>& obs, RngState& rng, bool training) {
    return net.forward(obs, rng, training);
}

template <typename Net>
int64_t parameter_count(Net& net) {
    return total_param_count(net.parameters());
}

/// Copy every online parameter value into the target network (deep copy;
/// later online updates leave the target untouched).
template <typename Net>
void sync_target(Net& online, Net& target) {
    auto a = online.parameters();
    auto b = target.parameters();
    if (a.size() != b.size())
        throw ConfigError("sync_target: parameter count mismatch (" + std::to_string(a.size()) +
                          " vs " + std::to_string(b.size()) + ")");
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i]->name != b[i]->name || !(a[i]->value.shape() == b[i]->value.shape()))
            throw ConfigError("sync_target: architecture mismatch at '" + a[i]->name + "' vs '" +
                              b[i]->name + "'");
        b[i]->value = a[i]->value.clone();
    }
}

/// Human-readable parameter table: one line per tensor plus a total.
template <typename Net>
std::string describe_parameters(Net& net) {
    std::ostringstream out;
    auto params = net.parameters();
    for (auto* p : params)
        out << p->name << "  " << shape_str(p->value.shape()) << "  " << p->numel() << "\n";
    out << "total  " << total_param_count(params) << "\n";
    return out.str();
}

}  // namespace qattn::nets
