#include <gtest/gtest.h>

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <vector>

#include "qattn/checkpoint.hpp"
#include "qattn/gradcheck.hpp"
#include "qattn/qnet.hpp"
#include "testutil.hpp"

using namespace qattn;
using nets::AttentiveQNet;
using nets::BaselineQNet;
using nets::PositionalCombine;
using nets::QNetConfig;

namespace {

QNetConfig config_for(int64_t actions, double dropout = 0.1) {
    QNetConfig cfg;
    cfg.n_actions = actions;
    cfg.attn.dropout_rate = dropout;
    return cfg;
}

template <typename T>
Tensor<T> random_obs(int64_t batch, RngState& rng) {
    return Tensor<T>::uniform({batch, 4, 84, 84}, rng, T(0), T(1));
}

// Closed-form counts from the documented layer shapes, summed by hand rather
// than through parameters(), so the library total has an independent oracle.
int64_t conv_stack_count() {
    const int64_t conv1 = 32 * 4 * 8 * 8 + 32;
    const int64_t conv2 = 64 * 32 * 4 * 4 + 64;
    const int64_t conv3 = 64 * 64 * 3 * 3 + 64;
    return conv1 + conv2 + conv3;
}

int64_t baseline_count(int64_t actions) {
    const int64_t fc1 = 512 * 3136 + 512;
    const int64_t head = actions * 512 + actions;
    return conv_stack_count() + fc1 + head;
}

int64_t attentive_count(int64_t actions, int64_t d, int64_t d_enc, int64_t seq, int64_t k,
                        int64_t hidden, int64_t n_layers, bool tied) {
    const int64_t token_proj = d * 64 + d;
    const int64_t pos = seq * d;
    const int64_t value_token = d;
    const int64_t qkv = 3 * (d_enc * d_enc + d_enc);
    const int64_t proj_ef = (tied ? 1 : 2) * seq * k;
    const int64_t out = d_enc * d_enc + d_enc;
    const int64_t norms = 4 * d_enc;
    const int64_t mlp = (hidden * d_enc + hidden) + (d_enc * hidden + d_enc);
    const int64_t layer = qkv + proj_ef + out + norms + mlp;
    const int64_t head = 2 * d_enc + actions * d_enc + actions;
    return conv_stack_count() + token_proj + pos + value_token + n_layers * layer + head;
}

int64_t default_attentive_count(int64_t actions) {
    return attentive_count(actions, 128, 128, 50, 32, 512, 2, false);
}

}  // namespace

TEST(QNetConfig, ValidatesFields) {
    EXPECT_NO_THROW(config_for(6).validate());
    QNetConfig bad = config_for(0);
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = config_for(6);
    bad.in_channels = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = config_for(6);
    bad.attn.linformer_k = 51;  // > seq_len
    EXPECT_THROW(bad.validate(), ConfigError);

    EXPECT_EQ(config_for(6).encoder_dim(), 128);
    QNetConfig concat = config_for(6);
    concat.positional_combine = PositionalCombine::kConcat;
    EXPECT_EQ(concat.encoder_dim(), 256);

    EXPECT_STREQ(nets::to_string(PositionalCombine::kAdd), "add");
    EXPECT_STREQ(nets::to_string(PositionalCombine::kConcat), "concat");
    EXPECT_EQ(nets::positional_combine_from_string("concat"), PositionalCombine::kConcat);
    EXPECT_THROW(nets::positional_combine_from_string("sum"), ConfigError);
}

TEST(Forward, ShapeContract) {
    RngState rng(3);
    for (int64_t actions : {4, 6, 18}) {
        RngState init(10 + static_cast<uint64_t>(actions));
        AttentiveQNet<float> attn(config_for(actions), init);
        BaselineQNet<float> base(config_for(actions), init);
        for (int64_t batch : {1, 32}) {
            Tensor<float> obs = random_obs<float>(batch, rng);
            RngState fwd(0);
            Shape want{batch, actions};
            EXPECT_EQ(attn.forward(Var<float>(obs), fwd, false).shape(), want);
            EXPECT_EQ(nets::baseline_forward(base, Var<float>(obs)).shape(), want);
        }
    }
    // one large batch to exercise the batched kernels
    RngState init(2);
    AttentiveQNet<float> attn(config_for(6), init);
    Tensor<float> obs = random_obs<float>(256, rng);
    RngState fwd(0);
    EXPECT_EQ(attn.forward(Var<float>(obs), fwd, false).shape(), (Shape{256, 6}));
}

TEST(Forward, RejectsBadObservations) {
    RngState init(4);
    AttentiveQNet<float> attn(config_for(4), init);
    BaselineQNet<float> base(config_for(4), init);
    RngState rng(0), fwd(0);
    Tensor<float> wrong_channels = Tensor<float>::uniform({1, 3, 84, 84}, rng);
    Tensor<float> wrong_size = Tensor<float>::uniform({1, 4, 80, 84}, rng);
    Tensor<float> wrong_rank = Tensor<float>::uniform({4, 84, 84}, rng);
    EXPECT_THROW(attn.forward(Var<float>(wrong_channels), fwd, false), ShapeError);
    EXPECT_THROW(attn.forward(Var<float>(wrong_size), fwd, false), ShapeError);
    EXPECT_THROW(attn.forward(Var<float>(wrong_rank), fwd, false), ShapeError);
    EXPECT_THROW(nets::baseline_forward(base, Var<float>(wrong_channels)), ShapeError);
    EXPECT_THROW(nets::baseline_forward(base, Var<float>(wrong_rank)), ShapeError);
}

TEST(Forward, EvalDeterministicTrainingConsumesRng) {
    RngState init(5);
    AttentiveQNet<float> net(config_for(5), init);
    RngState rng(9);
    Tensor<float> obs = random_obs<float>(2, rng);

    RngState d1(17), d2(17), d3(17);
    Tensor<float> a = net.forward(Var<float>(obs), d1, false).value();
    Tensor<float> b = net.forward(Var<float>(obs), d2, false).value();
    for (int64_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a[i], b[i]) << i;

    // same rng state, training: identical; but different outcome than eval
    Tensor<float> c = net.forward(Var<float>(obs), d3, true).value();
    RngState d4(17);
    Tensor<float> d = net.forward(Var<float>(obs), d4, true).value();
    int64_t train_matches_eval = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        ASSERT_EQ(c[i], d[i]) << i;
        train_matches_eval += c[i] == a[i];
    }
    EXPECT_LT(train_matches_eval, a.numel());
}

TEST(Forward, BaselineZeroInputGivesZeroQ) {
    RngState init(6);
    BaselineQNet<float> net(config_for(7), init);
    Tensor<float> obs = Tensor<float>::zeros({3, 4, 84, 84});
    Tensor<float> q = nets::baseline_forward(net, Var<float>(obs)).value();
    for (int64_t i = 0; i < q.numel(); ++i) EXPECT_EQ(q[i], 0.0f) << i;
}

TEST(Forward, ValueTokenReadoutIsPermutationInvariantWithoutPositions) {
    RngState init(7);
    AttentiveQNet<float> net(config_for(6, 0.0), init);
    net.pos.value = Tensor<float>::zeros(net.pos.value.shape());

    RngState rng(40);
    RngState perm_rng(41);
    for (int input = 0; input < 5; ++input) {
        Tensor<float> obs = random_obs<float>(1, rng);
        RngState fwd(0);
        Tensor<float> features;
        {
            NoGradGuard guard;
            features = net.backbone.forward(Var<float>(obs)).value();
        }
        Tensor<float> base_q = net.forward_features(Var<float>(features), fwd, false).value();

        for (int trial = 0; trial < 20; ++trial) {
            std::vector<int64_t> perm(49);
            std::iota(perm.begin(), perm.end(), 0);
            for (int64_t i = 48; i > 0; --i)
                std::swap(perm[static_cast<size_t>(i)],
                          perm[static_cast<size_t>(perm_rng.uniform_int(i + 1))]);
            Tensor<float> shuffled = Tensor<float>::zeros(features.shape());
            for (int64_t ch = 0; ch < 64; ++ch)
                for (int64_t p = 0; p < 49; ++p)
                    shuffled.data()[ch * 49 + p] = features.data()[ch * 49 + perm[p]];
            RngState fwd2(0);
            Tensor<float> q = net.forward_features(Var<float>(shuffled), fwd2, false).value();
            for (int64_t i = 0; i < q.numel(); ++i)
                ASSERT_NEAR(q[i], base_q[i], 1e-5) << "input " << input << " trial " << trial;
        }
    }

    // negative control: with live positional embeddings a shuffle must matter
    RngState init2(8);
    AttentiveQNet<float> posnet(config_for(6, 0.0), init2);
    Tensor<float> obs = random_obs<float>(1, rng);
    Tensor<float> features;
    {
        NoGradGuard guard;
        features = posnet.backbone.forward(Var<float>(obs)).value();
    }
    Tensor<float> rolled = Tensor<float>::zeros(features.shape());
    for (int64_t ch = 0; ch < 64; ++ch)
        for (int64_t p = 0; p < 49; ++p)
            rolled.data()[ch * 49 + p] = features.data()[ch * 49 + (p + 1) % 49];
    RngState fa(0), fb(0);
    Tensor<float> qa = posnet.forward_features(Var<float>(features), fa, false).value();
    Tensor<float> qb = posnet.forward_features(Var<float>(rolled), fb, false).value();
    float diff = 0;
    for (int64_t i = 0; i < qa.numel(); ++i) diff = std::max(diff, std::fabs(qa[i] - qb[i]));
    EXPECT_GT(diff, 1e-4f);
}

TEST(Parameters, CountsMatchClosedForms) {
    for (int64_t actions = 1; actions <= 18; ++actions) {
        RngState init(100 + static_cast<uint64_t>(actions));
        AttentiveQNet<float> attn(config_for(actions), init);
        BaselineQNet<float> base(config_for(actions), init);
        const int64_t na = nets::parameter_count(attn);
        const int64_t nb = nets::parameter_count(base);
        EXPECT_EQ(na, default_attentive_count(actions)) << actions;
        EXPECT_EQ(nb, baseline_count(actions)) << actions;
        EXPECT_LT(na, nb) << actions;
    }
    // per-action head increments
    EXPECT_EQ(baseline_count(7) - baseline_count(6), 513);
    EXPECT_EQ(default_attentive_count(7) - default_attentive_count(6), 129);
}

TEST(Parameters, TiedAndConcatVariantCounts) {
    QNetConfig tied_cfg = config_for(6);
    tied_cfg.attn.tie_projections = true;
    RngState init(11);
    AttentiveQNet<float> tied(tied_cfg, init);
    EXPECT_EQ(nets::parameter_count(tied), attentive_count(6, 128, 128, 50, 32, 512, 2, true));
    EXPECT_EQ(default_attentive_count(6) - nets::parameter_count(tied), 2 * 50 * 32);

    QNetConfig concat_cfg = config_for(6);
    concat_cfg.positional_combine = PositionalCombine::kConcat;
    RngState init2(12);
    AttentiveQNet<float> concat(concat_cfg, init2);
    EXPECT_EQ(nets::parameter_count(concat), attentive_count(6, 128, 256, 50, 32, 512, 2, false));

    RngState rng(13), fwd(0);
    Tensor<float> obs = random_obs<float>(2, rng);
    EXPECT_EQ(concat.forward(Var<float>(obs), fwd, false).shape(), (Shape{2, 6}));
}

TEST(Parameters, EveryTensorReceivesGradient) {
    RngState init(14);
    AttentiveQNet<double> net(config_for(4, 0.0), init);
    RngState rng(15);
    Tensor<double> obs = random_obs<double>(4, rng);
    zero_grads(net.parameters());
    RngState fwd(0);
    Var<double> loss = sum(net.forward(Var<double>(obs), fwd, false));
    backward(loss);
    for (auto* p : net.parameters()) {
        double norm = 0;
        for (int64_t i = 0; i < p->grad.numel(); ++i) norm += std::fabs(p->grad.data()[i]);
        EXPECT_GT(norm, 0.0) << p->name;
    }
}

TEST(Checkpoint, RoundTripsThroughNets) {
    const std::string path = ::testing::TempDir() + "qnet_ckpt.bin";
    RngState init(16);
    AttentiveQNet<float> net(config_for(5), init);
    RngState rng(17), fwd(0);
    Tensor<float> obs = random_obs<float>(1, rng);
    Tensor<float> before = net.forward(Var<float>(obs), fwd, false).value();

    save_checkpoint(path, net.parameters());
    for (auto* p : net.parameters())
        for (int64_t i = 0; i < p->value.numel(); ++i) p->value.data()[i] += 0.25f;
    load_checkpoint(path, net.parameters());
    RngState fwd2(0);
    Tensor<float> after = net.forward(Var<float>(obs), fwd2, false).value();
    for (int64_t i = 0; i < before.numel(); ++i) ASSERT_EQ(before[i], after[i]) << i;

    RngState init2(18);
    AttentiveQNet<float> other_arch(config_for(6), init2);
    EXPECT_THROW(load_checkpoint(path, other_arch.parameters()), ConfigError);
    BaselineQNet<float> base(config_for(5), init2);
    EXPECT_THROW(load_checkpoint(path, base.parameters()), ConfigError);
    std::remove(path.c_str());
}

TEST(SyncTarget, DeepCopiesAndIsolates) {
    RngState a(19), b(20);
    AttentiveQNet<float> online(config_for(4), a);
    AttentiveQNet<float> target(config_for(4), b);
    nets::sync_target(online, target);

    RngState rng(21), f1(0), f2(0);
    Tensor<float> obs = random_obs<float>(1, rng);
    Tensor<float> qo = online.forward(Var<float>(obs), f1, false).value();
    Tensor<float> qt = target.forward(Var<float>(obs), f2, false).value();
    for (int64_t i = 0; i < qo.numel(); ++i) ASSERT_EQ(qo[i], qt[i]);

    for (auto* p : online.parameters())
        for (int64_t i = 0; i < p->value.numel(); ++i) p->value.data()[i] += 1.0f;
    RngState f3(0);
    Tensor<float> qt2 = target.forward(Var<float>(obs), f3, false).value();
    for (int64_t i = 0; i < qt.numel(); ++i) ASSERT_EQ(qt[i], qt2[i]);

    RngState c(22);
    AttentiveQNet<float> wrong(config_for(5), c);
    EXPECT_THROW(nets::sync_target(online, wrong), ConfigError);
}

TEST(Describe, ListsEveryParameterAndTotal) {
    RngState init(23);
    AttentiveQNet<float> net(config_for(6), init);
    const std::string text = nets::describe_parameters(net);
    for (auto* p : net.parameters())
        EXPECT_NE(text.find(p->name), std::string::npos) << p->name;
    EXPECT_NE(text.find("total  " + std::to_string(nets::parameter_count(net))),
              std::string::npos);
}

// Scalar Q-head outputs against central differences. Projections are re-drawn
// generically (pooling init parks the attention softmax at a near-stationary
// point whose vanishing q/k gradients sit below the oracle's error floor) and
// ReLU pre-activations are shifted clear of the probe window first.
TEST(FiniteDifference, ScalarHeadsBothArchitectures) {
    for (uint64_t seed = 1; seed <= 3; ++seed) {
        RngState init(seed);
        AttentiveQNet<double> attn(config_for(6, 0.0), init);
        for (auto& layer : attn.layers) {
            layer.key_proj.value =
                Tensor<double>::uniform(layer.key_proj.value.shape(), init, -0.3, 0.3);
            layer.val_proj.value =
                Tensor<double>::uniform(layer.val_proj.value.shape(), init, -0.3, 0.3);
        }
        BaselineQNet<double> base(config_for(6, 0.0), init);
        Tensor<double> obs = Tensor<double>::uniform({1, 4, 84, 84}, init, 0, 1);
        testutil::clear_relu_kinks(attn, obs, 2e-3);
        testutil::clear_relu_kinks(base, obs, 2e-3);

        RngState coords(seed * 977);
        auto check = [&](auto& net, const char* label) {
            auto f = [&]() {
                RngState fwd(0);
                Var<double> q = net.forward(Var<double>(obs), fwd, false);
                return gather_actions(q, std::vector<int64_t>{1});
            };
            auto params = net.parameters();
            for (size_t i = 0; i < params.size(); ++i) {
                RngState cr = coords.split(i + 1);
                const double rel = finite_difference_check<double>(f, {params[i]}, 1e-4, 4, &cr);
                ASSERT_LT(rel, 1e-4) << label << " " << params[i]->name << " seed " << seed;
            }
        };
        check(attn, "attentive");
        check(base, "baseline");
    }
}
