#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <vector>

#include "qattn/adam.hpp"
#include "qattn/checkpoint.hpp"
#include "qattn/conv.hpp"
#include "qattn/ops.hpp"

using namespace qattn;

namespace {

Tensor<double> random_tensor(Shape shape, RngState& rng, double lo = -1.0, double hi = 1.0) {
    return Tensor<double>::uniform(std::move(shape), rng, lo, hi);
}

// Plain triple loop, the reference for the GEMM-backed matmul.
Tensor<double> matmul_oracle(const Tensor<double>& a, const Tensor<double>& b) {
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<double> out({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int64_t t = 0; t < k; ++t) acc += a[i * k + t] * b[t * n + j];
            out[i * n + j] = acc;
        }
    return out;
}

}  // namespace

TEST(Tensor, BasicsAndViews) {
    Tensor<float> t({2, 3});
    EXPECT_EQ(t.numel(), 6);
    t.at({1, 2}) = 5.0f;
    EXPECT_FLOAT_EQ(t[5], 5.0f);

    Tensor<float> v = t.reshaped({3, 2});
    v[0] = 9.0f;
    EXPECT_FLOAT_EQ(t[0], 9.0f);  // views alias
    Tensor<float> c = t.clone();
    c[0] = 1.0f;
    EXPECT_FLOAT_EQ(t[0], 9.0f);  // clones do not

    EXPECT_THROW(t.reshaped({4, 2}), ShapeError);
    EXPECT_THROW(Tensor<float>({2, 0}), ShapeError);
    EXPECT_THROW(Tensor<float>({-1}), ShapeError);

    Tensor<double> d = t.cast<double>();
    EXPECT_DOUBLE_EQ(d[0], 9.0);
}

TEST(Rng, DeterministicStreams) {
    RngState a(42), b(42);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u32(), b.next_u32());

    RngState c(42), d(43);
    int diff = 0;
    for (int i = 0; i < 64; ++i) diff += c.next_u32() != d.next_u32();
    EXPECT_GT(diff, 60);

    RngState root(7);
    RngState s1 = root.split(1), s1b = root.split(1), s2 = root.split(2);
    EXPECT_EQ(s1.next_u64(), s1b.next_u64());
    EXPECT_NE(s1.next_u64(), s2.next_u64());
}

TEST(Rng, UniformAndIntRanges) {
    RngState rng(123);
    for (int i = 0; i < 10000; ++i) {
        const double u = rng.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
    }
    std::vector<int> hits(7, 0);
    for (int i = 0; i < 70000; ++i) {
        const int64_t k = rng.uniform_int(7);
        ASSERT_GE(k, 0);
        ASSERT_LT(k, 7);
        ++hits[static_cast<size_t>(k)];
    }
    for (int h : hits) EXPECT_NEAR(h, 10000, 500);
}

TEST(Rng, NormalMoments) {
    RngState rng(5);
    double sum = 0.0, sq = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double z = rng.normal();
        sum += z;
        sq += z * z;
    }
    EXPECT_NEAR(sum / n, 0.0, 0.01);
    EXPECT_NEAR(sq / n, 1.0, 0.02);
}

TEST(Matmul, MatchesTripleLoop) {
    RngState rng(11);
    for (auto [m, k, n] : {std::tuple<int64_t, int64_t, int64_t>{2, 3, 4},
                           {5, 7, 3},
                           {1, 1, 1},
                           {8, 16, 8}}) {
        Tensor<double> a = random_tensor({m, k}, rng);
        Tensor<double> b = random_tensor({k, n}, rng);
        Tensor<double> want = matmul_oracle(a, b);
        Tensor<double> got = matmul(Var<double>(a), Var<double>(b)).value();
        ASSERT_EQ(got.shape(), want.shape());
        for (int64_t i = 0; i < want.numel(); ++i) ASSERT_NEAR(got[i], want[i], 1e-12);
    }
    EXPECT_THROW(matmul(Var<double>(random_tensor({2, 3}, rng)),
                        Var<double>(random_tensor({4, 2}, rng))),
                 ShapeError);
}

TEST(Linear, MatchesLoopWithLeadingDims) {
    RngState rng(12);
    Tensor<double> x = random_tensor({2, 3, 6}, rng);
    Tensor<double> w = random_tensor({5, 6}, rng);
    Tensor<double> b = random_tensor({5}, rng);
    Tensor<double> got = linear(Var<double>(x), Var<double>(w), Var<double>(b)).value();
    ASSERT_EQ(got.shape(), (Shape{2, 3, 5}));
    for (int64_t r = 0; r < 6; ++r)
        for (int64_t o = 0; o < 5; ++o) {
            double acc = b[o];
            for (int64_t i = 0; i < 6; ++i) acc += x[r * 6 + i] * w[o * 6 + i];
            ASSERT_NEAR(got[r * 5 + o], acc, 1e-12);
        }
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
    RngState rng(13);
    Tensor<double> x = random_tensor({4, 9}, rng, -3.0, 3.0);
    Tensor<double> y = softmax(Var<double>(x)).value();
    for (int64_t r = 0; r < 4; ++r) {
        double s = 0.0;
        for (int64_t c = 0; c < 9; ++c) {
            ASSERT_GT(y[r * 9 + c], 0.0);
            s += y[r * 9 + c];
        }
        ASSERT_NEAR(s, 1.0, 1e-12);
    }

    Tensor<double> shifted = x.clone();
    for (int64_t i = 0; i < shifted.numel(); ++i) shifted[i] += 17.5;
    Tensor<double> y2 = softmax(Var<double>(shifted)).value();
    for (int64_t i = 0; i < y.numel(); ++i) ASSERT_NEAR(y[i], y2[i], 1e-12);
}

TEST(Softmax, SaturatesWithoutOverflow) {
    Tensor<double> x({1, 3});
    x[0] = 1000.0;
    x[1] = 0.0;
    x[2] = -1000.0;
    Tensor<double> y = softmax(Var<double>(x)).value();
    EXPECT_NEAR(y[0], 1.0, 1e-12);
    EXPECT_NEAR(y[1], 0.0, 1e-12);
    EXPECT_NEAR(y[2], 0.0, 1e-12);
    EXPECT_TRUE(y.all_finite());
}

TEST(Layernorm, NormalizesThenAffines) {
    RngState rng(14);
    const int64_t d = 32;
    Tensor<double> x = random_tensor({5, d}, rng, -4.0, 4.0);
    Tensor<double> gain = Tensor<double>::full({d}, 2.0);
    Tensor<double> shift = Tensor<double>::full({d}, 0.5);
    Tensor<double> y = layernorm(Var<double>(x), Var<double>(gain), Var<double>(shift)).value();
    for (int64_t r = 0; r < 5; ++r) {
        double mean = 0.0, var = 0.0;
        for (int64_t c = 0; c < d; ++c) mean += y[r * d + c];
        mean /= d;
        for (int64_t c = 0; c < d; ++c) {
            const double e = y[r * d + c] - mean;
            var += e * e;
        }
        var /= d;
        ASSERT_NEAR(mean, 0.5, 1e-9);  // shift
        ASSERT_NEAR(var, 4.0, 1e-4);   // gain^2, shrunk ~eps/sigma^2 by the 1e-5 stabilizer
    }
}

TEST(ReluGelu, PointwiseValues) {
    Tensor<double> x({5});
    x[0] = -2.0;
    x[1] = -0.5;
    x[2] = 0.0;
    x[3] = 0.5;
    x[4] = 3.0;
    Tensor<double> r = relu(Var<double>(x)).value();
    EXPECT_DOUBLE_EQ(r[0], 0.0);
    EXPECT_DOUBLE_EQ(r[1], 0.0);
    EXPECT_DOUBLE_EQ(r[3], 0.5);

    Tensor<double> g = gelu(Var<double>(x)).value();
    for (int64_t i = 0; i < 5; ++i) {
        const double v = x[i];
        const double want =
            0.5 * v * (1.0 + std::tanh(0.7978845608028654 * (v + 0.044715 * v * v * v)));
        ASSERT_NEAR(g[i], want, 1e-15);
    }
    EXPECT_NEAR(g[2], 0.0, 1e-15);
    // Saturation: identity-ish for large positive, near zero for large negative.
    Tensor<double> big({2});
    big[0] = 8.0;
    big[1] = -8.0;
    Tensor<double> gb = gelu(Var<double>(big)).value();
    EXPECT_NEAR(gb[0], 8.0, 1e-9);
    EXPECT_NEAR(gb[1], 0.0, 1e-9);
}

TEST(Dropout, EvalIsIdentityTrainingMatchesRate) {
    RngState rng(21);
    Tensor<float> x = Tensor<float>::full({1000000}, 3.0f);

    Tensor<float> eval_out = dropout(Var<float>(x), 0.1, rng, false).value();
    for (int64_t i = 0; i < 100; ++i) ASSERT_FLOAT_EQ(eval_out[i], 3.0f);

    Tensor<float> train_out = dropout(Var<float>(x), 0.1, rng, true).value();
    int64_t zeros = 0;
    const float survivor = 3.0f / 0.9f;
    for (int64_t i = 0; i < train_out.numel(); ++i) {
        if (train_out[i] == 0.0f)
            ++zeros;
        else
            ASSERT_FLOAT_EQ(train_out[i], survivor);  // inverted scaling
    }
    const double frac = static_cast<double>(zeros) / static_cast<double>(x.numel());
    EXPECT_GE(frac, 0.098);
    EXPECT_LE(frac, 0.102);

    Tensor<float> keep_all = dropout(Var<float>(x), 0.0, rng, true).value();
    for (int64_t i = 0; i < 100; ++i) ASSERT_FLOAT_EQ(keep_all[i], 3.0f);

    EXPECT_THROW(dropout(Var<float>(x), 1.0, rng, true), ConfigError);
    EXPECT_THROW(dropout(Var<float>(x), -0.1, rng, true), ConfigError);
}

TEST(Huber, ClosedFormBothBranches) {
    auto loss_of = [](double pred, double target) {
        Tensor<double> p({1}), t({1});
        p[0] = pred;
        t[0] = target;
        return huber_loss(Var<double>(p), Var<double>(t)).value()[0];
    };
    EXPECT_NEAR(loss_of(0.3, 0.0), 0.5 * 0.09, 1e-15);        // quadratic region
    EXPECT_NEAR(loss_of(2.0, 0.0), 1.0 * (2.0 - 0.5), 1e-15);  // linear region
    EXPECT_NEAR(loss_of(-2.0, 0.0), 1.5, 1e-15);               // symmetric
    EXPECT_NEAR(loss_of(1.0, 1.0), 0.0, 1e-15);

    // Mean over the batch.
    Tensor<double> p({2}), t({2});
    p[0] = 0.3;
    p[1] = 2.0;
    t[0] = 0.0;
    t[1] = 0.0;
    EXPECT_NEAR(huber_loss(Var<double>(p), Var<double>(t)).value()[0], (0.045 + 1.5) / 2.0,
                1e-15);
}

TEST(GatherAndArgmax, IndexSemantics) {
    Tensor<double> q({3, 4});
    for (int64_t i = 0; i < 12; ++i) q[i] = static_cast<double>(i);
    Tensor<double> taken = gather_actions(Var<double>(q), {2, 0, 3}).value();
    ASSERT_EQ(taken.shape(), (Shape{3}));
    EXPECT_DOUBLE_EQ(taken[0], 2.0);
    EXPECT_DOUBLE_EQ(taken[1], 4.0);
    EXPECT_DOUBLE_EQ(taken[2], 11.0);
    EXPECT_THROW(gather_actions(Var<double>(q), {0, 4, 0}), InputError);

    Tensor<double> row({4});
    row[0] = 0.5;
    row[1] = 0.9;
    row[2] = 0.9;
    row[3] = 0.1;
    EXPECT_EQ(argmax(row.data(), 4), 1);  // tie broken by lowest index
    Tensor<double> m = rowwise_max(q);
    EXPECT_DOUBLE_EQ(m[0], 3.0);
    EXPECT_DOUBLE_EQ(m[2], 11.0);
}

TEST(Adam, MatchesReferenceUpdates) {
    // Hand-rolled double reference for a 2-element parameter over 5 steps.
    const double lr = 0.1, eps = 1e-8, b1 = 0.9, b2 = 0.999;
    std::vector<double> w = {1.0, -2.0}, m = {0.0, 0.0}, v = {0.0, 0.0};
    auto grad_at = [](double wi, int step) { return 0.5 * wi + 0.1 * step; };

    Parameter<double> p{"w", Tensor<double>({2})};
    p.value[0] = 1.0;
    p.value[1] = -2.0;
    Adam<double> opt({&p}, lr, eps, b1, b2);

    for (int step = 1; step <= 5; ++step) {
        for (int i = 0; i < 2; ++i) p.grad[i] = grad_at(p.value[i], step);
        opt.step();
        opt.zero_grads();
        for (int i = 0; i < 2; ++i) {
            const double g = grad_at(w[static_cast<size_t>(i)], step);
            m[i] = b1 * m[i] + (1 - b1) * g;
            v[i] = b2 * v[i] + (1 - b2) * g * g;
            const double mh = m[i] / (1 - std::pow(b1, step));
            const double vh = v[i] / (1 - std::pow(b2, step));
            w[i] -= lr * mh / (std::sqrt(vh) + eps);
            ASSERT_NEAR(p.value[i], w[i], 1e-12);
        }
    }
    EXPECT_EQ(opt.step_count(), 5);
}

TEST(Adam, GradClipReturnsPreClipNorm) {
    Parameter<double> p{"w", Tensor<double>({2})};
    Adam<double> opt({&p}, 0.1, 1e-8);
    p.grad[0] = 3.0;
    p.grad[1] = 4.0;
    const double norm = opt.clip_grad_norm(1.0);
    EXPECT_DOUBLE_EQ(norm, 5.0);
    EXPECT_NEAR(p.grad[0], 0.6, 1e-12);
    EXPECT_NEAR(p.grad[1], 0.8, 1e-12);

    p.grad[0] = 0.3;
    p.grad[1] = 0.4;
    EXPECT_DOUBLE_EQ(opt.clip_grad_norm(1.0), 0.5);  // under the cap: untouched
    EXPECT_DOUBLE_EQ(p.grad[0], 0.3);
}

TEST(Conv2d, MatchesNestedLoopOracle) {
    RngState rng(31);
    for (int64_t stride : {1, 2, 4}) {
        const int64_t b = 2, cin = 3, h = 13, w = 11, cout = 4, kh = 4, kw = 3;
        if ((h - kh) % stride != 0 || (w - kw) % stride != 0) continue;
        Tensor<double> x = random_tensor({b, cin, h, w}, rng);
        Tensor<double> k = random_tensor({cout, cin, kh, kw}, rng);
        Tensor<double> bias = random_tensor({cout}, rng);
        Tensor<double> got =
            conv2d(Var<double>(x), Var<double>(k), Var<double>(bias), stride).value();
        const int64_t oh = (h - kh) / stride + 1, ow = (w - kw) / stride + 1;
        ASSERT_EQ(got.shape(), (Shape{b, cout, oh, ow}));
        for (int64_t n = 0; n < b; ++n)
            for (int64_t co = 0; co < cout; ++co)
                for (int64_t oy = 0; oy < oh; ++oy)
                    for (int64_t ox = 0; ox < ow; ++ox) {
                        double acc = bias[co];
                        for (int64_t ci = 0; ci < cin; ++ci)
                            for (int64_t ky = 0; ky < kh; ++ky)
                                for (int64_t kx = 0; kx < kw; ++kx)
                                    acc += x[((n * cin + ci) * h + oy * stride + ky) * w +
                                             ox * stride + kx] *
                                           k[((co * cin + ci) * kh + ky) * kw + kx];
                        ASSERT_NEAR(got[((n * cout + co) * oh + oy) * ow + ox], acc, 1e-11)
                            << "stride " << stride;
                    }
    }
}

TEST(Conv2d, StrideChainHitsDqnShapes) {
    RngState rng(32);
    Tensor<float> x = Tensor<float>::uniform({1, 4, 84, 84}, rng, 0.0f, 1.0f);
    Tensor<float> k1 = Tensor<float>::uniform({32, 4, 8, 8}, rng, -0.1f, 0.1f);
    Tensor<float> k2 = Tensor<float>::uniform({64, 32, 4, 4}, rng, -0.1f, 0.1f);
    Tensor<float> k3 = Tensor<float>::uniform({64, 64, 3, 3}, rng, -0.1f, 0.1f);
    Var<float> h1 = conv2d(Var<float>(x), Var<float>(k1), Var<float>(Tensor<float>::zeros({32})), 4);
    EXPECT_EQ(h1.shape(), (Shape{1, 32, 20, 20}));
    Var<float> h2 = conv2d(h1, Var<float>(k2), Var<float>(Tensor<float>::zeros({64})), 2);
    EXPECT_EQ(h2.shape(), (Shape{1, 64, 9, 9}));
    Var<float> h3 = conv2d(h2, Var<float>(k3), Var<float>(Tensor<float>::zeros({64})), 1);
    EXPECT_EQ(h3.shape(), (Shape{1, 64, 7, 7}));
}

TEST(Conv2d, RejectsBadGeometry) {
    RngState rng(33);
    Tensor<double> x = random_tensor({1, 3, 5, 5}, rng);
    EXPECT_THROW(conv2d(Var<double>(x), Var<double>(random_tensor({2, 4, 3, 3}, rng)),
                        Var<double>(random_tensor({2}, rng)), 1),
                 ShapeError);  // channel mismatch
    EXPECT_THROW(conv2d(Var<double>(x), Var<double>(random_tensor({2, 3, 6, 6}, rng)),
                        Var<double>(random_tensor({2}, rng)), 1),
                 ShapeError);  // kernel larger than input
    EXPECT_THROW(conv2d(Var<double>(x), Var<double>(random_tensor({2, 3, 3, 3}, rng)),
                        Var<double>(random_tensor({3}, rng)), 1),
                 ShapeError);  // bias length
    EXPECT_THROW(conv2d(Var<double>(x), Var<double>(random_tensor({2, 3, 3, 3}, rng)),
                        Var<double>(random_tensor({2}, rng)), 0),
                 ConfigError);  // stride
}

TEST(Tokenize, IndexIdentityAndRoundTrip) {
    RngState rng(34);
    const int64_t c = 6, h = 5, w = 4;
    Tensor<double> f = random_tensor({c, h, w}, rng);
    Tensor<double> tok = tokenize(Var<double>(f)).value();
    ASSERT_EQ(tok.shape(), (Shape{h * w, c}));
    for (int trial = 0; trial < 100; ++trial) {
        const int64_t ch = rng.uniform_int(c), r = rng.uniform_int(h), col = rng.uniform_int(w);
        ASSERT_DOUBLE_EQ(tok[(r * w + col) * c + ch], f[(ch * h + r) * w + col]);
    }
    Tensor<double> back = untokenize(tok, h, w);
    for (int64_t i = 0; i < f.numel(); ++i) ASSERT_DOUBLE_EQ(back[i], f[i]);

    // Channel-constant input: every token equals (0, 1, ..., c-1).
    Tensor<double> cc({c, h, w});
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < h * w; ++i) cc[ch * h * w + i] = static_cast<double>(ch);
    Tensor<double> cct = tokenize(Var<double>(cc)).value();
    for (int64_t tkn = 0; tkn < h * w; ++tkn)
        for (int64_t ch = 0; ch < c; ++ch)
            ASSERT_DOUBLE_EQ(cct[tkn * c + ch], static_cast<double>(ch));

    // Batched layout agrees with per-sample tokenize.
    Tensor<double> fb = random_tensor({2, c, h, w}, rng);
    Tensor<double> tb = tokenize(Var<double>(fb)).value();
    ASSERT_EQ(tb.shape(), (Shape{2, h * w, c}));
    for (int64_t ch = 0; ch < c; ++ch)
        ASSERT_DOUBLE_EQ(tb[(h * w * c) + 0 * c + ch], fb[c * h * w + ch * h * w]);
}

TEST(Checkpoint, RoundTripAndValidation) {
    RngState rng(35);
    Parameter<float> a{"layer.weight", Tensor<float>::uniform({3, 4}, rng)};
    Parameter<float> b{"layer.bias", Tensor<float>::uniform({4}, rng)};
    const std::string path = ::testing::TempDir() + "ckpt_roundtrip.bin";
    save_checkpoint(path, ParamRefs<float>{&a, &b});

    Parameter<float> a2{"layer.weight", Tensor<float>::zeros({3, 4})};
    Parameter<float> b2{"layer.bias", Tensor<float>::zeros({4})};
    load_checkpoint(path, ParamRefs<float>{&a2, &b2});
    for (int64_t i = 0; i < a.value.numel(); ++i) ASSERT_EQ(a.value[i], a2.value[i]);
    for (int64_t i = 0; i < b.value.numel(); ++i) ASSERT_EQ(b.value[i], b2.value[i]);

    Parameter<float> wrong_name{"other.weight", Tensor<float>::zeros({3, 4})};
    EXPECT_THROW(load_checkpoint(path, ParamRefs<float>{&wrong_name, &b2}), ConfigError);
    Parameter<float> wrong_shape{"layer.weight", Tensor<float>::zeros({4, 3})};
    EXPECT_THROW(load_checkpoint(path, ParamRefs<float>{&wrong_shape, &b2}), ConfigError);

    // Truncated file detected.
    {
        std::FILE* f = std::fopen(path.c_str(), "rb");
        ASSERT_NE(f, nullptr);
        std::fseek(f, 0, SEEK_END);
        const long size = std::ftell(f);
        std::fseek(f, 0, SEEK_SET);
        std::vector<char> bytes(static_cast<size_t>(size));
        ASSERT_EQ(std::fread(bytes.data(), 1, bytes.size(), f), bytes.size());
        std::fclose(f);
        const std::string cut = ::testing::TempDir() + "ckpt_truncated.bin";
        f = std::fopen(cut.c_str(), "wb");
        std::fwrite(bytes.data(), 1, bytes.size() / 2, f);
        std::fclose(f);
        EXPECT_THROW(load_checkpoint(cut, ParamRefs<float>{&a2, &b2}), InputError);
    }
}
