#include <cmath>

#include <gtest/gtest.h>

#include "produce/error.hpp"
#include "produce/rng.hpp"
#include "produce/tensor.hpp"
#include "support/oracles.hpp"

using namespace produce;

namespace {

struct Case {
    std::size_t h, w, c, cout, k, stride;
    bool same;
};

Case random_case(SplitMix64& rng) {
    Case c{};
    c.k = 1 + 2 * rng.below(3); // 1, 3, 5
    c.h = c.k + rng.below(9);
    c.w = c.k + rng.below(9);
    c.c = 1 + rng.below(5);
    c.cout = 1 + rng.below(6);
    c.stride = 1 + rng.below(3);
    c.same = rng.below(2) == 1;
    return c;
}

} // namespace

TEST(ConvExtent, ValidAndSame) {
    EXPECT_EQ(conv_output_extent(32, 3, 1, Padding::same), 32u);
    EXPECT_EQ(conv_output_extent(32, 3, 2, Padding::same), 16u);
    EXPECT_EQ(conv_output_extent(7, 3, 2, Padding::same), 4u);
    EXPECT_EQ(conv_output_extent(7, 3, 2, Padding::valid), 3u);
    EXPECT_EQ(conv_output_extent(5, 5, 1, Padding::valid), 1u);
    EXPECT_THROW(conv_output_extent(2, 3, 1, Padding::valid), InvalidArgument);
    EXPECT_THROW(conv_output_extent(4, 3, 0, Padding::same), InvalidArgument);
}

TEST(Conv2d, SingleTapIdentity) {
    const Tensor in({2, 2, 1}, {1, 2, 3, 4});
    const Tensor out = conv2d(in, ConvKernel::standard(1, 1, 1, 1, {1.0f}));
    EXPECT_EQ(out, in);
}

TEST(Conv2d, MatchesDirectOracleOnRandomCases) {
    SplitMix64 rng(101);
    for (int i = 0; i < 25; ++i) {
        const Case c = random_case(rng);
        const Tensor in = oracle::random_image(rng, c.h, c.w, c.c);
        const auto w = oracle::random_floats(rng, c.k * c.k * c.c * c.cout);
        const auto k = ConvKernel::standard(c.k, c.k, c.c, c.cout, w, c.stride, c.same ? Padding::same : Padding::valid);
        const Tensor got = conv2d(in, k);
        const Tensor want = oracle::conv_standard(in, w, c.k, c.k, c.cout, c.stride, c.same);
        ASSERT_EQ(got.shape(), want.shape()) << "case " << i;
        EXPECT_LE(oracle::max_abs_diff(got, want), 1e-6) << "case " << i;
    }
}

TEST(DepthwiseConv2d, MatchesDirectOracleOnRandomCases) {
    SplitMix64 rng(202);
    for (int i = 0; i < 25; ++i) {
        const Case c = random_case(rng);
        const Tensor in = oracle::random_image(rng, c.h, c.w, c.c);
        const auto w = oracle::random_floats(rng, c.k * c.k * c.c);
        const auto k = ConvKernel::depthwise(c.k, c.k, c.c, w, c.stride, c.same ? Padding::same : Padding::valid);
        const Tensor got = depthwise_conv2d(in, k);
        const Tensor want = oracle::conv_depthwise(in, w, c.k, c.k, c.stride, c.same);
        ASSERT_EQ(got.shape(), want.shape()) << "case " << i;
        EXPECT_LE(oracle::max_abs_diff(got, want), 1e-6) << "case " << i;
    }
}

TEST(PointwiseConv2d, MatchesDirectOracleOnRandomCases) {
    SplitMix64 rng(303);
    for (int i = 0; i < 25; ++i) {
        const Case c = random_case(rng);
        const Tensor in = oracle::random_image(rng, c.h, c.w, c.c);
        const auto w = oracle::random_floats(rng, c.c * c.cout);
        const Tensor got = pointwise_conv2d(in, ConvKernel::pointwise(c.c, c.cout, w));
        const Tensor want = oracle::conv_pointwise(in, w, c.cout);
        ASSERT_EQ(got.shape(), want.shape());
        EXPECT_LE(oracle::max_abs_diff(got, want), 1e-6) << "case " << i;
    }
}

TEST(DepthwiseConv2d, EqualsStandardConvWithBlockDiagonalKernel) {
    SplitMix64 rng(404);
    for (int i = 0; i < 10; ++i) {
        const Case c = random_case(rng);
        const Tensor in = oracle::random_image(rng, c.h, c.w, c.c);
        const auto dw = oracle::random_floats(rng, c.k * c.k * c.c);
        std::vector<float> full(c.k * c.k * c.c * c.c, 0.0f);
        for (std::size_t t = 0; t < c.k * c.k; ++t) {
            for (std::size_t ch = 0; ch < c.c; ++ch) {
                full[(t * c.c + ch) * c.c + ch] = dw[t * c.c + ch];
            }
        }
        const Padding pad = c.same ? Padding::same : Padding::valid;
        const Tensor a = depthwise_conv2d(in, ConvKernel::depthwise(c.k, c.k, c.c, dw, c.stride, pad));
        const Tensor b = conv2d(in, ConvKernel::standard(c.k, c.k, c.c, c.c, full, c.stride, pad));
        EXPECT_LE(oracle::max_abs_diff(a, b), 1e-6);
    }
}

TEST(SeparableConv, FactorizesAStandardConv) {
    // pointwise(depthwise(x)) == conv(x, W) with W[ky,kx,ci,co] = d[ky,kx,ci] * p[ci,co]
    SplitMix64 rng(505);
    for (int i = 0; i < 10; ++i) {
        const Case c = random_case(rng);
        const Tensor in = oracle::random_image(rng, c.h, c.w, c.c);
        const auto d = oracle::random_floats(rng, c.k * c.k * c.c);
        const auto p = oracle::random_floats(rng, c.c * c.cout);
        std::vector<float> composed(c.k * c.k * c.c * c.cout);
        for (std::size_t t = 0; t < c.k * c.k; ++t) {
            for (std::size_t ci = 0; ci < c.c; ++ci) {
                for (std::size_t co = 0; co < c.cout; ++co) {
                    composed[(t * c.c + ci) * c.cout + co] = d[t * c.c + ci] * p[ci * c.cout + co];
                }
            }
        }
        const Padding pad = c.same ? Padding::same : Padding::valid;
        const Tensor sep = pointwise_conv2d(depthwise_conv2d(in, ConvKernel::depthwise(c.k, c.k, c.c, d, c.stride, pad)),
                                            ConvKernel::pointwise(c.c, c.cout, p));
        const Tensor full = conv2d(in, ConvKernel::standard(c.k, c.k, c.c, c.cout, composed, c.stride, pad));
        EXPECT_LE(oracle::max_abs_diff(sep, full), 1e-5);
    }
}

TEST(Conv2d, CounterCountsEveryTap) {
    const Tensor in({5, 5, 2});
    OpCounter counter;
    conv2d(in, ConvKernel::standard(3, 3, 2, 4, std::vector<float>(72, 0.5f), 2, Padding::same), &counter);
    EXPECT_EQ(counter.mult_adds, 3u * 3u * 3u * 3u * 2u * 4u);
    OpCounter dw;
    depthwise_conv2d(in, ConvKernel::depthwise(3, 3, 2, std::vector<float>(18, 1.0f), 1, Padding::valid), &dw);
    EXPECT_EQ(dw.mult_adds, 3u * 3u * 3u * 3u * 2u);
}

TEST(Conv2d, RejectsMismatchedChannels) {
    const Tensor in({4, 4, 3});
    try {
        conv2d(in, ConvKernel::standard(3, 3, 2, 1, std::vector<float>(18, 0.0f)));
        FAIL() << "expected InvalidArgument";
    } catch (const InvalidArgument& e) {
        EXPECT_NE(std::string(e.what()).find("channels"), std::string::npos);
    }
    EXPECT_THROW(conv2d(in, ConvKernel::standard(3, 3, 3, 1, std::vector<float>(5, 0.0f))), InvalidArgument);
    EXPECT_THROW(conv2d(in, ConvKernel::depthwise(3, 3, 3, std::vector<float>(27, 0.0f))), InvalidArgument);
    EXPECT_THROW(pointwise_conv2d(in, ConvKernel::standard(3, 3, 3, 1, std::vector<float>(27, 0.0f))), InvalidArgument);
}

TEST(Activations, ReluPoolDenseSoftmax) {
    const Tensor t({1, 2, 2}, {-1, 2, 3, -4});
    EXPECT_EQ(relu(t), Tensor({1, 2, 2}, {0, 2, 3, 0}));
    const Tensor pooled = global_avg_pool(Tensor({2, 1, 2}, {1, 2, 3, 6}));
    EXPECT_EQ(pooled, Tensor::vector({2, 4}));

    const Matrix w(2, 3, {1, 0, 0, 0, 1, 1});
    OpCounter ops;
    const Tensor y = dense(Tensor::vector({1, 2, 3}), w, Tensor::vector({0.5f, -1}), &ops);
    EXPECT_EQ(y, Tensor::vector({1.5f, 4}));
    EXPECT_EQ(ops.mult_adds, 6u);

    const Tensor p = softmax(Tensor::vector({1000, 1000, 1000}));
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_NEAR(p[i], 1.0 / 3.0, 1e-7);
    }
    const Tensor q = softmax(Tensor::vector({0, std::log(3.0f)}));
    EXPECT_NEAR(q[0], 0.25, 1e-7);
    EXPECT_NEAR(q[1], 0.75, 1e-7);
}

TEST(Softmax, SumsToOneOnRandomLogits) {
    SplitMix64 rng(606);
    for (int i = 0; i < 50; ++i) {
        const auto z = oracle::random_floats(rng, 1 + rng.below(12), -50, 50);
        const Tensor p = softmax(Tensor::vector(z));
        double s = 0;
        for (float v : p.data()) {
            EXPECT_GE(v, 0.0f);
            s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Conv2d, OnesIdentityAndZeroKernel) {
    const Tensor ones({3, 3, 1}, std::vector<float>(9, 1.0f));
    EXPECT_EQ(conv2d(ones, ConvKernel::standard(1, 1, 1, 1, {1.0f})), ones);
    SplitMix64 rng(7);
    const Tensor in = oracle::random_image(rng, 6, 5, 3);
    const Tensor out = conv2d(in, ConvKernel::standard(3, 3, 3, 2, std::vector<float>(54, 0.0f), 2, Padding::valid));
    EXPECT_EQ(out, Tensor({2, 2, 2}));
}

TEST(DepthwiseConv2d, PerChannelScalingAndZeroInput) {
    const Tensor in({1, 2, 2}, {1, 1, 5, -2});
    EXPECT_EQ(depthwise_conv2d(in, ConvKernel::depthwise(1, 1, 2, {2, 3})), Tensor({1, 2, 2}, {2, 3, 10, -6}));
    const Tensor zeros({4, 4, 3});
    SplitMix64 rng(8);
    EXPECT_EQ(depthwise_conv2d(zeros, ConvKernel::depthwise(3, 3, 3, oracle::random_floats(rng, 27), 1, Padding::same)),
              zeros);
}

TEST(PointwiseConv2d, IdentityAndChannelSum) {
    SplitMix64 rng(9);
    const Tensor in = oracle::random_image(rng, 4, 3, 3);
    EXPECT_EQ(pointwise_conv2d(in, ConvKernel::pointwise(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1})), in);
    const Tensor sum = pointwise_conv2d(in, ConvKernel::pointwise(3, 1, {1, 1, 1}));
    for (std::size_t y = 0; y < 4; ++y) {
        for (std::size_t x = 0; x < 3; ++x) {
            const double want = static_cast<double>(in.at(y, x, 0)) + in.at(y, x, 1) + in.at(y, x, 2);
            EXPECT_NEAR(sum.at(y, x, 0), want, 1e-6);
        }
    }
    // random case against conv2d with the same 1x1 kernel
    const auto w = oracle::random_floats(rng, 3 * 5);
    EXPECT_LE(oracle::max_abs_diff(pointwise_conv2d(in, ConvKernel::pointwise(3, 5, w)),
                                   conv2d(in, ConvKernel::standard(1, 1, 3, 5, w))),
              1e-6);
}

TEST(Conv2d, OutputShapesOverSizeGrid) {
    for (std::size_t h = 1; h <= 8; ++h) {
        for (std::size_t w = 1; w <= 8; ++w) {
            for (std::size_t k : {1u, 2u, 3u}) {
                for (std::size_t s : {1u, 2u, 3u}) {
                    const Tensor in({h, w, 2});
                    const auto same = ConvKernel::standard(k, k, 2, 3, std::vector<float>(k * k * 6, 1.0f), s, Padding::same);
                    const Tensor a = conv2d(in, same);
                    EXPECT_EQ(a.shape(), (std::vector<std::size_t>{(h + s - 1) / s, (w + s - 1) / s, 3}));
                    if (h >= k && w >= k) {
                        auto valid = same;
                        valid.padding = Padding::valid;
                        const Tensor b = depthwise_conv2d(in, ConvKernel::depthwise(k, k, 2, std::vector<float>(k * k * 2, 1.0f), s));
                        EXPECT_EQ(conv2d(in, valid).shape(),
                                  (std::vector<std::size_t>{(h - k) / s + 1, (w - k) / s + 1, 3}));
                        EXPECT_EQ(b.shape(), (std::vector<std::size_t>{(h - k) / s + 1, (w - k) / s + 1, 2}));
                    } else {
                        auto valid = same;
                        valid.padding = Padding::valid;
                        EXPECT_THROW(conv2d(in, valid), InvalidArgument);
                    }
                }
            }
        }
    }
}

TEST(Relu, IdempotentOnRandomInput) {
    EXPECT_EQ(relu(Tensor::vector({-1, 0, 2})), Tensor::vector({0, 0, 2}));
    SplitMix64 rng(10);
    for (int i = 0; i < 20; ++i) {
        const Tensor t = oracle::random_image(rng, 3, 4, 2);
        EXPECT_EQ(relu(relu(t)), relu(t));
    }
}

TEST(GlobalAvgPool, MatchesLoopOracle) {
    EXPECT_EQ(global_avg_pool(Tensor({1, 1, 1}, {7})), Tensor::vector({7}));
    EXPECT_EQ(global_avg_pool(Tensor({2, 2, 1}, {1, 2, 3, 4})), Tensor::vector({2.5f}));
    SplitMix64 rng(11);
    const Tensor t = oracle::random_image(rng, 5, 6, 4);
    const Tensor p = global_avg_pool(t);
    for (std::size_t c = 0; c < 4; ++c) {
        double s = 0;
        for (std::size_t y = 0; y < 5; ++y) {
            for (std::size_t x = 0; x < 6; ++x) {
                s += t.at(y, x, c);
            }
        }
        EXPECT_NEAR(p[c], s / 30.0, 1e-6);
    }
}

TEST(Dense, IdentityZeroAndLoopOracle) {
    const Tensor v = Tensor::vector({1, -2, 3});
    EXPECT_EQ(dense(v, Matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}), Tensor::vector({0, 0, 0})), v);
    EXPECT_EQ(dense(v, Matrix(2, 3), Tensor::vector({4, 5})), Tensor::vector({4, 5}));
    EXPECT_THROW(dense(v, Matrix(2, 4), Tensor::vector({0, 0})), InvalidArgument);
    EXPECT_THROW(dense(v, Matrix(2, 3), Tensor::vector({0})), InvalidArgument);

    SplitMix64 rng(12);
    const auto x = oracle::random_floats(rng, 9);
    const Matrix w(4, 9, oracle::random_floats(rng, 36));
    const auto b = oracle::random_floats(rng, 4);
    const Tensor y = dense(Tensor::vector(x), w, Tensor::vector(b));
    for (std::size_t k = 0; k < 4; ++k) {
        double s = b[k];
        for (std::size_t n = 0; n < 9; ++n) {
            s += static_cast<double>(w.at(k, n)) * x[n];
        }
        EXPECT_NEAR(y[k], s, 1e-6);
    }
}

TEST(Softmax, ShiftInvariant) {
    SplitMix64 rng(13);
    for (int i = 0; i < 20; ++i) {
        // multiples of 1/256 stay exact after adding 1000 in float
        std::vector<float> z(6);
        for (auto& v : z) {
            v = static_cast<float>(static_cast<double>(rng.below(2561)) / 256.0 - 5.0);
        }
        auto shifted = z;
        for (auto& v : shifted) {
            v += 1000.0f;
        }
        const Tensor a = softmax(Tensor::vector(z));
        const Tensor b = softmax(Tensor::vector(shifted));
        std::size_t arg_a = 0, arg_b = 0;
        for (std::size_t k = 0; k < 6; ++k) {
            EXPECT_NEAR(a[k], b[k], 1e-6);
            arg_a = a[k] > a[arg_a] ? k : arg_a;
            arg_b = b[k] > b[arg_b] ? k : arg_b;
        }
        EXPECT_EQ(arg_a, arg_b);
    }
    const Tensor u = softmax(Tensor::vector({2, 2, 2, 2}));
    for (std::size_t k = 0; k < 4; ++k) {
        EXPECT_NEAR(u[k], 0.25, 1e-7);
    }
}
