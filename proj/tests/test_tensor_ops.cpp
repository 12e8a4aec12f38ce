#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "yoloface/ops.hpp"

using namespace yoloface;

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    Tensor t(s);
    for (float& v : t.data()) v = u(rng);
    return t;
}

// Direct 7-loop convolution in double precision.
Tensor naive_conv(const Tensor& x, const Tensor& w, const std::vector<float>& bias, int stride, int pad, int groups)
{
    const Shape xs = x.shape(), ws = w.shape();
    const std::int64_t ho = (xs.h + 2 * pad - ws.h) / stride + 1;
    const std::int64_t wo = (xs.w + 2 * pad - ws.w) / stride + 1;
    const std::int64_t cin_g = xs.c / groups, cout_g = ws.n / groups;
    Tensor out(Shape{xs.n, ws.n, ho, wo});
    for (std::int64_t n = 0; n < xs.n; ++n)
        for (std::int64_t o = 0; o < ws.n; ++o)
            for (std::int64_t oy = 0; oy < ho; ++oy)
                for (std::int64_t ox = 0; ox < wo; ++ox) {
                    double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(o)];
                    const std::int64_t g = o / cout_g;
                    for (std::int64_t c = 0; c < cin_g; ++c)
                        for (std::int64_t ky = 0; ky < ws.h; ++ky)
                            for (std::int64_t kx = 0; kx < ws.w; ++kx) {
                                const std::int64_t iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                                if (iy < 0 || ix < 0 || iy >= xs.h || ix >= xs.w) continue;
                                acc += static_cast<double>(x.at(n, g * cin_g + c, iy, ix)) * w.at(o, c, ky, kx);
                            }
                    out.at(n, o, oy, ox) = static_cast<float>(acc);
                }
    return out;
}

} // namespace

TEST(Tensor, RejectsBadShapes)
{
    EXPECT_THROW(Tensor(Shape{0, 1, 1, 1}), ShapeError);
    EXPECT_THROW(Tensor(Shape{1, 1, 2, 2}, std::vector<float>(3)), ShapeError);
    Tensor t(Shape{1, 2, 3, 4}, 1.5f);
    EXPECT_EQ(t.shape().numel(), 24);
    EXPECT_FLOAT_EQ(t.at(0, 1, 2, 3), 1.5f);
}

TEST(Tensor, RequireFiniteNamesOperation)
{
    Tensor t(Shape{1, 1, 1, 2});
    t.data()[1] = std::nanf("");
    try {
        require_finite(t, "myop");
        FAIL();
    } catch (const NonFiniteError& e) {
        EXPECT_NE(std::string(e.what()).find("myop"), std::string::npos);
    }
}

struct ConvCase {
    int cin, cout, k, stride, pad, groups, h, w;
};

class ConvOracle : public ::testing::TestWithParam<ConvCase> {};

TEST_P(ConvOracle, MatchesDirectLoops)
{
    const auto p = GetParam();
    const Tensor x = random_tensor({2, p.cin, p.h, p.w}, 11);
    const Tensor w = random_tensor({p.cout, p.cin / p.groups, p.k, p.k}, 12);
    std::vector<float> bias(static_cast<std::size_t>(p.cout));
    for (std::size_t i = 0; i < bias.size(); ++i) bias[i] = 0.1f * static_cast<float>(i);
    const Tensor got = conv2d(x, w, bias, p.stride, p.pad, p.groups);
    const Tensor want = naive_conv(x, w, bias, p.stride, p.pad, p.groups);
    ASSERT_EQ(got.shape(), want.shape());
    EXPECT_LT(max_abs_diff(got, want), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Shapes, ConvOracle,
                         ::testing::Values(ConvCase{3, 8, 3, 1, 1, 1, 9, 7}, ConvCase{4, 6, 1, 1, 0, 1, 5, 5},
                                           ConvCase{4, 6, 3, 2, 1, 1, 8, 8}, ConvCase{8, 8, 3, 1, 1, 8, 6, 5},
                                           ConvCase{8, 8, 3, 2, 1, 8, 7, 7}, ConvCase{6, 4, 3, 1, 1, 2, 5, 6},
                                           ConvCase{2, 3, 5, 1, 2, 1, 6, 6}, ConvCase{3, 5, 1, 2, 0, 1, 7, 7}));

TEST(Conv, ShapeErrors)
{
    const Tensor x(Shape{1, 3, 4, 4});
    EXPECT_THROW(conv2d(x, Tensor(Shape{4, 2, 3, 3}), 1, 1), ShapeError);
    EXPECT_THROW(conv2d(x, Tensor(Shape{4, 3, 7, 7}), 1, 0), ShapeError);
    const std::vector<float> bias(2);
    EXPECT_THROW(conv2d(x, Tensor(Shape{4, 3, 1, 1}), bias, 1, 0), ShapeError);
}

TEST(BatchNorm, FoldingMatchesConvThenBn)
{
    const Tensor x = random_tensor({1, 4, 6, 6}, 3);
    const Tensor w = random_tensor({5, 4, 3, 3}, 4);
    BatchNorm bn;
    bn.gamma = {1.5f, 0.5f, -1.0f, 2.0f, 1.0f};
    bn.beta = {0.1f, -0.2f, 0.3f, 0.0f, 1.0f};
    bn.mean = {0.2f, 0.0f, -0.1f, 0.5f, -0.3f};
    bn.var = {1.0f, 0.25f, 4.0f, 0.5f, 2.0f};
    bn.eps = 1e-3f;
    const Tensor reference = batchnorm_apply(conv2d(x, w, 1, 1), bn);
    const auto f = fold_batchnorm(w, {}, bn);
    EXPECT_LT(max_abs_diff(conv2d(x, f.weight, f.bias, 1, 1), reference), 1e-5);
}

TEST(BatchNorm, RejectsNegativeVariance)
{
    BatchNorm bn = BatchNorm::identity(2);
    bn.var[1] = -1.0f;
    EXPECT_THROW(batchnorm_apply(Tensor(Shape{1, 2, 1, 1}), bn), Error);
}

TEST(Activation, SiluValues)
{
    EXPECT_FLOAT_EQ(silu_scalar(0.0f), 0.0f);
    EXPECT_NEAR(silu_scalar(1.0f), 1.0 / (1.0 + std::exp(-1.0)), 1e-7);
    EXPECT_NEAR(silu_scalar(-20.0f), 0.0, 1e-7);
    EXPECT_NEAR(silu_scalar(20.0f), 20.0, 1e-5);
}

TEST(Pooling, MaxpoolIgnoresPadding)
{
    Tensor x(Shape{1, 1, 2, 2}, std::vector<float>{-4, -3, -2, -1});
    const Tensor y = maxpool(x, 3, 1, 1);
    EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
    for (float v : y.data()) EXPECT_FLOAT_EQ(v, -1.0f);
    EXPECT_THROW(maxpool(x, 3, 1, 2), ShapeError);
}

TEST(Resample, UpsampleNearest)
{
    Tensor x(Shape{1, 1, 1, 2}, std::vector<float>{1, 2});
    const Tensor y = upsample_nearest2x(x);
    EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 4}));
    EXPECT_EQ(std::vector<float>(y.data().begin(), y.data().end()), (std::vector<float>{1, 1, 2, 2, 1, 1, 2, 2}));
}

TEST(Channels, ConcatAndChunkInvert)
{
    const Tensor a = random_tensor({2, 3, 4, 5}, 1), b = random_tensor({2, 3, 4, 5}, 2);
    const Tensor c = concat_channels({&a, &b});
    EXPECT_EQ(c.shape(), (Shape{2, 6, 4, 5}));
    const auto [l, r] = chunk2_channels(c);
    EXPECT_EQ(l, a);
    EXPECT_EQ(r, b);
    const Tensor bad(Shape{2, 3, 4, 4});
    EXPECT_THROW(concat_channels({&a, &bad}), ShapeError);
}

TEST(Channels, ShuffleIsTransposeOfGroupMatrix)
{
    // 6 channels in 2 groups: [a0 a1 a2 | b0 b1 b2] -> [a0 b0 a1 b1 a2 b2]
    EXPECT_EQ(shuffle_permutation(6, 2), (std::vector<std::int64_t>{0, 3, 1, 4, 2, 5}));
    Tensor x(Shape{1, 4, 1, 1}, std::vector<float>{0, 1, 2, 3});
    const Tensor y = channel_shuffle(x, 2);
    EXPECT_EQ(std::vector<float>(y.data().begin(), y.data().end()), (std::vector<float>{0, 2, 1, 3}));
    EXPECT_EQ(channel_shuffle(channel_shuffle(x, 2), 2), x); // 2x2 transpose is an involution
}

TEST(Channels, SpaceToDepthOrder)
{
    Tensor x(Shape{1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4}); // [[1,2],[3,4]]
    const Tensor y = space_to_depth2(x);
    EXPECT_EQ(y.shape(), (Shape{1, 4, 1, 1}));
    // (even row, even col), (odd row, even col), (even row, odd col), (odd row, odd col)
    EXPECT_EQ(std::vector<float>(y.data().begin(), y.data().end()), (std::vector<float>{1, 3, 2, 4}));
}
