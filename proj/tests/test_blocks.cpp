#include <gtest/gtest.h>

#include <random>

#include "yoloface/blocks.hpp"

using namespace yoloface;

namespace {

// Random values for every role, BN statistics included; deterministic per tensor name.
std::vector<float> random_param(const ParamDecl& d)
{
    std::mt19937_64 rng(fnv1a64(d.name));
    std::uniform_real_distribution<float> u(-0.5f, 0.5f);
    std::vector<float> v(static_cast<std::size_t>(d.numel()));
    for (float& x : v) {
        x = u(rng);
        if (d.role == ParamRole::bn_var) x += 1.0f;
        if (d.role == ParamRole::bn_gamma) x += 1.0f;
    }
    return v;
}

Tensor random_input(Shape s, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    Tensor t(s);
    for (float& v : t.data()) v = u(rng);
    return t;
}

// Unfolded conv -> BN -> (SiLU), reading parameters straight from the source.
Tensor ref_conv_bn(const Tensor& x, ParamSource& src, const std::string& conv, const std::string& bn_prefix, int cin,
                   int cout, int k, int stride, int groups, bool act)
{
    const Tensor w(Shape{cout, cin / groups, k, k},
                   src.fetch({conv, {cout, cin / groups, k, k}, ParamRole::conv_weight, 1}));
    BatchNorm bn;
    bn.gamma = src.fetch({bn_prefix + ".weight", {cout}, ParamRole::bn_gamma, 1});
    bn.beta = src.fetch({bn_prefix + ".bias", {cout}, ParamRole::bn_beta, 1});
    bn.mean = src.fetch({bn_prefix + ".running_mean", {cout}, ParamRole::bn_mean, 1});
    bn.var = src.fetch({bn_prefix + ".running_var", {cout}, ParamRole::bn_var, 1});
    bn.eps = src.bn_eps();
    Tensor y = batchnorm_apply(conv2d(x, w, stride, k / 2, groups), bn);
    return act ? silu(y) : y;
}

Tensor ref_cbs(const Tensor& x, ParamSource& src, const std::string& p, int cin, int cout, int k, int s)
{
    return ref_conv_bn(x, src, p + ".conv.weight", p + ".bn", cin, cout, k, s, 1, true);
}

std::int64_t learnable(const std::vector<ParamDecl>& d)
{
    std::int64_t n = 0;
    for (const auto& x : d) {
        if (x.learnable()) n += x.numel();
    }
    return n;
}

std::int64_t cbs_params(std::int64_t cin, std::int64_t cout, std::int64_t k) { return cout * cin * k * k + 2 * cout; }

} // namespace

TEST(BlockSpec, Validation)
{
    EXPECT_THROW(BlockSpec::stem(3, 31).validate(), ShapeError);
    EXPECT_THROW(BlockSpec::c3(8, 7, 1).validate(), ShapeError);
    EXPECT_THROW(BlockSpec::c3(8, 8, 0).validate(), ShapeError);
    EXPECT_THROW(BlockSpec::spp(8, 8, {3, 4}).validate(), ShapeError);
    EXPECT_THROW(BlockSpec::spp(8, 8, {}).validate(), ShapeError);
    EXPECT_THROW(BlockSpec::shufflev2(8, 16, 1).validate(), ShapeError);
    EXPECT_THROW(BlockSpec::shufflev2(8, 8, 3).validate(), ShapeError);
    EXPECT_THROW(BlockSpec::bottleneck(8, 16, true).validate(), ShapeError);
    EXPECT_NO_THROW(BlockSpec::bottleneck(8, 16, false).validate());
}

TEST(BlockParams, ClosedFormCounts)
{
    EXPECT_EQ(learnable(declare_params(BlockSpec::cbs(3, 16, 3, 2))), cbs_params(3, 16, 3));
    const std::int64_t c = 32;
    EXPECT_EQ(learnable(declare_params(BlockSpec::stem(3, c))),
              cbs_params(3, c, 3) + cbs_params(c, c / 2, 1) + cbs_params(c / 2, c, 3) + cbs_params(2 * c, c, 1));
    EXPECT_EQ(learnable(declare_params(BlockSpec::focus(3, c, 3))), cbs_params(12, c, 3));
    // C3(64 -> 64, n=2): two 1x1 to 32, cv3 64->64, two bottlenecks on 32.
    EXPECT_EQ(learnable(declare_params(BlockSpec::c3(64, 64, 2))),
              2 * cbs_params(64, 32, 1) + cbs_params(64, 64, 1) + 2 * (cbs_params(32, 32, 1) + cbs_params(32, 32, 3)));
    EXPECT_EQ(learnable(declare_params(BlockSpec::spp(64, 64, {3, 5, 7}))),
              cbs_params(64, 32, 1) + cbs_params(128, 64, 1));
    // ShuffleV2 stride 2, 16 -> 32: depthwise 16 (3x3) + 1x1 16->16; right 1x1 16->16, dw 16, 1x1 16->16.
    EXPECT_EQ(learnable(declare_params(BlockSpec::shufflev2(16, 32, 2))),
              (16 * 9 + 32) + cbs_params(16, 16, 1) + cbs_params(16, 16, 1) + (16 * 9 + 32) + cbs_params(16, 16, 1));
    EXPECT_EQ(learnable(declare_params(BlockSpec::shufflev2(32, 32, 1))),
              2 * cbs_params(16, 16, 1) + (16 * 9 + 32));
}

TEST(BlockParams, RunningStatsAreNotLearnable)
{
    const auto d = declare_params(BlockSpec::cbs(4, 8, 1, 1), "x");
    ASSERT_EQ(d.size(), 5u);
    EXPECT_EQ(d[0].name, "x.conv.weight");
    EXPECT_EQ(d[3].name, "x.bn.running_mean");
    EXPECT_FALSE(d[3].learnable());
    EXPECT_FALSE(d[4].learnable());
}

struct ShapeCase {
    BlockSpec spec;
    Shape in;
};

class BlockShapes : public ::testing::TestWithParam<ShapeCase> {};

TEST_P(BlockShapes, ForwardAgreesWithInferShape)
{
    const auto& p = GetParam();
    FunctionSource src(random_param);
    const AnyBlock b(p.spec, src, "blk");
    const Tensor y = b(random_input(p.in, 5));
    EXPECT_EQ(y.shape(), infer_shape(p.spec, p.in));
    EXPECT_TRUE(y.all_finite());
}

INSTANTIATE_TEST_SUITE_P(
    Kinds, BlockShapes,
    ::testing::Values(ShapeCase{BlockSpec::cbs(3, 8, 3, 2), {1, 3, 9, 7}}, ShapeCase{BlockSpec::stem(3, 16), {2, 3, 16, 12}},
                      ShapeCase{BlockSpec::focus(3, 8, 3), {1, 3, 8, 8}}, ShapeCase{BlockSpec::c3(8, 12, 2), {1, 8, 5, 5}},
                      ShapeCase{BlockSpec::c3(8, 8, 1, false), {1, 8, 4, 6}},
                      ShapeCase{BlockSpec::spp(16, 8, {3, 5, 7}), {1, 16, 6, 6}},
                      ShapeCase{BlockSpec::shufflev2(8, 16, 2), {1, 8, 8, 8}},
                      ShapeCase{BlockSpec::shufflev2(16, 16, 1), {1, 16, 7, 7}}));

TEST(BlockShapes, RejectsWrongInputChannels)
{
    FunctionSource src(random_param);
    const AnyBlock b(BlockSpec::cbs(4, 8, 3, 1), src, "b");
    EXPECT_THROW(b(Tensor(Shape{1, 3, 4, 4})), ShapeError);
    EXPECT_THROW(infer_shape(BlockSpec::stem(3, 8), {1, 3, 6, 8}), ShapeError);
}

TEST(BlockOracle, CbsMatchesUnfoldedReference)
{
    FunctionSource src(random_param, 1e-3f);
    const Cbs b(src, "m", 4, 6, 3, 2);
    const Tensor x = random_input({1, 4, 9, 9}, 1);
    EXPECT_LT(max_abs_diff(b(x), ref_cbs(x, src, "m", 4, 6, 3, 2)), 1e-4);
}

TEST(BlockOracle, StemMatchesComposition)
{
    FunctionSource src(random_param);
    const AnyBlock b(BlockSpec::stem(3, 8), src, "s");
    const Tensor x = random_input({1, 3, 16, 16}, 2);
    const Tensor s1 = ref_cbs(x, src, "s.stem_1", 3, 8, 3, 2);
    const Tensor a = ref_cbs(ref_cbs(s1, src, "s.stem_2a", 8, 4, 1, 1), src, "s.stem_2b", 4, 8, 3, 2);
    const Tensor p = maxpool(s1, 2, 2, 0);
    const Tensor want = ref_cbs(concat_channels({&a, &p}), src, "s.stem_3", 16, 8, 1, 1);
    EXPECT_LT(max_abs_diff(b(x), want), 1e-4);
}

TEST(BlockOracle, C3MatchesComposition)
{
    FunctionSource src(random_param);
    const AnyBlock b(BlockSpec::c3(6, 8, 1, true), src, "c");
    const Tensor x = random_input({1, 6, 5, 5}, 3);
    const Tensor h = ref_cbs(x, src, "c.cv1", 6, 4, 1, 1);
    const Tensor m = add_elementwise(h, ref_cbs(ref_cbs(h, src, "c.m.0.cv1", 4, 4, 1, 1), src, "c.m.0.cv2", 4, 4, 3, 1));
    const Tensor side = ref_cbs(x, src, "c.cv2", 6, 4, 1, 1);
    const Tensor want = ref_cbs(concat_channels({&m, &side}), src, "c.cv3", 8, 8, 1, 1);
    EXPECT_LT(max_abs_diff(b(x), want), 1e-4);
}

TEST(BlockOracle, SppMatchesComposition)
{
    FunctionSource src(random_param);
    const AnyBlock b(BlockSpec::spp(8, 6, {3, 5}), src, "p");
    const Tensor x = random_input({1, 8, 6, 6}, 4);
    const Tensor y = ref_cbs(x, src, "p.cv1", 8, 4, 1, 1);
    const Tensor p3 = maxpool(y, 3, 1, 1), p5 = maxpool(y, 5, 1, 2);
    const Tensor want = ref_cbs(concat_channels({&y, &p3, &p5}), src, "p.cv2", 12, 6, 1, 1);
    EXPECT_LT(max_abs_diff(b(x), want), 1e-4);
}

TEST(BlockOracle, ShuffleV2StrideOneKeepsLeftHalf)
{
    FunctionSource src(random_param);
    const AnyBlock b(BlockSpec::shufflev2(8, 8, 1), src, "u");
    const Tensor x = random_input({1, 8, 5, 5}, 6);
    const Tensor y = b(x);
    // After the 2-group shuffle, even output channels are the untouched left half.
    for (std::int64_t c = 0; c < 4; ++c) {
        for (std::int64_t i = 0; i < 25; ++i) EXPECT_EQ(y.plane(0, 2 * c)[i], x.plane(0, c)[i]);
    }
}

TEST(BlockOracle, ShuffleV2StrideTwoMatchesComposition)
{
    FunctionSource src(random_param);
    const AnyBlock b(BlockSpec::shufflev2(4, 8, 2), src, "u");
    const Tensor x = random_input({1, 4, 6, 6}, 7);
    const Tensor l = ref_conv_bn(ref_conv_bn(x, src, "u.branch1.0.weight", "u.branch1.1", 4, 4, 3, 2, 4, false), src,
                                 "u.branch1.2.weight", "u.branch1.3", 4, 4, 1, 1, 1, true);
    Tensor r = ref_conv_bn(x, src, "u.branch2.0.weight", "u.branch2.1", 4, 4, 1, 1, 1, true);
    r = ref_conv_bn(r, src, "u.branch2.3.weight", "u.branch2.4", 4, 4, 3, 2, 4, false);
    r = ref_conv_bn(r, src, "u.branch2.5.weight", "u.branch2.6", 4, 4, 1, 1, 1, true);
    const Tensor cat = concat_channels({&l, &r});
    const std::vector<std::int64_t> perm{0, 4, 1, 5, 2, 6, 3, 7};
    EXPECT_LT(max_abs_diff(b(x), permute_channels(cat, perm)), 1e-4);
}

TEST(BlockFlops, StemCheaperThanFocusAtSameWidth)
{
    DeclCollector c;
    const Shape in{1, 3, 640, 640};
    const AnyBlock stem(BlockSpec::stem(3, 64), c, "a");
    const AnyBlock focus(BlockSpec::focus(3, 64, 3), c, "b");
    const AnyBlock down(BlockSpec::cbs(64, 128, 3, 2), c, "c");
    EXPECT_GT(stem.flops(in), 0);
    EXPECT_LT(stem.flops(in), focus.flops(in) + down.flops({1, 64, 320, 320}));
}
