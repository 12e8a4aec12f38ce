#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "yoloface/archive.hpp"
#include "yoloface/model.hpp"

using namespace yoloface;

TEST(Scaling, ChannelsAndDepth)
{
    EXPECT_EQ(scale_channels(64, 0.5), 32);
    EXPECT_EQ(scale_channels(1024, 0.75), 768);
    EXPECT_EQ(scale_channels(64, 0.25), 16);
    EXPECT_EQ(scale_channels(10, 0.1), 8); // floor of 8
    EXPECT_EQ(scale_channels(100, 1.0), 104);
    EXPECT_EQ(scale_depth(9, 0.33), 3);
    EXPECT_EQ(scale_depth(3, 0.33), 1);
    EXPECT_EQ(scale_depth(3, 1.33), 4);
    EXPECT_EQ(scale_depth(1, 0.1), 1);
}

TEST(ModelConfig, ValidationErrors)
{
    ModelConfig c;
    c.input_size = 100;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.use_p6 = true; // anchors still have three levels
    EXPECT_THROW(c.validate(), ConfigError);
    c.anchors = default_anchors(true);
    c.input_size = 640;
    EXPECT_NO_THROW(c.validate());
    c.input_size = 608; // multiple of 32 but not 64
    EXPECT_THROW(c.validate(), ConfigError);
    c = preset("yolov5n").config;
    c.use_p6 = true;
    c.anchors = default_anchors(true);
    EXPECT_THROW(c.validate(), ConfigError);
    c = preset("yolov5n").config;
    c.use_stem = false;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.width_multiple = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.num_landmarks = 3;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelConfig, JsonRoundTripAndUnknownFields)
{
    for (const auto& p : presets()) {
        const auto j = to_json(p.config);
        EXPECT_EQ(model_config_from_json(j), p.config) << p.name;
    }
    auto j = to_json(preset("yolov5s").config);
    j["depth"] = 1;
    EXPECT_THROW(model_config_from_json(j), ConfigError);
    EXPECT_THROW(model_config_from_json(nlohmann::json{{"backbone", "VGG"}}), ConfigError);
    EXPECT_THROW(model_config_from_json(nlohmann::json{{"use_p6", "yes"}}), ConfigError);
    const auto p6 = model_config_from_json(nlohmann::json{{"use_p6", true}});
    EXPECT_EQ(p6.anchors, default_anchors(true));
}

TEST(ModelConfig, HashIgnoresRuntimeFields)
{
    auto a = preset("yolov5s").config;
    auto b = a;
    b.input_size = 320;
    b.score_mode = ScoreMode::conf_x_cls;
    EXPECT_EQ(config_hash(a), config_hash(b));
    b.width_multiple = 0.75;
    EXPECT_NE(config_hash(a), config_hash(b));
    EXPECT_EQ(config_hash(a).size(), 16u);
}

TEST(Presets, ParameterTargets)
{
    // Checked tolerances per preset; the wider-tolerance presets are reported by `info`.
    for (const char* name : {"yolov5s", "yolov5s6", "yolov5n", "yolov5n-0.5", "yolov5s-focus", "yolov5l", "yolov5l6"}) {
        const auto& p = preset(name);
        const double got = static_cast<double>(count_params(p.config)) / 1e6;
        EXPECT_LE(std::abs(got - p.target->params_m) / p.target->params_m, p.target->tolerance) << name << " " << got;
    }
}

TEST(Presets, StemSmallerThanFocus)
{
    const auto& stem = preset("yolov5s").config;
    const auto& focus = preset("yolov5s-focus").config;
    EXPECT_LT(count_params(stem), count_params(focus));
    EXPECT_LT(count_flops(stem, 640), count_flops(focus, 640));
}

TEST(Presets, P6AddsParameters)
{
    EXPECT_GT(count_params(preset("yolov5s6").config), count_params(preset("yolov5s").config));
    EXPECT_GT(count_params(preset("yolov5m").config), count_params(preset("yolov5s").config));
    EXPECT_THROW(preset("yolov9"), ConfigError);
}

TEST(Summary, HeadShapesAndMatchedPreset)
{
    const auto& cfg = preset("yolov5s6").config;
    const auto s = summarize(make_plan(cfg), 640, 640);
    const auto& head = s.layers.back();
    ASSERT_EQ(head.out_shapes.size(), 4u);
    const std::int64_t sizes[] = {80, 40, 20, 10};
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(head.out_shapes[i], (Shape{1, 48, sizes[i], sizes[i]}));
    std::int64_t sum = 0;
    for (const auto& r : s.layers) sum += r.params;
    EXPECT_EQ(sum, s.params);
    EXPECT_EQ(match_preset(cfg), &preset("yolov5s6"));
    EXPECT_THROW(summarize(make_plan(cfg), 640, 608), ShapeError);
}

TEST(Model, DeclaredNamesUniqueAndMatchBuild)
{
    for (const char* name : {"yolov5n-0.5", "yolov5s6"}) {
        const auto& cfg = preset(name).config;
        const auto decls = declare_model_params(cfg);
        std::set<std::string> names;
        for (const auto& d : decls) EXPECT_TRUE(names.insert(d.name).second) << d.name;
        SeededSource src(1);
        const Model m = Model::build(cfg, src);
        ASSERT_EQ(m.params().size(), decls.size());
        for (std::size_t i = 0; i < decls.size(); ++i) EXPECT_EQ(m.params()[i].name, decls[i].name);
        EXPECT_EQ(count_params(m), count_params(cfg));
    }
}

TEST(Model, ForwardShapesSmallInput)
{
    for (const char* name : {"yolov5n-0.5", "yolov5n", "yolov5s", "yolov5s-focus"}) {
        const auto& cfg = preset(name).config;
        SeededSource src(3);
        const Model m = Model::build(cfg, src);
        const auto out = m.forward(Tensor(Shape{2, 3, 64, 96}, 0.5f));
        ASSERT_EQ(out.size(), 3u) << name;
        for (std::size_t i = 0; i < 3; ++i) {
            const std::int64_t s = 8 << i;
            EXPECT_EQ(out[i].shape(), (Shape{2, 48, 64 / s, 96 / s})) << name;
            EXPECT_TRUE(out[i].all_finite());
        }
    }
}

TEST(Model, ForwardRejectsBadInput)
{
    SeededSource src(3);
    const Model m = Model::build(preset("yolov5n-0.5").config, src);
    EXPECT_THROW(m.forward(Tensor(Shape{1, 3, 48, 64})), ShapeError);
    EXPECT_THROW(m.forward(Tensor(Shape{1, 1, 64, 64})), ShapeError);
}

TEST(Model, DeterministicAcrossBuilds)
{
    const auto& cfg = preset("yolov5n-0.5").config;
    SeededSource a(9), b(9), c(10);
    const Tensor x(Shape{1, 3, 64, 64}, 0.25f);
    const auto ya = Model::build(cfg, a).forward(x);
    const auto yb = Model::build(cfg, b).forward(x);
    const auto yc = Model::build(cfg, c).forward(x);
    for (std::size_t i = 0; i < ya.size(); ++i) {
        EXPECT_EQ(ya[i], yb[i]);
        EXPECT_NE(ya[i], yc[i]);
    }
}

TEST(Model, BatchItemsIndependent)
{
    SeededSource src(4);
    const Model m = Model::build(preset("yolov5n-0.5").config, src);
    Tensor batch(Shape{2, 3, 32, 32}, 0.1f);
    for (std::int64_t i = 0; i < 3 * 32 * 32; ++i) batch.data()[static_cast<std::size_t>(3 * 32 * 32 + i)] = 0.9f;
    const auto both = m.forward(batch);
    const auto single = m.forward(Tensor(Shape{1, 3, 32, 32}, 0.1f));
    for (std::size_t l = 0; l < both.size(); ++l) {
        const auto per = single[l].shape().numel();
        for (std::int64_t i = 0; i < per; ++i) {
            EXPECT_NEAR(both[l].data()[static_cast<std::size_t>(i)], single[l].data()[static_cast<std::size_t>(i)], 1e-5);
        }
    }
}
