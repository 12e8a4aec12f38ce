#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "yoloface/blocks.hpp"
#include "yoloface/detect.hpp"

namespace yoloface {

enum class Backbone { csp, shufflev2, shufflev2_half };

inline const char* to_string(Backbone b)
{
    switch (b) {
    case Backbone::csp: return "CSP";
    case Backbone::shufflev2: return "ShuffleV2";
    case Backbone::shufflev2_half: return "ShuffleV2-0.5";
    }
    return "?";
}

inline const char* to_string(ScoreMode m) { return m == ScoreMode::conf ? "conf" : "conf_x_cls"; }

/// round(base * W) rounded up to a multiple of 8, at least 8.
inline int scale_channels(int base, double width_multiple)
{
    const auto scaled = round_half_away(base * width_multiple);
    return static_cast<int>(std::max<std::int64_t>(8, (scaled + 7) / 8 * 8));
}

inline int scale_depth(int base_n, double depth_multiple)
{
    return static_cast<int>(std::max<std::int64_t>(1, round_half_away(base_n * depth_multiple)));
}

struct ModelConfig {
    Backbone backbone = Backbone::csp;
    double depth_multiple = 0.33;
    double width_multiple = 0.50;
    bool use_p6 = false;
    int num_landmarks = 5;
    AnchorSet anchors = default_anchors(false);
    int input_size = 640;
    std::vector<int> spp_kernels{3, 5, 7};
    bool use_stem = true;
    ScoreMode score_mode = ScoreMode::conf;

    int num_levels() const { return use_p6 ? 4 : 3; }
    int max_stride() const { return use_p6 ? 64 : 32; }
    int anchors_per_level() const { return static_cast<int>(anchors.anchors_per_level()); }
    int head_channels() const { return anchors_per_level() * channels_per_anchor(num_landmarks); }

    void validate() const
    {
        if (!(depth_multiple > 0) || !(width_multiple > 0)) throw ConfigError("model config: D and W must be > 0");
        if (num_landmarks != 0 && num_landmarks != 5) throw ConfigError("model config: num_landmarks must be 0 or 5");
        if (input_size < 1 || input_size % max_stride() != 0) {
            throw ConfigError("model config: input_size must be a positive multiple of " + std::to_string(max_stride()));
        }
        anchors.validate();
        if (static_cast<int>(anchors.levels.size()) != num_levels()) {
            throw ConfigError("model config: expected anchors for " + std::to_string(num_levels()) + " levels, got " +
                              std::to_string(anchors.levels.size()));
        }
        for (int i = 0; i < num_levels(); ++i) {
            if (anchors.levels[static_cast<std::size_t>(i)].stride != (8 << i)) {
                throw ConfigError("model config: level " + std::to_string(i) + " stride must be " +
                                  std::to_string(8 << i));
            }
        }
        BlockSpec::spp(2, 2, spp_kernels).validate();
        if (backbone != Backbone::csp && use_p6) throw ConfigError("model config: P6 requires the CSP backbone");
        if (backbone != Backbone::csp && !use_stem) {
            throw ConfigError("model config: the Focus ablation applies to the CSP backbone only");
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Named models

struct PresetTarget {
    double params_m = 0;  // millions
    double flops_g = 0;   // report-only
    double tolerance = 0; // relative
};

struct Preset {
    std::string name;
    ModelConfig config;
    std::optional<PresetTarget> target;
};

inline ModelConfig make_config(Backbone b, double d, double w, bool p6)
{
    ModelConfig c;
    c.backbone = b;
    c.depth_multiple = d;
    c.width_multiple = w;
    c.use_p6 = p6;
    c.anchors = default_anchors(p6);
    return c;
}

inline const std::vector<Preset>& presets()
{
    static const std::vector<Preset> all = [] {
        std::vector<Preset> v{
            {"yolov5n-0.5", make_config(Backbone::shufflev2_half, 0.33, 0.25, false), PresetTarget{0.447, 0.571, 0.05}},
            {"yolov5n", make_config(Backbone::shufflev2, 0.33, 0.50, false), PresetTarget{1.726, 2.111, 0.05}},
            {"yolov5s", make_config(Backbone::csp, 0.33, 0.50, false), PresetTarget{7.075, 5.751, 0.03}},
            {"yolov5s6", make_config(Backbone::csp, 0.33, 0.50, true), PresetTarget{12.386, 6.280, 0.05}},
            {"yolov5m", make_config(Backbone::csp, 0.50, 0.75, false), PresetTarget{21.063, 18.146, 0.05}},
            {"yolov5m6", make_config(Backbone::csp, 0.50, 0.75, true), PresetTarget{35.485, 19.773, 0.05}},
            {"yolov5l", make_config(Backbone::csp, 1.0, 1.0, false), PresetTarget{46.627, 41.607, 0.05}},
            {"yolov5l6", make_config(Backbone::csp, 1.0, 1.0, true), PresetTarget{76.674, 45.279, 0.05}},
            // x6 uses the YOLOv5 family multiples.
            {"yolov5x6", make_config(Backbone::csp, 1.33, 1.25, true), PresetTarget{141.158, 88.665, 0.05}},
        };
        ModelConfig focus = make_config(Backbone::csp, 0.33, 0.50, false);
        focus.use_stem = false;
        v.push_back({"yolov5s-focus", focus, PresetTarget{7.091, 6.174, 0.03}});
        return v;
    }();
    return all;
}

inline const Preset& preset(const std::string& name)
{
    for (const auto& p : presets()) {
        if (p.name == name) return p;
    }
    throw ConfigError("unknown model preset '" + name + "'");
}

/// The preset whose architecture `c` reproduces (anchors, input size and score mode ignored).
inline const Preset* match_preset(const ModelConfig& c)
{
    for (const auto& p : presets()) {
        const auto& q = p.config;
        if (q.backbone == c.backbone && q.depth_multiple == c.depth_multiple && q.width_multiple == c.width_multiple &&
            q.use_p6 == c.use_p6 && q.use_stem == c.use_stem && q.num_landmarks == c.num_landmarks &&
            q.spp_kernels == c.spp_kernels && q.anchors_per_level() == c.anchors_per_level()) {
            return &p;
        }
    }
    return nullptr;
}

// ---------------------------------------------------------------------------
// Architecture plan

enum class LayerKind { block, upsample, concat, detect };

struct LayerSpec {
    LayerKind kind = LayerKind::block;
    std::vector<int> from{-1}; // -1 is the previous layer
    BlockSpec block;
    int repeat = 1;                    // sequential copies of `block`
    std::vector<int> detect_channels;  // per level input channels

    std::string describe() const
    {
        switch (kind) {
        case LayerKind::block: return std::string(to_string(block.kind)) + (repeat > 1 ? " x" + std::to_string(repeat) : "");
        case LayerKind::upsample: return "Upsample";
        case LayerKind::concat: return "Concat";
        case LayerKind::detect: return "Detect";
        }
        return "?";
    }
};

struct ModelPlan {
    ModelConfig config;
    std::vector<LayerSpec> layers;

    /// Indices of the layers feeding the detection head (P3, P4, P5[, P6]).
    const std::vector<int>& level_sources() const { return layers.back().from; }
};

inline std::string layer_prefix(std::size_t index) { return "model." + std::to_string(index); }

namespace detail {

class PlanBuilder {
public:
    int block(BlockSpec s, int repeat = 1, std::vector<int> from = {-1})
    {
        s.validate();
        layers.push_back({LayerKind::block, std::move(from), std::move(s), repeat, {}});
        return last();
    }
    int upsample() { return push({LayerKind::upsample, {-1}, {}, 1, {}}); }
    int concat(int other) { return push({LayerKind::concat, {-1, other}, {}, 1, {}}); }
    int detect(std::vector<int> from, std::vector<int> channels)
    {
        return push({LayerKind::detect, std::move(from), {}, 1, std::move(channels)});
    }
    int last() const { return static_cast<int>(layers.size()) - 1; }

    std::vector<LayerSpec> layers;

private:
    int push(LayerSpec l)
    {
        layers.push_back(std::move(l));
        return last();
    }
};

inline void build_csp(const ModelConfig& cfg, PlanBuilder& b)
{
    const auto c = [&](int base) { return scale_channels(base, cfg.width_multiple); };
    const auto d = [&](int base) { return scale_depth(base, cfg.depth_multiple); };

    int stage1_in = c(64);
    if (cfg.use_stem) {
        b.block(BlockSpec::stem(3, c(64)));
    } else {
        b.block(BlockSpec::focus(3, c(64), 3));
        b.block(BlockSpec::cbs(c(64), c(128), 3, 2));
        stage1_in = c(128);
    }
    b.block(BlockSpec::c3(stage1_in, c(128), d(3)));
    b.block(BlockSpec::cbs(c(128), c(256), 3, 2));
    const int p3 = b.block(BlockSpec::c3(c(256), c(256), d(9)));
    b.block(BlockSpec::cbs(c(256), c(512), 3, 2));
    const int p4 = b.block(BlockSpec::c3(c(512), c(512), d(9)));

    if (!cfg.use_p6) {
        b.block(BlockSpec::cbs(c(512), c(1024), 3, 2));
        b.block(BlockSpec::spp(c(1024), c(1024), cfg.spp_kernels));
        b.block(BlockSpec::c3(c(1024), c(1024), d(3), false));

        const int h5 = b.block(BlockSpec::cbs(c(1024), c(512), 1, 1));
        b.upsample();
        b.concat(p4);
        b.block(BlockSpec::c3(2 * c(512), c(512), d(3), false));
        const int h4 = b.block(BlockSpec::cbs(c(512), c(256), 1, 1));
        b.upsample();
        b.concat(p3);
        const int o3 = b.block(BlockSpec::c3(2 * c(256), c(256), d(3), false));
        b.block(BlockSpec::cbs(c(256), c(256), 3, 2));
        b.concat(h4);
        const int o4 = b.block(BlockSpec::c3(2 * c(256), c(512), d(3), false));
        b.block(BlockSpec::cbs(c(512), c(512), 3, 2));
        b.concat(h5);
        const int o5 = b.block(BlockSpec::c3(2 * c(512), c(1024), d(3), false));
        b.detect({o3, o4, o5}, {c(256), c(512), c(1024)});
        return;
    }

    b.block(BlockSpec::cbs(c(512), c(768), 3, 2));
    const int p5 = b.block(BlockSpec::c3(c(768), c(768), d(3)));
    b.block(BlockSpec::cbs(c(768), c(1024), 3, 2));
    b.block(BlockSpec::spp(c(1024), c(1024), cfg.spp_kernels));
    b.block(BlockSpec::c3(c(1024), c(1024), d(3), false));

    const int h6 = b.block(BlockSpec::cbs(c(1024), c(768), 1, 1));
    b.upsample();
    b.concat(p5);
    b.block(BlockSpec::c3(2 * c(768), c(768), d(3), false));
    const int h5 = b.block(BlockSpec::cbs(c(768), c(512), 1, 1));
    b.upsample();
    b.concat(p4);
    b.block(BlockSpec::c3(2 * c(512), c(512), d(3), false));
    const int h4 = b.block(BlockSpec::cbs(c(512), c(256), 1, 1));
    b.upsample();
    b.concat(p3);
    const int o3 = b.block(BlockSpec::c3(2 * c(256), c(256), d(3), false));
    b.block(BlockSpec::cbs(c(256), c(256), 3, 2));
    b.concat(h4);
    const int o4 = b.block(BlockSpec::c3(2 * c(256), c(512), d(3), false));
    b.block(BlockSpec::cbs(c(512), c(512), 3, 2));
    b.concat(h5);
    const int o5 = b.block(BlockSpec::c3(2 * c(512), c(768), d(3), false));
    b.block(BlockSpec::cbs(c(768), c(768), 3, 2));
    b.concat(h6);
    const int o6 = b.block(BlockSpec::c3(2 * c(768), c(1024), d(3), false));
    b.detect({o3, o4, o5, o6}, {c(256), c(512), c(768), c(1024)});
}

inline void build_shufflenet(const ModelConfig& cfg, PlanBuilder& b)
{
    const bool half = cfg.backbone == Backbone::shufflev2_half;
    const int stem_c = half ? 16 : 32;
    const int c1 = half ? 64 : 128, c2 = half ? 128 : 256, c3 = half ? 256 : 512;
    const int w = scale_channels(256, cfg.width_multiple);
    const int n = scale_depth(3, cfg.depth_multiple);

    b.block(BlockSpec::stem(3, stem_c));
    b.block(BlockSpec::shufflev2(stem_c, c1, 2));
    const int p3 = b.block(BlockSpec::shufflev2(c1, c1, 1), 3);
    b.block(BlockSpec::shufflev2(c1, c2, 2));
    const int p4 = b.block(BlockSpec::shufflev2(c2, c2, 1), 7);
    b.block(BlockSpec::shufflev2(c2, c3, 2));
    b.block(BlockSpec::shufflev2(c3, c3, 1), 3);

    const int h5 = b.block(BlockSpec::cbs(c3, w, 1, 1));
    b.upsample();
    b.concat(p4);
    b.block(BlockSpec::c3(w + c2, w, n, false));
    const int h4 = b.block(BlockSpec::cbs(w, w, 1, 1));
    b.upsample();
    b.concat(p3);
    const int o3 = b.block(BlockSpec::c3(w + c1, w, n, false));
    b.block(BlockSpec::cbs(w, w, 3, 2));
    b.concat(h4);
    const int o4 = b.block(BlockSpec::c3(2 * w, w, n, false));
    b.block(BlockSpec::cbs(w, w, 3, 2));
    b.concat(h5);
    const int o5 = b.block(BlockSpec::c3(2 * w, w, n, false));
    b.detect({o3, o4, o5}, {w, w, w});
}

} // namespace detail

inline ModelPlan make_plan(const ModelConfig& cfg)
{
    cfg.validate();
    detail::PlanBuilder b;
    if (cfg.backbone == Backbone::csp) detail::build_csp(cfg, b);
    else detail::build_shufflenet(cfg, b);
    return {cfg, std::move(b.layers)};
}

/// Parameter-name prefix of copy `j` of a repeated layer.
inline std::string block_prefix(std::size_t layer, int repeat, int j)
{
    return repeat > 1 ? layer_prefix(layer) + "." + std::to_string(j) : layer_prefix(layer);
}

inline BlockSpec repeat_spec(const LayerSpec& l, int j)
{
    BlockSpec s = l.block;
    if (j > 0) s.in_channels = s.out_channels;
    return s;
}

// ---------------------------------------------------------------------------
// Shape / parameter / FLOP accounting without weights

struct LayerSummary {
    int index = 0;
    std::string kind;
    std::vector<int> from;
    std::vector<Shape> out_shapes; // one per output; detect has one per level
    std::int64_t params = 0;
    std::int64_t flops = 0;
};

struct ModelSummary {
    std::vector<LayerSummary> layers;
    std::int64_t params = 0;
    std::int64_t flops = 0;
};

namespace detail {

inline std::vector<int> resolve_from(const std::vector<int>& from, int index)
{
    std::vector<int> r;
    for (int f : from) r.push_back(f < 0 ? index + f : f);
    return r;
}

} // namespace detail

/// Walks the plan layer by layer at the given input size. Parameter counts include learnable
/// tensors only; FLOPs follow the 2-per-MAC convention for a single image.
inline ModelSummary summarize(const ModelPlan& plan, std::int64_t input_h, std::int64_t input_w)
{
    const auto& cfg = plan.config;
    if (input_h % cfg.max_stride() != 0 || input_w % cfg.max_stride() != 0) {
        throw ShapeError("input " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                         " is not a multiple of stride " + std::to_string(cfg.max_stride()));
    }
    ModelSummary ms;
    std::vector<Shape> outs;
    const Shape input{1, 3, input_h, input_w};
    for (std::size_t i = 0; i < plan.layers.size(); ++i) {
        const auto& l = plan.layers[i];
        LayerSummary row;
        row.index = static_cast<int>(i);
        row.kind = l.describe();
        row.from = detail::resolve_from(l.from, static_cast<int>(i));
        const auto in_of = [&](int f) { return f < 0 ? input : outs[static_cast<std::size_t>(f)]; };
        DeclCollector collector;
        switch (l.kind) {
        case LayerKind::block: {
            Shape s = in_of(row.from[0]);
            for (int j = 0; j < l.repeat; ++j) {
                const BlockSpec spec = repeat_spec(l, j);
                AnyBlock blk(spec, collector, block_prefix(i, l.repeat, j));
                row.flops += blk.flops(s);
                s = infer_shape(spec, s);
            }
            row.out_shapes = {s};
            break;
        }
        case LayerKind::upsample: {
            Shape s = in_of(row.from[0]);
            s.h *= 2;
            s.w *= 2;
            row.out_shapes = {s};
            break;
        }
        case LayerKind::concat: {
            Shape s = in_of(row.from[0]);
            s.c = 0;
            for (int f : row.from) s.c += in_of(f).c;
            row.out_shapes = {s};
            break;
        }
        case LayerKind::detect:
            for (std::size_t k = 0; k < row.from.size(); ++k) {
                const Shape s = in_of(row.from[k]);
                const ConvUnit head = ConvUnit::plain(collector, layer_prefix(i) + ".m." + std::to_string(k),
                                                      l.detect_channels[k], cfg.head_channels(), 1);
                row.flops += head.flops(s);
                row.out_shapes.push_back(head.out_shape(s));
            }
            break;
        }
        for (const auto& d : collector.decls()) {
            if (d.learnable()) row.params += d.numel();
        }
        outs.push_back(row.out_shapes.front());
        ms.params += row.params;
        ms.flops += row.flops;
        ms.layers.push_back(std::move(row));
    }
    return ms;
}

inline std::int64_t count_params(const ModelConfig& cfg)
{
    return summarize(make_plan(cfg), cfg.input_size, cfg.input_size).params;
}

inline std::int64_t count_flops(const ModelConfig& cfg, int input_size)
{
    return summarize(make_plan(cfg), input_size, input_size).flops;
}

/// Every parameter tensor the model declares, in build order.
inline std::vector<ParamDecl> declare_model_params(const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Executable model

/// Wraps a source and records each declaration it serves.
class RecordingSource : public ParamSource {
public:
    explicit RecordingSource(ParamSource& inner) : inner_(inner) {}
    std::vector<float> fetch(const ParamDecl& d) override
    {
        decls_.push_back(d);
        return inner_.fetch(d);
    }
    float bn_eps() const override { return inner_.bn_eps(); }
    std::vector<ParamDecl> take() { return std::move(decls_); }

private:
    ParamSource& inner_;
    std::vector<ParamDecl> decls_;
};

/// An assembled, immutable detector. `forward` is const and may run concurrently.
class Model {
public:
    static Model build(const ModelConfig& cfg, ParamSource& src)
    {
        Model m;
        m.plan_ = make_plan(cfg);
        RecordingSource rec(src);
        for (std::size_t i = 0; i < m.plan_.layers.size(); ++i) {
            const auto& l = m.plan_.layers[i];
            Node node;
            node.from = detail::resolve_from(l.from, static_cast<int>(i));
            if (l.kind == LayerKind::block) {
                for (int j = 0; j < l.repeat; ++j) node.blocks.emplace_back(repeat_spec(l, j), rec, block_prefix(i, l.repeat, j));
            } else if (l.kind == LayerKind::detect) {
                for (std::size_t k = 0; k < l.from.size(); ++k) {
                    node.heads.push_back(ConvUnit::plain(rec, layer_prefix(i) + ".m." + std::to_string(k),
                                                         l.detect_channels[k], cfg.head_channels(), 1));
                }
            }
            m.nodes_.push_back(std::move(node));
        }
        m.params_ = rec.take();
        m.last_use_.assign(m.nodes_.size(), -1);
        for (std::size_t i = 0; i < m.nodes_.size(); ++i) {
            for (int f : m.nodes_[i].from) m.last_use_[static_cast<std::size_t>(f)] = static_cast<int>(i);
        }
        return m;
    }

    /// Raw (pre-sigmoid) level maps [N, na*(6+2L), H/stride, W/stride] for strides 8, 16, 32[, 64].
    std::vector<Tensor> forward(const Tensor& batch) const
    {
        const Shape& s = batch.shape();
        const int ms = config().max_stride();
        if (s.c != 3) throw ShapeError("forward: expected 3 input channels, got " + std::to_string(s.c));
        if (s.h % ms != 0 || s.w % ms != 0) {
            throw ShapeError("forward: input " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                             " is not a multiple of stride " + std::to_string(ms));
        }
        std::vector<Tensor> outs(nodes_.size());
        std::vector<Tensor> levels;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const auto& node = nodes_[i];
            const auto& l = plan_.layers[i];
            const auto in = [&](std::size_t k) -> const Tensor& {
                const int f = node.from[k];
                return f < 0 ? batch : outs[static_cast<std::size_t>(f)];
            };
            switch (l.kind) {
            case LayerKind::block: {
                Tensor x = node.blocks.front()(in(0));
                for (std::size_t j = 1; j < node.blocks.size(); ++j) x = node.blocks[j](x);
                outs[i] = std::move(x);
                break;
            }
            case LayerKind::upsample: outs[i] = upsample_nearest2x(in(0)); break;
            case LayerKind::concat: {
                std::vector<const Tensor*> parts;
                for (std::size_t k = 0; k < node.from.size(); ++k) parts.push_back(&in(k));
                outs[i] = concat_channels(parts);
                break;
            }
            case LayerKind::detect:
                for (std::size_t k = 0; k < node.heads.size(); ++k) levels.push_back(node.heads[k](in(k)));
                break;
            }
            for (int f : node.from) {
                if (f >= 0 && last_use_[static_cast<std::size_t>(f)] == static_cast<int>(i)) {
                    outs[static_cast<std::size_t>(f)] = Tensor();
                }
            }
        }
        return levels;
    }

    const ModelConfig& config() const { return plan_.config; }
    const ModelPlan& plan() const { return plan_; }
    const std::vector<ParamDecl>& params() const { return params_; }

    std::vector<int> strides() const
    {
        std::vector<int> s;
        for (const auto& l : config().anchors.levels) s.push_back(l.stride);
        return s;
    }

private:
    struct Node {
        std::vector<int> from;
        std::vector<AnyBlock> blocks;
        std::vector<ConvUnit> heads;
    };

    ModelPlan plan_;
    std::vector<Node> nodes_;
    std::vector<int> last_use_;
    std::vector<ParamDecl> params_;
};

/// Learnable parameter elements of a built model.
inline std::int64_t count_params(const Model& m)
{
    std::int64_t n = 0;
    for (const auto& d : m.params()) {
        if (d.learnable()) n += d.numel();
    }
    return n;
}

inline std::int64_t count_flops(const Model& m, int input_size)
{
    return summarize(m.plan(), input_size, input_size).flops;
}

inline std::vector<ParamDecl> declare_model_params(const ModelConfig& cfg)
{
    const ModelPlan plan = make_plan(cfg);
    std::vector<ParamDecl> all;
    for (std::size_t i = 0; i < plan.layers.size(); ++i) {
        const auto& l = plan.layers[i];
        if (l.kind == LayerKind::block) {
            for (int j = 0; j < l.repeat; ++j) {
                auto d = declare_params(repeat_spec(l, j), block_prefix(i, l.repeat, j));
                all.insert(all.end(), d.begin(), d.end());
            }
        } else if (l.kind == LayerKind::detect) {
            DeclCollector c;
            for (std::size_t k = 0; k < l.from.size(); ++k) {
                ConvUnit::plain(c, layer_prefix(i) + ".m." + std::to_string(k), l.detect_channels[k],
                                cfg.head_channels(), 1);
            }
            all.insert(all.end(), c.decls().begin(), c.decls().end());
        }
    }
    return all;
}

// ---------------------------------------------------------------------------
// JSON configuration

inline nlohmann::json anchors_to_json(const AnchorSet& a)
{
    nlohmann::json levels = nlohmann::json::array();
    for (const auto& l : a.levels) {
        nlohmann::json lv = nlohmann::json::array();
        for (const auto& x : l.anchors) lv.push_back({x.w, x.h});
        levels.push_back(lv);
    }
    return levels;
}

inline AnchorSet anchors_from_json(const nlohmann::json& j)
{
    if (!j.is_array()) throw ConfigError("anchors: expected an array of levels");
    AnchorSet a;
    int stride = 8;
    for (const auto& lv : j) {
        if (!lv.is_array()) throw ConfigError("anchors: each level must be an array of [w, h] pairs");
        AnchorLevel level{stride, {}};
        for (const auto& p : lv) {
            if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
                throw ConfigError("anchors: each anchor must be a [w, h] pair");
            }
            level.anchors.push_back({p[0].get<float>(), p[1].get<float>()});
        }
        a.levels.push_back(std::move(level));
        stride *= 2;
    }
    return a;
}

inline nlohmann::json to_json(const ModelConfig& c)
{
    return {{"backbone", to_string(c.backbone)},
            {"depth_multiple", c.depth_multiple},
            {"width_multiple", c.width_multiple},
            {"use_p6", c.use_p6},
            {"num_landmarks", c.num_landmarks},
            {"anchors", anchors_to_json(c.anchors)},
            {"input_size", c.input_size},
            {"spp_kernels", c.spp_kernels},
            {"use_stem", c.use_stem},
            {"score_mode", to_string(c.score_mode)}};
}

/// Parses a config object. Missing fields take their defaults (anchors default to the set
/// matching use_p6); unknown fields are rejected.
inline ModelConfig model_config_from_json(const nlohmann::json& j)
{
    if (!j.is_object()) throw ConfigError("model config must be a JSON object");
    static const std::set<std::string> known{"backbone",   "depth_multiple", "width_multiple", "use_p6",
                                             "num_landmarks", "anchors",     "input_size",     "spp_kernels",
                                             "use_stem",   "score_mode"};
    for (const auto& [key, _] : j.items()) {
        if (!known.contains(key)) throw ConfigError("model config: unknown field '" + key + "'");
    }
    ModelConfig c;
    try {
        if (j.contains("backbone")) {
            const auto b = j.at("backbone").get<std::string>();
            if (b == "CSP") c.backbone = Backbone::csp;
            else if (b == "ShuffleV2") c.backbone = Backbone::shufflev2;
            else if (b == "ShuffleV2-0.5") c.backbone = Backbone::shufflev2_half;
            else throw ConfigError("model config: unknown backbone '" + b + "'");
        }
        if (j.contains("depth_multiple")) c.depth_multiple = j.at("depth_multiple").get<double>();
        if (j.contains("width_multiple")) c.width_multiple = j.at("width_multiple").get<double>();
        if (j.contains("use_p6")) c.use_p6 = j.at("use_p6").get<bool>();
        if (j.contains("num_landmarks")) c.num_landmarks = j.at("num_landmarks").get<int>();
        c.anchors = j.contains("anchors") ? anchors_from_json(j.at("anchors")) : default_anchors(c.use_p6);
        if (j.contains("input_size")) c.input_size = j.at("input_size").get<int>();
        if (j.contains("spp_kernels")) c.spp_kernels = j.at("spp_kernels").get<std::vector<int>>();
        if (j.contains("use_stem")) c.use_stem = j.at("use_stem").get<bool>();
        if (j.contains("score_mode")) {
            const auto m = j.at("score_mode").get<std::string>();
            if (m == "conf") c.score_mode = ScoreMode::conf;
            else if (m == "conf_x_cls") c.score_mode = ScoreMode::conf_x_cls;
            else throw ConfigError("model config: unknown score_mode '" + m + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

/// 64-bit FNV-1a of the canonical (sorted-key) JSON form of the fields that shape the
/// weights, as 16 hex digits. input_size and score_mode are runtime choices and excluded.
inline std::string config_hash(const ModelConfig& c)
{
    auto j = to_json(c);
    j.erase("input_size");
    j.erase("score_mode");
    const auto h = fnv1a64(j.dump());
    static constexpr char hex[] = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 0; i < 16; ++i) s[static_cast<std::size_t>(15 - i)] = hex[(h >> (4 * i)) & 0xf];
    return s;
}

} // namespace yoloface
