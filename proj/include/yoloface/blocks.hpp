#pragma once

#include <algorithm>
#include <string>
#include <variant>
#include <vector>

#include "yoloface/ops.hpp"
#include "yoloface/params.hpp"

namespace yoloface {

enum class BlockKind { cbs, stem, focus, bottleneck, c3, spp, shufflev2 };

inline const char* to_string(BlockKind k)
{
    switch (k) {
    case BlockKind::cbs: return "CBS";
    case BlockKind::stem: return "Stem";
    case BlockKind::focus: return "Focus";
    case BlockKind::bottleneck: return "Bottleneck";
    case BlockKind::c3: return "C3";
    case BlockKind::spp: return "SPP";
    case BlockKind::shufflev2: return "ShuffleV2";
    }
    return "?";
}

struct BlockSpec {
    BlockKind kind = BlockKind::cbs;
    int in_channels = 1;
    int out_channels = 1;
    int kernel = 1;          // CBS, Focus
    int stride = 1;          // CBS, ShuffleV2
    int n = 1;               // C3 repeat count
    bool shortcut = true;    // Bottleneck, C3
    std::vector<int> kernels; // SPP

    static BlockSpec make(BlockKind kind, int cin, int cout, int k = 1, int stride = 1)
    {
        BlockSpec s;
        s.kind = kind;
        s.in_channels = cin;
        s.out_channels = cout;
        s.kernel = k;
        s.stride = stride;
        return s;
    }
    static BlockSpec cbs(int cin, int cout, int k, int s) { return make(BlockKind::cbs, cin, cout, k, s); }
    static BlockSpec stem(int cin, int cout) { return make(BlockKind::stem, cin, cout, 3, 2); }
    static BlockSpec focus(int cin, int cout, int k = 3) { return make(BlockKind::focus, cin, cout, k, 1); }
    static BlockSpec bottleneck(int cin, int cout, bool shortcut)
    {
        BlockSpec s = make(BlockKind::bottleneck, cin, cout);
        s.shortcut = shortcut;
        return s;
    }
    static BlockSpec c3(int cin, int cout, int n, bool shortcut = true)
    {
        BlockSpec s = make(BlockKind::c3, cin, cout);
        s.n = n;
        s.shortcut = shortcut;
        return s;
    }
    static BlockSpec spp(int cin, int cout, std::vector<int> kernels = {3, 5, 7})
    {
        BlockSpec s = make(BlockKind::spp, cin, cout);
        s.kernels = std::move(kernels);
        return s;
    }
    static BlockSpec shufflev2(int cin, int cout, int stride) { return make(BlockKind::shufflev2, cin, cout, 3, stride); }

    void validate() const
    {
        const std::string what = std::string(to_string(kind)) + ": ";
        if (in_channels < 1 || out_channels < 1) throw ShapeError(what + "channels must be >= 1");
        switch (kind) {
        case BlockKind::cbs:
        case BlockKind::focus:
            if (kernel < 1 || stride < 1) throw ShapeError(what + "kernel and stride must be >= 1");
            break;
        case BlockKind::stem:
            if (out_channels % 2 != 0) throw ShapeError(what + "output channels must be even");
            break;
        case BlockKind::bottleneck:
            if (shortcut && in_channels != out_channels) {
                throw ShapeError(what + "shortcut requires in_channels == out_channels");
            }
            break;
        case BlockKind::c3:
            if (out_channels % 2 != 0) throw ShapeError(what + "output channels must be even");
            if (n < 1) throw ShapeError(what + "repeat count must be >= 1");
            break;
        case BlockKind::spp:
            if (kernels.empty()) throw ShapeError(what + "at least one kernel required");
            for (int k : kernels) {
                if (k < 1 || k % 2 == 0) throw ShapeError(what + "kernels must be odd, got " + std::to_string(k));
            }
            break;
        case BlockKind::shufflev2:
            if (stride != 1 && stride != 2) throw ShapeError(what + "stride must be 1 or 2");
            if (out_channels % 2 != 0) throw ShapeError(what + "output channels must be even");
            if (stride == 1 && in_channels != out_channels) {
                throw ShapeError(what + "stride 1 requires in_channels == out_channels");
            }
            if (in_channels % 2 != 0 && stride == 1) throw ShapeError(what + "stride 1 requires even channels");
            break;
        }
    }
};

/// Closed-form output shape of a block; independent of the forward path.
inline Shape infer_shape(const BlockSpec& spec, const Shape& in)
{
    spec.validate();
    if (in.c != spec.in_channels) {
        throw ShapeError(std::string(to_string(spec.kind)) + ": expected " + std::to_string(spec.in_channels) +
                         " input channels, got " + std::to_string(in.c));
    }
    Shape out = in;
    out.c = spec.out_channels;
    switch (spec.kind) {
    case BlockKind::cbs:
        out.h = window_out(in.h, spec.kernel, spec.stride, spec.kernel / 2);
        out.w = window_out(in.w, spec.kernel, spec.stride, spec.kernel / 2);
        break;
    case BlockKind::stem:
        if (in.h % 4 != 0 || in.w % 4 != 0) throw ShapeError("Stem: spatial extents must be multiples of 4");
        out.h = in.h / 4;
        out.w = in.w / 4;
        break;
    case BlockKind::focus:
        if (in.h % 2 != 0 || in.w % 2 != 0) throw ShapeError("Focus: spatial extents must be even");
        out.h = window_out(in.h / 2, spec.kernel, 1, spec.kernel / 2);
        out.w = window_out(in.w / 2, spec.kernel, 1, spec.kernel / 2);
        break;
    case BlockKind::bottleneck:
    case BlockKind::c3:
    case BlockKind::spp: break;
    case BlockKind::shufflev2:
        out.h = window_out(in.h, 3, spec.stride, 1);
        out.w = window_out(in.w, 3, spec.stride, 1);
        break;
    }
    return out;
}

/// Convolution with BatchNorm folded in, optionally followed by SiLU.
class ConvUnit {
public:
    ConvUnit() = default;

    /// Fetches `<conv_name>.weight` and the BN statistics under `bn_prefix`.
    ConvUnit(ParamSource& src, const std::string& conv_name, const std::string& bn_prefix, int cin, int cout, int k,
             int stride, int groups, bool act)
        : cin_(cin), cout_(cout), k_(k), stride_(stride), pad_(k / 2), groups_(groups), act_(act)
    {
        const std::int64_t fan_in = static_cast<std::int64_t>(cin / groups) * k * k;
        const std::vector<std::int64_t> wshape{cout, cin / groups, k, k};
        Tensor w(Shape{cout, cin / groups, k, k}, src.fetch({conv_name, wshape, ParamRole::conv_weight, fan_in}));
        BatchNorm bn;
        const std::vector<std::int64_t> vshape{cout};
        bn.gamma = src.fetch({join_name(bn_prefix, "weight"), vshape, ParamRole::bn_gamma, fan_in});
        bn.beta = src.fetch({join_name(bn_prefix, "bias"), vshape, ParamRole::bn_beta, fan_in});
        bn.mean = src.fetch({join_name(bn_prefix, "running_mean"), vshape, ParamRole::bn_mean, fan_in});
        bn.var = src.fetch({join_name(bn_prefix, "running_var"), vshape, ParamRole::bn_var, fan_in});
        bn.eps = src.bn_eps();
        auto folded = fold_batchnorm(w, {}, bn);
        weight_ = std::move(folded.weight);
        bias_ = std::move(folded.bias);
    }

    /// Plain biased convolution (detection head).
    static ConvUnit plain(ParamSource& src, const std::string& prefix, int cin, int cout, int k)
    {
        ConvUnit u;
        u.cin_ = cin;
        u.cout_ = cout;
        u.k_ = k;
        u.pad_ = k / 2;
        u.act_ = false;
        const std::int64_t fan_in = static_cast<std::int64_t>(cin) * k * k;
        u.weight_ = Tensor(Shape{cout, cin, k, k}, src.fetch({join_name(prefix, "weight"), {cout, cin, k, k},
                                                              ParamRole::conv_weight, fan_in}));
        u.bias_ = src.fetch({join_name(prefix, "bias"), {cout}, ParamRole::conv_bias, fan_in});
        return u;
    }

    Tensor operator()(const Tensor& x) const
    {
        Tensor y = conv2d(x, weight_, bias_, stride_, pad_, groups_);
        if (act_) silu_inplace(y);
        return y;
    }

    Shape out_shape(const Shape& in) const
    {
        return {in.n, cout_, window_out(in.h, k_, stride_, pad_), window_out(in.w, k_, stride_, pad_)};
    }

    /// 2 flops per multiply-accumulate, plus one per output element for BN and for the activation.
    std::int64_t flops(const Shape& in) const
    {
        const Shape o = out_shape(in);
        const std::int64_t elems = o.c * o.h * o.w;
        std::int64_t f = 2 * elems * (cin_ / groups_) * k_ * k_;
        f += elems; // BN (or bias)
        if (act_) f += elems;
        return f;
    }

    int in_channels() const { return cin_; }
    int out_channels() const { return cout_; }

private:
    Tensor weight_;
    std::vector<float> bias_;
    int cin_ = 0, cout_ = 0, k_ = 1, stride_ = 1, pad_ = 0, groups_ = 1;
    bool act_ = true;
};

/// Conv -> BN -> SiLU with pad k/2. Parameters `<prefix>.conv.weight`, `<prefix>.bn.*`.
class Cbs {
public:
    Cbs() = default;
    Cbs(ParamSource& src, const std::string& prefix, int cin, int cout, int k, int stride)
        : unit_(src, join_name(prefix, "conv.weight"), join_name(prefix, "bn"), cin, cout, k, stride, 1, true)
    {
    }
    Cbs(const BlockSpec& s, ParamSource& src, const std::string& prefix)
        : Cbs(src, prefix, s.in_channels, s.out_channels, s.kernel, s.stride)
    {
    }

    Tensor operator()(const Tensor& x) const { return unit_(x); }
    Shape out_shape(const Shape& in) const { return unit_.out_shape(in); }
    std::int64_t flops(const Shape& in) const { return unit_.flops(in); }

private:
    ConvUnit unit_;
};

/// CBS(3x3,s2) then [CBS(1x1,C/2) -> CBS(3x3,s2)] || maxpool(2,2), concatenated, fused by CBS(1x1).
class Stem {
public:
    Stem(const BlockSpec& s, ParamSource& src, const std::string& prefix)
    {
        s.validate();
        const int c = s.out_channels;
        stem_1_ = Cbs(src, join_name(prefix, "stem_1"), s.in_channels, c, 3, 2);
        stem_2a_ = Cbs(src, join_name(prefix, "stem_2a"), c, c / 2, 1, 1);
        stem_2b_ = Cbs(src, join_name(prefix, "stem_2b"), c / 2, c, 3, 2);
        stem_3_ = Cbs(src, join_name(prefix, "stem_3"), 2 * c, c, 1, 1);
    }

    Tensor operator()(const Tensor& x) const
    {
        const Tensor s1 = stem_1_(x);
        const Tensor conv_path = stem_2b_(stem_2a_(s1));
        const Tensor pool_path = maxpool(s1, 2, 2, 0);
        return stem_3_(concat_channels({&conv_path, &pool_path}));
    }

    std::int64_t flops(const Shape& in) const
    {
        const Shape s1 = stem_1_.out_shape(in);
        const Shape s2a = stem_2a_.out_shape(s1);
        const Shape s2b = stem_2b_.out_shape(s2a);
        Shape cat = s2b;
        cat.c *= 2;
        return stem_1_.flops(in) + stem_2a_.flops(s1) + stem_2b_.flops(s2a) + s2b.numel() / s2b.n * 4 +
               stem_3_.flops(cat);
    }

private:
    Cbs stem_1_, stem_2a_, stem_2b_, stem_3_;
};

/// Space-to-depth followed by CBS; exists only for the Focus-vs-Stem ablation.
class Focus {
public:
    Focus(const BlockSpec& s, ParamSource& src, const std::string& prefix)
        : conv_(src, join_name(prefix, "conv"), s.in_channels * 4, s.out_channels, s.kernel, 1)
    {
    }
    Tensor operator()(const Tensor& x) const { return conv_(space_to_depth2(x)); }
    std::int64_t flops(const Shape& in) const { return conv_.flops({in.n, in.c * 4, in.h / 2, in.w / 2}); }

private:
    Cbs conv_;
};

/// CBS(1x1) -> CBS(3x3), plus the input when the shortcut is on.
class Bottleneck {
public:
    Bottleneck(const BlockSpec& s, ParamSource& src, const std::string& prefix)
    {
        s.validate();
        cv1_ = Cbs(src, join_name(prefix, "cv1"), s.in_channels, s.out_channels, 1, 1);
        cv2_ = Cbs(src, join_name(prefix, "cv2"), s.out_channels, s.out_channels, 3, 1);
        add_ = s.shortcut && s.in_channels == s.out_channels;
    }

    Tensor operator()(const Tensor& x) const
    {
        Tensor y = cv2_(cv1_(x));
        return add_ ? add_elementwise(x, y) : y;
    }

    std::int64_t flops(const Shape& in) const
    {
        const Shape mid = cv1_.out_shape(in);
        const Shape out = cv2_.out_shape(mid);
        return cv1_.flops(in) + cv2_.flops(mid) + (add_ ? out.numel() / out.n : 0);
    }

private:
    Cbs cv1_, cv2_;
    bool add_ = false;
};

/// CSP block: cv1 -> n bottlenecks and cv2, both 1x1 CBS from the full input to Cout/2,
/// concatenated and fused by cv3.
class C3 {
public:
    C3(const BlockSpec& s, ParamSource& src, const std::string& prefix)
    {
        s.validate();
        const int hidden = s.out_channels / 2;
        cv1_ = Cbs(src, join_name(prefix, "cv1"), s.in_channels, hidden, 1, 1);
        cv2_ = Cbs(src, join_name(prefix, "cv2"), s.in_channels, hidden, 1, 1);
        cv3_ = Cbs(src, join_name(prefix, "cv3"), 2 * hidden, s.out_channels, 1, 1);
        for (int i = 0; i < s.n; ++i) {
            m_.emplace_back(BlockSpec::bottleneck(hidden, hidden, s.shortcut), src,
                            join_name(prefix, "m." + std::to_string(i)));
        }
    }

    Tensor operator()(const Tensor& x) const
    {
        Tensor a = cv1_(x);
        for (const auto& b : m_) a = b(a);
        const Tensor b = cv2_(x);
        return cv3_(concat_channels({&a, &b}));
    }

    std::int64_t flops(const Shape& in) const
    {
        const Shape half = cv1_.out_shape(in);
        std::int64_t f = cv1_.flops(in) + cv2_.flops(in);
        for (const auto& b : m_) f += b.flops(half);
        Shape cat = half;
        cat.c *= 2;
        return f + cv3_.flops(cat);
    }

private:
    Cbs cv1_, cv2_, cv3_;
    std::vector<Bottleneck> m_;
};

/// CBS(1x1, Cin/2) -> concat[identity, stride-1 max pools] -> CBS(1x1, Cout).
class Spp {
public:
    Spp(const BlockSpec& s, ParamSource& src, const std::string& prefix) : kernels_(s.kernels)
    {
        s.validate();
        const int hidden = s.in_channels / 2;
        cv1_ = Cbs(src, join_name(prefix, "cv1"), s.in_channels, hidden, 1, 1);
        cv2_ = Cbs(src, join_name(prefix, "cv2"), hidden * static_cast<int>(kernels_.size() + 1), s.out_channels,
                   1, 1);
    }

    Tensor operator()(const Tensor& x) const
    {
        const Tensor y = cv1_(x);
        std::vector<Tensor> pooled;
        pooled.reserve(kernels_.size());
        for (int k : kernels_) pooled.push_back(maxpool(y, k, 1, k / 2));
        std::vector<const Tensor*> parts{&y};
        for (const auto& p : pooled) parts.push_back(&p);
        return cv2_(concat_channels(parts));
    }

    std::int64_t flops(const Shape& in) const
    {
        const Shape mid = cv1_.out_shape(in);
        std::int64_t f = cv1_.flops(in);
        for (int k : kernels_) f += mid.c * mid.h * mid.w * k * k;
        Shape cat = mid;
        cat.c *= static_cast<std::int64_t>(kernels_.size() + 1);
        return f + cv2_.flops(cat);
    }

private:
    std::vector<int> kernels_;
    Cbs cv1_, cv2_;
};

/// ShuffleNetV2 unit. Parameter names follow the torchvision-style Sequential indices
/// (branch1.{0..3}, branch2.{0..6}).
class ShuffleV2 {
public:
    ShuffleV2(const BlockSpec& s, ParamSource& src, const std::string& prefix) : stride_(s.stride)
    {
        s.validate();
        const int branch = s.out_channels / 2;
        const auto nm = [&](const std::string& local) { return join_name(prefix, local); };
        if (stride_ > 1) {
            b1_dw_ = ConvUnit(src, nm("branch1.0.weight"), nm("branch1.1"), s.in_channels, s.in_channels, 3, stride_,
                              s.in_channels, false);
            b1_pw_ = ConvUnit(src, nm("branch1.2.weight"), nm("branch1.3"), s.in_channels, branch, 1, 1, 1, true);
        }
        const int b2_in = stride_ > 1 ? s.in_channels : branch;
        b2_pw1_ = ConvUnit(src, nm("branch2.0.weight"), nm("branch2.1"), b2_in, branch, 1, 1, 1, true);
        b2_dw_ = ConvUnit(src, nm("branch2.3.weight"), nm("branch2.4"), branch, branch, 3, stride_, branch, false);
        b2_pw2_ = ConvUnit(src, nm("branch2.5.weight"), nm("branch2.6"), branch, branch, 1, 1, 1, true);
    }

    Tensor operator()(const Tensor& x) const
    {
        if (stride_ == 1) {
            auto [left, right] = chunk2_channels(x);
            const Tensor r = b2_pw2_(b2_dw_(b2_pw1_(right)));
            return channel_shuffle(concat_channels({&left, &r}), 2);
        }
        const Tensor l = b1_pw_(b1_dw_(x));
        const Tensor r = b2_pw2_(b2_dw_(b2_pw1_(x)));
        return channel_shuffle(concat_channels({&l, &r}), 2);
    }

    std::int64_t flops(const Shape& in) const
    {
        std::int64_t f = 0;
        Shape r_in = in;
        if (stride_ > 1) {
            const Shape d = b1_dw_.out_shape(in);
            f += b1_dw_.flops(in) + b1_pw_.flops(d);
        } else {
            r_in.c /= 2;
        }
        const Shape p1 = b2_pw1_.out_shape(r_in);
        const Shape dw = b2_dw_.out_shape(p1);
        return f + b2_pw1_.flops(r_in) + b2_dw_.flops(p1) + b2_pw2_.flops(dw);
    }

private:
    int stride_ = 1;
    ConvUnit b1_dw_, b1_pw_, b2_pw1_, b2_dw_, b2_pw2_;
};

/// Any block built from its spec.
class AnyBlock {
public:
    AnyBlock(const BlockSpec& spec, ParamSource& src, const std::string& prefix) : spec_(spec), impl_(make(spec, src, prefix)) {}

    Tensor operator()(const Tensor& x) const
    {
        if (x.shape().c != spec_.in_channels) {
            throw ShapeError(std::string(to_string(spec_.kind)) + ": expected " + std::to_string(spec_.in_channels) +
                             " input channels, got " + std::to_string(x.shape().c));
        }
        return std::visit([&](const auto& b) { return b(x); }, impl_);
    }
    std::int64_t flops(const Shape& in) const
    {
        return std::visit([&](const auto& b) { return b.flops(in); }, impl_);
    }
    const BlockSpec& spec() const { return spec_; }

private:
    using Impl = std::variant<Cbs, Stem, Focus, Bottleneck, C3, Spp, ShuffleV2>;

    static Impl make(const BlockSpec& s, ParamSource& src, const std::string& prefix)
    {
        s.validate();
        switch (s.kind) {
        case BlockKind::cbs: return Cbs(s, src, prefix);
        case BlockKind::stem: return Stem(s, src, prefix);
        case BlockKind::focus: return Focus(s, src, prefix);
        case BlockKind::bottleneck: return Bottleneck(s, src, prefix);
        case BlockKind::c3: return C3(s, src, prefix);
        case BlockKind::spp: return Spp(s, src, prefix);
        case BlockKind::shufflev2: return ShuffleV2(s, src, prefix);
        }
        throw ShapeError("unknown block kind");
    }

    BlockSpec spec_;
    Impl impl_;
};

/// Parameter declarations a block makes, in build order.
inline std::vector<ParamDecl> declare_params(const BlockSpec& spec, const std::string& prefix = {})
{
    DeclCollector c;
    AnyBlock(spec, c, prefix);
    return c.decls();
}

} // namespace yoloface
