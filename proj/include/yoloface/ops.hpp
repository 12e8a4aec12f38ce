#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "yoloface/tensor.hpp"

namespace yoloface {

/// Output extent of a sliding window: floor((in + 2*pad - k) / stride) + 1.
constexpr std::int64_t window_out(std::int64_t in, std::int64_t k, std::int64_t stride, std::int64_t pad)
{
    return (in + 2 * pad - k) / stride + 1;
}

struct BatchNorm {
    std::vector<float> gamma;
    std::vector<float> beta;
    std::vector<float> mean;
    std::vector<float> var;
    float eps = 1e-3f;

    std::size_t channels() const { return gamma.size(); }

    static BatchNorm identity(std::int64_t c, float eps = 0.0f)
    {
        const auto n = static_cast<std::size_t>(c);
        return {std::vector<float>(n, 1.0f), std::vector<float>(n, 0.0f), std::vector<float>(n, 0.0f),
                std::vector<float>(n, 1.0f), eps};
    }
};

namespace detail {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMatrix>;
using RowMap = Eigen::Map<RowMatrix>;

// Lays out one group's receptive fields as a [cin*kh*kw, ho*wo] matrix.
inline void im2col(const float* in, std::int64_t cin, std::int64_t h, std::int64_t w, std::int64_t kh,
                   std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t ho, std::int64_t wo,
                   float* cols)
{
    for (std::int64_t c = 0; c < cin; ++c) {
        const float* src = in + c * h * w;
        for (std::int64_t ky = 0; ky < kh; ++ky) {
            for (std::int64_t kx = 0; kx < kw; ++kx) {
                float* dst = cols + ((c * kh + ky) * kw + kx) * ho * wo;
                for (std::int64_t oy = 0; oy < ho; ++oy) {
                    const std::int64_t iy = oy * stride - pad + ky;
                    float* row = dst + oy * wo;
                    if (iy < 0 || iy >= h) {
                        std::fill(row, row + wo, 0.0f);
                        continue;
                    }
                    const float* srow = src + iy * w;
                    for (std::int64_t ox = 0; ox < wo; ++ox) {
                        const std::int64_t ix = ox * stride - pad + kx;
                        row[ox] = (ix >= 0 && ix < w) ? srow[ix] : 0.0f;
                    }
                }
            }
        }
    }
}

inline void depthwise(const float* in, std::int64_t h, std::int64_t w, const float* k, std::int64_t kh,
                      std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t ho, std::int64_t wo,
                      float bias, float* out)
{
    for (std::int64_t oy = 0; oy < ho; ++oy) {
        for (std::int64_t ox = 0; ox < wo; ++ox) {
            float acc = 0.0f;
            for (std::int64_t ky = 0; ky < kh; ++ky) {
                const std::int64_t iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= h) continue;
                for (std::int64_t kx = 0; kx < kw; ++kx) {
                    const std::int64_t ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= w) continue;
                    acc += in[iy * w + ix] * k[ky * kw + kx];
                }
            }
            out[oy * wo + ox] = acc + bias;
        }
    }
}

} // namespace detail

/// Cross-correlation. `weight` is laid out [Cout, Cin/groups, kh, kw]; `bias` is empty or length Cout.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, std::span<const float> bias, int stride, int pad,
                     int groups = 1)
{
    const Shape& is = input.shape();
    const Shape& ws = weight.shape();
    if (stride < 1 || pad < 0 || groups < 1) throw ShapeError("conv2d: stride >= 1, pad >= 0, groups >= 1 required");
    if (is.c % groups != 0 || ws.n % groups != 0) {
        throw ShapeError("conv2d: channels " + std::to_string(is.c) + "->" + std::to_string(ws.n) +
                         " not divisible by groups " + std::to_string(groups));
    }
    const std::int64_t cin_g = is.c / groups;
    const std::int64_t cout_g = ws.n / groups;
    if (ws.c != cin_g) {
        throw ShapeError("conv2d: weight expects " + std::to_string(ws.c * groups) + " input channels, got " +
                         std::to_string(is.c));
    }
    if (!bias.empty() && static_cast<std::int64_t>(bias.size()) != ws.n) {
        throw ShapeError("conv2d: bias length " + std::to_string(bias.size()) + " != Cout " + std::to_string(ws.n));
    }
    const std::int64_t ho = window_out(is.h, ws.h, stride, pad);
    const std::int64_t wo = window_out(is.w, ws.w, stride, pad);
    if (ho < 1 || wo < 1) throw ShapeError("conv2d: kernel larger than padded input " + is.str());

    Tensor out(Shape{is.n, ws.n, ho, wo});
    const std::int64_t plane = ho * wo;
    const std::int64_t kdim = cin_g * ws.h * ws.w;
    const bool direct_1x1 = ws.h == 1 && ws.w == 1 && stride == 1 && pad == 0;
    const bool is_depthwise = cin_g == 1 && cout_g == 1;
    std::vector<float> cols;
    if (!direct_1x1 && !is_depthwise) cols.resize(static_cast<std::size_t>(kdim * plane));

    for (std::int64_t n = 0; n < is.n; ++n) {
        for (std::int64_t g = 0; g < groups; ++g) {
            const float* in = input.plane(n, g * cin_g);
            float* dst = out.plane(n, g * cout_g);
            const float* wg = weight.ptr() + g * cout_g * kdim;
            if (is_depthwise) {
                detail::depthwise(in, is.h, is.w, wg, ws.h, ws.w, stride, pad, ho, wo,
                                  bias.empty() ? 0.0f : bias[static_cast<std::size_t>(g)], dst);
                continue;
            }
            const float* rhs = in;
            if (!direct_1x1) {
                detail::im2col(in, cin_g, is.h, is.w, ws.h, ws.w, stride, pad, ho, wo, cols.data());
                rhs = cols.data();
            }
            detail::RowMap o(dst, cout_g, plane);
            o.noalias() = detail::ConstRowMap(wg, cout_g, kdim) * detail::ConstRowMap(rhs, kdim, plane);
            if (!bias.empty()) {
                for (std::int64_t oc = 0; oc < cout_g; ++oc) {
                    o.row(oc).array() += bias[static_cast<std::size_t>(g * cout_g + oc)];
                }
            }
        }
    }
    require_finite(out, "conv2d");
    return out;
}

inline Tensor conv2d(const Tensor& input, const Tensor& weight, int stride, int pad, int groups = 1)
{
    return conv2d(input, weight, std::span<const float>{}, stride, pad, groups);
}

inline void check_bn(const BatchNorm& bn, std::int64_t c, const char* op)
{
    const auto n = static_cast<std::size_t>(c);
    if (bn.gamma.size() != n || bn.beta.size() != n || bn.mean.size() != n || bn.var.size() != n) {
        throw ShapeError(std::string(op) + ": batchnorm vectors must have length " + std::to_string(c));
    }
    for (float v : bn.var) {
        if (!(v >= 0.0f)) throw ShapeError(std::string(op) + ": batchnorm variance must be >= 0");
    }
}

/// y = (x - mean) / sqrt(var + eps) * gamma + beta, per channel.
inline Tensor batchnorm_apply(const Tensor& input, const BatchNorm& bn)
{
    const Shape& s = input.shape();
    check_bn(bn, s.c, "batchnorm_apply");
    Tensor out(s);
    for (std::int64_t n = 0; n < s.n; ++n) {
        for (std::int64_t c = 0; c < s.c; ++c) {
            const auto ci = static_cast<std::size_t>(c);
            const float inv = 1.0f / std::sqrt(bn.var[ci] + bn.eps);
            const float* src = input.plane(n, c);
            float* dst = out.plane(n, c);
            for (std::int64_t i = 0; i < s.plane(); ++i) {
                dst[i] = (src[i] - bn.mean[ci]) * inv * bn.gamma[ci] + bn.beta[ci];
            }
        }
    }
    require_finite(out, "batchnorm_apply");
    return out;
}

struct FoldedConv {
    Tensor weight;
    std::vector<float> bias;
};

/// Rewrites conv (optionally with bias) followed by `bn` as a single biased conv.
inline FoldedConv fold_batchnorm(const Tensor& weight, std::span<const float> bias, const BatchNorm& bn)
{
    const Shape& ws = weight.shape();
    check_bn(bn, ws.n, "fold_batchnorm");
    if (!bias.empty() && static_cast<std::int64_t>(bias.size()) != ws.n) {
        throw ShapeError("fold_batchnorm: bias length mismatch");
    }
    FoldedConv f{Tensor(ws), std::vector<float>(static_cast<std::size_t>(ws.n))};
    const std::int64_t per_out = ws.c * ws.h * ws.w;
    for (std::int64_t o = 0; o < ws.n; ++o) {
        const auto oi = static_cast<std::size_t>(o);
        const double scale = static_cast<double>(bn.gamma[oi]) / std::sqrt(static_cast<double>(bn.var[oi]) + bn.eps);
        for (std::int64_t i = 0; i < per_out; ++i) {
            f.weight.ptr()[o * per_out + i] = static_cast<float>(weight.ptr()[o * per_out + i] * scale);
        }
        const double b = bias.empty() ? 0.0 : bias[oi];
        f.bias[oi] = static_cast<float>((b - bn.mean[oi]) * scale + bn.beta[oi]);
    }
    return f;
}

inline float silu_scalar(float x) { return x / (1.0f + std::exp(-x)); }

inline void silu_inplace(Tensor& t)
{
    for (float& v : t.data()) v = silu_scalar(v);
    require_finite(t, "silu");
}

inline Tensor silu(Tensor t)
{
    silu_inplace(t);
    return t;
}

/// Max pooling; padded cells never win.
inline Tensor maxpool(const Tensor& input, int k, int stride, int pad)
{
    const Shape& s = input.shape();
    if (k < 1 || stride < 1 || pad < 0) throw ShapeError("maxpool: k, stride >= 1 and pad >= 0 required");
    if (pad > k / 2) throw ShapeError("maxpool: pad must not exceed k/2");
    const std::int64_t ho = window_out(s.h, k, stride, pad);
    const std::int64_t wo = window_out(s.w, k, stride, pad);
    if (ho < 1 || wo < 1) throw ShapeError("maxpool: window larger than padded input " + s.str());
    Tensor out(Shape{s.n, s.c, ho, wo});
    for (std::int64_t n = 0; n < s.n; ++n) {
        for (std::int64_t c = 0; c < s.c; ++c) {
            const float* src = input.plane(n, c);
            float* dst = out.plane(n, c);
            for (std::int64_t oy = 0; oy < ho; ++oy) {
                const std::int64_t y0 = std::max<std::int64_t>(0, oy * stride - pad);
                const std::int64_t y1 = std::min<std::int64_t>(s.h, oy * stride - pad + k);
                for (std::int64_t ox = 0; ox < wo; ++ox) {
                    const std::int64_t x0 = std::max<std::int64_t>(0, ox * stride - pad);
                    const std::int64_t x1 = std::min<std::int64_t>(s.w, ox * stride - pad + k);
                    float m = -std::numeric_limits<float>::infinity();
                    for (std::int64_t y = y0; y < y1; ++y) {
                        for (std::int64_t x = x0; x < x1; ++x) m = std::max(m, src[y * s.w + x]);
                    }
                    dst[oy * wo + ox] = m;
                }
            }
        }
    }
    return out;
}

inline Tensor upsample_nearest2x(const Tensor& input)
{
    const Shape& s = input.shape();
    Tensor out(Shape{s.n, s.c, s.h * 2, s.w * 2});
    for (std::int64_t n = 0; n < s.n; ++n) {
        for (std::int64_t c = 0; c < s.c; ++c) {
            const float* src = input.plane(n, c);
            float* dst = out.plane(n, c);
            for (std::int64_t y = 0; y < s.h * 2; ++y) {
                for (std::int64_t x = 0; x < s.w * 2; ++x) dst[y * s.w * 2 + x] = src[(y / 2) * s.w + x / 2];
            }
        }
    }
    return out;
}

inline Tensor concat_channels(std::span<const Tensor* const> parts)
{
    if (parts.empty()) throw ShapeError("concat_channels: no inputs");
    const Shape& first = parts.front()->shape();
    std::int64_t c = 0;
    for (const Tensor* t : parts) {
        const Shape& s = t->shape();
        if (s.n != first.n || s.h != first.h || s.w != first.w) {
            throw ShapeError("concat_channels: " + s.str() + " incompatible with " + first.str());
        }
        c += s.c;
    }
    Tensor out(Shape{first.n, c, first.h, first.w});
    for (std::int64_t n = 0; n < first.n; ++n) {
        float* dst = out.plane(n, 0);
        for (const Tensor* t : parts) {
            const std::int64_t len = t->shape().c * first.plane();
            std::copy_n(t->plane(n, 0), len, dst);
            dst += len;
        }
    }
    return out;
}

inline Tensor concat_channels(std::initializer_list<const Tensor*> parts)
{
    return concat_channels(std::span<const Tensor* const>(parts.begin(), parts.size()));
}

inline Tensor add_elementwise(const Tensor& a, const Tensor& b)
{
    if (!(a.shape() == b.shape())) throw ShapeError("add_elementwise: " + a.shape().str() + " vs " + b.shape().str());
    Tensor out = a;
    for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] += b.data()[i];
    require_finite(out, "add_elementwise");
    return out;
}

/// Splits channels into two equal halves.
inline std::pair<Tensor, Tensor> chunk2_channels(const Tensor& input)
{
    const Shape& s = input.shape();
    if (s.c % 2 != 0) throw ShapeError("chunk2_channels: odd channel count " + std::to_string(s.c));
    const Shape half{s.n, s.c / 2, s.h, s.w};
    Tensor a(half), b(half);
    const std::int64_t len = half.c * s.plane();
    for (std::int64_t n = 0; n < s.n; ++n) {
        std::copy_n(input.plane(n, 0), len, a.plane(n, 0));
        std::copy_n(input.plane(n, half.c), len, b.plane(n, 0));
    }
    return {std::move(a), std::move(b)};
}

/// Source channel for each output channel: view as (groups, C/groups), transpose, flatten.
inline std::vector<std::int64_t> shuffle_permutation(std::int64_t channels, std::int64_t groups)
{
    if (groups < 1 || channels % groups != 0) {
        throw ShapeError("channel_shuffle: " + std::to_string(channels) + " channels not divisible by " +
                         std::to_string(groups));
    }
    const std::int64_t per = channels / groups;
    std::vector<std::int64_t> src(static_cast<std::size_t>(channels));
    for (std::int64_t i = 0; i < per; ++i) {
        for (std::int64_t g = 0; g < groups; ++g) src[static_cast<std::size_t>(i * groups + g)] = g * per + i;
    }
    return src;
}

inline Tensor permute_channels(const Tensor& input, std::span<const std::int64_t> src)
{
    const Shape& s = input.shape();
    if (static_cast<std::int64_t>(src.size()) != s.c) throw ShapeError("permute_channels: permutation length");
    Tensor out(s);
    for (std::int64_t n = 0; n < s.n; ++n) {
        for (std::int64_t c = 0; c < s.c; ++c) {
            std::copy_n(input.plane(n, src[static_cast<std::size_t>(c)]), s.plane(), out.plane(n, c));
        }
    }
    return out;
}

inline Tensor channel_shuffle(const Tensor& input, int groups)
{
    const auto perm = shuffle_permutation(input.shape().c, groups);
    return permute_channels(input, perm);
}

/// Focus-style space-to-depth: 2x2 neighbourhoods become 4*C channels ordered
/// (even row, even col), (odd row, even col), (even row, odd col), (odd row, odd col).
inline Tensor space_to_depth2(const Tensor& input)
{
    const Shape& s = input.shape();
    if (s.h % 2 != 0 || s.w % 2 != 0) throw ShapeError("space_to_depth2: odd spatial extent " + s.str());
    const std::int64_t ho = s.h / 2, wo = s.w / 2;
    Tensor out(Shape{s.n, s.c * 4, ho, wo});
    constexpr int offs[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
    for (std::int64_t n = 0; n < s.n; ++n) {
        for (int q = 0; q < 4; ++q) {
            for (std::int64_t c = 0; c < s.c; ++c) {
                const float* src = input.plane(n, c);
                float* dst = out.plane(n, q * s.c + c);
                for (std::int64_t y = 0; y < ho; ++y) {
                    for (std::int64_t x = 0; x < wo; ++x) {
                        dst[y * wo + x] = src[(2 * y + offs[q][0]) * s.w + 2 * x + offs[q][1]];
                    }
                }
            }
        }
    }
    return out;
}

} // namespace yoloface
