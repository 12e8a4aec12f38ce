#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>
#include <tuple>
#include <vector>

#include "yoloface/datapipe.hpp"
#include "yoloface/tensor.hpp"

namespace yoloface {

struct Anchor {
    float w = 0.0f;
    float h = 0.0f;
    bool operator==(const Anchor&) const = default;
};

struct AnchorLevel {
    int stride = 8;
    std::vector<Anchor> anchors;
    bool operator==(const AnchorLevel&) const = default;
};

/// Per-level anchors in input-image pixels; level i has stride 8 * 2^i.
struct AnchorSet {
    std::vector<AnchorLevel> levels;

    std::size_t anchors_per_level() const { return levels.empty() ? 0 : levels.front().anchors.size(); }

    void validate() const
    {
        if (levels.empty()) throw ConfigError("anchors: at least one level required");
        for (std::size_t i = 0; i < levels.size(); ++i) {
            const auto& l = levels[i];
            if (l.anchors.empty()) throw ConfigError("anchors: level " + std::to_string(i) + " is empty");
            if (l.anchors.size() != levels.front().anchors.size()) {
                throw ConfigError("anchors: every level must hold the same number of anchors");
            }
            if (i > 0 && l.stride <= levels[i - 1].stride) throw ConfigError("anchors: strides must increase");
            for (const auto& a : l.anchors) {
                if (!(a.w > 0 && a.h > 0)) throw ConfigError("anchors: sizes must be positive");
            }
        }
    }

    bool operator==(const AnchorSet&) const = default;
};

/// Anchor sizes shipped with the reference face-detector configurations.
inline AnchorSet default_anchors(bool p6)
{
    if (!p6) {
        return {{{8, {{4, 5}, {8, 10}, {13, 16}}},
                 {16, {{23, 29}, {43, 55}, {73, 105}}},
                 {32, {{146, 217}, {231, 300}, {335, 433}}}}};
    }
    return {{{8, {{6, 7}, {9, 11}, {13, 16}}},
             {16, {{18, 23}, {26, 33}, {37, 47}}},
             {32, {{54, 67}, {77, 104}, {112, 154}}},
             {64, {{174, 238}, {258, 355}, {445, 568}}}}};
}

struct Box {
    float x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    float width() const { return x2 - x1; }
    float height() const { return y2 - y1; }
    float area() const { return std::max(0.0f, x2 - x1) * std::max(0.0f, y2 - y1); }
    bool operator==(const Box&) const = default;
};

enum class ScoreMode { conf, conf_x_cls };

struct Detection {
    Box box;
    float conf = 0;
    float cls = 0;
    std::array<Point, 5> landmarks{};
    bool landmark_valid = false;
    /// Ranking key: conf, or conf * cls under ScoreMode::conf_x_cls.
    float score = 0;
};

/// Channels per anchor: 4 box + 1 conf + 2 * landmarks + 1 cls.
constexpr int channels_per_anchor(int num_landmarks) { return 6 + 2 * num_landmarks; }

/// Logistic function, kept strictly below 1 so that a threshold of 1.0 rejects everything.
inline float sigmoid(float x) { return std::min(1.0f / (1.0f + std::exp(-x)), 0x1.fffffep-1f); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline float iou(const Box& a, const Box& b)
{
    const float iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const float ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (iw <= 0 || ih <= 0) return 0.0f;
    const float inter = iw * ih;
    const float uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0f;
}

/// Decodes one level map for batch item `n`. Per-anchor channel order is
/// [tx, ty, tw, th, conf, (lx, ly) x num_landmarks, cls]; landmarks decode linearly, no sigmoid.
/// Candidates below `min_conf` are skipped.
inline std::vector<Detection> decode_level(const Tensor& raw, const AnchorLevel& level, int num_landmarks = 5,
                                           std::int64_t n = 0, float min_conf = 0.0f,
                                           ScoreMode mode = ScoreMode::conf)
{
    const Shape& s = raw.shape();
    const int per = channels_per_anchor(num_landmarks);
    const auto na = static_cast<std::int64_t>(level.anchors.size());
    if (s.c != na * per) {
        throw ShapeError("decode_level: expected " + std::to_string(na * per) + " channels, got " + std::to_string(s.c));
    }
    if (n < 0 || n >= s.n) throw ShapeError("decode_level: batch index out of range");
    const double stride = level.stride;
    std::vector<Detection> out;
    for (std::int64_t a = 0; a < na; ++a) {
        const Anchor anc = level.anchors[static_cast<std::size_t>(a)];
        const double aw = anc.w, ah = anc.h;
        const auto ch = [&](int j) { return raw.plane(n, a * per + j); };
        const auto sig = [&](int j, std::int64_t i) { return sigmoid(static_cast<double>(ch(j)[i])); };
        const float* conf_p = ch(4);
        for (std::int64_t cy = 0; cy < s.h; ++cy) {
            for (std::int64_t cx = 0; cx < s.w; ++cx) {
                const std::int64_t i = cy * s.w + cx;
                const float conf = sigmoid(conf_p[i]);
                if (conf < min_conf) continue;
                Detection d;
                const double gx = static_cast<double>(cx) * stride, gy = static_cast<double>(cy) * stride;
                const double bx = (2.0 * sig(0, i) - 0.5) * stride + gx;
                const double by = (2.0 * sig(1, i) - 0.5) * stride + gy;
                const double tw = 2.0 * sig(2, i), th = 2.0 * sig(3, i);
                const double hw = tw * tw * aw / 2, hh = th * th * ah / 2;
                d.box = {static_cast<float>(bx - hw), static_cast<float>(by - hh), static_cast<float>(bx + hw),
                         static_cast<float>(by + hh)};
                d.conf = conf;
                d.cls = sigmoid(ch(per - 1)[i]);
                d.landmark_valid = num_landmarks > 0;
                for (int k = 0; k < std::min(num_landmarks, 5); ++k) {
                    d.landmarks[static_cast<std::size_t>(k)] = {
                        static_cast<float>(ch(5 + 2 * k)[i] * aw + gx),
                        static_cast<float>(ch(6 + 2 * k)[i] * ah + gy)};
                }
                d.score = mode == ScoreMode::conf ? d.conf : d.conf * d.cls;
                out.push_back(d);
            }
        }
    }
    return out;
}

struct BoxLogits {
    double tx = 0, ty = 0, tw = 0, th = 0;
};

/// Inverse of the box decode for cell (cx, cy). Requires the centre offset within (-0.5, 1.5)
/// cells and the size ratio within (0, 4) of the anchor.
inline BoxLogits encode_box(const Box& b, std::int64_t cx, std::int64_t cy, const Anchor& anchor, int stride)
{
    const double s = stride;
    const double ox = ((b.x1 + b.x2) / 2.0) / s - static_cast<double>(cx);
    const double oy = ((b.y1 + b.y2) / 2.0) / s - static_cast<double>(cy);
    const double rw = (b.x2 - b.x1) / static_cast<double>(anchor.w);
    const double rh = (b.y2 - b.y1) / static_cast<double>(anchor.h);
    if (!(ox > -0.5 && ox < 1.5 && oy > -0.5 && oy < 1.5 && rw > 0 && rw < 4 && rh > 0 && rh < 4)) {
        throw ShapeError("encode_box: box outside the decodable range of this cell/anchor");
    }
    return {logit((ox + 0.5) / 2.0), logit((oy + 0.5) / 2.0), logit(std::sqrt(rw) / 2.0), logit(std::sqrt(rh) / 2.0)};
}

/// Total order used by NMS: score descending, ties broken by box corners ascending, so the
/// result does not depend on input order.
inline bool ranks_before(const Detection& a, const Detection& b)
{
    if (a.score != b.score) return a.score > b.score;
    return std::tie(a.box.x1, a.box.y1, a.box.x2, a.box.y2, a.conf, a.cls) <
           std::tie(b.box.x1, b.box.y1, b.box.x2, b.box.y2, b.conf, b.cls);
}

/// Greedy NMS: walk detections in rank order, keep a box unless it overlaps an already-kept
/// box with IoU > iou_thr. Output is in rank order.
inline std::vector<Detection> nms(std::vector<Detection> dets, float iou_thr)
{
    std::stable_sort(dets.begin(), dets.end(), ranks_before);
    std::vector<Detection> kept;
    for (const auto& d : dets) {
        const bool suppressed =
            std::any_of(kept.begin(), kept.end(), [&](const Detection& k) { return iou(k.box, d.box) > iou_thr; });
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

struct PostprocessOptions {
    float conf_thr = 0.5f;
    float iou_thr = 0.5f;
    int num_landmarks = 5;
    ScoreMode score_mode = ScoreMode::conf;
};

/// Decode every level, threshold, NMS, then map boxes and landmarks back through the
/// letterbox and clip boxes to the source image.
inline std::vector<Detection> postprocess(const std::vector<Tensor>& levels, const AnchorSet& anchors,
                                          const LetterboxTransform& t, const PostprocessOptions& opt,
                                          std::int64_t n = 0)
{
    if (levels.size() != anchors.levels.size()) {
        throw ShapeError("postprocess: " + std::to_string(levels.size()) + " level maps for " +
                         std::to_string(anchors.levels.size()) + " anchor levels");
    }
    std::vector<Detection> cands;
    for (std::size_t i = 0; i < levels.size(); ++i) {
        auto d = decode_level(levels[i], anchors.levels[i], opt.num_landmarks, n, 0.0f, opt.score_mode);
        for (auto& x : d) {
            if (x.score >= opt.conf_thr) cands.push_back(x);
        }
    }
    auto kept = nms(std::move(cands), opt.iou_thr);
    std::vector<Detection> out;
    out.reserve(kept.size());
    const auto W = static_cast<float>(t.src_w), H = static_cast<float>(t.src_h);
    for (auto d : kept) {
        const Point p1 = t.invert({d.box.x1, d.box.y1});
        const Point p2 = t.invert({d.box.x2, d.box.y2});
        d.box = {std::clamp(p1.x, 0.0f, W), std::clamp(p1.y, 0.0f, H), std::clamp(p2.x, 0.0f, W),
                 std::clamp(p2.y, 0.0f, H)};
        if (!(d.box.x2 > d.box.x1 && d.box.y2 > d.box.y1)) continue;
        for (auto& lm : d.landmarks) lm = t.invert(lm);
        out.push_back(d);
    }
    return out;
}

} // namespace yoloface
