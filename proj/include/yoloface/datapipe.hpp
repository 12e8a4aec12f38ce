#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "yoloface/params.hpp"
#include "yoloface/tensor.hpp"

namespace yoloface {

/// Round half away from zero; the single rounding rule used for every derived integer.
inline std::int64_t round_half_away(double x)
{
    return static_cast<std::int64_t>(x < 0 ? -std::floor(-x + 0.5) : std::floor(x + 0.5));
}

struct Point {
    float x = 0.0f;
    float y = 0.0f;
    bool operator==(const Point&) const = default;
};

/// 8-bit interleaved RGB raster.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(int w, int h, std::uint8_t fill = 0)
        : width(w), height(h), pixels(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3, fill)
    {
    }

    std::uint8_t* px(int x, int y) { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
    const std::uint8_t* px(int x, int y) const { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
    bool operator==(const Image&) const = default;
};

/// [1, 3, H, W] tensor with values in [0, 1].
inline Tensor image_to_tensor(const Image& img)
{
    Tensor t(Shape{1, 3, img.height, img.width});
    for (int c = 0; c < 3; ++c) {
        float* dst = t.plane(0, c);
        for (int y = 0; y < img.height; ++y) {
            for (int x = 0; x < img.width; ++x) dst[y * img.width + x] = img.px(x, y)[c] / 255.0f;
        }
    }
    return t;
}

// ---------------------------------------------------------------------------
// Letterbox

struct LetterboxTransform {
    double scale = 1.0;
    int pad_left = 0;
    int pad_top = 0;
    int out_w = 0;
    int out_h = 0;
    int resized_w = 0;
    int resized_h = 0;
    int src_w = 0;
    int src_h = 0;

    double apply_x(double x) const { return x * scale + pad_left; }
    double apply_y(double y) const { return y * scale + pad_top; }
    double invert_x(double x) const { return (x - pad_left) / scale; }
    double invert_y(double y) const { return (y - pad_top) / scale; }

    Point apply(Point p) const { return {static_cast<float>(apply_x(p.x)), static_cast<float>(apply_y(p.y))}; }
    Point invert(Point p) const { return {static_cast<float>(invert_x(p.x)), static_cast<float>(invert_y(p.y))}; }

    static LetterboxTransform identity(int w, int h) { return {1.0, 0, 0, w, h, w, h, w, h}; }
};

/// Longer edge scaled to `target`; the shorter edge is scaled by the same factor and padded
/// symmetrically up to the next multiple of `stride_mult` (left/top gets the floor of the split).
inline LetterboxTransform letterbox(int img_w, int img_h, int target = 640, int stride_mult = 32)
{
    if (img_w < 1 || img_h < 1) throw ShapeError("letterbox: image dimensions must be >= 1");
    if (target < 1 || stride_mult < 1 || target % stride_mult != 0) {
        throw ConfigError("letterbox: target must be a positive multiple of the stride multiple");
    }
    LetterboxTransform t;
    t.src_w = img_w;
    t.src_h = img_h;
    t.scale = static_cast<double>(target) / std::max(img_w, img_h);
    t.resized_w = img_w >= img_h ? target : static_cast<int>(std::max<std::int64_t>(1, round_half_away(img_w * t.scale)));
    t.resized_h = img_h >= img_w ? target : static_cast<int>(std::max<std::int64_t>(1, round_half_away(img_h * t.scale)));
    t.out_w = (t.resized_w + stride_mult - 1) / stride_mult * stride_mult;
    t.out_h = (t.resized_h + stride_mult - 1) / stride_mult * stride_mult;
    t.pad_left = (t.out_w - t.resized_w) / 2;
    t.pad_top = (t.out_h - t.resized_h) / 2;
    return t;
}

/// Bilinear resize (half-pixel centres, edge clamped).
inline Image resize_bilinear(const Image& src, int w, int h)
{
    if (w == src.width && h == src.height) return src;
    Image dst(w, h);
    const double sx = static_cast<double>(src.width) / w;
    const double sy = static_cast<double>(src.height) / h;
    for (int y = 0; y < h; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, src.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < w; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, src.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                const double top = src.px(x0, y0)[c] * (1 - wx) + src.px(x1, y0)[c] * wx;
                const double bot = src.px(x0, y1)[c] * (1 - wx) + src.px(x1, y1)[c] * wx;
                dst.px(x, y)[c] = static_cast<std::uint8_t>(std::clamp(std::lround(top * (1 - wy) + bot * wy), 0L, 255L));
            }
        }
    }
    return dst;
}

inline Image apply_letterbox(const Image& img, const LetterboxTransform& t, std::uint8_t pad_value = 114)
{
    if (img.width != t.src_w || img.height != t.src_h) {
        throw ShapeError("apply_letterbox: transform was computed for a different image size");
    }
    const Image resized = resize_bilinear(img, t.resized_w, t.resized_h);
    if (t.out_w == t.resized_w && t.out_h == t.resized_h) return resized;
    Image out(t.out_w, t.out_h, pad_value);
    for (int y = 0; y < resized.height; ++y) {
        std::copy_n(resized.px(0, y), static_cast<std::size_t>(resized.width) * 3, out.px(t.pad_left, y + t.pad_top));
    }
    return out;
}

inline std::vector<Point> invert_points(std::vector<Point> pts, const LetterboxTransform& t)
{
    for (auto& p : pts) p = t.invert(p);
    return pts;
}

// ---------------------------------------------------------------------------
// Annotations

struct FaceAttributes {
    int blur = 0;
    int expression = 0;
    int illumination = 0;
    int invalid = 0;
    int occlusion = 0;
    int pose = 0;
    bool operator==(const FaceAttributes&) const = default;
};

struct FaceAnnotation {
    float x = 0, y = 0, w = 0, h = 0; // top-left corner and size, pixels
    bool has_landmarks = false;
    std::array<Point, 5> landmarks{};
    std::array<bool, 5> landmark_valid{};
    FaceAttributes attributes;

    bool operator==(const FaceAnnotation&) const = default;
};

using AnnotationMap = std::map<std::string, std::vector<FaceAnnotation>>;

class ParseError : public Error {
public:
    ParseError(std::string source, std::size_t line, const std::string& msg)
        : Error(source + ":" + std::to_string(line) + ": " + msg), line_(line)
    {
    }
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

namespace detail {

inline std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<double> parse_numbers(const std::string& line, const std::string& source, std::size_t lineno)
{
    std::vector<double> out;
    std::istringstream is(line);
    std::string tok;
    while (is >> tok) {
        std::size_t used = 0;
        double v = 0;
        try {
            v = std::stod(tok, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != tok.size() || !std::isfinite(v)) throw ParseError(source, lineno, "non-numeric field '" + tok + "'");
        out.push_back(v);
    }
    return out;
}

inline FaceAnnotation face_from_numbers(const std::vector<double>& v, bool extended, const std::string& source,
                                        std::size_t lineno)
{
    if (v.size() < 4) throw ParseError(source, lineno, "face line needs at least 4 numbers");
    FaceAnnotation f;
    f.x = static_cast<float>(v[0]);
    f.y = static_cast<float>(v[1]);
    f.w = static_cast<float>(v[2]);
    f.h = static_cast<float>(v[3]);
    if (f.w < 0 || f.h < 0) throw ParseError(source, lineno, "negative box size");
    if (extended) {
        if (v.size() == 4) return f;
        if (v.size() < 19) throw ParseError(source, lineno, "landmark line needs 4 box + 15 landmark numbers");
        f.has_landmarks = true;
        for (int k = 0; k < 5; ++k) {
            const double lx = v[4 + 3 * k], ly = v[5 + 3 * k];
            f.landmarks[k] = {static_cast<float>(lx), static_cast<float>(ly)};
            f.landmark_valid[k] = !(lx == -1.0 || ly == -1.0);
        }
    } else if (v.size() >= 10) {
        f.attributes = {static_cast<int>(v[4]), static_cast<int>(v[5]), static_cast<int>(v[6]),
                        static_cast<int>(v[7]), static_cast<int>(v[8]), static_cast<int>(v[9])};
    }
    return f;
}

} // namespace detail

/// Parses either WiderFace ground-truth layout:
///  - original: image path line, face count line, one "x y w h blur expr illum invalid occl pose" line per face;
///    a zero count is followed by a single placeholder box line which is skipped.
///  - landmark-extended: "# image path" line, then one "x y w h (lx ly flag) x5 [score]" line per face;
///    a landmark coordinate of -1 marks it invalid.
inline AnnotationMap parse_widerface(std::istream& in, const std::string& source = "<annotations>")
{
    std::vector<std::string> lines;
    for (std::string l; std::getline(in, l);) lines.push_back(l);

    AnnotationMap out;
    std::size_t i = 0;
    const auto skip_blank = [&] {
        while (i < lines.size() && detail::trim(lines[i]).empty()) ++i;
    };
    skip_blank();
    if (i == lines.size()) return out;
    const bool extended = detail::trim(lines[i]).starts_with('#');

    if (extended) {
        std::string current;
        bool have_image = false;
        for (; i < lines.size(); ++i) {
            const std::string l = detail::trim(lines[i]);
            if (l.empty()) continue;
            if (l.starts_with('#')) {
                current = detail::trim(l.substr(1));
                if (current.empty()) throw ParseError(source, i + 1, "empty image path");
                out[current];
                have_image = true;
                continue;
            }
            if (!have_image) throw ParseError(source, i + 1, "face line before any image line");
            out[current].push_back(detail::face_from_numbers(detail::parse_numbers(l, source, i + 1), true, source, i + 1));
        }
        return out;
    }

    while (true) {
        skip_blank();
        if (i == lines.size()) break;
        const std::string path = detail::trim(lines[i]);
        const std::size_t path_line = i + 1;
        ++i;
        if (i == lines.size()) throw ParseError(source, path_line, "truncated file: missing face count");
        const std::string count_str = detail::trim(lines[i]);
        std::size_t used = 0;
        long count = -1;
        try {
            count = std::stol(count_str, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (count_str.empty() || used != count_str.size() || count < 0) {
            throw ParseError(source, i + 1, "malformed face count '" + count_str + "'");
        }
        ++i;
        auto& faces = out[path];
        const long box_lines = count == 0 ? 1 : count;
        for (long k = 0; k < box_lines; ++k, ++i) {
            if (i >= lines.size()) {
                if (count == 0) break; // placeholder line may be absent at EOF
                throw ParseError(source, i, "truncated file: expected " + std::to_string(count) + " face lines");
            }
            const auto nums = detail::parse_numbers(lines[i], source, i + 1);
            if (count == 0) {
                if (nums.empty() || std::all_of(nums.begin(), nums.end(), [](double v) { return v == 0.0; })) continue;
                throw ParseError(source, i + 1, "count 0 must be followed by an all-zero placeholder line");
            }
            faces.push_back(detail::face_from_numbers(nums, false, source, i + 1));
        }
    }
    return out;
}

inline AnnotationMap parse_widerface(const std::string& text, const std::string& source = "<annotations>")
{
    std::istringstream is(text);
    return parse_widerface(is, source);
}

// ---------------------------------------------------------------------------
// Augmentations. There is deliberately no vertical flip: it hurts face detection.

struct Sample {
    Image image;
    std::vector<FaceAnnotation> faces;
};

/// Mirror x' = W-1-x on pixel indices; boxes map to x' = W - x - w. Landmark order is
/// remapped so left/right eyes and mouth corners keep their semantic slots.
inline Sample hflip(const Sample& s)
{
    Sample out{Image(s.image.width, s.image.height), s.faces};
    const int W = s.image.width;
    for (int y = 0; y < s.image.height; ++y) {
        for (int x = 0; x < W; ++x) std::copy_n(s.image.px(W - 1 - x, y), 3, out.image.px(x, y));
    }
    static constexpr std::array<int, 5> remap{1, 0, 2, 4, 3};
    for (auto& f : out.faces) {
        const auto src = f;
        f.x = static_cast<float>(W) - src.x - src.w;
        for (int k = 0; k < 5; ++k) {
            const int from = remap[static_cast<std::size_t>(k)];
            f.landmarks[k] = src.landmarks[from];
            f.landmark_valid[k] = src.landmark_valid[from];
            if (f.landmark_valid[k]) f.landmarks[k].x = static_cast<float>(W - 1) - f.landmarks[k].x;
        }
    }
    return out;
}

struct CropWindow {
    int x = 0, y = 0, w = 0, h = 0;
};

namespace detail {

// Clips a face to [x0,x1)x[y0,y1), shifts by (dx,dy), invalidates landmarks outside. Returns false if dropped.
inline bool clip_face(FaceAnnotation& f, float x0, float y0, float x1, float y1, float dx, float dy, int min_face)
{
    const float bx1 = std::clamp(f.x, x0, x1), by1 = std::clamp(f.y, y0, y1);
    const float bx2 = std::clamp(f.x + f.w, x0, x1), by2 = std::clamp(f.y + f.h, y0, y1);
    if (bx2 - bx1 < static_cast<float>(min_face) || by2 - by1 < static_cast<float>(min_face) || bx2 <= bx1 ||
        by2 <= by1) {
        return false;
    }
    f.x = bx1 + dx;
    f.y = by1 + dy;
    f.w = bx2 - bx1;
    f.h = by2 - by1;
    for (int k = 0; k < 5; ++k) {
        if (!f.landmark_valid[k]) continue;
        auto& p = f.landmarks[k];
        if (p.x < x0 || p.x >= x1 || p.y < y0 || p.y >= y1) {
            f.landmark_valid[k] = false;
            p = {-1.0f, -1.0f};
        } else {
            p = {p.x + dx, p.y + dy};
        }
    }
    return true;
}

} // namespace detail

/// Crops to `win`. Faces whose centre lies outside the window are dropped, the rest are clipped;
/// faces narrower or shorter than `min_face` pixels afterwards are dropped.
inline Sample crop(const Sample& s, CropWindow win, int min_face = 4)
{
    if (win.w < 1 || win.h < 1 || win.x < 0 || win.y < 0 || win.x + win.w > s.image.width ||
        win.y + win.h > s.image.height) {
        throw ShapeError("crop: window outside image");
    }
    Sample out{Image(win.w, win.h), {}};
    for (int y = 0; y < win.h; ++y) {
        std::copy_n(s.image.px(win.x, win.y + y), static_cast<std::size_t>(win.w) * 3, out.image.px(0, y));
    }
    const auto x0 = static_cast<float>(win.x), y0 = static_cast<float>(win.y);
    const auto x1 = static_cast<float>(win.x + win.w), y1 = static_cast<float>(win.y + win.h);
    for (auto f : s.faces) {
        const float cx = f.x + f.w / 2, cy = f.y + f.h / 2;
        if (cx < x0 || cx >= x1 || cy < y0 || cy >= y1) continue;
        if (detail::clip_face(f, x0, y0, x1, y1, -x0, -y0, min_face)) out.faces.push_back(f);
    }
    return out;
}

/// Seeded crop whose width and height are each a uniform fraction in [0.5, 1] of the image.
inline Sample random_crop(const Sample& s, std::uint64_t seed, int min_face = 4)
{
    std::mt19937_64 rng(splitmix64(seed));
    const double fw = 0.5 + 0.5 * uniform01(rng);
    const double fh = 0.5 + 0.5 * uniform01(rng);
    CropWindow win;
    win.w = static_cast<int>(std::clamp<std::int64_t>(round_half_away(fw * s.image.width), 1, s.image.width));
    win.h = static_cast<int>(std::clamp<std::int64_t>(round_half_away(fh * s.image.height), 1, s.image.height));
    win.x = static_cast<int>(std::floor(uniform01(rng) * (s.image.width - win.w + 1)));
    win.y = static_cast<int>(std::floor(uniform01(rng) * (s.image.height - win.h + 1)));
    return crop(s, win, min_face);
}

/// Four samples tiled around a seeded centre on a 2*target canvas (centre uniform in the middle
/// half), then centre-cropped to target x target. Small faces are dropped after clipping.
inline Sample mosaic(const std::array<const Sample*, 4>& parts, int target, std::uint64_t seed, int min_face = 4,
                     std::uint8_t pad_value = 114)
{
    if (target < 2) throw ConfigError("mosaic: target must be >= 2");
    const int canvas = 2 * target;
    std::mt19937_64 rng(splitmix64(seed));
    const int xc = target / 2 + static_cast<int>(std::floor(uniform01(rng) * (target + 1)));
    const int yc = target / 2 + static_cast<int>(std::floor(uniform01(rng) * (target + 1)));

    // Final output is the canvas window [off, off + target).
    const int off = target / 2;
    Sample out{Image(target, target, pad_value), {}};
    for (int i = 0; i < 4; ++i) {
        const Sample& s = *parts[static_cast<std::size_t>(i)];
        const int w = s.image.width, h = s.image.height;
        int x1a = 0, y1a = 0, x2a = 0, y2a = 0, x1b = 0, y1b = 0;
        switch (i) {
        case 0:
            x1a = std::max(xc - w, 0), y1a = std::max(yc - h, 0), x2a = xc, y2a = yc;
            x1b = w - (x2a - x1a), y1b = h - (y2a - y1a);
            break;
        case 1:
            x1a = xc, y1a = std::max(yc - h, 0), x2a = std::min(xc + w, canvas), y2a = yc;
            x1b = 0, y1b = h - (y2a - y1a);
            break;
        case 2:
            x1a = std::max(xc - w, 0), y1a = yc, x2a = xc, y2a = std::min(canvas, yc + h);
            x1b = w - (x2a - x1a), y1b = 0;
            break;
        default:
            x1a = xc, y1a = yc, x2a = std::min(xc + w, canvas), y2a = std::min(canvas, yc + h);
            x1b = 0, y1b = 0;
            break;
        }
        // Paste the visible part of the placed region into the output window.
        const int vx1 = std::max(x1a, off), vy1 = std::max(y1a, off);
        const int vx2 = std::min(x2a, off + target), vy2 = std::min(y2a, off + target);
        for (int y = vy1; y < vy2; ++y) {
            if (vx2 <= vx1) break;
            std::copy_n(s.image.px(x1b + (vx1 - x1a), y1b + (y - y1a)), static_cast<std::size_t>(vx2 - vx1) * 3,
                        out.image.px(vx1 - off, y - off));
        }
        if (vx2 <= vx1 || vy2 <= vy1) continue;
        // Source coordinates of the visible region.
        const auto sx0 = static_cast<float>(x1b + (vx1 - x1a)), sy0 = static_cast<float>(y1b + (vy1 - y1a));
        const auto sx1 = sx0 + static_cast<float>(vx2 - vx1), sy1 = sy0 + static_cast<float>(vy2 - vy1);
        const auto dx = static_cast<float>(vx1 - off) - sx0, dy = static_cast<float>(vy1 - off) - sy0;
        for (auto f : s.faces) {
            if (detail::clip_face(f, sx0, sy0, sx1, sy1, dx, dy, min_face)) out.faces.push_back(f);
        }
    }
    return out;
}

/// Training-time augmentation switches. Vertical flipping is not offered.
struct AugmentConfig {
    double hflip_prob = 0.5;
    double crop_prob = 0.5;
    bool mosaic = true;
    bool ignore_small_faces = true;
    int min_face = 4;

    int effective_min_face() const { return ignore_small_faces ? min_face : 0; }

    void validate() const
    {
        if (hflip_prob < 0 || hflip_prob > 1 || crop_prob < 0 || crop_prob > 1) {
            throw ConfigError("augment: probabilities must lie in [0, 1]");
        }
        if (min_face < 0) throw ConfigError("augment: min_face must be >= 0");
    }
};

/// Per-sample crop and horizontal flip, each drawn from a stream derived from `seed`.
inline Sample augment(const Sample& s, const AugmentConfig& cfg, std::uint64_t seed)
{
    cfg.validate();
    std::mt19937_64 rng(splitmix64(seed));
    Sample out = s;
    if (uniform01(rng) < cfg.crop_prob) out = random_crop(out, derive_seed(seed, 1), cfg.effective_min_face());
    if (uniform01(rng) < cfg.hflip_prob) out = hflip(out);
    return out;
}

/// Reads an augmentation config; unknown keys are rejected, and any vertical-flip key
/// gets a dedicated error since that augmentation is not available.
inline AugmentConfig augment_config_from_json(const nlohmann::json& j)
{
    if (!j.is_object()) throw ConfigError("augment config must be a JSON object");
    AugmentConfig c;
    for (const auto& [key, value] : j.items()) {
        if (key == "flipud" || key == "vflip" || key == "vertical_flip" || key == "vflip_prob") {
            throw ConfigError("augment config: vertical flipping is not supported ('" + key + "')");
        }
        try {
            if (key == "hflip_prob") c.hflip_prob = value.get<double>();
            else if (key == "crop_prob") c.crop_prob = value.get<double>();
            else if (key == "mosaic") c.mosaic = value.get<bool>();
            else if (key == "ignore_small_faces") c.ignore_small_faces = value.get<bool>();
            else if (key == "min_face") c.min_face = value.get<int>();
            else throw ConfigError("augment config: unknown field '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("augment config: bad value for '" + key + "': " + e.what());
        }
    }
    c.validate();
    return c;
}

} // namespace yoloface
