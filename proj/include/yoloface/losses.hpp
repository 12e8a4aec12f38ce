#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "yoloface/detect.hpp"
#include "yoloface/tensor.hpp"

namespace yoloface {

class WingParams {
public:
    explicit WingParams(double w = 10.0, double e = 2.0) : w_(w), e_(e)
    {
        if (!(w > 0) || !std::isfinite(w)) throw ConfigError("wing: w must be finite and > 0");
        if (!(e > 0) || !std::isfinite(e)) throw ConfigError("wing: e must be finite and > 0");
    }
    double w() const { return w_; }
    double e() const { return e_; }
    /// Offset joining the log and linear pieces.
    double C() const { return w_ - w_ * std::log1p(w_ / e_); }

private:
    double w_, e_;
};

inline double wing(double x, const WingParams& p)
{
    const double a = std::abs(x);
    return a < p.w() ? p.w() * std::log1p(a / p.e()) : a - p.C();
}

inline double wing_grad(double x, const WingParams& p)
{
    if (x == 0.0) return 0.0;
    const double a = std::abs(x);
    const double s = x > 0 ? 1.0 : -1.0;
    return a < p.w() ? s * p.w() / (p.e() + a) : s;
}

inline double l2(double x) { return x * x; }
inline double l2_grad(double x) { return 2.0 * x; }
inline double l1(double x) { return std::abs(x); }
inline double l1_grad(double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); }
inline double smooth_l1(double x)
{
    const double a = std::abs(x);
    return a < 1.0 ? 0.5 * x * x : a - 0.5;
}
inline double smooth_l1_grad(double x) { return std::abs(x) < 1.0 ? x : l1_grad(x); }

/// Five (x, y) landmarks as a flat vector, with ground truth and per-coordinate validity.
struct LandmarkVector {
    std::array<double, 10> s{};
    std::array<double, 10> target{};
    std::array<bool, 10> valid{true, true, true, true, true, true, true, true, true, true};

    static LandmarkVector from_points(const std::array<Point, 5>& pred, const std::array<Point, 5>& gt,
                                      const std::array<bool, 5>& valid)
    {
        LandmarkVector v;
        for (std::size_t k = 0; k < 5; ++k) {
            v.s[2 * k] = pred[k].x;
            v.s[2 * k + 1] = pred[k].y;
            v.target[2 * k] = gt[k].x;
            v.target[2 * k + 1] = gt[k].y;
            v.valid[2 * k] = v.valid[2 * k + 1] = valid[k];
        }
        return v;
    }
};

/// Differences in raw pixels, or divided by the anchor size (x by width, y by height).
struct LandmarkUnits {
    bool normalized = false;
    Anchor anchor{1.0f, 1.0f};

    static LandmarkUnits pixels() { return {}; }
    static LandmarkUnits anchor_normalized(Anchor a)
    {
        if (!(a.w > 0 && a.h > 0)) throw ConfigError("landmark units: anchor sizes must be positive");
        return {true, a};
    }
    double scale(std::size_t coord) const
    {
        if (!normalized) return 1.0;
        return coord % 2 == 0 ? static_cast<double>(anchor.w) : static_cast<double>(anchor.h);
    }
};

inline double landmark_loss(const LandmarkVector& v, const WingParams& p, const LandmarkUnits& u = {})
{
    double sum = 0.0;
    for (std::size_t i = 0; i < 10; ++i) {
        if (v.valid[i]) sum += wing((v.s[i] - v.target[i]) / u.scale(i), p);
    }
    return sum;
}

/// d(landmark_loss)/d(s).
inline std::array<double, 10> landmark_loss_grad(const LandmarkVector& v, const WingParams& p,
                                                 const LandmarkUnits& u = {})
{
    std::array<double, 10> g{};
    for (std::size_t i = 0; i < 10; ++i) {
        if (v.valid[i]) g[i] = wing_grad((v.s[i] - v.target[i]) / u.scale(i), p) / u.scale(i);
    }
    return g;
}

struct TotalLossSpec {
    double loss_o = 0.0;
    double loss_l = 0.0;
    double lambda_l = 0.5;
};

inline double total_loss(const TotalLossSpec& t)
{
    for (double v : {t.loss_o, t.loss_l, t.lambda_l}) {
        if (!std::isfinite(v) || v < 0) throw NonFiniteError("total_loss: terms must be finite and >= 0");
    }
    return t.loss_o + t.lambda_l * t.loss_l;
}

class DivergenceError : public Error {
public:
    using Error::Error;
};

struct FitResult {
    std::vector<double> losses; // loss before each step, then the final loss
    LandmarkVector final;
};

/// Gradient descent on landmark_loss from `initial.s` towards `initial.target`. The loss is a
/// sum of per-coordinate terms, so each coordinate gets its own backtracking step: start at `lr`
/// and halve until that term decreases enough (Armijo condition). The trajectory is therefore
/// non-increasing even where the log branch is steep near zero.
inline FitResult toy_fit(const LandmarkVector& initial, const WingParams& p, double lr, int steps,
                         const LandmarkUnits& u = {})
{
    if (!(lr > 0)) throw ConfigError("toy_fit: lr must be > 0");
    if (steps < 0) throw ConfigError("toy_fit: steps must be >= 0");
    FitResult r;
    r.final = initial;
    auto& v = r.final;
    double loss = landmark_loss(v, p, u);
    if (!std::isfinite(loss) || loss > 1e6) throw DivergenceError("toy_fit: initial loss out of range");
    r.losses.push_back(loss);
    for (int step = 0; step < steps; ++step) {
        const auto g = landmark_loss_grad(v, p, u);
        for (std::size_t i = 0; i < 10; ++i) {
            if (!v.valid[i] || g[i] == 0.0) continue;
            const double scale = u.scale(i);
            const double before = wing((v.s[i] - v.target[i]) / scale, p);
            double t = lr;
            for (int k = 0; k < 60; ++k, t *= 0.5) {
                const double s = v.s[i] - t * g[i];
                const double after = wing((s - v.target[i]) / scale, p);
                if (after <= before - 1e-4 * t * g[i] * g[i]) {
                    v.s[i] = s;
                    break;
                }
            }
        }
        const double next = landmark_loss(v, p, u);
        if (!std::isfinite(next) || next > 1e6) {
            throw DivergenceError("toy_fit: loss diverged at step " + std::to_string(step));
        }
        loss = next;
        r.losses.push_back(loss);
    }
    return r;
}

} // namespace yoloface
