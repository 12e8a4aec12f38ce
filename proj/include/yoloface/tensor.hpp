#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace yoloface {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible extents, divisibility violations, bad channel counts.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A primitive produced NaN or Inf.
class NonFiniteError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration values (model, augmentation, CLI).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Extents of a dense (N, C, H, W) tensor.
struct Shape {
    std::int64_t n = 1;
    std::int64_t c = 1;
    std::int64_t h = 1;
    std::int64_t w = 1;

    constexpr std::int64_t numel() const { return n * c * h * w; }
    constexpr std::int64_t plane() const { return h * w; }
    constexpr bool operator==(const Shape&) const = default;

    std::string str() const
    {
        return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
               std::to_string(w) + "]";
    }
};

/// Dense row-major float tensor, W fastest-varying.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, float fill = 0.0f) : shape_(shape)
    {
        validate(shape);
        data_.assign(static_cast<std::size_t>(shape.numel()), fill);
    }

    Tensor(Shape shape, std::vector<float> data) : shape_(shape), data_(std::move(data))
    {
        validate(shape);
        if (static_cast<std::int64_t>(data_.size()) != shape.numel()) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape.str());
        }
    }

    const Shape& shape() const { return shape_; }
    std::int64_t numel() const { return shape_.numel(); }
    bool empty() const { return data_.empty(); }

    std::span<float> data() { return data_; }
    std::span<const float> data() const { return data_; }
    float* ptr() { return data_.data(); }
    const float* ptr() const { return data_.data(); }

    std::int64_t offset(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const
    {
        return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
    }
    float& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w)
    {
        return data_[static_cast<std::size_t>(offset(n, c, h, w))];
    }
    float at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const
    {
        return data_[static_cast<std::size_t>(offset(n, c, h, w))];
    }

    /// Pointer to the (n, c) plane.
    float* plane(std::int64_t n, std::int64_t c) { return data_.data() + offset(n, c, 0, 0); }
    const float* plane(std::int64_t n, std::int64_t c) const { return data_.data() + offset(n, c, 0, 0); }

    bool all_finite() const
    {
        for (float v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

private:
    static void validate(const Shape& s)
    {
        if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
            throw ShapeError("tensor extents must be >= 1, got " + s.str());
        }
    }

    Shape shape_{};
    std::vector<float> data_;
};

/// Throws NonFiniteError naming `op` when `t` holds a NaN or Inf.
inline const Tensor& require_finite(const Tensor& t, const char* op)
{
    if (!t.all_finite()) throw NonFiniteError(std::string(op) + ": produced a non-finite value");
    return t;
}

inline float max_abs_diff(const Tensor& a, const Tensor& b)
{
    if (!(a.shape() == b.shape())) {
        throw ShapeError("max_abs_diff: shape " + a.shape().str() + " vs " + b.shape().str());
    }
    float m = 0.0f;
    for (std::size_t i = 0; i < a.data().size(); ++i) {
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    }
    return m;
}

} // namespace yoloface
