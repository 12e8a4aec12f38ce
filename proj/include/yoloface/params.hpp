#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "yoloface/tensor.hpp"

namespace yoloface {

enum class ParamRole { conv_weight, conv_bias, bn_gamma, bn_beta, bn_mean, bn_var };

/// One named parameter tensor a block asks for while it is being built.
struct ParamDecl {
    std::string name;
    std::vector<std::int64_t> shape;
    ParamRole role = ParamRole::conv_weight;
    std::int64_t fan_in = 1;

    std::int64_t numel() const
    {
        std::int64_t n = 1;
        for (auto e : shape) n *= e;
        return n;
    }

    /// Running statistics are state, not trainable parameters.
    bool learnable() const { return role != ParamRole::bn_mean && role != ParamRole::bn_var; }
};

inline std::string join_name(std::string_view prefix, std::string_view local)
{
    if (prefix.empty()) return std::string(local);
    std::string s(prefix);
    s += '.';
    s += local;
    return s;
}

inline std::string shape_str(const std::vector<std::int64_t>& shape)
{
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Supplies parameter values to blocks under construction.
class ParamSource {
public:
    virtual ~ParamSource() = default;
    virtual std::vector<float> fetch(const ParamDecl& decl) = 0;
    virtual float bn_eps() const { return 1e-3f; }
};

/// Records every request; hands back zeros (variances one).
class DeclCollector : public ParamSource {
public:
    std::vector<float> fetch(const ParamDecl& decl) override
    {
        decls_.push_back(decl);
        return std::vector<float>(static_cast<std::size_t>(decl.numel()), decl.role == ParamRole::bn_var ? 1.0f : 0.0f);
    }
    const std::vector<ParamDecl>& decls() const { return decls_; }

private:
    std::vector<ParamDecl> decls_;
};

/// splitmix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Child seed for item `index` under `root`.
constexpr std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index)
{
    return splitmix64(splitmix64(root) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

/// Uniform double in [0, 1) from the top 53 bits of one draw.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline constexpr std::string_view kRngName = "mt19937_64";

/// Deterministic initializer: conv weights and biases ~ U(-a, a) with a = sqrt(3 / fan_in)
/// (unit-variance uniform scaled by 1/sqrt(fan_in)); BN gamma 1, beta 0, mean 0, var 1.
/// Each tensor draws from its own stream seeded by (seed, name), so values do not depend on build order.
class SeededSource : public ParamSource {
public:
    explicit SeededSource(std::uint64_t seed, float eps = 1e-3f) : seed_(seed), eps_(eps) {}

    std::vector<float> fetch(const ParamDecl& decl) override
    {
        std::vector<float> v(static_cast<std::size_t>(decl.numel()));
        switch (decl.role) {
        case ParamRole::conv_weight:
        case ParamRole::conv_bias: {
            std::mt19937_64 rng(splitmix64(seed_ ^ fnv1a64(decl.name)));
            const double bound = std::sqrt(3.0 / static_cast<double>(decl.fan_in));
            for (float& x : v) x = static_cast<float>((2.0 * uniform01(rng) - 1.0) * bound);
            break;
        }
        case ParamRole::bn_gamma:
        case ParamRole::bn_var: std::fill(v.begin(), v.end(), 1.0f); break;
        case ParamRole::bn_beta:
        case ParamRole::bn_mean: std::fill(v.begin(), v.end(), 0.0f); break;
        }
        return v;
    }
    float bn_eps() const override { return eps_; }

private:
    std::uint64_t seed_;
    float eps_;
};

/// Adapter for tests and tools: values come from a callback.
class FunctionSource : public ParamSource {
public:
    using Fn = std::function<std::vector<float>(const ParamDecl&)>;
    explicit FunctionSource(Fn fn, float eps = 1e-3f) : fn_(std::move(fn)), eps_(eps) {}
    std::vector<float> fetch(const ParamDecl& decl) override { return fn_(decl); }
    float bn_eps() const override { return eps_; }

private:
    Fn fn_;
    float eps_;
};

} // namespace yoloface
