#pragma once

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "yoloface/model.hpp"
#include "yoloface/params.hpp"

namespace yoloface {

// YFTA layout, all integers little-endian:
//   "YFTA" | u32 version | u64 index length | index (UTF-8 JSON) | zero pad to 64 | payloads
// Payload offsets in the index are relative to the first 64-byte-aligned position after the
// index; each payload starts 64-byte aligned and holds little-endian f32 values.

inline constexpr std::uint32_t kArchiveVersion = 1;
inline constexpr std::size_t kArchiveAlign = 64;

enum class ArchiveErrorCode { bad_magic, unsupported_version, truncated, overlap, malformed, io };

inline const char* to_string(ArchiveErrorCode c)
{
    switch (c) {
    case ArchiveErrorCode::bad_magic: return "bad magic";
    case ArchiveErrorCode::unsupported_version: return "unsupported version";
    case ArchiveErrorCode::truncated: return "truncated payload";
    case ArchiveErrorCode::overlap: return "overlapping extents";
    case ArchiveErrorCode::malformed: return "malformed index";
    case ArchiveErrorCode::io: return "i/o error";
    }
    return "?";
}

class ArchiveError : public Error {
public:
    ArchiveError(ArchiveErrorCode code, const std::string& msg)
        : Error(std::string("archive: ") + to_string(code) + ": " + msg), code_(code)
    {
    }
    ArchiveErrorCode code() const { return code_; }

private:
    ArchiveErrorCode code_;
};

/// Raised when archive contents do not fit the model being built.
class WeightMismatchError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

struct ArchiveEntry {
    std::string name;
    std::vector<std::int64_t> shape;
    std::vector<float> data;

    bool operator==(const ArchiveEntry&) const = default;
};

class TensorArchive {
public:
    std::map<std::string, std::string> metadata;

    void add(std::string name, std::vector<std::int64_t> shape, std::vector<float> data)
    {
        std::int64_t n = 1;
        for (auto e : shape) {
            if (e < 1) throw ShapeError("archive: tensor '" + name + "' has a non-positive extent");
            n *= e;
        }
        if (static_cast<std::int64_t>(data.size()) != n) {
            throw ShapeError("archive: tensor '" + name + "' has " + std::to_string(data.size()) + " values for shape " +
                             shape_str(shape));
        }
        if (index_.contains(name)) throw ShapeError("archive: duplicate tensor name '" + name + "'");
        index_[name] = entries_.size();
        entries_.push_back({std::move(name), std::move(shape), std::move(data)});
    }

    const ArchiveEntry* find(const std::string& name) const
    {
        const auto it = index_.find(name);
        return it == index_.end() ? nullptr : &entries_[it->second];
    }
    const std::vector<ArchiveEntry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    bool operator==(const TensorArchive& o) const { return metadata == o.metadata && entries_ == o.entries_; }

private:
    std::vector<ArchiveEntry> entries_;
    std::map<std::string, std::size_t> index_;
};

namespace detail {

inline std::size_t align_up(std::size_t x) { return (x + kArchiveAlign - 1) / kArchiveAlign * kArchiveAlign; }

template <class T>
void put_le(std::vector<std::uint8_t>& out, T v)
{
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <class T>
T get_le(const std::uint8_t* p)
{
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p[i]) << (8 * i);
    return v;
}

} // namespace detail

inline std::vector<std::uint8_t> save(const TensorArchive& a)
{
    nlohmann::json tensors = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& e : a.entries()) {
        const std::size_t len = e.data.size() * 4;
        tensors.push_back({{"name", e.name}, {"dtype", "f32"}, {"shape", e.shape}, {"offset", offset}, {"length", len}});
        offset = detail::align_up(offset + len);
    }
    const std::string index = nlohmann::json{{"metadata", a.metadata}, {"tensors", tensors}}.dump();

    std::vector<std::uint8_t> out{'Y', 'F', 'T', 'A'};
    detail::put_le<std::uint32_t>(out, kArchiveVersion);
    detail::put_le<std::uint64_t>(out, index.size());
    out.insert(out.end(), index.begin(), index.end());
    const std::size_t base = detail::align_up(out.size());
    out.resize(base, 0);
    for (const auto& e : a.entries()) {
        out.resize(detail::align_up(out.size()), 0);
        for (float f : e.data) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
    }
    return out;
}

inline TensorArchive load(const std::uint8_t* bytes, std::size_t size)
{
    using C = ArchiveErrorCode;
    if (size < 4 || std::memcmp(bytes, "YFTA", 4) != 0) throw ArchiveError(C::bad_magic, "file does not start with YFTA");
    if (size < 16) throw ArchiveError(C::truncated, "header shorter than 16 bytes");
    const auto version = detail::get_le<std::uint32_t>(bytes + 4);
    if (version != kArchiveVersion) {
        throw ArchiveError(C::unsupported_version, "version " + std::to_string(version) + ", expected " +
                                                       std::to_string(kArchiveVersion));
    }
    const auto index_len = detail::get_le<std::uint64_t>(bytes + 8);
    if (index_len > size - 16) throw ArchiveError(C::truncated, "index extends past end of file");
    nlohmann::json index;
    try {
        index = nlohmann::json::parse(bytes + 16, bytes + 16 + index_len);
    } catch (const nlohmann::json::exception& e) {
        throw ArchiveError(C::malformed, e.what());
    }
    const std::size_t base = detail::align_up(16 + static_cast<std::size_t>(index_len));

    TensorArchive a;
    struct Extent {
        std::uint64_t begin, end;
        std::string name;
    };
    std::vector<Extent> extents;
    try {
        if (!index.is_object() || !index.contains("tensors") || !index.at("tensors").is_array()) {
            throw ArchiveError(C::malformed, "index must hold a 'tensors' array");
        }
        if (index.contains("metadata")) a.metadata = index.at("metadata").get<std::map<std::string, std::string>>();
        for (const auto& t : index.at("tensors")) {
            const auto name = t.at("name").get<std::string>();
            if (t.at("dtype").get<std::string>() != "f32") throw ArchiveError(C::malformed, "tensor '" + name + "': dtype must be f32");
            const auto shape = t.at("shape").get<std::vector<std::int64_t>>();
            const auto offset = t.at("offset").get<std::uint64_t>();
            const auto length = t.at("length").get<std::uint64_t>();
            std::uint64_t numel = 1;
            for (auto e : shape) {
                if (e < 1) throw ArchiveError(C::malformed, "tensor '" + name + "': non-positive extent");
                numel *= static_cast<std::uint64_t>(e);
            }
            if (length != 4 * numel) throw ArchiveError(C::malformed, "tensor '" + name + "': length != 4 * numel");
            if (offset % kArchiveAlign != 0) throw ArchiveError(C::malformed, "tensor '" + name + "': unaligned offset");
            if (offset > size - base || length > size - base - offset) {
                throw ArchiveError(C::truncated, "tensor '" + name + "' extends past end of file");
            }
            extents.push_back({offset, offset + length, name});
            std::vector<float> data(static_cast<std::size_t>(numel));
            const std::uint8_t* p = bytes + base + offset;
            for (std::size_t i = 0; i < data.size(); ++i) {
                data[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(p + 4 * i));
            }
            if (a.find(name)) throw ArchiveError(C::malformed, "duplicate tensor name '" + name + "'");
            a.add(name, shape, std::move(data));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ArchiveError(C::malformed, e.what());
    }
    std::sort(extents.begin(), extents.end(), [](const Extent& x, const Extent& y) { return x.begin < y.begin; });
    for (std::size_t i = 1; i < extents.size(); ++i) {
        if (extents[i].begin < extents[i - 1].end) {
            throw ArchiveError(C::overlap, "'" + extents[i - 1].name + "' and '" + extents[i].name + "' overlap");
        }
    }
    return a;
}

inline TensorArchive load(const std::vector<std::uint8_t>& bytes) { return load(bytes.data(), bytes.size()); }

inline void save_file(const TensorArchive& a, const std::filesystem::path& path)
{
    const auto bytes = save(a);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ArchiveError(ArchiveErrorCode::io, "cannot write " + path.string());
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw ArchiveError(ArchiveErrorCode::io, "write failed for " + path.string());
}

inline TensorArchive load_file(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ArchiveError(ArchiveErrorCode::io, "cannot read " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return load(bytes);
}

// ---------------------------------------------------------------------------
// Model binding

inline std::string format_float(float v)
{
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, r.ptr};
}

/// Reserved metadata describing the model an archive belongs to.
inline std::map<std::string, std::string> model_metadata(const ModelConfig& c, float bn_eps)
{
    return {{"config_hash", config_hash(c)},
            {"anchors", anchors_to_json(c.anchors).dump()},
            {"bn_eps", format_float(bn_eps)},
            {"score_mode", to_string(c.score_mode)}};
}

/// Serves model parameters from an archive, checking shapes and tracking which entries were used.
class ArchiveSource : public ParamSource {
public:
    explicit ArchiveSource(const TensorArchive& a) : a_(a)
    {
        if (const auto it = a.metadata.find("bn_eps"); it != a.metadata.end()) {
            float v = 0;
            const auto r = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
            if (r.ec != std::errc() || r.ptr != it->second.data() + it->second.size() || !(v > 0)) {
                throw WeightMismatchError("weights: bad bn_eps metadata '" + it->second + "'");
            }
            eps_ = v;
        }
    }

    std::vector<float> fetch(const ParamDecl& d) override
    {
        const auto* e = a_.find(d.name);
        if (!e) throw WeightMismatchError("weights: missing tensor '" + d.name + "' " + shape_str(d.shape));
        if (e->shape != d.shape) {
            throw WeightMismatchError("weights: tensor '" + d.name + "' has shape " + shape_str(e->shape) +
                                      ", model expects " + shape_str(d.shape));
        }
        used_.insert(d.name);
        return e->data;
    }
    float bn_eps() const override { return eps_; }

    std::vector<std::string> unused() const
    {
        std::vector<std::string> out;
        for (const auto& e : a_.entries()) {
            if (!used_.contains(e.name)) out.push_back(e.name);
        }
        return out;
    }

private:
    const TensorArchive& a_;
    std::set<std::string> used_;
    float eps_ = 1e-3f;
};

/// Deterministic weights for `c`: one entry per declared parameter, in build order.
inline TensorArchive seeded_init(const ModelConfig& c, std::uint64_t seed, float bn_eps = 1e-3f)
{
    SeededSource src(seed, bn_eps);
    TensorArchive a;
    a.metadata = model_metadata(c, bn_eps);
    a.metadata["rng"] = std::string(kRngName);
    a.metadata["seed"] = std::to_string(seed);
    for (const auto& d : declare_model_params(c)) a.add(d.name, d.shape, src.fetch(d));
    return a;
}

/// Builds `c` from archive weights. Every archive tensor must be consumed, and a recorded
/// config hash must match.
inline Model load_model(const ModelConfig& c, const TensorArchive& a)
{
    if (const auto it = a.metadata.find("config_hash"); it != a.metadata.end() && it->second != config_hash(c)) {
        throw WeightMismatchError("weights: archive was made for config " + it->second + ", model config is " +
                                  config_hash(c));
    }
    ArchiveSource src(a);
    Model m = Model::build(c, src);
    if (const auto extra = src.unused(); !extra.empty()) {
        throw WeightMismatchError("weights: " + std::to_string(extra.size()) + " unused tensor(s), first '" +
                                  extra.front() + "'");
    }
    return m;
}

} // namespace yoloface
