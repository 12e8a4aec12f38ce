#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <random>
#include <set>

#include "yoloface/archive.hpp"

using namespace yoloface;

namespace {

ArchiveErrorCode code_of(const std::vector<std::uint8_t>& bytes)
{
    try {
        load(bytes);
    } catch (const ArchiveError& e) {
        return e.code();
    }
    ADD_FAILURE() << "load succeeded";
    return ArchiveErrorCode::io;
}

std::uint64_t read_u64(const std::vector<std::uint8_t>& b, std::size_t at)
{
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[at + static_cast<std::size_t>(i)];
    return v;
}

// Replaces the JSON index of a saved archive and fixes up the header length.
std::vector<std::uint8_t> with_index(const std::vector<std::uint8_t>& original, const std::string& index)
{
    const auto old_len = read_u64(original, 8);
    const std::size_t old_base = (16 + old_len + 63) / 64 * 64;
    std::vector<std::uint8_t> out(original.begin(), original.begin() + 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(index.size() >> (8 * i)));
    out.insert(out.end(), index.begin(), index.end());
    out.resize((out.size() + 63) / 64 * 64, 0);
    out.insert(out.end(), original.begin() + static_cast<std::ptrdiff_t>(old_base), original.end());
    return out;
}

TensorArchive random_archive(std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    TensorArchive a;
    const int n = static_cast<int>(rng() % 6);
    for (int i = 0; i < n; ++i) {
        std::vector<std::int64_t> shape;
        const int rank = 1 + static_cast<int>(rng() % 4);
        std::int64_t numel = 1;
        for (int r = 0; r < rank; ++r) {
            shape.push_back(1 + static_cast<std::int64_t>(rng() % 5));
            numel *= shape.back();
        }
        std::vector<float> data(static_cast<std::size_t>(numel));
        for (auto& v : data) v = std::bit_cast<float>(static_cast<std::uint32_t>(rng() & 0x7f7fffffu));
        a.add("t" + std::to_string(rng() % 1000) + "_" + std::to_string(i), shape, data);
    }
    a.metadata["seed"] = std::to_string(seed);
    if (seed % 2) a.metadata["note"] = "ünïcode ✓";
    return a;
}

} // namespace

TEST(Archive, HandEncodedSingleTensor)
{
    TensorArchive a;
    a.add("w", {2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
    const auto bytes = save(a);
    ASSERT_GE(bytes.size(), 16u);
    EXPECT_EQ(std::memcmp(bytes.data(), "YFTA", 4), 0);
    EXPECT_EQ(bytes[4], 1);
    EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
    const auto index_len = read_u64(bytes, 8);
    const std::string index(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(index_len));
    const auto j = nlohmann::json::parse(index);
    EXPECT_EQ(j["tensors"][0]["offset"], 0);
    EXPECT_EQ(j["tensors"][0]["length"], 16);
    EXPECT_EQ(j["tensors"][0]["dtype"], "f32");
    const std::size_t base = (16 + index_len + 63) / 64 * 64;
    ASSERT_EQ(bytes.size(), base + 16);
    // 1.0f = 0x3f800000, 2.0f = 0x40000000, 3.0f = 0x40400000, 4.0f = 0x40800000, little-endian
    const std::uint8_t expected[16] = {0, 0, 0x80, 0x3f, 0, 0, 0, 0x40, 0, 0, 0x40, 0x40, 0, 0, 0x80, 0x40};
    EXPECT_EQ(std::memcmp(bytes.data() + base, expected, 16), 0);
    for (std::size_t i = 16 + index_len; i < base; ++i) EXPECT_EQ(bytes[i], 0);
}

TEST(Archive, RoundTripProperty)
{
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const TensorArchive a = random_archive(seed);
        const auto bytes = save(a);
        const TensorArchive b = load(bytes);
        EXPECT_EQ(a, b) << seed;
        EXPECT_EQ(save(b), bytes);
    }
}

TEST(Archive, PayloadsAligned)
{
    TensorArchive a;
    a.add("a", {3}, {1, 2, 3});
    a.add("b", {1}, {4});
    const auto bytes = save(a);
    const auto j = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(read_u64(bytes, 8)));
    EXPECT_EQ(j["tensors"][1]["offset"], 64);
}

TEST(Archive, DistinctErrors)
{
    TensorArchive a;
    a.add("x", {4}, {1, 2, 3, 4});
    a.add("y", {4}, {5, 6, 7, 8});
    const auto good = save(a);

    auto bad = good;
    bad[0] = 'X';
    EXPECT_EQ(code_of(bad), ArchiveErrorCode::bad_magic);
    bad = good;
    bad[4] = 2;
    EXPECT_EQ(code_of(bad), ArchiveErrorCode::unsupported_version);
    bad = good;
    bad.pop_back();
    EXPECT_EQ(code_of(bad), ArchiveErrorCode::truncated);
    EXPECT_EQ(code_of({'Y', 'F', 'T', 'A', 1, 0}), ArchiveErrorCode::truncated);
    bad = good;
    bad.resize(20);
    EXPECT_EQ(code_of(bad), ArchiveErrorCode::truncated);

    const std::string overlapping =
        R"({"metadata":{},"tensors":[{"dtype":"f32","length":16,"name":"x","offset":0,"shape":[4]},)"
        R"({"dtype":"f32","length":16,"name":"y","offset":0,"shape":[4]}]})";
    EXPECT_EQ(code_of(with_index(good, overlapping)), ArchiveErrorCode::overlap);
    const std::string wrong_length =
        R"({"metadata":{},"tensors":[{"dtype":"f32","length":12,"name":"x","offset":0,"shape":[4]}]})";
    EXPECT_EQ(code_of(with_index(good, wrong_length)), ArchiveErrorCode::malformed);
    EXPECT_EQ(code_of(with_index(good, "{not json")), ArchiveErrorCode::malformed);
    const std::string f16 = R"({"tensors":[{"dtype":"f16","length":8,"name":"x","offset":0,"shape":[4]}]})";
    EXPECT_EQ(code_of(with_index(good, f16)), ArchiveErrorCode::malformed);
}

TEST(Archive, AddValidates)
{
    TensorArchive a;
    EXPECT_THROW(a.add("x", {2, 2}, {1, 2, 3}), ShapeError);
    EXPECT_THROW(a.add("x", {0}, {}), ShapeError);
    a.add("x", {1}, {1});
    EXPECT_THROW(a.add("x", {1}, {1}), ShapeError);
}

TEST(Archive, FileRoundTrip)
{
    const auto path = std::filesystem::temp_directory_path() / "yoloface_archive_test.yfta";
    const TensorArchive a = random_archive(7);
    save_file(a, path);
    EXPECT_EQ(load_file(path), a);
    std::filesystem::remove(path);
    EXPECT_THROW(load_file(path), ArchiveError);
}

TEST(SeededInit, DeterministicAndSeedSensitive)
{
    const auto& cfg = preset("yolov5n-0.5").config;
    const auto a = save(seeded_init(cfg, 1));
    EXPECT_EQ(save(seeded_init(cfg, 1)), a);
    const auto x = seeded_init(cfg, 1), y = seeded_init(cfg, 2);
    std::string first_diff;
    for (std::size_t i = 0; i < x.size() && first_diff.empty(); ++i) {
        if (x.entries()[i].data != y.entries()[i].data) first_diff = x.entries()[i].name;
    }
    EXPECT_EQ(first_diff, "model.0.stem_1.conv.weight");
    EXPECT_EQ(x.metadata.at("rng"), "mt19937_64");
    EXPECT_EQ(x.metadata.at("bn_eps"), "0.001");
    EXPECT_EQ(x.metadata.at("config_hash"), config_hash(cfg));
    EXPECT_EQ(x.metadata.at("score_mode"), "conf");
    EXPECT_TRUE(x.metadata.contains("anchors"));
}

TEST(SeededInit, FanInBoundAndBnDefaults)
{
    const auto& cfg = preset("yolov5s").config; // stem_2b is a 3x3 conv with 16 input channels
    const auto a = seeded_init(cfg, 11);
    bool saw_3x3_16 = false;
    for (const auto& e : a.entries()) {
        const bool is_weight = e.shape.size() == 4;
        if (is_weight) {
            const double fan_in = static_cast<double>(e.shape[1] * e.shape[2] * e.shape[3]);
            const double bound = std::sqrt(3.0) / std::sqrt(fan_in);
            for (float v : e.data) EXPECT_LE(std::abs(v), bound);
            if (e.shape[1] == 16 && e.shape[2] == 3) {
                saw_3x3_16 = true;
                EXPECT_NEAR(bound, std::sqrt(3.0) / 12.0, 1e-15);
            }
        } else if (e.name.ends_with("running_var")) {
            for (float v : e.data) EXPECT_EQ(v, 1.0f);
        } else if (e.name.ends_with("running_mean") || e.name.ends_with("bn.bias")) {
            for (float v : e.data) EXPECT_EQ(v, 0.0f);
        } else if (e.name.ends_with("bn.weight")) {
            for (float v : e.data) EXPECT_EQ(v, 1.0f);
        }
    }
    EXPECT_TRUE(saw_3x3_16);
}

TEST(SeededInit, BijectiveWithModelBuild)
{
    for (const char* name : {"yolov5n", "yolov5s6"}) {
        const auto& cfg = preset(name).config;
        const auto a = seeded_init(cfg, 5);
        SeededSource src(5);
        const Model m = Model::build(cfg, src);
        std::set<std::string> built, stored;
        for (const auto& d : m.params()) EXPECT_TRUE(built.insert(d.name).second);
        for (const auto& e : a.entries()) EXPECT_TRUE(stored.insert(e.name).second);
        EXPECT_EQ(built, stored) << name;
    }
}

TEST(LoadModel, MatchesDirectBuildAndRejectsMismatch)
{
    const auto& cfg = preset("yolov5n-0.5").config;
    const auto a = seeded_init(cfg, 3);
    SeededSource src(3);
    const Tensor x(Shape{1, 3, 64, 64}, 0.3f);
    const auto direct = Model::build(cfg, src).forward(x);
    const auto loaded = load_model(cfg, load(save(a))).forward(x);
    for (std::size_t i = 0; i < direct.size(); ++i) EXPECT_EQ(direct[i], loaded[i]);

    // Different architecture -> hash mismatch.
    EXPECT_THROW(load_model(preset("yolov5n").config, a), WeightMismatchError);

    // Missing tensor is named.
    TensorArchive partial;
    partial.metadata = a.metadata;
    for (const auto& e : a.entries()) {
        if (e.name != "model.0.stem_2a.bn.running_var") partial.add(e.name, e.shape, e.data);
    }
    try {
        load_model(cfg, partial);
        FAIL();
    } catch (const WeightMismatchError& e) {
        EXPECT_NE(std::string(e.what()).find("model.0.stem_2a.bn.running_var"), std::string::npos);
    }

    // Extra tensor is rejected.
    TensorArchive extra = a;
    extra.add("model.99.weight", {1}, {0});
    EXPECT_THROW(load_model(cfg, extra), WeightMismatchError);

    // Wrong shape is rejected.
    TensorArchive reshaped;
    reshaped.metadata = a.metadata;
    for (const auto& e : a.entries()) {
        if (e.name == "model.0.stem_1.conv.weight") {
            reshaped.add(e.name, {e.shape[0], e.shape[1], 1, e.shape[2] * e.shape[3]}, e.data);
        } else {
            reshaped.add(e.name, e.shape, e.data);
        }
    }
    EXPECT_THROW(load_model(cfg, reshaped), WeightMismatchError);
}

TEST(LoadModel, ReadsBnEps)
{
    const auto& cfg = preset("yolov5n-0.5").config;
    auto a = seeded_init(cfg, 3, 1e-5f);
    EXPECT_EQ(a.metadata.at("bn_eps"), "1e-05");
    ArchiveSource src(a);
    EXPECT_FLOAT_EQ(src.bn_eps(), 1e-5f);
    a.metadata["bn_eps"] = "-1";
    EXPECT_THROW(ArchiveSource{a}, WeightMismatchError);
}
