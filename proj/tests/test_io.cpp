#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <random>

#include "smx/io.hpp"
#include "smx/network.hpp"
#include "smx/train.hpp"

using namespace smx;

namespace {

std::string tmp_path(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "smx_io_tests";
    std::filesystem::create_directories(dir);
    return (dir / name).string();
}

PyramidConfig small_cfg(SkipKind kind = SkipKind::CrossMerge) {
    PyramidConfig cfg;
    cfg.side = 16;
    cfg.in_channels = 1;
    cfg.out_channels = 2;
    cfg.stages = {StageSpec{4, 4, 1, 1, 4, 4}, StageSpec{8, 8, 1, 2, 4, 4},
                  StageSpec{16, 16, 1, 4, 4, 4}, StageSpec{32, 32, 1, 8, 4, 4}};
    cfg.skip = kind;
    return cfg;
}

std::vector<uint8_t> file_bytes(const std::string& path) {
    return detail::slurp(path, "test");
}

void corrupt_byte(const std::string& src, const std::string& dst, size_t at, uint8_t value) {
    auto bytes = file_bytes(src);
    REQUIRE(at < bytes.size());
    bytes[at] = value;
    detail::spill(dst, bytes, "test");
}

}  // namespace

TEST_CASE("f32 volume round trip is bit-exact") {
    Volume v;
    v.dtype = VolDType::F32;
    v.dims = {4, 5, 6};
    std::mt19937_64 rng(71);
    std::uniform_real_distribution<float> dist(-10.f, 10.f);
    for (int i = 0; i < 120; ++i) v.f.push_back(dist(rng));
    v.f[0] = 0.f;
    v.f[1] = -0.f;
    v.f[2] = 1e-38f;

    const auto path = tmp_path("roundtrip.smvx");
    write_volume(path, v);
    const Volume r = read_volume(path);
    CHECK(r.dtype == VolDType::F32);
    CHECK(r.dims == v.dims);
    REQUIRE(r.f.size() == v.f.size());
    CHECK(std::memcmp(r.f.data(), v.f.data(), v.f.size() * 4) == 0);
}

TEST_CASE("u8 mask volume round trips exactly") {
    Volume v;
    v.dtype = VolDType::U8;
    v.dims = {3, 3, 3};
    for (int i = 0; i < 27; ++i) v.u.push_back(i % 2 ? 1 : 0);
    const auto path = tmp_path("mask.smvx");
    write_volume(path, v);
    const Volume r = read_volume(path);
    CHECK(r.dtype == VolDType::U8);
    CHECK(r.u == v.u);
    for (uint8_t b : r.u) CHECK((b == 0 || b == 1));
}

TEST_CASE("volume writer validates its input") {
    Volume v;
    v.dims = {};
    CHECK_THROWS_AS(write_volume(tmp_path("bad.smvx"), v), IoError);
    v.dims = {2, 2};
    v.f = {1.f};  // payload shorter than dims
    CHECK_THROWS_AS(write_volume(tmp_path("bad.smvx"), v), IoError);
    v.dims = {2, -2};
    v.f = {1.f, 2.f, 3.f, 4.f};
    CHECK_THROWS_AS(write_volume(tmp_path("bad.smvx"), v), IoError);
}

TEST_CASE("volume reader rejects malformed files") {
    Volume v;
    v.dtype = VolDType::F32;
    v.dims = {2, 2};
    v.f = {1.f, 2.f, 3.f, 4.f};
    const auto good = tmp_path("good.smvx");
    write_volume(good, v);
    REQUIRE_NOTHROW(read_volume(good));

    const auto bad = tmp_path("bad.smvx");
    corrupt_byte(good, bad, 0, 'X');  // magic
    CHECK_THROWS_WITH(read_volume(bad), Catch::Matchers::ContainsSubstring("bad magic"));
    corrupt_byte(good, bad, 4, 9);  // version
    CHECK_THROWS_WITH(read_volume(bad), Catch::Matchers::ContainsSubstring("version"));
    corrupt_byte(good, bad, 6, 7);  // dtype code
    CHECK_THROWS_WITH(read_volume(bad), Catch::Matchers::ContainsSubstring("dtype"));
    corrupt_byte(good, bad, 7, 0);  // rank 0
    CHECK_THROWS_WITH(read_volume(bad), Catch::Matchers::ContainsSubstring("rank"));
    corrupt_byte(good, bad, 15, 0xff);  // first dim becomes enormous
    CHECK_THROWS_WITH(read_volume(bad), Catch::Matchers::ContainsSubstring("overflow"));

    auto bytes = file_bytes(good);
    bytes.pop_back();
    detail::spill(bad, bytes, "test");
    CHECK_THROWS_WITH(read_volume(bad), Catch::Matchers::ContainsSubstring("truncated"));
    bytes = file_bytes(good);
    bytes.push_back(0);
    detail::spill(bad, bytes, "test");
    CHECK_THROWS_WITH(read_volume(bad), Catch::Matchers::ContainsSubstring("trailing"));
}

TEST_CASE("checkpoint restores every tensor bitwise") {
    const PyramidConfig cfg = small_cfg();
    Model<float> trained = build_model<float>(cfg, 21);
    {
        // Move the running statistics off their initial values.
        Graph<float> g;
        auto x = make_tensor<float>({1, 16, 16, 16, 1});
        std::mt19937_64 rng(5);
        fill_uniform<float>(rng, x->data, -1.f, 1.f);
        network_forward(g, x, trained, true);
    }
    std::vector<std::vector<float>> snapshot;
    for (const auto& e : trained.reg.entries) snapshot.push_back(e.tensor->data);

    const auto path = tmp_path("model.smck");
    save_checkpoint(path, trained.reg);

    Model<float> fresh = build_model<float>(cfg, 99);  // different init
    bool differed = false;
    for (size_t i = 0; i < fresh.reg.entries.size(); ++i)
        if (fresh.reg.entries[i].tensor->data != snapshot[i]) differed = true;
    REQUIRE(differed);

    load_checkpoint(path, fresh.reg);
    for (size_t i = 0; i < fresh.reg.entries.size(); ++i) {
        const auto& got = fresh.reg.entries[i].tensor->data;
        REQUIRE(got.size() == snapshot[i].size());
        CHECK(std::memcmp(got.data(), snapshot[i].data(), got.size() * 4) == 0);
    }
}

TEST_CASE("checkpoint round trip preserves eval output bitwise") {
    const PyramidConfig cfg = small_cfg(SkipKind::CatSkip);
    Model<float> m = build_model<float>(cfg, 31);
    std::vector<float> vol(16 * 16 * 16);
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<float> dist(0.f, 1.f);
    for (auto& x : vol) x = dist(rng);
    const auto before = forward_values(m, vol);

    const auto path = tmp_path("fidelity.smck");
    save_checkpoint(path, m.reg);
    Model<float> other = build_model<float>(cfg, 77);
    load_checkpoint(path, other.reg);
    const auto after = forward_values(other, vol);
    REQUIRE(after.size() == before.size());
    CHECK(std::memcmp(after.data(), before.data(), after.size() * 4) == 0);
}

TEST_CASE("checkpoint rejects a mismatched model") {
    const auto path = tmp_path("skew.smck");
    {
        Model<float> m = build_model<float>(small_cfg(SkipKind::CrossMerge), 3);
        save_checkpoint(path, m.reg);
    }
    Model<float> other_skip = build_model<float>(small_cfg(SkipKind::CatLinear), 3);
    CHECK_THROWS_AS(load_checkpoint(path, other_skip.reg), IoError);

    PyramidConfig wide = small_cfg();
    wide.stages[0].channels = 8;
    wide.stages[0].heads = 2;
    Model<float> other_width = build_model<float>(wide, 3);
    CHECK_THROWS_WITH(load_checkpoint(path, other_width.reg),
                      Catch::Matchers::ContainsSubstring("shape mismatch"));
}

TEST_CASE("checkpoint detects corruption") {
    ParamRegistry<float> reg;
    auto a = reg.param("a", {2, 2});
    a->data = {1.f, 2.f, 3.f, 4.f};
    reg.buffer("b", {3})->data = {5.f, 6.f, 7.f};
    const auto path = tmp_path("tiny.smck");
    save_checkpoint(path, reg);

    ParamRegistry<float> back;
    back.param("a", {2, 2});
    back.buffer("b", {3});
    REQUIRE_NOTHROW(load_checkpoint(path, back));
    CHECK(back.find("a")->data == a->data);

    const auto bad = tmp_path("tiny_bad.smck");
    auto bytes = file_bytes(path);
    bytes.resize(bytes.size() - 2);
    detail::spill(bad, bytes, "test");
    CHECK_THROWS_WITH(load_checkpoint(bad, back), Catch::Matchers::ContainsSubstring("truncated"));

    corrupt_byte(path, bad, 0, 'Z');
    CHECK_THROWS_WITH(load_checkpoint(bad, back), Catch::Matchers::ContainsSubstring("bad magic"));

    ParamRegistry<float> extra;
    extra.param("a", {2, 2});
    extra.buffer("b", {3});
    extra.param("c", {1});
    CHECK_THROWS_WITH(load_checkpoint(path, extra),
                      Catch::Matchers::ContainsSubstring("missing tensor c"));

    ParamRegistry<float> fewer;
    fewer.param("a", {2, 2});
    CHECK_THROWS_WITH(load_checkpoint(path, fewer),
                      Catch::Matchers::ContainsSubstring("unknown tensor"));
}

TEST_CASE("checkpoint records duplicate names are rejected") {
    detail::ByteWriter w;
    w.raw("SMCK", 4);
    w.u16(kCheckpointVersion);
    w.u32(2);
    for (int rep = 0; rep < 2; ++rep) {
        w.u16(1);
        w.raw("a", 1);
        w.u8(1);
        w.i64(1);
        w.f32(3.f);
    }
    const auto path = tmp_path("dup.smck");
    detail::spill(path, w.bytes, "test");
    ParamRegistry<float> reg;
    reg.param("a", {1});
    CHECK_THROWS_WITH(load_checkpoint(path, reg),
                      Catch::Matchers::ContainsSubstring("duplicate"));
}
