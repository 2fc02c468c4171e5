#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "volflow/rng.hpp"
#include "volflow/volume.hpp"

using namespace volflow;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir() {
    const fs::path p = fs::temp_directory_path() / "volflow_io_test";
    fs::create_directories(p);
    return p;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(bool(f));
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f),
                                     std::istreambuf_iterator<char>());
}

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(std::uint8_t(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& b, float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    put_u32(b, u);
}

// Assemble an RVOL file from scratch, independent of write_volume.
std::vector<std::uint8_t> build_file(std::uint32_t d, std::uint32_t h,
                                     std::uint32_t w,
                                     const std::vector<float>& payload,
                                     std::uint8_t dtype = 0,
                                     std::uint8_t vspace = 0) {
    std::vector<std::uint8_t> b;
    b.push_back('R');
    b.push_back('V');
    b.push_back('L');
    b.push_back('1');
    put_u32(b, 1);
    put_u32(b, d);
    put_u32(b, h);
    put_u32(b, w);
    put_f32(b, 1.5f);
    put_f32(b, 1.5f);
    put_f32(b, 1.5f);
    b.push_back(dtype);
    b.push_back(vspace);
    for (float v : payload) put_f32(b, v);
    return b;
}

void dump(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            std::streamsize(bytes.size()));
}

Volume random_volume(Dims dims, std::uint64_t seed) {
    Volume v;
    v.dims = dims;
    v.spacing = {0.7f, 1.25f, 2.0f};
    v.value_space = ValueSpace::HU;
    v.voxels.resize(dims.count());
    Rng rng(seed);
    for (auto& x : v.voxels) x = float(-800.0 + 250.0 * rng.normal());
    return v;
}

}  // namespace

TEST_CASE("volume round trip is bit exact") {
    const Volume v = random_volume({5, 3, 7}, 11);
    const fs::path p = tmp_dir() / "rt.rvol";
    write_volume(v, p);
    const Volume r = read_volume(p);
    CHECK(r.dims == v.dims);
    CHECK(r.spacing == v.spacing);
    CHECK(r.value_space == v.value_space);
    REQUIRE(r.voxels.size() == v.voxels.size());
    CHECK(std::memcmp(r.voxels.data(), v.voxels.data(),
                      v.voxels.size() * sizeof(float)) == 0);
}

TEST_CASE("mask round trip is bit exact") {
    Mask m = make_mask({4, 6, 5}, false);
    Rng rng(3);
    for (auto& b : m.bits) b = rng.uniform() < 0.4 ? 1 : 0;
    const fs::path p = tmp_dir() / "mask.rvol";
    write_mask(m, Spacing{2, 2, 2}, p);
    const Mask r = read_mask(p);
    CHECK(r.dims == m.dims);
    CHECK(r.bits == m.bits);
}

TEST_CASE("writing twice produces identical bytes") {
    const Volume v = random_volume({3, 4, 2}, 5);
    const fs::path a = tmp_dir() / "a.rvol";
    const fs::path b = tmp_dir() / "b.rvol";
    write_volume(v, a);
    write_volume(v, b);
    CHECK(slurp(a) == slurp(b));
}

TEST_CASE("single voxel file is header plus one f32") {
    Volume v;
    v.dims = {1, 1, 1};
    v.spacing = {1, 1, 1};
    v.voxels = {0.0f};
    const fs::path p = tmp_dir() / "one.rvol";
    write_volume(v, p);
    CHECK(fs::file_size(p) == kRvolHeaderSize + 4);  // 38 bytes total
}

TEST_CASE("hand built file reads back in z major order") {
    std::vector<float> payload(24);
    for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = float(i);
    const fs::path p = tmp_dir() / "built.rvol";
    dump(p, build_file(2, 3, 4, payload));
    const Volume v = read_volume(p);
    REQUIRE(v.dims == Dims{2, 3, 4});
    CHECK(v.spacing.sz == 1.5f);
    for (std::uint32_t z = 0; z < 2; ++z)
        for (std::uint32_t y = 0; y < 3; ++y)
            for (std::uint32_t x = 0; x < 4; ++x)
                CHECK(v.at(z, y, x) == float((z * 3 + y) * 4 + x));
}

TEST_CASE("truncated payload is a length error") {
    std::vector<float> payload(23);
    const fs::path p = tmp_dir() / "short.rvol";
    dump(p, build_file(2, 3, 4, payload));
    CHECK_THROWS_AS(read_volume(p), LengthError);
}

TEST_CASE("trailing bytes are rejected") {
    std::vector<float> payload(25);
    const fs::path p = tmp_dir() / "long.rvol";
    dump(p, build_file(2, 3, 4, payload));
    CHECK_THROWS_AS(read_volume(p), LengthError);
}

TEST_CASE("bad magic and header fields are format errors") {
    std::vector<float> payload(24, 0.0f);
    auto bytes = build_file(2, 3, 4, payload);

    SUBCASE("magic") {
        bytes[0] = 'X';
        const fs::path p = tmp_dir() / "badmagic.rvol";
        dump(p, bytes);
        CHECK_THROWS_AS(read_volume(p), FormatError);
    }
    SUBCASE("version") {
        bytes[4] = 9;
        const fs::path p = tmp_dir() / "badver.rvol";
        dump(p, bytes);
        CHECK_THROWS_AS(read_volume(p), FormatError);
    }
    SUBCASE("dtype") {
        bytes[32] = 7;
        const fs::path p = tmp_dir() / "baddtype.rvol";
        dump(p, bytes);
        CHECK_THROWS_AS(read_volume(p), FormatError);
    }
    SUBCASE("value space") {
        bytes[33] = 9;
        const fs::path p = tmp_dir() / "badspace.rvol";
        dump(p, bytes);
        CHECK_THROWS_AS(read_volume(p), FormatError);
    }
}

TEST_CASE("reading a mask file as a volume fails") {
    Mask m = make_mask({2, 2, 2}, true);
    const fs::path p = tmp_dir() / "maskdtype.rvol";
    write_mask(m, Spacing{1, 1, 1}, p);
    CHECK_THROWS_AS(read_volume(p), FormatError);
}

TEST_CASE("reading a volume file as a mask fails") {
    const Volume v = random_volume({2, 2, 2}, 1);
    const fs::path p = tmp_dir() / "voldtype.rvol";
    write_volume(v, p);
    CHECK_THROWS_AS(read_mask(p), FormatError);
}

TEST_CASE("mask bytes outside 0 1 are rejected") {
    // dtype 1 payload is one byte per voxel.
    std::vector<std::uint8_t> b;
    b.push_back('R');
    b.push_back('V');
    b.push_back('L');
    b.push_back('1');
    put_u32(b, 1);
    put_u32(b, 1);
    put_u32(b, 1);
    put_u32(b, 2);
    put_f32(b, 1.0f);
    put_f32(b, 1.0f);
    put_f32(b, 1.0f);
    b.push_back(1);
    b.push_back(0);
    b.push_back(0);
    b.push_back(2);
    const fs::path p = tmp_dir() / "badmask.rvol";
    dump(p, b);
    CHECK_THROWS_AS(read_mask(p), FormatError);
}

TEST_CASE("invalid volumes are rejected before writing") {
    Volume v = random_volume({2, 2, 2}, 2);
    SUBCASE("nan voxel") {
        v.voxels[3] = std::nanf("");
        CHECK_THROWS_AS(write_volume(v, tmp_dir() / "nan.rvol"),
                        ArgumentError);
    }
    SUBCASE("voxel count mismatch") {
        v.voxels.pop_back();
        CHECK_THROWS_AS(write_volume(v, tmp_dir() / "count.rvol"),
                        ArgumentError);
    }
    SUBCASE("non positive spacing") {
        v.spacing.sy = 0.0f;
        CHECK_THROWS_AS(write_volume(v, tmp_dir() / "sp.rvol"),
                        ArgumentError);
    }
    SUBCASE("normalized range") {
        v.value_space = ValueSpace::Normalized;
        v.voxels.assign(v.dims.count(), 0.75f);
        CHECK_THROWS_AS(write_volume(v, tmp_dir() / "norm.rvol"),
                        ArgumentError);
    }
}

TEST_CASE("missing file is an io error") {
    CHECK_THROWS_AS(read_volume(tmp_dir() / "does_not_exist.rvol"), IoError);
}
