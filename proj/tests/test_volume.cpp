#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "kv2ct/volume.hpp"

using namespace kv2ct;

namespace {

Volume3D make_random_volume(std::array<int, 3> dims, std::uint32_t seed) {
    Volume3D v(dims, {3.0, 3.0, 3.0}, {-10.0, -20.0, -30.0});
    std::mt19937 rng(seed);
    std::uniform_int_distribution<int> d(-1000, 2000);
    for (auto& x : v.data) x = float(d(rng));
    return v;
}

}  // namespace

TEST_SUITE("volume") {

TEST_CASE("construction fills and indexes x-fastest") {
    Volume3D v({4, 3, 2}, {1.0, 1.0, 1.0}, {0.0, 0.0, 0.0}, "HU", 7.0f);
    CHECK(v.voxel_count() == 24);
    CHECK(v.at(3, 2, 1) == 7.0f);
    v.at(1, 0, 0) = 1.0f;
    CHECK(v.data[1] == 1.0f);
    v.at(0, 1, 0) = 2.0f;
    CHECK(v.data[4] == 2.0f);
    v.at(0, 0, 1) = 3.0f;
    CHECK(v.data[12] == 3.0f);
}

TEST_CASE("validation rejects bad dims and spacing") {
    Volume3D v;
    v.dims = {0, 4, 4};
    CHECK_THROWS_AS(v.validate("t"), ShapeError);
    v.dims = {4, 4, 4};
    v.spacing_mm = {1.0, -1.0, 1.0};
    CHECK_THROWS_AS(v.validate("t"), ConfigError);
}

TEST_CASE("voxel centers follow origin and spacing") {
    Volume3D v({2, 2, 2}, {2.0, 3.0, 4.0}, {10.0, 20.0, 30.0});
    const Vec3 c = v.voxel_center(1, 1, 1);
    CHECK(c.x == doctest::Approx(12.0));
    CHECK(c.y == doctest::Approx(23.0));
    CHECK(c.z == doctest::Approx(34.0));
    CHECK(v.voxel_volume_mm3() == doctest::Approx(24.0));
}

TEST_CASE("trilinear sample is exact at voxel centers and averages midpoints") {
    Volume3D v({2, 2, 2}, {1, 1, 1}, {0, 0, 0});
    for (int i = 0; i < 8; ++i) v.data[i] = float(i);
    CHECK(trilinear_sample(v, 1.0, 0.0, 1.0, -1) == doctest::Approx(5.0));
    CHECK(trilinear_sample(v, 0.5, 0.5, 0.5, -1) == doctest::Approx(3.5));
    CHECK(trilinear_sample(v, -0.01, 0, 0, -1) == -1.0f);
    CHECK(trilinear_sample(v, 0, 1.01, 0, -1) == -1.0f);
}

TEST_CASE("trilinear sample reproduces linear fields exactly") {
    Volume3D v({5, 4, 3}, {1, 1, 1}, {0, 0, 0});
    for (int z = 0; z < 3; ++z)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 5; ++x) v.at(x, y, z) = float(2 * x - 3 * y + 5 * z + 1);
    CHECK(trilinear_sample(v, 1.25, 2.5, 0.75, 0) ==
          doctest::Approx(2 * 1.25 - 3 * 2.5 + 5 * 0.75 + 1).epsilon(1e-6));
}

TEST_CASE("zero shift is an exact identity") {
    const Volume3D v = make_random_volume({8, 7, 6}, 11);
    const Volume3D s = shift_volume(v, 0.0, Axis::SI);
    CHECK(s.data == v.data);
}

TEST_CASE("integer-voxel shift rolls content and fills with air") {
    const Volume3D v = make_random_volume({6, 5, 8}, 12);
    const Volume3D s = shift_volume(v, 2 * v.spacing_mm[2], Axis::SI);  // +2 voxels along z
    for (int z = 0; z < 8; ++z)
        for (int y = 0; y < 5; ++y)
            for (int x = 0; x < 6; ++x) {
                if (z >= 2)
                    CHECK(s.at(x, y, z) == v.at(x, y, z - 2));
                else
                    CHECK(s.at(x, y, z) == kAirHu);
            }
}

TEST_CASE("shift supports all axes") {
    const Volume3D v = make_random_volume({6, 6, 6}, 13);
    const Volume3D sx = shift_volume(v, 3.0, Axis::RL);
    CHECK(sx.at(1, 2, 3) == v.at(0, 2, 3));
    const Volume3D sy = shift_volume(v, -3.0, Axis::AP);
    CHECK(sy.at(1, 2, 3) == v.at(1, 3, 3));
}

TEST_CASE("sub-voxel shift round trip stays close") {
    Volume3D v({8, 8, 16}, {1, 1, 1}, {0, 0, 0});
    for (int z = 0; z < 16; ++z)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x)
                v.at(x, y, z) = 500.0f * std::sin(0.15 * z) + 100.0f * x;
    const Volume3D fwd = shift_volume(v, 0.3, Axis::SI, 0.0f);
    const Volume3D back = shift_volume(fwd, -0.3, Axis::SI, 0.0f);
    double mae = 0.0;
    int n = 0;
    for (int z = 2; z < 14; ++z)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) {
                mae += std::abs(back.at(x, y, z) - v.at(x, y, z));
                ++n;
            }
    CHECK(mae / n < 5.0);  // interpolation smoothing only
}

TEST_CASE("shift rejects displacements beyond half the extent") {
    const Volume3D v = make_random_volume({4, 4, 4}, 14);  // extent 12 mm
    CHECK_THROWS_AS(shift_volume(v, 6.5, Axis::SI), ConfigError);
    CHECK_NOTHROW(shift_volume(v, 5.5, Axis::SI));
}

TEST_CASE("crop copies the box and carries origin") {
    const Volume3D v = make_random_volume({6, 5, 4}, 15);
    const BoxIndices box{{1, 2, 1}, {4, 4, 2}};
    const Volume3D c = crop_volume(v, box);
    CHECK(c.dims == std::array<int, 3>{4, 3, 2});
    CHECK(c.origin_mm[0] == doctest::Approx(v.origin_mm[0] + 3.0));
    CHECK(c.at(0, 0, 0) == v.at(1, 2, 1));
    CHECK(c.at(3, 2, 1) == v.at(4, 4, 2));
    CHECK_THROWS_AS(crop_volume(v, BoxIndices{{0, 0, 0}, {6, 4, 3}}), ShapeError);
}

TEST_CASE("block-mean downsample: constant, identity factor, checkerboard") {
    Volume3D c({4, 4, 4}, {1, 1, 1}, {0, 0, 0}, "HU", 123.0f);
    const Volume3D cd = downsample_volume_blockmean(c, {2, 2, 2});
    CHECK(cd.dims == std::array<int, 3>{2, 2, 2});
    for (float x : cd.data) CHECK(x == 123.0f);
    CHECK(cd.spacing_mm[0] == doctest::Approx(2.0));

    const Volume3D v = make_random_volume({4, 6, 2}, 16);
    const Volume3D id = downsample_volume_blockmean(v, {1, 1, 1});
    CHECK(id.data == v.data);

    Volume3D cb({4, 4, 4}, {1, 1, 1}, {0, 0, 0});
    for (int z = 0; z < 4; ++z)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) cb.at(x, y, z) = ((x + y + z) % 2) ? 100.0f : -100.0f;
    const Volume3D cbd = downsample_volume_blockmean(cb, {2, 2, 2});
    for (float x : cbd.data) CHECK(x == 0.0f);
}

TEST_CASE("block-mean downsample preserves the mean") {
    const Volume3D v = make_random_volume({8, 6, 4}, 17);
    const Volume3D d = downsample_volume_blockmean(v, {2, 3, 2});
    double m0 = 0.0, m1 = 0.0;
    for (float x : v.data) m0 += x;
    for (float x : d.data) m1 += x;
    m0 /= double(v.voxel_count());
    m1 /= double(d.voxel_count());
    CHECK(m1 == doctest::Approx(m0).epsilon(1e-6));
}

TEST_CASE("downsample divisibility errors name the axis") {
    const Volume3D v = make_random_volume({6, 5, 4}, 18);
    try {
        downsample_volume_blockmean(v, {1, 2, 1});
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("A-P") != std::string::npos);
    }
}

TEST_CASE("downsample centers the coarse grid on its blocks") {
    const Volume3D v = make_random_volume({4, 4, 4}, 19);
    const Volume3D d = downsample_volume_blockmean(v, {2, 2, 2});
    // First coarse center = mean of first two fine centers.
    CHECK(d.origin_mm[0] == doctest::Approx(v.origin_mm[0] + 0.5 * v.spacing_mm[0]));
}

TEST_CASE("trilinear upsample is exact on constants and inverts the grid law") {
    Volume3D c({3, 2, 2}, {2, 2, 2}, {5, 5, 5}, "HU", -42.0f);
    const Volume3D u = upsample_volume_trilinear(c, {2, 2, 2});
    CHECK(u.dims == std::array<int, 3>{6, 4, 4});
    for (float x : u.data) CHECK(x == -42.0f);
    const Volume3D rt = downsample_volume_blockmean(u, {2, 2, 2});
    CHECK(rt.dims == c.dims);
    CHECK(rt.origin_mm[0] == doctest::Approx(c.origin_mm[0]));
    CHECK(rt.spacing_mm[0] == doctest::Approx(c.spacing_mm[0]));
}

TEST_CASE("upsample then downsample reproduces smooth volumes closely") {
    Volume3D v({6, 6, 6}, {2, 2, 2}, {0, 0, 0});
    for (int z = 0; z < 6; ++z)
        for (int y = 0; y < 6; ++y)
            for (int x = 0; x < 6; ++x) v.at(x, y, z) = float(10 * x + 7 * y - 4 * z);
    const Volume3D u = upsample_volume_trilinear(v, {2, 2, 2});
    const Volume3D rt = downsample_volume_blockmean(u, {2, 2, 2});
    // Interior voxels reproduce the linear field exactly; faces are affected
    // by the edge clamp of the upsampler.
    for (int z = 1; z < 5; ++z)
        for (int y = 1; y < 5; ++y)
            for (int x = 1; x < 5; ++x)
                CHECK(rt.at(x, y, z) == doctest::Approx(v.at(x, y, z)).epsilon(1e-5));
}

TEST_CASE("volume file round trip is bitwise") {
    namespace fs = std::filesystem;
    const Volume3D v = make_random_volume({5, 4, 3}, 20);
    const std::string stem = (fs::temp_directory_path() / "kv2ct_vol_rt").string();
    write_volume(v, stem);
    const Volume3D r = read_volume(stem);
    CHECK(r.dims == v.dims);
    CHECK(r.spacing_mm == v.spacing_mm);
    CHECK(r.origin_mm == v.origin_mm);
    CHECK(r.unit == v.unit);
    CHECK(r.data == v.data);
    fs::remove(stem + ".json");
    fs::remove(stem + ".raw");
}

TEST_CASE("volume reader rejects missing and truncated files") {
    namespace fs = std::filesystem;
    CHECK_THROWS_AS(read_volume("/nonexistent/volume"), IoError);
    const Volume3D v = make_random_volume({4, 4, 4}, 21);
    const std::string stem = (fs::temp_directory_path() / "kv2ct_vol_trunc").string();
    write_volume(v, stem);
    fs::resize_file(stem + ".raw", 10);
    CHECK_THROWS_AS(read_volume(stem), IoError);
    fs::remove(stem + ".json");
    fs::remove(stem + ".raw");
}

}  // TEST_SUITE
