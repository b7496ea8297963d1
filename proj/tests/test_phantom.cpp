#include <cmath>
#include <filesystem>
#include <numbers>

#include "doctest.h"
#include "kv2ct/phantom.hpp"

using namespace kv2ct;

TEST_SUITE("phantom") {

TEST_CASE("identical spec and seed give bitwise-identical output") {
    PhantomSpec spec;
    const PhantomResult a = generate_phantom(spec);
    const PhantomResult b = generate_phantom(spec);
    CHECK(a.ct.data == b.ct.data);
    for (const auto& name : structure_names()) CHECK(a.masks.mask(name) == b.masks.mask(name));
}

TEST_CASE("different seeds move the anatomy") {
    PhantomSpec spec;
    const PhantomResult a = generate_phantom(spec);
    spec.seed = 2;
    const PhantomResult c = generate_phantom(spec);
    CHECK(a.ct.data != c.ct.data);
}

TEST_CASE("all features off yields uniform air and empty masks") {
    PhantomSpec spec;
    spec.with_body = spec.with_skull = spec.with_spine = spec.with_mandible = false;
    spec.with_brainstem = spec.with_cavities = spec.with_helmet = spec.with_tumor = false;
    const PhantomResult r = generate_phantom(spec);
    for (float hu : r.ct.data) CHECK(hu == -1000.0f);
    for (const auto& name : structure_names()) CHECK(r.masks.voxel_count(name) == 0);
}

TEST_CASE("head mask volume matches the analytic ellipsoid within 5%") {
    PhantomSpec spec;  // default seed 1
    const PhantomResult r = generate_phantom(spec);
    const double analytic = 4.0 / 3.0 * std::numbers::pi * spec.head_radii_mm[0] *
                            spec.head_radii_mm[1] * spec.head_radii_mm[2];
    const double voxel = spec.spacing_mm[0] * spec.spacing_mm[1] * spec.spacing_mm[2];
    const double counted = double(r.masks.voxel_count("HEAD")) * voxel;
    CHECK(std::abs(counted - analytic) / analytic < 0.05);
}

TEST_CASE("every structure mask is a subset of BODY") {
    const PhantomResult r = generate_phantom(PhantomSpec{});
    const auto& body = r.masks.mask("BODY");
    for (const auto& name : structure_names()) {
        if (name == "BODY") continue;
        const auto& m = r.masks.mask(name);
        CHECK(r.masks.voxel_count(name) > 0);
        for (std::size_t i = 0; i < m.size(); ++i)
            if (m[i]) CHECK(body[i] == 1);
    }
}

TEST_CASE("mandible mask voxels keep bone-level HU") {
    const PhantomResult r = generate_phantom(PhantomSpec{});
    const auto& m = r.masks.mask("MANDIBLE");
    for (std::size_t i = 0; i < m.size(); ++i)
        if (m[i]) CHECK(r.ct.data[i] >= 500.0f);
}

TEST_CASE("generated HU values stay within the CT range") {
    const PhantomResult r = generate_phantom(PhantomSpec{});
    for (float hu : r.ct.data) {
        CHECK(hu >= -1024.0f);
        CHECK(hu <= 3500.0f);
    }
}

TEST_CASE("head bounding box is interior with wide A-P margins") {
    PhantomSpec spec;
    const PhantomResult r = generate_phantom(spec);
    const BoxIndices box = head_bbox(r.masks);
    CHECK(box.lo[1] >= 2);
    CHECK(box.hi[1] <= spec.dims[1] - 3);
    for (int a = 0; a < 3; ++a) {
        CHECK(box.lo[a] > 0);
        CHECK(box.hi[a] < spec.dims[a] - 1);
    }
}

TEST_CASE("bounding box of a single-voxel mask is that voxel") {
    StructureMaskSet masks;
    masks.dims = {4, 5, 6};
    masks.masks["HEAD"].assign(4 * 5 * 6, 0);
    masks.masks["HEAD"][2 + 4 * (3 + 5 * 4)] = 1;
    const BoxIndices box = head_bbox(masks);
    CHECK(box.lo == std::array<int, 3>{2, 3, 4});
    CHECK(box.hi == std::array<int, 3>{2, 3, 4});
    masks.masks["HEAD"].assign(4 * 5 * 6, 1);
    const BoxIndices full = head_bbox(masks);
    CHECK(full.lo == std::array<int, 3>{0, 0, 0});
    CHECK(full.hi == std::array<int, 3>{3, 4, 5});
    masks.masks["HEAD"].assign(4 * 5 * 6, 0);
    CHECK_THROWS_AS(head_bbox(masks), ConfigError);
}

TEST_CASE("head bbox shrinks monotonically with the head radii") {
    PhantomSpec spec;
    spec.jitter_voxels = 0.0;  // isolate the radius effect
    std::array<int, 3> prev{1 << 20, 1 << 20, 1 << 20};
    for (double s : {1.0, 0.8, 0.6}) {
        PhantomSpec scaled = spec;
        for (int a = 0; a < 3; ++a) scaled.head_radii_mm[a] = spec.head_radii_mm[a] * s;
        const BoxIndices box = head_bbox(generate_phantom(scaled).masks);
        for (int a = 0; a < 3; ++a) {
            CHECK(box.extent(a) <= prev[a]);
            prev[a] = box.extent(a);
        }
    }
}

TEST_CASE("helmet adds material outside the body") {
    PhantomSpec with;
    PhantomSpec without = with;
    without.with_helmet = false;
    const PhantomResult a = generate_phantom(with);
    const PhantomResult b = generate_phantom(without);
    const auto& body = a.masks.mask("BODY");
    // The 3 mm annulus is anti-aliased against surrounding air, so most shell
    // voxels mix toward air; count voxels that clearly gained material and
    // the fully-interior ones that reach the full helmet HU.
    int raised = 0, full = 0;
    for (std::size_t i = 0; i < a.ct.data.size(); ++i) {
        if (body[i] || b.ct.data[i] != -1000.0f) continue;
        raised += a.ct.data[i] > -500.0f;
        full += a.ct.data[i] == 150.0f;
    }
    CHECK(raised > 300);
    CHECK(full > 20);
}

TEST_CASE("spec validation rejects bad parameters") {
    PhantomSpec spec;
    spec.tumor_radii_mm = {0.0, 8.0, 8.0};
    CHECK_THROWS_AS(generate_phantom(spec), ConfigError);
    spec = PhantomSpec{};
    spec.tumor_center_mm = {200.0, 0.0, 0.0};  // outside the volume
    CHECK_THROWS_AS(generate_phantom(spec), ConfigError);
}

TEST_CASE("mask RLE files round trip bitwise") {
    namespace fs = std::filesystem;
    const PhantomResult r = generate_phantom(PhantomSpec{});
    const std::string stem = (fs::temp_directory_path() / "kv2ct_masks_rt").string();
    write_masks(r.masks, stem);
    const StructureMaskSet m = read_masks(stem);
    CHECK(m.dims == r.masks.dims);
    for (const auto& name : structure_names()) CHECK(m.mask(name) == r.masks.mask(name));
    fs::remove(stem + ".masks.json");
}

}  // TEST_SUITE
