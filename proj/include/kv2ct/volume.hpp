// volume.hpp - dense 3D scalar grid (HU or Gy) with spacing/origin metadata.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "kv2ct/common.hpp"

namespace kv2ct {

constexpr float kAirHu = -1000.0f;

// Dense scalar volume. Storage is x-fastest: idx = x + nx*(y + ny*z) with
// (x,y,z) = (R-L, A-P, S-I). Voxel (i,j,k) center sits at
// origin_mm + (i,j,k)*spacing_mm.
struct Volume3D {
    std::array<int, 3> dims{0, 0, 0};
    std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
    std::array<double, 3> origin_mm{0.0, 0.0, 0.0};
    std::string unit = "HU";  // "HU" | "Gy" | "lineintegral"
    std::vector<float> data;

    Volume3D() = default;
    Volume3D(std::array<int, 3> d, std::array<double, 3> sp, std::array<double, 3> org,
             std::string u = "HU", float fill = 0.0f);

    std::int64_t voxel_count() const {
        return std::int64_t(dims[0]) * dims[1] * dims[2];
    }
    std::int64_t index(int x, int y, int z) const {
        return x + std::int64_t(dims[0]) * (y + std::int64_t(dims[1]) * z);
    }
    float& at(int x, int y, int z) { return data[index(x, y, z)]; }
    float at(int x, int y, int z) const { return data[index(x, y, z)]; }

    // World position of a voxel center.
    Vec3 voxel_center(int x, int y, int z) const {
        return {origin_mm[0] + x * spacing_mm[0], origin_mm[1] + y * spacing_mm[1],
                origin_mm[2] + z * spacing_mm[2]};
    }
    double voxel_volume_mm3() const {
        return spacing_mm[0] * spacing_mm[1] * spacing_mm[2];
    }
    BoxIndices full_box() const {
        return {{0, 0, 0}, {dims[0] - 1, dims[1] - 1, dims[2] - 1}};
    }

    bool same_grid(const Volume3D& o) const {
        return dims == o.dims;
    }
    void require_same_grid(const Volume3D& o, const std::string& what) const;

    bool all_finite() const;
    void validate(const std::string& what) const;  // dims/spacing/finiteness
};

// Trilinear sample at fractional index coordinates; outside the voxel-center
// support returns `fill`.
float trilinear_sample(const Volume3D& vol, double fx, double fy, double fz, float fill);

// Translate content by delta_mm along `axis` with trilinear interpolation.
// A voxel of the result takes the value of the input at (pos - delta); voxels
// sampled from outside the input take `fill` (air by default).
Volume3D shift_volume(const Volume3D& vol, double delta_mm, Axis axis, float fill = kAirHu);

// Extract box (inclusive) as a new volume; origin is carried over.
Volume3D crop_volume(const Volume3D& vol, const BoxIndices& box);

// Block-mean downsample; dims must be divisible by the factors.
Volume3D downsample_volume_blockmean(const Volume3D& vol, std::array<int, 3> f);

// Trilinear upsample by integer factors (inverse alignment of the block-mean
// downsample: coarse voxel k covers fine voxels [f*k, f*k+f) and sits at their
// center of mass). Exact on constants.
Volume3D upsample_volume_trilinear(const Volume3D& vol, std::array<int, 3> f);

// File pair <stem>.json + <stem>.raw (little-endian f32, x-fastest).
void write_volume(const Volume3D& vol, const std::string& stem);
Volume3D read_volume(const std::string& stem);

}  // namespace kv2ct
