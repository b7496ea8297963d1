// geometry.hpp - cone-beam projection geometry and 2D detector images.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "kv2ct/common.hpp"
#include "kv2ct/volume.hpp"

namespace kv2ct {

// Orthogonal views. AP: source anterior at (0,-SAD,0), beam along +A-P.
// LAT: source patient-right at (-SAD,0,0), beam along +R-L.
// Detector u axis: R-L (AP view) / A-P (LAT view); v axis: S-I for both,
// so a couch shift along S-I moves both images along v only.
enum class View { AP = 0, LAT = 1 };

const char* view_name(View v);

// 2D detector image, u-fastest storage; values are line integrals -ln(I/I0).
struct Image2D {
    int nu = 0, nv = 0;
    double du_mm = 1.0, dv_mm = 1.0;  // pixel pitch
    std::vector<float> data;

    Image2D() = default;
    Image2D(int u, int v, double du, double dv, float fill = 0.0f);

    std::int64_t pixel_count() const { return std::int64_t(nu) * nv; }
    std::int64_t index(int iu, int iv) const { return iu + std::int64_t(nu) * iv; }
    float& at(int iu, int iv) { return data[index(iu, iv)]; }
    float at(int iu, int iv) const { return data[index(iu, iv)]; }
    void validate(const std::string& what) const;
};

struct GeometrySpec {
    double sad_mm = 1000.0;  // source to isocenter
    double sdd_mm = 1500.0;  // source to detector
    int nu = 288, nv = 288;
    double du_mm = 0.75, dv_mm = 0.75;
    double mu_water_per_mm = 0.02;

    double magnification() const { return sdd_mm / sad_mm; }
    void validate() const;
};

// Two orthogonal projections of one CT state.
struct KvImagePair {
    Image2D ap, lat;
    GeometrySpec geom;
};

Vec3 source_position(const GeometrySpec& g, View view);
// World position of detector pixel center (iu, iv) may be fractional.
Vec3 detector_pixel_position(const GeometrySpec& g, View view, double iu, double iv);

// HU -> linear attenuation (1/mm), clamped at zero.
double mu_from_hu(double hu, double mu_water_per_mm);

// Ray-march line integrals; step = half the smallest voxel pitch, midpoint rule.
Image2D project_view(const Volume3D& vol, const GeometrySpec& g, View view);
KvImagePair project_pair(const Volume3D& vol, const GeometrySpec& g);

float bilinear_sample(const Image2D& img, double fu, double fv, float fill);

// Translate content by (du_mm, dv_mm); pixels sampled from outside take `fill`
// (0 = air path). Result pixel value = input at (pos - delta).
Image2D translate_image(const Image2D& img, double du_mm, double dv_mm, float fill = 0.0f);

// Pixel-aligned crop of nu x nv pixels starting at (u0, v0).
Image2D crop_image(const Image2D& img, int u0, int v0, int nu, int nv);

// Block-mean downsample; dims must be divisible by the factors.
Image2D downsample_image_blockmean(const Image2D& img, int fu, int fv);

// Additive Gaussian noise on line integrals, clamped at zero. Deterministic per seed.
void add_projection_noise(Image2D& img, double sigma, std::uint64_t seed);

// Shift along v (in mm) that best maps `a` onto `b`, estimated from the
// cross-correlation of u-summed profiles with parabolic sub-pixel refinement.
double estimate_shift_v_mm(const Image2D& a, const Image2D& b, double max_shift_mm);

// File pair <stem>.json + <stem>.raw: AP image then LAT image, f32le u-fastest.
void write_kv_pair(const KvImagePair& pair, const std::string& stem);
KvImagePair read_kv_pair(const std::string& stem);

}  // namespace kv2ct
