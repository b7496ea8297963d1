#include "kv2ct/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "json.hpp"

namespace kv2ct {

using nlohmann::json;

const char* view_name(View v) { return v == View::AP ? "AP" : "LAT"; }

Image2D::Image2D(int u, int v, double du, double dv, float fill)
    : nu(u), nv(v), du_mm(du), dv_mm(dv) {
    validate("Image2D");
    data.assign(std::size_t(pixel_count()), fill);
}

void Image2D::validate(const std::string& what) const {
    if (nu <= 0 || nv <= 0) throw ShapeError(what + ": non-positive image dims");
    if (!(du_mm > 0.0) || !(dv_mm > 0.0))
        throw ConfigError(what + ": non-positive pixel pitch");
    if (!data.empty() && std::int64_t(data.size()) != pixel_count())
        throw ShapeError(what + ": data size does not match dims");
}

void GeometrySpec::validate() const {
    if (!(sad_mm > 0.0)) throw ConfigError("geometry: sad_mm must be positive");
    if (!(sdd_mm > sad_mm))
        throw ConfigError("geometry: sdd_mm must exceed sad_mm (detector behind isocenter)");
    if (nu <= 0 || nv <= 0) throw ConfigError("geometry: non-positive detector dims");
    if (!(du_mm > 0.0) || !(dv_mm > 0.0))
        throw ConfigError("geometry: non-positive detector pitch");
    if (!(mu_water_per_mm > 0.0)) throw ConfigError("geometry: mu_water_per_mm must be positive");
}

Vec3 source_position(const GeometrySpec& g, View view) {
    if (view == View::AP) return {0.0, -g.sad_mm, 0.0};
    return {-g.sad_mm, 0.0, 0.0};
}

Vec3 detector_pixel_position(const GeometrySpec& g, View view, double iu, double iv) {
    const double u = (iu - 0.5 * (g.nu - 1)) * g.du_mm;
    const double v = (iv - 0.5 * (g.nv - 1)) * g.dv_mm;
    const double depth = g.sdd_mm - g.sad_mm;  // beyond isocenter
    if (view == View::AP) return {u, depth, v};
    return {depth, u, v};
}

double mu_from_hu(double hu, double mu_water_per_mm) {
    return std::max(0.0, mu_water_per_mm * (1.0 + hu / 1000.0));
}

namespace {

// Clip segment p0 + t*(p1-p0), t in [0,1], against an AABB (slab method).
bool clip_segment(const Vec3& p0, const Vec3& p1, const Vec3& lo, const Vec3& hi,
                  double& t0, double& t1) {
    t0 = 0.0;
    t1 = 1.0;
    for (int a = 0; a < 3; ++a) {
        const double d = p1[a] - p0[a];
        if (std::abs(d) < 1e-12) {
            if (p0[a] < lo[a] || p0[a] > hi[a]) return false;
            continue;
        }
        double ta = (lo[a] - p0[a]) / d;
        double tb = (hi[a] - p0[a]) / d;
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
        if (t0 >= t1) return false;
    }
    return true;
}

}  // namespace

Image2D project_view(const Volume3D& vol, const GeometrySpec& g, View view) {
    vol.validate("project input");
    g.validate();
    Image2D img(g.nu, g.nv, g.du_mm, g.dv_mm);
    const Vec3 src = source_position(g, view);
    // Support box: half a voxel beyond the voxel centers.
    Vec3 lo, hi;
    for (int a = 0; a < 3; ++a) {
        lo[a] = vol.origin_mm[a] - 0.5 * vol.spacing_mm[a];
        hi[a] = vol.origin_mm[a] + (vol.dims[a] - 0.5) * vol.spacing_mm[a];
    }
    const double step0 =
        0.5 * std::min({vol.spacing_mm[0], vol.spacing_mm[1], vol.spacing_mm[2]});
    parallel_for(g.nv, [&](int v_lo, int v_hi) {
        for (int iv = v_lo; iv < v_hi; ++iv) {
            for (int iu = 0; iu < g.nu; ++iu) {
                const Vec3 pix = detector_pixel_position(g, view, iu, iv);
                const Vec3 dir{pix.x - src.x, pix.y - src.y, pix.z - src.z};
                double t0, t1;
                if (!clip_segment(src, pix, lo, hi, t0, t1)) continue;
                const double seg_len = dir.norm() * (t1 - t0);
                const int n = std::max(1, int(std::ceil(seg_len / step0)));
                const double dl = seg_len / n;
                const double dt = (t1 - t0) / n;
                double acc = 0.0;
                for (int i = 0; i < n; ++i) {
                    const double t = t0 + (i + 0.5) * dt;
                    const double px = src.x + t * dir.x;
                    const double py = src.y + t * dir.y;
                    const double pz = src.z + t * dir.z;
                    // Clamp into the voxel-center support: boundary voxels
                    // extend half a pitch outward (piecewise-constant edges).
                    const double fx = std::clamp((px - vol.origin_mm[0]) / vol.spacing_mm[0],
                                                 0.0, double(vol.dims[0] - 1));
                    const double fy = std::clamp((py - vol.origin_mm[1]) / vol.spacing_mm[1],
                                                 0.0, double(vol.dims[1] - 1));
                    const double fz = std::clamp((pz - vol.origin_mm[2]) / vol.spacing_mm[2],
                                                 0.0, double(vol.dims[2] - 1));
                    const float hu = trilinear_sample(vol, fx, fy, fz, kAirHu);
                    acc += mu_from_hu(hu, g.mu_water_per_mm) * dl;
                }
                img.at(iu, iv) = float(acc);
            }
        }
    });
    return img;
}

KvImagePair project_pair(const Volume3D& vol, const GeometrySpec& g) {
    KvImagePair pair;
    pair.geom = g;
    pair.ap = project_view(vol, g, View::AP);
    pair.lat = project_view(vol, g, View::LAT);
    return pair;
}

float bilinear_sample(const Image2D& img, double fu, double fv, float fill) {
    if (fu < 0.0 || fv < 0.0 || fu > img.nu - 1 || fv > img.nv - 1) return fill;
    int u0 = int(fu), v0 = int(fv);
    if (u0 == img.nu - 1 && img.nu > 1) --u0;
    if (v0 == img.nv - 1 && img.nv > 1) --v0;
    const double tu = fu - u0, tv = fv - v0;
    auto p = [&](int du, int dv) -> double {
        return img.at(std::min(u0 + du, img.nu - 1), std::min(v0 + dv, img.nv - 1));
    };
    const double c0 = p(0, 0) * (1 - tu) + p(1, 0) * tu;
    const double c1 = p(0, 1) * (1 - tu) + p(1, 1) * tu;
    return float(c0 * (1 - tv) + c1 * tv);
}

Image2D translate_image(const Image2D& img, double du_mm, double dv_mm, float fill) {
    img.validate("translate_image input");
    Image2D out = img;
    const double su = du_mm / img.du_mm;
    const double sv = dv_mm / img.dv_mm;
    for (int iv = 0; iv < img.nv; ++iv)
        for (int iu = 0; iu < img.nu; ++iu)
            out.at(iu, iv) = bilinear_sample(img, iu - su, iv - sv, fill);
    return out;
}

Image2D crop_image(const Image2D& img, int u0, int v0, int nu, int nv) {
    img.validate("crop_image input");
    if (u0 < 0 || v0 < 0 || nu <= 0 || nv <= 0 || u0 + nu > img.nu || v0 + nv > img.nv)
        throw ShapeError("crop_image: window [" + std::to_string(u0) + "," +
                         std::to_string(u0 + nu) + ")x[" + std::to_string(v0) + "," +
                         std::to_string(v0 + nv) + ") exceeds image " + std::to_string(img.nu) +
                         "x" + std::to_string(img.nv));
    Image2D out(nu, nv, img.du_mm, img.dv_mm);
    for (int iv = 0; iv < nv; ++iv)
        for (int iu = 0; iu < nu; ++iu) out.at(iu, iv) = img.at(u0 + iu, v0 + iv);
    return out;
}

Image2D downsample_image_blockmean(const Image2D& img, int fu, int fv) {
    img.validate("downsample_image input");
    if (fu <= 0 || fv <= 0) throw ConfigError("downsample_image: non-positive factor");
    if (img.nu % fu != 0)
        throw ShapeError("downsample_image: width " + std::to_string(img.nu) +
                         " not divisible by factor " + std::to_string(fu) + " along u");
    if (img.nv % fv != 0)
        throw ShapeError("downsample_image: height " + std::to_string(img.nv) +
                         " not divisible by factor " + std::to_string(fv) + " along v");
    Image2D out(img.nu / fu, img.nv / fv, img.du_mm * fu, img.dv_mm * fv);
    const double inv = 1.0 / (double(fu) * fv);
    for (int iv = 0; iv < out.nv; ++iv)
        for (int iu = 0; iu < out.nu; ++iu) {
            double acc = 0.0;
            for (int dv = 0; dv < fv; ++dv)
                for (int du = 0; du < fu; ++du) acc += img.at(iu * fu + du, iv * fv + dv);
            out.at(iu, iv) = float(acc * inv);
        }
    return out;
}

void add_projection_noise(Image2D& img, double sigma, std::uint64_t seed) {
    if (sigma < 0.0) throw ConfigError("projection noise sigma must be non-negative");
    if (sigma == 0.0) return;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, sigma);
    for (float& p : img.data) p = float(std::max(0.0, double(p) + dist(rng)));
}

double estimate_shift_v_mm(const Image2D& a, const Image2D& b, double max_shift_mm) {
    a.validate("estimate_shift a");
    b.validate("estimate_shift b");
    if (a.nu != b.nu || a.nv != b.nv || a.dv_mm != b.dv_mm)
        throw ShapeError("estimate_shift: image grids differ");
    std::vector<double> pa(a.nv, 0.0), pb(b.nv, 0.0);
    for (int iv = 0; iv < a.nv; ++iv)
        for (int iu = 0; iu < a.nu; ++iu) {
            pa[iv] += a.at(iu, iv);
            pb[iv] += b.at(iu, iv);
        }
    const int max_lag = std::min(a.nv - 1, int(std::ceil(max_shift_mm / a.dv_mm)) + 1);
    auto score = [&](int lag) {  // correlation of pb against pa shifted by lag
        double s = 0.0;
        for (int iv = 0; iv < a.nv; ++iv) {
            const int j = iv - lag;
            if (j >= 0 && j < a.nv) s += pb[iv] * pa[j];
        }
        return s;
    };
    int best = 0;
    double best_score = score(0);
    for (int lag = -max_lag; lag <= max_lag; ++lag) {
        const double s = score(lag);
        if (s > best_score) {
            best_score = s;
            best = lag;
        }
    }
    // Parabolic refinement around the integer peak.
    double refined = best;
    if (best > -max_lag && best < max_lag) {
        const double sm = score(best - 1), s0 = score(best), sp = score(best + 1);
        const double denom = sm - 2.0 * s0 + sp;
        if (std::abs(denom) > 1e-12) {
            const double off = 0.5 * (sm - sp) / denom;
            if (std::abs(off) <= 1.0) refined = best + off;
        }
    }
    return refined * a.dv_mm;
}

void write_kv_pair(const KvImagePair& pair, const std::string& stem) {
    pair.ap.validate("write_kv_pair ap");
    pair.lat.validate("write_kv_pair lat");
    if (pair.ap.nu != pair.lat.nu || pair.ap.nv != pair.lat.nv)
        throw ShapeError("write_kv_pair: AP and LAT dims differ");
    json hdr;
    hdr["images"] = 2;
    hdr["order"] = {"AP", "LAT"};
    hdr["dims"] = {pair.ap.nu, pair.ap.nv};
    hdr["pitch_mm"] = {pair.ap.du_mm, pair.ap.dv_mm};
    hdr["dtype"] = "f32le";
    hdr["unit"] = "lineintegral";
    hdr["geometry"] = {{"sad_mm", pair.geom.sad_mm},
                       {"sdd_mm", pair.geom.sdd_mm},
                       {"mu_water_per_mm", pair.geom.mu_water_per_mm}};
    {
        std::ofstream js(stem + ".json");
        if (!js) throw IoError("write_kv_pair: cannot open " + stem + ".json");
        js << hdr.dump(2) << "\n";
        if (!js) throw IoError("write_kv_pair: failed writing " + stem + ".json");
    }
    std::ofstream raw(stem + ".raw", std::ios::binary);
    if (!raw) throw IoError("write_kv_pair: cannot open " + stem + ".raw");
    raw.write(reinterpret_cast<const char*>(pair.ap.data.data()),
              std::streamsize(pair.ap.data.size() * sizeof(float)));
    raw.write(reinterpret_cast<const char*>(pair.lat.data.data()),
              std::streamsize(pair.lat.data.size() * sizeof(float)));
    if (!raw) throw IoError("write_kv_pair: failed writing " + stem + ".raw");
}

KvImagePair read_kv_pair(const std::string& stem) {
    std::ifstream js(stem + ".json");
    if (!js) throw IoError("read_kv_pair: cannot open " + stem + ".json");
    json hdr;
    try {
        js >> hdr;
    } catch (const json::exception& e) {
        throw IoError("read_kv_pair: bad header " + stem + ".json: " + e.what());
    }
    KvImagePair pair;
    try {
        if (hdr.at("images").get<int>() != 2)
            throw IoError("read_kv_pair: expected 2 images in " + stem + ".json");
        if (hdr.at("dtype").get<std::string>() != "f32le")
            throw IoError("read_kv_pair: unsupported dtype in " + stem + ".json");
        const auto dims = hdr.at("dims").get<std::array<int, 2>>();
        const auto pitch = hdr.at("pitch_mm").get<std::array<double, 2>>();
        pair.ap = Image2D(dims[0], dims[1], pitch[0], pitch[1]);
        pair.lat = Image2D(dims[0], dims[1], pitch[0], pitch[1]);
        const auto& geo = hdr.at("geometry");
        pair.geom.sad_mm = geo.at("sad_mm").get<double>();
        pair.geom.sdd_mm = geo.at("sdd_mm").get<double>();
        pair.geom.mu_water_per_mm = geo.at("mu_water_per_mm").get<double>();
        pair.geom.nu = dims[0];
        pair.geom.nv = dims[1];
        pair.geom.du_mm = pitch[0];
        pair.geom.dv_mm = pitch[1];
    } catch (const json::exception& e) {
        throw IoError("read_kv_pair: missing header field in " + stem + ".json: " + e.what());
    }
    std::ifstream raw(stem + ".raw", std::ios::binary | std::ios::ate);
    if (!raw) throw IoError("read_kv_pair: cannot open " + stem + ".raw");
    const auto bytes = std::int64_t(raw.tellg());
    const auto expect = 2 * pair.ap.pixel_count() * std::int64_t(sizeof(float));
    if (bytes != expect)
        throw IoError("read_kv_pair: " + stem + ".raw has " + std::to_string(bytes) +
                      " bytes, expected " + std::to_string(expect));
    raw.seekg(0);
    raw.read(reinterpret_cast<char*>(pair.ap.data.data()),
             std::streamsize(pair.ap.data.size() * sizeof(float)));
    raw.read(reinterpret_cast<char*>(pair.lat.data.data()),
             std::streamsize(pair.lat.data.size() * sizeof(float)));
    if (!raw) throw IoError("read_kv_pair: failed reading " + stem + ".raw");
    return pair;
}

}  // namespace kv2ct
