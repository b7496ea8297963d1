#include "kv2ct/volume.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "raw volume I/O assumes a little-endian host");

namespace kv2ct {

using nlohmann::json;

Volume3D::Volume3D(std::array<int, 3> d, std::array<double, 3> sp, std::array<double, 3> org,
                   std::string u, float fill)
    : dims(d), spacing_mm(sp), origin_mm(org), unit(std::move(u)) {
    validate("Volume3D");
    data.assign(std::size_t(voxel_count()), fill);
}

void Volume3D::require_same_grid(const Volume3D& o, const std::string& what) const {
    if (!same_grid(o)) {
        throw ShapeError(what + ": volume dims mismatch (" + std::to_string(dims[0]) + "," +
                         std::to_string(dims[1]) + "," + std::to_string(dims[2]) + ") vs (" +
                         std::to_string(o.dims[0]) + "," + std::to_string(o.dims[1]) + "," +
                         std::to_string(o.dims[2]) + ")");
    }
}

bool Volume3D::all_finite() const {
    for (float v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

void Volume3D::validate(const std::string& what) const {
    for (int a = 0; a < 3; ++a) {
        if (dims[a] <= 0)
            throw ShapeError(what + ": non-positive dim along " + axis_name(Axis(a)));
        if (!(spacing_mm[a] > 0.0))
            throw ConfigError(what + ": non-positive spacing along " + axis_name(Axis(a)));
    }
    if (!data.empty() && std::int64_t(data.size()) != voxel_count())
        throw ShapeError(what + ": data size does not match dims");
}

float trilinear_sample(const Volume3D& vol, double fx, double fy, double fz, float fill) {
    const int nx = vol.dims[0], ny = vol.dims[1], nz = vol.dims[2];
    if (fx < 0.0 || fy < 0.0 || fz < 0.0 || fx > nx - 1 || fy > ny - 1 || fz > nz - 1)
        return fill;
    int x0 = int(fx), y0 = int(fy), z0 = int(fz);
    if (x0 == nx - 1) --x0;
    if (y0 == ny - 1) --y0;
    if (z0 == nz - 1) --z0;
    if (nx == 1) x0 = 0;
    if (ny == 1) y0 = 0;
    if (nz == 1) z0 = 0;
    const double tx = fx - x0, ty = fy - y0, tz = fz - z0;
    auto v = [&](int dx, int dy, int dz) -> double {
        return vol.at(std::min(x0 + dx, nx - 1), std::min(y0 + dy, ny - 1),
                      std::min(z0 + dz, nz - 1));
    };
    const double c00 = v(0, 0, 0) * (1 - tx) + v(1, 0, 0) * tx;
    const double c10 = v(0, 1, 0) * (1 - tx) + v(1, 1, 0) * tx;
    const double c01 = v(0, 0, 1) * (1 - tx) + v(1, 0, 1) * tx;
    const double c11 = v(0, 1, 1) * (1 - tx) + v(1, 1, 1) * tx;
    const double c0 = c00 * (1 - ty) + c10 * ty;
    const double c1 = c01 * (1 - ty) + c11 * ty;
    return float(c0 * (1 - tz) + c1 * tz);
}

Volume3D shift_volume(const Volume3D& vol, double delta_mm, Axis axis, float fill) {
    vol.validate("shift_volume input");
    const int a = int(axis);
    const double half_extent = 0.5 * vol.dims[a] * vol.spacing_mm[a];
    if (std::abs(delta_mm) > half_extent)
        throw ConfigError("shift_volume: |delta| " + std::to_string(std::abs(delta_mm)) +
                          " mm exceeds half extent along " + axis_name(axis));
    Volume3D out = vol;
    const double didx = delta_mm / vol.spacing_mm[a];  // shift in index units
    double off[3] = {0.0, 0.0, 0.0};
    off[a] = didx;
    for (int z = 0; z < vol.dims[2]; ++z)
        for (int y = 0; y < vol.dims[1]; ++y)
            for (int x = 0; x < vol.dims[0]; ++x)
                out.at(x, y, z) =
                    trilinear_sample(vol, x - off[0], y - off[1], z - off[2], fill);
    return out;
}

Volume3D crop_volume(const Volume3D& vol, const BoxIndices& box) {
    vol.validate("crop_volume input");
    if (!vol.full_box().contains(box))
        throw ShapeError("crop_volume: box exceeds volume bounds");
    Volume3D out;
    out.spacing_mm = vol.spacing_mm;
    out.unit = vol.unit;
    for (int a = 0; a < 3; ++a) {
        out.dims[a] = box.extent(a);
        out.origin_mm[a] = vol.origin_mm[a] + box.lo[a] * vol.spacing_mm[a];
    }
    out.data.resize(std::size_t(out.voxel_count()));
    for (int z = 0; z < out.dims[2]; ++z)
        for (int y = 0; y < out.dims[1]; ++y)
            for (int x = 0; x < out.dims[0]; ++x)
                out.at(x, y, z) = vol.at(box.lo[0] + x, box.lo[1] + y, box.lo[2] + z);
    return out;
}

Volume3D downsample_volume_blockmean(const Volume3D& vol, std::array<int, 3> f) {
    vol.validate("downsample input");
    for (int a = 0; a < 3; ++a) {
        if (f[a] <= 0)
            throw ConfigError("downsample: non-positive factor along " + axis_name(Axis(a)));
        if (vol.dims[a] % f[a] != 0)
            throw ShapeError("downsample: dim " + std::to_string(vol.dims[a]) +
                             " not divisible by factor " + std::to_string(f[a]) + " along " +
                             axis_name(Axis(a)));
    }
    Volume3D out;
    out.unit = vol.unit;
    for (int a = 0; a < 3; ++a) {
        out.dims[a] = vol.dims[a] / f[a];
        out.spacing_mm[a] = vol.spacing_mm[a] * f[a];
        // Coarse voxel center = mean of the fine voxel centers it covers.
        out.origin_mm[a] = vol.origin_mm[a] + 0.5 * (f[a] - 1) * vol.spacing_mm[a];
    }
    out.data.resize(std::size_t(out.voxel_count()));
    const double inv = 1.0 / (double(f[0]) * f[1] * f[2]);
    for (int z = 0; z < out.dims[2]; ++z)
        for (int y = 0; y < out.dims[1]; ++y)
            for (int x = 0; x < out.dims[0]; ++x) {
                double acc = 0.0;
                for (int dz = 0; dz < f[2]; ++dz)
                    for (int dy = 0; dy < f[1]; ++dy)
                        for (int dx = 0; dx < f[0]; ++dx)
                            acc += vol.at(x * f[0] + dx, y * f[1] + dy, z * f[2] + dz);
                out.at(x, y, z) = float(acc * inv);
            }
    return out;
}

Volume3D upsample_volume_trilinear(const Volume3D& vol, std::array<int, 3> f) {
    vol.validate("upsample input");
    for (int a = 0; a < 3; ++a)
        if (f[a] <= 0)
            throw ConfigError("upsample: non-positive factor along " + axis_name(Axis(a)));
    Volume3D out;
    out.unit = vol.unit;
    for (int a = 0; a < 3; ++a) {
        out.dims[a] = vol.dims[a] * f[a];
        out.spacing_mm[a] = vol.spacing_mm[a] / f[a];
        out.origin_mm[a] = vol.origin_mm[a] - 0.5 * (f[a] - 1) * out.spacing_mm[a];
    }
    out.data.resize(std::size_t(out.voxel_count()));
    for (int z = 0; z < out.dims[2]; ++z) {
        const double fz = std::clamp((z - 0.5 * (f[2] - 1)) / f[2], 0.0, vol.dims[2] - 1.0);
        for (int y = 0; y < out.dims[1]; ++y) {
            const double fy = std::clamp((y - 0.5 * (f[1] - 1)) / f[1], 0.0, vol.dims[1] - 1.0);
            for (int x = 0; x < out.dims[0]; ++x) {
                const double fx =
                    std::clamp((x - 0.5 * (f[0] - 1)) / f[0], 0.0, vol.dims[0] - 1.0);
                out.at(x, y, z) = trilinear_sample(vol, fx, fy, fz, 0.0f);
            }
        }
    }
    return out;
}

void write_volume(const Volume3D& vol, const std::string& stem) {
    vol.validate("write_volume");
    json hdr;
    hdr["dims"] = vol.dims;
    hdr["spacing_mm"] = vol.spacing_mm;
    hdr["origin_mm"] = vol.origin_mm;
    hdr["dtype"] = "f32le";
    hdr["unit"] = vol.unit;
    {
        std::ofstream js(stem + ".json");
        if (!js) throw IoError("write_volume: cannot open " + stem + ".json");
        js << hdr.dump(2) << "\n";
        if (!js) throw IoError("write_volume: failed writing " + stem + ".json");
    }
    std::ofstream raw(stem + ".raw", std::ios::binary);
    if (!raw) throw IoError("write_volume: cannot open " + stem + ".raw");
    raw.write(reinterpret_cast<const char*>(vol.data.data()),
              std::streamsize(vol.data.size() * sizeof(float)));
    if (!raw) throw IoError("write_volume: failed writing " + stem + ".raw");
}

Volume3D read_volume(const std::string& stem) {
    std::ifstream js(stem + ".json");
    if (!js) throw IoError("read_volume: cannot open " + stem + ".json");
    json hdr;
    try {
        js >> hdr;
    } catch (const json::exception& e) {
        throw IoError("read_volume: bad header " + stem + ".json: " + e.what());
    }
    Volume3D vol;
    try {
        hdr.at("dims").get_to(vol.dims);
        hdr.at("spacing_mm").get_to(vol.spacing_mm);
        hdr.at("origin_mm").get_to(vol.origin_mm);
        vol.unit = hdr.at("unit").get<std::string>();
        if (hdr.at("dtype").get<std::string>() != "f32le")
            throw IoError("read_volume: unsupported dtype in " + stem + ".json");
    } catch (const json::exception& e) {
        throw IoError("read_volume: missing header field in " + stem + ".json: " + e.what());
    }
    vol.validate("read_volume header");
    std::ifstream raw(stem + ".raw", std::ios::binary | std::ios::ate);
    if (!raw) throw IoError("read_volume: cannot open " + stem + ".raw");
    const auto bytes = std::int64_t(raw.tellg());
    if (bytes != vol.voxel_count() * std::int64_t(sizeof(float)))
        throw IoError("read_volume: " + stem + ".raw has " + std::to_string(bytes) +
                      " bytes, expected " + std::to_string(vol.voxel_count() * 4));
    raw.seekg(0);
    vol.data.resize(std::size_t(vol.voxel_count()));
    raw.read(reinterpret_cast<char*>(vol.data.data()), bytes);
    if (!raw) throw IoError("read_volume: failed reading " + stem + ".raw");
    return vol;
}

}  // namespace kv2ct
