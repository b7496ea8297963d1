#include "kv2ct/compose.hpp"

#include <algorithm>
#include <string>

namespace kv2ct {

void CompositionSpec::validate(const std::array<int, 3>& full_dims) const {
    if (head_box.empty()) throw ConfigError("compose: head_box is empty");
    for (int a = 0; a < 3; ++a) {
        if (head_box.lo[a] < 0 || head_box.hi[a] >= full_dims[a])
            throw ConfigError("compose: head_box exceeds volume bounds on axis " +
                              axis_name(Axis(a)));
        if (feather_voxels < 0) throw ConfigError("compose: feather_voxels must be >= 0");
        if (2 * feather_voxels >= head_box.extent(a))
            throw ConfigError("compose: feather_voxels " + std::to_string(feather_voxels) +
                              " too large for head_box extent " +
                              std::to_string(head_box.extent(a)) + " on axis " +
                              axis_name(Axis(a)));
    }
}

double overlay_weight(int dist_voxels, int feather_voxels) {
    if (dist_voxels < 0) return 0.0;
    if (feather_voxels <= 0) return 1.0;
    return std::min(1.0, double(dist_voxels + 1) / double(feather_voxels + 1));
}

namespace {

std::array<int, 3> integer_factors(const std::array<int, 3>& coarse, const std::array<int, 3>& fine,
                                   const std::string& what) {
    std::array<int, 3> f{};
    for (int a = 0; a < 3; ++a) {
        if (coarse[a] <= 0 || fine[a] % coarse[a] != 0)
            throw ShapeError(what + ": coarse extent " + std::to_string(coarse[a]) +
                             " does not divide " + std::to_string(fine[a]) + " on axis " +
                             axis_name(Axis(a)));
        f[a] = fine[a] / coarse[a];
    }
    return f;
}

}  // namespace

Volume3D compose(const Volume3D& primary_out, const Volume3D& secondary_out,
                 const CompositionSpec& spec, const std::array<int, 3>& full_dims) {
    primary_out.validate("compose primary input");
    secondary_out.validate("compose secondary input");
    spec.validate(full_dims);
    if (primary_out.unit != secondary_out.unit)
        throw ShapeError("compose: unit mismatch (" + primary_out.unit + " vs " +
                         secondary_out.unit + ")");

    Volume3D out = upsample_volume_trilinear(
        primary_out, integer_factors(primary_out.dims, full_dims, "compose primary"));
    const std::array<int, 3> box_ext{spec.head_box.extent(0), spec.head_box.extent(1),
                                     spec.head_box.extent(2)};
    Volume3D head = upsample_volume_trilinear(
        secondary_out, integer_factors(secondary_out.dims, box_ext, "compose secondary"));

    const auto& lo = spec.head_box.lo;
    const auto& hi = spec.head_box.hi;
    for (int z = lo[2]; z <= hi[2]; ++z)
        for (int y = lo[1]; y <= hi[1]; ++y)
            for (int x = lo[0]; x <= hi[0]; ++x) {
                const int d = std::min({x - lo[0], hi[0] - x, y - lo[1], hi[1] - y, z - lo[2],
                                        hi[2] - z});
                const double w = overlay_weight(d, spec.feather_voxels);
                const float s = head.at(x - lo[0], y - lo[1], z - lo[2]);
                out.at(x, y, z) = float(w * s + (1.0 - w) * out.at(x, y, z));
            }
    return out;
}

}  // namespace kv2ct
