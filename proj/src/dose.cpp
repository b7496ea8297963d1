#include "kv2ct/dose.hpp"

#include <algorithm>
#include <cmath>

#include "kv2ct/geometry.hpp"  // mu_from_hu

namespace kv2ct {

void DoseFieldSpec::validate() const {
    if (!(prescription_gy > 0.0)) throw ConfigError("dose: prescription must be positive");
    if (!(lateral_sigma_mm > 0.0)) throw ConfigError("dose: lateral sigma must be positive");
    if (!(mu_water_per_mm > 0.0)) throw ConfigError("dose: mu_water must be positive");
}

Volume3D synthetic_dose(const Volume3D& ct, const DoseFieldSpec& spec) {
    spec.validate();
    ct.validate("dose: ct");
    Volume3D dose(ct.dims, ct.spacing_mm, ct.origin_mm, "Gy", 0.0f);

    const int nx = ct.dims[0], ny = ct.dims[1], nz = ct.dims[2];
    const double dy = ct.spacing_mm[1];
    const double inv2s2 = 1.0 / (2.0 * spec.lateral_sigma_mm * spec.lateral_sigma_mm);

    for (int z = 0; z < nz; ++z) {
        const double wz = ct.origin_mm[2] + z * ct.spacing_mm[2];
        const double dz2 = (wz - spec.target_mm[2]) * (wz - spec.target_mm[2]);
        for (int x = 0; x < nx; ++x) {
            const double wx = ct.origin_mm[0] + x * ct.spacing_mm[0];
            const double dx2 = (wx - spec.target_mm[0]) * (wx - spec.target_mm[0]);
            const double lateral = std::exp(-(dx2 + dz2) * inv2s2);
            // march the anterior->posterior column accumulating WED; each
            // voxel sees half its own thickness (midpoint convention)
            double wed = 0.0;
            for (int y = 0; y < ny; ++y) {
                const double mu = mu_from_hu(ct.at(x, y, z), spec.mu_water_per_mm);
                const double rel = mu / spec.mu_water_per_mm;  // water-equivalent ratio
                const double mid = wed + 0.5 * rel * dy;
                wed += rel * dy;
                dose.at(x, y, z) = float(lateral * std::exp(-spec.mu_water_per_mm * mid));
            }
        }
    }

    // normalize at the voxel nearest the target
    auto nearest = [&](int a) {
        const double f = (spec.target_mm[a] - ct.origin_mm[a]) / ct.spacing_mm[a];
        return std::clamp(int(std::lround(f)), 0, ct.dims[a] - 1);
    };
    const float ref = dose.at(nearest(0), nearest(1), nearest(2));
    if (!(ref > 0.0f))
        throw NumericError("dose: normalization point received no dose");
    const float scale = float(spec.prescription_gy) / ref;
    for (auto& v : dose.data) v *= scale;
    return dose;
}

}  // namespace kv2ct
