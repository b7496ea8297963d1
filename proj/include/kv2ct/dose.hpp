// dose.hpp - analytic broad-beam dose field computed from a CT volume.
//
// Stand-in for an external treatment-planning dose grid: a single anterior
// beam with exponential depth falloff along water-equivalent depth and a
// Gaussian lateral profile, normalized to the prescription at the target.
// Exists to exercise the dose-domain metrics (gamma, DVH); it is not a dose
// engine.
#pragma once

#include <array>

#include "kv2ct/volume.hpp"

namespace kv2ct {

struct DoseFieldSpec {
    double prescription_gy = 60.0;
    double lateral_sigma_mm = 18.0;
    double mu_water_per_mm = 0.02;          // depth-falloff scale
    std::array<double, 3> target_mm{0, 0, 0};  // beam axis / normalization point

    void validate() const;
};

// Beam enters the -y (anterior) face and travels along +y. For each column
// the water-equivalent depth accumulates mu(HU)/mu_water * dy; dose =
// exp(-mu_water * wed) * gaussian(lateral distance to the target axis),
// scaled so the voxel nearest target_mm reads prescription_gy. Unit "Gy".
Volume3D synthetic_dose(const Volume3D& ct, const DoseFieldSpec& spec);

}  // namespace kv2ct
