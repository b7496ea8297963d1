// phantom.hpp - parametric head-and-neck digital phantom with structure masks.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "kv2ct/common.hpp"
#include "kv2ct/volume.hpp"

namespace kv2ct {

// Structure names emitted by generate_phantom (always all present; masks may
// be empty when the corresponding feature is disabled).
inline const std::vector<std::string>& structure_names() {
    static const std::vector<std::string> names = {
        "BODY", "HEAD", "CTV", "BRAINSTEM", "PAROTID", "ORAL_CAVITY", "MANDIBLE"};
    return names;
}

struct StructureMaskSet {
    std::array<int, 3> dims{0, 0, 0};
    std::map<std::string, std::vector<std::uint8_t>> masks;  // 0/1 per voxel, x-fastest

    const std::vector<std::uint8_t>& mask(const std::string& name) const;
    std::int64_t voxel_count(const std::string& name) const;
};

struct PhantomSpec {
    std::uint64_t seed = 1;
    std::array<int, 3> dims{64, 64, 48};
    std::array<double, 3> spacing_mm{3.0, 3.0, 3.0};

    // Feature toggles. `body` covers the soft-tissue anatomy (torso, head,
    // brain, parotid and oral-cavity surrogates); the rest are add-ons.
    bool with_body = true;
    bool with_skull = true;
    bool with_spine = true;
    bool with_mandible = true;
    bool with_brainstem = true;
    bool with_cavities = true;  // nasal/sinus air pockets
    bool with_helmet = true;    // bolus-helmet annulus, HU 150
    bool with_tumor = true;

    std::array<double, 3> head_center_mm{0.0, 0.0, 20.0};
    std::array<double, 3> head_radii_mm{27.0, 30.0, 30.0};
    std::array<double, 3> tumor_center_mm{8.0, 6.0, 26.0};
    std::array<double, 3> tumor_radii_mm{8.0, 8.0, 8.0};
    double tumor_hu = 80.0;
    double helmet_thickness_mm = 3.0;
    double jitter_voxels = 3.0;  // per-seed rigid offset of all features

    // Volume is centered on the isocenter (world origin).
    std::array<double, 3> origin_mm() const {
        return {-0.5 * (dims[0] - 1) * spacing_mm[0], -0.5 * (dims[1] - 1) * spacing_mm[1],
                -0.5 * (dims[2] - 1) * spacing_mm[2]};
    }
    void validate() const;
};

struct PhantomResult {
    Volume3D ct;
    StructureMaskSet masks;
};

// Deterministic per seed: identical spec+seed give bitwise-identical output.
PhantomResult generate_phantom(const PhantomSpec& spec);

// Tight bounding box of the HEAD mask; throws ConfigError when empty.
BoxIndices head_bbox(const StructureMaskSet& masks);
BoxIndices mask_bbox(const StructureMaskSet& masks, const std::string& name);

// `<stem>.masks.json`: run-length encoding per structure in x-fastest scan
// order (alternating zero-run/one-run lengths, starting with zeros).
void write_masks(const StructureMaskSet& masks, const std::string& stem);
StructureMaskSet read_masks(const std::string& stem);

}  // namespace kv2ct
