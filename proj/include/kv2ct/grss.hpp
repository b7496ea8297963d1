// grss.hpp - geometry-reserved shifting and sampling augmentation.
//
// One CT/kV pair expands into many training pairs: the CT is shifted along
// S-I by delta, the kV images by 1.5*delta (the SDD/SAD magnification), and
// both are block-mean downsampled. With phase enumeration on, each shift is
// emitted at every integer phase offset of the kV downsampling grid, giving
// fu*fv variants per shift.
#pragma once

#include <array>
#include <string>
#include <vector>

#include "kv2ct/common.hpp"
#include "kv2ct/geometry.hpp"
#include "kv2ct/volume.hpp"

namespace kv2ct {

struct GrssConfig {
    double shift_range_mm = 5.0;
    double shift_step_mm = 0.1;
    double kv_shift_factor = 1.5;  // must equal sdd/sad of the bound geometry
    std::array<int, 3> ct_downsample{1, 1, 1};
    std::array<int, 2> kv_downsample{1, 1};  // (fu, fv)
    bool phase_enumeration = true;
    std::array<int, 2> kv_crop_origin{0, 0};  // (u0, v0) detector pixels
    std::array<int, 2> kv_crop_size{0, 0};    // 0 = full detector
    std::string model_tag = "primary";

    void validate(const GeometrySpec& geom) const;
    // Symmetric schedule {-n..n}*step with n = range/step (must divide evenly).
    std::vector<double> shift_schedule() const;
    // Phase grid offset that centers the enumerated phases on the crop origin.
    static int phase_center(int f) { return f >= 2 ? f / 2 - 1 : 0; }
};

struct TrainingPair {
    Image2D kv_ap, kv_lat;  // cropped + downsampled views (two model channels)
    Volume3D ct;            // cropped + downsampled target
    double shift_mm = 0.0;
    std::array<int, 2> phase{0, 0};
    std::string model_tag;
};

// All phase variants for a single shift. `region` is the CT crop box in
// full-volume voxel indices.
std::vector<TrainingPair> augment_one_shift(const Volume3D& ct, const KvImagePair& kv,
                                            const GrssConfig& cfg, const BoxIndices& region,
                                            double shift_mm);

// Full schedule, shift-major phase-minor order.
std::vector<TrainingPair> augment(const Volume3D& ct, const KvImagePair& kv,
                                  const GrssConfig& cfg, const BoxIndices& region);

// The inference-time input: crop at the configured origin (single center
// phase), downsample, no shift.
TrainingPair make_model_input(const KvImagePair& kv, const GrssConfig& cfg);

// Persist pairs under dir/<tag>_NNN.{kv,ct}.* plus a pairs.json manifest
// entry list; returns manifest path. Loading reads the manifest back.
std::string write_training_pairs(const std::vector<TrainingPair>& pairs, const std::string& dir,
                                 const std::string& manifest_name = "pairs.json");
std::vector<TrainingPair> read_training_pairs(const std::string& manifest_path);

}  // namespace kv2ct
