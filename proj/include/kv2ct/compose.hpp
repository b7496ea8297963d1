// compose.hpp - assembles the final synthetic CT: whole-region model output
// upsampled to native resolution, with the head-region model output overlaid
// inside its box, optionally cross-faded at the faces.
#pragma once

#include <array>

#include "kv2ct/volume.hpp"

namespace kv2ct {

struct CompositionSpec {
    BoxIndices head_box;        // in output-volume voxel indices
    int feather_voxels = 2;     // 0 = hard replacement at the box faces

    void validate(const std::array<int, 3>& full_dims) const;
};

// Overlay weight of the secondary volume at inward distance d (in voxels)
// from the nearest head-box face; ramps 1/(f+1), 2/(f+1), ..., 1.
double overlay_weight(int dist_voxels, int feather_voxels);

// primary_out scaled up by integer factors to full_dims; secondary_out scaled
// up to the head_box extent and blended in. Output grid metadata comes from
// the upsampled primary.
Volume3D compose(const Volume3D& primary_out, const Volume3D& secondary_out,
                 const CompositionSpec& spec, const std::array<int, 3>& full_dims);

}  // namespace kv2ct
