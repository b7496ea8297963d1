// png_io.hpp - optional PNG export of axial slice panels for visual review.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kv2ct/volume.hpp"

namespace kv2ct {

// False when the build has no PNG library; writers then throw IoError.
bool png_supported();

void write_png_gray8(const std::string& path, int width, int height,
                     const std::vector<std::uint8_t>& pixels);

// Axial slice triptych (reference | synthesized | |difference|) at slice z.
// Intensities are windowed to [center - width/2, center + width/2]; the
// difference panel maps [0, width/8] to the full gray range.
void write_slice_triptych(const Volume3D& ref, const Volume3D& syn, int z,
                          const std::string& path, double window_center = 0.0,
                          double window_width = 2000.0);

}  // namespace kv2ct
