#pragma once

#include <array>
#include <vector>

#include "nrr/volume.hpp"

namespace nrr {

struct Triangle {
    std::array<double, 3> a, b, c;  // physical coordinates (mm), outward orientation
};

/// Triangulates the 0.5 iso-surface of a binary mask with marching cubes.
/// The mask is implicitly padded with background so the surface is closed.
/// Ambiguous faces separate diagonally touching foreground corners, which
/// keeps the triangulation consistent between neighbouring cubes.
std::vector<Triangle> marching_cubes(const Mask& mask);

struct MeshMeasures {
    double volume = 0.0;        // mm^3, signed-tetrahedron sum
    double surface_area = 0.0;  // mm^2
};

MeshMeasures mesh_measures(const Mask& mask);

}  // namespace nrr
