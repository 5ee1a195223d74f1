#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nrr/error.hpp"

namespace nrr {

using Dims = std::array<std::size_t, 3>;
using Spacing = std::array<double, 3>;

std::string to_string(const Dims& d);

/// Dense 3D grid with physical spacing. Voxels are stored x-fastest:
/// linear index = x + nx * (y + ny * z).
template <typename T>
class Grid3 {
public:
    using value_type = T;

    Grid3() = default;
    Grid3(Dims dims, Spacing spacing, T fill = T{});
    Grid3(Dims dims, Spacing spacing, std::vector<T> voxels);

    const Dims& dims() const noexcept { return dims_; }
    const Spacing& spacing() const noexcept { return spacing_; }
    std::size_t size() const noexcept { return voxels_.size(); }

    std::size_t index(std::size_t x, std::size_t y, std::size_t z) const noexcept
    {
        return x + dims_[0] * (y + dims_[1] * z);
    }

    T& operator()(std::size_t x, std::size_t y, std::size_t z) noexcept { return voxels_[index(x, y, z)]; }
    const T& operator()(std::size_t x, std::size_t y, std::size_t z) const noexcept
    {
        return voxels_[index(x, y, z)];
    }

    T& operator[](std::size_t i) noexcept { return voxels_[i]; }
    const T& operator[](std::size_t i) const noexcept { return voxels_[i]; }

    std::span<T> voxels() noexcept { return voxels_; }
    std::span<const T> voxels() const noexcept { return voxels_; }

    bool operator==(const Grid3&) const = default;

private:
    Dims dims_{0, 0, 0};
    Spacing spacing_{1.0, 1.0, 1.0};
    std::vector<T> voxels_;
};

using Volume = Grid3<float>;
using Mask = Grid3<std::uint8_t>;

/// The masked image the whole pipeline consumes: intensities plus organ mask
/// on the same grid.
struct MaskedVolume {
    Volume volume;
    Mask mask;

    MaskedVolume() = default;
    MaskedVolume(Volume v, Mask m);

    std::size_t foreground_count() const noexcept;
    bool operator==(const MaskedVolume&) const = default;
};

/// Percentile cut values and the mean/std of the clipped in-mask pool.
struct IntensityStats {
    double p_low = 0.0;
    double p_high = 1.0;
    double mean = 0.0;
    double std = 1.0;

    void validate() const;
};

enum class Interpolation { Trilinear, Nearest };

/// Percentile with linear interpolation between order statistics:
/// rank = pct/100 * (n - 1). `sorted` must be ascending and nonempty.
double percentile_sorted(std::span<const double> sorted, double pct);

/// Resamples onto a grid with `target` spacing. Voxel i of the output sits at
/// physical position i * target (both grids share the origin at voxel 0);
/// positions past the last source voxel clamp to the edge. Identical spacing
/// returns an exact copy.
Volume resample(const Volume& v, const Spacing& target, Interpolation mode = Interpolation::Trilinear);
Mask resample(const Mask& m, const Spacing& target);

/// Translates the object so the mask centroid lands on voxel grid/2 (rounded
/// down). If the centroid placement would push foreground off the grid the
/// shift is clamped so the bounding box stays inside.
MaskedVolume center_on_grid(const MaskedVolume& mv, const Dims& grid, float fill = 0.0f);

IntensityStats fit_intensity_stats(std::span<const MaskedVolume> cohort, double p_low_pct = 0.5,
                                   double p_high_pct = 99.5);

/// Clamps in-mask voxels to [p_low, p_high], standardizes them and zeroes
/// everything outside the mask.
MaskedVolume clip_and_standardize(const MaskedVolume& mv, const IntensityStats& stats);

/// Rotates about the z axis through the grid centre (axial-plane rotation).
/// Intensities use trilinear interpolation, the mask nearest neighbour; samples
/// from outside the source grid take 0. The volume is re-masked afterwards.
MaskedVolume rotate_axial(const MaskedVolume& mv, double degrees);

/// Integer voxel translation with zero fill: out(p + shift) = in(p).
MaskedVolume translate(const MaskedVolume& mv, const std::array<long long, 3>& shift);

void validate(const Volume& v);
void validate(const Mask& m);

}  // namespace nrr
