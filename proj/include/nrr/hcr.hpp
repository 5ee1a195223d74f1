#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "nrr/volume.hpp"

namespace nrr {

inline constexpr std::size_t kShapeFeatureCount = 14;
inline constexpr std::size_t kFirstOrderFeatureCount = 18;
inline constexpr std::size_t kHcrCount = kShapeFeatureCount + kFirstOrderFeatureCount;

/// Column names of an HcrVector, shape group first.
extern const std::array<const char*, kHcrCount> kHcrNames;

struct ShapeFeatures {
    double mesh_volume = 0;
    double voxel_volume = 0;
    double surface_area = 0;
    double surface_to_volume = 0;
    double sphericity = 0;
    double max_diam_3d = 0;
    double max_diam_axial = 0;     // pairs sharing z
    double max_diam_coronal = 0;   // pairs sharing y
    double max_diam_sagittal = 0;  // pairs sharing x
    double major_axis = 0;
    double minor_axis = 0;
    double least_axis = 0;
    double elongation = 0;
    double flatness = 0;

    /// Set when the mask is too small for the axis-based features
    /// (single voxel or collinear voxels); those features are then 0.
    bool degenerate = false;
};

struct FirstOrderFeatures {
    double energy = 0;
    double total_energy = 0;
    double entropy = 0;  // bits
    double minimum = 0;
    double p10 = 0;
    double p90 = 0;
    double maximum = 0;
    double mean = 0;
    double median = 0;
    double interquartile_range = 0;
    double range = 0;
    double mad = 0;
    double rmad = 0;
    double rms = 0;
    double skewness = 0;
    double kurtosis = 0;  // not excess-corrected
    double variance = 0;
    double uniformity = 0;

    /// Set when the in-mask variance is zero; skewness and kurtosis are 0.
    bool degenerate = false;
};

using HcrVector = std::array<double, kHcrCount>;

inline constexpr double kDefaultBinWidth = 0.1;

ShapeFeatures compute_shape_features(const Mask& mask);
FirstOrderFeatures compute_first_order(const MaskedVolume& mv, double bin_width = kDefaultBinWidth);
HcrVector extract_hcr(const MaskedVolume& mv, double bin_width = kDefaultBinWidth);

HcrVector to_vector(const ShapeFeatures& s, const FirstOrderFeatures& f);

/// Column-wise z-score fitted on a training cohort.
struct HcrScaler {
    HcrVector mean{};
    HcrVector std{};

    HcrVector apply(const HcrVector& h) const;
};

/// Fits the scaler. A column with zero spread is an error naming the
/// feature unless `allow_constant` is set, in which case that column keeps
/// std = 1 so it scales to 0 everywhere.
HcrScaler fit_scaler(std::span<const HcrVector> hcrs, bool allow_constant = false);

/// Names of the columns that `fit_scaler(.., true)` treated as constant.
std::vector<std::string> constant_columns(const HcrScaler& s, std::span<const HcrVector> hcrs);

}  // namespace nrr
