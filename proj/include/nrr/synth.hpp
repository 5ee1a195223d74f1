#pragma once

#include <array>
#include <cstdint>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "nrr/bundle_io.hpp"
#include "nrr/volume.hpp"

namespace nrr {

enum class FatMode {
    Normal,  // lower mean and stronger speckle
    Hard,    // same intensity histogram as an unflagged twin, re-arranged spatially
};

/// How each marker flag alters a phantom.
struct MarkerEffects {
    double lobulation_amp = 0.25;   // shape: relative boundary modulation
    double atrophy_factor = 0.7;    // atrophy: volume multiplier
    double fat_mean_shift = 0.3;    // fat (normal): in-mask mean decrease
    double fat_speckle_gain = 1.5;  // fat (normal): speckle std multiplier
    FatMode fat_mode = FatMode::Normal;
    double hard_mean_shift = 0.03;  // fat (hard): small visible mean decrease
    double hard_corr = 2.5;         // fat (hard): speckle correlation length (voxels)
    double hard_ramp = 1.5;         // fat (hard): ramp weight along the long axis
    double senility_factor = 0.85;  // senility: volume multiplier
    double senility_speckle_gain = 1.3;
};

struct PhantomParams {
    Dims grid{32, 24, 12};
    Spacing spacing{1.0, 1.0, 2.0};
    std::array<double, 3> semi_axes{8.0, 5.0, 5.0};  // mm, before volume scaling
    double lobulation_freq = 4;                      // lobes around the axial plane
    double lobulation_phase = 0;
    double mean = 1.0;
    double speckle_std = 0.15;
    double speckle_corr = 1.0;  // voxels
    double background_mean = 0.5;
    double background_std = 0.1;
    double rotation_deg = 0;                  // about z
    std::array<double, 3> offset_mm{0, 0, 0};  // centre shift from the grid centre
    // Gaussian intensity inclusion inside the organ (unrelated to any marker)
    std::array<double, 3> inclusion_pos{0, 0, 0};  // in units of the semi-axes
    double inclusion_radius_mm = 2.0;
    double inclusion_contrast = 0.0;
    std::array<bool, kMarkerCount> flags{};    // shape, atrophy, fat, senility
    MarkerEffects effects;
    std::uint64_t noise_seed = 0;

    void validate() const;
};

struct Phantom {
    MaskedVolume image;
    MarkerLabels labels;
};

/// Deterministic in its parameters. Throws if the mask comes out empty.
Phantom phantom(const PhantomParams& p);

struct CohortSpec {
    std::size_t n_subjects = 64;
    Dims grid{32, 24, 12};
    Spacing spacing{1.0, 1.0, 2.0};
    std::array<double, kMarkerCount> prevalence{0.5, 0.5, 0.5, 0.5};
    double train_fraction = 0.7;
    std::uint64_t seed = 0;
    std::array<double, 3> semi_axes{8.0, 5.0, 5.0};
    double axis_jitter = 0.1;       // relative, uniform
    double rotation_max_deg = 15;   // uniform in [-r, r]
    double offset_max_mm = 2;       // uniform per axis
    double mean_jitter = 0.05;      // uniform additive
    double inclusion_contrast = 0.5;  // uniform in [-c, c]; 0 disables
    std::array<double, 2> inclusion_radius_mm{1.5, 3.5};
    MarkerEffects effects;

    void validate() const;
};

void to_json(nlohmann::json& j, const CohortSpec& s);
/// Strict: unknown keys are rejected.
void from_json(const nlohmann::json& j, CohortSpec& s);

/// Seed of subject `index`, derived from the master seed.
std::uint64_t subject_seed(std::uint64_t master, std::size_t index);

/// Parameters of subject `index`: flags, geometry and pose drawn from its seed.
PhantomParams subject_params(const CohortSpec& spec, std::size_t index);

/// Writes one volume/mask bundle pair per subject plus manifest.json and
/// cohort_spec.json into `out_dir`.
CohortManifest generate_cohort(const CohortSpec& spec, const std::filesystem::path& out_dir);

}  // namespace nrr
