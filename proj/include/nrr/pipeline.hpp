#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "nrr/bundle_io.hpp"
#include "nrr/classify.hpp"
#include "nrr/hcr.hpp"
#include "nrr/synth.hpp"
#include "nrr/vae.hpp"
#include "nrr/volume.hpp"

namespace nrr {

struct PreprocessConfig {
    Spacing target_spacing{1.0, 1.0, 2.0};
    double p_low = 0.5;
    double p_high = 99.5;
    float fill = 0.0f;
};

struct HcrConfig {
    double bin_width = kDefaultBinWidth;
    bool scale = true;
};

struct SweepConfig {
    std::vector<double> kappas{0.01, 0.1, 1.0, 10.0};
    std::vector<std::size_t> latents{32, 64, 256, 512, 1024, 2048};
};

/// Everything a pipeline run depends on. The top-level seed, when set,
/// overrides the cohort, VAE and classifier seeds.
struct RunConfig {
    CohortSpec cohort;
    PreprocessConfig preprocess;
    HcrConfig hcr;
    VaeConfig vae;
    ClassifierSettings classifier;
    SweepConfig sweep;
    std::optional<std::uint64_t> seed;
    std::size_t threads = 1;

    void resolve();
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_run_config(const std::filesystem::path& path);

// ---- in-memory stages ---------------------------------------------------------

/// Subjects on the model grid after resampling, centring and standardisation.
struct SubjectSet {
    std::vector<std::string> ids;
    std::vector<MarkerLabels> labels;
    std::vector<Split> split;
    std::vector<MaskedVolume> images;

    std::vector<std::size_t> indices(Split s) const;
    std::vector<MaskedVolume> images_of(Split s) const;
};

/// Resamples and centres every subject, fits intensity statistics on the
/// training split and standardises all subjects with them.
SubjectSet preprocess_cohort(const CohortManifest& m, const PreprocessConfig& cfg, const Dims& grid,
                             IntensityStats* stats_out = nullptr, std::size_t threads = 1);

struct HcrTable {
    std::vector<HcrVector> raw;
    std::vector<HcrVector> scaled;  // equal to raw when scaling is off
    HcrScaler scaler;
    std::vector<std::string> constant;  // columns without spread on the training split
};

HcrTable hcr_table(const SubjectSet& s, const HcrConfig& cfg, std::size_t threads = 1);

template <typename T>
std::vector<T> select(const std::vector<T>& v, const std::vector<std::size_t>& idx)
{
    std::vector<T> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(v.at(i));
    return out;
}

/// Trains on the training split of `s`.
TrainResult train_vae(const SubjectSet& s, const HcrTable& h, const VaeConfig& cfg, const TrainHooks& hooks = {});

Eigen::MatrixXd hcr_matrix(const std::vector<HcrVector>& rows);

/// Mean |Pearson r| over all (HCR column, DLR column) pairs; columns without
/// spread are skipped. A DLR matrix with no varying column gives 0.
double mean_abs_correlation(const Eigen::MatrixXd& h, const Eigen::MatrixXd& d);

/// Named feature block, rows aligned to SubjectSet order.
struct FeatureSet {
    std::string name;
    std::vector<std::string> columns;
    std::vector<bool> is_dlr;
    Eigen::MatrixXd values;
};

FeatureSet hcr_features(const HcrTable& h);
FeatureSet dlr_features(const Eigen::MatrixXd& d, const std::string& name);
FeatureSet combine(const FeatureSet& a, const FeatureSet& b, const std::string& name);

/// The comparison grid: H32, D<L>, D<L>-MI, HD<32+L>, HD<32+L>-MI.
std::vector<FeatureSet> standard_feature_sets(const HcrTable& h, const Eigen::MatrixXd& dlr_plain,
                                              const Eigen::MatrixXd& dlr_mi);

struct MarkerResult {
    AucReport report;
    EnsembleModel model;
};

/// Fits one ensemble per marker on the training split and scores the test split.
MarkerResult evaluate_feature_set(const SubjectSet& s, const FeatureSet& f, std::size_t marker,
                                  const ClassifierSettings& cfg);

// ---- file formats ------------------------------------------------------------------

void save_matrix_csv(const std::filesystem::path& path, const std::vector<std::string>& ids,
                     const std::vector<std::string>& columns, const Eigen::MatrixXd& values);
FeatureMatrix load_matrix_csv(const std::filesystem::path& path);

void save_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& trace);

nlohmann::json ensemble_to_json(const EnsembleModel& e, const FeatureSet& f);
EnsembleModel ensemble_from_json(const nlohmann::json& j, std::vector<std::string>* columns = nullptr);

ReportTable load_report_csv(const std::filesystem::path& path, const std::string& baseline);

// ---- on-disk stages -----------------------------------------------------------------
// Each stage reads upstream outputs under `root` and writes into root/<stage>
// together with the resolved config and a log.

void stage_gen_cohort(const RunConfig& cfg, const std::filesystem::path& root);
void stage_preprocess(const RunConfig& cfg, const std::filesystem::path& root);
void stage_extract_hcr(const RunConfig& cfg, const std::filesystem::path& root);
void stage_train_vae(const RunConfig& cfg, const std::filesystem::path& root);
void stage_extract_dlr(const RunConfig& cfg, const std::filesystem::path& root);
void stage_train_classifier(const RunConfig& cfg, const std::filesystem::path& root);
void stage_evaluate(const RunConfig& cfg, const std::filesystem::path& root);

enum class SweepKind { Kappa, Latent };
void stage_sweep(const RunConfig& cfg, const std::filesystem::path& root, SweepKind kind);
void stage_report(const RunConfig& cfg, const std::filesystem::path& root);

/// gen-cohort through report, in order.
void run_all(const RunConfig& cfg, const std::filesystem::path& root);

}  // namespace nrr
