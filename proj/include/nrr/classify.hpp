#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "nrr/error.hpp"

namespace nrr {

/// Rows are subjects, columns named features.
struct FeatureMatrix {
    std::vector<std::string> ids;
    std::vector<std::string> names;
    Eigen::MatrixXd values;

    void validate() const;
    /// Column-wise concatenation of two row-aligned matrices.
    static FeatureMatrix concat(const FeatureMatrix& a, const FeatureMatrix& b);
    FeatureMatrix rows(const std::vector<std::size_t>& idx) const;
};

struct LogRegModel {
    Eigen::VectorXd weights;
    double intercept = 0;
    double l2_c = 1.0;
    double grad_norm = 0;  // gradient norm of the objective at exit
    std::size_t iterations = 0;

    Eigen::VectorXd predict_proba(const Eigen::MatrixXd& x) const;
};

inline constexpr double kLogRegTolerance = 1e-6;

/// Mean log-loss + ||w||^2 / (2 C n); the intercept is not penalised.
double logreg_objective(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd& w, double b,
                        double l2_c);

/// Damped Newton iterations with backtracking; stops once the gradient norm
/// drops below kLogRegTolerance. y holds 0/1.
LogRegModel fit_logreg(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double l2_c = 1.0);

/// Column z-score; zero-spread columns keep std = 1.
struct Standardizer {
    Eigen::RowVectorXd mean;
    Eigen::RowVectorXd std;

    static Standardizer fit(const Eigen::MatrixXd& x);
    Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const;
};

struct EnsembleModel {
    Standardizer scaler;  // fitted on the whole training set
    std::vector<LogRegModel> folds;
    std::vector<std::size_t> fold_of;  // fold index of every training row
    std::uint64_t seed = 0;

    /// Mean of the fold models' probabilities.
    Eigen::VectorXd predict(const Eigen::MatrixXd& x) const;
};

/// Stratified assignment of rows to k folds: each class is shuffled with
/// `seed` and dealt round-robin.
std::vector<std::size_t> stratified_folds(const Eigen::VectorXd& y, std::size_t k, std::uint64_t seed);

/// One model per fold, trained on the other k-1 folds.
EnsembleModel cv_ensemble_fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, std::size_t k = 4,
                              std::uint64_t seed = 0, double l2_c = 1.0);

/// Mann-Whitney AUC with half credit for ties.
double auc(const Eigen::VectorXd& scores, const Eigen::VectorXd& labels);

struct BootstrapResult {
    double mean = 0;
    double std = 0;
    std::size_t redraws = 0;  // resamples discarded for containing a single class
};

/// Subject-level resampling with replacement; single-class resamples are redrawn.
BootstrapResult bootstrap_auc(const Eigen::VectorXd& scores, const Eigen::VectorXd& labels, std::size_t n_boot = 10000,
                              std::uint64_t seed = 0);

struct AucReport {
    std::string config;
    std::string marker;
    double auc = 0;  // point estimate on the full test set
    double auc_mean = 0;
    double auc_std = 0;
    std::size_t n_test = 0;
    std::size_t n_boot = 0;
    std::uint64_t seed = 0;
};

struct RankedFeature {
    std::string name;
    double importance = 0;  // mean |weight| across fold models
    bool is_dlr = false;
};

struct CurvePoint {
    std::size_t k = 0;
    std::size_t count = 0;       // DLR features among the top k
    std::size_t extreme_hi = 0;  // every DLR feature ranked first
    std::size_t extreme_lo = 0;  // every HCR feature ranked first
};

struct CoefficientReport {
    std::vector<RankedFeature> ranking;  // descending importance, ties by column order
    std::vector<CurvePoint> curve;       // k = 1..#features
};

CoefficientReport coefficient_report(const EnsembleModel& model, const std::vector<std::string>& names,
                                     const std::vector<bool>& is_dlr);

/// Labels of one marker; rows with a missing label are dropped.
struct LabeledSplit {
    Eigen::MatrixXd train_x, test_x;
    Eigen::VectorXd train_y, test_y;
};

LabeledSplit select_labeled(const Eigen::MatrixXd& train_x, const std::vector<std::optional<int>>& train_labels,
                            const Eigen::MatrixXd& test_x, const std::vector<std::optional<int>>& test_labels);

struct ClassifierSettings {
    std::size_t folds = 4;
    double l2_c = 1.0;
    std::size_t n_boot = 10000;
    std::uint64_t seed = 0;
};

/// Trains the ensemble on the training rows of `split` and reports test AUC.
AucReport evaluate_marker(const LabeledSplit& split, const ClassifierSettings& s, const std::string& config,
                          const std::string& marker, EnsembleModel* fitted = nullptr);

/// Table of reports: rows are configurations, columns markers, plus a
/// summary row with the mean AUC difference against `baseline` per config.
struct ReportTable {
    std::vector<std::string> configs;
    std::vector<std::string> markers;
    std::vector<AucReport> cells;
    std::string baseline;

    const AucReport& cell(const std::string& config, const std::string& marker) const;
    /// Mean over markers of AUC(config) - AUC(baseline), on the bootstrap means.
    double delta(const std::string& config) const;
};

std::string to_csv(const ReportTable& t);
std::string to_markdown(const ReportTable& t);
std::string curve_csv(const CoefficientReport& r);
std::string ranking_csv(const CoefficientReport& r);

}  // namespace nrr
