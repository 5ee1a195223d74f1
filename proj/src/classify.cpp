#include "nrr/classify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include <Eigen/Cholesky>

namespace nrr {

void FeatureMatrix::validate() const
{
    if (static_cast<std::size_t>(values.rows()) != ids.size() || static_cast<std::size_t>(values.cols()) != names.size()) {
        throw ShapeError("feature matrix: " + std::to_string(values.rows()) + "x" + std::to_string(values.cols()) +
                         " values for " + std::to_string(ids.size()) + " ids and " + std::to_string(names.size()) +
                         " names");
    }
    if (!values.allFinite()) throw Error("feature matrix contains non-finite values");
}

FeatureMatrix FeatureMatrix::concat(const FeatureMatrix& a, const FeatureMatrix& b)
{
    if (a.ids != b.ids) throw ShapeError("feature matrices are not row-aligned");
    FeatureMatrix out;
    out.ids = a.ids;
    out.names = a.names;
    out.names.insert(out.names.end(), b.names.begin(), b.names.end());
    out.values.resize(a.values.rows(), a.values.cols() + b.values.cols());
    out.values << a.values, b.values;
    return out;
}

FeatureMatrix FeatureMatrix::rows(const std::vector<std::size_t>& idx) const
{
    FeatureMatrix out;
    out.names = names;
    out.values.resize(static_cast<Eigen::Index>(idx.size()), values.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        out.ids.push_back(ids.at(idx[i]));
        out.values.row(static_cast<Eigen::Index>(i)) = values.row(static_cast<Eigen::Index>(idx[i]));
    }
    return out;
}

// ---- logistic regression ----------------------------------------------------------

namespace {

double log1pexp_neg_abs(double z) { return std::log1p(std::exp(-std::abs(z))); }

double sigmoid(double z)
{
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

void check_binary(const Eigen::VectorXd& y)
{
    bool pos = false, neg = false;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        if (y[i] == 1) pos = true;
        else if (y[i] == 0) neg = true;
        else throw Error("labels must be 0 or 1");
    }
    if (!pos || !neg) throw Error("labels contain a single class");
}

}  // namespace

Eigen::VectorXd LogRegModel::predict_proba(const Eigen::MatrixXd& x) const
{
    if (x.cols() != weights.size()) throw ShapeError("logreg: expected " + std::to_string(weights.size()) + " features, got " + std::to_string(x.cols()));
    Eigen::VectorXd z = x * weights;
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = sigmoid(z[i] + intercept);
    return z;
}

double logreg_objective(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd& w, double b,
                        double l2_c)
{
    const double n = static_cast<double>(x.rows());
    const Eigen::VectorXd z = (x * w).array() + b;
    double loss = 0;
    for (Eigen::Index i = 0; i < z.size(); ++i) loss += std::max(z[i], 0.0) - z[i] * y[i] + log1pexp_neg_abs(z[i]);
    return loss / n + w.squaredNorm() / (2.0 * l2_c * n);
}

LogRegModel fit_logreg(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double l2_c)
{
    if (x.rows() != y.size()) throw ShapeError("logreg: X has " + std::to_string(x.rows()) + " rows, y has " + std::to_string(y.size()));
    if (!(l2_c > 0)) throw Error("logreg: C must be positive");
    check_binary(y);
    const Eigen::Index n = x.rows(), p = x.cols();
    const double dn = static_cast<double>(n);
    const double lam = 1.0 / (l2_c * dn);

    Eigen::MatrixXd xa(n, p + 1);
    xa << x, Eigen::VectorXd::Ones(n);
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(p + 1);
    auto objective = [&](const Eigen::VectorXd& t) { return logreg_objective(x, y, t.head(p), t[p], l2_c); };

    LogRegModel m;
    m.l2_c = l2_c;
    double f = objective(theta);
    constexpr std::size_t kMaxIter = 100;
    for (std::size_t it = 0; it < kMaxIter; ++it) {
        const Eigen::VectorXd z = xa * theta;
        Eigen::VectorXd prob(n), wdiag(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            prob[i] = sigmoid(z[i]);
            wdiag[i] = prob[i] * (1.0 - prob[i]);
        }
        Eigen::VectorXd grad = xa.transpose() * (prob - y) / dn;
        grad.head(p) += lam * theta.head(p);
        m.grad_norm = grad.norm();
        m.iterations = it;
        if (m.grad_norm < kLogRegTolerance) break;

        Eigen::MatrixXd hess = xa.transpose() * wdiag.asDiagonal() * xa / dn;
        hess.diagonal().head(p).array() += lam;
        // tiny ridge keeps the intercept direction solvable when all
        // probabilities saturate
        hess.diagonal().array() += 1e-12;
        const Eigen::VectorXd step = hess.ldlt().solve(grad);

        double t = 1.0;
        const double slope = grad.dot(step);
        Eigen::VectorXd next = theta - step;
        double fn = objective(next);
        while (fn > f - 1e-4 * t * slope && t > 1e-10) {
            t *= 0.5;
            next = theta - t * step;
            fn = objective(next);
        }
        if (fn > f) break;  // no further decrease possible at machine precision
        theta = next;
        f = fn;
    }
    m.weights = theta.head(p);
    m.intercept = theta[p];
    return m;
}

// ---- ensembles ------------------------------------------------------------------

Standardizer Standardizer::fit(const Eigen::MatrixXd& x)
{
    if (x.rows() == 0) throw Error("standardizer: no rows");
    Standardizer s;
    s.mean = x.colwise().mean();
    s.std = ((x.rowwise() - s.mean).array().square().colwise().sum() / static_cast<double>(x.rows())).sqrt();
    for (Eigen::Index j = 0; j < s.std.size(); ++j)
        if (!(s.std[j] > 0)) s.std[j] = 1.0;
    return s;
}

Eigen::MatrixXd Standardizer::apply(const Eigen::MatrixXd& x) const
{
    if (x.cols() != mean.size()) throw ShapeError("standardizer: column count mismatch");
    return (x.rowwise() - mean).array().rowwise() / std.array();
}

Eigen::VectorXd EnsembleModel::predict(const Eigen::MatrixXd& x) const
{
    if (folds.empty()) throw Error("ensemble has no fold models");
    const Eigen::MatrixXd xs = scaler.apply(x);
    Eigen::VectorXd p = Eigen::VectorXd::Zero(x.rows());
    for (const auto& m : folds) p += m.predict_proba(xs);
    return p / static_cast<double>(folds.size());
}

std::vector<std::size_t> stratified_folds(const Eigen::VectorXd& y, std::size_t k, std::uint64_t seed)
{
    if (k < 2) throw Error("cross-validation needs k >= 2");
    std::vector<std::size_t> pos, neg;
    for (Eigen::Index i = 0; i < y.size(); ++i) (y[i] == 1 ? pos : neg).push_back(static_cast<std::size_t>(i));
    if (pos.size() < k || neg.size() < k) {
        throw Error("stratified " + std::to_string(k) + "-fold split needs at least " + std::to_string(k) +
                    " examples per class (have " + std::to_string(pos.size()) + " positive, " +
                    std::to_string(neg.size()) + " negative)");
    }
    std::mt19937_64 rng(seed);
    std::shuffle(pos.begin(), pos.end(), rng);
    std::shuffle(neg.begin(), neg.end(), rng);
    std::vector<std::size_t> fold(static_cast<std::size_t>(y.size()));
    std::size_t next = 0;
    for (const auto* cls : {&pos, &neg})
        for (std::size_t i : *cls) fold[i] = next++ % k;
    return fold;
}

EnsembleModel cv_ensemble_fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, std::size_t k, std::uint64_t seed,
                              double l2_c)
{
    check_binary(y);
    EnsembleModel e;
    e.seed = seed;
    e.fold_of = stratified_folds(y, k, seed);
    e.scaler = Standardizer::fit(x);
    const Eigen::MatrixXd xs = e.scaler.apply(x);
    for (std::size_t f = 0; f < k; ++f) {
        std::vector<Eigen::Index> rows;
        for (std::size_t i = 0; i < e.fold_of.size(); ++i)
            if (e.fold_of[i] != f) rows.push_back(static_cast<Eigen::Index>(i));
        Eigen::MatrixXd xf(rows.size(), x.cols());
        Eigen::VectorXd yf(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            xf.row(r) = xs.row(rows[r]);
            yf[r] = y[rows[r]];
        }
        e.folds.push_back(fit_logreg(xf, yf, l2_c));
    }
    return e;
}

// ---- AUC ------------------------------------------------------------------------

double auc(const Eigen::VectorXd& scores, const Eigen::VectorXd& labels)
{
    if (scores.size() != labels.size()) throw ShapeError("auc: scores and labels differ in length");
    check_binary(labels);
    const auto n = static_cast<std::size_t>(scores.size());
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // average ranks over tie groups (Mann-Whitney U)
    double rank_sum_pos = 0;
    double n_pos = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t)
            if (labels[order[t]] == 1) {
                rank_sum_pos += avg_rank;
                n_pos += 1;
            }
        i = j + 1;
    }
    const double n_neg = static_cast<double>(n) - n_pos;
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg);
}

BootstrapResult bootstrap_auc(const Eigen::VectorXd& scores, const Eigen::VectorXd& labels, std::size_t n_boot,
                              std::uint64_t seed)
{
    check_binary(labels);
    if (n_boot == 0) throw Error("bootstrap needs at least one resample");
    const auto n = static_cast<std::size_t>(scores.size());
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    BootstrapResult r;
    std::vector<double> values;
    values.reserve(n_boot);
    Eigen::VectorXd s(n), l(n);
    while (values.size() < n_boot) {
        double pos = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t k = pick(rng);
            s[i] = scores[k];
            l[i] = labels[k];
            pos += l[i];
        }
        if (pos == 0 || pos == static_cast<double>(n)) {
            ++r.redraws;
            continue;
        }
        values.push_back(auc(s, l));
    }
    const double m = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    double ss = 0;
    for (double v : values) ss += (v - m) * (v - m);
    r.mean = m;
    r.std = std::sqrt(ss / static_cast<double>(values.size()));
    return r;
}

// ---- reports ----------------------------------------------------------------------

CoefficientReport coefficient_report(const EnsembleModel& model, const std::vector<std::string>& names,
                                     const std::vector<bool>& is_dlr)
{
    if (model.folds.empty()) throw Error("coefficient report: ensemble has no fold models");
    const auto p = static_cast<std::size_t>(model.folds.front().weights.size());
    if (names.size() != p || is_dlr.size() != p) throw ShapeError("coefficient report: feature names do not match model width");
    CoefficientReport r;
    for (std::size_t j = 0; j < p; ++j) {
        double acc = 0;
        for (const auto& f : model.folds) acc += std::abs(f.weights[static_cast<Eigen::Index>(j)]);
        r.ranking.push_back({names[j], acc / static_cast<double>(model.folds.size()), is_dlr[j]});
    }
    std::stable_sort(r.ranking.begin(), r.ranking.end(),
                     [](const RankedFeature& a, const RankedFeature& b) { return a.importance > b.importance; });
    const auto n_dlr = static_cast<std::size_t>(std::count(is_dlr.begin(), is_dlr.end(), true));
    const std::size_t n_hcr = p - n_dlr;
    std::size_t count = 0;
    for (std::size_t k = 1; k <= p; ++k) {
        if (r.ranking[k - 1].is_dlr) ++count;
        r.curve.push_back({k, count, std::min(k, n_dlr), k > n_hcr ? k - n_hcr : 0});
    }
    return r;
}

LabeledSplit select_labeled(const Eigen::MatrixXd& train_x, const std::vector<std::optional<int>>& train_labels,
                            const Eigen::MatrixXd& test_x, const std::vector<std::optional<int>>& test_labels)
{
    auto pick = [](const Eigen::MatrixXd& x, const std::vector<std::optional<int>>& lab, Eigen::MatrixXd& ox,
                   Eigen::VectorXd& oy) {
        if (static_cast<std::size_t>(x.rows()) != lab.size()) throw ShapeError("labels are not aligned with feature rows");
        std::vector<Eigen::Index> rows;
        for (std::size_t i = 0; i < lab.size(); ++i)
            if (lab[i]) rows.push_back(static_cast<Eigen::Index>(i));
        ox.resize(rows.size(), x.cols());
        oy.resize(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            ox.row(r) = x.row(rows[r]);
            oy[r] = *lab[rows[r]];
        }
    };
    LabeledSplit s;
    pick(train_x, train_labels, s.train_x, s.train_y);
    pick(test_x, test_labels, s.test_x, s.test_y);
    if (s.train_y.size() == 0) throw Error("no labeled training subjects");
    return s;
}

AucReport evaluate_marker(const LabeledSplit& split, const ClassifierSettings& s, const std::string& config,
                          const std::string& marker, EnsembleModel* fitted)
{
    EnsembleModel e = cv_ensemble_fit(split.train_x, split.train_y, s.folds, s.seed, s.l2_c);
    const Eigen::VectorXd scores = e.predict(split.test_x);
    AucReport r;
    r.config = config;
    r.marker = marker;
    r.auc = auc(scores, split.test_y);
    const BootstrapResult b = bootstrap_auc(scores, split.test_y, s.n_boot, s.seed);
    r.auc_mean = b.mean;
    r.auc_std = b.std;
    r.n_test = static_cast<std::size_t>(split.test_y.size());
    r.n_boot = s.n_boot;
    r.seed = s.seed;
    if (fitted) *fitted = std::move(e);
    return r;
}

const AucReport& ReportTable::cell(const std::string& config, const std::string& marker) const
{
    for (const auto& c : cells)
        if (c.config == config && c.marker == marker) return c;
    throw Error("report has no cell for config '" + config + "', marker '" + marker + "'");
}

double ReportTable::delta(const std::string& config) const
{
    double acc = 0;
    for (const auto& m : markers) acc += cell(config, m).auc_mean - cell(baseline, m).auc_mean;
    return markers.empty() ? 0.0 : acc / static_cast<double>(markers.size());
}

namespace {

std::string fmt(const char* f, double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

}  // namespace

std::string to_csv(const ReportTable& t)
{
    std::ostringstream os;
    os << "config,marker,auc,auc_mean,auc_std,n_test,n_boot,seed\n";
    for (const auto& c : t.cells) {
        os << c.config << ',' << c.marker << ',' << fmt("%.6f", c.auc) << ',' << fmt("%.6f", c.auc_mean) << ','
           << fmt("%.6f", c.auc_std) << ',' << c.n_test << ',' << c.n_boot << ',' << c.seed << '\n';
    }
    return os.str();
}

std::string to_markdown(const ReportTable& t)
{
    std::ostringstream os;
    os << "| Marker |";
    for (const auto& c : t.configs) os << ' ' << c << " |";
    os << "\n|---|";
    for (std::size_t i = 0; i < t.configs.size(); ++i) os << "---|";
    os << '\n';
    for (const auto& m : t.markers) {
        os << "| " << m << " |";
        for (const auto& c : t.configs) {
            const AucReport& r = t.cell(c, m);
            os << ' ' << fmt("%.2f", 100 * r.auc_mean) << " ± " << fmt("%.2f", 100 * r.auc_std) << " |";
        }
        os << '\n';
    }
    if (!t.baseline.empty()) {
        os << "| δ w.r.t. " << t.baseline << " |";
        for (const auto& c : t.configs) os << ' ' << fmt("%+.2f", 100 * t.delta(c)) << " |";
        os << '\n';
    }
    return os.str();
}

std::string curve_csv(const CoefficientReport& r)
{
    std::ostringstream os;
    os << "k,count,extreme_hi,extreme_lo\n";
    for (const auto& p : r.curve) os << p.k << ',' << p.count << ',' << p.extreme_hi << ',' << p.extreme_lo << '\n';
    return os.str();
}

std::string ranking_csv(const CoefficientReport& r)
{
    std::ostringstream os;
    os << "rank,feature,group,mean_abs_weight\n";
    for (std::size_t i = 0; i < r.ranking.size(); ++i) {
        os << i + 1 << ',' << r.ranking[i].name << ',' << (r.ranking[i].is_dlr ? "dlr" : "hcr") << ','
           << fmt("%.8f", r.ranking[i].importance) << '\n';
    }
    return os.str();
}

}  // namespace nrr
