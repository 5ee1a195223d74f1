#include "nrr/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include <spdlog/sinks/basic_file_sink.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

namespace nrr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

template <typename T>
void read_key(const json& j, const char* key, T& out)
{
    if (j.contains(key)) out = j.at(key).get<T>();
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where)
{
    if (!j.is_object()) throw Error(where + " must be a JSON object");
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) throw Error("unknown key '" + k + "' in " + where);
}

template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& f)
{
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = t; i < n; i += threads) f(i);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

std::string fmt_g(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

std::string fmt_exact(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::string> split_line(const std::string& line)
{
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

void write_text(const fs::path& p, const std::string& s)
{
    std::ofstream out(p, std::ios::binary);
    if (!out) throw IoError("cannot write " + p.string());
    out << s;
    if (!out) throw IoError("write failed for " + p.string());
}

json read_json_file(const fs::path& p)
{
    std::ifstream in(p);
    if (!in) throw IoError("missing input " + p.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw IoError(p.string() + ": " + e.what());
    }
}

}  // namespace

// ---- config ----------------------------------------------------------------------

void RunConfig::resolve()
{
    if (seed) {
        cohort.seed = *seed;
        vae.seed = *seed;
        classifier.seed = *seed;
    }
    if (threads == 0) throw Error("threads must be >= 1");
    cohort.validate();
    vae.validate();
    for (auto t : preprocess.target_spacing)
        if (!(t > 0)) throw Error("preprocess.target_spacing must be positive");
    if (!(preprocess.p_low < preprocess.p_high)) throw Error("preprocess percentiles must satisfy p_low < p_high");
    if (!(hcr.bin_width > 0)) throw Error("hcr.bin_width must be positive");
    if (classifier.folds < 2 || classifier.n_boot == 0 || !(classifier.l2_c > 0)) {
        throw Error("classifier settings: folds >= 2, n_boot >= 1 and l2_c > 0 required");
    }
}

void to_json(json& j, const RunConfig& c)
{
    j = json{{"cohort", c.cohort},
             {"preprocess",
              {{"target_spacing", c.preprocess.target_spacing},
               {"p_low", c.preprocess.p_low},
               {"p_high", c.preprocess.p_high},
               {"fill", c.preprocess.fill}}},
             {"hcr", {{"bin_width", c.hcr.bin_width}, {"scale", c.hcr.scale}}},
             {"vae", c.vae},
             {"classifier",
              {{"folds", c.classifier.folds},
               {"l2_c", c.classifier.l2_c},
               {"n_boot", c.classifier.n_boot},
               {"seed", c.classifier.seed}}},
             {"sweep", {{"kappas", c.sweep.kappas}, {"latents", c.sweep.latents}}},
             {"threads", c.threads}};
    j["seed"] = c.seed ? json(*c.seed) : json(nullptr);
}

void from_json(const json& j, RunConfig& c)
{
    reject_unknown(j, {"cohort", "preprocess", "hcr", "vae", "classifier", "sweep", "seed", "threads"}, "run config");
    if (j.contains("cohort")) c.cohort = j.at("cohort").get<CohortSpec>();
    if (j.contains("preprocess")) {
        const json& p = j.at("preprocess");
        reject_unknown(p, {"target_spacing", "p_low", "p_high", "fill"}, "preprocess");
        read_key(p, "target_spacing", c.preprocess.target_spacing);
        read_key(p, "p_low", c.preprocess.p_low);
        read_key(p, "p_high", c.preprocess.p_high);
        read_key(p, "fill", c.preprocess.fill);
    }
    if (j.contains("hcr")) {
        const json& h = j.at("hcr");
        reject_unknown(h, {"bin_width", "scale"}, "hcr");
        read_key(h, "bin_width", c.hcr.bin_width);
        read_key(h, "scale", c.hcr.scale);
    }
    if (j.contains("vae")) c.vae = j.at("vae").get<VaeConfig>();
    if (j.contains("classifier")) {
        const json& k = j.at("classifier");
        reject_unknown(k, {"folds", "l2_c", "n_boot", "seed"}, "classifier");
        read_key(k, "folds", c.classifier.folds);
        read_key(k, "l2_c", c.classifier.l2_c);
        read_key(k, "n_boot", c.classifier.n_boot);
        read_key(k, "seed", c.classifier.seed);
    }
    if (j.contains("sweep")) {
        const json& s = j.at("sweep");
        reject_unknown(s, {"kappas", "latents"}, "sweep");
        read_key(s, "kappas", c.sweep.kappas);
        read_key(s, "latents", c.sweep.latents);
    }
    if (j.contains("seed") && !j.at("seed").is_null()) c.seed = j.at("seed").get<std::uint64_t>();
    read_key(j, "threads", c.threads);
}

RunConfig load_run_config(const fs::path& path)
{
    const json j = read_json_file(path);
    try {
        return j.get<RunConfig>();
    } catch (const json::exception& e) {
        throw Error(path.string() + ": " + e.what());
    }
}

// ---- in-memory stages ----------------------------------------------------------

std::vector<std::size_t> SubjectSet::indices(Split s) const
{
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i)
        if (split[i] == s) out.push_back(i);
    return out;
}

std::vector<MaskedVolume> SubjectSet::images_of(Split s) const { return select(images, indices(s)); }

SubjectSet preprocess_cohort(const CohortManifest& m, const PreprocessConfig& cfg, const Dims& grid,
                             IntensityStats* stats_out, std::size_t threads)
{
    SubjectSet s;
    const std::size_t n = m.subjects.size();
    s.images.resize(n);
    parallel_for(n, threads, [&](std::size_t i) {
        const MaskedVolume raw = load_subject(m, m.subjects[i]);
        MaskedVolume r{resample(raw.volume, cfg.target_spacing), resample(raw.mask, cfg.target_spacing)};
        try {
            s.images[i] = center_on_grid(r, grid, cfg.fill);
        } catch (const Error& e) {
            throw Error("subject " + m.subjects[i].id + ": " + e.what());
        }
    });
    for (const auto& r : m.subjects) {
        s.ids.push_back(r.id);
        s.labels.push_back(r.labels);
        s.split.push_back(r.split);
    }
    const auto train = s.images_of(Split::Train);
    if (train.empty()) throw Error("cohort has no training subjects");
    const IntensityStats stats = fit_intensity_stats(train, cfg.p_low, cfg.p_high);
    for (auto& img : s.images) img = clip_and_standardize(img, stats);
    if (stats_out) *stats_out = stats;
    return s;
}

HcrTable hcr_table(const SubjectSet& s, const HcrConfig& cfg, std::size_t threads)
{
    HcrTable t;
    t.raw.resize(s.images.size());
    parallel_for(s.images.size(), threads, [&](std::size_t i) { t.raw[i] = extract_hcr(s.images[i], cfg.bin_width); });
    if (cfg.scale) {
        const auto train = select(t.raw, s.indices(Split::Train));
        t.scaler = fit_scaler(train, true);
        t.constant = constant_columns(t.scaler, train);
        for (const auto& h : t.raw) t.scaled.push_back(t.scaler.apply(h));
    } else {
        t.scaler.mean.fill(0);
        t.scaler.std.fill(1);
        t.scaled = t.raw;
    }
    return t;
}

TrainResult train_vae(const SubjectSet& s, const HcrTable& h, const VaeConfig& cfg, const TrainHooks& hooks)
{
    const auto idx = s.indices(Split::Train);
    return train(select(s.images, idx), select(h.scaled, idx), cfg, hooks);
}

Eigen::MatrixXd hcr_matrix(const std::vector<HcrVector>& rows)
{
    Eigen::MatrixXd m(rows.size(), kHcrCount);
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t k = 0; k < kHcrCount; ++k) m(i, k) = rows[i][k];
    return m;
}

double mean_abs_correlation(const Eigen::MatrixXd& h, const Eigen::MatrixXd& d)
{
    if (h.rows() != d.rows()) throw ShapeError("correlation: matrices have different row counts");
    auto centred = [](const Eigen::MatrixXd& m, std::vector<Eigen::Index>& keep) {
        Eigen::MatrixXd c = m.rowwise() - m.colwise().mean();
        for (Eigen::Index j = 0; j < c.cols(); ++j) {
            const double nrm = c.col(j).norm();
            if (nrm > 1e-12 * std::max(1.0, m.col(j).cwiseAbs().maxCoeff())) {
                c.col(j) /= nrm;
                keep.push_back(j);
            }
        }
        return c;
    };
    std::vector<Eigen::Index> kh, kd;
    const Eigen::MatrixXd ch = centred(h, kh), cd = centred(d, kd);
    if (kh.empty()) throw Error("correlation: no HCR column with spread");
    if (kd.empty()) return 0.0;  // constant DLR carries no linear association
    double acc = 0;
    for (auto a : kh)
        for (auto b : kd) acc += std::abs(ch.col(a).dot(cd.col(b)));
    return acc / static_cast<double>(kh.size() * kd.size());
}

FeatureSet hcr_features(const HcrTable& h)
{
    FeatureSet f;
    f.name = "H" + std::to_string(kHcrCount);
    f.columns.assign(kHcrNames.begin(), kHcrNames.end());
    f.is_dlr.assign(kHcrCount, false);
    f.values = hcr_matrix(h.scaled);
    return f;
}

FeatureSet dlr_features(const Eigen::MatrixXd& d, const std::string& name)
{
    FeatureSet f;
    f.name = name;
    for (Eigen::Index j = 0; j < d.cols(); ++j) f.columns.push_back("dlr_" + std::to_string(j));
    f.is_dlr.assign(static_cast<std::size_t>(d.cols()), true);
    f.values = d;
    return f;
}

FeatureSet combine(const FeatureSet& a, const FeatureSet& b, const std::string& name)
{
    if (a.values.rows() != b.values.rows()) throw ShapeError("feature sets are not row-aligned");
    FeatureSet f;
    f.name = name;
    f.columns = a.columns;
    f.columns.insert(f.columns.end(), b.columns.begin(), b.columns.end());
    f.is_dlr = a.is_dlr;
    f.is_dlr.insert(f.is_dlr.end(), b.is_dlr.begin(), b.is_dlr.end());
    f.values.resize(a.values.rows(), a.values.cols() + b.values.cols());
    f.values << a.values, b.values;
    return f;
}

std::vector<FeatureSet> standard_feature_sets(const HcrTable& h, const Eigen::MatrixXd& dlr_plain,
                                              const Eigen::MatrixXd& dlr_mi)
{
    const FeatureSet hf = hcr_features(h);
    const std::string l = std::to_string(dlr_plain.cols());
    const std::string hl = std::to_string(kHcrCount + static_cast<std::size_t>(dlr_plain.cols()));
    const FeatureSet dp = dlr_features(dlr_plain, "D" + l), dm = dlr_features(dlr_mi, "D" + l + "-MI");
    return {hf, dp, dm, combine(hf, dp, "HD" + hl), combine(hf, dm, "HD" + hl + "-MI")};
}

MarkerResult evaluate_feature_set(const SubjectSet& s, const FeatureSet& f, std::size_t marker,
                                  const ClassifierSettings& cfg)
{
    const auto tr = s.indices(Split::Train), te = s.indices(Split::Test);
    auto rows = [&](const std::vector<std::size_t>& idx) {
        Eigen::MatrixXd m(idx.size(), f.values.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) m.row(i) = f.values.row(idx[i]);
        return m;
    };
    auto labels = [&](const std::vector<std::size_t>& idx) {
        std::vector<std::optional<int>> out;
        for (std::size_t i : idx) out.push_back(s.labels[i][marker]);
        return out;
    };
    const LabeledSplit split = select_labeled(rows(tr), labels(tr), rows(te), labels(te));
    MarkerResult r;
    r.report = evaluate_marker(split, cfg, f.name, kMarkerNames[marker], &r.model);
    return r;
}

// ---- file formats ----------------------------------------------------------------

void save_matrix_csv(const fs::path& path, const std::vector<std::string>& ids, const std::vector<std::string>& columns,
                     const Eigen::MatrixXd& values)
{
    if (static_cast<std::size_t>(values.rows()) != ids.size() ||
        static_cast<std::size_t>(values.cols()) != columns.size()) {
        throw ShapeError("save_matrix_csv: ids/columns do not match the matrix");
    }
    std::ostringstream os;
    os << "id";
    for (const auto& c : columns) os << ',' << c;
    os << '\n';
    for (std::size_t i = 0; i < ids.size(); ++i) {
        os << ids[i];
        for (Eigen::Index j = 0; j < values.cols(); ++j) os << ',' << fmt_exact(values(i, j));
        os << '\n';
    }
    write_text(path, os.str());
}

FeatureMatrix load_matrix_csv(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) throw IoError("missing input " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw IoError(path.string() + ": empty file");
    auto header = split_line(line);
    if (header.empty() || header[0] != "id") throw IoError(path.string() + ": header must start with 'id'");
    FeatureMatrix m;
    m.names.assign(header.begin() + 1, header.end());
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto cells = split_line(line);
        if (cells.size() != header.size()) throw IoError(path.string() + ": ragged row for '" + cells[0] + "'");
        m.ids.push_back(cells[0]);
        std::vector<double> r;
        for (std::size_t c = 1; c < cells.size(); ++c) r.push_back(std::strtod(cells[c].c_str(), nullptr));
        rows.push_back(std::move(r));
    }
    m.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(m.names.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t c = 0; c < m.names.size(); ++c) m.values(i, c) = rows[i][c];
    m.validate();
    return m;
}

void save_trace_csv(const fs::path& path, const std::vector<TraceRow>& trace)
{
    std::ostringstream os;
    os << "epoch,nll,kl,mi,total\n";
    for (const auto& r : trace) {
        os << r.epoch << ',' << fmt_exact(r.nll) << ',' << fmt_exact(r.kl) << ',' << fmt_exact(r.mi) << ','
           << fmt_exact(r.total) << '\n';
    }
    write_text(path, os.str());
}

json ensemble_to_json(const EnsembleModel& e, const FeatureSet& f)
{
    json folds = json::array();
    for (const auto& m : e.folds) {
        folds.push_back({{"weights", std::vector<double>(m.weights.data(), m.weights.data() + m.weights.size())},
                         {"intercept", m.intercept},
                         {"l2_c", m.l2_c},
                         {"grad_norm", m.grad_norm}});
    }
    return json{{"feature_set", f.name},
                {"columns", f.columns},
                {"scaler_mean", std::vector<double>(e.scaler.mean.data(), e.scaler.mean.data() + e.scaler.mean.size())},
                {"scaler_std", std::vector<double>(e.scaler.std.data(), e.scaler.std.data() + e.scaler.std.size())},
                {"fold_of", e.fold_of},
                {"seed", e.seed},
                {"folds", folds}};
}

EnsembleModel ensemble_from_json(const json& j, std::vector<std::string>* columns)
{
    EnsembleModel e;
    try {
        auto vec = [](const json& a) {
            const auto v = a.get<std::vector<double>>();
            return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
        };
        e.scaler.mean = vec(j.at("scaler_mean")).transpose();
        e.scaler.std = vec(j.at("scaler_std")).transpose();
        e.fold_of = j.at("fold_of").get<std::vector<std::size_t>>();
        e.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& f : j.at("folds")) {
            LogRegModel m;
            m.weights = vec(f.at("weights"));
            m.intercept = f.at("intercept").get<double>();
            m.l2_c = f.at("l2_c").get<double>();
            m.grad_norm = f.at("grad_norm").get<double>();
            e.folds.push_back(std::move(m));
        }
        if (columns) *columns = j.at("columns").get<std::vector<std::string>>();
    } catch (const json::exception& ex) {
        throw IoError(std::string("invalid classifier file: ") + ex.what());
    }
    return e;
}

ReportTable load_report_csv(const fs::path& path, const std::string& baseline)
{
    std::ifstream in(path);
    if (!in) throw IoError("missing input " + path.string());
    std::string line;
    std::getline(in, line);
    ReportTable t;
    t.baseline = baseline;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto c = split_line(line);
        if (c.size() != 8) throw IoError(path.string() + ": malformed row");
        AucReport r{c[0], c[1], std::stod(c[2]), std::stod(c[3]), std::stod(c[4]),
                    std::stoul(c[5]), std::stoul(c[6]), std::stoull(c[7])};
        if (std::find(t.configs.begin(), t.configs.end(), r.config) == t.configs.end()) t.configs.push_back(r.config);
        if (std::find(t.markers.begin(), t.markers.end(), r.marker) == t.markers.end()) t.markers.push_back(r.marker);
        t.cells.push_back(std::move(r));
    }
    if (!baseline.empty() && std::find(t.configs.begin(), t.configs.end(), baseline) == t.configs.end()) t.baseline.clear();
    return t;
}

// ---- on-disk stages ----------------------------------------------------------------

namespace {

spdlog::level::level_enum env_level()
{
    const char* v = std::getenv("NRR_LOG_LEVEL");
    if (!v) return spdlog::level::info;
    return spdlog::level::from_str(v);
}

class Stage {
public:
    Stage(const RunConfig& cfg, const fs::path& root, const std::string& name) : dir_(root / name)
    {
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec) throw IoError("cannot create " + dir_.string() + ": " + ec.message());
        auto console = std::make_shared<spdlog::sinks::stderr_color_sink_mt>();
        auto file = std::make_shared<spdlog::sinks::basic_file_sink_mt>((dir_ / "log.txt").string(), true);
        log_ = std::make_shared<spdlog::logger>(name, spdlog::sinks_init_list{console, file});
        log_->set_level(env_level());
        log_->flush_on(spdlog::level::info);
        write_text(dir_ / "config.json", json(cfg).dump(2) + "\n");
        const json info{{"tool", "nrr"}, {"version", kVersion}, {"stage", name},
                        {"seed", cfg.seed ? json(*cfg.seed) : json(nullptr)}, {"threads", cfg.threads}};
        write_text(dir_ / "run_info.json", info.dump(2) + "\n");
        log_->info("stage {} -> {}", name, dir_.string());
    }

    const fs::path& dir() const { return dir_; }
    spdlog::logger& log() { return *log_; }

private:
    fs::path dir_;
    std::shared_ptr<spdlog::logger> log_;
};

SubjectSet load_preprocessed(const fs::path& root)
{
    const CohortManifest m = load_manifest(root / "preprocess" / "manifest.json");
    SubjectSet s;
    for (const auto& r : m.subjects) {
        s.ids.push_back(r.id);
        s.labels.push_back(r.labels);
        s.split.push_back(r.split);
        s.images.push_back(load_subject(m, r));
    }
    return s;
}

HcrTable load_hcr(const fs::path& root, const SubjectSet& s)
{
    const FeatureMatrix m = load_matrix_csv(root / "hcr" / "hcr.csv");
    if (m.ids != s.ids) throw Error("hcr.csv rows do not match the preprocessed manifest");
    if (m.names.size() != kHcrCount) throw Error("hcr.csv must have " + std::to_string(kHcrCount) + " feature columns");
    HcrTable t;
    for (Eigen::Index i = 0; i < m.values.rows(); ++i) {
        HcrVector h{};
        for (std::size_t k = 0; k < kHcrCount; ++k) h[k] = m.values(i, k);
        t.scaled.push_back(h);
    }
    return t;
}

Eigen::MatrixXd load_dlr(const fs::path& path, const SubjectSet& s)
{
    const FeatureMatrix m = load_matrix_csv(path);
    if (m.ids != s.ids) throw Error(path.string() + ": rows do not match the preprocessed manifest");
    return m.values;
}

struct Variant {
    std::string name;
    double kappa;
};

std::vector<Variant> variants(const RunConfig& cfg) { return {{"plain", 0.0}, {"mi", cfg.vae.kappa}}; }

std::vector<FeatureSet> feature_sets_from_disk(const fs::path& root, const SubjectSet& s)
{
    const HcrTable h = load_hcr(root, s);
    return standard_feature_sets(h, load_dlr(root / "dlr" / "dlr_plain.csv", s),
                                 load_dlr(root / "dlr" / "dlr_mi.csv", s));
}

std::string classifier_file(const std::string& set, std::size_t marker)
{
    return set + "__" + kMarkerNames[marker] + ".json";
}

bool has_labels(const SubjectSet& s, std::size_t marker)
{
    for (const auto& l : s.labels)
        if (l[marker]) return true;
    return false;
}

}  // namespace

void stage_gen_cohort(const RunConfig& cfg, const fs::path& root)
{
    Stage st(cfg, root, "cohort");
    const CohortManifest m = generate_cohort(cfg.cohort, st.dir());
    st.log().info("generated {} subjects ({} train)", m.subjects.size(), m.indices(Split::Train).size());
}

void stage_preprocess(const RunConfig& cfg, const fs::path& root)
{
    Stage st(cfg, root, "preprocess");
    const CohortManifest in = load_manifest(root / "cohort" / "manifest.json");
    IntensityStats stats;
    const SubjectSet s = preprocess_cohort(in, cfg.preprocess, cfg.vae.grid, &stats, cfg.threads);
    CohortManifest out;
    out.base_dir = st.dir();
    for (std::size_t i = 0; i < s.ids.size(); ++i) {
        SubjectRecord r = in.subjects[i];
        r.volume = r.id + "_vol.json";
        r.mask = r.id + "_mask.json";
        save_volume(st.dir() / r.volume, s.images[i].volume);
        save_mask(st.dir() / r.mask, s.images[i].mask);
        out.subjects.push_back(std::move(r));
    }
    save_manifest(st.dir() / "manifest.json", out);
    const json js{{"p_low", stats.p_low}, {"p_high", stats.p_high}, {"mean", stats.mean}, {"std", stats.std}};
    write_text(st.dir() / "intensity_stats.json", js.dump(2) + "\n");
    st.log().info("intensity stats fitted on training split: clip [{}, {}], mean {}, std {}", stats.p_low, stats.p_high,
                  stats.mean, stats.std);
}

void stage_extract_hcr(const RunConfig& cfg, const fs::path& root)
{
    Stage st(cfg, root, "hcr");
    const SubjectSet s = load_preprocessed(root);
    const HcrTable t = hcr_table(s, cfg.hcr, cfg.threads);
    const std::vector<std::string> names(kHcrNames.begin(), kHcrNames.end());
    save_matrix_csv(st.dir() / "hcr_raw.csv", s.ids, names, hcr_matrix(t.raw));
    save_matrix_csv(st.dir() / "hcr.csv", s.ids, names, hcr_matrix(t.scaled));
    const json js{{"mean", t.scaler.mean}, {"std", t.scaler.std}, {"constant_columns", t.constant}};
    write_text(st.dir() / "scaler.json", js.dump(2) + "\n");
    for (const auto& c : t.constant) st.log().warn("feature '{}' is constant on the training split; scaled to 0", c);
    st.log().info("extracted {} HCR vectors", s.ids.size());
}

void stage_train_vae(const RunConfig& cfg, const fs::path& root)
{
    Stage st(cfg, root, "vae");
    const SubjectSet s = load_preprocessed(root);
    const HcrTable h = load_hcr(root, s);
    for (const auto& v : variants(cfg)) {
        VaeConfig vc = cfg.vae;
        vc.kappa = v.kappa;
        st.log().info("training '{}' (kappa {}) for {} epochs", v.name, v.kappa, vc.vae_epochs);
        const TrainResult r = train_vae(s, h, vc);
        json schedule = json::array();
        for (const auto& ev : r.schedule) {
            schedule.push_back({{"phase", ev.phase == Phase::Vae ? "vae" : "discriminator"},
                                {"vae_epoch", ev.vae_epoch},
                                {"disc_epochs", ev.disc_epochs}});
        }
        ad::save_checkpoint(st.dir() / (v.name + ".ckpt"),
                            r.model.to_checkpoint({{"vae_epoch", vc.vae_epochs}, {"events", schedule}}));
        save_trace_csv(st.dir() / ("trace_" + v.name + ".csv"), r.trace);
        const TraceRow& last = r.trace.back();
        st.log().info("'{}' final epoch: nll {:.4f} kl {:.4f} mi {:.4f}", v.name, last.nll, last.kl, last.mi);
    }
}

void stage_extract_dlr(const RunConfig& cfg, const fs::path& root)
{
    Stage st(cfg, root, "dlr");
    const SubjectSet s = load_preprocessed(root);
    const HcrTable h = load_hcr(root, s);
    const Eigen::MatrixXd hm = hcr_matrix(h.scaled);
    const auto test = s.indices(Split::Test);
    std::ostringstream recon, corr;
    recon << "model,mean,std,n_test\n";
    corr << "model,mean_abs_pearson\n";
    for (const auto& v : variants(cfg)) {
        const VaeModel model = VaeModel::from_checkpoint(ad::load_checkpoint(root / "vae" / (v.name + ".ckpt")));
        const Eigen::MatrixXd d = extract_dlr(model, s.images);
        std::vector<std::string> cols;
        for (Eigen::Index j = 0; j < d.cols(); ++j) cols.push_back("dlr_" + std::to_string(j));
        save_matrix_csv(st.dir() / ("dlr_" + v.name + ".csv"), s.ids, cols, d);
        const ReconstructionError e = reconstruction_error(model, select(s.images, test), select(h.scaled, test));
        recon << v.name << ',' << fmt_exact(e.mean) << ',' << fmt_exact(e.std) << ',' << test.size() << '\n';
        const double r = mean_abs_correlation(hm, d);
        corr << v.name << ',' << fmt_exact(r) << '\n';
        st.log().info("'{}': test reconstruction {:.5f} ± {:.5f}, mean |r| with HCR {:.4f}", v.name, e.mean, e.std, r);
    }
    write_text(st.dir() / "reconstruction.csv", recon.str());
    write_text(st.dir() / "correlation.csv", corr.str());
}

void stage_train_classifier(const RunConfig& cfg, const fs::path& root)
{
    Stage st(cfg, root, "classifier");
    const SubjectSet s = load_preprocessed(root);
    for (const auto& f : feature_sets_from_disk(root, s)) {
        for (std::size_t k = 0; k < kMarkerCount; ++k) {
            if (!has_labels(s, k)) continue;
            const MarkerResult r = evaluate_feature_set(s, f, k, cfg.classifier);
            write_text(st.dir() / classifier_file(f.name, k), ensemble_to_json(r.model, f).dump(1) + "\n");
            st.log().info("{} / {}: fitted {} fold models", f.name, kMarkerNames[k], r.model.folds.size());
        }
    }
}

void stage_evaluate(const RunConfig& cfg, const fs::path& root)
{
    Stage st(cfg, root, "evaluate");
    const SubjectSet s = load_preprocessed(root);
    const auto te = s.indices(Split::Test);
    ReportTable table;
    table.baseline = "H" + std::to_string(kHcrCount);
    for (const auto& f : feature_sets_from_disk(root, s)) {
        table.configs.push_back(f.name);
        for (std::size_t k = 0; k < kMarkerCount; ++k) {
            if (!has_labels(s, k)) continue;
            const std::string marker = kMarkerNames[k];
            if (std::find(table.markers.begin(), table.markers.end(), marker) == table.markers.end())
                table.markers.push_back(marker);
            std::vector<std::string> cols;
            const EnsembleModel e = ensemble_from_json(read_json_file(root / "classifier" / classifier_file(f.name, k)), &cols);
            if (cols != f.columns) throw Error("classifier for " + f.name + " was trained on different columns");
            std::vector<std::size_t> rows;
            for (std::size_t i : te)
                if (s.labels[i][k]) rows.push_back(i);
            Eigen::MatrixXd x(rows.size(), f.values.cols());
            Eigen::VectorXd y(rows.size());
            for (std::size_t r = 0; r < rows.size(); ++r) {
                x.row(r) = f.values.row(rows[r]);
                y[r] = *s.labels[rows[r]][k];
            }
            const Eigen::VectorXd scores = e.predict(x);
            AucReport rep{f.name, marker, auc(scores, y), 0, 0, rows.size(), cfg.classifier.n_boot, cfg.classifier.seed};
            const BootstrapResult b = bootstrap_auc(scores, y, cfg.classifier.n_boot, cfg.classifier.seed);
            rep.auc_mean = b.mean;
            rep.auc_std = b.std;
            table.cells.push_back(rep);
            st.log().info("{} / {}: AUC {:.4f} (bootstrap {:.4f} ± {:.4f})", f.name, marker, rep.auc, b.mean, b.std);
            if (std::count(f.is_dlr.begin(), f.is_dlr.end(), true) > 0 &&
                std::count(f.is_dlr.begin(), f.is_dlr.end(), false) > 0) {
                const CoefficientReport cr = coefficient_report(e, f.columns, f.is_dlr);
                write_text(st.dir() / ("curve_" + f.name + "_" + marker + ".csv"), curve_csv(cr));
                write_text(st.dir() / ("ranking_" + f.name + "_" + marker + ".csv"), ranking_csv(cr));
            }
        }
    }
    write_text(st.dir() / "evaluation.csv", to_csv(table));
}

void stage_sweep(const RunConfig& cfg, const fs::path& root, SweepKind kind)
{
    Stage st(cfg, root, "sweep");
    const SubjectSet s = load_preprocessed(root);
    const HcrTable h = load_hcr(root, s);
    const FeatureSet hf = hcr_features(h);
    ReportTable table;
    std::vector<std::pair<std::string, VaeConfig>> points;
    if (kind == SweepKind::Kappa) {
        for (double k : cfg.sweep.kappas) {
            VaeConfig v = cfg.vae;
            v.kappa = k;
            points.emplace_back("kappa=" + fmt_g(k), v);
        }
    } else {
        for (std::size_t l : cfg.sweep.latents) {
            VaeConfig v = cfg.vae;
            v.dlr_dim = l;
            points.emplace_back("latent=" + std::to_string(l), v);
        }
    }
    if (points.empty()) throw Error("sweep has no points");
    for (const auto& [label, vc] : points) {
        st.log().info("sweep point {}", label);
        const TrainResult r = train_vae(s, h, vc);
        const FeatureSet f = combine(hf, dlr_features(extract_dlr(r.model, s.images), "D"), label);
        table.configs.push_back(label);
        for (std::size_t k = 0; k < kMarkerCount; ++k) {
            if (!has_labels(s, k)) continue;
            if (std::find(table.markers.begin(), table.markers.end(), kMarkerNames[k]) == table.markers.end())
                table.markers.emplace_back(kMarkerNames[k]);
            table.cells.push_back(evaluate_feature_set(s, f, k, cfg.classifier).report);
        }
    }
    const std::string name = kind == SweepKind::Kappa ? "sweep_kappa" : "sweep_latent";
    write_text(st.dir() / (name + ".csv"), to_csv(table));
    write_text(st.dir() / (name + ".md"), to_markdown(table));
}

void stage_report(const RunConfig& cfg, const fs::path& root)
{
    Stage st(cfg, root, "report");
    const ReportTable t = load_report_csv(root / "evaluate" / "evaluation.csv", "H" + std::to_string(kHcrCount));
    write_text(st.dir() / "table1.md", to_markdown(t));
    write_text(st.dir() / "table1.csv", to_csv(t));

    // Fig. 4-B data for every combined feature set and marker
    std::ostringstream fig;
    fig << "config,marker,k,count,extreme_hi,extreme_lo\n";
    for (const auto& c : t.configs)
        for (const auto& m : t.markers) {
            const fs::path p = root / "evaluate" / ("curve_" + c + "_" + m + ".csv");
            if (!fs::exists(p)) continue;
            std::ifstream in(p);
            std::string line;
            std::getline(in, line);
            while (std::getline(in, line))
                if (!line.empty()) fig << c << ',' << m << ',' << line << '\n';
        }
    write_text(st.dir() / "fig4b.csv", fig.str());

    const fs::path recon = root / "dlr" / "reconstruction.csv";
    if (fs::exists(recon)) {
        std::ifstream in(recon);
        std::string line;
        std::getline(in, line);
        std::ostringstream md;
        md << "| Model | per-voxel l2 error (test) |\n|---|---|\n";
        while (std::getline(in, line)) {
            const auto c = split_line(line);
            if (c.size() < 3) continue;
            char buf[96];
            std::snprintf(buf, sizeof buf, "%.4f ± %.4f", std::stod(c[1]), std::stod(c[2]));
            md << "| " << c[0] << " | " << buf << " |\n";
        }
        write_text(st.dir() / "table4.md", md.str());
    }
    for (const char* name : {"sweep_kappa", "sweep_latent"}) {
        const fs::path p = root / "sweep" / (std::string(name) + ".csv");
        if (fs::exists(p)) write_text(st.dir() / (std::string(name) + ".md"), to_markdown(load_report_csv(p, "")));
    }
    st.log().info("report written for {} configs x {} markers", t.configs.size(), t.markers.size());
}

void run_all(const RunConfig& cfg, const fs::path& root)
{
    stage_gen_cohort(cfg, root);
    stage_preprocess(cfg, root);
    stage_extract_hcr(cfg, root);
    stage_train_vae(cfg, root);
    stage_extract_dlr(cfg, root);
    stage_train_classifier(cfg, root);
    stage_evaluate(cfg, root);
    stage_report(cfg, root);
}

}  // namespace nrr
