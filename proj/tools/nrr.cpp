// nrr: stage-by-stage driver for the radiomics pipeline.
#include <cstdio>
#include <exception>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nrr/pipeline.hpp"

namespace {

struct GlobalOpts {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "runs";
    std::optional<std::size_t> threads;
};

nrr::RunConfig resolve(const GlobalOpts& g)
{
    nrr::RunConfig cfg = g.config.empty() ? nrr::RunConfig{} : nrr::load_run_config(g.config);
    if (g.seed) cfg.seed = *g.seed;
    if (g.threads) cfg.threads = *g.threads;
    cfg.resolve();
    return cfg;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Radiomics pipeline: synthetic cohort, HCR/DLR features, VAE training and marker evaluation"};
    app.require_subcommand(1);
    GlobalOpts g;
    app.add_option("--config", g.config, "run configuration (JSON)")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "master seed, overrides the config");
    app.add_option("--out", g.out, "output root directory")->capture_default_str();
    app.add_option("--threads", g.threads, "worker threads")->check(CLI::PositiveNumber);
    app.fallthrough();
    app.footer("Log verbosity: NRR_LOG_LEVEL=trace|debug|info|warn|error|off");

    using Stage = void (*)(const nrr::RunConfig&, const std::filesystem::path&);
    std::vector<std::pair<CLI::App*, Stage>> stages;
    auto add = [&](const char* name, const char* help, Stage fn) {
        stages.emplace_back(app.add_subcommand(name, help), fn);
    };
    add("gen-cohort", "generate the synthetic phantom cohort", nrr::stage_gen_cohort);
    add("preprocess", "resample, center, clip and standardize", nrr::stage_preprocess);
    add("extract-hcr", "compute the 32 hand-crafted features", nrr::stage_extract_hcr);
    add("train-vae", "train the plain and MI-regularized VAEs", nrr::stage_train_vae);
    add("extract-dlr", "encode subjects and measure reconstruction error", nrr::stage_extract_dlr);
    add("train-classifier", "fit 4-fold logistic ensembles per feature set and marker", nrr::stage_train_classifier);
    add("evaluate", "test-set AUC with bootstrap, coefficient curves", nrr::stage_evaluate);
    add("report", "render tables and curve data", nrr::stage_report);
    add("run-all", "gen-cohort through report", nrr::run_all);

    auto* sweep = app.add_subcommand("sweep", "retrain the VAE over a kappa or latent-size grid");
    std::vector<double> kappas;
    std::vector<std::size_t> latents;
    auto* ko = sweep->add_option("--kappa", kappas, "kappa values")->delimiter(',');
    auto* lo = sweep->add_option("--latent", latents, "latent sizes")->delimiter(',');
    ko->excludes(lo);
    sweep->require_option(1);

    CLI11_PARSE(app, argc, argv);

    try {
        nrr::RunConfig cfg = resolve(g);
        if (sweep->parsed()) {
            if (ko->count()) cfg.sweep.kappas = kappas;
            if (lo->count()) cfg.sweep.latents = latents;
            nrr::stage_sweep(cfg, g.out, ko->count() ? nrr::SweepKind::Kappa : nrr::SweepKind::Latent);
            return 0;
        }
        for (auto& [sub, fn] : stages)
            if (sub->parsed()) fn(cfg, g.out);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "nrr: error: %s\n", e.what());
        return 1;
    }
    return 0;
}
