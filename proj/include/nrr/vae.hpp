#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "nrr/hcr.hpp"
#include "nrr/mi.hpp"
#include "nrr/optim.hpp"
#include "nrr/volume.hpp"

namespace nrr {

enum class EncoderFamily { Conv3d, FullyConnected };

struct AugmentConfig {
    double rotation_deg = 10.0;     // uniform in [-r, r] about the z axis
    std::size_t jitter_voxels = 4;  // uniform integer shift per axis
};

/// What the discriminator sees as d: posterior samples, or the posterior mean
/// standardized per column (over the batch, or the cohort in a discriminator phase).
enum class MiInput { Sample, Mean };

struct VaeConfig {
    Dims grid{24, 16, 8};
    std::size_t hcr_dim = kHcrCount;
    std::size_t dlr_dim = 32;
    double sigma_obs = 1.0;
    double kappa = 1.0;
    std::size_t vae_epochs = 200;
    std::size_t vae_batch = 32;
    std::size_t disc_period = 5;
    std::size_t disc_epochs = 150;
    std::size_t disc_batch = 0;  // 0: the whole training set per step
    std::size_t disc_hidden = 128;
    std::size_t disc_views = 4;  // augmented encodings per subject in a discriminator phase
    MiInput mi_input = MiInput::Mean;
    double mi_noise = 0.1;  // std of the noise added to standardized means (MiInput::Mean)
    double lr = 1e-3;
    double disc_lr = 1e-3;
    EncoderFamily family = EncoderFamily::Conv3d;
    std::size_t base_channels = 8;
    std::size_t max_bottleneck = 1024;
    std::size_t fc_pool = 2;
    std::size_t fc_hidden = 256;
    AugmentConfig augment;
    std::uint64_t seed = 0;

    void validate() const;
};

void to_json(nlohmann::json& j, const VaeConfig& c);
/// Strict: unknown keys are rejected; missing keys keep their defaults.
void from_json(const nlohmann::json& j, VaeConfig& c);

/// Gaussian posterior q(d | x*) = N(mu, diag(sigma^2)).
struct LatentPosterior {
    std::vector<double> mu;
    std::vector<double> sigma;
};

/// Encoder, decoder and discriminator parameters plus the derived topology.
class VaeModel {
public:
    explicit VaeModel(VaeConfig cfg);

    const VaeConfig& config() const noexcept { return cfg_; }
    ad::ParamSet& encoder() noexcept { return enc_; }
    ad::ParamSet& decoder() noexcept { return dec_; }
    const ad::ParamSet& encoder() const noexcept { return enc_; }
    const ad::ParamSet& decoder() const noexcept { return dec_; }
    Discriminator& discriminator() noexcept { return disc_; }
    const Discriminator& discriminator() const noexcept { return disc_; }

    struct EncoderOutput {
        ad::Var mu;         // [N, dlr_dim]
        ad::Var log_sigma;  // [N, dlr_dim]
    };

    /// x: [N, 1, nz, ny, nx] masked, standardized volumes.
    EncoderOutput encode(const ad::Var& x) const;
    /// h: [N, hcr_dim], d: [N, dlr_dim] -> [N, 1, nz, ny, nx].
    ad::Var decode(const ad::Var& h, const ad::Var& d) const;

    /// Spatial shapes ([C, D, H, W]) from the input grid down to the bottleneck.
    const std::vector<ad::Shape>& levels() const noexcept { return levels_; }
    std::size_t bottleneck_units() const;

    ad::Checkpoint to_checkpoint(const nlohmann::json& schedule_state = nlohmann::json::object()) const;
    static VaeModel from_checkpoint(const ad::Checkpoint& ckpt);

private:
    VaeConfig cfg_;
    ad::ParamSet enc_;
    ad::ParamSet dec_;
    Discriminator disc_;
    std::vector<ad::Shape> levels_;
};

/// [N, 1, nz, ny, nx] tensors of intensities and masks.
ad::Tensor volume_batch(std::span<const MaskedVolume* const> items);
ad::Tensor mask_batch(std::span<const MaskedVolume* const> items);
ad::Tensor hcr_batch(std::span<const HcrVector* const> items);

LatentPosterior encode(const MaskedVolume& x, const VaeModel& model);
Volume decode(const HcrVector& h, std::span<const double> d, const VaeModel& model);

struct ElboTerms {
    ad::Var nll;  // summed over the batch
    ad::Var kl;   // summed over the batch
};

/// Gaussian negative log-likelihood over in-mask voxels plus the closed-form
/// KL of N(mu, sigma^2) against N(0, I), both summed over the batch.
ElboTerms elbo_terms(const ad::Var& x, const ad::Tensor& mask, const ad::Var& recon, const ad::Var& mu,
                     const ad::Var& log_sigma, double sigma_obs);

struct ElboValue {
    double nll = 0;
    double kl = 0;
    double total = 0;
};

/// Single-subject ELBO evaluated with a given noise draw eps (d = mu + sigma*eps).
ElboValue elbo_loss(const MaskedVolume& x, const HcrVector& h, const LatentPosterior& posterior,
                    std::span<const double> eps, const VaeModel& model);

/// KL[N(mu, sigma^2) | N(0, I)] summed over dimensions.
double kl_divergence(std::span<const double> mu, std::span<const double> sigma);

struct TraceRow {
    std::size_t epoch = 0;
    double nll = 0;
    double kl = 0;
    double mi = 0;
    double total = 0;
};

enum class Phase { Vae, Discriminator };

struct ScheduleEvent {
    Phase phase = Phase::Vae;
    std::size_t vae_epoch = 0;    // VAE epoch just run, or after which the discriminator ran
    std::size_t disc_epochs = 0;  // discriminator epochs run in this phase
};

struct TrainHooks {
    /// Called before (begin = true) and after every phase.
    std::function<void(const ScheduleEvent&, const VaeModel&, bool begin)> on_phase;
};

struct TrainResult {
    VaeModel model;
    std::vector<TraceRow> trace;
    std::vector<ScheduleEvent> schedule;
};

class TrainingDiverged : public Error {
public:
    using Error::Error;
};

/// Alternating optimisation: VAE epochs minimise ELBO + kappa * MI with the
/// discriminator frozen; after every `disc_period` VAE epochs the encoder is
/// frozen and the discriminator trains for `disc_epochs` on fresh
/// joint/product batches of the whole cohort.
TrainResult train(std::span<const MaskedVolume> cohort, std::span<const HcrVector> hcr_scaled, const VaeConfig& cfg,
                  const TrainHooks& hooks = {});

/// Row i = posterior mean of subject i.
Eigen::MatrixXd extract_dlr(const VaeModel& model, std::span<const MaskedVolume> cohort);

struct ReconstructionError {
    double mean = 0;
    double std = 0;
    std::vector<double> per_subject;
};

/// Mean in-mask squared error per subject, then mean and population std
/// across subjects.
ReconstructionError reconstruction_error(std::span<const MaskedVolume> cohort,
                                         const std::function<Volume(std::size_t)>& reconstruct);
ReconstructionError reconstruction_error(const VaeModel& model, std::span<const MaskedVolume> cohort,
                                         std::span<const HcrVector> hcr_scaled);

MaskedVolume augment(const MaskedVolume& mv, const AugmentConfig& cfg, std::mt19937_64& rng);

}  // namespace nrr
