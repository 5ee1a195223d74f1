#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include <Eigen/Core>

#include "nrr/optim.hpp"
#include "nrr/tensor.hpp"

namespace nrr {

/// Samples for the density-ratio discriminator. Joint rows pair h_i with
/// d_i; product rows pair h_k with d_j where j = perm[k] != k.
struct MiBatch {
    Eigen::MatrixXd joint;
    Eigen::MatrixXd product;
    std::vector<std::size_t> perm;

    std::size_t rows() const { return static_cast<std::size_t>(joint.rows()); }
};

/// Uniformly random permutation of 0..n-1 with no fixed points (n >= 2).
std::vector<std::size_t> random_derangement(std::size_t n, std::mt19937_64& rng);

MiBatch build_mi_batch(const Eigen::MatrixXd& h, const Eigen::MatrixXd& d, std::mt19937_64& rng);

/// Two-layer perceptron D([h,d]) = sigmoid(W2 relu(W1 [h,d] + b1) + b2).
class Discriminator {
public:
    Discriminator() = default;
    Discriminator(std::size_t input_dim, std::size_t hidden, std::mt19937_64& rng);

    /// Pre-sigmoid outputs for rows of x [N, input_dim]; shape [N, 1].
    ad::Var logits(const ad::Var& x) const;
    Eigen::VectorXd probabilities(const Eigen::MatrixXd& x) const;

    std::size_t input_dim() const noexcept { return input_dim_; }
    std::size_t hidden() const noexcept { return hidden_; }
    ad::ParamSet& params() noexcept { return params_; }
    const ad::ParamSet& params() const noexcept { return params_; }

private:
    std::size_t input_dim_ = 0;
    std::size_t hidden_ = 0;
    ad::ParamSet params_;
};

/// D is clamped to [kProbClamp, 1 - kProbClamp] before taking its logit.
inline constexpr double kProbClamp = 1e-6;

/// Mean over rows of ReLU(log(D / (1 - D))); graph form for the VAE loss.
ad::Var mi_estimate(const ad::Var& joint_logits);
/// Same estimate evaluated on joint rows without building a gradient path.
double mi_estimate(const Eigen::MatrixXd& joint, const Discriminator& disc);

struct DiscriminatorStats {
    double bce = 0.0;
    double accuracy = 0.0;
};

DiscriminatorStats evaluate_discriminator(const MiBatch& batch, const Discriminator& disc);

/// Minimises the binary cross-entropy of joint (label 1) vs product (label 0)
/// rows for `epochs` epochs. `next_batch` is called once per epoch; with
/// `minibatch` = 0 each epoch is a single full-batch step. Returns per-epoch
/// BCE (measured before the epoch's update).
std::vector<double> train_discriminator(Discriminator& disc, ad::Adam& adam, std::size_t epochs,
                                        const std::function<MiBatch()>& next_batch, std::size_t minibatch = 0,
                                        std::mt19937_64* shuffle_rng = nullptr);

/// Convenience overload that reuses one batch every epoch.
std::vector<double> train_discriminator(const MiBatch& batch, Discriminator& disc, ad::Adam& adam, std::size_t epochs);

ad::Tensor to_tensor(const Eigen::MatrixXd& m);
Eigen::MatrixXd to_matrix(const ad::Tensor& t);

}  // namespace nrr
