#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "mi_calibration.hpp"
#include "nrr/mi.hpp"

using namespace nrr;

namespace {

Eigen::MatrixXd gaussian(std::size_t n, std::size_t cols, std::mt19937_64& rng)
{
    std::normal_distribution<double> g;
    Eigen::MatrixXd m(n, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
    return m;
}

}  // namespace

TEST(Derangement, SizeTwoIsSwap)
{
    std::mt19937_64 rng(1);
    for (int i = 0; i < 20; ++i) {
        auto p = random_derangement(2, rng);
        EXPECT_EQ(p[0], 1u);
        EXPECT_EQ(p[1], 0u);
    }
    EXPECT_THROW(random_derangement(1, rng), Error);
}

TEST(Derangement, NoFixedPointsOver1000Builds)
{
    std::mt19937_64 rng(2);
    Eigen::MatrixXd h = gaussian(17, 3, rng), d = gaussian(17, 2, rng);
    for (int b = 0; b < 1000; ++b) {
        MiBatch batch = build_mi_batch(h, d, rng);
        ASSERT_EQ(batch.joint.rows(), batch.product.rows());
        std::set<std::size_t> seen(batch.perm.begin(), batch.perm.end());
        ASSERT_EQ(seen.size(), 17u);
        for (std::size_t k = 0; k < 17; ++k) {
            ASSERT_NE(batch.perm[k], k);
            ASSERT_EQ(batch.product.row(k).head(3), h.row(k));
            ASSERT_EQ(batch.product.row(k).tail(2), d.row(batch.perm[k]));
        }
    }
    MiBatch batch = build_mi_batch(h, d, rng);
    for (Eigen::Index k = 0; k < 17; ++k) {
        EXPECT_EQ(batch.joint.row(k).head(3), h.row(k));
        EXPECT_EQ(batch.joint.row(k).tail(2), d.row(k));
    }
    EXPECT_THROW(build_mi_batch(h.topRows(1), d.topRows(1), rng), Error);
}

TEST(MiEstimate, ConstantDiscriminatorValues)
{
    auto logits = [](double p, std::size_t n) {
        return ad::constant(ad::Tensor({n, 1}, static_cast<ad::Scalar>(std::log(p / (1 - p)))));
    };
    EXPECT_NEAR(mi_estimate(logits(0.5, 4)).item(), 0.0, 1e-7);
    EXPECT_NEAR(mi_estimate(logits(0.9, 4)).item(), std::log(9.0), 1e-5);
    EXPECT_EQ(mi_estimate(logits(0.2, 4)).item(), 0.0f);
    // clamped at 1 - 1e-6
    ad::Var big = ad::constant(ad::Tensor({2, 1}, 50.0f));
    EXPECT_NEAR(mi_estimate(big).item(), std::log((1 - kProbClamp) / kProbClamp), 1e-4);
}

TEST(Discriminator, NonNegativeEstimateAndOutputRange)
{
    std::mt19937_64 rng(3);
    for (int s = 0; s < 10; ++s) {
        Discriminator disc(4, 16, rng);
        Eigen::MatrixXd x = gaussian(50, 4, rng) * 5;
        EXPECT_GE(mi_estimate(x, disc), 0.0);
        Eigen::VectorXd p = disc.probabilities(x);
        EXPECT_TRUE((p.array() > 0).all() && (p.array() < 1).all());
    }
}

TEST(Discriminator, ZeroEpochsLeavesParameters)
{
    std::mt19937_64 rng(4);
    Discriminator disc(4, 8, rng);
    ad::Adam adam(disc.params());
    auto before = disc.params().snapshot();
    Eigen::MatrixXd h = gaussian(20, 2, rng), d = gaussian(20, 2, rng);
    train_discriminator(build_mi_batch(h, d, rng), disc, adam, 0);
    EXPECT_EQ(disc.params().snapshot(), before);
}

TEST(Discriminator, IndependentDataStaysAtChance)
{
    std::mt19937_64 rng(5);
    Eigen::MatrixXd h = gaussian(2000, 1, rng), d = gaussian(2000, 1, rng);
    Discriminator disc(2, 32, rng);
    ad::Adam adam(disc.params());
    train_discriminator(disc, adam, 150, [&] { return build_mi_batch(h, d, rng); });
    Eigen::MatrixXd h2 = gaussian(2000, 1, rng), d2 = gaussian(2000, 1, rng);
    EXPECT_NEAR(evaluate_discriminator(build_mi_batch(h2, d2, rng), disc).accuracy, 0.5, 0.05);
}

TEST(Discriminator, SeparableToyData)
{
    std::mt19937_64 rng(6);
    // joint rows have d = h, product rows pair mismatched signs half the time
    std::uniform_real_distribution<double> u(0.5, 1.5);
    std::bernoulli_distribution sign(0.5);
    MiBatch batch;
    const std::size_t n = 200;
    batch.joint.resize(n, 2);
    batch.product.resize(n, 2);
    for (std::size_t i = 0; i < n; ++i) {
        const double a = sign(rng) ? u(rng) : -u(rng);
        batch.joint.row(i) << a, a;
        batch.product.row(i) << a, -a;
    }
    Discriminator disc(2, 16, rng);
    ad::Adam adam(disc.params(), {1e-2});
    auto bce = train_discriminator(batch, disc, adam, 150);
    EXPECT_LT(bce.back(), bce.front());
    EXPECT_GT(evaluate_discriminator(batch, disc).accuracy, 0.95);
}

TEST(Calibration, BivariateGaussians)
{
    for (std::uint64_t seed : {1, 2, 3}) {
        const double zero = test::calibrated_mi(0.0, seed), half = test::calibrated_mi(0.5, seed),
                     high = test::calibrated_mi(0.9, seed);
        EXPECT_LT(zero, 0.05) << seed;
        EXPECT_GE(high, 0.5) << seed;
        EXPECT_LE(high, 1.1) << seed;
        EXPECT_LT(zero, half) << seed;
        EXPECT_LT(half, high) << seed;
    }
    EXPECT_NEAR(test::analytic_mi(0.9), 0.830, 1e-3);
}
