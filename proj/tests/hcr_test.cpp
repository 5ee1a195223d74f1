#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "nrr/hcr.hpp"
#include "nrr/marching_cubes.hpp"
#include "reference_first_order.hpp"
#include "test_util.hpp"

using namespace nrr;

TEST(Shape, SingleVoxelIsDegenerate)
{
    Mask m({3, 3, 3}, {1, 1, 1});
    m(1, 1, 1) = 1;
    ShapeFeatures s = compute_shape_features(m);
    EXPECT_TRUE(s.degenerate);
    EXPECT_EQ(s.major_axis, 0);
    EXPECT_EQ(s.elongation, 0);
    EXPECT_EQ(s.flatness, 0);
    EXPECT_DOUBLE_EQ(s.voxel_volume, 1.0);
    EXPECT_GT(s.mesh_volume, 0);
    EXPECT_THROW(compute_shape_features(Mask({3, 3, 3}, {1, 1, 1})), Error);
}

TEST(Shape, BallElongationAndMonotoneSphericity)
{
    double prev = 0;
    for (double r : {5.0, 10.0, 20.0}) {
        ShapeFeatures s = compute_shape_features(test::ball(r));
        EXPECT_NEAR(s.elongation, 1.0, 0.02);
        EXPECT_NEAR(s.flatness, 1.0, 0.02);
        EXPECT_GT(s.sphericity, prev - 0.01);
        EXPECT_LE(s.sphericity, 1.05);
        EXPECT_NEAR(s.mesh_volume, s.voxel_volume, 0.05 * s.voxel_volume);
        prev = s.sphericity;
    }
}

TEST(Shape, EllipsoidMajorAxis)
{
    ShapeFeatures s = compute_shape_features(test::ellipsoid(20, 10, 5));
    EXPECT_NEAR(s.major_axis, 4 * 20 / std::sqrt(5.0), 0.02 * 4 * 20 / std::sqrt(5.0));
    EXPECT_NEAR(s.minor_axis, 4 * 10 / std::sqrt(5.0), 0.03 * 4 * 10 / std::sqrt(5.0));
    EXPECT_GE(s.major_axis, s.minor_axis);
    EXPECT_GE(s.minor_axis, s.least_axis);
    EXPECT_NEAR(s.max_diam_3d, 40, 1.0);
    EXPECT_NEAR(s.max_diam_axial, 40, 1.0);
    EXPECT_NEAR(s.max_diam_sagittal, 20, 1.0);
}

TEST(Shape, AnisotropicSpacingMatchesIsotropic)
{
    ShapeFeatures iso = compute_shape_features(test::ellipsoid(16, 10, 8, {1, 1, 1}));
    ShapeFeatures an = compute_shape_features(test::ellipsoid(16, 10, 8, {1, 1, 2}));
    EXPECT_NEAR(an.major_axis, iso.major_axis, 0.03 * iso.major_axis);
    EXPECT_NEAR(an.minor_axis, iso.minor_axis, 0.03 * iso.minor_axis);
    EXPECT_NEAR(an.least_axis, iso.least_axis, 0.03 * iso.least_axis);
}

TEST(Shape, CubeSphericity)
{
    ShapeFeatures s = compute_shape_features(test::cube(32));
    const double expect = std::cbrt(36 * std::numbers::pi) / 6;
    EXPECT_NEAR(s.sphericity, expect, 0.02 * expect);
    EXPECT_DOUBLE_EQ(s.voxel_volume, 32.0 * 32 * 32);
}

TEST(MarchingCubes, ClosedSurfaceVolumeMatchesDivergence)
{
    std::mt19937_64 rng(9);
    for (int i = 0; i < 10; ++i) {
        Mask m = test::random_blob({24, 24, 24}, rng);
        MeshMeasures mm = mesh_measures(m);
        EXPECT_GT(mm.volume, 0);
        std::size_t count = 0;
        for (auto v : m.voxels()) count += v;
        if (count >= 1000) EXPECT_NEAR(mm.volume, count, 0.05 * count);
    }
}

TEST(FirstOrder, ConstantRegion)
{
    MaskedVolume mv{Volume({4, 4, 4}, {1, 1, 1}, 2.5f), Mask({4, 4, 4}, {1, 1, 1}, 1)};
    FirstOrderFeatures f = compute_first_order(mv);
    EXPECT_TRUE(f.degenerate);
    EXPECT_DOUBLE_EQ(f.mean, 2.5);
    EXPECT_DOUBLE_EQ(f.median, 2.5);
    EXPECT_EQ(f.variance, 0);
    EXPECT_EQ(f.skewness, 0);
    EXPECT_EQ(f.uniformity, 1);
    EXPECT_EQ(f.entropy, 0);
}

TEST(FirstOrder, HandArithmetic)
{
    MaskedVolume mv{Volume({3, 1, 1}, {1, 1, 2}, std::vector<float>{1, 2, 3}), Mask({3, 1, 1}, {1, 1, 2}, 1)};
    FirstOrderFeatures f = compute_first_order(mv);
    EXPECT_DOUBLE_EQ(f.energy, 14);
    EXPECT_DOUBLE_EQ(f.total_energy, 28);
    EXPECT_DOUBLE_EQ(f.rms, std::sqrt(14.0 / 3));
    EXPECT_DOUBLE_EQ(f.range, 2);
    EXPECT_THROW(compute_first_order({mv.volume, Mask({3, 1, 1}, {1, 1, 2}, 0)}), Error);
}

TEST(FirstOrder, NormalMoments)
{
    std::mt19937_64 rng(123);
    std::normal_distribution<float> n;
    MaskedVolume mv{Volume({100, 100, 1}, {1, 1, 1}), Mask({100, 100, 1}, {1, 1, 1}, 1)};
    for (auto& v : mv.volume.voxels()) v = n(rng);
    FirstOrderFeatures f = compute_first_order(mv);
    EXPECT_NEAR(f.skewness, 0, 0.08);
    EXPECT_NEAR(f.kurtosis, 3, 0.2);
    EXPECT_LE(f.minimum, f.p10);
    EXPECT_LE(f.p10, f.median);
    EXPECT_LE(f.median, f.p90);
    EXPECT_LE(f.p90, f.maximum);
}

TEST(FirstOrder, MatchesNaiveReference)
{
    std::mt19937_64 rng(77);
    for (int i = 0; i < 20; ++i) {
        MaskedVolume mv = test::random_phantom({16, 16, 12}, rng);
        FirstOrderFeatures f = compute_first_order(mv, 0.1);
        test::RefFirstOrder r = test::ref_first_order(mv, 0.1);
        auto near = [](double a, double b) { return std::abs(a - b) <= 1e-5 * std::max(1.0, std::abs(b)); };
        EXPECT_TRUE(near(f.energy, r.energy));
        EXPECT_TRUE(near(f.total_energy, r.total_energy));
        EXPECT_TRUE(near(f.entropy, r.entropy));
        EXPECT_TRUE(near(f.p10, r.p10));
        EXPECT_TRUE(near(f.p90, r.p90));
        EXPECT_TRUE(near(f.median, r.median));
        EXPECT_TRUE(near(f.interquartile_range, r.iqr));
        EXPECT_TRUE(near(f.mad, r.mad));
        EXPECT_TRUE(near(f.rmad, r.rmad));
        EXPECT_TRUE(near(f.rms, r.rms));
        EXPECT_TRUE(near(f.skewness, r.skewness));
        EXPECT_TRUE(near(f.kurtosis, r.kurtosis));
        EXPECT_TRUE(near(f.variance, r.variance));
        EXPECT_TRUE(near(f.uniformity, r.uniformity));
    }
}

TEST(Hcr, TranslationInvariantAndFinite)
{
    std::mt19937_64 rng(5);
    MaskedVolume mv = test::random_phantom({20, 20, 14}, rng);
    HcrVector a = extract_hcr(mv);
    HcrVector b = extract_hcr(translate(mv, {2, -1, 1}));
    for (std::size_t i = 0; i < kHcrCount; ++i) {
        EXPECT_TRUE(std::isfinite(a[i]));
        EXPECT_DOUBLE_EQ(a[i], b[i]) << kHcrNames[i];
    }
}

TEST(Hcr, IntensityScaling)
{
    std::mt19937_64 rng(6);
    MaskedVolume mv = test::random_phantom({20, 20, 14}, rng);
    MaskedVolume m2 = mv;
    for (auto& v : m2.volume.voxels()) v *= 2;
    ShapeFeatures s1 = compute_shape_features(mv.mask), s2 = compute_shape_features(m2.mask);
    EXPECT_EQ(s1.sphericity, s2.sphericity);
    FirstOrderFeatures f1 = compute_first_order(mv), f2 = compute_first_order(m2);
    EXPECT_NEAR(f2.energy, 4 * f1.energy, 1e-9 * f2.energy);
    EXPECT_NEAR(f2.mean, 2 * f1.mean, 1e-9);
}

TEST(Scaler, TwoPointAndZeroMeans)
{
    std::vector<HcrVector> rows(2);
    for (std::size_t k = 0; k < kHcrCount; ++k) {
        rows[0][k] = 0;
        rows[1][k] = 2 + k;
    }
    HcrScaler s = fit_scaler(rows);
    EXPECT_DOUBLE_EQ(s.apply(rows[0])[0], -1);
    EXPECT_DOUBLE_EQ(s.apply(rows[1])[0], 1);

    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(5, 3);
    std::vector<HcrVector> x(40);
    for (auto& r : x)
        for (auto& v : r) v = n(rng);
    s = fit_scaler(std::span(x).first(30));
    HcrScaler full = fit_scaler(x);
    for (std::size_t k = 0; k < kHcrCount; ++k) {
        double m = 0, q = 0;
        for (const auto& r : x) m += full.apply(r)[k];
        for (const auto& r : x) q += full.apply(r)[k] * full.apply(r)[k];
        EXPECT_LT(std::abs(m / 40), 1e-9);
        EXPECT_NEAR(std::sqrt(q / 40), 1, 1e-9);
        for (std::size_t i = 30; i < 40; ++i) EXPECT_TRUE(std::isfinite(s.apply(x[i])[k]));
    }
}

TEST(Scaler, ConstantColumnNamed)
{
    std::vector<HcrVector> x(3);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < kHcrCount; ++k) x[i][k] = (k == 4) ? 1.0 : double(i * k);
    x[0][0] = 3;
    try {
        fit_scaler(x);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find(kHcrNames[4]), std::string::npos);
    }
    HcrScaler s = fit_scaler(x, true);
    EXPECT_EQ(s.apply(x[1])[4], 0.0);
    EXPECT_THROW(fit_scaler(std::span(x).first(1)), Error);
}
