#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>
#include <random>

#include "nrr/bundle_io.hpp"
#include "nrr/volume.hpp"
#include "test_util.hpp"

using namespace nrr;

namespace {

std::filesystem::path tmp_dir(const std::string& name)
{
    auto p = std::filesystem::temp_directory_path() / ("nrr_volume_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace

TEST(BundleIo, TinyRoundTripKeepsOrder)
{
    auto dir = tmp_dir("tiny");
    Volume v({2, 2, 1}, {1, 1, 2}, std::vector<float>{1, 2, 3, 4});
    save_volume(dir / "v.json", v);
    Volume back = load_volume(dir / "v.json");
    EXPECT_EQ(back, v);
    EXPECT_EQ(back(1, 0, 0), 2.0f);
    EXPECT_EQ(back(0, 1, 0), 3.0f);
}

TEST(BundleIo, SizeMismatchIsRejected)
{
    auto dir = tmp_dir("mismatch");
    Volume v({2, 2, 1}, {1, 1, 1}, std::vector<float>{1, 2, 3, 4});
    save_volume(dir / "v.json", v);
    auto j = nlohmann::json::parse(std::ifstream(dir / "v.json"));
    j["dims"] = {2, 2, 2};
    std::ofstream(dir / "v.json") << j.dump();
    EXPECT_THROW(load_volume(dir / "v.json"), IoError);
}

TEST(BundleIo, MissingFileAndNonFinite)
{
    auto dir = tmp_dir("missing");
    EXPECT_THROW(load_volume(dir / "nope.json"), IoError);
    Volume v({1, 1, 1}, {1, 1, 1}, std::vector<float>{1});
    save_volume(dir / "v.json", v);
    const float nan = std::numeric_limits<float>::quiet_NaN();
    std::ofstream(dir / "v.raw", std::ios::binary).write(reinterpret_cast<const char*>(&nan), 4);
    EXPECT_THROW(load_volume(dir / "v.json"), IoError);
}

TEST(BundleIo, RandomRoundTripsAreBitExact)
{
    auto dir = tmp_dir("random");
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<std::size_t> d(1, 6);
    std::normal_distribution<float> n(0, 100);
    for (int i = 0; i < 100; ++i) {
        Volume v({d(rng), d(rng), d(rng)}, {0.5 + i * 0.01, 1.0, 2.0});
        for (auto& x : v.voxels()) x = n(rng);
        save_volume(dir / "v.json", v);
        ASSERT_EQ(load_volume(dir / "v.json"), v);
        Mask m(v.dims(), v.spacing());
        for (auto& x : m.voxels()) x = rng() & 1;
        save_mask(dir / "m.json", m);
        ASSERT_EQ(load_mask(dir / "m.json"), m);
    }
}

TEST(BundleIo, ManifestRoundTrip)
{
    auto dir = tmp_dir("manifest");
    CohortManifest m;
    SubjectRecord s;
    s.id = "s0";
    s.volume = "s0_vol.json";
    s.mask = "s0_mask.json";
    s.labels = {1, 0, std::nullopt, 1};
    s.split = Split::Test;
    m.subjects.push_back(s);
    save_manifest(dir / "manifest.json", m);
    CohortManifest back = load_manifest(dir / "manifest.json");
    ASSERT_EQ(back.subjects.size(), 1u);
    EXPECT_EQ(back.subjects[0].labels, s.labels);
    EXPECT_EQ(back.subjects[0].split, Split::Test);
    EXPECT_EQ(back.volume_path(back.subjects[0]), dir / "s0_vol.json");
}

TEST(Resample, IdenticalSpacingIsBitExact)
{
    std::mt19937_64 rng(1);
    Volume v({5, 4, 3}, {1, 1, 2});
    std::normal_distribution<float> n;
    for (auto& x : v.voxels()) x = n(rng);
    EXPECT_EQ(resample(v, {1, 1, 2}), v);
}

TEST(Resample, ConstantStaysConstant)
{
    Volume v({7, 5, 3}, {0.7, 1.3, 2.5}, 4.25f);
    for (auto mode : {Interpolation::Trilinear, Interpolation::Nearest}) {
        Volume r = resample(v, {1, 1, 2}, mode);
        for (float x : r.voxels()) EXPECT_FLOAT_EQ(x, 4.25f);
    }
}

TEST(Resample, RampHalvedSpacingMatchesAnalytic)
{
    Volume v({10, 2, 2}, {2, 1, 1});
    for (std::size_t z = 0; z < 2; ++z)
        for (std::size_t y = 0; y < 2; ++y)
            for (std::size_t x = 0; x < 10; ++x) v(x, y, z) = static_cast<float>(3.0 * x * 2.0 + 1.0);
    Volume r = resample(v, {1, 1, 1});
    EXPECT_EQ(r.dims(), (Dims{20, 2, 2}));
    for (std::size_t x = 0; x < 19; ++x) EXPECT_NEAR(r(x, 1, 1), 3.0 * x + 1.0, 1e-6 * (3.0 * x + 1.0) + 1e-6);
    // past the last source voxel the edge value is held
    EXPECT_NEAR(r(19, 0, 0), v(9, 0, 0), 1e-6);
}

TEST(Resample, DimsAndExtent)
{
    Volume v({10, 11, 7}, {0.8, 0.8, 3.0});
    Volume r = resample(v, {1, 1, 2});
    EXPECT_EQ(r.dims(), (Dims{8, 9, 11}));
    for (int a = 0; a < 3; ++a) {
        EXPECT_NEAR(r.dims()[a] * r.spacing()[a], v.dims()[a] * v.spacing()[a], r.spacing()[a]);
    }
    EXPECT_THROW(resample(v, {1, 0, 2}), Error);
}

TEST(Resample, MaskStaysBinary)
{
    std::mt19937_64 rng(3);
    Mask m = test::random_blob({20, 20, 10}, rng);
    Mask r = resample(m, {0.7, 1.3, 2.0});
    for (auto x : r.voxels()) EXPECT_TRUE(x == 0 || x == 1);
}

TEST(Center, SingleVoxelLandsAtCenter)
{
    Dims grid{9, 6, 5};
    for (std::size_t x : {0u, 3u, 9u}) {
        MaskedVolume mv{Volume({12, 8, 4}, {1, 1, 1}), Mask({12, 8, 4}, {1, 1, 1})};
        mv.mask(x, 5, 2) = 1;
        mv.volume(x, 5, 2) = 7.0f;
        MaskedVolume c = center_on_grid(mv, grid);
        EXPECT_EQ(c.mask.dims(), grid);
        EXPECT_EQ(c.mask(4, 3, 2), 1);
        EXPECT_EQ(c.volume(4, 3, 2), 7.0f);
        EXPECT_EQ(c.foreground_count(), 1u);
    }
}

TEST(Center, AlreadyCenteredIsUnchanged)
{
    MaskedVolume mv{Volume({9, 7, 5}, {1, 1, 2}, 1.5f), Mask({9, 7, 5}, {1, 1, 2})};
    mv.mask(4, 3, 2) = 1;
    mv.mask(3, 3, 2) = 1;
    mv.mask(5, 3, 2) = 1;
    EXPECT_EQ(center_on_grid(mv, {9, 7, 5}, 1.5f), mv);
}

TEST(Center, RandomBlobsKeepCount)
{
    std::mt19937_64 rng(11);
    for (int i = 0; i < 50; ++i) {
        MaskedVolume mv = test::random_phantom({20, 18, 14}, rng);
        MaskedVolume c = center_on_grid(mv, {24, 16, 16});
        EXPECT_EQ(c.foreground_count(), mv.foreground_count());
    }
}

TEST(Center, TooLargeNamesAxis)
{
    MaskedVolume mv{Volume({10, 3, 3}, {1, 1, 1}), Mask({10, 3, 3}, {1, 1, 1}, 1)};
    try {
        center_on_grid(mv, {8, 8, 8});
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("x"), std::string::npos);
    }
}

TEST(IntensityStats, Extremes)
{
    Volume v({101, 1, 1}, {1, 1, 1});
    for (std::size_t i = 0; i < 101; ++i) v[i] = static_cast<float>(i);
    std::vector<MaskedVolume> c{{v, Mask(v.dims(), v.spacing(), 1)}};
    IntensityStats s = fit_intensity_stats(c, 0, 100);
    EXPECT_EQ(s.p_low, 0);
    EXPECT_EQ(s.p_high, 100);
    EXPECT_NEAR(s.mean, 50, 1e-12);
}

TEST(IntensityStats, ConstantPoolThrows)
{
    std::vector<MaskedVolume> c{{Volume({4, 4, 1}, {1, 1, 1}, 2.0f), Mask({4, 4, 1}, {1, 1, 1}, 1)}};
    EXPECT_THROW(fit_intensity_stats(c), Error);
    std::vector<MaskedVolume> e{{Volume({4, 4, 1}, {1, 1, 1}, 2.0f), Mask({4, 4, 1}, {1, 1, 1}, 0)}};
    EXPECT_THROW(fit_intensity_stats(e), Error);
}

TEST(IntensityStats, UniformPercentilesAgainstSort)
{
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<float> u(0, 1);
    Volume v({100, 100, 1}, {1, 1, 1});
    for (auto& x : v.voxels()) x = u(rng);
    std::vector<MaskedVolume> c{{v, Mask(v.dims(), v.spacing(), 1)}};
    IntensityStats s = fit_intensity_stats(c);
    EXPECT_NEAR(s.p_low, 0.005, 0.01);
    EXPECT_NEAR(s.p_high, 0.995, 0.01);
    std::vector<double> sorted(v.voxels().begin(), v.voxels().end());
    std::sort(sorted.begin(), sorted.end());
    const double rank = 0.005 * (sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(rank);
    EXPECT_NEAR(s.p_low, sorted[lo] + (rank - lo) * (sorted[lo + 1] - sorted[lo]), 1e-12);
}

TEST(Standardize, DefinitionAndBounds)
{
    IntensityStats s{-1.0, 3.0, 1.0, 2.0};
    Volume v({4, 1, 1}, {1, 1, 1}, std::vector<float>{1.0f, 10.0f, -5.0f, 8.0f});
    Mask m({4, 1, 1}, {1, 1, 1}, std::vector<std::uint8_t>{1, 1, 1, 0});
    MaskedVolume out = clip_and_standardize({v, m}, s);
    EXPECT_EQ(out.volume[0], 0.0f);
    EXPECT_FLOAT_EQ(out.volume[1], 1.0f);
    EXPECT_FLOAT_EQ(out.volume[2], -1.0f);
    EXPECT_EQ(out.volume[3], 0.0f);
}

TEST(Standardize, CommutesWithCentering)
{
    std::mt19937_64 rng(2);
    MaskedVolume mv = test::random_phantom({20, 18, 14}, rng);
    std::vector<MaskedVolume> c{mv};
    IntensityStats s = fit_intensity_stats(c);
    MaskedVolume a = center_on_grid(clip_and_standardize(mv, s), {24, 16, 16});
    MaskedVolume b = clip_and_standardize(center_on_grid(mv, {24, 16, 16}), s);
    EXPECT_EQ(a, b);
}

TEST(Augment, TranslateAndRotate)
{
    std::mt19937_64 rng(4);
    MaskedVolume mv = test::random_phantom({20, 20, 8}, rng);
    MaskedVolume t = translate(mv, {1, -2, 0});
    EXPECT_EQ(t.volume(11, 8, 3), mv.volume(10, 10, 3));
    MaskedVolume r0 = rotate_axial(mv, 0.0);
    EXPECT_EQ(r0.mask, mv.mask);
    MaskedVolume r = rotate_axial(mv, 10.0);
    for (std::size_t i = 0; i < r.volume.size(); ++i)
        if (!r.mask[i]) EXPECT_EQ(r.volume[i], 0.0f);
}
