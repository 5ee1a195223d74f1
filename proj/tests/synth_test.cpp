#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "nrr/hcr.hpp"
#include "nrr/synth.hpp"

using namespace nrr;

namespace {

double in_mask_mean(const MaskedVolume& mv)
{
    double s = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < mv.volume.size(); ++i)
        if (mv.mask[i]) {
            s += mv.volume[i];
            ++n;
        }
    return s / n;
}

std::string slurp(const std::filesystem::path& p)
{
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

double cohens_d(const std::vector<double>& a, const std::vector<double>& b)
{
    auto stats = [](const std::vector<double>& v) {
        double m = 0, s = 0;
        for (double x : v) m += x;
        m /= v.size();
        for (double x : v) s += (x - m) * (x - m);
        return std::pair{m, s / (v.size() - 1)};
    };
    auto [ma, va] = stats(a);
    auto [mb, vb] = stats(b);
    return std::abs(ma - mb) / std::sqrt(0.5 * (va + vb));
}

}  // namespace

TEST(Phantom, AtrophyTwinVolumeRatio)
{
    CohortSpec spec;
    for (std::size_t i = 0; i < 10; ++i) {
        PhantomParams p = subject_params(spec, i);
        p.flags = {false, false, false, false};
        PhantomParams q = p;
        q.flags[1] = true;
        const double ratio = double(phantom(q).image.foreground_count()) / phantom(p).image.foreground_count();
        EXPECT_GE(ratio, 0.65);
        EXPECT_LE(ratio, 0.75);
    }
}

TEST(Phantom, FatLowersMeanInBothModes)
{
    CohortSpec spec;
    for (auto mode : {FatMode::Normal, FatMode::Hard}) {
        PhantomParams p = subject_params(spec, 3);
        p.effects.fat_mode = mode;
        p.flags = {false, false, false, false};
        PhantomParams q = p;
        q.flags[2] = true;
        EXPECT_LT(in_mask_mean(phantom(q).image), in_mask_mean(phantom(p).image));
        EXPECT_EQ(phantom(q).labels[2], 1);
    }
}

TEST(Phantom, HardFatKeepsHistogram)
{
    CohortSpec spec;
    PhantomParams p = subject_params(spec, 5);
    p.effects.fat_mode = FatMode::Hard;
    p.effects.hard_mean_shift = 0;
    p.flags = {false, false, false, false};
    p.inclusion_contrast = 0;
    PhantomParams q = p;
    q.flags[2] = true;
    const FirstOrderFeatures a = compute_first_order(phantom(p).image), b = compute_first_order(phantom(q).image);
    EXPECT_EQ(a.mean, b.mean);
    EXPECT_EQ(a.variance, b.variance);
    EXPECT_EQ(a.entropy, b.entropy);
    EXPECT_EQ(a.kurtosis, b.kurtosis);
    EXPECT_NE(phantom(p).image.volume, phantom(q).image.volume);
}

TEST(Phantom, DeterministicAndValidated)
{
    CohortSpec spec;
    PhantomParams p = subject_params(spec, 1);
    EXPECT_EQ(phantom(p).image, phantom(p).image);
    p.semi_axes = {0.1, 0.1, 0.1};
    p.offset_mm = {100, 0, 0};
    EXPECT_THROW(phantom(p), Error);
    p.semi_axes = {-1, 1, 1};
    EXPECT_THROW(phantom(p), Error);
}

TEST(Phantom, MarkerEffectSizes)
{
    CohortSpec spec;
    std::vector<double> vol_on, vol_off, mean_on, mean_off, sph_on, sph_off;
    for (std::size_t i = 0; i < 32; ++i) {
        PhantomParams p = subject_params(spec, i);
        p.flags = {false, false, false, false};
        const bool on = i % 2;
        PhantomParams a = p, f = p, s = p;
        a.flags[1] = on;
        f.flags[2] = on;
        s.flags[0] = on;
        (on ? vol_on : vol_off).push_back(double(phantom(a).image.foreground_count()));
        (on ? mean_on : mean_off).push_back(in_mask_mean(phantom(f).image));
        (on ? sph_on : sph_off).push_back(compute_shape_features(phantom(s).image.mask).sphericity);
    }
    EXPECT_GE(cohens_d(vol_on, vol_off), 1.0);
    EXPECT_GE(cohens_d(mean_on, mean_off), 1.0);
    EXPECT_GE(cohens_d(sph_on, sph_off), 1.0);
}

TEST(Cohort, PrevalenceSplitAndDeterminism)
{
    CohortSpec spec;
    spec.n_subjects = 64;
    spec.seed = 42;
    const auto dir = std::filesystem::temp_directory_path() / "nrr_synth_a";
    const auto dir2 = std::filesystem::temp_directory_path() / "nrr_synth_b";
    std::filesystem::remove_all(dir);
    std::filesystem::remove_all(dir2);
    CohortManifest m = generate_cohort(spec, dir);
    ASSERT_EQ(m.subjects.size(), 64u);
    EXPECT_EQ(m.indices(Split::Train).size(), 45u);
    for (std::size_t k = 0; k < kMarkerCount; ++k) {
        int count = 0;
        for (const auto& s : m.subjects) count += *s.labels[k];
        EXPECT_GE(count, 23) << kMarkerNames[k];
        EXPECT_LE(count, 41) << kMarkerNames[k];
    }
    generate_cohort(spec, dir2);
    EXPECT_EQ(slurp(dir / "manifest.json"), slurp(dir2 / "manifest.json"));
    EXPECT_EQ(load_subject(m, m.subjects[7]), load_subject(load_manifest(dir2 / "manifest.json"), m.subjects[7]));

    nlohmann::json j = spec;
    EXPECT_EQ(nlohmann::json(j.get<CohortSpec>()), j);
    j["extra"] = 1;
    EXPECT_THROW(j.get<CohortSpec>(), Error);
    spec.n_subjects = 4;
    EXPECT_THROW(spec.validate(), Error);
}
