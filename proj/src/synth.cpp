#include "nrr/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

namespace nrr {

using nlohmann::json;

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t k)
{
    // seed_seq consumes 32-bit words
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(k), std::uint32_t(k >> 32)};
    std::array<std::uint64_t, 1> s{};
    seq.generate(s.begin(), s.end());
    return std::mt19937_64(s[0]);
}

std::vector<double> gaussian_kernel(double sigma)
{
    const int r = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
    std::vector<double> k(2 * r + 1);
    for (int i = -r; i <= r; ++i) k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
    const double s = std::accumulate(k.begin(), k.end(), 0.0);
    for (auto& v : k) v /= s;
    return k;
}

// Unit-variance Gaussian noise smoothed with an isotropic kernel of width
// `sigma` voxels (edges clamp), rescaled by the kernel's analytic std.
std::vector<double> smooth_noise(const Dims& d, double sigma, std::mt19937_64& rng)
{
    const std::size_t n = d[0] * d[1] * d[2];
    std::normal_distribution<double> g;
    std::vector<double> a(n), b(n);
    for (auto& v : a) v = g(rng);
    if (sigma <= 0) return a;
    const auto k = gaussian_kernel(sigma);
    const int r = static_cast<int>(k.size() / 2);
    double norm = 1;
    const double k2 = std::inner_product(k.begin(), k.end(), k.begin(), 0.0);
    const std::array<std::size_t, 3> stride{1, d[0], d[0] * d[1]};
    for (int axis = 0; axis < 3; ++axis) {
        norm *= k2;
        const auto len = static_cast<long>(d[axis]);
        for (std::size_t i = 0; i < n; ++i) {
            const long pos = static_cast<long>((i / stride[axis]) % d[axis]);
            double acc = 0;
            for (int t = -r; t <= r; ++t) {
                const long q = std::clamp(pos + t, 0L, len - 1);
                acc += k[t + r] * a[i + (q - pos) * static_cast<long>(stride[axis])];
            }
            b[i] = acc;
        }
        std::swap(a, b);
    }
    const double inv = 1.0 / std::sqrt(norm);
    for (auto& v : a) v *= inv;
    return a;
}

template <typename T>
void read_key(const json& j, const char* key, T& out)
{
    if (j.contains(key)) out = j.at(key).get<T>();
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where)
{
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) throw Error("unknown key '" + k + "' in " + where);
}

}  // namespace

void PhantomParams::validate() const
{
    for (int i = 0; i < 3; ++i) {
        if (grid[i] == 0) throw Error("phantom: grid dims must be positive");
        if (!(spacing[i] > 0) || !(semi_axes[i] > 0)) throw Error("phantom: spacing and semi-axes must be positive");
    }
    if (speckle_std < 0 || background_std < 0 || speckle_corr < 0) throw Error("phantom: noise levels must be >= 0");
    const MarkerEffects& e = effects;
    if (!(e.atrophy_factor > 0 && e.atrophy_factor <= 1) || !(e.senility_factor > 0 && e.senility_factor <= 1)) {
        throw Error("phantom: volume factors must lie in (0, 1]");
    }
    if (e.lobulation_amp < 0 || e.lobulation_amp >= 1) throw Error("phantom: lobulation amplitude must lie in [0, 1)");
    if (e.fat_speckle_gain <= 0 || e.senility_speckle_gain <= 0) throw Error("phantom: speckle gains must be positive");
}

Phantom phantom(const PhantomParams& p)
{
    p.validate();
    const MarkerEffects& e = p.effects;
    const bool shape = p.flags[0], atrophy = p.flags[1], fat = p.flags[2], senile = p.flags[3];

    double vscale = 1;
    if (atrophy) vscale *= e.atrophy_factor;
    if (senile) vscale *= e.senility_factor;
    const double ls = std::cbrt(vscale);
    const std::array<double, 3> ax{p.semi_axes[0] * ls, p.semi_axes[1] * ls, p.semi_axes[2] * ls};
    const double amp = shape ? e.lobulation_amp : 0.0;

    const Dims& d = p.grid;
    const Spacing& sp = p.spacing;
    const double th = p.rotation_deg * std::numbers::pi / 180.0;
    const double ct = std::cos(th), st = std::sin(th);
    Mask mask(d, sp);
    std::vector<double> along(mask.size(), 0.0);  // normalised long-axis coordinate
    std::vector<double> blob(mask.size(), 0.0);
    for (std::size_t z = 0; z < d[2]; ++z)
        for (std::size_t y = 0; y < d[1]; ++y)
            for (std::size_t x = 0; x < d[0]; ++x) {
                const double dx = x * sp[0] - (d[0] - 1) * sp[0] / 2 - p.offset_mm[0];
                const double dy = y * sp[1] - (d[1] - 1) * sp[1] / 2 - p.offset_mm[1];
                const double dz = z * sp[2] - (d[2] - 1) * sp[2] / 2 - p.offset_mm[2];
                const double u = (ct * dx + st * dy) / ax[0];
                const double v = (-st * dx + ct * dy) / ax[1];
                const double w = dz / ax[2];
                const double rho = std::sqrt(u * u + v * v + w * w);
                const double bound = 1.0 + amp * std::sin(p.lobulation_freq * std::atan2(v, u) + p.lobulation_phase);
                const std::size_t i = mask.index(x, y, z);
                mask[i] = rho <= bound ? 1 : 0;
                along[i] = u;
                const double bu = (u - p.inclusion_pos[0]) * ax[0], bv = (v - p.inclusion_pos[1]) * ax[1],
                             bw = (w - p.inclusion_pos[2]) * ax[2];
                const double r2 = p.inclusion_radius_mm * p.inclusion_radius_mm;
                blob[i] = std::exp(-(bu * bu + bv * bv + bw * bw) / (2 * r2));
            }
    std::size_t fg = 0;
    for (auto m : mask.voxels()) fg += m;
    if (fg == 0) throw Error("phantom parameters produce an empty mask");

    double mean = p.mean, sd = p.speckle_std;
    if (fat && e.fat_mode == FatMode::Normal) {
        mean -= e.fat_mean_shift;
        sd *= e.fat_speckle_gain;
    }
    if (senile) sd *= e.senility_speckle_gain;

    auto rng_speckle = stream(p.noise_seed, 1);
    auto rng_background = stream(p.noise_seed, 2);
    auto rng_hard = stream(p.noise_seed, 3);
    const std::vector<double> speckle = smooth_noise(d, p.speckle_corr, rng_speckle);
    std::normal_distribution<double> bg(p.background_mean, p.background_std);

    Volume vol(d, sp);
    for (std::size_t i = 0; i < vol.size(); ++i) {
        const double b = bg(rng_background);
        vol[i] = static_cast<float>(mask[i] ? mean + sd * speckle[i] : b);
    }

    if (fat && e.fat_mode == FatMode::Hard) {
        // keep the exact in-mask value multiset, re-ordered along a smoother
        // field with a long-axis ramp
        const std::vector<double> field = smooth_noise(d, e.hard_corr, rng_hard);
        std::vector<std::size_t> idx;
        std::vector<float> values;
        for (std::size_t i = 0; i < vol.size(); ++i)
            if (mask[i]) {
                idx.push_back(i);
                values.push_back(vol[i]);
            }
        std::vector<double> key(vol.size());
        for (std::size_t i : idx) key[i] = field[i] + e.hard_ramp * along[i];
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return key[a] < key[b]; });
        std::sort(values.begin(), values.end());
        for (std::size_t r = 0; r < idx.size(); ++r)
            vol[idx[r]] = static_cast<float>(values[r] - e.hard_mean_shift);
    }
    if (p.inclusion_contrast != 0)
        for (std::size_t i = 0; i < vol.size(); ++i)
            if (mask[i]) vol[i] += static_cast<float>(p.inclusion_contrast * blob[i]);

    Phantom out{MaskedVolume(std::move(vol), std::move(mask)), {}};
    for (std::size_t k = 0; k < kMarkerCount; ++k) out.labels[k] = p.flags[k] ? 1 : 0;
    return out;
}

// ---- cohort -------------------------------------------------------------------

void CohortSpec::validate() const
{
    if (n_subjects < 8) throw Error("cohort spec: n_subjects must be >= 8");
    for (double q : prevalence)
        if (!(q >= 0 && q <= 1)) throw Error("cohort spec: prevalences must lie in [0, 1]");
    if (!(train_fraction > 0 && train_fraction < 1)) throw Error("cohort spec: train_fraction must lie in (0, 1)");
    if (axis_jitter < 0 || axis_jitter >= 1 || rotation_max_deg < 0 || offset_max_mm < 0 || mean_jitter < 0 ||
        inclusion_contrast < 0 || !(inclusion_radius_mm[0] > 0 && inclusion_radius_mm[0] <= inclusion_radius_mm[1])) {
        throw Error("cohort spec: jitter ranges must be non-negative (axis_jitter < 1), inclusion radii ordered and positive");
    }
    PhantomParams p;
    p.grid = grid;
    p.spacing = spacing;
    p.semi_axes = semi_axes;
    p.effects = effects;
    p.validate();
}

namespace {

const char* fat_mode_name(FatMode m) { return m == FatMode::Hard ? "hard" : "normal"; }

}  // namespace

void to_json(json& j, const CohortSpec& s)
{
    const MarkerEffects& e = s.effects;
    j = json{{"n_subjects", s.n_subjects},
             {"grid", s.grid},
             {"spacing", s.spacing},
             {"prevalence", s.prevalence},
             {"train_fraction", s.train_fraction},
             {"seed", s.seed},
             {"semi_axes", s.semi_axes},
             {"axis_jitter", s.axis_jitter},
             {"rotation_max_deg", s.rotation_max_deg},
             {"offset_max_mm", s.offset_max_mm},
             {"mean_jitter", s.mean_jitter},
             {"inclusion_contrast", s.inclusion_contrast},
             {"inclusion_radius_mm", s.inclusion_radius_mm},
             {"effects",
              {{"lobulation_amp", e.lobulation_amp},
               {"atrophy_factor", e.atrophy_factor},
               {"fat_mean_shift", e.fat_mean_shift},
               {"fat_speckle_gain", e.fat_speckle_gain},
               {"fat_mode", fat_mode_name(e.fat_mode)},
               {"hard_mean_shift", e.hard_mean_shift},
               {"hard_corr", e.hard_corr},
               {"hard_ramp", e.hard_ramp},
               {"senility_factor", e.senility_factor},
               {"senility_speckle_gain", e.senility_speckle_gain}}}};
}

void from_json(const json& j, CohortSpec& s)
{
    reject_unknown(j,
                   {"n_subjects", "grid", "spacing", "prevalence", "train_fraction", "seed", "semi_axes",
                    "axis_jitter", "rotation_max_deg", "offset_max_mm", "mean_jitter", "inclusion_contrast",
                    "inclusion_radius_mm", "effects"},
                   "cohort spec");
    read_key(j, "n_subjects", s.n_subjects);
    read_key(j, "grid", s.grid);
    read_key(j, "spacing", s.spacing);
    read_key(j, "prevalence", s.prevalence);
    read_key(j, "train_fraction", s.train_fraction);
    read_key(j, "seed", s.seed);
    read_key(j, "semi_axes", s.semi_axes);
    read_key(j, "axis_jitter", s.axis_jitter);
    read_key(j, "rotation_max_deg", s.rotation_max_deg);
    read_key(j, "offset_max_mm", s.offset_max_mm);
    read_key(j, "mean_jitter", s.mean_jitter);
    read_key(j, "inclusion_contrast", s.inclusion_contrast);
    read_key(j, "inclusion_radius_mm", s.inclusion_radius_mm);
    if (j.contains("effects")) {
        const json& e = j.at("effects");
        reject_unknown(e,
                       {"lobulation_amp", "atrophy_factor", "fat_mean_shift", "fat_speckle_gain", "fat_mode",
                        "hard_mean_shift", "hard_corr", "hard_ramp", "senility_factor", "senility_speckle_gain"},
                       "cohort spec effects");
        MarkerEffects& m = s.effects;
        read_key(e, "lobulation_amp", m.lobulation_amp);
        read_key(e, "atrophy_factor", m.atrophy_factor);
        read_key(e, "fat_mean_shift", m.fat_mean_shift);
        read_key(e, "fat_speckle_gain", m.fat_speckle_gain);
        if (e.contains("fat_mode")) {
            const auto mode = e.at("fat_mode").get<std::string>();
            if (mode == "hard") m.fat_mode = FatMode::Hard;
            else if (mode == "normal") m.fat_mode = FatMode::Normal;
            else throw Error("fat_mode must be 'normal' or 'hard', got '" + mode + "'");
        }
        read_key(e, "hard_mean_shift", m.hard_mean_shift);
        read_key(e, "hard_corr", m.hard_corr);
        read_key(e, "hard_ramp", m.hard_ramp);
        read_key(e, "senility_factor", m.senility_factor);
        read_key(e, "senility_speckle_gain", m.senility_speckle_gain);
    }
    s.validate();
}

std::uint64_t subject_seed(std::uint64_t master, std::size_t index)
{
    auto r = stream(master, 0x100000000ULL + index);  // disjoint from the low stream ids
    return r();
}

PhantomParams subject_params(const CohortSpec& spec, std::size_t index)
{
    const std::uint64_t seed = subject_seed(spec.seed, index);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto sym = [&](double r) { return (2.0 * unit(rng) - 1.0) * r; };

    PhantomParams p;
    p.grid = spec.grid;
    p.spacing = spec.spacing;
    p.effects = spec.effects;
    p.noise_seed = seed;
    // every draw happens regardless of the flags so flagged and unflagged
    // twins share geometry and pose
    for (std::size_t k = 0; k < kMarkerCount; ++k) p.flags[k] = unit(rng) < spec.prevalence[k];
    for (int a = 0; a < 3; ++a) p.semi_axes[a] = spec.semi_axes[a] * (1.0 + sym(spec.axis_jitter));
    p.lobulation_freq = 3 + std::floor(unit(rng) * 3);
    p.lobulation_phase = unit(rng) * 2 * std::numbers::pi;
    p.mean = 1.0 + sym(spec.mean_jitter);
    p.rotation_deg = sym(spec.rotation_max_deg);
    for (int a = 0; a < 3; ++a) p.offset_mm[a] = sym(spec.offset_max_mm);
    // inclusion centre uniform in the inner half-radius ball
    std::array<double, 3> c;
    do {
        for (auto& v : c) v = sym(0.5);
    } while (c[0] * c[0] + c[1] * c[1] + c[2] * c[2] > 0.25);
    p.inclusion_pos = c;
    p.inclusion_radius_mm = spec.inclusion_radius_mm[0] + unit(rng) * (spec.inclusion_radius_mm[1] - spec.inclusion_radius_mm[0]);
    p.inclusion_contrast = sym(spec.inclusion_contrast);
    return p;
}

CohortManifest generate_cohort(const CohortSpec& spec, const std::filesystem::path& out_dir)
{
    spec.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

    const std::size_t n = spec.n_subjects;
    const auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(n)));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto split_rng = stream(spec.seed, 0);
    std::shuffle(order.begin(), order.end(), split_rng);
    std::vector<Split> split(n, Split::Test);
    for (std::size_t i = 0; i < n_train; ++i) split[order[i]] = Split::Train;

    CohortManifest m;
    m.base_dir = out_dir;
    for (std::size_t i = 0; i < n; ++i) {
        const PhantomParams p = subject_params(spec, i);
        const Phantom ph = phantom(p);
        char id[32];
        std::snprintf(id, sizeof id, "subj%04zu", i);
        SubjectRecord r;
        r.id = id;
        r.volume = r.id + "_vol.json";
        r.mask = r.id + "_mask.json";
        r.labels = ph.labels;
        r.split = split[i];
        r.seed = p.noise_seed;
        save_volume(out_dir / r.volume, ph.image.volume);
        save_mask(out_dir / r.mask, ph.image.mask);
        m.subjects.push_back(std::move(r));
    }
    save_manifest(out_dir / "manifest.json", m);
    std::ofstream(out_dir / "cohort_spec.json") << json(spec).dump(2) << '\n';
    return m;
}

}  // namespace nrr
