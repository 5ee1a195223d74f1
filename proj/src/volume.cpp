#include "nrr/volume.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace nrr {

std::string to_string(const Dims& d)
{
    std::ostringstream os;
    os << '(' << d[0] << ',' << d[1] << ',' << d[2] << ')';
    return os.str();
}

template <typename T>
Grid3<T>::Grid3(Dims dims, Spacing spacing, T fill)
  : dims_(dims), spacing_(spacing), voxels_(dims[0] * dims[1] * dims[2], fill)
{
}

template <typename T>
Grid3<T>::Grid3(Dims dims, Spacing spacing, std::vector<T> voxels)
  : dims_(dims), spacing_(spacing), voxels_(std::move(voxels))
{
    if (voxels_.size() != dims_[0] * dims_[1] * dims_[2]) {
        throw ShapeError("grid " + to_string(dims_) + " expects " + std::to_string(dims_[0] * dims_[1] * dims_[2]) +
                         " voxels, got " + std::to_string(voxels_.size()));
    }
}

template class Grid3<float>;
template class Grid3<std::uint8_t>;

MaskedVolume::MaskedVolume(Volume v, Mask m) : volume(std::move(v)), mask(std::move(m))
{
    if (volume.dims() != mask.dims()) {
        throw ShapeError("volume dims " + to_string(volume.dims()) + " differ from mask dims " +
                         to_string(mask.dims()));
    }
    if (volume.spacing() != mask.spacing()) {
        throw ShapeError("volume and mask spacing differ");
    }
}

std::size_t MaskedVolume::foreground_count() const noexcept
{
    return static_cast<std::size_t>(std::count_if(mask.voxels().begin(), mask.voxels().end(),
                                                  [](std::uint8_t m) { return m != 0; }));
}

void IntensityStats::validate() const
{
    if (!(p_low < p_high)) throw Error("intensity stats: p_low must be < p_high");
    if (!(std > 0.0) || !std::isfinite(std)) throw Error("intensity stats: std must be positive");
}

namespace {

void validate_geometry(const Dims& d, const Spacing& s)
{
    for (int a = 0; a < 3; ++a) {
        if (d[a] == 0) throw ShapeError("grid dims must be positive, got " + to_string(d));
        if (!(s[a] > 0.0) || !std::isfinite(s[a])) throw ShapeError("spacing must be positive and finite");
    }
}

}  // namespace

void validate(const Volume& v)
{
    validate_geometry(v.dims(), v.spacing());
    for (float x : v.voxels()) {
        if (!std::isfinite(x)) throw Error("volume contains non-finite voxel values");
    }
}

void validate(const Mask& m)
{
    validate_geometry(m.dims(), m.spacing());
    for (auto x : m.voxels()) {
        if (x > 1) throw Error("mask voxels must be 0 or 1");
    }
}

double percentile_sorted(std::span<const double> sorted, double pct)
{
    if (sorted.empty()) throw Error("percentile of empty sample");
    const double rank = std::clamp(pct, 0.0, 100.0) / 100.0 * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(rank));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

namespace {

Dims resampled_dims(const Dims& d, const Spacing& from, const Spacing& to)
{
    Dims out{};
    for (int a = 0; a < 3; ++a) {
        if (!(to[a] > 0.0) || !std::isfinite(to[a])) {
            throw Error("resample: target spacing must be positive and finite");
        }
        const double n = std::round(static_cast<double>(d[a]) * from[a] / to[a]);
        out[a] = static_cast<std::size_t>(std::max(1.0, n));
    }
    return out;
}

template <typename T>
Grid3<T> resample_impl(const Grid3<T>& v, const Spacing& target, Interpolation mode)
{
    const Dims out_dims = resampled_dims(v.dims(), v.spacing(), target);
    if (v.spacing() == target) return v;

    const Dims& in = v.dims();
    Grid3<T> out(out_dims, target);
    // source-continuous coordinate per output index, per axis
    std::array<std::vector<double>, 3> pos;
    for (int a = 0; a < 3; ++a) {
        pos[a].resize(out_dims[a]);
        const double ratio = target[a] / v.spacing()[a];
        const double last = static_cast<double>(in[a] - 1);
        for (std::size_t i = 0; i < out_dims[a]; ++i) {
            pos[a][i] = std::min(static_cast<double>(i) * ratio, last);
        }
    }

    for (std::size_t z = 0; z < out_dims[2]; ++z) {
        for (std::size_t y = 0; y < out_dims[1]; ++y) {
            for (std::size_t x = 0; x < out_dims[0]; ++x) {
                const double px = pos[0][x], py = pos[1][y], pz = pos[2][z];
                if (mode == Interpolation::Nearest) {
                    const auto ix = std::min(static_cast<std::size_t>(std::lround(px)), in[0] - 1);
                    const auto iy = std::min(static_cast<std::size_t>(std::lround(py)), in[1] - 1);
                    const auto iz = std::min(static_cast<std::size_t>(std::lround(pz)), in[2] - 1);
                    out(x, y, z) = v(ix, iy, iz);
                    continue;
                }
                const auto x0 = static_cast<std::size_t>(px);
                const auto y0 = static_cast<std::size_t>(py);
                const auto z0 = static_cast<std::size_t>(pz);
                const auto x1 = std::min(x0 + 1, in[0] - 1);
                const auto y1 = std::min(y0 + 1, in[1] - 1);
                const auto z1 = std::min(z0 + 1, in[2] - 1);
                const double fx = px - static_cast<double>(x0);
                const double fy = py - static_cast<double>(y0);
                const double fz = pz - static_cast<double>(z0);
                auto lerp = [](double a, double b, double t) { return a + t * (b - a); };
                const double c00 = lerp(v(x0, y0, z0), v(x1, y0, z0), fx);
                const double c10 = lerp(v(x0, y1, z0), v(x1, y1, z0), fx);
                const double c01 = lerp(v(x0, y0, z1), v(x1, y0, z1), fx);
                const double c11 = lerp(v(x0, y1, z1), v(x1, y1, z1), fx);
                const double c0 = lerp(c00, c10, fy);
                const double c1 = lerp(c01, c11, fy);
                out(x, y, z) = static_cast<T>(lerp(c0, c1, fz));
            }
        }
    }
    return out;
}

}  // namespace

Volume resample(const Volume& v, const Spacing& target, Interpolation mode)
{
    return resample_impl(v, target, mode);
}

Mask resample(const Mask& m, const Spacing& target)
{
    return resample_impl(m, target, Interpolation::Nearest);
}

MaskedVolume center_on_grid(const MaskedVolume& mv, const Dims& grid, float fill)
{
    const Dims& d = mv.mask.dims();
    std::array<double, 3> centroid{0, 0, 0};
    std::array<std::size_t, 3> lo{d[0], d[1], d[2]}, hi{0, 0, 0};
    std::size_t count = 0;
    for (std::size_t z = 0; z < d[2]; ++z)
        for (std::size_t y = 0; y < d[1]; ++y)
            for (std::size_t x = 0; x < d[0]; ++x) {
                if (!mv.mask(x, y, z)) continue;
                const std::array<std::size_t, 3> p{x, y, z};
                for (int a = 0; a < 3; ++a) {
                    centroid[a] += static_cast<double>(p[a]);
                    lo[a] = std::min(lo[a], p[a]);
                    hi[a] = std::max(hi[a], p[a]);
                }
                ++count;
            }
    if (count == 0) throw Error("center_on_grid: mask has no foreground");

    // shift[a]: output index = input index + shift[a]
    std::array<long long, 3> shift{};
    static constexpr const char* axis_name[3] = {"x", "y", "z"};
    for (int a = 0; a < 3; ++a) {
        if (grid[a] == 0) throw Error("center_on_grid: grid dims must be >= 1");
        const std::size_t extent = hi[a] - lo[a] + 1;
        if (extent > grid[a]) {
            throw Error(std::string("center_on_grid: foreground extent along ") + axis_name[a] + " (" +
                        std::to_string(extent) + " voxels) exceeds grid size " + std::to_string(grid[a]));
        }
        const auto c = static_cast<long long>(std::llround(centroid[a] / static_cast<double>(count)));
        long long s = static_cast<long long>(grid[a] / 2) - c;
        const long long min_shift = -static_cast<long long>(lo[a]);
        const long long max_shift = static_cast<long long>(grid[a]) - 1 - static_cast<long long>(hi[a]);
        shift[a] = std::clamp(s, min_shift, max_shift);
    }

    Volume vol(grid, mv.volume.spacing(), fill);
    Mask mask(grid, mv.mask.spacing(), std::uint8_t{0});
    for (std::size_t z = 0; z < grid[2]; ++z) {
        const long long sz = static_cast<long long>(z) - shift[2];
        if (sz < 0 || sz >= static_cast<long long>(d[2])) continue;
        for (std::size_t y = 0; y < grid[1]; ++y) {
            const long long sy = static_cast<long long>(y) - shift[1];
            if (sy < 0 || sy >= static_cast<long long>(d[1])) continue;
            for (std::size_t x = 0; x < grid[0]; ++x) {
                const long long sx = static_cast<long long>(x) - shift[0];
                if (sx < 0 || sx >= static_cast<long long>(d[0])) continue;
                vol(x, y, z) = mv.volume(sx, sy, sz);
                mask(x, y, z) = mv.mask(sx, sy, sz);
            }
        }
    }
    return MaskedVolume(std::move(vol), std::move(mask));
}

IntensityStats fit_intensity_stats(std::span<const MaskedVolume> cohort, double p_low_pct, double p_high_pct)
{
    if (cohort.empty()) throw Error("fit_intensity_stats: empty cohort");
    std::vector<double> pool;
    for (const auto& mv : cohort) {
        const auto before = pool.size();
        for (std::size_t i = 0; i < mv.mask.size(); ++i) {
            if (mv.mask[i]) pool.push_back(mv.volume[i]);
        }
        if (pool.size() == before) throw Error("fit_intensity_stats: subject with empty mask");
    }
    if (pool.empty()) throw Error("fit_intensity_stats: empty intensity pool");
    std::sort(pool.begin(), pool.end());

    IntensityStats s;
    s.p_low = percentile_sorted(pool, p_low_pct);
    s.p_high = percentile_sorted(pool, p_high_pct);
    double sum = 0.0;
    for (double& x : pool) {
        x = std::clamp(x, s.p_low, s.p_high);
        sum += x;
    }
    s.mean = sum / static_cast<double>(pool.size());
    double ss = 0.0;
    for (double x : pool) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(pool.size()));
    if (!(s.std > 0.0)) throw Error("fit_intensity_stats: pooled intensities have zero standard deviation");
    if (!(s.p_low < s.p_high)) throw Error("fit_intensity_stats: degenerate percentile cuts");
    return s;
}

MaskedVolume clip_and_standardize(const MaskedVolume& mv, const IntensityStats& stats)
{
    stats.validate();
    MaskedVolume out = mv;
    for (std::size_t i = 0; i < out.volume.size(); ++i) {
        if (!out.mask[i]) {
            out.volume[i] = 0.0f;
            continue;
        }
        const double x = std::clamp(static_cast<double>(out.volume[i]), stats.p_low, stats.p_high);
        out.volume[i] = static_cast<float>((x - stats.mean) / stats.std);
    }
    return out;
}

MaskedVolume rotate_axial(const MaskedVolume& mv, double degrees)
{
    const Dims& d = mv.volume.dims();
    const Spacing& sp = mv.volume.spacing();
    const double th = degrees * 3.14159265358979323846 / 180.0;
    const double c = std::cos(th), s = std::sin(th);
    const double cx = (static_cast<double>(d[0]) - 1.0) / 2.0;
    const double cy = (static_cast<double>(d[1]) - 1.0) / 2.0;

    Volume vol(d, sp, 0.0f);
    Mask mask(d, sp, std::uint8_t{0});
    auto sample = [&](double fx, double fy, std::size_t z) -> double {
        if (fx < 0 || fy < 0 || fx > static_cast<double>(d[0] - 1) || fy > static_cast<double>(d[1] - 1)) return 0.0;
        const auto x0 = static_cast<std::size_t>(fx), y0 = static_cast<std::size_t>(fy);
        const auto x1 = std::min(x0 + 1, d[0] - 1), y1 = std::min(y0 + 1, d[1] - 1);
        const double tx = fx - static_cast<double>(x0), ty = fy - static_cast<double>(y0);
        const double a = mv.volume(x0, y0, z) + tx * (mv.volume(x1, y0, z) - mv.volume(x0, y0, z));
        const double b = mv.volume(x0, y1, z) + tx * (mv.volume(x1, y1, z) - mv.volume(x0, y1, z));
        return a + ty * (b - a);
    };
    for (std::size_t z = 0; z < d[2]; ++z)
        for (std::size_t y = 0; y < d[1]; ++y)
            for (std::size_t x = 0; x < d[0]; ++x) {
                // inverse map in physical units so anisotropic spacing rotates rigidly
                const double px = (static_cast<double>(x) - cx) * sp[0];
                const double py = (static_cast<double>(y) - cy) * sp[1];
                const double sx = (c * px + s * py) / sp[0] + cx;
                const double sy = (-s * px + c * py) / sp[1] + cy;
                const long long nx = std::llround(sx), ny = std::llround(sy);
                if (nx >= 0 && ny >= 0 && nx < (long long)d[0] && ny < (long long)d[1] && mv.mask(nx, ny, z)) {
                    mask(x, y, z) = 1;
                    vol(x, y, z) = static_cast<float>(sample(sx, sy, z));
                }
            }
    return MaskedVolume(std::move(vol), std::move(mask));
}

MaskedVolume translate(const MaskedVolume& mv, const std::array<long long, 3>& shift)
{
    const Dims& d = mv.volume.dims();
    MaskedVolume out(Volume(d, mv.volume.spacing(), 0.0f), Mask(d, mv.mask.spacing(), std::uint8_t{0}));
    for (std::size_t z = 0; z < d[2]; ++z)
        for (std::size_t y = 0; y < d[1]; ++y)
            for (std::size_t x = 0; x < d[0]; ++x) {
                const long long tx = (long long)x + shift[0], ty = (long long)y + shift[1], tz = (long long)z + shift[2];
                if (tx < 0 || ty < 0 || tz < 0 || tx >= (long long)d[0] || ty >= (long long)d[1] || tz >= (long long)d[2]) continue;
                out.volume(tx, ty, tz) = mv.volume(x, y, z);
                out.mask(tx, ty, tz) = mv.mask(x, y, z);
            }
    return out;
}

}  // namespace nrr
