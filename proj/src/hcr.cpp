#include "nrr/hcr.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include <Eigen/Eigenvalues>

#include "nrr/marching_cubes.hpp"

namespace nrr {

const std::array<const char*, kHcrCount> kHcrNames = {
    "mesh_volume",       "voxel_volume",     "surface_area",     "surface_to_volume",
    "sphericity",        "max_diam_3d",      "max_diam_axial",   "max_diam_coronal",
    "max_diam_sagittal", "major_axis",       "minor_axis",       "least_axis",
    "elongation",        "flatness",         "energy",           "total_energy",
    "entropy",           "minimum",          "p10",              "p90",
    "maximum",           "mean",             "median",           "interquartile_range",
    "range",             "mad",              "rmad",             "rms",
    "skewness",          "kurtosis",         "variance",         "uniformity",
};

namespace {

struct Point {
    double x, y, z;
    std::size_t ix, iy, iz;
};

std::vector<Point> surface_points(const Mask& mask)
{
    const Dims& d = mask.dims();
    const Spacing& s = mask.spacing();
    auto fg = [&](long long x, long long y, long long z) {
        if (x < 0 || y < 0 || z < 0 || x >= (long long)d[0] || y >= (long long)d[1] || z >= (long long)d[2]) return false;
        return mask(x, y, z) != 0;
    };
    std::vector<Point> pts;
    for (std::size_t z = 0; z < d[2]; ++z)
        for (std::size_t y = 0; y < d[1]; ++y)
            for (std::size_t x = 0; x < d[0]; ++x) {
                if (!mask(x, y, z)) continue;
                const auto X = (long long)x, Y = (long long)y, Z = (long long)z;
                const bool interior = fg(X - 1, Y, Z) && fg(X + 1, Y, Z) && fg(X, Y - 1, Z) && fg(X, Y + 1, Z) &&
                                      fg(X, Y, Z - 1) && fg(X, Y, Z + 1);
                if (!interior) pts.push_back({x * s[0], y * s[1], z * s[2], x, y, z});
            }
    return pts;
}

}  // namespace

ShapeFeatures compute_shape_features(const Mask& mask)
{
    validate(mask);
    const Spacing& sp = mask.spacing();
    const Dims& d = mask.dims();

    std::size_t count = 0;
    Eigen::Vector3d sum = Eigen::Vector3d::Zero();
    for (std::size_t z = 0; z < d[2]; ++z)
        for (std::size_t y = 0; y < d[1]; ++y)
            for (std::size_t x = 0; x < d[0]; ++x) {
                if (!mask(x, y, z)) continue;
                sum += Eigen::Vector3d(x * sp[0], y * sp[1], z * sp[2]);
                ++count;
            }
    if (count == 0) throw Error("shape features: empty mask");

    ShapeFeatures f;
    const MeshMeasures mesh = mesh_measures(mask);
    f.mesh_volume = mesh.volume;
    f.surface_area = mesh.surface_area;
    f.voxel_volume = static_cast<double>(count) * sp[0] * sp[1] * sp[2];
    f.surface_to_volume = f.surface_area / f.mesh_volume;
    f.sphericity = std::cbrt(36.0 * std::numbers::pi * f.mesh_volume * f.mesh_volume) / f.surface_area;

    const auto pts = surface_points(mask);
    double d3 = 0, dax = 0, dcor = 0, dsag = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const Point& a = pts[i];
        for (std::size_t j = i + 1; j < pts.size(); ++j) {
            const Point& b = pts[j];
            const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
            const double dd = dx * dx + dy * dy + dz * dz;
            d3 = std::max(d3, dd);
            if (a.iz == b.iz) dax = std::max(dax, dd);
            if (a.iy == b.iy) dcor = std::max(dcor, dd);
            if (a.ix == b.ix) dsag = std::max(dsag, dd);
        }
    }
    f.max_diam_3d = std::sqrt(d3);
    f.max_diam_axial = std::sqrt(dax);
    f.max_diam_coronal = std::sqrt(dcor);
    f.max_diam_sagittal = std::sqrt(dsag);

    const Eigen::Vector3d mean = sum / static_cast<double>(count);
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (std::size_t z = 0; z < d[2]; ++z)
        for (std::size_t y = 0; y < d[1]; ++y)
            for (std::size_t x = 0; x < d[0]; ++x) {
                if (!mask(x, y, z)) continue;
                const Eigen::Vector3d p = Eigen::Vector3d(x * sp[0], y * sp[1], z * sp[2]) - mean;
                cov += p * p.transpose();
            }
    cov /= static_cast<double>(count);
    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
    // ascending; clamp tiny negative round-off
    const double l3 = std::max(0.0, eig.eigenvalues()[0]);
    const double l2 = std::max(0.0, eig.eigenvalues()[1]);
    const double l1 = std::max(0.0, eig.eigenvalues()[2]);
    f.major_axis = 4.0 * std::sqrt(l1);
    f.minor_axis = 4.0 * std::sqrt(l2);
    f.least_axis = 4.0 * std::sqrt(l3);
    if (l1 > 0.0) {
        f.elongation = std::sqrt(l2 / l1);
        f.flatness = std::sqrt(l3 / l1);
    }
    // collinear or single-voxel masks leave a vanishing secondary axis
    f.degenerate = !(l2 > 1e-12 * std::max(l1, 1.0));
    return f;
}

FirstOrderFeatures compute_first_order(const MaskedVolume& mv, double bin_width)
{
    if (!(bin_width > 0.0)) throw Error("first-order features: bin_width must be positive");
    std::vector<double> x;
    for (std::size_t i = 0; i < mv.mask.size(); ++i) {
        if (mv.mask[i]) x.push_back(mv.volume[i]);
    }
    if (x.empty()) throw Error("first-order features: empty mask");

    const auto n = static_cast<double>(x.size());
    std::sort(x.begin(), x.end());
    FirstOrderFeatures f;

    double sum = 0, sum_sq = 0;
    for (double v : x) {
        sum += v;
        sum_sq += v * v;
    }
    const Spacing& sp = mv.volume.spacing();
    f.energy = sum_sq;
    f.total_energy = sp[0] * sp[1] * sp[2] * sum_sq;
    f.mean = sum / n;
    f.rms = std::sqrt(sum_sq / n);
    f.minimum = x.front();
    f.maximum = x.back();
    f.range = f.maximum - f.minimum;
    f.p10 = percentile_sorted(x, 10);
    f.p90 = percentile_sorted(x, 90);
    f.median = percentile_sorted(x, 50);
    f.interquartile_range = percentile_sorted(x, 75) - percentile_sorted(x, 25);

    double m2 = 0, m3 = 0, m4 = 0, mad = 0;
    for (double v : x) {
        const double c = v - f.mean;
        mad += std::abs(c);
        m2 += c * c;
        m3 += c * c * c;
        m4 += c * c * c * c;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    f.mad = mad / n;
    f.variance = m2;
    if (m2 > 0.0) {
        f.skewness = m3 / std::pow(m2, 1.5);
        f.kurtosis = m4 / (m2 * m2);
    } else {
        f.degenerate = true;
    }

    double robust_sum = 0;
    std::size_t robust_n = 0;
    for (double v : x) {
        if (v >= f.p10 && v <= f.p90) {
            robust_sum += v;
            ++robust_n;
        }
    }
    const double robust_mean = robust_sum / static_cast<double>(robust_n);
    double rmad = 0;
    for (double v : x) {
        if (v >= f.p10 && v <= f.p90) rmad += std::abs(v - robust_mean);
    }
    f.rmad = rmad / static_cast<double>(robust_n);

    std::map<long long, std::size_t> hist;
    for (double v : x) ++hist[static_cast<long long>(std::floor((v - f.minimum) / bin_width))];
    for (const auto& [bin, c] : hist) {
        const double p = static_cast<double>(c) / n;
        f.entropy -= p * std::log2(p);
        f.uniformity += p * p;
    }
    return f;
}

HcrVector to_vector(const ShapeFeatures& s, const FirstOrderFeatures& f)
{
    return {s.mesh_volume,  s.voxel_volume, s.surface_area,      s.surface_to_volume, s.sphericity,
            s.max_diam_3d,  s.max_diam_axial, s.max_diam_coronal, s.max_diam_sagittal, s.major_axis,
            s.minor_axis,   s.least_axis,   s.elongation,        s.flatness,          f.energy,
            f.total_energy, f.entropy,      f.minimum,           f.p10,               f.p90,
            f.maximum,      f.mean,         f.median,            f.interquartile_range, f.range,
            f.mad,          f.rmad,         f.rms,               f.skewness,          f.kurtosis,
            f.variance,     f.uniformity};
}

HcrVector extract_hcr(const MaskedVolume& mv, double bin_width)
{
    return to_vector(compute_shape_features(mv.mask), compute_first_order(mv, bin_width));
}

HcrVector HcrScaler::apply(const HcrVector& h) const
{
    HcrVector out;
    for (std::size_t k = 0; k < kHcrCount; ++k) out[k] = (h[k] - mean[k]) / std[k];
    return out;
}

namespace {

bool is_constant(double sd, double mean) { return !(sd > 1e-12 * std::max(1.0, std::abs(mean))); }

}  // namespace

HcrScaler fit_scaler(std::span<const HcrVector> hcrs, bool allow_constant)
{
    if (hcrs.size() < 2) throw Error("fit_scaler: need at least 2 subjects");
    HcrScaler s;
    const auto n = static_cast<double>(hcrs.size());
    for (std::size_t k = 0; k < kHcrCount; ++k) {
        double sum = 0;
        for (const auto& h : hcrs) sum += h[k];
        const double mean = sum / n;
        double ss = 0;
        for (const auto& h : hcrs) ss += (h[k] - mean) * (h[k] - mean);
        const double sd = std::sqrt(ss / n);
        s.mean[k] = mean;
        if (is_constant(sd, mean)) {
            if (!allow_constant) throw Error(std::string("fit_scaler: feature '") + kHcrNames[k] + "' is constant");
            s.std[k] = 1.0;
        } else {
            s.std[k] = sd;
        }
    }
    return s;
}

std::vector<std::string> constant_columns(const HcrScaler& s, std::span<const HcrVector> hcrs)
{
    std::vector<std::string> out;
    for (std::size_t k = 0; k < kHcrCount; ++k) {
        bool all_same = true;
        for (const auto& h : hcrs) all_same = all_same && !(std::abs(h[k] - s.mean[k]) > 1e-12 * std::max(1.0, std::abs(s.mean[k])));
        if (all_same) out.emplace_back(kHcrNames[k]);
    }
    return out;
}

}  // namespace nrr
