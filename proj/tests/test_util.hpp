#pragma once

#include <cmath>
#include <functional>
#include <random>

#include "nrr/volume.hpp"

namespace nrr::test {

// Mask of voxels whose centre (in mm) satisfies `inside`.
inline Mask make_mask(Dims dims, Spacing sp, const std::function<bool(double, double, double)>& inside)
{
    Mask m(dims, sp);
    for (std::size_t z = 0; z < dims[2]; ++z)
        for (std::size_t y = 0; y < dims[1]; ++y)
            for (std::size_t x = 0; x < dims[0]; ++x)
                m(x, y, z) = inside(x * sp[0], y * sp[1], z * sp[2]) ? 1 : 0;
    return m;
}

inline Mask ball(double r)
{
    const auto n = static_cast<std::size_t>(2 * std::ceil(r) + 5);
    const double c = (n - 1) / 2.0;
    return make_mask({n, n, n}, {1, 1, 1}, [&](double x, double y, double z) {
        return (x - c) * (x - c) + (y - c) * (y - c) + (z - c) * (z - c) <= r * r;
    });
}

inline Mask ellipsoid(double a, double b, double c, Spacing sp = {1, 1, 1})
{
    const Dims dims{static_cast<std::size_t>(2 * a / sp[0]) + 6, static_cast<std::size_t>(2 * b / sp[1]) + 6,
                    static_cast<std::size_t>(2 * c / sp[2]) + 6};
    const double cx = (dims[0] - 1) * sp[0] / 2, cy = (dims[1] - 1) * sp[1] / 2, cz = (dims[2] - 1) * sp[2] / 2;
    return make_mask(dims, sp, [&](double x, double y, double z) {
        const double u = (x - cx) / a, v = (y - cy) / b, w = (z - cz) / c;
        return u * u + v * v + w * w <= 1.0;
    });
}

inline Mask cube(std::size_t s)
{
    const std::size_t n = s + 4;
    Mask m({n, n, n}, {1, 1, 1});
    for (std::size_t z = 2; z < s + 2; ++z)
        for (std::size_t y = 2; y < s + 2; ++y)
            for (std::size_t x = 2; x < s + 2; ++x) m(x, y, z) = 1;
    return m;
}

// Connected-ish random blob: union of a few random balls.
inline Mask random_blob(Dims dims, std::mt19937_64& rng, int balls = 4)
{
    std::uniform_real_distribution<double> u(0.3, 0.7), rr(2.0, 4.0);
    std::vector<std::array<double, 4>> b;
    for (int i = 0; i < balls; ++i) b.push_back({u(rng) * dims[0], u(rng) * dims[1], u(rng) * dims[2], rr(rng)});
    return make_mask(dims, {1, 1, 1}, [&](double x, double y, double z) {
        for (const auto& s : b)
            if ((x - s[0]) * (x - s[0]) + (y - s[1]) * (y - s[1]) + (z - s[2]) * (z - s[2]) <= s[3] * s[3]) return true;
        return false;
    });
}

inline MaskedVolume random_phantom(Dims dims, std::mt19937_64& rng)
{
    Mask m = random_blob(dims, rng);
    Volume v(dims, m.spacing());
    std::normal_distribution<float> n(1.0f, 0.5f);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = m[i] ? n(rng) : 0.0f;
    return {v, m};
}

}  // namespace nrr::test
