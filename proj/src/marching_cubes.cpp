#include "nrr/marching_cubes.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

namespace nrr {

namespace {

using Vec3 = std::array<double, 3>;

Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 cross(const Vec3& a, const Vec3& b)
{
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

// Corner k of the unit cube sits at (k&1, (k>>1)&1, (k>>2)&1).
Vec3 corner_pos(int k) { return {double(k & 1), double((k >> 1) & 1), double((k >> 2) & 1)}; }

struct Edge {
    int c0, c1;
};

// The 12 cube edges, each joining two corners that differ in one bit.
constexpr std::array<Edge, 12> kEdges = {{{0, 1}, {2, 3}, {4, 5}, {6, 7},
                                          {0, 2}, {1, 3}, {4, 6}, {5, 7},
                                          {0, 4}, {1, 5}, {2, 6}, {3, 7}}};

int edge_between(int a, int b)
{
    for (int e = 0; e < 12; ++e) {
        if ((kEdges[e].c0 == a && kEdges[e].c1 == b) || (kEdges[e].c0 == b && kEdges[e].c1 == a)) return e;
    }
    return -1;
}

Vec3 edge_mid(int e)
{
    const Vec3 p = corner_pos(kEdges[e].c0), q = corner_pos(kEdges[e].c1);
    return {(p[0] + q[0]) / 2, (p[1] + q[1]) / 2, (p[2] + q[2]) / 2};
}

using TriangleList = std::vector<std::array<int, 3>>;  // edge indices

TriangleList triangulate_config(int config)
{
    auto inside = [config](int k) { return (config >> k) & 1; };
    std::array<int, 12> next;
    next.fill(-1);

    for (int axis = 0; axis < 3; ++axis) {
        const int b = (axis + 1) % 3, c = (axis + 2) % 3;
        for (int side = 0; side < 2; ++side) {
            std::array<int, 4> cyc{};
            const int steps[4][2] = {{0, 0}, {1, 0}, {1, 1}, {0, 1}};
            for (int i = 0; i < 4; ++i) {
                cyc[i] = (side << axis) | (steps[i][0] << b) | (steps[i][1] << c);
            }
            Vec3 normal{0, 0, 0};
            normal[axis] = side ? 1.0 : -1.0;

            int n_in = 0;
            for (int k : cyc) n_in += inside(k);
            if (n_in == 0 || n_in == 4) continue;

            // (start edge, end edge, reference point on the inside)
            std::vector<std::tuple<int, int, Vec3>> segments;
            const bool ambiguous = n_in == 2 && inside(cyc[0]) == inside(cyc[2]);
            if (ambiguous) {
                for (int i = 0; i < 4; ++i) {
                    if (!inside(cyc[i])) continue;
                    const int e0 = edge_between(cyc[(i + 3) % 4], cyc[i]);
                    const int e1 = edge_between(cyc[i], cyc[(i + 1) % 4]);
                    segments.emplace_back(e0, e1, corner_pos(cyc[i]));
                }
            } else {
                std::vector<int> crossing;
                Vec3 ref{0, 0, 0};
                for (int i = 0; i < 4; ++i) {
                    if (inside(cyc[i]) != inside(cyc[(i + 1) % 4])) {
                        crossing.push_back(edge_between(cyc[i], cyc[(i + 1) % 4]));
                    }
                    if (inside(cyc[i])) {
                        const Vec3 p = corner_pos(cyc[i]);
                        for (int a = 0; a < 3; ++a) ref[a] += p[a] / n_in;
                    }
                }
                segments.emplace_back(crossing[0], crossing[1], ref);
            }

            for (auto [e0, e1, ref] : segments) {
                const Vec3 p = edge_mid(e0), q = edge_mid(e1);
                const Vec3 mid{(p[0] + q[0]) / 2, (p[1] + q[1]) / 2, (p[2] + q[2]) / 2};
                // Oriented so that (q - p) x n_face points into the foreground.
                if (dot(cross(sub(q, p), normal), sub(ref, mid)) < 0) std::swap(e0, e1);
                next[e0] = e1;
            }
        }
    }

    TriangleList tris;
    std::array<bool, 12> used{};
    for (int start = 0; start < 12; ++start) {
        if (next[start] < 0 || used[start]) continue;
        std::vector<int> loop;
        for (int e = start; !used[e]; e = next[e]) {
            used[e] = true;
            loop.push_back(e);
        }
        for (std::size_t i = 1; i + 1 < loop.size(); ++i) tris.push_back({loop[0], loop[i], loop[i + 1]});
    }
    return tris;
}

const std::array<TriangleList, 256>& triangle_table()
{
    static const std::array<TriangleList, 256> table = [] {
        std::array<TriangleList, 256> t;
        for (int c = 0; c < 256; ++c) t[c] = triangulate_config(c);
        return t;
    }();
    return table;
}

}  // namespace

namespace {

// Coordinates are taken relative to voxel `origin` so measures of a
// translated object are computed from identical numbers.
std::vector<Triangle> triangulate(const Mask& mask, const std::array<long long, 3>& origin)
{
    const auto& table = triangle_table();
    const Dims& d = mask.dims();
    const Spacing& sp = mask.spacing();
    auto at = [&](long long x, long long y, long long z) -> int {
        if (x < 0 || y < 0 || z < 0 || x >= (long long)d[0] || y >= (long long)d[1] || z >= (long long)d[2]) return 0;
        return mask(x, y, z) ? 1 : 0;
    };

    std::vector<Triangle> out;
    // Cube (x,y,z) spans voxel centres x..x+1 etc.; start at -1 for padding.
    for (long long z = -1; z < (long long)d[2]; ++z)
        for (long long y = -1; y < (long long)d[1]; ++y)
            for (long long x = -1; x < (long long)d[0]; ++x) {
                int config = 0;
                for (int k = 0; k < 8; ++k) {
                    config |= at(x + (k & 1), y + ((k >> 1) & 1), z + ((k >> 2) & 1)) << k;
                }
                if (config == 0 || config == 255) continue;
                for (const auto& tri : table[config]) {
                    Triangle t;
                    std::array<Vec3*, 3> dst{&t.a, &t.b, &t.c};
                    for (int i = 0; i < 3; ++i) {
                        const Vec3 m = edge_mid(tri[i]);
                        *dst[i] = {(double(x - origin[0]) + m[0]) * sp[0], (double(y - origin[1]) + m[1]) * sp[1],
                                   (double(z - origin[2]) + m[2]) * sp[2]};
                    }
                    out.push_back(t);
                }
            }
    return out;
}

}  // namespace

std::vector<Triangle> marching_cubes(const Mask& mask) { return triangulate(mask, {0, 0, 0}); }

MeshMeasures mesh_measures(const Mask& mask)
{
    const Dims& d = mask.dims();
    std::array<long long, 3> lo{(long long)d[0], (long long)d[1], (long long)d[2]};
    for (std::size_t z = 0; z < d[2]; ++z)
        for (std::size_t y = 0; y < d[1]; ++y)
            for (std::size_t x = 0; x < d[0]; ++x)
                if (mask(x, y, z)) lo = {std::min(lo[0], (long long)x), std::min(lo[1], (long long)y), std::min(lo[2], (long long)z)};
    MeshMeasures m;
    for (const auto& t : triangulate(mask, lo)) {
        const Vec3 n = cross(sub(t.b, t.a), sub(t.c, t.a));
        m.surface_area += 0.5 * std::sqrt(dot(n, n));
        m.volume += dot(t.a, cross(t.b, t.c)) / 6.0;
    }
    return m;
}

}  // namespace nrr
