#ifndef VSEG_TEST_HELPERS_HPP
#define VSEG_TEST_HELPERS_HPP

// Test-only oracles and synthetic data. Everything here stays independent of
// the library implementation paths it is used to check: distances and
// morphology are recomputed from their set definitions, convolutions with
// plain nested loops.

#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <vector>

#include "vseg/rng.hpp"
#include "vseg/volume.hpp"

namespace oracle {

using vseg::IndexTriple;
using vseg::Mask;
using vseg::Rng;
using vseg::Triple;
using vseg::Volume;

/// All-pairs signed distance, same convention as the library contract:
/// voxel-center to nearest opposite-class voxel center, minus half the
/// minimal spacing, negative inside.
inline Volume brute_signed_distance(const Mask& m) {
    struct P { double x, y, z; };
    std::vector<P> fg, bg;
    for (int z = 0; z < m.dims[2]; ++z)
        for (int y = 0; y < m.dims[1]; ++y)
            for (int x = 0; x < m.dims[0]; ++x) {
                const Triple c = m.voxel_center(x, y, z);
                (m.at(x, y, z) != 0.0 ? fg : bg).push_back({c[0], c[1], c[2]});
            }
    const double half = 0.5 * std::min({m.spacing[0], m.spacing[1], m.spacing[2]});
    Volume out(m.dims, m.spacing, m.origin);
    for (int z = 0; z < m.dims[2]; ++z)
        for (int y = 0; y < m.dims[1]; ++y)
            for (int x = 0; x < m.dims[0]; ++x) {
                const Triple c = m.voxel_center(x, y, z);
                const auto& opposite = (m.at(x, y, z) != 0.0) ? bg : fg;
                double best = std::numeric_limits<double>::infinity();
                for (const auto& p : opposite) {
                    const double d2 = (c[0] - p.x) * (c[0] - p.x) +
                                      (c[1] - p.y) * (c[1] - p.y) +
                                      (c[2] - p.z) * (c[2] - p.z);
                    best = std::min(best, d2);
                }
                const double d = std::sqrt(best) - half;
                out.at(x, y, z) = (m.at(x, y, z) != 0.0) ? -d : d;
            }
    return out;
}

/// Erosion straight from the definition: keep a voxel iff every element
/// offset lands on in-bounds foreground.
inline Mask brute_erode(const Mask& m, const Mask& elem) {
    const IndexTriple ec{elem.dims[0] / 2, elem.dims[1] / 2, elem.dims[2] / 2};
    Mask out(m.dims, m.spacing, m.origin);
    for (int z = 0; z < m.dims[2]; ++z)
        for (int y = 0; y < m.dims[1]; ++y)
            for (int x = 0; x < m.dims[0]; ++x) {
                bool keep = m.at(x, y, z) != 0.0;
                for (int ez = 0; keep && ez < elem.dims[2]; ++ez)
                    for (int ey = 0; keep && ey < elem.dims[1]; ++ey)
                        for (int ex = 0; keep && ex < elem.dims[0]; ++ex) {
                            if (elem.at(ex, ey, ez) == 0.0) continue;
                            const int xx = x + ex - ec[0], yy = y + ey - ec[1], zz = z + ez - ec[2];
                            if (xx < 0 || yy < 0 || zz < 0 || xx >= m.dims[0] ||
                                yy >= m.dims[1] || zz >= m.dims[2] || m.at(xx, yy, zz) == 0.0)
                                keep = false;
                        }
                if (keep) out.at(x, y, z) = 1.0;
            }
    return out;
}

/// Dilation as the union of element translates stamped on each foreground voxel.
inline Mask brute_dilate(const Mask& m, const Mask& elem) {
    const IndexTriple ec{elem.dims[0] / 2, elem.dims[1] / 2, elem.dims[2] / 2};
    Mask out(m.dims, m.spacing, m.origin);
    for (int z = 0; z < m.dims[2]; ++z)
        for (int y = 0; y < m.dims[1]; ++y)
            for (int x = 0; x < m.dims[0]; ++x) {
                if (m.at(x, y, z) == 0.0) continue;
                for (int ez = 0; ez < elem.dims[2]; ++ez)
                    for (int ey = 0; ey < elem.dims[1]; ++ey)
                        for (int ex = 0; ex < elem.dims[0]; ++ex) {
                            if (elem.at(ex, ey, ez) == 0.0) continue;
                            const int xx = x + ex - ec[0], yy = y + ey - ec[1], zz = z + ez - ec[2];
                            if (xx >= 0 && yy >= 0 && zz >= 0 && xx < m.dims[0] &&
                                yy < m.dims[1] && zz < m.dims[2])
                                out.at(xx, yy, zz) = 1.0;
                        }
            }
    return out;
}

inline Mask brute_open(const Mask& m, const Mask& elem) {
    return brute_dilate(brute_erode(m, elem), elem);
}

/// Number of 6-connected foreground components.
inline int count_components6(const Mask& m) {
    std::vector<char> seen(m.size(), 0);
    int components = 0;
    const int dx[6] = {1, -1, 0, 0, 0, 0};
    const int dy[6] = {0, 0, 1, -1, 0, 0};
    const int dz[6] = {0, 0, 0, 0, 1, -1};
    for (int z = 0; z < m.dims[2]; ++z)
        for (int y = 0; y < m.dims[1]; ++y)
            for (int x = 0; x < m.dims[0]; ++x) {
                const std::size_t i = m.index(x, y, z);
                if (m.data[i] == 0.0 || seen[i]) continue;
                ++components;
                std::deque<IndexTriple> queue{{x, y, z}};
                seen[i] = 1;
                while (!queue.empty()) {
                    const IndexTriple p = queue.front();
                    queue.pop_front();
                    for (int n = 0; n < 6; ++n) {
                        const int xx = p[0] + dx[n], yy = p[1] + dy[n], zz = p[2] + dz[n];
                        if (xx < 0 || yy < 0 || zz < 0 || xx >= m.dims[0] ||
                            yy >= m.dims[1] || zz >= m.dims[2])
                            continue;
                        const std::size_t j = m.index(xx, yy, zz);
                        if (m.data[j] != 0.0 && !seen[j]) {
                            seen[j] = 1;
                            queue.push_back({xx, yy, zz});
                        }
                    }
                }
            }
    return components;
}

/// Axis-aligned ellipsoid mask: ((x-c)/a)^2 + ... <= 1 over voxel centers.
inline Mask ellipsoid_mask(const IndexTriple& dims, const Triple& spacing,
                           const Triple& center_mm, const Triple& semi_axes_mm) {
    Mask m(dims, spacing, {0, 0, 0});
    for (int z = 0; z < dims[2]; ++z)
        for (int y = 0; y < dims[1]; ++y)
            for (int x = 0; x < dims[0]; ++x) {
                const Triple c = m.voxel_center(x, y, z);
                const double r2 = std::pow((c[0] - center_mm[0]) / semi_axes_mm[0], 2) +
                                  std::pow((c[1] - center_mm[1]) / semi_axes_mm[1], 2) +
                                  std::pow((c[2] - center_mm[2]) / semi_axes_mm[2], 2);
                if (r2 <= 1.0) m.at(x, y, z) = 1.0;
            }
    return m;
}

inline Mask random_mask(const IndexTriple& dims, double fg_fraction, Rng& rng) {
    Mask m(dims, {1, 1, 1}, {0, 0, 0});
    for (double& v : m.data) v = rng.uniform() < fg_fraction ? 1.0 : 0.0;
    return m;
}

/// Hard Dice recomputed from voxel counts.
inline double brute_dice(const Mask& a, const Mask& b) {
    std::size_t na = 0, nb = 0, overlap = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        na += (a.data[i] != 0.0);
        nb += (b.data[i] != 0.0);
        overlap += (a.data[i] != 0.0 && b.data[i] != 0.0);
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(overlap) / static_cast<double>(na + nb);
}

} // namespace oracle

#endif
