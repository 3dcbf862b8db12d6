#ifndef VSEG_VOLUME_HPP
#define VSEG_VOLUME_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "vseg/errors.hpp"

namespace vseg {

using Triple = std::array<double, 3>;
using IndexTriple = std::array<int, 3>;

/// 3D scalar grid with physical spacing and origin (both mm). Data is stored
/// x-fastest: index = x + nx*(y + ny*z). Voxel centers sit at
/// origin + index*spacing. Volumes are treated as immutable after
/// construction; every operation returns a new Volume.
struct Volume {
    IndexTriple dims{0, 0, 0};
    Triple spacing{1.0, 1.0, 1.0};
    Triple origin{0.0, 0.0, 0.0};
    std::vector<double> data;

    Volume() = default;
    Volume(IndexTriple d, Triple sp, Triple org, double fill = 0.0)
        : dims(d), spacing(sp), origin(org) {
        if (d[0] < 1 || d[1] < 1 || d[2] < 1)
            throw std::invalid_argument("Volume: dims must be >= 1");
        if (sp[0] <= 0 || sp[1] <= 0 || sp[2] <= 0)
            throw std::invalid_argument("Volume: spacing must be positive");
        data.assign(size(), fill);
    }

    std::size_t size() const {
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }
    std::size_t index(int x, int y, int z) const {
        return static_cast<std::size_t>(x) +
               static_cast<std::size_t>(dims[0]) * (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims[1]) * z);
    }
    double at(int x, int y, int z) const { return data[index(x, y, z)]; }
    double& at(int x, int y, int z) { return data[index(x, y, z)]; }

    Triple voxel_center(int x, int y, int z) const {
        return {origin[0] + x * spacing[0], origin[1] + y * spacing[1], origin[2] + z * spacing[2]};
    }
    /// Physical center of the grid (mm).
    Triple center() const {
        return {origin[0] + 0.5 * (dims[0] - 1) * spacing[0],
                origin[1] + 0.5 * (dims[1] - 1) * spacing[1],
                origin[2] + 0.5 * (dims[2] - 1) * spacing[2]};
    }

    /// Trilinear interpolation at a physical point; 0 outside the
    /// voxel-center hull.
    double sample(const Triple& p_mm) const {
        double u[3];
        for (int a = 0; a < 3; ++a) {
            u[a] = (p_mm[a] - origin[a]) / spacing[a];
            if (u[a] < 0.0 || u[a] > dims[a] - 1) return 0.0;
        }
        int i0[3], i1[3];
        double f[3];
        for (int a = 0; a < 3; ++a) {
            i0[a] = static_cast<int>(std::floor(u[a]));
            if (i0[a] > dims[a] - 2) i0[a] = dims[a] - 2; // u == n-1 edge case
            if (i0[a] < 0) i0[a] = 0;                     // single-slice axis
            i1[a] = std::min(i0[a] + 1, dims[a] - 1);
            f[a] = u[a] - i0[a];
        }
        double acc = 0.0;
        for (int c = 0; c < 8; ++c) {
            const int xi = (c & 1) ? i1[0] : i0[0];
            const int yi = (c & 2) ? i1[1] : i0[1];
            const int zi = (c & 4) ? i1[2] : i0[2];
            const double w = ((c & 1) ? f[0] : 1.0 - f[0]) *
                             ((c & 2) ? f[1] : 1.0 - f[1]) *
                             ((c & 4) ? f[2] : 1.0 - f[2]);
            acc += w * at(xi, yi, zi);
        }
        return acc;
    }
};

/// Masks and probability maps are plain Volumes with value invariants
/// (exactly {0,1}; within [0,1]). Operations that require them validate at
/// the call boundary.
using Mask = Volume;
using ProbMap = Volume;

inline void require_binary(const Volume& m, const char* who) {
    for (double v : m.data)
        if (v != 0.0 && v != 1.0)
            throw std::invalid_argument(std::string(who) + ": mask voxels must be exactly 0 or 1");
}

inline std::size_t count_foreground(const Mask& m) {
    std::size_t n = 0;
    for (double v : m.data) n += (v != 0.0);
    return n;
}

/// Axis-aligned physical box, mm. `lo`/`hi` are voxel-center coordinates.
struct Box {
    Triple lo{0, 0, 0};
    Triple hi{0, 0, 0};
    Triple size() const { return {hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]}; }
    Triple center() const {
        return {0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])};
    }
};

/// Grid dims covering the full physical extent (dims*spacing) of `v` at a new
/// spacing, rounded to the nearest voxel count.
inline IndexTriple dims_for_spacing(const Volume& v, const Triple& target_spacing) {
    IndexTriple out;
    for (int a = 0; a < 3; ++a) {
        if (target_spacing[a] <= 0) throw std::invalid_argument("dims_for_spacing: spacing must be positive");
        const double extent = v.dims[a] * v.spacing[a];
        out[a] = std::max(1, static_cast<int>(std::llround(extent / target_spacing[a])));
    }
    return out;
}

/// Trilinear resampling onto a new grid centered at `center` (mm). Samples
/// outside the source support read 0.
inline Volume resample(const Volume& v, const Triple& target_spacing,
                       const IndexTriple& target_dims, const Triple& center) {
    for (int a = 0; a < 3; ++a) {
        if (target_spacing[a] <= 0) throw std::invalid_argument("resample: spacing must be positive");
        if (target_dims[a] < 1) throw std::invalid_argument("resample: dims must be >= 1");
    }
    Triple org;
    for (int a = 0; a < 3; ++a)
        org[a] = center[a] - 0.5 * (target_dims[a] - 1) * target_spacing[a];
    Volume out(target_dims, target_spacing, org);
#pragma omp parallel for schedule(static)
    for (int z = 0; z < target_dims[2]; ++z)
        for (int y = 0; y < target_dims[1]; ++y)
            for (int x = 0; x < target_dims[0]; ++x)
                out.at(x, y, z) = v.sample(out.voxel_center(x, y, z));
    return out;
}

/// Per axis: centered crop when larger, symmetric zero-pad when smaller.
/// Odd differences put the extra padded voxel (and the extra cropped voxel)
/// on the high-index side, so pad-then-crop round-trips exactly.
inline Volume crop_or_pad(const Volume& v, const IndexTriple& target_dims) {
    for (int a = 0; a < 3; ++a)
        if (target_dims[a] < 1) throw std::invalid_argument("crop_or_pad: dims must be >= 1");
    int lo[3]; // index in v of the voxel mapped to output index 0 (may be negative = padding)
    Triple org;
    for (int a = 0; a < 3; ++a) {
        const int diff = v.dims[a] - target_dims[a];
        lo[a] = diff >= 0 ? diff / 2 : -((-diff) / 2);
        org[a] = v.origin[a] + lo[a] * v.spacing[a];
    }
    Volume out(target_dims, v.spacing, org);
    for (int z = 0; z < target_dims[2]; ++z) {
        const int sz = z + lo[2];
        if (sz < 0 || sz >= v.dims[2]) continue;
        for (int y = 0; y < target_dims[1]; ++y) {
            const int sy = y + lo[1];
            if (sy < 0 || sy >= v.dims[1]) continue;
            const int x0 = std::max(0, -lo[0]);
            const int x1 = std::min(target_dims[0], v.dims[0] - lo[0]);
            for (int x = x0; x < x1; ++x)
                out.at(x, y, z) = v.at(x + lo[0], sy, sz);
        }
    }
    return out;
}

/// Shift to zero mean, scale to unit population standard deviation.
inline Volume normalize(const Volume& v) {
    const std::size_t n = v.size();
    if (n < 2) throw degenerate_input("normalize: need at least 2 voxels");
    double mean = 0.0;
    for (double x : v.data) mean += x;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double x : v.data) var += (x - mean) * (x - mean);
    var /= static_cast<double>(n);
    if (var <= 0.0) throw degenerate_input("normalize: constant volume");
    const double inv_std = 1.0 / std::sqrt(var);
    Volume out = v;
    for (double& x : out.data) x = (x - mean) * inv_std;
    return out;
}

/// Foreground where p >= t (inclusive).
inline Mask threshold(const ProbMap& p, double t) {
    if (!(t > 0.0 && t < 1.0)) throw std::invalid_argument("threshold: t must be in (0,1)");
    Mask out = p;
    for (double& x : out.data) x = (x >= t) ? 1.0 : 0.0;
    return out;
}

namespace detail {

/// 1D squared-distance transform (lower envelope of parabolas) on sample
/// positions i*h. f holds squared distances; INF where no feature yet.
/// Infinite entries contribute no parabola.
inline void dt1d(const double* f, double* d, int n, double h,
                 int* v, double* z) {
    const double INF = std::numeric_limits<double>::infinity();
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (f[q] == INF) continue;
        const double xq = q * h;
        double s = 0.0;
        while (k >= 0) {
            const double xv = v[k] * h;
            s = ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2.0 * (xq - xv));
            if (s <= z[k]) --k; else break;
        }
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -INF;
        } else {
            ++k;
            v[k] = q;
            z[k] = s;
        }
    }
    if (k < 0) {
        for (int q = 0; q < n; ++q) d[q] = INF;
        return;
    }
    z[k + 1] = INF;
    int j = 0;
    for (int q = 0; q < n; ++q) {
        const double xq = q * h;
        while (z[j + 1] < xq) ++j;
        const double dx = xq - v[j] * h;
        d[q] = dx * dx + f[v[j]];
    }
}

/// Exact squared Euclidean distance (mm^2) from every voxel to the nearest
/// voxel center where `feature` is true. Separable Felzenszwalb-Huttenlocher.
inline std::vector<double> squared_edt(const Volume& m, bool feature_value) {
    const int nx = m.dims[0], ny = m.dims[1], nz = m.dims[2];
    const double INF = std::numeric_limits<double>::infinity();
    std::vector<double> d(m.size());
    for (std::size_t i = 0; i < m.size(); ++i)
        d[i] = ((m.data[i] != 0.0) == feature_value) ? 0.0 : INF;

    const int nmax = std::max({nx, ny, nz});
#pragma omp parallel
    {
        std::vector<double> f(nmax), g(nmax), z(nmax + 1);
        std::vector<int> v(nmax);
        // x pass
#pragma omp for schedule(static)
        for (int z_i = 0; z_i < nz; ++z_i)
            for (int y = 0; y < ny; ++y) {
                double* row = &d[m.index(0, y, z_i)];
                dt1d(row, g.data(), nx, m.spacing[0], v.data(), z.data());
                std::copy(g.begin(), g.begin() + nx, row);
            }
        // y pass
#pragma omp for schedule(static)
        for (int z_i = 0; z_i < nz; ++z_i)
            for (int x = 0; x < nx; ++x) {
                for (int y = 0; y < ny; ++y) f[y] = d[m.index(x, y, z_i)];
                dt1d(f.data(), g.data(), ny, m.spacing[1], v.data(), z.data());
                for (int y = 0; y < ny; ++y) d[m.index(x, y, z_i)] = g[y];
            }
        // z pass
#pragma omp for schedule(static)
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x) {
                for (int z_i = 0; z_i < nz; ++z_i) f[z_i] = d[m.index(x, y, z_i)];
                dt1d(f.data(), g.data(), nz, m.spacing[2], v.data(), z.data());
                for (int z_i = 0; z_i < nz; ++z_i) d[m.index(x, y, z_i)] = g[z_i];
            }
    }
    return d;
}

} // namespace detail

/// Signed Euclidean distance (mm): negative inside the mask, positive
/// outside. Distance is voxel-center to nearest opposite-class voxel center,
/// offset by half the minimal spacing so boundary voxels sit near zero.
inline Volume signed_distance(const Mask& m) {
    require_binary(m, "signed_distance");
    const std::size_t n_fg = count_foreground(m);
    if (n_fg == 0 || n_fg == m.size())
        throw degenerate_input("signed_distance: mask must contain both classes");
    const std::vector<double> d2_fg = detail::squared_edt(m, true);
    const std::vector<double> d2_bg = detail::squared_edt(m, false);
    const double half = 0.5 * std::min({m.spacing[0], m.spacing[1], m.spacing[2]});
    Volume out(m.dims, m.spacing, m.origin);
    for (std::size_t i = 0; i < m.size(); ++i)
        out.data[i] = (m.data[i] != 0.0) ? -(std::sqrt(d2_bg[i]) - half)
                                         : (std::sqrt(d2_fg[i]) - half);
    return out;
}

/// Spherical structuring element rasterized at the given spacing: odd dims,
/// voxel set iff its center lies within radius_mm of the element center.
inline Mask sphere_element(double radius_mm, const Triple& spacing) {
    if (radius_mm <= 0) throw std::invalid_argument("sphere_element: radius must be positive");
    IndexTriple half;
    for (int a = 0; a < 3; ++a) {
        if (spacing[a] <= 0) throw std::invalid_argument("sphere_element: spacing must be positive");
        half[a] = static_cast<int>(std::ceil(radius_mm / spacing[a]));
        // shrink until the outermost layer can actually contain a voxel
        while (half[a] > 0 && half[a] * spacing[a] > radius_mm) --half[a];
    }
    const IndexTriple dims{2 * half[0] + 1, 2 * half[1] + 1, 2 * half[2] + 1};
    Mask out(dims, spacing, {-half[0] * spacing[0], -half[1] * spacing[1], -half[2] * spacing[2]});
    const double r2 = radius_mm * radius_mm;
    for (int z = -half[2]; z <= half[2]; ++z)
        for (int y = -half[1]; y <= half[1]; ++y)
            for (int x = -half[0]; x <= half[0]; ++x) {
                const double d2 = x * spacing[0] * x * spacing[0] +
                                  y * spacing[1] * y * spacing[1] +
                                  z * spacing[2] * z * spacing[2];
                if (d2 <= r2)
                    out.at(x + half[0], y + half[1], z + half[2]) = 1.0;
            }
    return out;
}

namespace detail {
/// Index offsets of set voxels relative to the element center (dims/2).
inline std::vector<IndexTriple> element_offsets(const Mask& elem) {
    std::vector<IndexTriple> offs;
    const IndexTriple c{elem.dims[0] / 2, elem.dims[1] / 2, elem.dims[2] / 2};
    for (int z = 0; z < elem.dims[2]; ++z)
        for (int y = 0; y < elem.dims[1]; ++y)
            for (int x = 0; x < elem.dims[0]; ++x)
                if (elem.at(x, y, z) != 0.0) offs.push_back({x - c[0], y - c[1], z - c[2]});
    return offs;
}
} // namespace detail

/// Voxel kept iff every element voxel translated to it lands on foreground
/// (outside the grid counts as background).
inline Mask morph_erode(const Mask& m, const Mask& elem) {
    require_binary(m, "morph_erode");
    const auto offs = detail::element_offsets(elem);
    if (offs.empty()) throw std::invalid_argument("morph_erode: empty structuring element");
    Mask out(m.dims, m.spacing, m.origin);
#pragma omp parallel for schedule(static)
    for (int z = 0; z < m.dims[2]; ++z)
        for (int y = 0; y < m.dims[1]; ++y)
            for (int x = 0; x < m.dims[0]; ++x) {
                if (m.at(x, y, z) == 0.0) continue;
                bool keep = true;
                for (const auto& o : offs) {
                    const int xx = x + o[0], yy = y + o[1], zz = z + o[2];
                    if (xx < 0 || yy < 0 || zz < 0 || xx >= m.dims[0] || yy >= m.dims[1] ||
                        zz >= m.dims[2] || m.at(xx, yy, zz) == 0.0) {
                        keep = false;
                        break;
                    }
                }
                if (keep) out.at(x, y, z) = 1.0;
            }
    return out;
}

/// Union of element translates centered on every foreground voxel.
inline Mask morph_dilate(const Mask& m, const Mask& elem) {
    require_binary(m, "morph_dilate");
    const auto offs = detail::element_offsets(elem);
    if (offs.empty()) throw std::invalid_argument("morph_dilate: empty structuring element");
    Mask out(m.dims, m.spacing, m.origin);
#pragma omp parallel for schedule(static)
    for (int z = 0; z < m.dims[2]; ++z)
        for (int y = 0; y < m.dims[1]; ++y)
            for (int x = 0; x < m.dims[0]; ++x) {
                bool hit = false;
                for (const auto& o : offs) {
                    const int xx = x - o[0], yy = y - o[1], zz = z - o[2];
                    if (xx >= 0 && yy >= 0 && zz >= 0 && xx < m.dims[0] && yy < m.dims[1] &&
                        zz < m.dims[2] && m.at(xx, yy, zz) != 0.0) {
                        hit = true;
                        break;
                    }
                }
                if (hit) out.at(x, y, z) = 1.0;
            }
    return out;
}

/// Erosion followed by dilation.
inline Mask morph_open(const Mask& m, const Mask& elem) {
    return morph_dilate(morph_erode(m, elem), elem);
}

/// Minimal physical bounding box of foreground voxel centers.
inline Box tight_box(const Mask& m) {
    require_binary(m, "tight_box");
    Box b;
    bool any = false;
    for (int a = 0; a < 3; ++a) {
        b.lo[a] = std::numeric_limits<double>::infinity();
        b.hi[a] = -std::numeric_limits<double>::infinity();
    }
    for (int z = 0; z < m.dims[2]; ++z)
        for (int y = 0; y < m.dims[1]; ++y)
            for (int x = 0; x < m.dims[0]; ++x)
                if (m.at(x, y, z) != 0.0) {
                    any = true;
                    const Triple c = m.voxel_center(x, y, z);
                    for (int a = 0; a < 3; ++a) {
                        b.lo[a] = std::min(b.lo[a], c[a]);
                        b.hi[a] = std::max(b.hi[a], c[a]);
                    }
                }
    if (!any) throw degenerate_input("tight_box: empty mask");
    return b;
}

} // namespace vseg

#endif
