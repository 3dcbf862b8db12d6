#ifndef VSEG_SHAPE_MODEL_HPP
#define VSEG_SHAPE_MODEL_HPP

// PCA statistical shape model over signed-distance maps. Training masks are
// aligned onto a fixed canonical grid (centroid to grid center, per-axis
// scale so the tight box becomes 80x80x48 mm), converted to SDFs, and
// decomposed into a mean plus orthonormal principal modes via the Gram-matrix
// route (the number of shapes is tiny compared to the voxel count).

#include <cmath>
#include <string>
#include <vector>

#include "vseg/errors.hpp"
#include "vseg/params_io.hpp"
#include "vseg/rng.hpp"
#include "vseg/volume.hpp"

namespace vseg {

inline constexpr IndexTriple kCanonicalDims{96, 96, 64};
inline constexpr Triple kCanonicalSpacing{1.0, 1.0, 1.0};
inline constexpr Triple kAlignedBoxMm{80.0, 80.0, 48.0};

/// Similarity map between an image-grid mask and the canonical model frame:
/// model = (image - centroid) * scale + canonical_center.
struct ShapeAlignment {
    Triple centroid{0, 0, 0};
    Triple scale{1, 1, 1};
    Triple canon_center{0, 0, 0};

    Triple to_model(const Triple& p) const {
        return {(p[0] - centroid[0]) * scale[0] + canon_center[0],
                (p[1] - centroid[1]) * scale[1] + canon_center[1],
                (p[2] - centroid[2]) * scale[2] + canon_center[2]};
    }
    Triple to_image(const Triple& q) const {
        return {(q[0] - canon_center[0]) / scale[0] + centroid[0],
                (q[1] - canon_center[1]) / scale[1] + centroid[1],
                (q[2] - canon_center[2]) / scale[2] + centroid[2]};
    }
};

struct ShapeCoeffs {
    std::vector<double> b;
};

/// Pose of a synthesized instance in a target grid: per-axis scale about the
/// (translated) shape center plus a translation of that center away from the
/// target grid center, mm.
struct ShapePose {
    Triple scale{1, 1, 1};
    Triple translation{0, 0, 0};
};

struct ShapeModel {
    Volume mean_sdf;                // canonical grid
    std::vector<Volume> modes;      // orthonormal as flat vectors
    std::vector<double> eigenvalues; // descending, one per retained mode

    int num_modes() const { return static_cast<int>(modes.size()); }
    Triple canon_center() const { return mean_sdf.center(); }
};

namespace detail {

/// Cyclic Jacobi eigendecomposition of a small symmetric matrix. Returns
/// eigenvalues in descending order; `vecs[i]` is the eigenvector of
/// `vals[i]`.
inline void jacobi_eigen_sym(std::vector<std::vector<double>> a,
                             std::vector<double>& vals,
                             std::vector<std::vector<double>>& vecs) {
    const std::size_t n = a.size();
    vecs.assign(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) vecs[i][i] = 1.0;
    double norm = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) norm += a[i][j] * a[i][j];
    const double tol = 1e-28 * (norm + 1e-300);
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
        if (off < tol) break;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                if (a[p][q] == 0.0) continue;
                const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t i = 0; i < n; ++i) {
                    const double aip = a[i][p], aiq = a[i][q];
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double api = a[p][i], aqi = a[q][i];
                    a[p][i] = c * api - s * aqi;
                    a[q][i] = s * api + c * aqi;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vip = vecs[i][p], viq = vecs[i][q];
                    vecs[i][p] = c * vip - s * viq;
                    vecs[i][q] = s * vip + c * viq;
                }
            }
    }
    vals.resize(n);
    for (std::size_t i = 0; i < n; ++i) vals[i] = a[i][i];
    // sort descending, carrying eigenvectors (stored column-wise in vecs[i][j]: row i, col j)
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return vals[x] > vals[y]; });
    std::vector<double> sv(n);
    std::vector<std::vector<double>> svec(n, std::vector<double>(n));
    for (std::size_t j = 0; j < n; ++j) {
        sv[j] = vals[order[j]];
        for (std::size_t i = 0; i < n; ++i) svec[j][i] = vecs[i][order[j]];
    }
    vals = std::move(sv);
    vecs = std::move(svec); // vecs[j] is now the j-th eigenvector
}

} // namespace detail

/// Alignment carrying a mask's centroid and tight box onto the canonical
/// 80x80x48 mm normalized pose.
inline ShapeAlignment compute_alignment(const Mask& m) {
    require_binary(m, "compute_alignment");
    const Box box = tight_box(m); // throws degenerate_input when empty
    double cx = 0, cy = 0, cz = 0;
    std::size_t n = 0;
    for (int z = 0; z < m.dims[2]; ++z)
        for (int y = 0; y < m.dims[1]; ++y)
            for (int x = 0; x < m.dims[0]; ++x)
                if (m.at(x, y, z) != 0.0) {
                    const Triple c = m.voxel_center(x, y, z);
                    cx += c[0];
                    cy += c[1];
                    cz += c[2];
                    ++n;
                }
    ShapeAlignment a;
    a.centroid = {cx / n, cy / n, cz / n};
    const Triple size = box.size();
    for (int ax = 0; ax < 3; ++ax) {
        if (size[ax] <= 0.0)
            throw degenerate_input("compute_alignment: mask is flat along an axis");
        a.scale[ax] = kAlignedBoxMm[ax] / size[ax];
    }
    Volume canon(kCanonicalDims, kCanonicalSpacing, {0, 0, 0});
    a.canon_center = canon.center();
    return a;
}

/// Mask resampled into the canonical frame (trilinear + 0.5 threshold).
inline Mask align_to_canonical(const Mask& m, const ShapeAlignment& a) {
    Mask out(kCanonicalDims, kCanonicalSpacing, {0, 0, 0});
    for (int z = 0; z < out.dims[2]; ++z)
        for (int y = 0; y < out.dims[1]; ++y)
            for (int x = 0; x < out.dims[0]; ++x) {
                const Triple q = out.voxel_center(x, y, z);
                if (m.sample(a.to_image(q)) >= 0.5) out.at(x, y, z) = 1.0;
            }
    return out;
}

/// PCA shape model from >= 3 masks; keeps the smallest mode count explaining
/// 95% of the variance, capped at min(m_max, 15) and the sample rank.
inline ShapeModel build_shape_model(const std::vector<Mask>& masks, int m_max = 15) {
    if (masks.size() < 3)
        throw insufficient_data("build_shape_model: need at least 3 masks");
    const std::size_t n = masks.size();
    std::vector<std::vector<double>> sdfs;
    sdfs.reserve(n);
    for (const Mask& m : masks) {
        const ShapeAlignment a = compute_alignment(m);
        const Mask aligned = align_to_canonical(m, a);
        if (count_foreground(aligned) == 0)
            throw degenerate_input("build_shape_model: mask vanished under alignment");
        sdfs.push_back(signed_distance(aligned).data);
    }
    const std::size_t dim = sdfs[0].size();
    ShapeModel model;
    model.mean_sdf = Volume(kCanonicalDims, kCanonicalSpacing, {0, 0, 0});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t v = 0; v < dim; ++v) model.mean_sdf.data[v] += sdfs[i][v];
    for (double& v : model.mean_sdf.data) v /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t v = 0; v < dim; ++v) sdfs[i][v] -= model.mean_sdf.data[v];

    // Gram matrix of the centered SDF vectors
    std::vector<std::vector<double>> gram(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j) {
            double acc = 0.0;
#pragma omp simd reduction(+ : acc)
            for (std::size_t v = 0; v < dim; ++v) acc += sdfs[i][v] * sdfs[j][v];
            gram[i][j] = gram[j][i] = acc;
        }
    std::vector<double> gamma;
    std::vector<std::vector<double>> u;
    detail::jacobi_eigen_sym(gram, gamma, u);

    double total = 0.0;
    for (double g : gamma) total += std::max(g, 0.0);
    const int cap = std::min({m_max, 15, static_cast<int>(n) - 1});
    int m = 0;
    double cum = 0.0;
    if (total > 1e-9) {
        for (int i = 0; i < cap; ++i) {
            if (gamma[static_cast<std::size_t>(i)] <= 1e-9 * gamma[0]) break;
            cum += gamma[static_cast<std::size_t>(i)];
            ++m;
            if (cum >= 0.95 * total) break;
        }
    }
    for (int i = 0; i < m; ++i) {
        Volume mode(kCanonicalDims, kCanonicalSpacing, {0, 0, 0});
        const std::vector<double>& ui = u[static_cast<std::size_t>(i)];
        for (std::size_t j = 0; j < n; ++j) {
            const double w = ui[j];
            const double* src = sdfs[j].data();
#pragma omp simd
            for (std::size_t v = 0; v < dim; ++v) mode.data[v] += w * src[v];
        }
        double norm = 0.0;
        for (double v : mode.data) norm += v * v;
        norm = std::sqrt(norm);
        for (double& v : mode.data) v /= norm;
        model.modes.push_back(std::move(mode));
        model.eigenvalues.push_back(gamma[static_cast<std::size_t>(i)] /
                                    static_cast<double>(n - 1));
    }
    return model;
}

/// Coefficients of a mask under the model: align, SDF, subtract the mean,
/// inner products with the modes.
inline ShapeCoeffs project(const ShapeModel& model, const Mask& m) {
    const ShapeAlignment a = compute_alignment(m);
    const Mask aligned = align_to_canonical(m, a);
    if (count_foreground(aligned) == 0)
        throw degenerate_input("project: mask vanished under alignment");
    const Volume sdf = signed_distance(aligned);
    ShapeCoeffs c;
    c.b.resize(model.modes.size());
    for (std::size_t i = 0; i < model.modes.size(); ++i) {
        double acc = 0.0;
        const double* mode = model.modes[i].data.data();
#pragma omp simd reduction(+ : acc)
        for (std::size_t v = 0; v < sdf.data.size(); ++v)
            acc += (sdf.data[v] - model.mean_sdf.data[v]) * mode[v];
        c.b[i] = acc;
    }
    return c;
}

/// mean + sum b_i * mode_i on the canonical grid. Coefficients beyond the
/// provided length are treated as zero.
inline Volume synth_sdf(const ShapeModel& model, const ShapeCoeffs& coeffs) {
    Volume sdf = model.mean_sdf;
    for (std::size_t i = 0; i < coeffs.b.size() && i < model.modes.size(); ++i) {
        const double w = coeffs.b[i];
        if (w == 0.0) continue;
        const double* mode = model.modes[i].data.data();
#pragma omp simd
        for (std::size_t v = 0; v < sdf.data.size(); ++v) sdf.data[v] += w * mode[v];
    }
    return sdf;
}

/// Canonical-frame point for a target-grid point under a pose.
inline Triple pose_to_canonical(const Triple& p, const ShapePose& pose,
                                const Triple& target_center, const Triple& canon_center) {
    return {(p[0] - target_center[0] - pose.translation[0]) / pose.scale[0] + canon_center[0],
            (p[1] - target_center[1] - pose.translation[1]) / pose.scale[1] + canon_center[1],
            (p[2] - target_center[2] - pose.translation[2]) / pose.scale[2] + canon_center[2]};
}

/// Rasterize a shape instance into a target grid: resample the synthesized
/// SDF (trilinear; outside the canonical support counts as far outside) and
/// threshold at zero.
inline Mask instance(const ShapeModel& model, const ShapeCoeffs& coeffs, const ShapePose& pose,
                     const IndexTriple& target_dims, const Triple& target_spacing,
                     const Triple& target_origin) {
    for (int a = 0; a < 3; ++a)
        if (pose.scale[a] <= 0.0) throw std::invalid_argument("instance: scales must be positive");
    const Volume sdf = synth_sdf(model, coeffs);
    Mask out(target_dims, target_spacing, target_origin);
    const Triple cc = model.canon_center();
    const Triple tc = out.center();
#pragma omp parallel for schedule(static)
    for (int z = 0; z < target_dims[2]; ++z)
        for (int y = 0; y < target_dims[1]; ++y)
            for (int x = 0; x < target_dims[0]; ++x) {
                const Triple q = pose_to_canonical(out.voxel_center(x, y, z), pose, tc, cc);
                bool inside_support = true;
                for (int a = 0; a < 3; ++a)
                    if (q[a] < sdf.origin[a] || q[a] > sdf.origin[a] + (sdf.dims[a] - 1) * sdf.spacing[a])
                        inside_support = false;
                if (inside_support && sdf.sample(q) < 0.0) out.at(x, y, z) = 1.0;
            }
    return out;
}

/// Uniform coefficients in [-spread*sqrt(lambda_i), +spread*sqrt(lambda_i)].
inline ShapeCoeffs sample_coeffs(const ShapeModel& model, Rng& rng, double spread = 2.0) {
    if (spread < 0.0) throw std::invalid_argument("sample_coeffs: spread must be >= 0");
    ShapeCoeffs c;
    c.b.resize(model.modes.size());
    for (std::size_t i = 0; i < c.b.size(); ++i) {
        const double half = spread * std::sqrt(std::max(model.eigenvalues[i], 0.0));
        c.b[i] = rng.uniform(-half, half);
    }
    return c;
}

inline void save_shape_model(const ShapeModel& model, const std::string& path) {
    std::vector<NamedArray> arrays;
    const Volume& g = model.mean_sdf;
    arrays.push_back({"grid/dims", {3},
                      {static_cast<double>(g.dims[0]), static_cast<double>(g.dims[1]),
                       static_cast<double>(g.dims[2])}});
    arrays.push_back({"grid/spacing", {3}, {g.spacing[0], g.spacing[1], g.spacing[2]}});
    arrays.push_back({"grid/origin", {3}, {g.origin[0], g.origin[1], g.origin[2]}});
    arrays.push_back({"eigenvalues", {static_cast<std::int64_t>(model.eigenvalues.size())},
                      model.eigenvalues});
    arrays.push_back({"mean", {g.dims[0], g.dims[1], g.dims[2]}, g.data});
    for (std::size_t i = 0; i < model.modes.size(); ++i) {
        char name[16];
        std::snprintf(name, sizeof name, "mode_%03zu", i);
        arrays.push_back({name, {g.dims[0], g.dims[1], g.dims[2]}, model.modes[i].data});
    }
    save_arrays(path, arrays);
}

inline ShapeModel load_shape_model(const std::string& path) {
    const std::vector<NamedArray> arrays = load_arrays(path);
    const auto& dims = find_array(arrays, "grid/dims").values;
    const auto& spacing = find_array(arrays, "grid/spacing").values;
    const auto& origin = find_array(arrays, "grid/origin").values;
    const IndexTriple d{static_cast<int>(dims.at(0)), static_cast<int>(dims.at(1)),
                        static_cast<int>(dims.at(2))};
    ShapeModel model;
    model.mean_sdf = Volume(d, {spacing.at(0), spacing.at(1), spacing.at(2)},
                            {origin.at(0), origin.at(1), origin.at(2)});
    model.mean_sdf.data = find_array(arrays, "mean").values;
    if (model.mean_sdf.data.size() != model.mean_sdf.size())
        throw corrupt_file("shape model mean size mismatch: " + path);
    model.eigenvalues = find_array(arrays, "eigenvalues").values;
    for (std::size_t i = 0; i < model.eigenvalues.size(); ++i) {
        char name[16];
        std::snprintf(name, sizeof name, "mode_%03zu", i);
        Volume mode = model.mean_sdf;
        mode.data = find_array(arrays, name).values;
        if (mode.data.size() != mode.size())
            throw corrupt_file("shape model mode size mismatch: " + path);
        model.modes.push_back(std::move(mode));
    }
    return model;
}

} // namespace vseg

#endif
