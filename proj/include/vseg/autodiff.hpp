#ifndef VSEG_AUTODIFF_HPP
#define VSEG_AUTODIFF_HPP

// Minimal reverse-mode tensor core: exactly the operations the segmentation
// networks need (3D conv / transposed conv, ReLU, concat, add, dropout,
// channel softmax, soft Dice) plus a little glue (mul, sum, channel select,
// center crop). Everything is double precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vseg/errors.hpp"
#include "vseg/rng.hpp"
#include "vseg/volume.hpp"

namespace vseg {

/// Logical shape (batch, channels, x, y, z). Layout is x-fastest:
/// index = x + X*(y + Y*(z + Z*(c + C*b))), so a (1,1,·) tensor shares the
/// Volume memory layout.
struct TensorShape {
    int b = 1, c = 1, x = 1, y = 1, z = 1;
    std::size_t numel() const {
        return static_cast<std::size_t>(b) * c * x * y * z;
    }
    std::size_t spatial() const { return static_cast<std::size_t>(x) * y * z; }
    bool same_spatial(const TensorShape& o) const { return x == o.x && y == o.y && z == o.z; }
    bool operator==(const TensorShape&) const = default;
};

struct TensorNode;
using TensorPtr = std::shared_ptr<TensorNode>;

/// Graph node: value, lazily allocated gradient, parents and the backward
/// rule of the producing operation.
struct TensorNode {
    TensorShape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<TensorPtr> parents;
    std::function<void(TensorNode&)> backward_fn;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
    }
};

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
} // namespace detail

/// RAII guard disabling graph construction (inference mode).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
};

/// Value-semantic handle to a graph node.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(TensorPtr n) : n_(std::move(n)) {}

    static Tensor zeros(const TensorShape& s, bool requires_grad = false) {
        auto n = std::make_shared<TensorNode>();
        n->shape = s;
        n->value.assign(s.numel(), 0.0);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }
    static Tensor from_values(const TensorShape& s, std::vector<double> vals,
                              bool requires_grad = false) {
        if (vals.size() != s.numel())
            throw std::invalid_argument("Tensor: value count does not match shape");
        auto n = std::make_shared<TensorNode>();
        n->shape = s;
        n->value = std::move(vals);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    bool defined() const { return n_ != nullptr; }
    const TensorShape& shape() const { return n_->shape; }
    const std::vector<double>& value() const { return n_->value; }
    std::vector<double>& value() { return n_->value; }
    const std::vector<double>& grad() const { return n_->grad; }
    bool requires_grad() const { return n_->requires_grad; }
    double scalar() const {
        if (n_->shape.numel() != 1) throw std::invalid_argument("Tensor::scalar: not a scalar");
        return n_->value[0];
    }
    TensorNode* node() const { return n_.get(); }
    const TensorPtr& ptr() const { return n_; }

private:
    TensorPtr n_;
};

inline Tensor tensor_from_volume(const Volume& v, bool requires_grad = false) {
    return Tensor::from_values({1, 1, v.dims[0], v.dims[1], v.dims[2]}, v.data, requires_grad);
}

/// Extract one channel of one batch entry as a Volume, taking grid geometry
/// (spacing/origin) from `like`.
inline Volume volume_from_channel(const Tensor& t, int batch, int channel, const Volume& like) {
    const TensorShape& s = t.shape();
    if (like.dims[0] != s.x || like.dims[1] != s.y || like.dims[2] != s.z)
        throw std::invalid_argument("volume_from_channel: geometry dims mismatch");
    Volume out(like.dims, like.spacing, like.origin);
    const std::size_t off = (static_cast<std::size_t>(batch) * s.c + channel) * s.spatial();
    std::copy_n(t.value().begin() + off, s.spatial(), out.data.begin());
    return out;
}

/// Convolution parameters. For conv3d, weights are (out_ch, in_ch, k, k, k);
/// conv_transpose3d reads the same array as (in_ch, out_ch, k, k, k), so a
/// shared weight tensor gives an exact adjoint pair. Bias length equals the
/// operation's output channel count. Padding is always "same"
/// (output spatial dims = ceil(input / stride)).
struct ConvParams {
    Tensor weights;
    Tensor bias;
    int stride = 1;

    int kernel() const { return weights.shape().x; }
};

namespace conv_detail {

inline int ceil_div(int a, int b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); }
inline int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
inline int same_out(int in, int s) { return (in + s - 1) / s; }
inline int same_pad_lo(int in, int out, int k, int s) {
    const int total = std::max((out - 1) * s + k - in, 0);
    return total / 2;
}

/// Geometry of one conv application (single batch entry).
struct Geom {
    int ic, oc, k, s;
    int ix, iy, iz;
    int ox, oy, oz;
    int plx, ply, plz;

    static Geom make(int in_ch, int out_ch, int k, int s, int ix, int iy, int iz) {
        Geom g;
        g.ic = in_ch; g.oc = out_ch; g.k = k; g.s = s;
        g.ix = ix; g.iy = iy; g.iz = iz;
        g.ox = same_out(ix, s); g.oy = same_out(iy, s); g.oz = same_out(iz, s);
        g.plx = same_pad_lo(ix, g.ox, k, s);
        g.ply = same_pad_lo(iy, g.oy, k, s);
        g.plz = same_pad_lo(iz, g.oz, k, s);
        return g;
    }
    std::size_t in_spatial() const { return static_cast<std::size_t>(ix) * iy * iz; }
    std::size_t out_spatial() const { return static_cast<std::size_t>(ox) * oy * oz; }
};

inline bool use_k3s1(const Geom& g) {
    return g.k == 3 && g.s == 1 && g.ix >= 2 && g.iy >= 2 && g.iz >= 2;
}

/// k=3 stride-1 forward with the kx taps fused into one pass per row and a
/// row accumulator that is stored once per (oz, oy).
inline void forward_k3s1(const Geom& g, const double* x, const double* w, const double* bias,
                         double* y, bool accumulate) {
    const std::size_t cs = g.in_spatial();
    const int X = g.ix, Y = g.iy, Z = g.iz;
#pragma omp parallel for schedule(static)
    for (int oc = 0; oc < g.oc; ++oc) {
        double* yc = y + cs * oc;
        const double* woc = w + static_cast<std::size_t>(oc) * g.ic * 27;
        std::vector<double> buf(static_cast<std::size_t>(X));
        for (int oz = 0; oz < Z; ++oz)
            for (int oy = 0; oy < Y; ++oy) {
                double* yrow = yc + static_cast<std::size_t>(X) * (oy + static_cast<std::size_t>(Y) * oz);
                if (accumulate) std::copy_n(yrow, X, buf.data());
                else std::fill(buf.begin(), buf.end(), bias ? bias[oc] : 0.0);
                for (int ic = 0; ic < g.ic; ++ic) {
                    const double* xc = x + cs * ic;
                    const double* wk = woc + static_cast<std::size_t>(ic) * 27;
                    for (int kz = 0; kz < 3; ++kz) {
                        const int iz = oz + kz - 1;
                        if (iz < 0 || iz >= Z) continue;
                        for (int ky = 0; ky < 3; ++ky) {
                            const int iy = oy + ky - 1;
                            if (iy < 0 || iy >= Y) continue;
                            const double* xrow = xc + static_cast<std::size_t>(X) * (iy + static_cast<std::size_t>(Y) * iz);
                            const double* wt = wk + 3 * (ky + 3 * kz);
                            const double w0 = wt[0], w1 = wt[1], w2 = wt[2];
                            double* b = buf.data();
                            b[0] += w1 * xrow[0] + w2 * xrow[1];
#pragma omp simd
                            for (int ox = 1; ox < X - 1; ++ox)
                                b[ox] += w0 * xrow[ox - 1] + w1 * xrow[ox] + w2 * xrow[ox + 1];
                            b[X - 1] += w0 * xrow[X - 2] + w1 * xrow[X - 1];
                        }
                    }
                }
                std::copy_n(buf.data(), X, yrow);
            }
    }
}

/// k=3 stride-1 adjoint with fused taps (kernel reversed along x).
inline void adj_data_k3s1(const Geom& g, const double* dy, const double* w, double* dx) {
    const std::size_t cs = g.in_spatial();
    const int X = g.ix, Y = g.iy, Z = g.iz;
#pragma omp parallel for schedule(static)
    for (int ic = 0; ic < g.ic; ++ic) {
        double* dxc = dx + cs * ic;
        std::vector<double> buf(static_cast<std::size_t>(X));
        for (int iz = 0; iz < Z; ++iz)
            for (int iy = 0; iy < Y; ++iy) {
                double* dxrow = dxc + static_cast<std::size_t>(X) * (iy + static_cast<std::size_t>(Y) * iz);
                std::copy_n(dxrow, X, buf.data());
                for (int oc = 0; oc < g.oc; ++oc) {
                    const double* dyc = dy + cs * oc;
                    const double* wk = w + (static_cast<std::size_t>(oc) * g.ic + ic) * 27;
                    for (int kz = 0; kz < 3; ++kz) {
                        const int oz = iz - kz + 1;
                        if (oz < 0 || oz >= Z) continue;
                        for (int ky = 0; ky < 3; ++ky) {
                            const int oy = iy - ky + 1;
                            if (oy < 0 || oy >= Y) continue;
                            const double* dyrow = dyc + static_cast<std::size_t>(X) * (oy + static_cast<std::size_t>(Y) * oz);
                            const double* wt = wk + 3 * (ky + 3 * kz);
                            const double w0 = wt[0], w1 = wt[1], w2 = wt[2];
                            double* b = buf.data();
                            b[0] += w0 * dyrow[1] + w1 * dyrow[0];
#pragma omp simd
                            for (int ix = 1; ix < X - 1; ++ix)
                                b[ix] += w0 * dyrow[ix + 1] + w1 * dyrow[ix] + w2 * dyrow[ix - 1];
                            b[X - 1] += w1 * dyrow[X - 1] + w2 * dyrow[X - 2];
                        }
                    }
                }
                std::copy_n(buf.data(), X, dxrow);
            }
    }
}

/// k=3 stride-1 weight gradient: the three kx dot products of each (kz, ky)
/// pair share one pass over the rows.
inline void grad_w_k3s1(const Geom& g, const double* x, const double* dy, double* dw) {
    const std::size_t cs = g.in_spatial();
    const int X = g.ix, Y = g.iy, Z = g.iz;
#pragma omp parallel for schedule(static)
    for (int oc = 0; oc < g.oc; ++oc) {
        const double* dyc = dy + cs * oc;
        for (int ic = 0; ic < g.ic; ++ic) {
            const double* xc = x + cs * ic;
            double* wk = dw + (static_cast<std::size_t>(oc) * g.ic + ic) * 27;
            for (int kz = 0; kz < 3; ++kz) {
                const int oz0 = std::max(0, 1 - kz), oz1 = std::min(Z - 1, Z - kz);
                for (int ky = 0; ky < 3; ++ky) {
                    const int oy0 = std::max(0, 1 - ky), oy1 = std::min(Y - 1, Y - ky);
                    double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0;
                    for (int oz = oz0; oz <= oz1; ++oz) {
                        const int iz = oz + kz - 1;
                        for (int oy = oy0; oy <= oy1; ++oy) {
                            const int iy = oy + ky - 1;
                            const double* dyrow = dyc + static_cast<std::size_t>(X) * (oy + static_cast<std::size_t>(Y) * oz);
                            const double* xrow = xc + static_cast<std::size_t>(X) * (iy + static_cast<std::size_t>(Y) * iz);
                            acc1 += dyrow[0] * xrow[0];
                            acc2 += dyrow[0] * xrow[1];
#pragma omp simd reduction(+ : acc0, acc1, acc2)
                            for (int ox = 1; ox < X - 1; ++ox) {
                                acc0 += dyrow[ox] * xrow[ox - 1];
                                acc1 += dyrow[ox] * xrow[ox];
                                acc2 += dyrow[ox] * xrow[ox + 1];
                            }
                            acc0 += dyrow[X - 1] * xrow[X - 2];
                            acc1 += dyrow[X - 1] * xrow[X - 1];
                        }
                    }
                    double* wt = wk + 3 * (ky + 3 * kz);
                    wt[0] += acc0;
                    wt[1] += acc1;
                    wt[2] += acc2;
                }
            }
        }
    }
}

/// y(oc,·) = bias(oc) + sum_ic x(ic,·) * W(oc,ic,·), or += the correlation
/// when `accumulate` is set. Weight layout is kx-fastest:
/// W[kx + k*(ky + k*(kz + k*(ic + IC*oc)))].
inline void forward(const Geom& g, const double* x, const double* w, const double* bias,
                    double* y, bool accumulate = false) {
    if (use_k3s1(g)) {
        forward_k3s1(g, x, w, bias, y, accumulate);
        return;
    }
    const std::size_t xcs = g.in_spatial();
    const std::size_t ycs = g.out_spatial();
    const std::size_t k3 = static_cast<std::size_t>(g.k) * g.k * g.k;
#pragma omp parallel for schedule(static)
    for (int oc = 0; oc < g.oc; ++oc) {
        double* yc = y + ycs * oc;
        if (!accumulate) {
            const double bv = bias ? bias[oc] : 0.0;
            std::fill(yc, yc + ycs, bv);
        }
        for (int ic = 0; ic < g.ic; ++ic) {
            const double* xc = x + xcs * ic;
            const double* wk = w + (static_cast<std::size_t>(oc) * g.ic + ic) * k3;
            for (int kz = 0; kz < g.k; ++kz) {
                const int oz0 = std::max(0, ceil_div(g.plz - kz, g.s));
                const int oz1 = std::min(g.oz - 1, floor_div(g.iz - 1 + g.plz - kz, g.s));
                for (int ky = 0; ky < g.k; ++ky) {
                    const int oy0 = std::max(0, ceil_div(g.ply - ky, g.s));
                    const int oy1 = std::min(g.oy - 1, floor_div(g.iy - 1 + g.ply - ky, g.s));
                    for (int kx = 0; kx < g.k; ++kx) {
                        const double wv = wk[kx + g.k * (ky + g.k * kz)];
                        const int ox0 = std::max(0, ceil_div(g.plx - kx, g.s));
                        const int ox1 = std::min(g.ox - 1, floor_div(g.ix - 1 + g.plx - kx, g.s));
                        for (int oz = oz0; oz <= oz1; ++oz) {
                            const int iz = oz * g.s + kz - g.plz;
                            for (int oy = oy0; oy <= oy1; ++oy) {
                                const int iy = oy * g.s + ky - g.ply;
                                double* yrow = yc + static_cast<std::size_t>(g.ox) * (oy + static_cast<std::size_t>(g.oy) * oz);
                                const double* xrow = xc + static_cast<std::size_t>(g.ix) * (iy + static_cast<std::size_t>(g.iy) * iz) + (kx - g.plx);
                                if (g.s == 1) {
                                    for (int ox = ox0; ox <= ox1; ++ox) yrow[ox] += wv * xrow[ox];
                                } else {
                                    for (int ox = ox0; ox <= ox1; ++ox)
                                        yrow[ox] += wv * xrow[static_cast<std::ptrdiff_t>(ox) * g.s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// dx(ic,·) += sum_oc dy(oc,·) *adj W(oc,ic,·) — the adjoint of `forward`.
inline void adj_data(const Geom& g, const double* dy, const double* w, double* dx) {
    if (use_k3s1(g)) {
        adj_data_k3s1(g, dy, w, dx);
        return;
    }
    const std::size_t xcs = g.in_spatial();
    const std::size_t ycs = g.out_spatial();
    const std::size_t k3 = static_cast<std::size_t>(g.k) * g.k * g.k;
#pragma omp parallel for schedule(static)
    for (int ic = 0; ic < g.ic; ++ic) {
        double* dxc = dx + xcs * ic;
        for (int oc = 0; oc < g.oc; ++oc) {
            const double* dyc = dy + ycs * oc;
            const double* wk = w + (static_cast<std::size_t>(oc) * g.ic + ic) * k3;
            for (int kz = 0; kz < g.k; ++kz) {
                const int oz0 = std::max(0, ceil_div(g.plz - kz, g.s));
                const int oz1 = std::min(g.oz - 1, floor_div(g.iz - 1 + g.plz - kz, g.s));
                for (int ky = 0; ky < g.k; ++ky) {
                    const int oy0 = std::max(0, ceil_div(g.ply - ky, g.s));
                    const int oy1 = std::min(g.oy - 1, floor_div(g.iy - 1 + g.ply - ky, g.s));
                    for (int kx = 0; kx < g.k; ++kx) {
                        const double wv = wk[kx + g.k * (ky + g.k * kz)];
                        const int ox0 = std::max(0, ceil_div(g.plx - kx, g.s));
                        const int ox1 = std::min(g.ox - 1, floor_div(g.ix - 1 + g.plx - kx, g.s));
                        for (int oz = oz0; oz <= oz1; ++oz) {
                            const int iz = oz * g.s + kz - g.plz;
                            for (int oy = oy0; oy <= oy1; ++oy) {
                                const int iy = oy * g.s + ky - g.ply;
                                const double* dyrow = dyc + static_cast<std::size_t>(g.ox) * (oy + static_cast<std::size_t>(g.oy) * oz);
                                double* dxrow = dxc + static_cast<std::size_t>(g.ix) * (iy + static_cast<std::size_t>(g.iy) * iz) + (kx - g.plx);
                                if (g.s == 1) {
                                    for (int ox = ox0; ox <= ox1; ++ox) dxrow[ox] += wv * dyrow[ox];
                                } else {
                                    for (int ox = ox0; ox <= ox1; ++ox)
                                        dxrow[static_cast<std::ptrdiff_t>(ox) * g.s] += wv * dyrow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// dW(oc,ic,·) += correlation of x with dy; db(oc) += sum dy(oc,·).
inline void grad_w(const Geom& g, const double* x, const double* dy, double* dw, double* db) {
    const std::size_t xcs = g.in_spatial();
    const std::size_t ycs = g.out_spatial();
    const std::size_t k3 = static_cast<std::size_t>(g.k) * g.k * g.k;
    if (db) {
#pragma omp parallel for schedule(static)
        for (int oc = 0; oc < g.oc; ++oc) {
            const double* dyc = dy + ycs * oc;
            double acc = 0.0;
#pragma omp simd reduction(+ : acc)
            for (std::size_t i = 0; i < ycs; ++i) acc += dyc[i];
            db[oc] += acc;
        }
    }
    if (!dw) return;
    if (use_k3s1(g)) {
        grad_w_k3s1(g, x, dy, dw);
        return;
    }
#pragma omp parallel for schedule(static)
    for (int oc = 0; oc < g.oc; ++oc) {
        const double* dyc = dy + ycs * oc;
        for (int ic = 0; ic < g.ic; ++ic) {
            const double* xc = x + xcs * ic;
            double* wk = dw + (static_cast<std::size_t>(oc) * g.ic + ic) * k3;
            for (int kz = 0; kz < g.k; ++kz) {
                const int oz0 = std::max(0, ceil_div(g.plz - kz, g.s));
                const int oz1 = std::min(g.oz - 1, floor_div(g.iz - 1 + g.plz - kz, g.s));
                for (int ky = 0; ky < g.k; ++ky) {
                    const int oy0 = std::max(0, ceil_div(g.ply - ky, g.s));
                    const int oy1 = std::min(g.oy - 1, floor_div(g.iy - 1 + g.ply - ky, g.s));
                    for (int kx = 0; kx < g.k; ++kx) {
                        const int ox0 = std::max(0, ceil_div(g.plx - kx, g.s));
                        const int ox1 = std::min(g.ox - 1, floor_div(g.ix - 1 + g.plx - kx, g.s));
                        double acc = 0.0;
                        for (int oz = oz0; oz <= oz1; ++oz) {
                            const int iz = oz * g.s + kz - g.plz;
                            for (int oy = oy0; oy <= oy1; ++oy) {
                                const int iy = oy * g.s + ky - g.ply;
                                const double* dyrow = dyc + static_cast<std::size_t>(g.ox) * (oy + static_cast<std::size_t>(g.oy) * oz);
                                const double* xrow = xc + static_cast<std::size_t>(g.ix) * (iy + static_cast<std::size_t>(g.iy) * iz) + (kx - g.plx);
                                double racc = 0.0;
                                if (g.s == 1) {
#pragma omp simd reduction(+ : racc)
                                    for (int ox = ox0; ox <= ox1; ++ox) racc += dyrow[ox] * xrow[ox];
                                } else {
#pragma omp simd reduction(+ : racc)
                                    for (int ox = ox0; ox <= ox1; ++ox)
                                        racc += dyrow[ox] * xrow[static_cast<std::ptrdiff_t>(ox) * g.s];
                                }
                                acc += racc;
                            }
                        }
                        wk[kx + g.k * (ky + g.k * kz)] += acc;
                    }
                }
            }
        }
    }
}

} // namespace conv_detail

namespace detail {

inline Tensor make_op(TensorShape shape, std::vector<double> value,
                      std::vector<TensorPtr> parents,
                      std::function<void(TensorNode&)> backward_fn) {
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->value = std::move(value);
    bool needs = false;
    if (grad_mode())
        for (const TensorPtr& p : parents) needs = needs || p->requires_grad;
    if (needs) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(n));
}

} // namespace detail

/// Strided 3D cross-correlation with zero "same" padding. Differentiable in
/// the input, weights, and bias.
inline Tensor conv3d(const Tensor& x, const ConvParams& p) {
    const TensorShape& xs = x.shape();
    const TensorShape& ws = p.weights.shape();
    const int k = ws.x;
    if (ws.x != ws.y || ws.y != ws.z || k % 2 == 0)
        throw std::invalid_argument("conv3d: kernel must be cubic with odd size");
    if (p.stride < 1) throw std::invalid_argument("conv3d: stride must be >= 1");
    if (xs.c != ws.c)
        throw std::invalid_argument("conv3d: input channel count mismatch");
    if (static_cast<int>(p.bias.shape().numel()) != ws.b)
        throw std::invalid_argument("conv3d: bias length must equal output channels");

    const auto g = conv_detail::Geom::make(ws.c, ws.b, k, p.stride, xs.x, xs.y, xs.z);
    TensorShape os{xs.b, g.oc, g.ox, g.oy, g.oz};
    std::vector<double> out(os.numel());
    const std::size_t xbs = static_cast<std::size_t>(xs.c) * g.in_spatial();
    const std::size_t ybs = static_cast<std::size_t>(os.c) * g.out_spatial();
    for (int b = 0; b < xs.b; ++b)
        conv_detail::forward(g, x.value().data() + b * xbs, p.weights.value().data(),
                             p.bias.value().data(), out.data() + b * ybs);

    const int batches = xs.b;
    return detail::make_op(os, std::move(out), {x.ptr(), p.weights.ptr(), p.bias.ptr()},
                           [g, xbs, ybs, batches](TensorNode& self) {
                               TensorNode& xn = *self.parents[0];
                               TensorNode& wn = *self.parents[1];
                               TensorNode& bn = *self.parents[2];
                               for (int b = 0; b < batches; ++b) {
                                   const double* dy = self.grad.data() + b * ybs;
                                   if (xn.requires_grad) {
                                       xn.ensure_grad();
                                       conv_detail::adj_data(g, dy, wn.value.data(),
                                                             xn.grad.data() + b * xbs);
                                   }
                                   if (wn.requires_grad || bn.requires_grad) {
                                       if (wn.requires_grad) wn.ensure_grad();
                                       if (bn.requires_grad) bn.ensure_grad();
                                       conv_detail::grad_w(g, xn.value.data() + b * xbs, dy,
                                                           wn.requires_grad ? wn.grad.data() : nullptr,
                                                           bn.requires_grad ? bn.grad.data() : nullptr);
                                   }
                               }
                           });
}

/// Transposed convolution: exactly the adjoint of conv3d with stride 2, so
/// output spatial dims are 2x the input dims. Weights are read as
/// (in_ch, out_ch, k, k, k).
inline Tensor conv_transpose3d(const Tensor& x, const ConvParams& p) {
    const TensorShape& xs = x.shape();
    const TensorShape& ws = p.weights.shape();
    const int k = ws.x;
    if (p.stride != 2) throw std::invalid_argument("conv_transpose3d: only stride 2 is supported");
    if (ws.x != ws.y || ws.y != ws.z || k % 2 == 0)
        throw std::invalid_argument("conv_transpose3d: kernel must be cubic with odd size");
    if (xs.c != ws.b)
        throw std::invalid_argument("conv_transpose3d: input channel count mismatch");
    if (static_cast<int>(p.bias.shape().numel()) != ws.c)
        throw std::invalid_argument("conv_transpose3d: bias length must equal output channels");

    // Geometry of the associated forward conv: (out_ch=xs.c) <- (in_ch=ws.c) on a 2x grid.
    const auto g = conv_detail::Geom::make(ws.c, xs.c, k, 2, 2 * xs.x, 2 * xs.y, 2 * xs.z);
    TensorShape os{xs.b, ws.c, 2 * xs.x, 2 * xs.y, 2 * xs.z};
    std::vector<double> out(os.numel());
    const std::size_t xbs = static_cast<std::size_t>(xs.c) * g.out_spatial();
    const std::size_t ybs = static_cast<std::size_t>(os.c) * g.in_spatial();
    for (int b = 0; b < xs.b; ++b) {
        double* yb = out.data() + b * ybs;
        for (std::size_t c = 0; c < static_cast<std::size_t>(os.c); ++c)
            std::fill(yb + c * g.in_spatial(), yb + (c + 1) * g.in_spatial(), p.bias.value()[c]);
        conv_detail::adj_data(g, x.value().data() + b * xbs, p.weights.value().data(), yb);
    }

    // In the backward closure the roles are swapped: the op's output lives on
    // the associated conv's input (big) grid and the op's input on its output
    // (small) grid.
    const int batches = xs.b;
    return detail::make_op(os, std::move(out), {x.ptr(), p.weights.ptr(), p.bias.ptr()},
                           [g, xbs, ybs, batches](TensorNode& self) {
                               TensorNode& xn = *self.parents[0];
                               TensorNode& wn = *self.parents[1];
                               TensorNode& bn = *self.parents[2];
                               const std::size_t big_spatial = g.in_spatial();
                               for (int b = 0; b < batches; ++b) {
                                   const double* dy_big = self.grad.data() + b * ybs;
                                   if (xn.requires_grad) {
                                       xn.ensure_grad();
                                       conv_detail::forward(g, dy_big, wn.value.data(), nullptr,
                                                            xn.grad.data() + b * xbs, true);
                                   }
                                   if (wn.requires_grad) {
                                       wn.ensure_grad();
                                       conv_detail::grad_w(g, dy_big, xn.value.data() + b * xbs,
                                                           wn.grad.data(), nullptr);
                                   }
                                   if (bn.requires_grad) {
                                       bn.ensure_grad();
                                       for (int c = 0; c < g.ic; ++c) {
                                           const double* row = dy_big + big_spatial * c;
                                           double acc = 0.0;
                                           for (std::size_t i = 0; i < big_spatial; ++i) acc += row[i];
                                           bn.grad[c] += acc;
                                       }
                                   }
                               }
                           });
}

/// max(0, x) elementwise; subgradient at 0 is 0.
inline Tensor relu(const Tensor& x) {
    std::vector<double> out(x.value().size());
    const std::size_t n = out.size();
    const double* xd = x.value().data();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i)
        out[i] = xd[i] > 0.0 ? xd[i] : 0.0;
    return detail::make_op(x.shape(), std::move(out), {x.ptr()}, [](TensorNode& self) {
        TensorNode& xn = *self.parents[0];
        if (!xn.requires_grad) return;
        xn.ensure_grad();
        const std::size_t n = self.value.size();
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i)
            if (xn.value[i] > 0.0) xn.grad[i] += self.grad[i];
    });
}

/// Channels stacked in argument order; batch and spatial dims must match.
inline Tensor concat_channels(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_channels: no inputs");
    const TensorShape& s0 = xs[0].shape();
    int channels = 0;
    for (const Tensor& t : xs) {
        if (t.shape().b != s0.b || !t.shape().same_spatial(s0))
            throw std::invalid_argument("concat_channels: batch/spatial dims mismatch");
        channels += t.shape().c;
    }
    TensorShape os{s0.b, channels, s0.x, s0.y, s0.z};
    std::vector<double> out(os.numel());
    const std::size_t sp = s0.spatial();
    for (int b = 0; b < s0.b; ++b) {
        std::size_t coff = 0;
        for (const Tensor& t : xs) {
            const std::size_t nc = static_cast<std::size_t>(t.shape().c);
            std::copy_n(t.value().data() + b * nc * sp, nc * sp,
                        out.data() + (static_cast<std::size_t>(b) * channels + coff) * sp);
            coff += nc;
        }
    }
    std::vector<TensorPtr> parents;
    for (const Tensor& t : xs) parents.push_back(t.ptr());
    const int batches = s0.b;
    return detail::make_op(os, std::move(out), std::move(parents),
                           [sp, channels, batches](TensorNode& self) {
                               for (int b = 0; b < batches; ++b) {
                                   std::size_t coff = 0;
                                   for (TensorPtr& p : self.parents) {
                                       const std::size_t nc = static_cast<std::size_t>(p->shape.c);
                                       if (p->requires_grad) {
                                           p->ensure_grad();
                                           const double* src = self.grad.data() +
                                               (static_cast<std::size_t>(b) * channels + coff) * sp;
                                           double* dst = p->grad.data() + b * nc * sp;
                                           for (std::size_t i = 0; i < nc * sp; ++i) dst[i] += src[i];
                                       }
                                       coff += nc;
                                   }
                               }
                           });
}

/// Elementwise sum; gradient flows to both operands.
inline Tensor add(const Tensor& x, const Tensor& y) {
    if (!(x.shape() == y.shape())) throw std::invalid_argument("add: shape mismatch");
    std::vector<double> out(x.value().size());
    const double* xd = x.value().data();
    const double* yd = y.value().data();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(out.size()); ++i)
        out[i] = xd[i] + yd[i];
    return detail::make_op(x.shape(), std::move(out), {x.ptr(), y.ptr()}, [](TensorNode& self) {
        for (TensorPtr& p : self.parents) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        }
    });
}

/// Elementwise product.
inline Tensor mul(const Tensor& x, const Tensor& y) {
    if (!(x.shape() == y.shape())) throw std::invalid_argument("mul: shape mismatch");
    std::vector<double> out(x.value().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * y.value()[i];
    return detail::make_op(x.shape(), std::move(out), {x.ptr(), y.ptr()}, [](TensorNode& self) {
        TensorNode& xn = *self.parents[0];
        TensorNode& yn = *self.parents[1];
        if (xn.requires_grad) {
            xn.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                xn.grad[i] += self.grad[i] * yn.value[i];
        }
        if (yn.requires_grad) {
            yn.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                yn.grad[i] += self.grad[i] * xn.value[i];
        }
    });
}

/// Inverted dropout: in training mode each element is zeroed with probability
/// `rate` and survivors are scaled by 1/(1-rate). Identity in inference mode
/// and at rate 0 (no random draws in either case).
inline Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
    if (!training || rate == 0.0) return x;
    const std::size_t n = x.value().size();
    auto keep = std::make_shared<std::vector<unsigned char>>(n);
    const double scale = 1.0 / (1.0 - rate);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const bool k = rng.uniform() >= rate;
        (*keep)[i] = k;
        out[i] = k ? x.value()[i] * scale : 0.0;
    }
    return detail::make_op(x.shape(), std::move(out), {x.ptr()}, [keep, scale](TensorNode& self) {
        TensorNode& xn = *self.parents[0];
        if (!xn.requires_grad) return;
        xn.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if ((*keep)[i]) xn.grad[i] += self.grad[i] * scale;
    });
}

/// Per-voxel softmax across channels, stabilized by max subtraction.
inline Tensor channel_softmax(const Tensor& x) {
    const TensorShape& s = x.shape();
    if (s.c < 2) throw std::invalid_argument("channel_softmax: need at least 2 channels");
    std::vector<double> out(x.value().size());
    const std::size_t sp = s.spatial();
    const double* xd = x.value().data();
    for (int b = 0; b < s.b; ++b) {
        const std::size_t base = static_cast<std::size_t>(b) * s.c * sp;
#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t v = 0; v < static_cast<std::ptrdiff_t>(sp); ++v) {
            double mx = xd[base + v];
            for (int c = 1; c < s.c; ++c) mx = std::max(mx, xd[base + c * sp + v]);
            double denom = 0.0;
            for (int c = 0; c < s.c; ++c) denom += std::exp(xd[base + c * sp + v] - mx);
            for (int c = 0; c < s.c; ++c)
                out[base + c * sp + v] = std::exp(xd[base + c * sp + v] - mx) / denom;
        }
    }
    const int nb = s.b, nc = s.c;
    return detail::make_op(s, std::move(out), {x.ptr()}, [sp, nb, nc](TensorNode& self) {
        TensorNode& xn = *self.parents[0];
        if (!xn.requires_grad) return;
        xn.ensure_grad();
        for (int b = 0; b < nb; ++b) {
            const std::size_t base = static_cast<std::size_t>(b) * nc * sp;
#pragma omp parallel for schedule(static)
            for (std::ptrdiff_t v = 0; v < static_cast<std::ptrdiff_t>(sp); ++v) {
                double dot = 0.0;
                for (int c = 0; c < nc; ++c)
                    dot += self.grad[base + c * sp + v] * self.value[base + c * sp + v];
                for (int c = 0; c < nc; ++c) {
                    const std::size_t i = base + c * sp + v;
                    xn.grad[i] += self.value[i] * (self.grad[i] - dot);
                }
            }
        }
    });
}

/// Single channel of a tensor as a (b, 1, x, y, z) tensor.
inline Tensor select_channel(const Tensor& x, int channel) {
    const TensorShape& s = x.shape();
    if (channel < 0 || channel >= s.c) throw std::invalid_argument("select_channel: bad channel");
    TensorShape os{s.b, 1, s.x, s.y, s.z};
    const std::size_t sp = s.spatial();
    std::vector<double> out(os.numel());
    for (int b = 0; b < s.b; ++b)
        std::copy_n(x.value().data() + (static_cast<std::size_t>(b) * s.c + channel) * sp, sp,
                    out.data() + static_cast<std::size_t>(b) * sp);
    const int nb = s.b, nc = s.c;
    return detail::make_op(os, std::move(out), {x.ptr()}, [sp, nb, nc, channel](TensorNode& self) {
        TensorNode& xn = *self.parents[0];
        if (!xn.requires_grad) return;
        xn.ensure_grad();
        for (int b = 0; b < nb; ++b) {
            const double* src = self.grad.data() + static_cast<std::size_t>(b) * sp;
            double* dst = xn.grad.data() + (static_cast<std::size_t>(b) * nc + channel) * sp;
            for (std::size_t i = 0; i < sp; ++i) dst[i] += src[i];
        }
    });
}

/// Center crop of the spatial dims; odd differences drop the extra voxel on
/// the high side (mirrors crop_or_pad). Backward zero-pads the gradient.
inline Tensor crop_spatial(const Tensor& x, int tx, int ty, int tz) {
    const TensorShape& s = x.shape();
    if (tx > s.x || ty > s.y || tz > s.z || tx < 1 || ty < 1 || tz < 1)
        throw std::invalid_argument("crop_spatial: target must be within input dims");
    const int lx = (s.x - tx) / 2, ly = (s.y - ty) / 2, lz = (s.z - tz) / 2;
    TensorShape os{s.b, s.c, tx, ty, tz};
    std::vector<double> out(os.numel());
    const std::size_t nchan = static_cast<std::size_t>(s.b) * s.c;
    for (std::size_t cb = 0; cb < nchan; ++cb) {
        const double* src = x.value().data() + cb * s.spatial();
        double* dst = out.data() + cb * os.spatial();
        for (int z = 0; z < tz; ++z)
            for (int y = 0; y < ty; ++y) {
                const double* srow = src + static_cast<std::size_t>(s.x) * ((y + ly) + static_cast<std::size_t>(s.y) * (z + lz)) + lx;
                double* drow = dst + static_cast<std::size_t>(tx) * (y + static_cast<std::size_t>(ty) * z);
                std::copy_n(srow, tx, drow);
            }
    }
    const TensorShape in_shape = s;
    return detail::make_op(os, std::move(out), {x.ptr()},
                           [in_shape, lx, ly, lz](TensorNode& self) {
                               TensorNode& xn = *self.parents[0];
                               if (!xn.requires_grad) return;
                               xn.ensure_grad();
                               const TensorShape& os = self.shape;
                               const std::size_t nchan = static_cast<std::size_t>(os.b) * os.c;
                               for (std::size_t cb = 0; cb < nchan; ++cb) {
                                   const double* src = self.grad.data() + cb * os.spatial();
                                   double* dst = xn.grad.data() + cb * in_shape.spatial();
                                   for (int z = 0; z < os.z; ++z)
                                       for (int y = 0; y < os.y; ++y) {
                                           const double* srow = src + static_cast<std::size_t>(os.x) * (y + static_cast<std::size_t>(os.y) * z);
                                           double* drow = dst + static_cast<std::size_t>(in_shape.x) * ((y + ly) + static_cast<std::size_t>(in_shape.y) * (z + lz)) + lx;
                                           for (int x = 0; x < os.x; ++x) drow[x] += srow[x];
                                       }
                               }
                           });
}

/// Sum of all elements as a scalar tensor.
inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.value()) acc += v;
    return detail::make_op({1, 1, 1, 1, 1}, {acc}, {x.ptr()}, [](TensorNode& self) {
        TensorNode& xn = *self.parents[0];
        if (!xn.requires_grad) return;
        xn.ensure_grad();
        const double g = self.grad[0];
        for (double& v : xn.grad) v += g;
    });
}

/// Smoothed Dice D = (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps) between a
/// foreground-probability tensor and a binary mask tensor of the same
/// spatial size. Differentiable w.r.t. p; the trainer minimizes 1 - D.
inline constexpr double kDiceEps = 1e-5;

inline Tensor soft_dice(const Tensor& p, const Tensor& g) {
    if (p.value().size() != g.value().size())
        throw std::invalid_argument("soft_dice: size mismatch");
    const double* pd = p.value().data();
    const double* gd = g.value().data();
    double inter = 0.0, psum = 0.0, gsum = 0.0;
    for (std::size_t i = 0; i < p.value().size(); ++i) {
        if (gd[i] != 0.0 && gd[i] != 1.0)
            throw std::invalid_argument("soft_dice: mask tensor must be binary");
        inter += pd[i] * gd[i];
        psum += pd[i];
        gsum += gd[i];
    }
    const double num = 2.0 * inter + kDiceEps;
    const double den = psum + gsum + kDiceEps;
    return detail::make_op({1, 1, 1, 1, 1}, {num / den}, {p.ptr(), g.ptr()},
                           [num, den](TensorNode& self) {
                               TensorNode& pn = *self.parents[0];
                               TensorNode& gn = *self.parents[1];
                               if (!pn.requires_grad) return;
                               pn.ensure_grad();
                               const double gl = self.grad[0];
                               const double inv_den = 1.0 / den;
                               const std::size_t n = pn.value.size();
#pragma omp parallel for schedule(static)
                               for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i)
                                   pn.grad[i] += gl * (2.0 * gn.value[i] - num * inv_den) * inv_den;
                           });
}

/// Reverse-mode sweep from a scalar loss: topological order, grad of the
/// loss w.r.t. itself seeded to 1, each node's rule accumulates (+=) into
/// its parents. Interior gradient buffers are released as soon as they have
/// been consumed.
inline void backward(const Tensor& loss) {
    TensorNode* root = loss.node();
    if (root == nullptr || root->shape.numel() != 1)
        throw std::invalid_argument("backward: loss must be a scalar tensor");
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            TensorNode* p = n->parents[i++].get();
            if (visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
        if (!n->parents.empty()) {
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }
}

} // namespace vseg

#endif
