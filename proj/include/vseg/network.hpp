#ifndef VSEG_NETWORK_HPP
#define VSEG_NETWORK_HPP

// Contracting-expanding segmentation network parameterized by depth d.
// Level l (1-based) has F_l = F1*2^(l-1) features at 1/2^(l-1) resolution
// (ceil division). Each level sees the raw input through a dedicated conv
// (kernel 2l+1, stride 2^(l-1)) plus a stride-2^(l-i) forward conv from
// every higher level's residual output; the concatenated streams are merged
// by a kernel-3 fusion conv and refined by a two-conv residual module. The
// expanding path mirrors this with stride-2 up-convolutions, center crops to
// the skip dims, skip concatenation, fusion and residual modules. A final
// kernel-3 conv and channel softmax emit the foreground probability.

#include <string>
#include <utility>
#include <vector>

#include "vseg/autodiff.hpp"
#include "vseg/params_io.hpp"
#include "vseg/rng.hpp"
#include "vseg/volume.hpp"

namespace vseg {

struct NetworkSpec {
    int depth = 5;
    int base_features = 16;
    double dropout_rate = 0.15;
    IndexTriple dims{128, 128, 72};

    int features_at(int level) const { return base_features << (level - 1); }
    int kernel_at(int level) const { return 2 * level + 1; }
    int downsample_at(int level) const { return 1 << (level - 1); }

    /// Spatial dims at each level, dims_1 = input dims, dims_{l+1} = ceil(dims_l/2).
    std::vector<IndexTriple> level_dims() const {
        std::vector<IndexTriple> out(static_cast<std::size_t>(depth));
        out[0] = dims;
        for (int l = 1; l < depth; ++l)
            for (int a = 0; a < 3; ++a) out[static_cast<std::size_t>(l)][a] = (out[static_cast<std::size_t>(l - 1)][a] + 1) / 2;
        return out;
    }
};

/// Depth-5 configuration used for whole-image localization.
inline NetworkSpec global_spec() { return NetworkSpec{5, 16, 0.15, {128, 128, 72}}; }
/// Depth-3 configuration used on the renormalized volume of interest.
inline NetworkSpec local_spec() { return NetworkSpec{3, 16, 0.15, {128, 128, 72}}; }

struct Network {
    struct EncLevel {
        ConvParams input_conv;
        std::vector<ConvParams> from_higher; // one per level i < l, in level order
        ConvParams fuse;
        ConvParams res1, res2;
    };
    struct DecLevel {
        ConvParams up; // transposed conv, weights (F_{l+1}, F_l, 3,3,3)
        ConvParams fuse;
        ConvParams res1, res2;
    };

    NetworkSpec spec;
    std::vector<EncLevel> enc; // index l-1 for level l = 1..d
    std::vector<DecLevel> dec; // index l-1 for level l = 1..d-1
    ConvParams head;

    /// Stable traversal of all (name, tensor) parameter pairs.
    std::vector<std::pair<std::string, Tensor>> named_parameters() const {
        std::vector<std::pair<std::string, Tensor>> out;
        const auto push = [&out](const std::string& prefix, const ConvParams& p) {
            out.emplace_back(prefix + "/w", p.weights);
            out.emplace_back(prefix + "/b", p.bias);
        };
        for (std::size_t l = 0; l < enc.size(); ++l) {
            const std::string base = "enc" + std::to_string(l + 1);
            push(base + "/input_conv", enc[l].input_conv);
            for (std::size_t i = 0; i < enc[l].from_higher.size(); ++i)
                push(base + "/from" + std::to_string(i + 1), enc[l].from_higher[i]);
            push(base + "/fuse", enc[l].fuse);
            push(base + "/res1", enc[l].res1);
            push(base + "/res2", enc[l].res2);
        }
        for (std::size_t l = 0; l < dec.size(); ++l) {
            const std::string base = "dec" + std::to_string(l + 1);
            push(base + "/up", dec[l].up);
            push(base + "/fuse", dec[l].fuse);
            push(base + "/res1", dec[l].res1);
            push(base + "/res2", dec[l].res2);
        }
        push("head", head);
        return out;
    }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (auto& [name, t] : named_parameters()) out.push_back(t);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const Tensor& t : parameters()) n += t.value().size();
        return n;
    }
};

namespace detail {

/// He-initialized conv parameters: weights N(0, sqrt(2/fan_in)) with
/// fan_in = in_ch * k^3, biases zero. `transposed` swaps the weight layout
/// to (in_ch, out_ch, k,k,k).
inline ConvParams he_conv(int in_ch, int out_ch, int k, int stride, Rng& rng,
                          bool transposed = false) {
    ConvParams p;
    const TensorShape ws = transposed ? TensorShape{in_ch, out_ch, k, k, k}
                                      : TensorShape{out_ch, in_ch, k, k, k};
    std::vector<double> w(ws.numel());
    const double std_dev = std::sqrt(2.0 / (static_cast<double>(in_ch) * k * k * k));
    for (double& v : w) v = rng.normal(0.0, std_dev);
    p.weights = Tensor::from_values(ws, std::move(w), true);
    p.bias = Tensor::zeros({1, out_ch, 1, 1, 1}, true);
    p.stride = stride;
    return p;
}

} // namespace detail

/// Construct a freshly He-initialized network for the given spec.
inline Network build_network(const NetworkSpec& spec, Rng& rng) {
    if (spec.depth < 2) throw std::invalid_argument("build_network: depth must be >= 2");
    if (spec.base_features < 1) throw std::invalid_argument("build_network: base_features must be >= 1");
    Network net;
    net.spec = spec;
    for (int l = 1; l <= spec.depth; ++l) {
        Network::EncLevel lev;
        const int fl = spec.features_at(l);
        lev.input_conv = detail::he_conv(1, fl, spec.kernel_at(l), spec.downsample_at(l), rng);
        for (int i = 1; i < l; ++i)
            lev.from_higher.push_back(detail::he_conv(spec.features_at(i), fl, 3, 1 << (l - i), rng));
        lev.fuse = detail::he_conv(l * fl, fl, 3, 1, rng);
        lev.res1 = detail::he_conv(fl, fl, 3, 1, rng);
        lev.res2 = detail::he_conv(fl, fl, 3, 1, rng);
        net.enc.push_back(std::move(lev));
    }
    for (int l = 1; l <= spec.depth - 1; ++l) {
        Network::DecLevel lev;
        const int fl = spec.features_at(l);
        lev.up = detail::he_conv(spec.features_at(l + 1), fl, 3, 2, rng, true);
        lev.fuse = detail::he_conv(2 * fl, fl, 3, 1, rng);
        lev.res1 = detail::he_conv(fl, fl, 3, 1, rng);
        lev.res2 = detail::he_conv(fl, fl, 3, 1, rng);
        net.dec.push_back(std::move(lev));
    }
    net.head = detail::he_conv(spec.base_features, 2, 3, 1, rng);
    return net;
}

/// Full forward pass on an input tensor; returns the 2-channel softmax
/// output (channel 1 is foreground). Builds a graph when grad mode is on.
inline Tensor network_forward(const Network& net, const Tensor& input, bool training, Rng& rng) {
    const NetworkSpec& spec = net.spec;
    const TensorShape& is = input.shape();
    if (is.c != 1 || is.x != spec.dims[0] || is.y != spec.dims[1] || is.z != spec.dims[2])
        throw std::invalid_argument("network_forward: input dims do not match the network spec");
    const double rate = spec.dropout_rate;
    const auto drop = [&](const Tensor& t) { return dropout(t, rate, training, rng); };

    const std::vector<IndexTriple> ldims = spec.level_dims();
    std::vector<Tensor> enc_out(static_cast<std::size_t>(spec.depth) + 1);
    for (int l = 1; l <= spec.depth; ++l) {
        const Network::EncLevel& lev = net.enc[static_cast<std::size_t>(l - 1)];
        std::vector<Tensor> streams;
        streams.push_back(drop(relu(conv3d(input, lev.input_conv))));
        for (int i = 1; i < l; ++i)
            streams.push_back(drop(relu(conv3d(enc_out[static_cast<std::size_t>(i)],
                                               lev.from_higher[static_cast<std::size_t>(i - 1)]))));
        const Tensor fused = drop(relu(conv3d(concat_channels(streams), lev.fuse)));
        const Tensor r1 = drop(relu(conv3d(fused, lev.res1)));
        const Tensor r2 = conv3d(r1, lev.res2);
        enc_out[static_cast<std::size_t>(l)] = drop(relu(add(r2, fused)));
    }

    Tensor cur = enc_out[static_cast<std::size_t>(spec.depth)];
    for (int l = spec.depth - 1; l >= 1; --l) {
        const Network::DecLevel& lev = net.dec[static_cast<std::size_t>(l - 1)];
        Tensor up = drop(relu(conv_transpose3d(cur, lev.up)));
        const IndexTriple& d = ldims[static_cast<std::size_t>(l - 1)];
        up = crop_spatial(up, d[0], d[1], d[2]);
        const Tensor cat = concat_channels({up, enc_out[static_cast<std::size_t>(l)]});
        const Tensor fused = drop(relu(conv3d(cat, lev.fuse)));
        const Tensor r1 = drop(relu(conv3d(fused, lev.res1)));
        const Tensor r2 = conv3d(r1, lev.res2);
        cur = drop(relu(add(r2, fused)));
    }

    // Head conv carries no ReLU; dropout still applies, softmax does not get one.
    return channel_softmax(drop(conv3d(cur, net.head)));
}

/// Inference (or training-mode sampling) on a Volume; emits the foreground
/// probability on the same grid.
inline ProbMap network_forward_volume(const Network& net, const Volume& input,
                                      bool training = false, Rng* rng = nullptr) {
    Rng dummy(0);
    if (training && rng == nullptr)
        throw std::invalid_argument("network_forward_volume: training mode needs an rng");
    NoGradGuard no_grad;
    const Tensor out = network_forward(net, tensor_from_volume(input), training,
                                       rng ? *rng : dummy);
    return volume_from_channel(out, 0, 1, input);
}

/// Checkpoint: every named parameter plus the spec, in the shared
/// named-array container format.
inline void save_network(const Network& net, const std::string& path) {
    std::vector<NamedArray> arrays;
    arrays.push_back({"spec/depth", {1}, {static_cast<double>(net.spec.depth)}});
    arrays.push_back({"spec/base_features", {1}, {static_cast<double>(net.spec.base_features)}});
    arrays.push_back({"spec/dropout", {1}, {net.spec.dropout_rate}});
    arrays.push_back({"spec/dims", {3},
                      {static_cast<double>(net.spec.dims[0]), static_cast<double>(net.spec.dims[1]),
                       static_cast<double>(net.spec.dims[2])}});
    for (const auto& [name, t] : net.named_parameters()) {
        const TensorShape& s = t.shape();
        arrays.push_back({name, {s.b, s.c, s.x, s.y, s.z}, t.value()});
    }
    save_arrays(path, arrays);
}

inline Network load_network(const std::string& path) {
    const std::vector<NamedArray> arrays = load_arrays(path);
    NetworkSpec spec;
    spec.depth = static_cast<int>(find_array(arrays, "spec/depth").values.at(0));
    spec.base_features = static_cast<int>(find_array(arrays, "spec/base_features").values.at(0));
    spec.dropout_rate = find_array(arrays, "spec/dropout").values.at(0);
    const auto& dims = find_array(arrays, "spec/dims").values;
    spec.dims = {static_cast<int>(dims.at(0)), static_cast<int>(dims.at(1)),
                 static_cast<int>(dims.at(2))};
    Rng rng(0);
    Network net = build_network(spec, rng);
    for (auto& [name, t] : net.named_parameters()) {
        const NamedArray& a = find_array(arrays, name);
        if (a.values.size() != t.value().size())
            throw corrupt_file("parameter size mismatch for " + name + " in " + path);
        std::copy(a.values.begin(), a.values.end(), t.value().begin());
    }
    return net;
}

} // namespace vseg

#endif
