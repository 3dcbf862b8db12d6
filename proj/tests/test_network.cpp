#include <catch2/catch_amalgamated.hpp>

#include <cstdio>

#include "vseg/network.hpp"
#include "helpers.hpp"

using namespace vseg;

namespace {

// Layer-by-layer parameter count from the architecture description alone.
std::size_t expected_param_count(int d, int f1) {
    auto conv = [](int in, int out, int k) {
        return static_cast<std::size_t>(out) * in * k * k * k + out;
    };
    std::size_t n = 0;
    for (int l = 1; l <= d; ++l) {
        const int fl = f1 << (l - 1);
        const int k_in = 2 * l + 1;
        n += conv(1, fl, k_in);                        // direct from input
        for (int i = 1; i < l; ++i) n += conv(f1 << (i - 1), fl, 3); // forwarded streams
        n += conv(l * fl, fl, 3);                      // fusion
        n += conv(fl, fl, 3) * 2;                      // residual module
    }
    for (int l = 1; l <= d - 1; ++l) {
        const int fl = f1 << (l - 1);
        n += conv(f1 << l, fl, 3);                     // up-conv
        n += conv(2 * fl, fl, 3);                      // fusion after skip concat
        n += conv(fl, fl, 3) * 2;                      // residual module
    }
    n += conv(f1, 2, 3);                               // head
    return n;
}

} // namespace

TEST_CASE("specs: paper depths and defaults") {
    CHECK(global_spec().depth == 5);
    CHECK(local_spec().depth == 3);
    CHECK(global_spec().dropout_rate == 0.15);
    CHECK(local_spec().dropout_rate == 0.15);
    CHECK(global_spec().base_features == 16);
    CHECK(global_spec().dims == IndexTriple{128, 128, 72});
}

TEST_CASE("spec: input-conv kernels grow with level") {
    NetworkSpec s{4, 16, 0.15, {128, 128, 72}};
    CHECK(s.kernel_at(1) == 3);
    CHECK(s.kernel_at(2) == 5);
    CHECK(s.kernel_at(3) == 7);
    CHECK(s.kernel_at(4) == 9);
    Rng rng(1);
    const Network net = build_network(NetworkSpec{4, 2, 0.15, {16, 16, 8}}, rng);
    for (int l = 1; l <= 4; ++l)
        CHECK(net.enc[static_cast<std::size_t>(l - 1)].input_conv.kernel() == 2 * l + 1);
}

TEST_CASE("spec: level features and spatial dims at depth 5") {
    NetworkSpec s{5, 16, 0.15, {128, 128, 72}};
    const std::vector<int> want_f{16, 32, 64, 128, 256};
    for (int l = 1; l <= 5; ++l) CHECK(s.features_at(l) == want_f[static_cast<std::size_t>(l - 1)]);
    const auto ld = s.level_dims();
    CHECK(ld[0] == IndexTriple{128, 128, 72});
    CHECK(ld[1] == IndexTriple{64, 64, 36});
    CHECK(ld[2] == IndexTriple{32, 32, 18});
    CHECK(ld[3] == IndexTriple{16, 16, 9});
    CHECK(ld[4] == IndexTriple{8, 8, 5});
}

TEST_CASE("build: parameter count matches the hand computation") {
    Rng rng(2);
    const Network net = build_network(NetworkSpec{2, 2, 0.15, {16, 16, 8}}, rng);
    CHECK(net.parameter_count() == expected_param_count(2, 2));

    const Network net3 = build_network(NetworkSpec{3, 4, 0.15, {16, 16, 8}}, rng);
    CHECK(net3.parameter_count() == expected_param_count(3, 4));
}

TEST_CASE("build: He initialization variance") {
    Rng rng(3);
    const Network net = build_network(NetworkSpec{3, 8, 0.15, {32, 32, 16}}, rng);
    for (const auto& [name, t] : net.named_parameters()) {
        if (name.back() != 'w' || t.value().size() < 1000) continue;
        const TensorShape& s = t.shape();
        // fan_in from the op's input channel count (second dim for up-convs)
        const bool transposed = name.find("/up/") != std::string::npos;
        const int in_ch = transposed ? s.b : s.c;
        const double want = 2.0 / (static_cast<double>(in_ch) * s.x * s.y * s.z);
        double var = 0.0;
        for (double v : t.value()) var += v * v;
        var /= static_cast<double>(t.value().size());
        INFO(name);
        CHECK(var > 0.8 * want);
        CHECK(var < 1.2 * want);
    }
}

TEST_CASE("forward: output shape, range, channel sums, determinism") {
    Rng rng(4);
    const NetworkSpec spec{3, 4, 0.15, {24, 20, 12}};
    const Network net = build_network(spec, rng);
    Volume in(spec.dims, {1, 1, 1}, {0, 0, 0});
    Rng noise(5);
    for (double& v : in.data) v = noise.normal();

    const ProbMap p1 = network_forward_volume(net, in);
    const ProbMap p2 = network_forward_volume(net, in);
    CHECK(p1.dims == spec.dims);
    CHECK(p1.data == p2.data); // inference is deterministic
    for (double v : p1.data) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
    }

    NoGradGuard ng;
    Rng drop_rng(6);
    const Tensor full = network_forward(net, tensor_from_volume(in), false, drop_rng);
    const std::size_t sp = full.shape().spatial();
    for (std::size_t v = 0; v < sp; ++v)
        REQUIRE(full.value()[v] + full.value()[sp + v] == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("forward: wrong input dims are rejected") {
    Rng rng(7);
    const Network net = build_network(NetworkSpec{2, 2, 0.15, {16, 16, 8}}, rng);
    Volume bad({8, 8, 8}, {1, 1, 1}, {0, 0, 0});
    CHECK_THROWS_AS(network_forward_volume(net, bad), std::invalid_argument);
}

TEST_CASE("forward: output dims equal input dims across depths") {
    Rng rng(8);
    for (int d : {2, 3, 4, 5}) {
        const NetworkSpec spec{d, 2, 0.15, {17, 18, 16}};
        const Network net = build_network(spec, rng);
        Volume in(spec.dims, {1, 1, 1}, {0, 0, 0});
        Rng noise(9);
        for (double& v : in.data) v = noise.normal();
        const ProbMap p = network_forward_volume(net, in);
        REQUIRE(p.dims == spec.dims);
    }
}

TEST_CASE("forward: fresh nets emit mid-range probabilities on average") {
    // Softmax of freshly-initialized logits: the per-seed voxel mean is noisy
    // but symmetric, so the average over seeds must sit well inside (0.2, 0.8).
    Rng noise(10);
    Volume in({16, 16, 8}, {1, 1, 1}, {0, 0, 0});
    for (double& v : in.data) v = noise.normal();
    double seed_mean = 0.0;
    const int n_seeds = 5;
    for (std::uint64_t seed = 0; seed < n_seeds; ++seed) {
        Rng rng(seed);
        const Network net = build_network(NetworkSpec{2, 4, 0.15, {16, 16, 8}}, rng);
        const ProbMap p = network_forward_volume(net, in);
        double mean = 0.0;
        for (double v : p.data) mean += v;
        seed_mean += mean / static_cast<double>(p.size());
    }
    seed_mean /= n_seeds;
    CHECK(seed_mean > 0.2);
    CHECK(seed_mean < 0.8);
}

TEST_CASE("forward: training mode applies dropout stochastically") {
    Rng rng(11);
    const NetworkSpec spec{2, 4, 0.5, {16, 16, 8}};
    const Network net = build_network(spec, rng);
    Volume in(spec.dims, {1, 1, 1}, {0, 0, 0});
    for (double& v : in.data) v = rng.normal();
    Rng d1(12), d2(13);
    const ProbMap a = network_forward_volume(net, in, true, &d1);
    const ProbMap b = network_forward_volume(net, in, true, &d2);
    CHECK(a.data != b.data);
}

TEST_CASE("checkpoint: save and load round-trip exactly") {
    Rng rng(14);
    const NetworkSpec spec{3, 4, 0.15, {20, 16, 12}};
    const Network net = build_network(spec, rng);
    const std::string path = "/tmp/vseg_test_net.ckpt";
    save_network(net, path);
    const Network loaded = load_network(path);
    CHECK(loaded.spec.depth == spec.depth);
    CHECK(loaded.spec.base_features == spec.base_features);
    CHECK(loaded.spec.dims == spec.dims);
    const auto a = net.named_parameters();
    const auto b = loaded.named_parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].first == b[i].first);
        REQUIRE(a[i].second.value() == b[i].second.value());
    }
    Volume in(spec.dims, {1, 1, 1}, {0, 0, 0});
    for (double& v : in.data) v = rng.normal();
    CHECK(network_forward_volume(net, in).data == network_forward_volume(loaded, in).data);
    std::remove(path.c_str());
}
