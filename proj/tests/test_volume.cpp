#include <catch2/catch_amalgamated.hpp>

#include "vseg/volume.hpp"
#include "helpers.hpp"

using namespace vseg;

namespace {
Volume linear_field(IndexTriple dims, Triple spacing, Triple origin) {
    // f(x,y,z) = 2x + 3y - z in mm coordinates
    Volume v(dims, spacing, origin);
    for (int z = 0; z < dims[2]; ++z)
        for (int y = 0; y < dims[1]; ++y)
            for (int x = 0; x < dims[0]; ++x) {
                const Triple c = v.voxel_center(x, y, z);
                v.at(x, y, z) = 2.0 * c[0] + 3.0 * c[1] - c[2];
            }
    return v;
}
} // namespace

TEST_CASE("resample: constant volume stays constant inside support") {
    Volume v({8, 8, 8}, {1, 1, 1}, {0, 0, 0}, 7.0);
    const Volume r = resample(v, {0.5, 0.5, 0.5}, {6, 6, 6}, v.center());
    for (double x : r.data) CHECK(x == Catch::Approx(7.0).margin(1e-12));
}

TEST_CASE("resample: linear field is reproduced exactly at half spacing") {
    const Volume v = linear_field({10, 10, 10}, {1.2, 0.9, 1.0}, {3, -2, 1});
    const Volume r = resample(v, {0.6, 0.45, 0.5}, {12, 12, 12}, v.center());
    for (int z = 0; z < r.dims[2]; ++z)
        for (int y = 0; y < r.dims[1]; ++y)
            for (int x = 0; x < r.dims[0]; ++x) {
                const Triple c = r.voxel_center(x, y, z);
                const double expect = 2.0 * c[0] + 3.0 * c[1] - c[2];
                REQUIRE(r.at(x, y, z) == Catch::Approx(expect).margin(1e-5));
            }
}

TEST_CASE("resample: extent arithmetic from 1.5mm to 1mm") {
    Volume v({96, 96, 56}, {1.5, 1.5, 1.5}, {0, 0, 0});
    const IndexTriple d = dims_for_spacing(v, {1.0, 1.0, 1.0});
    CHECK(d == IndexTriple{144, 144, 84});
}

TEST_CASE("resample: rejects invalid arguments") {
    Volume v({4, 4, 4}, {1, 1, 1}, {0, 0, 0});
    CHECK_THROWS_AS(resample(v, {0, 1, 1}, {4, 4, 4}, {0, 0, 0}), std::invalid_argument);
    CHECK_THROWS_AS(resample(v, {1, 1, 1}, {0, 4, 4}, {0, 0, 0}), std::invalid_argument);
}

TEST_CASE("resample: linear fields exact on random grids inside support") {
    Rng rng(77);
    for (int trial = 0; trial < 20; ++trial) {
        Volume v({12, 11, 10}, {1.0, 1.3, 0.8}, {rng.uniform(-5, 5), 0, 2});
        const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2),
                     c = rng.uniform(-2, 2), d0 = rng.uniform(-4, 4);
        for (int z = 0; z < v.dims[2]; ++z)
            for (int y = 0; y < v.dims[1]; ++y)
                for (int x = 0; x < v.dims[0]; ++x) {
                    const Triple p = v.voxel_center(x, y, z);
                    v.at(x, y, z) = a * p[0] + b * p[1] + c * p[2] + d0;
                }
        // strictly interior target grid
        const Volume r = resample(v, {0.7, 0.6, 0.5}, {8, 8, 8}, v.center());
        for (int z = 0; z < r.dims[2]; ++z)
            for (int y = 0; y < r.dims[1]; ++y)
                for (int x = 0; x < r.dims[0]; ++x) {
                    const Triple p = r.voxel_center(x, y, z);
                    REQUIRE(r.at(x, y, z) ==
                            Catch::Approx(a * p[0] + b * p[1] + c * p[2] + d0).margin(1e-5));
                }
    }
}

TEST_CASE("crop_or_pad: identity when dims match") {
    Rng rng(1);
    Volume v({12, 12, 7}, {1, 1, 1}, {0, 0, 0});
    for (double& x : v.data) x = rng.uniform();
    const Volume r = crop_or_pad(v, v.dims);
    CHECK(r.data == v.data);
    CHECK(r.origin == v.origin);
}

TEST_CASE("crop_or_pad: mixed crop and odd pad") {
    Volume v({10, 8, 6}, {1, 1, 1}, {0, 0, 0});
    for (std::size_t i = 0; i < v.size(); ++i) v.data[i] = static_cast<double>(i);
    const Volume r = crop_or_pad(v, {8, 8, 8});
    // x: crop 1 each side; z: pad 1 low and 1 high
    CHECK(r.origin[0] == Catch::Approx(1.0));
    CHECK(r.origin[2] == Catch::Approx(-1.0));
    for (int z = 0; z < 8; ++z)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) {
                const int sx = x + 1, sz = z - 1;
                const double expect =
                    (sz >= 0 && sz < 6) ? v.at(sx, y, sz) : 0.0;
                REQUIRE(r.at(x, y, z) == expect);
            }
}

TEST_CASE("crop_or_pad: odd difference pads the high side") {
    Volume v({3, 3, 3}, {1, 1, 1}, {0, 0, 0}, 1.0);
    const Volume r = crop_or_pad(v, {4, 3, 3});
    CHECK(r.origin[0] == 0.0); // no low-side pad
    CHECK(r.at(3, 1, 1) == 0.0);
    CHECK(r.at(0, 1, 1) == 1.0);
}

TEST_CASE("crop_or_pad: zero padding adds nothing to the sum") {
    Volume v({4, 4, 4}, {1, 1, 1}, {0, 0, 0}, 1.0);
    const Volume r = crop_or_pad(v, {6, 6, 6});
    double sum = 0;
    for (double x : r.data) sum += x;
    CHECK(sum == 64.0);
}

TEST_CASE("crop_or_pad: pad-then-crop round trip is exact") {
    Rng rng(9);
    Volume v({7, 6, 5}, {1, 2, 1}, {1, 1, 1});
    for (double& x : v.data) x = rng.uniform();
    const Volume back = crop_or_pad(crop_or_pad(v, {11, 9, 6}), v.dims);
    CHECK(back.data == v.data);
    CHECK(back.origin[0] == Catch::Approx(v.origin[0]));
    CHECK(back.origin[1] == Catch::Approx(v.origin[1]));
    CHECK(back.origin[2] == Catch::Approx(v.origin[2]));
}

TEST_CASE("normalize: two-point standardization") {
    Volume v({2, 1, 1}, {1, 1, 1}, {0, 0, 0});
    v.data = {0.0, 2.0};
    const Volume r = normalize(v);
    CHECK(r.data[0] == Catch::Approx(-1.0));
    CHECK(r.data[1] == Catch::Approx(1.0));
}

TEST_CASE("normalize: idempotent and statistically correct") {
    Rng rng(2);
    Volume v({9, 8, 7}, {1, 1, 1}, {0, 0, 0});
    for (double& x : v.data) x = rng.uniform(-3, 10);
    const Volume r = normalize(v);
    double mean = 0;
    for (double x : r.data) mean += x;
    mean /= static_cast<double>(r.size());
    double var = 0;
    for (double x : r.data) var += (x - mean) * (x - mean);
    var /= static_cast<double>(r.size());
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-6);
    const Volume r2 = normalize(r);
    for (std::size_t i = 0; i < r.size(); ++i)
        REQUIRE(r2.data[i] == Catch::Approx(r.data[i]).margin(1e-6));
}

TEST_CASE("normalize: constant volume is degenerate") {
    Volume v({4, 4, 4}, {1, 1, 1}, {0, 0, 0}, 3.0);
    CHECK_THROWS_AS(normalize(v), degenerate_input);
}

TEST_CASE("threshold: inclusive boundary and oracle equivalence") {
    Volume p({4, 4, 4}, {1, 1, 1}, {0, 0, 0});
    p.data[5] = 0.5;
    const Mask m = threshold(p, 0.5);
    CHECK(m.data[5] == 1.0); // p == t counts as foreground
    CHECK(m.data[0] == 0.0);

    Volume zeros({3, 3, 3}, {1, 1, 1}, {0, 0, 0});
    CHECK(count_foreground(threshold(zeros, 0.5)) == 0);

    Rng rng(3);
    Volume q({6, 6, 6}, {1, 1, 1}, {0, 0, 0});
    for (double& x : q.data) x = rng.uniform();
    const Mask mq = threshold(q, 0.5);
    for (std::size_t i = 0; i < q.size(); ++i)
        REQUIRE(mq.data[i] == ((q.data[i] >= 0.5) ? 1.0 : 0.0));
}

TEST_CASE("threshold: monotone in t") {
    Rng rng(4);
    Volume q({6, 6, 6}, {1, 1, 1}, {0, 0, 0});
    for (double& x : q.data) x = rng.uniform();
    const Mask lo = threshold(q, 0.3);
    const Mask hi = threshold(q, 0.7);
    for (std::size_t i = 0; i < q.size(); ++i)
        REQUIRE(hi.data[i] <= lo.data[i]);
}

TEST_CASE("signed_distance: single voxel and neighbors") {
    Mask m({5, 5, 5}, {1, 1, 1}, {0, 0, 0});
    m.at(2, 2, 2) = 1.0;
    const Volume sdf = signed_distance(m);
    CHECK(sdf.at(2, 2, 2) <= 0.0);
    CHECK(sdf.at(3, 2, 2) == Catch::Approx(0.5));
    CHECK(sdf.at(2, 1, 2) == Catch::Approx(0.5));
}

TEST_CASE("signed_distance: matches the brute-force oracle") {
    Rng rng(5);
    for (int trial = 0; trial < 6; ++trial) {
        const Triple spacing = trial % 2 ? Triple{0.7, 1.1, 1.4} : Triple{1, 1, 1};
        Mask m = oracle::random_mask({7, 6, 5}, 0.4, rng);
        m.spacing = spacing;
        if (count_foreground(m) == 0 || count_foreground(m) == m.size()) continue;
        const Volume got = signed_distance(m);
        const Volume want = oracle::brute_signed_distance(m);
        for (std::size_t i = 0; i < m.size(); ++i)
            REQUIRE(got.data[i] == Catch::Approx(want.data[i]).margin(1e-9));
    }
}

TEST_CASE("signed_distance: sphere center depth and sign flip") {
    const Mask m = oracle::ellipsoid_mask({31, 31, 31}, {1, 1, 1}, {15, 15, 15}, {10, 10, 10});
    const Volume sdf = signed_distance(m);
    CHECK(sdf.at(15, 15, 15) == Catch::Approx(-10.0).margin(std::sqrt(3.0)));

    Mask inv = m;
    for (double& v : inv.data) v = 1.0 - v;
    const Volume sdf_inv = signed_distance(inv);
    for (std::size_t i = 0; i < m.size(); ++i)
        REQUIRE(sdf_inv.data[i] == Catch::Approx(-sdf.data[i]).margin(1e-9));
}

TEST_CASE("signed_distance: sign matches class everywhere") {
    Rng rng(6);
    const Mask m = oracle::random_mask({9, 9, 9}, 0.3, rng);
    const Volume sdf = signed_distance(m);
    for (std::size_t i = 0; i < m.size(); ++i) {
        if (m.data[i] != 0.0) REQUIRE(sdf.data[i] <= 0.0);
        else REQUIRE(sdf.data[i] >= 0.0);
    }
}

TEST_CASE("signed_distance: empty and full masks are degenerate") {
    Mask empty({4, 4, 4}, {1, 1, 1}, {0, 0, 0});
    CHECK_THROWS_AS(signed_distance(empty), degenerate_input);
    Mask full({4, 4, 4}, {1, 1, 1}, {0, 0, 0}, 1.0);
    CHECK_THROWS_AS(signed_distance(full), degenerate_input);
}

TEST_CASE("sphere_element: radius 2 at 1mm isotropic") {
    const Mask e = sphere_element(2.0, {1, 1, 1});
    CHECK(e.dims == IndexTriple{5, 5, 5});
    // enumerate offsets with |d| <= 2
    int expected = 0;
    for (int z = -2; z <= 2; ++z)
        for (int y = -2; y <= 2; ++y)
            for (int x = -2; x <= 2; ++x)
                if (x * x + y * y + z * z <= 4) ++expected;
    CHECK(expected == 33);
    CHECK(count_foreground(e) == 33);
    CHECK(e.at(2, 2, 2) == 1.0);
}

TEST_CASE("sphere_element: tiny radius keeps only the center") {
    const Mask e = sphere_element(0.4, {1, 1, 1});
    CHECK(e.dims == IndexTriple{1, 1, 1});
    CHECK(count_foreground(e) == 1);
}

TEST_CASE("sphere_element: anisotropic spacing") {
    const Mask e = sphere_element(2.0, {0.5, 0.5, 1.0});
    CHECK(e.dims == IndexTriple{9, 9, 5});
}

TEST_CASE("morph_open: matches brute-force set definition on random masks") {
    Rng rng(7);
    for (int trial = 0; trial < 8; ++trial) {
        const Mask m = oracle::random_mask({16, 16, 16}, rng.uniform(0.2, 0.7), rng);
        const Mask e = sphere_element(trial % 2 ? 1.0 : 1.5, {1, 1, 1});
        const Mask got = morph_open(m, e);
        const Mask want = oracle::brute_open(m, e);
        REQUIRE(got.data == want.data);
    }
}

TEST_CASE("morph_open: erosion removes isolated voxels") {
    Mask m({9, 9, 9}, {1, 1, 1}, {0, 0, 0});
    m.at(4, 4, 4) = 1.0;
    const Mask r = morph_open(m, sphere_element(2.0, {1, 1, 1}));
    CHECK(count_foreground(r) == 0);
}

TEST_CASE("morph_open: empty mask stays empty, solid cube keeps its interior") {
    Mask empty({6, 6, 6}, {1, 1, 1}, {0, 0, 0});
    CHECK(count_foreground(morph_open(empty, sphere_element(2.0, {1, 1, 1}))) == 0);

    Mask cube({20, 20, 20}, {1, 1, 1}, {0, 0, 0});
    for (int z = 2; z < 18; ++z)
        for (int y = 2; y < 18; ++y)
            for (int x = 2; x < 18; ++x) cube.at(x, y, z) = 1.0;
    const Mask e = sphere_element(2.0, {1, 1, 1});
    const Mask got = morph_open(cube, e);
    const Mask want = oracle::brute_open(cube, e);
    CHECK(got.data == want.data);
    // interior far from corners is untouched
    for (int z = 6; z < 14; ++z)
        for (int y = 6; y < 14; ++y)
            for (int x = 6; x < 14; ++x) REQUIRE(got.at(x, y, z) == 1.0);
}

TEST_CASE("tight_box: single voxel, voxel pair, sphere") {
    Mask m({8, 8, 8}, {1.0, 0.5, 2.0}, {10, 20, 30});
    m.at(3, 4, 5) = 1.0;
    Box b = tight_box(m);
    const Triple c = m.voxel_center(3, 4, 5);
    CHECK(b.lo == c);
    CHECK(b.hi == c);

    m.at(6, 1, 2) = 1.0;
    b = tight_box(m);
    CHECK(b.lo[0] == Catch::Approx(13.0));
    CHECK(b.hi[0] == Catch::Approx(16.0));
    CHECK(b.lo[1] == Catch::Approx(20.5));
    CHECK(b.hi[1] == Catch::Approx(22.0));

    const Mask sphere = oracle::ellipsoid_mask({31, 31, 31}, {1, 1, 1}, {15, 15, 15}, {10, 10, 10});
    const Box sb = tight_box(sphere);
    for (int a = 0; a < 3; ++a)
        CHECK(sb.size()[a] == Catch::Approx(20.0).margin(1.0));

    Mask empty({4, 4, 4}, {1, 1, 1}, {0, 0, 0});
    CHECK_THROWS_AS(tight_box(empty), degenerate_input);
}
