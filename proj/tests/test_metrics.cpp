#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "metalattice/metrics.hpp"
#include "metalattice/rng.hpp"

using namespace metalattice;
using metrics::CurvePair;
using metrics::SegPair;

namespace {

// direct double-sum orthonormal DCT-II oracle
double dct_energy_oracle(const std::vector<float>& img, int h, int w) {
    const double pi = 3.14159265358979323846;
    double energy = 0.0;
    for (int v = 0; v < h; ++v)
        for (int u = 0; u < w; ++u) {
            double s = 0.0;
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j)
                    s += img[static_cast<std::size_t>(i) * w + j] *
                         std::cos(pi * (2.0 * i + 1.0) * v / (2.0 * h)) *
                         std::cos(pi * (2.0 * j + 1.0) * u / (2.0 * w));
            const double au = (u == 0) ? std::sqrt(1.0 / w) : std::sqrt(2.0 / w);
            const double av = (v == 0) ? std::sqrt(1.0 / h) : std::sqrt(2.0 / h);
            energy += std::abs(au * av * s);
        }
    return energy;
}

} // namespace

TEST_CASE("dct_energy: zero, constant, and oracle agreement") {
    std::vector<float> zero(64, 0.0f);
    REQUIRE(metrics::dct_energy(zero, 8, 8) == 0.0);

    // constant c on NxN: single DC coefficient c*N
    std::vector<float> cimg(36, 2.5f);
    REQUIRE(metrics::dct_energy(cimg, 6, 6) == Catch::Approx(2.5 * 6).epsilon(1e-9));
    REQUIRE(metrics::dct_energy(cimg, 6, 6) == Catch::Approx(dct_energy_oracle(cimg, 6, 6)).epsilon(1e-9));

    Rng rng(5);
    for (int trial = 0; trial < 5; ++trial) {
        const int h = rng.range_int(2, 9), w = rng.range_int(2, 9);
        std::vector<float> img(static_cast<std::size_t>(h) * w);
        for (auto& x : img) x = static_cast<float>(rng.uniform(-2.0, 2.0));
        REQUIRE(metrics::dct_energy(img, h, w) == Catch::Approx(dct_energy_oracle(img, h, w)).epsilon(1e-9));
    }
}

TEST_CASE("dct_energy: noise raises the energy") {
    // smooth ramp image
    std::vector<float> img(32 * 32);
    for (int i = 0; i < 32; ++i)
        for (int j = 0; j < 32; ++j) img[static_cast<std::size_t>(i) * 32 + j] = static_cast<float>(i + j) / 64.0f;
    const double clean = metrics::dct_energy(img, 32, 32);
    int wins = 0;
    for (int seed = 0; seed < 20; ++seed) {
        Rng rng(static_cast<std::uint64_t>(seed) + 1000);
        std::vector<float> noisy = img;
        for (auto& x : noisy) x += 0.1f * rng.normal_f();
        if (metrics::dct_energy(noisy, 32, 32) > clean) ++wins;
    }
    REQUIRE(wins == 20);
}

TEST_CASE("dct_energy: homogeneity and rejection of bad input") {
    Rng rng(9);
    std::vector<float> img(49);
    for (auto& x : img) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    const double e1 = metrics::dct_energy(img, 7, 7);
    std::vector<float> scaled = img;
    for (auto& x : scaled) x *= -3.0f;
    REQUIRE(metrics::dct_energy(scaled, 7, 7) == Catch::Approx(3.0 * e1).epsilon(1e-6));

    std::vector<float> bad(4, std::numeric_limits<float>::quiet_NaN());
    REQUIRE_THROWS(metrics::dct_energy(bad, 2, 2));
    REQUIRE_THROWS(metrics::dct_energy(img, 6, 6));
}

TEST_CASE("pixel_accuracy examples") {
    SegPair p;
    p.y_true.assign(48 * 48, 1);
    p.y_pred = p.y_true;
    REQUIRE(metrics::pixel_accuracy(p) == 100.0);
    p.y_pred[0] = 0;
    REQUIRE(metrics::pixel_accuracy(p) == Catch::Approx(100.0 * 2303.0 / 2304.0).epsilon(1e-12));
}

TEST_CASE("pixel_accuracy matches a counting oracle", "[property]") {
    Rng rng(77);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = rng.range_int(1, 64);
        SegPair p;
        p.y_true.resize(static_cast<std::size_t>(n));
        p.y_pred.resize(static_cast<std::size_t>(n));
        int hits = 0;
        for (int i = 0; i < n; ++i) {
            p.y_true[static_cast<std::size_t>(i)] = rng.range_int(0, 3);
            p.y_pred[static_cast<std::size_t>(i)] = rng.range_int(0, 3);
            if (p.y_true[static_cast<std::size_t>(i)] == p.y_pred[static_cast<std::size_t>(i)]) ++hits;
        }
        REQUIRE(metrics::pixel_accuracy(p) == 100.0 * hits / n);
    }
}

TEST_CASE("weighted_dsc hand-evaluated cases") {
    SegPair p;
    p.y_true.assign(4, 0);
    p.y_pred = {0, 0, 0, 1};
    // w0 = 1, DSC0 = 2*3/(4+3) = 6/7
    REQUIRE(metrics::weighted_dsc(p, 2) == Catch::Approx(100.0 * 6.0 / 7.0).epsilon(1e-12));
    // adding an absent class does not change the result (DSC_j = 1, w_j = 0)
    REQUIRE(metrics::weighted_dsc(p, 4) == Catch::Approx(100.0 * 6.0 / 7.0).epsilon(1e-12));

    SegPair q;
    q.y_true = {0, 1, 2, 3};
    q.y_pred = q.y_true;
    REQUIRE(metrics::weighted_dsc(q, 4) == 100.0);
}

namespace {

// literal brute-force of the weighted DSC definition, set notation
double weighted_dsc_oracle(const SegPair& p, int C) {
    const double total = static_cast<double>(p.y_true.size());
    double out = 0.0;
    for (int j = 0; j < C; ++j) {
        double tj = 0.0, pj = 0.0, inter = 0.0;
        for (std::size_t i = 0; i < p.y_true.size(); ++i) {
            if (p.y_true[i] == j) tj += 1.0;
            if (p.y_pred[i] == j) pj += 1.0;
            if (p.y_true[i] == j && p.y_pred[i] == j) inter += 1.0;
        }
        const double dsc = (tj + pj > 0.0) ? 2.0 * inter / (tj + pj) : 1.0;
        out += (tj / total) * dsc;
    }
    return 100.0 * out;
}

} // namespace

TEST_CASE("weighted_dsc matches the brute-force oracle on 1000 random pairs", "[property]") {
    Rng rng(4242);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = rng.range_int(1, 40);
        const int C = rng.range_int(2, 5);
        SegPair p;
        p.y_true.resize(static_cast<std::size_t>(n));
        p.y_pred.resize(static_cast<std::size_t>(n));
        // bias labels so empty classes appear often (the Eq. empty branch)
        for (int i = 0; i < n; ++i) {
            p.y_true[static_cast<std::size_t>(i)] = rng.range_int(0, std::min(1, C - 1));
            p.y_pred[static_cast<std::size_t>(i)] = rng.range_int(0, C - 1);
        }
        REQUIRE(metrics::weighted_dsc(p, C) == Catch::Approx(weighted_dsc_oracle(p, C)).margin(1e-12));
    }
}

TEST_CASE("rrmse examples and rejection") {
    CurvePair cp;
    cp.y_true = {3.0, 4.0};
    cp.y_pred = {3.0, 4.0};
    REQUIRE(metrics::rrmse(cp) == 0.0);
    cp.y_pred = {6.0, 8.0};
    REQUIRE(metrics::rrmse(cp) == Catch::Approx(100.0).epsilon(1e-12));
    cp.y_pred = {0.0, 0.0};
    REQUIRE(metrics::rrmse(cp) == Catch::Approx(100.0).epsilon(1e-12));
    cp.y_pred = {3.0, 0.0};
    REQUIRE(metrics::rrmse(cp) == Catch::Approx(80.0).epsilon(1e-12));
    cp.y_true = {0.0, 0.0};
    REQUIRE_THROWS(metrics::rrmse(cp));
}

TEST_CASE("rmae examples and rejection") {
    CurvePair cp;
    cp.y_true = {1.0, 1.0};
    cp.y_pred = {1.0, 1.0};
    REQUIRE(metrics::rmae(cp) == 0.0);
    cp.y_pred = {0.0, 0.0};
    REQUIRE(metrics::rmae(cp) == Catch::Approx(100.0).epsilon(1e-12));
    cp.y_pred = {1.0, 2.0};
    REQUIRE(metrics::rmae(cp) == Catch::Approx(50.0).epsilon(1e-12));
    cp.y_true = {0.0, 0.0};
    REQUIRE_THROWS(metrics::rmae(cp));
}

TEST_CASE("curve metrics are invariant under joint positive scaling", "[property]") {
    Rng rng(31);
    for (int trial = 0; trial < 30; ++trial) {
        CurvePair cp;
        const int n = rng.range_int(2, 11);
        cp.y_true.resize(static_cast<std::size_t>(n));
        cp.y_pred.resize(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            cp.y_true[static_cast<std::size_t>(i)] = rng.uniform(0.1, 5.0);
            cp.y_pred[static_cast<std::size_t>(i)] = rng.uniform(0.0, 5.0);
        }
        const double s = rng.uniform(0.01, 100.0);
        CurvePair scaled = cp;
        for (auto& x : scaled.y_true) x *= s;
        for (auto& x : scaled.y_pred) x *= s;
        REQUIRE(metrics::rrmse(scaled) == Catch::Approx(metrics::rrmse(cp)).epsilon(1e-9));
        REQUIRE(metrics::rmae(scaled) == Catch::Approx(metrics::rmae(cp)).epsilon(1e-9));
    }
}
