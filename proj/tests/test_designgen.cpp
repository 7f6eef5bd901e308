#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "metalattice/designgen.hpp"

using namespace metalattice;
using namespace metalattice::gen;

TEST_CASE("generate_quarter is deterministic in GenParams") {
    GenParams p;
    p.n_seeds = 6;
    p.thickness = 1.5;
    p.rng_seed = 42;
    const QuarterDesign a = generate_quarter(p);
    const QuarterDesign b = generate_quarter(p);
    REQUIRE(a.grid == b.grid);
    REQUIRE(a.any_material());
}

TEST_CASE("generate_quarter saturates at large thickness") {
    GenParams p;
    p.n_seeds = 5;
    p.thickness = 80.0;
    p.rng_seed = 7;
    const QuarterDesign q = generate_quarter(p);
    for (auto v : q.grid) REQUIRE(v != 0);
}

TEST_CASE("generate_quarter rejects invalid params") {
    GenParams p;
    p.n_seeds = 2;
    REQUIRE_THROWS(generate_quarter(p));
    p.n_seeds = 4;
    p.thickness = 0.0;
    REQUIRE_THROWS(generate_quarter(p));
}

TEST_CASE("quarter statistics over 100 seeds: density band and material variety") {
    int multi_material = 0;
    for (int seed = 0; seed < 100; ++seed) {
        GenParams p;
        p.n_seeds = 5;
        p.thickness = 1.5;
        p.rng_seed = static_cast<std::uint64_t>(seed);
        const QuarterDesign q = generate_quarter(p);
        int nz = 0;
        std::set<int> mats;
        for (auto v : q.grid)
            if (v) {
                ++nz;
                mats.insert(v);
            }
        const double frac = static_cast<double>(nz) / (kQuarter * kQuarter);
        REQUIRE(frac > 0.05);
        REQUIRE(frac < 0.95);
        if (mats.size() >= 2) ++multi_material;
    }
    REQUIRE(multi_material >= 90);
}

TEST_CASE("mirror_full: corner reflection, symmetry, round trip") {
    QuarterDesign q;
    q.at(0, 0) = 2;
    const FullDesign f = mirror_full(q);
    int count = 0;
    for (int i = 0; i < kFull; ++i)
        for (int j = 0; j < kFull; ++j)
            if (f.at(i, j)) {
                ++count;
                REQUIRE(static_cast<int>(f.at(i, j)) == 2);
            }
    REQUIRE(count == 4);
    REQUIRE(f.at(0, 0) == 2);
    REQUIRE(f.at(0, 95) == 2);
    REQUIRE(f.at(95, 0) == 2);
    REQUIRE(f.at(95, 95) == 2);
    REQUIRE(f.is_symmetric());

    GenParams p;
    p.n_seeds = 7;
    p.thickness = 1.2;
    p.rng_seed = 7;
    const QuarterDesign q2 = generate_quarter(p);
    const FullDesign f2 = mirror_full(q2);
    REQUIRE(f2.is_symmetric());
    REQUIRE(upper_left_quarter(f2).grid == q2.grid);
    for (int i = 0; i < kFull; ++i)
        for (int j = 0; j < kFull; ++j) REQUIRE(f2.at(i, j) == f2.at(kFull - 1 - i, j));
}

TEST_CASE("check_loadpath basic cases") {
    FullDesign solid;
    for (auto& v : solid.grid) v = 1;
    REQUIRE(check_loadpath(solid));

    FullDesign row;
    for (int j = 0; j < kFull; ++j) row.at(48, j) = 1;
    REQUIRE_FALSE(check_loadpath(row));

    FullDesign col;
    for (int i = 0; i < kFull; ++i) col.at(i, 10) = 3;
    REQUIRE(check_loadpath(col));

    FullDesign empty;
    REQUIRE_FALSE(check_loadpath(empty));
}

TEST_CASE("generate_design emits symmetric load-bearing designs; corpus covers all values", "[property]") {
    std::set<int> seen;
    for (int i = 0; i < 1000; ++i) {
        const FullDesign d = generate_design(child_seed(123, "corpus", static_cast<std::uint64_t>(i)));
        if (i < 40) {
            REQUIRE(d.is_symmetric());
            REQUIRE(check_loadpath(d));
        }
        for (auto v : d.grid) seen.insert(v);
        if (seen.size() == 4 && i >= 40) break;
    }
    REQUIRE(seen == std::set<int>({0, 1, 2, 3}));
}
