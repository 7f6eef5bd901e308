#pragma once

// Random multi-material truss-like designs from Voronoi tessellations.
// Seeds are drawn in the unit square; every finite ridge segment of the
// Voronoi diagram (unbounded ridges clipped at the square boundary) becomes
// a thick strut with a material ID drawn from {1,2,3}, rasterized onto the
// 48x48 quarter grid. Mirroring along both in-plane axes yields the
// symmetric periodic 96x96 full design.

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "metalattice/rng.hpp"

namespace metalattice::gen {

inline constexpr int kQuarter = 48;
inline constexpr int kFull = 96;

struct QuarterDesign {
    std::array<std::uint8_t, kQuarter * kQuarter> grid{};

    std::uint8_t at(int i, int j) const { return grid[static_cast<std::size_t>(i) * kQuarter + j]; }
    std::uint8_t& at(int i, int j) { return grid[static_cast<std::size_t>(i) * kQuarter + j]; }

    bool any_material() const {
        for (auto v : grid)
            if (v) return true;
        return false;
    }
};

struct FullDesign {
    std::array<std::uint8_t, kFull * kFull> grid{};

    std::uint8_t at(int i, int j) const { return grid[static_cast<std::size_t>(i) * kFull + j]; }
    std::uint8_t& at(int i, int j) { return grid[static_cast<std::size_t>(i) * kFull + j]; }

    bool is_symmetric() const {
        for (int i = 0; i < kFull; ++i)
            for (int j = 0; j < kFull; ++j)
                if (at(i, j) != at(kFull - 1 - i, j) || at(i, j) != at(i, kFull - 1 - j)) return false;
        return true;
    }
};

struct GenParams {
    int n_seeds = 6;
    double thickness = 1.5; // strut half-width in pixels
    std::uint64_t rng_seed = 0;

    void validate() const {
        if (n_seeds < 3) throw std::invalid_argument("GenParams: n_seeds must be >= 3");
        if (!(thickness > 0.0)) throw std::invalid_argument("GenParams: thickness must be > 0");
    }
};

struct Segment {
    double x0, y0, x1, y1; // unit-square coordinates
    std::uint8_t material;
};

namespace detail {

struct Pt {
    double x, y;
};

// Voronoi ridge between seeds i and j: the perpendicular bisector restricted
// by every other seed's half-plane, then clipped to the unit square. Exact
// for any non-coincident seed set, degenerate layouts included.
inline bool ridge_segment(const std::vector<Pt>& seeds, std::size_t i, std::size_t j, Segment& out) {
    const Pt a = seeds[i], b = seeds[j];
    const double mx = 0.5 * (a.x + b.x), my = 0.5 * (a.y + b.y);
    double dx = -(b.y - a.y), dy = b.x - a.x;
    const double len = std::hypot(dx, dy);
    if (len < 1e-12) return false;
    dx /= len;
    dy /= len;

    double tlo = -8.0, thi = 8.0; // generous cover of the unit square
    for (std::size_t k = 0; k < seeds.size(); ++k) {
        if (k == i || k == j) continue;
        // |x-a|^2 <= |x-c|^2  <=>  x.(c-a) <= (|c|^2-|a|^2)/2
        const Pt c = seeds[k];
        const double nx = c.x - a.x, ny = c.y - a.y;
        const double rhs = 0.5 * (c.x * c.x + c.y * c.y - a.x * a.x - a.y * a.y);
        const double p = mx * nx + my * ny - rhs; // value at t = 0
        const double q = dx * nx + dy * ny;       // slope in t
        if (std::abs(q) < 1e-14) {
            if (p > 1e-12) return false;
            continue;
        }
        const double tc = -p / q;
        if (q > 0.0) thi = std::min(thi, tc);
        else tlo = std::max(tlo, tc);
        if (thi - tlo < 1e-12) return false;
    }

    // clip to the unit square (Liang-Barsky on the parametric line)
    auto clip_axis = [&](double origin, double dir) {
        if (std::abs(dir) < 1e-14) {
            if (origin < -1e-12 || origin > 1.0 + 1e-12) tlo = thi + 1.0;
            return;
        }
        double t0 = (0.0 - origin) / dir, t1 = (1.0 - origin) / dir;
        if (t0 > t1) std::swap(t0, t1);
        tlo = std::max(tlo, t0);
        thi = std::min(thi, t1);
    };
    clip_axis(mx, dx);
    clip_axis(my, dy);
    if (thi - tlo < 1e-9) return false;

    out.x0 = mx + tlo * dx;
    out.y0 = my + tlo * dy;
    out.x1 = mx + thi * dx;
    out.y1 = my + thi * dy;
    return true;
}

inline double dist_point_segment(double px, double py, double x0, double y0, double x1, double y1) {
    const double vx = x1 - x0, vy = y1 - y0;
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0.0 ? ((px - x0) * vx + (py - y0) * vy) / len2 : 0.0;
    t = std::max(0.0, std::min(1.0, t));
    const double qx = x0 + t * vx, qy = y0 + t * vy;
    return std::hypot(px - qx, py - qy);
}

} // namespace detail

// Voronoi ridge segments with material IDs for one seed layout. Returns an
// empty list for degenerate layouts (coincident or collinear seeds).
inline std::vector<Segment> voronoi_segments(Rng& rng, int n_seeds) {
    std::vector<detail::Pt> seeds(static_cast<std::size_t>(n_seeds));
    for (auto& s : seeds) {
        s.x = rng.uniform();
        s.y = rng.uniform();
    }
    for (std::size_t i = 0; i < seeds.size(); ++i)
        for (std::size_t j = i + 1; j < seeds.size(); ++j)
            if (std::hypot(seeds[i].x - seeds[j].x, seeds[i].y - seeds[j].y) < 1e-6) return {};
    // collinearity check: max triangle area over consecutive triples
    double max_area = 0.0;
    for (std::size_t i = 0; i < seeds.size(); ++i)
        for (std::size_t j = i + 1; j < seeds.size(); ++j)
            for (std::size_t k = j + 1; k < seeds.size(); ++k) {
                const double area = std::abs((seeds[j].x - seeds[i].x) * (seeds[k].y - seeds[i].y) -
                                             (seeds[k].x - seeds[i].x) * (seeds[j].y - seeds[i].y));
                max_area = std::max(max_area, area);
            }
    if (max_area < 1e-8) return {};

    std::vector<Segment> out;
    for (std::size_t i = 0; i < seeds.size(); ++i)
        for (std::size_t j = i + 1; j < seeds.size(); ++j) {
            Segment s{};
            if (detail::ridge_segment(seeds, i, j, s)) {
                s.material = static_cast<std::uint8_t>(1 + rng.below(3));
                out.push_back(s);
            }
        }
    return out;
}

// Thick-line rasterization: a pixel is covered when its center lies within
// `thickness` (pixel units) of the segment. Later segments overwrite earlier
// ones where struts overlap.
inline void rasterize_segment(QuarterDesign& q, const Segment& s, double thickness) {
    const double x0 = s.x0 * kQuarter, y0 = s.y0 * kQuarter;
    const double x1 = s.x1 * kQuarter, y1 = s.y1 * kQuarter;
    const int jlo = std::max(0, static_cast<int>(std::floor(std::min(x0, x1) - thickness)));
    const int jhi = std::min(kQuarter - 1, static_cast<int>(std::ceil(std::max(x0, x1) + thickness)));
    const int ilo = std::max(0, static_cast<int>(std::floor(std::min(y0, y1) - thickness)));
    const int ihi = std::min(kQuarter - 1, static_cast<int>(std::ceil(std::max(y0, y1) + thickness)));
    for (int i = ilo; i <= ihi; ++i)
        for (int j = jlo; j <= jhi; ++j) {
            const double cx = j + 0.5, cy = i + 0.5;
            if (detail::dist_point_segment(cx, cy, x0, y0, x1, y1) <= thickness)
                q.at(i, j) = s.material;
        }
}

// Random quarter design. Degenerate tessellations reseed with rng_seed+1,
// up to 16 retries.
inline QuarterDesign generate_quarter(const GenParams& p) {
    p.validate();
    for (int attempt = 0; attempt <= 16; ++attempt) {
        Rng rng(p.rng_seed + static_cast<std::uint64_t>(attempt));
        auto segments = voronoi_segments(rng, p.n_seeds);
        if (segments.empty()) continue;
        QuarterDesign q;
        for (const auto& s : segments) rasterize_segment(q, s, p.thickness);
        if (!q.any_material()) continue;
        return q;
    }
    throw std::runtime_error("generate_quarter: degenerate tessellation after 16 retries");
}

// quarter upper-left, mirrored right then down
inline FullDesign mirror_full(const QuarterDesign& q) {
    if (!q.any_material()) throw std::invalid_argument("mirror_full: quarter has no material");
    FullDesign f;
    for (int i = 0; i < kQuarter; ++i)
        for (int j = 0; j < kQuarter; ++j) {
            const std::uint8_t v = q.at(i, j);
            f.at(i, j) = v;
            f.at(i, kFull - 1 - j) = v;
            f.at(kFull - 1 - i, j) = v;
            f.at(kFull - 1 - i, kFull - 1 - j) = v;
        }
    return f;
}

inline QuarterDesign upper_left_quarter(const FullDesign& f) {
    QuarterDesign q;
    for (int i = 0; i < kQuarter; ++i)
        for (int j = 0; j < kQuarter; ++j) q.at(i, j) = f.at(i, j);
    return q;
}

// true iff a 4-connected path of material pixels links row 0 to row 95
inline bool check_loadpath(const FullDesign& d) {
    std::vector<std::uint8_t> visited(kFull * kFull, 0);
    std::vector<int> stack;
    for (int j = 0; j < kFull; ++j)
        if (d.at(0, j)) {
            stack.push_back(j);
            visited[static_cast<std::size_t>(j)] = 1;
        }
    while (!stack.empty()) {
        const int p = stack.back();
        stack.pop_back();
        const int i = p / kFull, j = p % kFull;
        if (i == kFull - 1) return true;
        const int ni[4] = {i - 1, i + 1, i, i};
        const int nj[4] = {j, j, j - 1, j + 1};
        for (int k = 0; k < 4; ++k) {
            if (ni[k] < 0 || ni[k] >= kFull || nj[k] < 0 || nj[k] >= kFull) continue;
            const int np = ni[k] * kFull + nj[k];
            if (!visited[static_cast<std::size_t>(np)] && d.at(ni[k], nj[k])) {
                visited[static_cast<std::size_t>(np)] = 1;
                stack.push_back(np);
            }
        }
    }
    return false;
}

// Corpus sampling defaults: seed count uniform in {4..10}, strut half-width
// uniform in [1.0, 2.5] px.
inline GenParams sample_gen_params(std::uint64_t seed) {
    Rng rng(seed);
    GenParams p;
    p.n_seeds = rng.range_int(4, 10);
    p.thickness = rng.uniform(1.0, 2.5);
    p.rng_seed = rng.next_u64();
    return p;
}

// Full design that carries load; regenerates (never repairs) on failure.
inline FullDesign generate_design(std::uint64_t seed, int max_attempts = 64) {
    for (int attempt = 0; attempt < max_attempts; ++attempt) {
        const GenParams p = sample_gen_params(seed + 0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(attempt));
        FullDesign d = mirror_full(generate_quarter(p));
        if (check_loadpath(d)) return d;
    }
    throw std::runtime_error("generate_design: no load-carrying design after retries");
}

} // namespace metalattice::gen
