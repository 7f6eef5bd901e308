#pragma once

// Plane-strain voxel FEM with J2 elastoplasticity under displacement-driven
// compression. Each material pixel of the 96x96 design becomes one bilinear
// quad element (2x2 Gauss quadrature) on the 97x97 node lattice. Left/right
// boundary columns are periodically coupled; the bottom row is held
// vertically while the top row is pushed down to 15% nominal strain over 11
// equidistant frames. Output: the four field channels on the pixel grid per
// frame plus the structure's nominal stress-strain curve.
//
// Lateral handling of the periodic seam is selectable: `locked` shares DOFs
// outright (paired displacements exactly equal), `free_expansion` adds one
// uniform seam-offset unknown so the mean lateral stress can relax to zero,
// which is the configuration matching the laterally-free analytic modulus
// E/(1-nu^2) for a homogeneous slab.

#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "metalattice/designgen.hpp"
#include "metalattice/material.hpp"

namespace metalattice::fem {

inline constexpr int kGrid = gen::kFull;      // elements per side
inline constexpr int kNodes = kGrid + 1;      // nodes per side
inline constexpr int kDefaultFrames = 11;
inline constexpr double kDefaultMaxStrain = 0.15;

// ------------------------------------------------------------------ fields

struct FieldStack {
    int frames = kDefaultFrames;
    int height = kGrid;
    int width = kGrid;
    int channels = 4; // (sigma_vM, sigma_yy, g_se, u_x)
    std::vector<float> data; // [frame][row][col][channel]

    FieldStack() = default;
    FieldStack(int f, int h, int w, int c) : frames(f), height(h), width(w), channels(c) {
        data.assign(static_cast<std::size_t>(f) * h * w * c, 0.0f);
    }

    float& at(int f, int i, int j, int c) {
        return data[((static_cast<std::size_t>(f) * height + i) * width + j) * channels + c];
    }
    float at(int f, int i, int j, int c) const {
        return data[((static_cast<std::size_t>(f) * height + i) * width + j) * channels + c];
    }
};

struct StressStrainCurve {
    std::vector<double> strains;  // 0, 0.015, ..., 0.15
    std::vector<double> stresses; // nominal MPa, positive in compression

    void validate() const {
        if (strains.size() != stresses.size() || strains.empty())
            throw std::invalid_argument("StressStrainCurve: size mismatch");
    }
};

struct FieldStats {
    std::array<float, 4> min{};
    std::array<float, 4> max{};
    std::array<bool, 4> degenerate{};
};

// Per-channel affine map to [-1,1]. Degenerate channels (max == min) map to
// zero and are flagged in the stats.
inline FieldStack normalize_fields(const FieldStack& fs, FieldStats& stats) {
    for (int c = 0; c < 4; ++c) {
        const std::size_t ci = static_cast<std::size_t>(c);
        if (!std::isfinite(stats.min[ci]) || !std::isfinite(stats.max[ci]))
            throw std::invalid_argument("normalize_fields: non-finite stats");
        stats.degenerate[ci] = !(stats.max[ci] > stats.min[ci]);
    }
    FieldStack out = fs;
    const std::size_t n = fs.data.size() / 4;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 4; ++c) {
            const std::size_t idx = i * 4 + c;
            if (stats.degenerate[c]) {
                out.data[idx] = 0.0f;
            } else {
                out.data[idx] = 2.0f * (fs.data[idx] - stats.min[c]) / (stats.max[c] - stats.min[c]) - 1.0f;
            }
        }
    return out;
}

inline FieldStack denormalize_fields(const FieldStack& fs, const FieldStats& stats) {
    FieldStack out = fs;
    const std::size_t n = fs.data.size() / 4;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 4; ++c) {
            const std::size_t idx = i * 4 + c;
            if (stats.degenerate[c]) {
                out.data[idx] = stats.min[c];
            } else {
                out.data[idx] = 0.5f * (fs.data[idx] + 1.0f) * (stats.max[c] - stats.min[c]) + stats.min[c];
            }
        }
    return out;
}

// ------------------------------------------------------------- return map

// Per-Gauss-point history. Stress in Voigt order (xx, yy, zz, xy); plastic
// strain stores the tensor shear component, total strain the engineering
// gamma_xy.
struct GpState {
    std::array<double, 4> eps_p{};   // plastic strain tensor
    double ep_eq = 0.0;              // equivalent plastic strain
    double gse = 0.0;                // accumulated strain energy density, MPa
    std::array<double, 4> sigma{};   // committed stress
    std::array<double, 3> eps_tot{}; // committed total strain (xx, yy, gamma_xy)
};

struct ReturnMapResult {
    std::array<double, 4> sigma{};                  // (xx, yy, zz, xy)
    std::array<std::array<double, 3>, 3> tangent{}; // in-plane rows/cols (xx, yy, gamma_xy)
    GpState state;                                  // updated history incl. gse
    bool plastic = false;
};

// Small-strain plane-strain radial return with piecewise-linear isotropic
// hardening. eps_total = (eps_xx, eps_yy, gamma_xy); eps_zz = 0. The strain
// energy density accumulates by the trapezoidal rule of sigma : d eps
// against the previously committed state.
inline ReturnMapResult return_map(const std::array<double, 3>& eps_total, const GpState& prev,
                                  const Material& m) {
    const double G = m.shear_modulus();
    const double lam = m.lame_lambda();

    ReturnMapResult res;
    res.state = prev;

    const std::array<double, 4> e_el = {
        eps_total[0] - prev.eps_p[0],
        eps_total[1] - prev.eps_p[1],
        0.0 - prev.eps_p[2],
        0.5 * eps_total[2] - prev.eps_p[3],
    };
    const double tr = e_el[0] + e_el[1] + e_el[2];
    const std::array<double, 4> sig_tr = {
        lam * tr + 2.0 * G * e_el[0],
        lam * tr + 2.0 * G * e_el[1],
        lam * tr + 2.0 * G * e_el[2],
        2.0 * G * e_el[3],
    };

    const double p = (sig_tr[0] + sig_tr[1] + sig_tr[2]) / 3.0;
    const std::array<double, 4> s_tr = {sig_tr[0] - p, sig_tr[1] - p, sig_tr[2] - p, sig_tr[3]};
    const double snorm2 = s_tr[0] * s_tr[0] + s_tr[1] * s_tr[1] + s_tr[2] * s_tr[2] + 2.0 * s_tr[3] * s_tr[3];
    const double q_tr = std::sqrt(1.5 * snorm2);
    const double sy0 = m.yield_stress(prev.ep_eq);

    auto finish = [&](void) {
        res.state.sigma = res.sigma;
        res.state.eps_tot = eps_total;
        const double dexx = eps_total[0] - prev.eps_tot[0];
        const double deyy = eps_total[1] - prev.eps_tot[1];
        const double dgxy = eps_total[2] - prev.eps_tot[2];
        res.state.gse = prev.gse + 0.5 * ((prev.sigma[0] + res.sigma[0]) * dexx +
                                          (prev.sigma[1] + res.sigma[1]) * deyy +
                                          (prev.sigma[3] + res.sigma[3]) * dgxy);
    };

    if (q_tr <= sy0 * (1.0 + 1e-12) || q_tr < 1e-14) {
        res.sigma = sig_tr;
        res.tangent = {{{lam + 2.0 * G, lam, 0.0}, {lam, lam + 2.0 * G, 0.0}, {0.0, 0.0, G}}};
        res.plastic = false;
        finish();
        return res;
    }

    // consistency: q_tr - 3G*dg = sigma_y(ep + dg), solved by walking the
    // piecewise-linear hardening segments (3G + H > 0 throughout)
    double dg = 0.0;
    {
        double lo_ep = prev.ep_eq;
        double phi_lo = q_tr - sy0;
        bool solved = false;
        const std::size_t max_walk = m.hardening.size() + 1;
        for (std::size_t walk = 0; walk < max_walk && !solved; ++walk) {
            const double H = m.hardening_slope(lo_ep + 1e-14);
            double hi_ep = std::numeric_limits<double>::infinity();
            for (const auto& knot : m.hardening)
                if (knot.first > lo_ep + 1e-14) {
                    hi_ep = knot.first;
                    break;
                }
            const double denom = 3.0 * G + H;
            const double dg_candidate = (lo_ep - prev.ep_eq) + phi_lo / denom;
            if (!std::isfinite(hi_ep) || prev.ep_eq + dg_candidate <= hi_ep + 1e-14) {
                dg = dg_candidate;
                solved = true;
            } else {
                phi_lo -= denom * (hi_ep - lo_ep);
                lo_ep = hi_ep;
                if (phi_lo <= 0.0) {
                    dg = lo_ep - prev.ep_eq;
                    solved = true;
                }
            }
        }
        if (!solved) {
            const double H = m.hardening_slope(lo_ep + 1e-14);
            dg = (lo_ep - prev.ep_eq) + phi_lo / (3.0 * G + H);
        }
        if (dg < 0.0) dg = 0.0;
    }

    const double ep_new = prev.ep_eq + dg;
    const double H_new = m.hardening_slope(ep_new);
    const double factor = 1.0 - 3.0 * G * dg / q_tr;
    res.sigma = {s_tr[0] * factor + p, s_tr[1] * factor + p, s_tr[2] * factor + p, s_tr[3] * factor};
    res.plastic = true;

    const double snorm = std::sqrt(snorm2);
    const std::array<double, 4> n = {s_tr[0] / snorm, s_tr[1] / snorm, s_tr[2] / snorm, s_tr[3] / snorm};
    const double dg_tensor = dg * std::sqrt(1.5);
    res.state.eps_p = {prev.eps_p[0] + dg_tensor * n[0], prev.eps_p[1] + dg_tensor * n[1],
                       prev.eps_p[2] + dg_tensor * n[2], prev.eps_p[3] + dg_tensor * n[3]};
    res.state.ep_eq = ep_new;

    // consistent tangent: De - dg*6G^2/q_tr * Pdev + 6G^2 (dg/q_tr - 1/(3G+H)) n x n
    const double c1 = 6.0 * G * G * dg / q_tr;
    const double c2 = 6.0 * G * G * (dg / q_tr - 1.0 / (3.0 * G + H_new));
    const double K = lam + 2.0 * G / 3.0;
    const double m4[4] = {1.0, 1.0, 1.0, 0.0};
    const double Is[4] = {1.0, 1.0, 1.0, 0.5};
    double D4[4][4];
    for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) {
            const double pdev = (a == b ? Is[a] : 0.0) - m4[a] * m4[b] / 3.0;
            const double de = K * m4[a] * m4[b] + 2.0 * G * pdev;
            D4[a][b] = de - c1 * pdev + c2 * n[static_cast<std::size_t>(a)] * n[static_cast<std::size_t>(b)];
        }
    const int ip[3] = {0, 1, 3};
    for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b)
            res.tangent[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] = D4[ip[a]][ip[b]];
    finish();
    return res;
}

// -------------------------------------------------------------- the solver

struct SolverOptions {
    int frames = kDefaultFrames;
    double max_strain = kDefaultMaxStrain;
    double rel_tol = 1e-8;
    double abs_tol = 1e-10;
    int max_newton = 50;
    int max_bisect = 4;
    enum class Lateral { locked, free_expansion };
    Lateral lateral = Lateral::locked;
    bool verbose = false; // per-iteration residual trace
};

struct SolveFailure : std::runtime_error {
    explicit SolveFailure(const std::string& what) : std::runtime_error(what) {}
};

struct SolveResult {
    FieldStack fields;
    StressStrainCurve curve;
    std::vector<double> top_reactions;
    std::vector<double> bottom_reactions;
    int total_newton_iters = 0;
};

class CompressionSolver {
public:
    CompressionSolver(const gen::FullDesign& design, std::vector<Material> materials,
                      SolverOptions opts = {})
        : design_(design), materials_(std::move(materials)), opts_(opts) {
        if (materials_.size() < 3) throw std::invalid_argument("CompressionSolver: need 3 materials");
        for (auto& m : materials_) m.validate();
        if (!gen::check_loadpath(design)) throw std::invalid_argument("CompressionSolver: design fails loadpath check");
        build_model();
    }

    int dof_count() const { return n_dofs_; }
    bool free_lateral() const { return opts_.lateral == SolverOptions::Lateral::free_expansion; }
    double current_delta() const { return delta_; }
    int total_newton_iters() const { return total_newton_iters_; }

    // Advance the prescribed top displacement (positive = compression) to
    // `delta`, committing converged state. Throws SolveFailure on breakdown.
    void advance_to(double delta) {
        advance_recursive(delta, 0);
        update_gauge();
    }

    // sums of committed internal vertical forces over the plate rows
    double top_reaction() const { return row_reaction(0); }
    double bottom_reaction() const { return row_reaction(kGrid); }

    // nominal stress: top reaction per undeformed width, unit thickness
    double nominal_stress() const { return top_reaction() / static_cast<double>(kGrid); }

    // displacement of a node (row 0 = top); u_x reported in the
    // per-component zero-mean gauge
    std::array<double, 2> node_displacement(int r, int c) const {
        const int n = canonical(r, c);
        std::array<double, 2> out{};
        out[0] = dof_value(static_cast<std::size_t>(n) * 2 + 0);
        out[1] = dof_value(static_cast<std::size_t>(n) * 2 + 1);
        if (c == kGrid && free_lateral()) out[0] += cx_value();
        const int comp = node_comp_[static_cast<std::size_t>(n)];
        if (comp >= 0) out[0] -= ux_gauge_[static_cast<std::size_t>(comp)];
        return out;
    }

    bool element_kept(int i, int j) const { return elem_index_[static_cast<std::size_t>(i) * kGrid + j] >= 0; }

    const GpState& gauss_state(int elem_row, int elem_col, int gp) const {
        const int e = elem_index_[static_cast<std::size_t>(elem_row) * kGrid + elem_col];
        if (e < 0) throw std::invalid_argument("gauss_state: void or unsupported element");
        return states_[static_cast<std::size_t>(e) * 4 + static_cast<std::size_t>(gp)];
    }

    void extract_frame(FieldStack& fs, int frame) const;

private:
    struct Elem {
        int row, col, material;
    };
    struct LocalDof {
        int dof = -1;      // node-dof slot (node*2+d)
        bool plus_cx = false;
    };
    struct Dof {
        int index = -1;
        bool prescribed = false;
        double value = 0.0;
    };

    static int node_id(int r, int c) { return r * kNodes + c; }
    int canonical(int r, int c) const { return c == kGrid ? node_id(r, 0) : node_id(r, c); }

    double dof_value(std::size_t slot) const {
        const Dof& d = node_dofs_[slot];
        if (d.prescribed) return d.value;
        return d.index >= 0 ? u_[static_cast<std::size_t>(d.index)] : 0.0;
    }

    double cx_value() const { return cx_index_ >= 0 ? u_[static_cast<std::size_t>(cx_index_)] : 0.0; }

    // 8-connected material components; only components touching a plate row
    // participate (anything floating free of both plates cannot carry load
    // and would make the stiffness singular)
    void find_components(std::vector<int>& pixel_comp, std::vector<char>& comp_kept) const {
        pixel_comp.assign(kGrid * kGrid, -1);
        int ncomp = 0;
        std::vector<int> stack;
        for (int i = 0; i < kGrid; ++i)
            for (int j = 0; j < kGrid; ++j) {
                if (!design_.at(i, j) || pixel_comp[static_cast<std::size_t>(i) * kGrid + j] >= 0) continue;
                const int comp = ncomp++;
                stack.assign(1, i * kGrid + j);
                pixel_comp[static_cast<std::size_t>(i) * kGrid + j] = comp;
                while (!stack.empty()) {
                    const int p = stack.back();
                    stack.pop_back();
                    const int pi = p / kGrid, pj = p % kGrid;
                    for (int di = -1; di <= 1; ++di)
                        for (int dj = -1; dj <= 1; ++dj) {
                            if (!di && !dj) continue;
                            const int ni = pi + di, nj = pj + dj;
                            if (ni < 0 || ni >= kGrid || nj < 0 || nj >= kGrid) continue;
                            if (!design_.at(ni, nj)) continue;
                            int& c = pixel_comp[static_cast<std::size_t>(ni) * kGrid + nj];
                            if (c < 0) {
                                c = comp;
                                stack.push_back(ni * kGrid + nj);
                            }
                        }
                }
            }
        comp_kept.assign(static_cast<std::size_t>(ncomp), 0);
        for (int j = 0; j < kGrid; ++j) {
            if (design_.at(0, j)) comp_kept[static_cast<std::size_t>(pixel_comp[static_cast<std::size_t>(j)])] = 1;
            if (design_.at(kGrid - 1, j))
                comp_kept[static_cast<std::size_t>(pixel_comp[static_cast<std::size_t>(kGrid - 1) * kGrid + j])] = 1;
        }
    }

    void build_model() {
        std::vector<int> pixel_comp;
        std::vector<char> comp_kept;
        find_components(pixel_comp, comp_kept);

        elem_index_.assign(kGrid * kGrid, -1);
        for (int i = 0; i < kGrid; ++i)
            for (int j = 0; j < kGrid; ++j) {
                if (!design_.at(i, j)) continue;
                const int comp = pixel_comp[static_cast<std::size_t>(i) * kGrid + j];
                if (!comp_kept[static_cast<std::size_t>(comp)]) continue;
                elem_index_[static_cast<std::size_t>(i) * kGrid + j] = static_cast<int>(elems_.size());
                elems_.push_back({i, j, static_cast<int>(design_.at(i, j)) - 1});
            }
        states_.assign(elems_.size() * 4, GpState{});
        if (elems_.empty()) throw std::invalid_argument("CompressionSolver: no load-bearing material");

        // node activity and component labels on canonical nodes
        const std::size_t nn = static_cast<std::size_t>(kNodes) * kNodes;
        node_comp_.assign(nn, -1);
        std::vector<char> active(nn, 0);
        for (const auto& e : elems_) {
            const int comp = pixel_comp[static_cast<std::size_t>(e.row) * kGrid + e.col];
            const int rs[4] = {e.row, e.row, e.row + 1, e.row + 1};
            const int cs[4] = {e.col, e.col + 1, e.col + 1, e.col};
            for (int k = 0; k < 4; ++k) {
                const std::size_t n = static_cast<std::size_t>(canonical(rs[k], cs[k]));
                active[n] = 1;
                node_comp_[n] = comp;
            }
        }

        // renumber kept components densely
        std::vector<int> comp_map(comp_kept.size(), -1);
        int dense = 0;
        for (std::size_t c = 0; c < comp_kept.size(); ++c)
            if (comp_kept[c]) comp_map[c] = dense++;
        n_components_ = dense;
        for (auto& c : node_comp_)
            if (c >= 0) c = comp_map[static_cast<std::size_t>(c)];
        ux_gauge_.assign(static_cast<std::size_t>(n_components_), 0.0);

        // one u_x gauge pin per component: the active bottom-most node
        // nearest the mirror axis, so symmetric designs keep a symmetric pin
        std::vector<int> pin(static_cast<std::size_t>(n_components_), -1);
        std::vector<int> pin_score(static_cast<std::size_t>(n_components_), 1 << 30);
        for (int r = kNodes - 1; r >= 0; --r)
            for (int c = 0; c < kGrid; ++c) {
                const std::size_t n = static_cast<std::size_t>(node_id(r, c));
                if (!active[n]) continue;
                const int comp = node_comp_[n];
                const int score = std::abs(c - kGrid / 2) + (kNodes - 1 - r) * kNodes;
                if (score < pin_score[static_cast<std::size_t>(comp)]) {
                    pin_score[static_cast<std::size_t>(comp)] = score;
                    pin[static_cast<std::size_t>(comp)] = static_cast<int>(n);
                }
            }

        node_dofs_.assign(nn * 2, Dof{});
        int next = 0;
        for (int r = 0; r < kNodes; ++r)
            for (int c = 0; c < kGrid; ++c) {
                const std::size_t n = static_cast<std::size_t>(node_id(r, c));
                if (!active[n]) continue;
                Dof& dx = node_dofs_[n * 2 + 0];
                Dof& dy = node_dofs_[n * 2 + 1];
                const int comp = node_comp_[n];
                if (pin[static_cast<std::size_t>(comp)] == static_cast<int>(n)) {
                    dx.prescribed = true;
                } else {
                    dx.index = next++;
                }
                if (r == 0) {
                    dy.prescribed = true; // driven top row
                } else if (r == kGrid) {
                    dy.prescribed = true; // fixed bottom row
                } else {
                    dy.index = next++;
                }
            }
        cx_index_ = free_lateral() ? next++ : -1;
        n_dofs_ = next;
        u_.assign(static_cast<std::size_t>(n_dofs_), 0.0);

        precompute_b_matrices();
        elem_dofs_.resize(elems_.size());
        for (std::size_t ei = 0; ei < elems_.size(); ++ei) {
            const auto& e = elems_[ei];
            const int rs[4] = {e.row, e.row, e.row + 1, e.row + 1};
            const int cs[4] = {e.col, e.col + 1, e.col + 1, e.col};
            for (int k = 0; k < 4; ++k) {
                const bool seam = cs[k] == kGrid;
                const int n = canonical(rs[k], cs[k]);
                for (int d = 0; d < 2; ++d) {
                    LocalDof& ld = elem_dofs_[ei][static_cast<std::size_t>(k) * 2 + d];
                    ld.dof = static_cast<int>(static_cast<std::size_t>(n) * 2 + d);
                    ld.plus_cx = seam && d == 0 && free_lateral();
                }
            }
        }
    }

    void precompute_b_matrices() {
        const double gp = 1.0 / std::sqrt(3.0);
        const double pts[4][2] = {{-gp, -gp}, {gp, -gp}, {gp, gp}, {-gp, gp}};
        for (int g = 0; g < 4; ++g) {
            const double xi = pts[g][0], eta = pts[g][1];
            const double dN[4][2] = {
                {-(1 - eta) / 4.0, -(1 - xi) / 4.0},
                {(1 - eta) / 4.0, -(1 + xi) / 4.0},
                {(1 + eta) / 4.0, (1 + xi) / 4.0},
                {-(1 + eta) / 4.0, (1 - xi) / 4.0},
            };
            for (int k = 0; k < 4; ++k) {
                const double dndx = dN[k][0] * 2.0; // unit pixel: dxi/dx = 2
                const double dndy = dN[k][1] * 2.0;
                b_[g][0][static_cast<std::size_t>(k) * 2 + 0] = dndx;
                b_[g][1][static_cast<std::size_t>(k) * 2 + 1] = dndy;
                b_[g][2][static_cast<std::size_t>(k) * 2 + 0] = dndy;
                b_[g][2][static_cast<std::size_t>(k) * 2 + 1] = dndx;
            }
        }
    }

    void set_prescribed(double delta) {
        for (int c = 0; c < kGrid; ++c) {
            Dof& dy = node_dofs_[static_cast<std::size_t>(node_id(0, c)) * 2 + 1];
            if (dy.prescribed) dy.value = delta; // y points down: compression
        }
        delta_ = delta;
    }

    void gather(std::size_t ei, double* ue) const {
        for (int l = 0; l < 8; ++l) {
            const LocalDof& ld = elem_dofs_[ei][static_cast<std::size_t>(l)];
            double v = dof_value(static_cast<std::size_t>(ld.dof));
            if (ld.plus_cx) v += cx_value();
            ue[l] = v;
        }
    }

    double assemble(bool with_stiffness, std::vector<Eigen::Triplet<double>>* trips,
                    Eigen::VectorXd* resid) {
        if (resid) resid->setZero();
        states_scratch_.resize(states_.size());
        double ue[8];
        for (std::size_t ei = 0; ei < elems_.size(); ++ei) {
            const auto& e = elems_[ei];
            const Material& mat = materials_[static_cast<std::size_t>(e.material)];
            gather(ei, ue);
            double ke[8][8] = {};
            double fe[8] = {};
            for (int g = 0; g < 4; ++g) {
                std::array<double, 3> eps{};
                for (int a = 0; a < 3; ++a)
                    for (int l = 0; l < 8; ++l)
                        eps[static_cast<std::size_t>(a)] += b_[g][a][static_cast<std::size_t>(l)] * ue[l];
                const ReturnMapResult rm = return_map(eps, states_[ei * 4 + static_cast<std::size_t>(g)], mat);
                states_scratch_[ei * 4 + static_cast<std::size_t>(g)] = rm.state;
                const double sip[3] = {rm.sigma[0], rm.sigma[1], rm.sigma[3]};
                for (int l = 0; l < 8; ++l) {
                    double f = 0.0;
                    for (int a = 0; a < 3; ++a) f += b_[g][a][static_cast<std::size_t>(l)] * sip[a];
                    fe[l] += f * kWdetJ;
                }
                if (with_stiffness) {
                    double DB[3][8];
                    for (int a = 0; a < 3; ++a)
                        for (int l = 0; l < 8; ++l) {
                            double s = 0.0;
                            for (int b2 = 0; b2 < 3; ++b2)
                                s += rm.tangent[static_cast<std::size_t>(a)][static_cast<std::size_t>(b2)] *
                                     b_[g][b2][static_cast<std::size_t>(l)];
                            DB[a][l] = s;
                        }
                    for (int l = 0; l < 8; ++l)
                        for (int m2 = 0; m2 < 8; ++m2) {
                            double s = 0.0;
                            for (int a = 0; a < 3; ++a) s += b_[g][a][static_cast<std::size_t>(l)] * DB[a][m2];
                            ke[l][m2] += s * kWdetJ;
                        }
                }
            }
            for (int l = 0; l < 8; ++l) {
                const LocalDof& ld = elem_dofs_[ei][static_cast<std::size_t>(l)];
                const Dof& d = node_dofs_[static_cast<std::size_t>(ld.dof)];
                int gi[2];
                int ng = 0;
                if (!d.prescribed && d.index >= 0) gi[ng++] = d.index;
                if (ld.plus_cx) gi[ng++] = cx_index_;
                for (int t = 0; t < ng; ++t) {
                    if (resid) (*resid)[gi[t]] += fe[l];
                    if (with_stiffness) {
                        for (int m2 = 0; m2 < 8; ++m2) {
                            const LocalDof& ldm = elem_dofs_[ei][static_cast<std::size_t>(m2)];
                            const Dof& dm = node_dofs_[static_cast<std::size_t>(ldm.dof)];
                            int gj[2];
                            int ngj = 0;
                            if (!dm.prescribed && dm.index >= 0) gj[ngj++] = dm.index;
                            if (ldm.plus_cx) gj[ngj++] = cx_index_;
                            for (int s = 0; s < ngj; ++s) trips->emplace_back(gi[t], gj[s], ke[l][m2]);
                        }
                    }
                }
            }
        }
        return resid ? resid->norm() : 0.0;
    }

    void advance_recursive(double target, int depth) {
        const double start = delta_;
        const std::vector<GpState> saved_states = states_;
        const std::vector<double> saved_u = u_;
        if (newton_solve(target)) {
            states_ = states_scratch_;
            return;
        }
        if (depth >= opts_.max_bisect)
            throw SolveFailure("Newton did not converge at delta=" + std::to_string(target) + " after " +
                               std::to_string(opts_.max_bisect) + " bisections");
        states_ = saved_states;
        u_ = saved_u;
        set_prescribed(start);
        const double mid = 0.5 * (start + target);
        advance_recursive(mid, depth + 1);
        advance_recursive(target, depth + 1);
    }

    bool newton_solve(double target) {
        set_prescribed(target);
        Eigen::VectorXd resid(n_dofs_);
        double r0 = -1.0;
        double rnorm = assemble(false, nullptr, &resid);
        for (int it = 0; it < opts_.max_newton; ++it) {
            if (opts_.verbose)
                std::fprintf(stderr, "newton delta=%.6g it=%d resid=%.6e\n", target, it, rnorm);
            if (!std::isfinite(rnorm)) return false;
            if (it == 0) r0 = rnorm;
            if (rnorm <= std::max(opts_.rel_tol * r0, opts_.abs_tol)) {
                total_newton_iters_ += it;
                return true;
            }
            std::vector<Eigen::Triplet<double>> trips;
            trips.reserve(elems_.size() * 64);
            assemble(true, &trips, &resid);
            Eigen::SparseMatrix<double> K(n_dofs_, n_dofs_);
            K.setFromTriplets(trips.begin(), trips.end());
            Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
            lu.compute(K);
            if (lu.info() != Eigen::Success) return false;
            const Eigen::VectorXd du = lu.solve(-resid);
            if (lu.info() != Eigen::Success || !du.allFinite()) return false;

            // backtracking line search on the residual norm; plastic stress
            // redistribution in slender struts makes full steps overshoot
            const std::vector<double> u_saved = u_;
            double alpha = 1.0, best_alpha = 1.0;
            double best_norm = std::numeric_limits<double>::infinity();
            bool accepted = false;
            for (int ls = 0; ls < 10 && !accepted; ++ls) {
                for (int i = 0; i < n_dofs_; ++i)
                    u_[static_cast<std::size_t>(i)] = u_saved[static_cast<std::size_t>(i)] + alpha * du[i];
                const double rn = assemble(false, nullptr, &resid);
                if (std::isfinite(rn) && rn < best_norm) {
                    best_norm = rn;
                    best_alpha = alpha;
                }
                if (std::isfinite(rn) && rn <= (1.0 - 1e-4 * alpha) * rnorm) accepted = true;
                else alpha *= 0.5;
            }
            for (int i = 0; i < n_dofs_; ++i)
                u_[static_cast<std::size_t>(i)] = u_saved[static_cast<std::size_t>(i)] + best_alpha * du[i];
            rnorm = assemble(false, nullptr, &resid); // refreshes trial states for commit
            double umax = 0.0;
            for (double v : u_) umax = std::max(umax, std::abs(v));
            if (umax > 1e4) return false;
        }
        return false;
    }

    // committed internal vertical force over a plate row
    double row_reaction(int row) const {
        double total = 0.0;
        for (std::size_t ei = 0; ei < elems_.size(); ++ei) {
            const auto& e = elems_[ei];
            if (e.row != (row == 0 ? 0 : kGrid - 1)) continue;
            for (int g = 0; g < 4; ++g) {
                const GpState& st = states_[ei * 4 + static_cast<std::size_t>(g)];
                const double sip[3] = {st.sigma[0], st.sigma[1], st.sigma[3]};
                for (int l = 1; l < 8; l += 2) {
                    const int node_row = (l / 2 < 2) ? e.row : e.row + 1;
                    if (node_row != row) continue;
                    double f = 0.0;
                    for (int a = 0; a < 3; ++a) f += b_[g][a][static_cast<std::size_t>(l)] * sip[a];
                    total += f * kWdetJ;
                }
            }
        }
        return total;
    }

    // reporting gauge: per-component zero-mean u_x (lateral translation per
    // component is a null mode of the periodic model)
    void update_gauge() {
        std::vector<double> sum(static_cast<std::size_t>(n_components_), 0.0);
        std::vector<int> count(static_cast<std::size_t>(n_components_), 0);
        for (int r = 0; r < kNodes; ++r)
            for (int c = 0; c < kGrid; ++c) {
                const std::size_t n = static_cast<std::size_t>(node_id(r, c));
                const int comp = node_comp_[n];
                if (comp < 0) continue;
                sum[static_cast<std::size_t>(comp)] += dof_value(n * 2 + 0);
                count[static_cast<std::size_t>(comp)] += 1;
            }
        for (int c = 0; c < n_components_; ++c)
            ux_gauge_[static_cast<std::size_t>(c)] =
                count[static_cast<std::size_t>(c)] ? sum[static_cast<std::size_t>(c)] / count[static_cast<std::size_t>(c)] : 0.0;
    }

    static constexpr double kWdetJ = 0.25;

    gen::FullDesign design_;
    std::vector<Material> materials_;
    SolverOptions opts_;

    std::vector<Elem> elems_;
    std::vector<int> elem_index_;
    std::vector<GpState> states_;
    std::vector<GpState> states_scratch_;
    std::vector<Dof> node_dofs_;
    std::vector<std::array<LocalDof, 8>> elem_dofs_;
    std::vector<int> node_comp_;
    std::vector<double> ux_gauge_;
    double b_[4][3][8] = {};
    int n_dofs_ = 0;
    int n_components_ = 0;
    int cx_index_ = -1;
    double delta_ = 0.0;
    std::vector<double> u_;
    int total_newton_iters_ = 0;
};

// Field extraction: Gauss values averaged per element, elements averaged to
// nodes, node values sampled at pixel centers (mean of the four corners).
// Void pixels carry 0 except u_x, which is seeded from the nearest material
// node and Laplace-smoothed so the displacement channel stays continuous.
inline void CompressionSolver::extract_frame(FieldStack& fs, int frame) const {
    std::vector<double> evm(elems_.size()), eyy(elems_.size()), egse(elems_.size());
    for (std::size_t ei = 0; ei < elems_.size(); ++ei) {
        double vm = 0.0, yy = 0.0, gs = 0.0;
        for (int g = 0; g < 4; ++g) {
            const auto& s = states_[ei * 4 + static_cast<std::size_t>(g)].sigma;
            const double a = s[0] - s[1], b2 = s[1] - s[2], c = s[2] - s[0];
            vm += std::sqrt(0.5 * (a * a + b2 * b2 + c * c) + 3.0 * s[3] * s[3]);
            yy += s[1];
            gs += states_[ei * 4 + static_cast<std::size_t>(g)].gse;
        }
        evm[ei] = vm / 4.0;
        eyy[ei] = yy / 4.0;
        egse[ei] = gs / 4.0;
    }

    const std::size_t nn = static_cast<std::size_t>(kNodes) * kNodes;
    std::vector<double> nvm(nn, 0.0), nyy(nn, 0.0), ngse(nn, 0.0), nux(nn, 0.0);
    std::vector<int> ncount(nn, 0);
    for (std::size_t ei = 0; ei < elems_.size(); ++ei) {
        const auto& e = elems_[ei];
        const int rs[4] = {e.row, e.row, e.row + 1, e.row + 1};
        const int cs[4] = {e.col, e.col + 1, e.col + 1, e.col};
        for (int k = 0; k < 4; ++k) {
            const std::size_t n = static_cast<std::size_t>(canonical(rs[k], cs[k]));
            nvm[n] += evm[ei];
            nyy[n] += eyy[ei];
            ngse[n] += egse[ei];
            ncount[n] += 1;
        }
    }
    for (std::size_t n = 0; n < nn; ++n)
        if (ncount[n]) {
            nvm[n] /= ncount[n];
            nyy[n] /= ncount[n];
            ngse[n] /= ncount[n];
        }
    for (int r = 0; r < kNodes; ++r)
        for (int c = 0; c < kGrid; ++c) {
            const std::size_t n = static_cast<std::size_t>(node_id(r, c));
            if (ncount[n]) nux[n] = node_displacement(r, c)[0];
        }

    // u_x fill over non-material nodes: level-synchronous nearest-node
    // averaging (order independent, preserves mirror symmetry), then Jacobi
    {
        // periodic in the column direction so the fill stays mirror-symmetric
        auto for_neighbors = [&](int n, auto&& fn) {
            const int r = n / kNodes, c = n % kNodes;
            if (r > 0) fn(node_id(r - 1, c));
            if (r < kNodes - 1) fn(node_id(r + 1, c));
            fn(node_id(r, c > 0 ? c - 1 : kGrid - 1));
            fn(node_id(r, c < kGrid - 1 ? c + 1 : 0));
        };
        std::vector<int> dist(nn, -1);
        std::vector<int> frontier, next;
        for (int r = 0; r < kNodes; ++r)
            for (int c = 0; c < kGrid; ++c) {
                const int n = node_id(r, c);
                if (ncount[static_cast<std::size_t>(n)]) {
                    dist[static_cast<std::size_t>(n)] = 0;
                    frontier.push_back(n);
                }
            }
        int level = 0;
        while (!frontier.empty()) {
            next.clear();
            for (int n : frontier)
                for_neighbors(n, [&](int nb) {
                    if (dist[static_cast<std::size_t>(nb)] < 0) {
                        dist[static_cast<std::size_t>(nb)] = level + 1;
                        next.push_back(nb);
                    }
                });
            // assign each new node the mean over its already-valued neighbors
            for (int n : next) {
                double s = 0.0;
                int cnt = 0;
                for_neighbors(n, [&](int nb) {
                    if (dist[static_cast<std::size_t>(nb)] == level ||
                        (dist[static_cast<std::size_t>(nb)] >= 0 && dist[static_cast<std::size_t>(nb)] < level)) {
                        s += nux[static_cast<std::size_t>(nb)];
                        ++cnt;
                    }
                });
                if (cnt) nux[static_cast<std::size_t>(n)] = s / cnt;
            }
            frontier.swap(next);
            ++level;
        }
        std::vector<double> tmp = nux;
        for (int sweep = 0; sweep < 40; ++sweep) {
            for (int r = 0; r < kNodes; ++r)
                for (int c = 0; c < kGrid; ++c) {
                    const std::size_t n = static_cast<std::size_t>(node_id(r, c));
                    if (ncount[n]) continue;
                    double s = 0.0;
                    int cnt = 0;
                    for_neighbors(static_cast<int>(n), [&](int nb) {
                        s += nux[static_cast<std::size_t>(nb)];
                        ++cnt;
                    });
                    if (cnt) tmp[n] = s / cnt;
                }
            std::swap(nux, tmp);
        }
    }

    for (int i = 0; i < kGrid; ++i)
        for (int j = 0; j < kGrid; ++j) {
            const bool solid = elem_index_[static_cast<std::size_t>(i) * kGrid + j] >= 0;
            const std::size_t n00 = static_cast<std::size_t>(canonical(i, j));
            const std::size_t n01 = static_cast<std::size_t>(canonical(i, j + 1));
            const std::size_t n10 = static_cast<std::size_t>(canonical(i + 1, j));
            const std::size_t n11 = static_cast<std::size_t>(canonical(i + 1, j + 1));
            auto avg = [&](const std::vector<double>& v) { return 0.25 * (v[n00] + v[n01] + v[n10] + v[n11]); };
            fs.at(frame, i, j, 0) = solid ? static_cast<float>(avg(nvm)) : 0.0f;
            fs.at(frame, i, j, 1) = solid ? static_cast<float>(avg(nyy)) : 0.0f;
            fs.at(frame, i, j, 2) = solid ? static_cast<float>(avg(ngse)) : 0.0f;
            fs.at(frame, i, j, 3) = static_cast<float>(avg(nux));
        }
}

// Full displacement-controlled compression run.
inline SolveResult solve_compression(const gen::FullDesign& design,
                                     const std::vector<Material>& materials,
                                     SolverOptions opts = {}) {
    if (opts.frames < 2) throw std::invalid_argument("solve_compression: frames must be >= 2");
    CompressionSolver solver(design, materials, opts);

    SolveResult res;
    res.fields = FieldStack(opts.frames, kGrid, kGrid, 4);
    res.curve.strains.assign(static_cast<std::size_t>(opts.frames), 0.0);
    res.curve.stresses.assign(static_cast<std::size_t>(opts.frames), 0.0);
    res.top_reactions.assign(static_cast<std::size_t>(opts.frames), 0.0);
    res.bottom_reactions.assign(static_cast<std::size_t>(opts.frames), 0.0);
    solver.extract_frame(res.fields, 0);

    for (int k = 1; k < opts.frames; ++k) {
        const double strain = opts.max_strain * static_cast<double>(k) / (opts.frames - 1);
        solver.advance_to(strain * kGrid);
        res.curve.strains[static_cast<std::size_t>(k)] = strain;
        res.top_reactions[static_cast<std::size_t>(k)] = solver.top_reaction();
        res.bottom_reactions[static_cast<std::size_t>(k)] = solver.bottom_reaction();
        res.curve.stresses[static_cast<std::size_t>(k)] = solver.nominal_stress();
        solver.extract_frame(res.fields, k);
    }
    res.total_newton_iters = solver.total_newton_iters();
    return res;
}

} // namespace metalattice::fem
