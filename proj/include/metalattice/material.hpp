#pragma once

#include <stdexcept>
#include <utility>
#include <vector>

namespace metalattice::fem {

// Elastoplastic material: linear elasticity plus a piecewise-linear
// isotropic hardening table of (equivalent plastic strain, yield stress)
// pairs. Beyond the last entry the table extrapolates with its final slope.
struct Material {
    double youngs_modulus = 2306.0; // MPa
    double poisson_ratio = 0.35;
    std::vector<std::pair<double, double>> hardening = {{0.0, 60.0}};

    void validate() const {
        if (!(youngs_modulus > 0.0)) throw std::invalid_argument("Material: E must be > 0");
        if (!(poisson_ratio > 0.0 && poisson_ratio < 0.5))
            throw std::invalid_argument("Material: nu must be in (0, 0.5)");
        if (hardening.empty() || hardening.front().first != 0.0 || !(hardening.front().second > 0.0))
            throw std::invalid_argument("Material: hardening table must start at (0, sigma_y0 > 0)");
        for (std::size_t i = 1; i < hardening.size(); ++i)
            if (!(hardening[i].first > hardening[i - 1].first))
                throw std::invalid_argument("Material: hardening table must be strictly increasing in plastic strain");
    }

    double shear_modulus() const { return youngs_modulus / (2.0 * (1.0 + poisson_ratio)); }
    double lame_lambda() const {
        return youngs_modulus * poisson_ratio / ((1.0 + poisson_ratio) * (1.0 - 2.0 * poisson_ratio));
    }

    double yield_stress(double ep) const {
        const auto& h = hardening;
        if (h.size() == 1) return h[0].second;
        for (std::size_t i = 1; i < h.size(); ++i) {
            if (ep <= h[i].first) {
                const double t = (ep - h[i - 1].first) / (h[i].first - h[i - 1].first);
                return h[i - 1].second + t * (h[i].second - h[i - 1].second);
            }
        }
        const std::size_t n = h.size();
        const double slope = (h[n - 1].second - h[n - 2].second) / (h[n - 1].first - h[n - 2].first);
        const double y = h[n - 1].second + slope * (ep - h[n - 1].first);
        // keep the yield surface open for the return map even under long
        // softening extrapolation
        return y > 1e-3 * h[0].second ? y : 1e-3 * h[0].second;
    }

    double hardening_slope(double ep) const {
        const auto& h = hardening;
        if (h.size() == 1) return 0.0;
        for (std::size_t i = 1; i < h.size(); ++i)
            if (ep <= h[i].first)
                return (h[i].second - h[i - 1].second) / (h[i].first - h[i - 1].first);
        const std::size_t n = h.size();
        return (h[n - 1].second - h[n - 2].second) / (h[n - 1].first - h[n - 2].first);
    }
};

// Toolkit defaults for the three print materials. Elastic constants follow
// the cited datasheets; the hardening tables are configurable placeholders
// shaping three distinct post-yield behaviors (flat, hardening, softening).
inline std::vector<Material> default_materials() {
    Material resin;
    resin.youngs_modulus = 2306.0;
    resin.poisson_ratio = 0.35;
    resin.hardening = {{0.0, 60.0}};

    Material pcabs;
    pcabs.youngs_modulus = 2500.0;
    pcabs.poisson_ratio = 0.35;
    pcabs.hardening = {{0.0, 45.0}, {1.0, 95.0}}; // slope 50 MPa

    Material pla;
    pla.youngs_modulus = 2300.0;
    pla.poisson_ratio = 0.35;
    pla.hardening = {{0.0, 55.0}, {0.02, 55.0}, {1.0, 35.4}}; // softening -20 MPa past 0.02

    return {resin, pcabs, pla};
}

} // namespace metalattice::fem
