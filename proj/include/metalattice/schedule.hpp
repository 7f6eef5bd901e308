#pragma once

// Diffusion variance schedule: beta_t for t = 1..T plus the derived
// alpha_t = 1 - beta_t, cumulative alpha_bar_t, and posterior variance
// beta_tilde_t = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t (with
// beta_tilde_1 = beta_1). Arrays are double precision; index 0 holds t = 1.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace metalattice::diff {

struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
    std::vector<double> beta_tilde;

    double beta_at(int t) const { return beta[static_cast<std::size_t>(t - 1)]; }
    double alpha_at(int t) const { return alpha[static_cast<std::size_t>(t - 1)]; }
    double alpha_bar_at(int t) const { return alpha_bar[static_cast<std::size_t>(t - 1)]; }
    double beta_tilde_at(int t) const { return beta_tilde[static_cast<std::size_t>(t - 1)]; }
};

enum class ScheduleKind { linear, cosine };

inline ScheduleKind schedule_kind_from(const std::string& s) {
    if (s == "linear") return ScheduleKind::linear;
    if (s == "cosine") return ScheduleKind::cosine;
    throw std::invalid_argument("unknown schedule kind: " + s);
}

inline NoiseSchedule make_schedule(ScheduleKind kind, int T, double beta_start = 1e-4,
                                   double beta_end = 0.02) {
    if (T < 2) throw std::invalid_argument("make_schedule: T must be >= 2");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(static_cast<std::size_t>(T));
    if (kind == ScheduleKind::linear) {
        if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
            throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
        for (int t = 0; t < T; ++t)
            s.beta[static_cast<std::size_t>(t)] =
                beta_start + (beta_end - beta_start) * static_cast<double>(t) / (T - 1);
    } else {
        // cosine alpha_bar profile with the usual 0.008 offset; betas derived
        // from consecutive alpha_bar ratios and clipped below 1
        const double off = 0.008;
        auto f = [&](double u) {
            const double c = std::cos((u + off) / (1.0 + off) * 1.5707963267948966);
            return c * c;
        };
        double prev = 1.0;
        for (int t = 1; t <= T; ++t) {
            const double ab = f(static_cast<double>(t) / T) / f(0.0);
            double beta = 1.0 - ab / prev;
            beta = std::min(std::max(beta, 1e-8), 0.999);
            s.beta[static_cast<std::size_t>(t - 1)] = beta;
            prev *= (1.0 - beta);
        }
    }
    s.alpha.resize(static_cast<std::size_t>(T));
    s.alpha_bar.resize(static_cast<std::size_t>(T));
    s.beta_tilde.resize(static_cast<std::size_t>(T));
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        s.alpha[static_cast<std::size_t>(t)] = 1.0 - s.beta[static_cast<std::size_t>(t)];
        prod *= s.alpha[static_cast<std::size_t>(t)];
        s.alpha_bar[static_cast<std::size_t>(t)] = prod;
    }
    s.beta_tilde[0] = s.beta[0];
    for (int t = 1; t < T; ++t)
        s.beta_tilde[static_cast<std::size_t>(t)] =
            (1.0 - s.alpha_bar[static_cast<std::size_t>(t - 1)]) /
            (1.0 - s.alpha_bar[static_cast<std::size_t>(t)]) * s.beta[static_cast<std::size_t>(t)];
    return s;
}

} // namespace metalattice::diff
