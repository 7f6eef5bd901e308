#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "metalattice/tape.hpp"

namespace metalattice::nn {

struct GradCheckReport {
    double max_rel_err = 0.0;
    bool pass = false;
    std::int64_t worst_coord = -1;
    std::string note;
};

// f receives a fresh tape and the leaf Var for x and must return a scalar
// Var. Analytic gradients are compared against central finite differences
// with per-coordinate step h = 1e-3 * max(1,|x_i|); the relative error is
// |a - fd| / max(1, |a|, |fd|), matching the classic gradient-check recipe
// so that near-zero gradient coordinates are held to an absolute tolerance.
inline GradCheckReport grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x,
                                  double rel_tol,
                                  const std::vector<std::int64_t>* coords = nullptr) {
    GradCheckReport rep;
    if (!(rel_tol > 0.0)) {
        rep.note = "rel_tol must be > 0";
        return rep;
    }

    Tape tape;
    Var xv = tape.leaf(x, true);
    Var loss = f(tape, xv);
    const double f0 = tape.val(loss).v[0];
    if (!std::isfinite(f0)) {
        rep.note = "non-finite forward value";
        return rep;
    }
    tape.backward(loss);
    Tensor analytic = tape.grad(xv);

    std::vector<std::int64_t> all;
    if (!coords) {
        all.resize(static_cast<std::size_t>(x.numel()));
        for (std::int64_t i = 0; i < x.numel(); ++i) all[static_cast<std::size_t>(i)] = i;
        coords = &all;
    }

    Tensor xp = x;
    for (std::int64_t i : *coords) {
        const std::size_t ii = static_cast<std::size_t>(i);
        const double xi = xp.v[ii];
        const double h = 1e-3 * std::max(1.0, std::abs(xi));

        auto eval = [&](double value) {
            xp.v[ii] = static_cast<float>(value);
            Tape t2;
            Var xv2 = t2.leaf(xp, false);
            const double out = t2.val(f(t2, xv2)).v[0];
            return out;
        };
        const double fp = eval(xi + h);
        const double fm = eval(xi - h);
        xp.v[ii] = static_cast<float>(xi);
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            rep.note = "non-finite forward value at coordinate " + std::to_string(i);
            rep.worst_coord = i;
            rep.pass = false;
            rep.max_rel_err = std::numeric_limits<double>::infinity();
            return rep;
        }
        const double fd = (fp - fm) / (2.0 * h);
        const double a = analytic.v[ii];
        const double err = std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
        if (err > rep.max_rel_err) {
            rep.max_rel_err = err;
            rep.worst_coord = i;
        }
    }
    rep.pass = rep.max_rel_err <= rel_tol;
    return rep;
}

} // namespace metalattice::nn
