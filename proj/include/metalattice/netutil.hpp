#pragma once

#include <map>
#include <string>

#include "metalattice/adam.hpp"
#include "metalattice/ops.hpp"
#include "metalattice/tape.hpp"

namespace metalattice::nn {

// Binds ParamSet entries to tape leaves for one forward/backward pass and
// collects the resulting gradients by name.
struct ParamBinder {
    Tape& tape;
    ParamSet& params;
    bool trainable = true;
    std::map<std::string, Var> bound;

    Var operator()(const std::string& name) {
        auto it = bound.find(name);
        if (it != bound.end()) return it->second;
        Var v = tape.leaf(params.at(name), trainable);
        bound.emplace(name, v);
        return v;
    }

    std::map<std::string, const Tensor*> grads() {
        std::map<std::string, const Tensor*> g;
        for (const auto& [name, v] : bound)
            if (tape.has_grad(v)) g.emplace(name, &tape.grad(v));
        return g;
    }
};

inline int norm_groups_for(int channels) {
    for (int g = std::min(8, channels); g >= 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

inline void init_conv(ParamSet& ps, const std::string& name, int co, int ci, int k, Rng& rng,
                      bool zero = false) {
    if (zero) {
        ps.add(name + ".w", Tensor({co, ci, k, k}));
    } else {
        ps.add(name + ".w", kaiming_uniform({co, ci, k, k}, static_cast<std::int64_t>(ci) * k * k, rng));
    }
    ps.add(name + ".b", Tensor({co}));
}

inline void init_tconv(ParamSet& ps, const std::string& name, int co, int ci, int kt, Rng& rng,
                       bool zero = false) {
    if (zero) {
        ps.add(name + ".w", Tensor({co, ci, kt}));
    } else {
        ps.add(name + ".w", kaiming_uniform({co, ci, kt}, static_cast<std::int64_t>(ci) * kt, rng));
    }
    ps.add(name + ".b", Tensor({co}));
}

inline void init_linear(ParamSet& ps, const std::string& name, int dout, int din, Rng& rng) {
    ps.add(name + ".w", kaiming_uniform({dout, din}, din, rng));
    ps.add(name + ".b", Tensor({dout}));
}

inline void init_norm(ParamSet& ps, const std::string& name, int channels) {
    ps.add(name + ".g", Tensor({channels}, 1.0f));
    ps.add(name + ".b", Tensor({channels}));
}

inline Var apply_conv(Tape& T, ParamBinder& P, const std::string& name, Var x, int stride = 1, int pad = 1) {
    return conv2d(T, x, P(name + ".w"), P(name + ".b"), stride, pad);
}

inline Var apply_tconv(Tape& T, ParamBinder& P, const std::string& name, Var x) {
    return conv1d_time(T, x, P(name + ".w"), P(name + ".b"));
}

inline Var apply_norm(Tape& T, ParamBinder& P, const std::string& name, Var x, int groups) {
    return group_norm(T, x, P(name + ".g"), P(name + ".b"), groups);
}

inline Var apply_linear(Tape& T, ParamBinder& P, const std::string& name, Var x) {
    return linear(T, x, P(name + ".w"), P(name + ".b"));
}

// Sinusoidal position embedding for the diffusion timestep.
inline Tensor sinusoidal_embedding(int t, int dim) {
    Tensor e({dim});
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / std::max(1, half - 1));
        e.v[static_cast<std::size_t>(i)] = static_cast<float>(std::sin(t * freq));
        e.v[static_cast<std::size_t>(half + i)] = static_cast<float>(std::cos(t * freq));
    }
    return e;
}

} // namespace metalattice::nn
