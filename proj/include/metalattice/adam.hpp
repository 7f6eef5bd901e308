#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "metalattice/tensor.hpp"

namespace metalattice::nn {

// Named parameter tensors plus per-parameter Adam state. std::map keeps
// iteration order stable for deterministic updates and serialization.
struct ParamSet {
    struct Entry {
        Tensor value;
        Tensor m; // first moment
        Tensor v; // second moment
        std::int64_t step = 0;
    };

    std::map<std::string, Entry> entries;

    Tensor& add(const std::string& name, Tensor init) {
        auto [it, fresh] = entries.emplace(name, Entry{});
        if (!fresh) throw std::invalid_argument("ParamSet: duplicate parameter " + name);
        it->second.value = std::move(init);
        it->second.m = Tensor(it->second.value.dims);
        it->second.v = Tensor(it->second.value.dims);
        return it->second.value;
    }

    bool has(const std::string& name) const { return entries.count(name) != 0; }

    Tensor& at(const std::string& name) {
        auto it = entries.find(name);
        if (it == entries.end()) throw std::out_of_range("ParamSet: unknown parameter " + name);
        return it->second.value;
    }

    const Tensor& at(const std::string& name) const {
        auto it = entries.find(name);
        if (it == entries.end()) throw std::out_of_range("ParamSet: unknown parameter " + name);
        return it->second.value;
    }

    std::int64_t total_scalars() const {
        std::int64_t n = 0;
        for (const auto& [k, e] : entries) n += e.value.numel();
        return n;
    }
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Standard Adam with bias correction. Parameters without a gradient entry
// are untouched (their step counter does not advance either).
inline void adam_step(ParamSet& params, const std::map<std::string, const Tensor*>& grads,
                      const AdamConfig& cfg = {}) {
    if (!(cfg.lr > 0.0)) throw std::invalid_argument("adam_step: lr must be > 0");
    if (cfg.beta1 < 0.0 || cfg.beta1 >= 1.0 || cfg.beta2 < 0.0 || cfg.beta2 >= 1.0)
        throw std::invalid_argument("adam_step: betas must be in [0,1)");
    for (const auto& [name, gptr] : grads) {
        auto it = params.entries.find(name);
        if (it == params.entries.end()) throw std::out_of_range("adam_step: gradient for unknown parameter " + name);
        ParamSet::Entry& e = it->second;
        const Tensor& g = *gptr;
        if (!g.same_dims(e.value))
            throw std::invalid_argument("adam_step: gradient shape mismatch for " + name);
        e.step += 1;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(e.step));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(e.step));
        for (std::size_t i = 0; i < e.value.v.size(); ++i) {
            const double gi = g.v[i];
            const double m = cfg.beta1 * e.m.v[i] + (1.0 - cfg.beta1) * gi;
            const double v = cfg.beta2 * e.v.v[i] + (1.0 - cfg.beta2) * gi * gi;
            e.m.v[i] = static_cast<float>(m);
            e.v.v[i] = static_cast<float>(v);
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            e.value.v[i] = static_cast<float>(e.value.v[i] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    }
}

// Kaiming-uniform init for conv/linear weights: bound = sqrt(6 / fan_in).
inline Tensor kaiming_uniform(std::vector<int> dims, std::int64_t fan_in, Rng& rng) {
    Tensor t(std::move(dims));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in < 1 ? 1 : fan_in));
    t.fill_uniform(rng, static_cast<float>(-bound), static_cast<float>(bound));
    return t;
}

} // namespace metalattice::nn
