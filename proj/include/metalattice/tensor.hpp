#pragma once

#include <cassert>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "metalattice/rng.hpp"

namespace metalattice {

// Dense row-major float32 tensor. The last dim varies fastest.
struct Tensor {
    std::vector<int> dims;
    std::vector<float> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> d, float fill = 0.0f) : dims(std::move(d)) {
        v.assign(static_cast<std::size_t>(numel_of(dims)), fill);
    }

    static std::int64_t numel_of(const std::vector<int>& d) {
        std::int64_t n = 1;
        for (int e : d) {
            if (e < 1) throw std::invalid_argument("tensor extent must be >= 1");
            n *= e;
        }
        return n;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }
    int ndim() const { return static_cast<int>(dims.size()); }
    int dim(int i) const { return dims[static_cast<std::size_t>(i)]; }

    float* data() { return v.data(); }
    const float* data() const { return v.data(); }

    float& at(std::initializer_list<int> idx) { return v[flat(idx)]; }
    float at(std::initializer_list<int> idx) const { return v[flat(idx)]; }

    std::size_t flat(std::initializer_list<int> idx) const {
        assert(static_cast<int>(idx.size()) == ndim());
        std::size_t f = 0;
        int k = 0;
        for (int i : idx) {
            assert(i >= 0 && i < dims[static_cast<std::size_t>(k)]);
            f = f * static_cast<std::size_t>(dims[static_cast<std::size_t>(k)]) + static_cast<std::size_t>(i);
            ++k;
        }
        return f;
    }

    bool same_dims(const Tensor& o) const { return dims == o.dims; }

    void fill(float x) { std::fill(v.begin(), v.end(), x); }

    void fill_normal(Rng& rng, float stddev = 1.0f, float mean = 0.0f) {
        for (auto& x : v) x = mean + stddev * rng.normal_f();
    }

    void fill_uniform(Rng& rng, float lo, float hi) {
        for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
    }

    // 64-bit accumulation for reductions
    double sum() const {
        double s = 0.0;
        for (float x : v) s += x;
        return s;
    }

    double mean() const { return v.empty() ? 0.0 : sum() / static_cast<double>(v.size()); }

    float min() const {
        float m = v.empty() ? 0.0f : v[0];
        for (float x : v) m = x < m ? x : m;
        return m;
    }

    float max() const {
        float m = v.empty() ? 0.0f : v[0];
        for (float x : v) m = x > m ? x : m;
        return m;
    }

    bool all_finite() const {
        for (float x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < dims.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(dims[i]);
        }
        return s + "]";
    }
};

inline void check_same_dims(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_dims(b))
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

} // namespace metalattice
