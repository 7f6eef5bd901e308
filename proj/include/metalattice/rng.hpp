#pragma once

// Deterministic PRNG used everywhere in the toolkit: SplitMix64 expands a
// seed into the xoshiro256++ state, so streams are reproducible across
// platforms independent of the standard library's engines.

#include <cstdint>
#include <cmath>
#include <string_view>

namespace metalattice {

inline std::uint64_t splitmix64_next(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

    void reseed(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64_next(sm);
        cached_valid_ = false;
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0,1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

    int range_int(int lo, int hi_inclusive) {
        return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
    }

    // standard normal via Box-Muller; pairs cached for determinism
    double normal() {
        if (cached_valid_) {
            cached_valid_ = false;
            return cached_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        cached_valid_ = true;
        return r * std::cos(a);
    }

    float normal_f() { return static_cast<float>(normal()); }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t s_[4] = {};
    double cached_ = 0.0;
    bool cached_valid_ = false;
};

// Named child stream derivation: hash the label (FNV-1a) into the parent
// seed through SplitMix64. All pipeline randomness flows from one root seed
// through these names.
inline std::uint64_t child_seed(std::uint64_t parent, std::string_view name) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : name) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    std::uint64_t sm = parent ^ h;
    std::uint64_t a = splitmix64_next(sm);
    return splitmix64_next(sm) ^ a;
}

inline std::uint64_t child_seed(std::uint64_t parent, std::string_view name, std::uint64_t index) {
    std::uint64_t sm = child_seed(parent, name) ^ (0x9e3779b97f4a7c15ull * (index + 1));
    return splitmix64_next(sm);
}

} // namespace metalattice
