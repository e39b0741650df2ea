#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "cosmos/error.hpp"

namespace cosmos {

// splitmix64 finalizer. Used to derive well-separated sub-stream seeds from
// (seed, id, tag) triples so augmentation streams are independent per sample
// and per modality.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
    return splitmix64(splitmix64(splitmix64(a) ^ b) ^ c);
}

// FNV-1a, for hashing string sample ids into stream seeds.
inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Deterministic random stream. All distributions are implemented by hand on
// top of the raw mt19937_64 output; std::normal_distribution and friends are
// implementation-defined and would break bitwise reproducibility across
// standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n) by rejection.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) throw ContractError("uniform_int: n must be positive");
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t v = gen_();
        while (v >= limit) v = gen_();
        return v % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller. No caching of the second value, so the
    // stream position is a simple function of the call count.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // Normal(0, sigma) restricted to [-bound*sigma, bound*sigma] by rejection.
    double trunc_normal(double sigma, double bound = 2.0) {
        for (;;) {
            const double z = normal();
            if (std::abs(z) <= bound) return z * sigma;
        }
    }

    // log-uniform in [lo, hi], lo > 0.
    double log_uniform(double lo, double hi) {
        if (lo <= 0.0 || hi < lo) throw ContractError("log_uniform: need 0 < lo <= hi");
        return std::exp(uniform(std::log(lo), std::log(hi)));
    }

    // Fisher-Yates shuffle, deterministic for a given stream state.
    template <typename V>
    void shuffle(V& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
};

}  // namespace cosmos
