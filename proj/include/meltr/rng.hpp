#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace meltr {

// splitmix64; used to derive independent stream seeds from a base seed.
inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Deterministic RNG wrapper. All randomness in the library flows through
// this class so runs are reproducible per seed within one build.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    double uniform(double lo = 0.0, double hi = 1.0) {
        return std::uniform_real_distribution<double>(lo, hi)(gen_);
    }

    double normal(double mean = 0.0, double std = 1.0) {
        return std::normal_distribution<double>(mean, std)(gen_);
    }

    // Normal(0, std) resampled until within 2 standard deviations.
    double truncated_normal(double std) {
        for (;;) {
            double x = normal(0.0, std);
            if (x >= -2.0 * std && x <= 2.0 * std) return x;
        }
    }

    int64_t index(int64_t n) {
        return std::uniform_int_distribution<int64_t>(0, n - 1)(gen_);
    }

    std::vector<double> normal_vec(int64_t n, double std) {
        std::vector<double> v(static_cast<size_t>(n));
        for (auto& x : v) x = normal(0.0, std);
        return v;
    }

    std::vector<double> uniform_vec(int64_t n, double lo, double hi) {
        std::vector<double> v(static_cast<size_t>(n));
        for (auto& x : v) x = uniform(lo, hi);
        return v;
    }

    std::vector<int64_t> permutation(int64_t n) {
        std::vector<int64_t> p(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
        for (int64_t i = n - 1; i > 0; --i) {
            int64_t j = std::uniform_int_distribution<int64_t>(0, i)(gen_);
            std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(j)]);
        }
        return p;
    }

private:
    std::mt19937_64 gen_;
};

}  // namespace meltr
