#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tsexplain/common.hpp"

namespace tsexplain {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Deterministic RNG used for every random draw in the project. Streams are
// derived from a master seed with splitmix64 so that per-seed / per-purpose
// streams are independent without touching OS entropy. xoshiro256++ core,
// 53-bit uniforms, Box-Muller gaussians with a cached spare.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
    }

    // Derived stream for a named purpose ("datagen", "noise", ...), optionally
    // indexed (epoch number, seed number). Documented derivation:
    //   child_seed = splitmix64(parent_seed ^ fnv1a64(tag) ^ (index+1)*golden)
    static Rng derive(std::uint64_t parent_seed, const std::string& tag, std::uint64_t index = 0) {
        std::uint64_t st = parent_seed ^ fnv1a64(tag) ^ ((index + 1) * 0x9e3779b97f4a7c15ULL);
        return Rng(splitmix64(st));
    }

    std::uint64_t u64() {
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

    // Uniform in [0,1) with 53 random bits.
    double u01() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

    // Uniform integer in [0, n).
    std::size_t index(std::size_t n) {
        // rejection sampling to avoid modulo bias
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = u64();
        while (v >= limit) v = u64();
        return static_cast<std::size_t>(v % n);
    }

    double gauss(double mean = 0.0, double std = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + std * spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * u01() - 1.0;
            v = 2.0 * u01() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        has_spare_ = true;
        return mean + std * u * f;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // k distinct indices from [0, n), order of selection preserved.
    std::vector<std::size_t> choose(std::size_t n, std::size_t k) {
        if (k > n) k = n;
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) pool[i] = i;
        std::vector<std::size_t> out;
        out.reserve(k);
        for (std::size_t taken = 0; taken < k; ++taken) {
            std::size_t j = index(pool.size());
            out.push_back(pool[j]);
            pool[j] = pool.back();
            pool.pop_back();
        }
        return out;
    }

  private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::uint64_t s_[4];
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace tsexplain
