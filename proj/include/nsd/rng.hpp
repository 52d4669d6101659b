#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

#include "nsd/common.hpp"

namespace nsd {

// Counter-style splitmix64 generator. Streams are derived, never shared:
// each worker/job/step gets its own child via derive(), so results do not
// depend on scheduling order.
class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0) : state_(mix(seed ^ 0x9e3779b97f4a7c15ull)) {}

    Rng derive(std::uint64_t salt) const {
        Rng child;
        child.state_ = mix(state_ ^ mix(salt + 0x632be59bd9b4e019ull));
        return child;
    }

    Rng derive(std::string_view label) const {
        return derive(fnv1a64(label.data(), label.size()));
    }

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        return mix(state_);
    }

    // Uniform in [0,1), 53-bit resolution.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; no state cached so draws stay a pure function of the counter.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    std::size_t index(std::size_t n) { return std::size_t(next_u64() % n); }

    bool bernoulli(double p) { return uniform() < p; }

    void fill_uniform(std::vector<double>& v, double lo, double hi) {
        for (auto& x : v) x = uniform(lo, hi);
    }

    void fill_normal(std::vector<double>& v, double mean = 0.0, double stddev = 1.0) {
        for (auto& x : v) x = mean + stddev * normal();
    }

    std::uint64_t state() const { return state_; }

  private:
    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    std::uint64_t state_;
};

}  // namespace nsd
