#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>

#include "lmlab/util.hpp"

namespace lmlab {

// Deterministic RNG. Gaussian draws use an explicit Box-Muller transform
// instead of std::normal_distribution, whose output is implementation
// defined; checkpoints and training logs must be reproducible bit for bit
// from (seed, config, corpus) alone.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double radius = std::sqrt(-2.0 * std::log(u1));
        double angle = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // uniform integer in [0, n)
    std::uint64_t below(std::uint64_t n) {
        return n == 0 ? 0 : gen_() % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Derive an independent substream seed, e.g. mix(seed, "init.wte").
    static std::uint64_t mix(std::uint64_t seed, std::string_view label) {
        return util::fnv1a(label, seed ^ 0x9e3779b97f4a7c15ULL);
    }

  private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace lmlab
