#pragma once

// Deterministic RNG helpers.  std::mt19937_64 has a fully specified output
// sequence; the distribution adapters here are hand-rolled because the
// standard library distributions are implementation-defined, which would
// break cross-platform replay of datasets and training runs.

#include <cmath>
#include <cstdint>
#include <random>

namespace stackformer {

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next() { return gen_(); }

    // uniform over {0, ..., n-1}
    std::uint64_t uniform_int(std::uint64_t n) { return gen_() % n; }

    // uniform over [lo, hi] inclusive
    std::int64_t uniform_range(std::int64_t lo, std::int64_t hi) {
        return lo + std::int64_t(uniform_int(std::uint64_t(hi - lo + 1)));
    }

    // uniform in [0, 1)
    double uniform() { return double(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller, one value per call (the pair's second half is cached)
    double gaussian() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    bool coin(double p) { return uniform() < p; }

  private:
    std::mt19937_64 gen_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace stackformer
