#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace ldp {

// Deterministic random source. All distribution math is done here on top of
// the mt19937_64 bit stream so that results are bit-identical across
// platforms and standard libraries (std::normal_distribution and std::shuffle
// leave their algorithms implementation-defined).
class Rng {
  public:
    explicit Rng(uint64_t seed) : eng_(seed), seed_value_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // Uniform in [0,1) with 53 random bits.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller without caching the second value; consumes two uniforms.
    double gaussian() {
        double u1 = 1.0 - uniform();  // (0,1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

    // Unbiased integer in [0,n) via rejection sampling.
    uint64_t below(uint64_t n);

    // Fisher-Yates with the portable integer draw above.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derive an independent stream for a sub-task: splitmix64 over
    // (base_seed, stream id), so forks never replay the parent stream.
    Rng fork(uint64_t stream) const { return Rng(mix(seed_value_, stream)); }

    uint64_t seed() const { return seed_value_; }

    static uint64_t mix(uint64_t a, uint64_t b);

  private:
    std::mt19937_64 eng_;
    uint64_t seed_value_ = 0;
};

}  // namespace ldp
