#pragma once

#include <cmath>
#include <cstdint>
#include <span>

namespace latentkit {

// Counter-style splitmix64 generator. The u64/uniform stream depends only on
// the seed (integer arithmetic), which is the cross-platform reproducibility
// contract; normal() is derived from that stream via libm. fork() derives an
// independent child stream, used to give parallel tasks disjoint streams.
class Rng {
  public:
    explicit Rng(uint64_t seed) : seed_(seed), state_(mix64(seed ^ kGamma)) {}

    uint64_t seed() const { return seed_; }

    uint64_t next_u64() {
        state_ += kGamma;
        return mix64(state_);
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller, two uniforms per sample, no cached spare.
    double normal() {
        double u1 = 1.0 - uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // [0, n)
    int64_t uniform_int(int64_t n) {
        return static_cast<int64_t>((static_cast<__uint128_t>(next_u64()) *
                                     static_cast<__uint128_t>(n)) >> 64);
    }

    // Inverse-CDF draw over unnormalized nonnegative weights, left-to-right cumsum.
    int64_t categorical(std::span<const double> w) {
        double total = 0.0;
        for (double v : w) total += v;
        double u = uniform() * total;
        double acc = 0.0;
        for (size_t i = 0; i < w.size(); ++i) {
            acc += w[i];
            if (u < acc) return static_cast<int64_t>(i);
        }
        return static_cast<int64_t>(w.size()) - 1;
    }

    Rng fork(uint64_t stream) const { return Rng(mix64(seed_ + kGamma * (stream + 1))); }

    static uint64_t mix64(uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

  private:
    static constexpr uint64_t kGamma = 0x9E3779B97F4A7C15ULL;
    uint64_t seed_;
    uint64_t state_;
};

} // namespace latentkit
