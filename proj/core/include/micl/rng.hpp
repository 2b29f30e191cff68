#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

namespace micl {

// Deterministic pseudo-random generator: xoshiro256++ seeded through splitmix64.
//
// The algorithm is fixed so that a given seed produces the same stream on every
// platform; nothing here depends on libstdc++ distribution internals.  All
// dataset generation draws integers or uniform doubles only, which are exact
// IEEE-754 operations, so generated artifacts are byte-stable everywhere.
class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

    void reseed(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& s : state_) s = splitmix64(sm);
        gauss_cached_ = false;
    }

    // Derive an independent stream from this seed and a stream id. Used to give
    // every sample/episode its own generator regardless of evaluation order.
    static Rng stream(std::uint64_t seed, std::uint64_t stream_id) {
        std::uint64_t sm = seed;
        const std::uint64_t a = splitmix64(sm);
        sm = stream_id ^ 0x9e3779b97f4a7c15ull;
        const std::uint64_t b = splitmix64(sm);
        return Rng(a ^ (b + 0x632be59bd9b4e019ull));
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1): 53 mantissa bits of one draw.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n) by rejection; n must be positive.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t bound = n * (UINT64_MAX / n);
        std::uint64_t v = next_u64();
        while (v >= bound) v = next_u64();
        return v % n;
    }

    std::int64_t range(std::int64_t lo, std::int64_t hi_inclusive) {
        return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
    }

    // Standard normal via Box-Muller on the uniform stream (pair cached).
    double normal() {
        if (gauss_cached_) {
            gauss_cached_ = false;
            return gauss_next_;
        }
        double u1 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        gauss_next_ = r * std::sin(theta);
        gauss_cached_ = true;
        return r * std::cos(theta);
    }

    // Fisher-Yates shuffle of indices 0..n-1.
    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> p(n);
        for (std::size_t i = 0; i < n; ++i) p[i] = i;
        for (std::size_t i = n; i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(p[i - 1], p[j]);
        }
        return p;
    }

    static std::uint64_t splitmix64(std::uint64_t& state) {
        std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // One-shot hash of a 64-bit value (splitmix64 with throwaway state).
    static std::uint64_t hash64(std::uint64_t v) {
        std::uint64_t s = v;
        return splitmix64(s);
    }

  private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t state_[4] = {};
    double gauss_next_ = 0.0;
    bool gauss_cached_ = false;
};

}  // namespace micl
