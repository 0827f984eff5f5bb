#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace qdf {

/// splitmix64 mixing step. Used both to expand seeds and to derive
/// sub-stream seeds; the constants are the reference ones.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

/// Deterministic 64-bit generator (xoshiro256**), self-contained so streams
/// are reproducible bit-for-bit independent of the standard library.
///
/// Sub-stream rule: substream(seed, index) mixes the index into the seed via
/// splitmix64, so per-sample / per-epoch streams can be drawn independently
/// and in parallel while staying deterministic.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& word : state_) {
            x = splitmix64(x);
            word = x;
        }
    }

    static Rng substream(std::uint64_t seed, std::uint64_t index) {
        return Rng(splitmix64(seed ^ (0x9e3779b97f4a7c15ull * (index + 1))));
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Standard normal via Box-Muller; the second deviate of each pair is
    /// cached so consecutive calls stay cheap and deterministic.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform(); // log(0) guard
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 6.283185307179586476925286766559 * u2;
        cached_ = radius * std::sin(angle);
        has_cached_ = true;
        return radius * std::cos(angle);
    }

    /// Uniform integer in [0, bound). Modulo bias is negligible for the
    /// desk-scale bounds used here (tens of positions).
    std::uint64_t below(std::uint64_t bound) { return next_u64() % bound; }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    std::array<std::uint64_t, 4> state_{};
    double cached_ = 0.0;
    bool has_cached_ = false;
};

} // namespace qdf
