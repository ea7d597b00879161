#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace voxrnn {

/// SplitMix64 stream. The whole generator state is one 64-bit word, so it
/// can be checkpointed and split without platform-dependent behaviour.
/// Distribution helpers are implemented here rather than via <random>
/// distributions, whose output differs between standard libraries.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed = 0) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // [0, 1) with 53 random bits
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // unbiased integer in [0, n)
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    double normal() {
        // Box-Muller; the second variate is discarded to keep the state a single word.
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Independent child stream; advances this stream by one draw.
    SeededRng split() { return SeededRng(next_u64() ^ 0x6A09E667F3BCC909ull); }

    std::uint64_t state() const { return state_; }
    void set_state(std::uint64_t s) { state_ = s; }

    friend bool operator==(const SeededRng&, const SeededRng&) = default;

private:
    std::uint64_t state_;
};

/// Stateless mix of a seed with a stream index.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
    SeededRng r(seed ^ (index * 0xD1B54A32D192ED03ull));
    return r.next_u64();
}

} // namespace voxrnn
