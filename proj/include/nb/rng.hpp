#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace nb {

// Counter-based random stream: every draw is a pure function of
// (seed, counter), so replaying a stream never depends on evaluation
// order elsewhere. Child streams are derived by label and are
// independent of the parent's counter position.
class RngStream {
public:
    RngStream() : seed_(0), counter_(0) {}
    explicit RngStream(uint64_t seed, uint64_t counter = 0) : seed_(seed), counter_(counter) {}

    uint64_t seed() const { return seed_; }
    uint64_t counter() const { return counter_; }
    void set_counter(uint64_t c) { counter_ = c; }

    uint64_t next_u64() { return mix(seed_, counter_++); }

    // Uniform in [0, 1), 53-bit resolution.
    double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n), unbiased via rejection.
    uint64_t next_below(uint64_t n) {
        if (n <= 1) return 0;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    bool next_bernoulli(double p) { return next_uniform() < p; }

    // Standard normal, Marsaglia polar method.
    float next_normal() {
        for (;;) {
            double u = 2.0 * next_uniform() - 1.0;
            double v = 2.0 * next_uniform() - 1.0;
            double s = u * u + v * v;
            if (s > 0.0 && s < 1.0) {
                return static_cast<float>(u * std::sqrt(-2.0 * std::log(s) / s));
            }
        }
    }

    // Standard normal truncated to [-1, 1] by rejection.
    float next_trunc_normal() {
        for (;;) {
            float z = next_normal();
            if (z >= -1.0f && z <= 1.0f) return z;
        }
    }

    RngStream child(std::string_view label) const {
        uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
        for (char c : label) {
            h ^= static_cast<uint8_t>(c);
            h *= 0x100000001b3ULL;
        }
        return RngStream(mix(seed_, h));
    }

    RngStream child(uint64_t label) const { return RngStream(mix(seed_, mix(label, 0x9e3779b97f4a7c15ULL))); }

private:
    static uint64_t mix(uint64_t a, uint64_t b) {
        // splitmix64 finalizer over the combined words
        uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    uint64_t seed_;
    uint64_t counter_;
};

}  // namespace nb
