#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace hotm {

// Deterministic random source. All draws are derived from raw mt19937_64
// output with fixed bit arithmetic, never from std distributions, so the
// same seed produces the same stream on every platform and compiler.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller with a cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double two_pi = 6.283185307179586476925286766559;
        double angle = uniform() * two_pi;
        double radius = std::sqrt(-2.0 * std::log(1.0 - uniform()));
        spare_ = std::sin(angle) * radius;
        has_spare_ = true;
        return std::cos(angle) * radius;
    }

    // Uniform integer in [0, n), rejection sampled to avoid modulo bias.
    int64_t uniform_int(int64_t n) {
        uint64_t un = static_cast<uint64_t>(n);
        uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t r;
        do {
            r = next_u64();
        } while (r >= limit);
        return static_cast<int64_t>(r % un);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(static_cast<int64_t>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Derives an independent stream from a base seed and a small stream tag.
inline uint64_t substream(uint64_t seed, uint64_t tag) {
    uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

}  // namespace hotm
