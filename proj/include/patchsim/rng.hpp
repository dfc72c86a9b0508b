#pragma once

#include <cstdint>

namespace patchsim {

// splitmix64: tiny, portable, fully specified in a paragraph. Used for every
// random draw in the project (weights, initial noise, condition vectors).
struct SplitMix64 {
    uint64_t state = 0;

    explicit SplitMix64(uint64_t seed = 0) : state(seed) {}

    uint64_t next() {
        state += 0x9E3779B97F4A7C15ULL;
        uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double next_unit() { return double(next() >> 11) * 0x1.0p-53; }

    // uniform in [lo, hi)
    double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }
};

// Derive an independent stream from a base seed and up to two stream ids
// (layer id, weight slot, ...). One mixing round per component.
inline uint64_t substream_seed(uint64_t seed, uint64_t a, uint64_t b = 0) {
    SplitMix64 m(seed);
    uint64_t s = m.next();
    m.state = s ^ (a * 0x9E3779B97F4A7C15ULL);
    s = m.next();
    m.state = s ^ (b * 0xD1B54A32D192ED03ULL);
    return m.next();
}

// Standard-normal generator: Box-Muller over splitmix64. Draws pairs; callers
// that need an odd count discard the last half-pair deterministically.
struct GaussianRng {
    SplitMix64 rng;
    bool have_spare = false;
    double spare = 0.0;

    explicit GaussianRng(uint64_t seed) : rng(seed) {}

    double next();
};

}  // namespace patchsim
