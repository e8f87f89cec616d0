#pragma once

#include <cstdint>
#include <random>

namespace fsa {

// mt19937 plus distribution-free helpers, so every stream is bit-identical
// across standard library implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(static_cast<uint32_t>(seed ^ (seed >> 32))) {}

    uint32_t next_u32() { return gen_(); }

    // uniform in [0,1)
    float uniform() { return static_cast<float>(next_u32() >> 8) * (1.0f / 16777216.0f); }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0,n)
    uint32_t below(uint32_t n) { return n == 0 ? 0 : next_u32() % n; }

    // uniform integer in [lo,hi] inclusive
    int range(int lo, int hi) { return lo + static_cast<int>(below(static_cast<uint32_t>(hi - lo + 1))); }

    bool chance(float p) { return uniform() < p; }

private:
    std::mt19937 gen_;
};

// Independent per-item stream (image index, epoch index, ...) derived from a
// run seed. splitmix64 finalizer.
inline uint64_t mix_seed(uint64_t seed, uint64_t index) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

} // namespace fsa
