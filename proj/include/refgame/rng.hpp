#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace refgame {

// Deterministic random source. The engine is std::mt19937_64 but every
// distribution is derived here from raw 64-bit draws, so a given seed
// produces the same stream on any platform/standard library.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed), seed_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // uniform in [0, 1) with 53 bits of randomness
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n) by rejection (no modulo bias)
    uint64_t below(uint64_t n);

    int range_int(int lo, int hi_inclusive);  // uniform in [lo, hi]

    // standard normal via Box-Muller (no cached spare: keeps the stream simple)
    double normal();

    // Gumbel(0,1): -log(-log(U)) with U in (0,1)
    double gumbel();

    // index sampled proportionally to weights (weights need not normalize)
    size_t categorical(const std::vector<double>& weights);

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // independent child stream (per-game seeds, per-listener seeds, ...)
    Rng split(uint64_t key) const;

    uint64_t seed_used() const { return seed_; }

    std::string state_string() const;
    void restore_state(const std::string& s);

private:
    std::mt19937_64 engine_;
    uint64_t seed_ = 0;
};

// splitmix64 step; used to derive independent seeds from (seed, index)
uint64_t mix_seed(uint64_t seed, uint64_t key);

}  // namespace refgame
