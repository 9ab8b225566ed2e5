#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace gfnem {

// Deterministic PRNG handle. All randomness in the library flows through an
// explicit Rng passed by the caller; there is no global generator. Streams
// for batched work are derived with fork() so results do not depend on
// thread count or iteration order.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(splitmix(seed ^ 0x9e3779b97f4a7c15ull)) {
        // warm up so that small seeds diverge quickly
        for (int i = 0; i < 4; ++i) next_u64();
    }

    uint64_t next_u64() {
        // xorshift64* on a splitmix-initialized state
        uint64_t x = state_;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state_ = x;
        return x * 0x2545f4914f6cdd1dull;
    }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // uniform integer in [0, n)
    int uniform_int(int n) {
        return static_cast<int>(static_cast<uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * static_cast<uint64_t>(n)) >> 64));
    }

    // standard normal, Box-Muller (deterministic across platforms)
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // sample an index from unnormalized positive weights
    int categorical(const std::vector<double>& weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        double u = uniform() * total;
        double acc = 0.0;
        for (size_t k = 0; k < weights.size(); ++k) {
            acc += weights[k];
            if (u < acc) return static_cast<int>(k);
        }
        return static_cast<int>(weights.size()) - 1;
    }

    // independent stream derived from this generator's seed and a salt;
    // forking does not advance this generator
    Rng fork(uint64_t salt) const {
        Rng r(0);
        r.state_ = splitmix(state_ ^ splitmix(salt + 0x632be59bd9b4e019ull));
        r.have_spare_ = false;
        return r;
    }

private:
    static uint64_t splitmix(uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace gfnem
