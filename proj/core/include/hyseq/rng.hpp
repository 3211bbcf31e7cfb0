// Deterministic, checkpointable random streams (xoshiro256++).
// All randomness in training, sampling and data generation flows through
// this type so runs are reproducible and resumable bit-for-bit.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace hyseq {

class Rng {
  public:
    Rng() : Rng(0x9e3779b97f4a7c15ull) {}

    explicit Rng(uint64_t seed) {
        // splitmix64 expansion of the seed into the xoshiro state
        uint64_t z = seed;
        for (auto& w : s_) {
            z += 0x9e3779b97f4a7c15ull;
            uint64_t x = z;
            x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
            x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
            w = x ^ (x >> 31);
        }
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n); n >= 1
    int64_t uniform_int(int64_t n) {
        return static_cast<int64_t>(uniform() * static_cast<double>(n)) % n;
    }

    // standard normal via Box-Muller; no cached spare so the state is
    // exactly the four words below
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    std::array<uint64_t, 4> state() const { return s_; }
    void set_state(const std::array<uint64_t, 4>& s) { s_ = s; }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::array<uint64_t, 4> s_{};
};

}  // namespace hyseq
