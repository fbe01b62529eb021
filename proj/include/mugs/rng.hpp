#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <vector>

namespace mugs {

// splitmix64, used for seeding and for deriving independent stream seeds.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Derives a stream seed from a master seed and a list of context words
// (epoch, sample index, role tag, ...). Stateless: the same words always
// give the same seed, so data-loading order never affects per-sample
// randomness and checkpoint resume only needs the master seed.
inline uint64_t derive_seed(uint64_t master, std::initializer_list<uint64_t> words) {
    uint64_t s = master;
    for (uint64_t w : words) {
        s ^= splitmix64(s) + w;
        splitmix64(s);
    }
    return splitmix64(s);
}

// xoshiro256** engine. Fixed algorithm, identical output on every platform.
class Rng {
public:
    Rng() : Rng(0x853c49e6748fea9bull) {}

    explicit Rng(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0, 1)
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    float uniform(float lo, float hi) {
        return lo + static_cast<float>(next_double()) * (hi - lo);
    }

    // unbiased integer in [0, n)
    uint64_t next_below(uint64_t n) {
        if (n == 0) return 0;
        const uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    bool bernoulli(double p) { return next_double() < p; }

    // Box-Muller; draws two uniforms per sample, keeps one value.
    float normal(float mean, float stddev) {
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 1e-300) u1 = next_double();
        double r = std::sqrt(-2.0 * std::log(u1));
        double z = r * std::cos(2.0 * 3.14159265358979323846 * u2);
        return mean + stddev * static_cast<float>(z);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // engine state, exposed for checkpointing
    std::array<uint64_t, 4> state() const { return {s_[0], s_[1], s_[2], s_[3]}; }
    void set_state(const std::array<uint64_t, 4>& s) {
        for (int i = 0; i < 4; ++i) s_[i] = s[static_cast<size_t>(i)];
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t s_[4];
};

}  // namespace mugs
