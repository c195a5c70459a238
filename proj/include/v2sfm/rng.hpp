#pragma once

// Deterministic random number generation. All stochastic behavior in the
// library flows through Rng so that a (seed, stream) pair fully determines
// every output on every platform; std:: distributions are avoided because
// their algorithms are implementation-defined.

#include <cmath>
#include <cstdint>
#include <limits>

namespace v2sfm {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0x853c49e6748fea9bull) {
        // Two rounds of splitmix to decorrelate small consecutive seeds.
        std::uint64_t s = seed;
        state_[0] = splitmix64(s);
        state_[1] = splitmix64(s);
        state_[2] = splitmix64(s);
        state_[3] = splitmix64(s);
    }

    // Derive an independent child generator, e.g. one per sequence or frame.
    Rng child(std::uint64_t stream) const {
        std::uint64_t s = state_[0] ^ (0x9e3779b97f4a7c15ull * (stream + 1));
        s ^= state_[2] + 0xda942042e4dd58b5ull * (stream + 0x632be59bd9b4e019ull);
        return Rng(s);
    }

    // xoshiro256**
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

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n) {
        // Rejection-free Lemire reduction would bias ~2^-64; fine for data gen,
        // but keep the cheap rejection loop so shuffles are exactly uniform.
        const std::uint64_t threshold = -n % n;
        for (;;) {
            std::uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    int uniform_int(int lo, int hi_inclusive) {
        return lo + static_cast<int>(uniform_index(
                        static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
    }

    // Standard normal via Box-Muller; both values are consumed in order so the
    // stream stays reproducible.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Poisson sample; inversion for small lambda, clamped normal approximation
    // for large lambda (used only for shot-noise corruption).
    std::uint64_t poisson(double lambda) {
        if (lambda <= 0.0) return 0;
        if (lambda < 30.0) {
            const double l = std::exp(-lambda);
            double p = 1.0;
            std::uint64_t k = 0;
            do {
                ++k;
                p *= uniform();
            } while (p > l);
            return k - 1;
        }
        const double x = normal(lambda, std::sqrt(lambda));
        if (x < 0.0) return 0;
        return static_cast<std::uint64_t>(x + 0.5);
    }

    template <typename T>
    void shuffle(T* data, std::size_t n) {
        if (n < 2) return;
        for (std::size_t i = n - 1; i > 0; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_index(i + 1));
            T tmp = data[i];
            data[i] = data[j];
            data[j] = tmp;
        }
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    std::uint64_t state_[4];
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace v2sfm
