#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace xfake {

// Deterministic random stream. The distributions are implemented here rather
// than taken from <random> so that sampled sequences do not depend on the
// standard library build.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(split_mix(seed)) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform double in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) {
        // modulo bias is < 2^-40 for the n used here; acceptable
        return n ? engine_() % n : 0;
    }

    // Standard normal via Box-Muller; one value cached per pair.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Gamma(shape, scale=1), Marsaglia-Tsang; valid for shape >= 1.
    double gamma(double shape) {
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = normal();
            double v = 1.0 + c * x;
            if (v <= 0.0) continue;
            v = v * v * v;
            double u = uniform();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    // Multiplicative speckle draw: mean 1, variance 1/looks.
    double speckle(double looks) { return gamma(looks) / looks; }

    // Independent sub-stream seed: hash-combines a parent seed with a stream tag.
    static uint64_t derive(uint64_t seed, uint64_t stream) {
        uint64_t x = seed ^ (0x9e3779b97f4a7c15ULL + (stream << 1));
        return split_mix(x)();
    }

private:
    // SplitMix64 scrambles the raw seed so that nearby seeds give unrelated streams.
    static std::mt19937_64 split_mix(uint64_t seed) {
        uint64_t z = seed + 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        z = z ^ (z >> 31);
        return std::mt19937_64(z);
    }

    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace xfake
