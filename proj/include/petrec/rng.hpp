#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "petrec/core.hpp"

namespace petrec {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

/// Derives an independent seed for a named substream. Used so that every
/// random draw site (phantom i, scan i, epoch e, ...) has its own stream and
/// runs are reproducible regardless of evaluation order or resume point.
inline std::uint64_t substream(std::uint64_t base, std::uint64_t tag, std::uint64_t a = 0,
                               std::uint64_t b = 0, std::uint64_t c = 0) {
    std::uint64_t s = splitmix64(base ^ tag);
    s = splitmix64(s ^ (a + 0x9e3779b97f4a7c15ull));
    s = splitmix64(s ^ (b + 0x7f4a7c159e3779b9ull));
    s = splitmix64(s ^ (c + 0x85ebca6b2b2ae35ull));
    return s;
}

inline std::uint64_t substream(std::uint64_t base, const char* tag, std::uint64_t a = 0,
                               std::uint64_t b = 0, std::uint64_t c = 0) {
    return substream(base, fnv1a64_str(tag), a, b, c);
}

/// Deterministic generator. mt19937_64's output sequence is fixed by the
/// standard and all distribution transforms below are hand-rolled, so the
/// same seed gives the same draws on every platform.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive bounds
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(gen_() % static_cast<std::uint64_t>(hi - lo + 1));
    }

    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    /// Poisson sample: cumulative inversion below kInversionCutoff, Hormann's
    /// PTRS transformed rejection above it.
    long poisson(double mean) {
        check(mean >= 0.0 && std::isfinite(mean), "poisson: mean must be finite and >= 0");
        if (mean == 0.0) return 0;
        if (mean < kInversionCutoff) return poisson_inversion(mean);
        return poisson_ptrs(mean);
    }

    static constexpr double kInversionCutoff = 30.0;

  private:
    long poisson_inversion(double mean) {
        const double p0 = std::exp(-mean);
        double p = p0, cum = p0;
        const double u = uniform();
        long k = 0;
        while (u > cum) {
            ++k;
            p *= mean / static_cast<double>(k);
            cum += p;
            if (k > 2000) break;  // u in the far tail beyond f64 resolution
        }
        return k;
    }

    long poisson_ptrs(double mean) {
        const double slam = std::sqrt(mean);
        const double loglam = std::log(mean);
        const double b = 0.931 + 2.53 * slam;
        const double a = -0.059 + 0.02483 * b;
        const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
        const double v_r = 0.9277 - 3.6224 / (b - 2.0);
        for (;;) {
            const double u = uniform() - 0.5;
            const double v = uniform();
            const double us = 0.5 - std::fabs(u);
            const long k = static_cast<long>(std::floor((2.0 * a / us + b) * u + mean + 0.43));
            if (us >= 0.07 && v <= v_r) return k;
            if (k < 0 || (us < 0.013 && v > us)) continue;
            if (std::log(v * inv_alpha / (a / (us * us) + b)) <=
                k * loglam - mean - std::lgamma(static_cast<double>(k) + 1.0))
                return k;
        }
    }

    std::mt19937_64 gen_;
};

}  // namespace petrec
