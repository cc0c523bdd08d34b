#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace qrc {

// Deterministic PRNG used everywhere in the project.
//
// Core generator: splitmix64 (Steele, Lea, Vigna). State is a single
// 64-bit counter advanced by the golden-ratio increment; each output is
// a finalized mix of the new state. Streams for distinct purposes are
// derived by hashing a purpose tag into the seed (FNV-1a), so the
// "init", "data" and "sampling" streams are independent by construction
// and reproducible from the single run seed.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

    // Independent stream for a named purpose. Same (seed, tag) -> same stream.
    Rng split(std::string_view tag) const {
        std::uint64_t h = 1469598103934665603ull; // FNV offset basis
        for (char c : tag) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        return Rng(mix(state_ ^ h));
    }

    // Numbered sub-stream, e.g. one per scene or per epoch.
    Rng split(std::uint64_t index) const {
        return Rng(mix(state_ ^ mix(index + 0x9e3779b97f4a7c15ull)));
    }

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        return finalize(state_);
    }

    // Uniform in [0, 1).
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Uniform integer in [0, n). n must be > 0.
    std::uint64_t uniform_int(std::uint64_t n) {
        // Rejection-free modulo is fine here: n is always tiny vs 2^64.
        return next_u64() % n;
    }

    // Standard normal via Box-Muller. One draw per call keeps the stream
    // layout independent of call parity.
    double normal() {
        double u1 = next_double();
        double u2 = next_double();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    std::uint64_t state() const { return state_; }

private:
    static std::uint64_t finalize(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }
    static std::uint64_t mix(std::uint64_t z) {
        return finalize(z + 0x9e3779b97f4a7c15ull);
    }

    std::uint64_t state_;
};

} // namespace qrc
