#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace deltascope {

/// 64-bit FNV-1a over raw bytes. Stable across platforms; used for stream keys
/// and content hashes in run manifests.
constexpr std::uint64_t fnv1a64(std::string_view bytes,
                                std::uint64_t hash = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        hash ^= c;
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

/// SplitMix64 finalizer; decorrelates nearby seeds before they reach the engine.
constexpr std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Seeded generator with portable draws.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the
/// standard. The standard distributions are not, so conversion to doubles and
/// bounded integers is done here to keep results identical across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(mix64(seed)) {}

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Rejection sampling, so no modulo bias.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n <= 1) {
            return 0;
        }
        const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % n);
        std::uint64_t draw = engine_();
        while (draw >= limit) {
            draw = engine_();
        }
        return draw % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Independent substream keyed by `key`; the parent stream is not advanced.
    Rng split(std::uint64_t key) const { return Rng(mix64(seed_ ^ mix64(key))); }

    Rng split(std::string_view key) const { return split(fnv1a64(key)); }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

}  // namespace deltascope
