#pragma once
#include <cstdint>
#include <random>

namespace cprf {

using Rng = std::mt19937_64;

/// Tags for independent random streams derived from one master seed.
enum class Stream : std::uint64_t {
    Data = 0x64617461,
    Subsample = 0x73756273,
    Tree = 0x74726565,
    TreeCount = 0x636f756e,
    Covariance = 0x636f7661,
    Supremum = 0x73757072,
    Psi = 0x70736921,
};

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t master, Stream stream,
                                    std::uint64_t index = 0) noexcept {
    return mix64(mix64(mix64(master) ^ static_cast<std::uint64_t>(stream)) + index);
}

/// Engine for stream (master, stream, index). Streams are a pure function of
/// their coordinates, so work split across threads stays reproducible.
inline Rng make_rng(std::uint64_t master, Stream stream, std::uint64_t index = 0) {
    return Rng(derive_seed(master, stream, index));
}

inline double uniform01(Rng& rng) {
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

} // namespace cprf
