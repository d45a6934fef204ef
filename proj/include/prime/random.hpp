#pragma once

#include <cstdint>
#include <random>

namespace prime {

/// All stochastic operations take an explicit generator so that runs are
/// reproducible from a seed.
using Rng = std::mt19937_64;

/// Uniform double in [0, 1) built from the top 53 bits of one draw. Unlike
/// std::uniform_real_distribution this is identical across standard libraries.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Independent stream for sub-run `index` of a seeded job.
inline Rng make_stream(std::uint64_t seed, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                      0x9e3779b9u};
    return Rng(seq);
}

}  // namespace prime
