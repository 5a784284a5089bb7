#pragma once

#include <cstdint>
#include <random>

namespace cemu {

using Rng = std::mt19937_64;

/// Counter-based seed derivation: the seed for task `index` depends only on
/// (master, index), so the order in which tasks run cannot change results.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) noexcept {
    // splitmix64 finaliser applied to a Weyl step.
    std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Two-level derivation, e.g. (study seed, replication) -> (dataset, uniforms, ...).
constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index, std::uint64_t stream) noexcept {
    return derive_seed(derive_seed(master, index), stream);
}

}  // namespace cemu
