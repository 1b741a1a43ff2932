// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace msd {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; used to derive independent substream seeds.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept
{
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Seed for substream (stream, counter) of a run seeded with `base`.
/// Results depend only on the triple, never on scheduling order.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t counter = 0) noexcept
{
    return mix64(mix64(mix64(base) ^ stream) ^ counter);
}

inline Rng make_rng(std::uint64_t base, std::uint64_t stream, std::uint64_t counter = 0)
{
    return Rng(derive_seed(base, stream, counter));
}

/// Unbiased integer in [0, n) by rejection; n > 0. Unlike
/// std::uniform_int_distribution the draw sequence is library independent.
inline std::uint64_t uniform_below(Rng& rng, std::uint64_t n)
{
    // 2^64 mod n; draws below it would bias the low residues.
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
        const std::uint64_t r = rng();
        if (r >= threshold) {
            return r % n;
        }
    }
}

std::string serialize_rng(const Rng& rng);
Rng deserialize_rng(const std::string& text);

} // namespace msd
