// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

#include <bit>
#include <cmath>
#include <cstring>

#include "msd/tensor_store.hpp"

namespace msd {

static_assert(std::endian::native == std::endian::little, "container payloads are read in place as little-endian");

std::string_view dtype_name(DType d)
{
    switch (d) {
    case DType::kF32:
        return "F32";
    case DType::kF16:
        return "F16";
    case DType::kBF16:
        return "BF16";
    }
    return "?";
}

std::optional<DType> parse_dtype(std::string_view name)
{
    if (name == "F32") {
        return DType::kF32;
    }
    if (name == "F16") {
        return DType::kF16;
    }
    if (name == "BF16") {
        return DType::kBF16;
    }
    return std::nullopt;
}

std::size_t dtype_size(DType d)
{
    return d == DType::kF32 ? 4 : 2;
}

float half_to_float(std::uint16_t h)
{
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1fu;
    const std::uint32_t mant = h & 0x3ffu;
    if (exp == 0) {
        const float mag = std::ldexp(static_cast<float>(mant), -24);
        return sign ? -mag : mag;
    }
    std::uint32_t bits;
    if (exp == 31) {
        bits = sign | 0x7f800000u | (mant << 13);
    } else {
        bits = sign | ((exp + 112) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

std::uint16_t float_to_half(float f)
{
    const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    const auto sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
    std::uint32_t mag = x & 0x7fffffffu;
    if (mag >= 0x7f800000u) {
        // inf stays inf; NaN keeps its top payload bits and is forced quiet
        const std::uint16_t payload = mag > 0x7f800000u ? static_cast<std::uint16_t>(0x200u | ((mag >> 13) & 0x3ffu)) : 0;
        return static_cast<std::uint16_t>(sign | 0x7c00u | payload);
    }
    if (mag >= 0x477ff000u) {
        return static_cast<std::uint16_t>(sign | 0x7c00u);
    }
    if (mag < 0x38800000u) {
        // below the smallest normal half: scale to units of 2^-24, round to even
        const float scaled = std::bit_cast<float>(mag) * 16777216.0f;
        return static_cast<std::uint16_t>(sign | static_cast<std::uint16_t>(std::nearbyint(scaled)));
    }
    mag += 0xfffu + ((mag >> 13) & 1u);
    mag -= 112u << 23;
    return static_cast<std::uint16_t>(sign | (mag >> 13));
}

float bf16_to_float(std::uint16_t b)
{
    return std::bit_cast<float>(static_cast<std::uint32_t>(b) << 16);
}

std::uint16_t float_to_bf16(float f)
{
    const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    if ((x & 0x7fffffffu) > 0x7f800000u) {
        return static_cast<std::uint16_t>((x >> 16) | 0x40u);
    }
    return static_cast<std::uint16_t>((x + 0x7fffu + ((x >> 16) & 1u)) >> 16);
}

} // namespace msd
