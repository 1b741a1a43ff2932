// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace msd {

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
std::string read_text_file(const std::string& path);
nlohmann::json read_json_file(const std::string& path);

/// Writes to a sibling temp file, then renames over `path`.
void write_bytes_atomic(const std::string& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::string& path, std::string_view text);

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) noexcept;
std::uint64_t fnv1a64(std::string_view text) noexcept;
std::string hex64(std::uint64_t v);

} // namespace msd
