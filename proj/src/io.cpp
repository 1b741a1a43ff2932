// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

#include "msd/io.hpp"

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "msd/error.hpp"
#include "msd/rng.hpp"

namespace msd {

namespace fs = std::filesystem;

std::vector<std::uint8_t> read_file_bytes(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError(fmt::format("cannot open '{}' for reading", path));
    }
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::string read_text_file(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError(fmt::format("cannot open '{}' for reading", path));
    }
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

nlohmann::json read_json_file(const std::string& path)
{
    const std::string text = read_text_file(path);
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError(fmt::format("'{}': {}", path, e.what()));
    }
}

void write_bytes_atomic(const std::string& path, std::span<const std::uint8_t> bytes)
{
    const fs::path target(path);
    if (target.has_parent_path()) {
        fs::create_directories(target.parent_path());
    }
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw DataError(fmt::format("cannot open '{}' for writing", tmp.string()));
        }
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw DataError(fmt::format("write to '{}' failed", tmp.string()));
        }
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) {
        fs::remove(tmp);
        throw DataError(fmt::format("cannot move '{}' into place: {}", path, ec.message()));
    }
}

void write_text_atomic(const std::string& path, std::string_view text)
{
    write_bytes_atomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) noexcept
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t fnv1a64(std::string_view text) noexcept
{
    return fnv1a64({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

std::string hex64(std::uint64_t v)
{
    return fmt::format("{:016x}", v);
}

std::string serialize_rng(const Rng& rng)
{
    std::ostringstream out;
    out << rng;
    return out.str();
}

Rng deserialize_rng(const std::string& text)
{
    std::istringstream in(text);
    Rng rng;
    in >> rng;
    if (in.fail()) {
        throw DataError("corrupt generator state");
    }
    return rng;
}

} // namespace msd
