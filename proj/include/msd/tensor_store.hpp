// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "msd/strategy.hpp"

namespace msd {

enum class DType : std::uint8_t { kF32, kF16, kBF16 };

std::string_view dtype_name(DType d);
/// Accepts the container spellings "F32", "F16", "BF16".
std::optional<DType> parse_dtype(std::string_view name);
std::size_t dtype_size(DType d);

/// IEEE half / bfloat16 conversions with round-to-nearest-even.
float half_to_float(std::uint16_t h);
std::uint16_t float_to_half(float f);
float bf16_to_float(std::uint16_t b);
std::uint16_t float_to_bf16(float f);

/// One named tensor with its raw little-endian payload.
struct TensorRecord {
    std::string name;
    DType dtype = DType::kF32;
    std::vector<std::int64_t> shape;
    /// Extent inside the data region; filled on read and write.
    std::uint64_t byte_offset = 0;
    std::uint64_t byte_length = 0;
    std::vector<std::uint8_t> data;

    std::uint64_t element_count() const;
    /// Upcasts to f32.
    std::vector<float> to_floats() const;

    static TensorRecord from_floats(std::string name, DType dtype, std::vector<std::int64_t> shape,
                                    std::span<const float> values);
};

class WeightMap {
public:
    WeightMap() = default;

    /// Throws DataError on a duplicate name or a payload that does not match the shape.
    void add(TensorRecord record);
    const TensorRecord* find(std::string_view name) const;
    const TensorRecord& at(std::string_view name) const;
    TensorRecord& at(std::string_view name);
    bool contains(std::string_view name) const { return find(name) != nullptr; }

    const std::vector<TensorRecord>& tensors() const noexcept { return tensors_; }
    std::size_t size() const noexcept { return tensors_.size(); }
    std::vector<std::string> names() const;

    std::map<std::string, std::string> metadata;

private:
    std::vector<TensorRecord> tensors_;
    std::map<std::string, std::size_t, std::less<>> index_;
};

WeightMap parse_container(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> serialize_container(const WeightMap& map);

WeightMap read_container(const std::string& path);
/// Canonical layout: tensors in sorted-name order, compact header padded with
/// spaces to an 8-byte boundary. Written atomically.
void write_container(const WeightMap& map, const std::string& path);

/// Locates the six role tensors of each layer by name.
struct NameMapping {
    std::string architecture;
    std::optional<int> num_layers;
    /// Per role, a name template containing "{layer}".
    std::array<std::string, kNumRoles> templates;
    std::vector<std::string> param_suffixes;
    /// Name prefixes of tensors outside the switched modules; may contain "{layer}".
    std::vector<std::string> passthrough;

    std::string tensor_name(int layer, ModuleRole role, std::string_view suffix) const;
    bool is_passthrough(std::string_view name) const;
};

NameMapping mapping_from_json(const nlohmann::json& j);
nlohmann::json to_json(const NameMapping& m);
NameMapping load_mapping(const std::string& path);
/// Looks up a shipped mapping by architecture id (e.g. "roberta-large").
NameMapping builtin_mapping(std::string_view architecture);

/// cell (layer * 6 + role) -> tensor names, plus the passthrough remainder.
struct ModuleGrid {
    int num_layers = 0;
    std::vector<std::vector<std::string>> cells;
    std::vector<std::string> passthrough;

    const std::vector<std::string>& cell(int layer, ModuleRole role) const
    {
        return cells.at(static_cast<std::size_t>(layer * kNumRoles + role_index(role)));
    }
};

/// Every template must resolve and every other tensor must be passthrough;
/// otherwise throws DataError listing the offenders.
ModuleGrid resolve_modules(const WeightMap& map, const NameMapping& mapping, int num_layers);

} // namespace msd
