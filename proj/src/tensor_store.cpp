// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

#include "msd/tensor_store.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <utility>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <nlohmann/json.hpp>

#include "msd/error.hpp"
#include "msd/io.hpp"

namespace msd {

namespace {

constexpr std::string_view kMetadataKey = "__metadata__";
constexpr std::string_view kLayerToken = "{layer}";

std::uint64_t shape_elements(const std::vector<std::int64_t>& shape)
{
    std::uint64_t n = 1;
    for (std::int64_t d : shape) {
        n *= static_cast<std::uint64_t>(d);
    }
    return n;
}

[[noreturn]] void parse_fail(std::uint64_t pos, const std::string& what)
{
    throw DataError(fmt::format("container parse error at byte {}: {}", pos, what));
}

} // namespace

std::uint64_t TensorRecord::element_count() const
{
    return shape_elements(shape);
}

std::vector<float> TensorRecord::to_floats() const
{
    const std::uint64_t n = element_count();
    std::vector<float> out(n);
    switch (dtype) {
    case DType::kF32:
        std::memcpy(out.data(), data.data(), n * 4);
        break;
    case DType::kF16:
    case DType::kBF16:
        for (std::uint64_t i = 0; i < n; ++i) {
            std::uint16_t v;
            std::memcpy(&v, data.data() + 2 * i, 2);
            out[i] = dtype == DType::kF16 ? half_to_float(v) : bf16_to_float(v);
        }
        break;
    }
    return out;
}

TensorRecord TensorRecord::from_floats(std::string name, DType dtype, std::vector<std::int64_t> shape,
                                       std::span<const float> values)
{
    TensorRecord rec;
    rec.name = std::move(name);
    rec.dtype = dtype;
    rec.shape = std::move(shape);
    if (values.size() != rec.element_count()) {
        throw DataError(fmt::format("tensor '{}': {} values for shape [{}]", rec.name, values.size(),
                                    fmt::join(rec.shape, ",")));
    }
    rec.data.resize(values.size() * dtype_size(dtype));
    if (dtype == DType::kF32) {
        std::memcpy(rec.data.data(), values.data(), rec.data.size());
    } else {
        for (std::size_t i = 0; i < values.size(); ++i) {
            const std::uint16_t v = dtype == DType::kF16 ? float_to_half(values[i]) : float_to_bf16(values[i]);
            std::memcpy(rec.data.data() + 2 * i, &v, 2);
        }
    }
    rec.byte_length = rec.data.size();
    return rec;
}

void WeightMap::add(TensorRecord record)
{
    if (record.name.empty() || record.name == kMetadataKey) {
        throw DataError(fmt::format("invalid tensor name '{}'", record.name));
    }
    if (index_.count(record.name) != 0) {
        throw DataError(fmt::format("duplicate tensor name '{}'", record.name));
    }
    for (std::int64_t d : record.shape) {
        if (d < 0) {
            throw DataError(fmt::format("tensor '{}' has a negative dimension", record.name));
        }
    }
    const std::uint64_t expected = record.element_count() * dtype_size(record.dtype);
    if (record.data.size() != expected) {
        throw DataError(fmt::format("tensor '{}': payload of {} bytes, shape [{}] {} needs {}", record.name,
                                    record.data.size(), fmt::join(record.shape, ","), dtype_name(record.dtype),
                                    expected));
    }
    record.byte_length = expected;
    index_.emplace(record.name, tensors_.size());
    tensors_.push_back(std::move(record));
}

const TensorRecord* WeightMap::find(std::string_view name) const
{
    const auto it = index_.find(name);
    return it == index_.end() ? nullptr : &tensors_[it->second];
}

const TensorRecord& WeightMap::at(std::string_view name) const
{
    const TensorRecord* rec = find(name);
    if (rec == nullptr) {
        throw DataError(fmt::format("no tensor named '{}'", name));
    }
    return *rec;
}

TensorRecord& WeightMap::at(std::string_view name)
{
    return const_cast<TensorRecord&>(std::as_const(*this).at(name));
}

std::vector<std::string> WeightMap::names() const
{
    std::vector<std::string> out;
    out.reserve(tensors_.size());
    for (const auto& t : tensors_) {
        out.push_back(t.name);
    }
    return out;
}

WeightMap parse_container(std::span<const std::uint8_t> bytes)
{
    if (bytes.size() < 8) {
        parse_fail(0, fmt::format("file of {} bytes is shorter than the 8-byte header length", bytes.size()));
    }
    std::uint64_t header_len = 0;
    for (int b = 7; b >= 0; --b) {
        header_len = (header_len << 8) | bytes[static_cast<std::size_t>(b)];
    }
    if (header_len > bytes.size() - 8) {
        parse_fail(0, fmt::format("header length {} exceeds the {} bytes that follow it", header_len, bytes.size() - 8));
    }
    const std::string_view header(reinterpret_cast<const char*>(bytes.data()) + 8, header_len);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(header);
    } catch (const nlohmann::json::parse_error& e) {
        parse_fail(8 + (e.byte > 0 ? e.byte - 1 : 0), fmt::format("malformed header: {}", e.what()));
    }
    if (!doc.is_object()) {
        parse_fail(8, "header is not an object");
    }

    const std::uint64_t data_start = 8 + header_len;
    const std::uint64_t data_size = bytes.size() - data_start;
    auto key_pos = [&](const std::string& key) -> std::uint64_t {
        const auto p = header.find(fmt::format("\"{}\"", key));
        return 8 + (p == std::string_view::npos ? 0 : p);
    };

    struct Extent {
        std::uint64_t begin;
        std::uint64_t end;
        std::string name;
    };
    std::vector<Extent> extents;
    WeightMap map;
    std::vector<TensorRecord> records;
    for (const auto& [key, value] : doc.items()) {
        if (key == kMetadataKey) {
            if (!value.is_object()) {
                parse_fail(key_pos(key), "__metadata__ must be an object of strings");
            }
            for (const auto& [mk, mv] : value.items()) {
                if (!mv.is_string()) {
                    parse_fail(key_pos(key), fmt::format("metadata value for '{}' is not a string", mk));
                }
                map.metadata[mk] = mv.get<std::string>();
            }
            continue;
        }
        const std::uint64_t pos = key_pos(key);
        if (!value.is_object() || !value.contains("dtype") || !value.contains("shape")
            || !value.contains("data_offsets")) {
            parse_fail(pos, fmt::format("tensor '{}' lacks dtype, shape or data_offsets", key));
        }
        TensorRecord rec;
        rec.name = key;
        try {
            const auto dtype_str = value.at("dtype").get<std::string>();
            const auto dtype = parse_dtype(dtype_str);
            if (!dtype) {
                parse_fail(pos, fmt::format("tensor '{}' has unsupported dtype '{}'", key, dtype_str));
            }
            rec.dtype = *dtype;
            rec.shape = value.at("shape").get<std::vector<std::int64_t>>();
            const auto offsets = value.at("data_offsets").get<std::vector<std::uint64_t>>();
            if (offsets.size() != 2 || offsets[0] > offsets[1]) {
                parse_fail(pos, fmt::format("tensor '{}' has invalid data_offsets", key));
            }
            rec.byte_offset = offsets[0];
            rec.byte_length = offsets[1] - offsets[0];
        } catch (const nlohmann::json::exception& e) {
            parse_fail(pos, fmt::format("tensor '{}': {}", key, e.what()));
        }
        for (std::int64_t d : rec.shape) {
            if (d < 0) {
                parse_fail(pos, fmt::format("tensor '{}' has a negative dimension", key));
            }
        }
        if (rec.byte_length != rec.element_count() * dtype_size(rec.dtype)) {
            parse_fail(pos, fmt::format("tensor '{}' spans {} bytes but shape [{}] {} needs {}", key, rec.byte_length,
                                        fmt::join(rec.shape, ","), dtype_name(rec.dtype),
                                        rec.element_count() * dtype_size(rec.dtype)));
        }
        if (rec.byte_offset + rec.byte_length > data_size) {
            parse_fail(data_start + rec.byte_offset,
                       fmt::format("tensor '{}' extends past the end of the file", key));
        }
        extents.push_back({rec.byte_offset, rec.byte_offset + rec.byte_length, key});
        records.push_back(std::move(rec));
    }

    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return extents[a].begin < extents[b].begin
            || (extents[a].begin == extents[b].begin && extents[a].end < extents[b].end);
    });
    std::uint64_t cursor = 0;
    for (std::size_t idx : order) {
        const Extent& e = extents[idx];
        if (e.begin < cursor) {
            parse_fail(data_start + e.begin, fmt::format("tensor '{}' overlaps a preceding tensor", e.name));
        }
        if (e.begin > cursor) {
            parse_fail(data_start + cursor, fmt::format("unclaimed gap before tensor '{}'", e.name));
        }
        cursor = e.end;
    }
    if (cursor != data_size) {
        parse_fail(data_start + cursor, fmt::format("{} trailing bytes after the last tensor", data_size - cursor));
    }

    for (std::size_t idx : order) {
        TensorRecord& rec = records[idx];
        const auto* first = bytes.data() + data_start + rec.byte_offset;
        rec.data.assign(first, first + rec.byte_length);
        const std::uint64_t offset = rec.byte_offset;
        map.add(std::move(rec));
        map.at(extents[idx].name).byte_offset = offset;
    }
    return map;
}

std::vector<std::uint8_t> serialize_container(const WeightMap& map)
{
    std::vector<const TensorRecord*> sorted;
    sorted.reserve(map.size());
    for (const auto& t : map.tensors()) {
        sorted.push_back(&t);
    }
    std::sort(sorted.begin(), sorted.end(), [](const auto* a, const auto* b) { return a->name < b->name; });

    nlohmann::json header = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const TensorRecord* t : sorted) {
        const std::uint64_t expected = t->element_count() * dtype_size(t->dtype);
        if (t->data.size() != expected) {
            throw DataError(fmt::format("tensor '{}' payload is inconsistent with its shape", t->name));
        }
        header[t->name] = {{"dtype", std::string(dtype_name(t->dtype))},
                           {"shape", t->shape},
                           {"data_offsets", {offset, offset + expected}}};
        offset += expected;
    }
    if (!map.metadata.empty()) {
        header[std::string(kMetadataKey)] = map.metadata;
    }
    std::string text = header.dump();
    text.append((8 - text.size() % 8) % 8, ' ');

    std::vector<std::uint8_t> out;
    out.reserve(8 + text.size() + offset);
    const std::uint64_t len = text.size();
    for (int b = 0; b < 8; ++b) {
        out.push_back(static_cast<std::uint8_t>(len >> (8 * b)));
    }
    out.insert(out.end(), text.begin(), text.end());
    for (const TensorRecord* t : sorted) {
        out.insert(out.end(), t->data.begin(), t->data.end());
    }
    return out;
}

WeightMap read_container(const std::string& path)
{
    const auto bytes = read_file_bytes(path);
    try {
        return parse_container(bytes);
    } catch (const DataError& e) {
        throw DataError(fmt::format("'{}': {}", path, e.what()));
    }
}

void write_container(const WeightMap& map, const std::string& path)
{
    write_bytes_atomic(path, serialize_container(map));
}

// ---------------------------------------------------------------------------
// Name mapping

std::string NameMapping::tensor_name(int layer, ModuleRole role, std::string_view suffix) const
{
    std::string name = templates[role_index(role)];
    const auto pos = name.find(kLayerToken);
    if (pos != std::string::npos) {
        name.replace(pos, kLayerToken.size(), std::to_string(layer));
    }
    name += suffix;
    return name;
}

bool NameMapping::is_passthrough(std::string_view name) const
{
    for (const std::string& pattern : passthrough) {
        const auto pos = pattern.find(kLayerToken);
        if (pos == std::string::npos) {
            if (name.starts_with(pattern)) {
                return true;
            }
            continue;
        }
        const std::string_view head(pattern.data(), pos);
        const std::string_view tail = std::string_view(pattern).substr(pos + kLayerToken.size());
        if (!name.starts_with(head)) {
            continue;
        }
        std::size_t cur = head.size();
        const std::size_t digits_start = cur;
        while (cur < name.size() && std::isdigit(static_cast<unsigned char>(name[cur]))) {
            ++cur;
        }
        if (cur > digits_start && name.substr(cur).starts_with(tail)) {
            return true;
        }
    }
    return false;
}

NameMapping mapping_from_json(const nlohmann::json& j)
{
    NameMapping m;
    try {
        m.architecture = j.at("architecture").get<std::string>();
        if (j.contains("num_layers")) {
            m.num_layers = j.at("num_layers").get<int>();
        }
        const auto& templates = j.at("templates");
        for (ModuleRole r : kAllRoles) {
            m.templates[role_index(r)] = templates.at(std::string(1, role_symbol(r))).get<std::string>();
        }
        m.param_suffixes = j.at("param_suffixes").get<std::vector<std::string>>();
        m.passthrough = j.value("passthrough", std::vector<std::string>{});
    } catch (const nlohmann::json::exception& e) {
        throw DataError(fmt::format("invalid name mapping: {}", e.what()));
    }
    if (m.param_suffixes.empty()) {
        throw DataError("name mapping needs at least one parameter suffix");
    }
    return m;
}

nlohmann::json to_json(const NameMapping& m)
{
    nlohmann::json templates = nlohmann::json::object();
    for (ModuleRole r : kAllRoles) {
        templates[std::string(1, role_symbol(r))] = m.templates[role_index(r)];
    }
    nlohmann::json j{{"architecture", m.architecture},
                     {"templates", templates},
                     {"param_suffixes", m.param_suffixes},
                     {"passthrough", m.passthrough}};
    if (m.num_layers) {
        j["num_layers"] = *m.num_layers;
    }
    return j;
}

NameMapping load_mapping(const std::string& path)
{
    return mapping_from_json(read_json_file(path));
}

NameMapping builtin_mapping(std::string_view architecture)
{
    namespace fs = std::filesystem;
    std::vector<fs::path> roots;
    if (const char* env = std::getenv("MSD_DATA_DIR")) {
        roots.emplace_back(env);
    }
#ifdef MSD_DATA_DIR
    roots.emplace_back(MSD_DATA_DIR);
#endif
    for (const auto& root : roots) {
        const fs::path candidate = root / "data" / "mappings" / (std::string(architecture) + ".json");
        if (fs::exists(candidate)) {
            return load_mapping(candidate.string());
        }
    }
    throw UsageError(fmt::format("no shipped name mapping for architecture '{}'; pass a mapping file", architecture));
}

ModuleGrid resolve_modules(const WeightMap& map, const NameMapping& mapping, int num_layers)
{
    if (num_layers < 1) {
        throw UsageError("resolve_modules needs at least one layer");
    }
    if (mapping.num_layers && *mapping.num_layers != num_layers) {
        throw DataError(fmt::format("mapping '{}' describes {} layers, the strategy has {}", mapping.architecture,
                                    *mapping.num_layers, num_layers));
    }
    ModuleGrid grid;
    grid.num_layers = num_layers;
    grid.cells.resize(static_cast<std::size_t>(num_layers) * kNumRoles);
    std::vector<std::string> missing;
    std::vector<std::string> duplicated;
    std::map<std::string, int, std::less<>> claimed;
    for (int l = 0; l < num_layers; ++l) {
        for (ModuleRole r : kAllRoles) {
            auto& cell = grid.cells[static_cast<std::size_t>(l * kNumRoles + role_index(r))];
            for (const std::string& suffix : mapping.param_suffixes) {
                std::string name = mapping.tensor_name(l, r, suffix);
                if (!map.contains(name)) {
                    missing.push_back(fmt::format("{} (layer {}, {})", name, l, role_symbol(r)));
                    continue;
                }
                if (!claimed.emplace(name, l).second) {
                    duplicated.push_back(name);
                    continue;
                }
                cell.push_back(std::move(name));
            }
        }
    }
    std::vector<std::string> orphans;
    for (const auto& t : map.tensors()) {
        if (claimed.count(t.name) != 0) {
            continue;
        }
        if (mapping.is_passthrough(t.name)) {
            grid.passthrough.push_back(t.name);
        } else {
            orphans.push_back(t.name);
        }
    }
    if (!missing.empty() || !duplicated.empty() || !orphans.empty()) {
        auto clip = [](const std::vector<std::string>& v) {
            constexpr std::size_t kShown = 20;
            std::string s = fmt::format("{}", fmt::join(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(
                                                                              std::min(v.size(), kShown)), ", "));
            if (v.size() > kShown) {
                s += fmt::format(", ... ({} more)", v.size() - kShown);
            }
            return s;
        };
        std::string msg = fmt::format("mapping '{}' does not fit the checkpoint:", mapping.architecture);
        if (!missing.empty()) {
            msg += fmt::format(" unresolved: {};", clip(missing));
        }
        if (!duplicated.empty()) {
            msg += fmt::format(" claimed twice: {};", clip(duplicated));
        }
        if (!orphans.empty()) {
            msg += fmt::format(" orphans (not in passthrough): {};", clip(orphans));
        }
        msg.pop_back();
        throw DataError(msg);
    }
    return grid;
}

} // namespace msd
