// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

#include "msd/switcher.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>
#include <set>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <nlohmann/json.hpp>

#include "msd/error.hpp"
#include "msd/io.hpp"

namespace msd {

namespace {

constexpr std::string_view kProvenanceFormat = "msd-provenance";
constexpr int kProvenanceVersion = 1;

std::vector<WeightMap> pick(std::span<const WeightMap> models, std::span<const int> indices)
{
    std::vector<WeightMap> out;
    out.reserve(indices.size());
    for (int i : indices) {
        out.push_back(models[static_cast<std::size_t>(i)]);
    }
    return out;
}

void validate_permutation(std::span<const int> permutation, std::size_t num_models, int slots)
{
    if (static_cast<int>(permutation.size()) != slots) {
        throw UsageError(fmt::format("permutation has {} entries, strategy has {} slots", permutation.size(), slots));
    }
    std::set<int> seen;
    for (int p : permutation) {
        if (p < 0 || static_cast<std::size_t>(p) >= num_models) {
            throw UsageError(fmt::format("permutation entry {} outside [0, {})", p, num_models));
        }
        if (!seen.insert(p).second) {
            throw UsageError(fmt::format("permutation repeats model {}", p));
        }
    }
}

} // namespace

std::string provenance_path(const std::string& checkpoint_path)
{
    return checkpoint_path + ".provenance.json";
}

nlohmann::json to_json(const Provenance& p)
{
    nlohmann::json j{{"format", kProvenanceFormat},
                     {"version", kProvenanceVersion},
                     {"kind", p.cells ? "switch" : "wag"},
                     {"architecture", p.architecture},
                     {"permutation", p.permutation},
                     {"passthrough",
                      {{"policy", p.passthrough.mode == PassthroughPolicy::Mode::kAverage ? "average" : "copy"},
                       {"copy_from", p.passthrough.copy_from}}},
                     {"sources", p.sources},
                     {"source_digests", p.source_digests}};
    if (p.cells) {
        nlohmann::json grid = nlohmann::json::array();
        for (const LayerRow& row : p.cells->rows()) {
            grid.push_back(std::vector<int>(row.begin(), row.end()));
        }
        j["num_layers"] = p.cells->num_layers();
        j["num_sources"] = p.cells->num_models();
        j["cells"] = grid;
    }
    return j;
}

Provenance provenance_from_json(const nlohmann::json& j)
{
    Provenance p;
    try {
        if (j.at("format").get<std::string>() != kProvenanceFormat) {
            throw DataError("not a provenance file");
        }
        if (j.at("version").get<int>() != kProvenanceVersion) {
            throw DataError("unsupported provenance version");
        }
        p.architecture = j.value("architecture", std::string());
        p.permutation = j.at("permutation").get<std::vector<int>>();
        const auto& pt = j.at("passthrough");
        const auto policy = pt.at("policy").get<std::string>();
        if (policy == "average") {
            p.passthrough.mode = PassthroughPolicy::Mode::kAverage;
        } else if (policy == "copy") {
            p.passthrough.mode = PassthroughPolicy::Mode::kCopy;
        } else {
            throw DataError(fmt::format("unknown passthrough policy '{}'", policy));
        }
        p.passthrough.copy_from = pt.value("copy_from", 0);
        p.sources = j.value("sources", std::vector<std::string>{});
        p.source_digests = j.value("source_digests", std::vector<std::string>{});
        if (j.value("kind", std::string("switch")) == "switch") {
            const int num_sources = j.at("num_sources").get<int>();
            std::vector<LayerRow> rows;
            for (const auto& r : j.at("cells")) {
                const auto cells = r.get<std::vector<int>>();
                if (cells.size() != kNumRoles) {
                    throw DataError("provenance rows must have 6 cells");
                }
                LayerRow row{};
                for (int m = 0; m < kNumRoles; ++m) {
                    if (cells[m] < 0 || cells[m] >= num_sources) {
                        throw DataError("provenance cell outside the source range");
                    }
                    row[m] = static_cast<ModelIndex>(cells[m]);
                }
                rows.push_back(row);
            }
            p.cells = SwitchStrategy(num_sources, std::move(rows));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(fmt::format("invalid provenance file: {}", e.what()));
    } catch (const UsageError& e) {
        throw DataError(fmt::format("invalid provenance file: {}", e.what()));
    }
    return p;
}

void check_same_structure(std::span<const WeightMap> models)
{
    if (models.empty()) {
        throw UsageError("no models given");
    }
    const WeightMap& ref = models.front();
    for (std::size_t m = 1; m < models.size(); ++m) {
        const WeightMap& other = models[m];
        if (other.size() != ref.size()) {
            throw DataError(fmt::format("model {} has {} tensors, model 0 has {}", m, other.size(), ref.size()));
        }
        for (const auto& t : ref.tensors()) {
            const TensorRecord* o = other.find(t.name);
            if (o == nullptr) {
                throw DataError(fmt::format("model {} lacks tensor '{}'", m, t.name));
            }
            if (o->dtype != t.dtype) {
                throw DataError(fmt::format("dtype mismatch for '{}': {} vs {} in model {}", t.name, dtype_name(t.dtype),
                                            dtype_name(o->dtype), m));
            }
            if (o->shape != t.shape) {
                throw DataError(fmt::format("shape mismatch for '{}': [{}] vs [{}] in model {}", t.name,
                                            fmt::join(t.shape, ","), fmt::join(o->shape, ","), m));
            }
        }
    }
}

TensorRecord average_tensor(std::span<const WeightMap> models, std::string_view name)
{
    // Double accumulation keeps the sum exact for a handful of f32 inputs, so
    // the result does not depend on model order.
    const TensorRecord& first = models.front().at(name);
    std::vector<double> acc(first.element_count(), 0.0);
    for (const WeightMap& m : models) {
        const std::vector<float> v = m.at(name).to_floats();
        for (std::size_t i = 0; i < acc.size(); ++i) {
            acc[i] += v[i];
        }
    }
    std::vector<float> mean(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i) {
        mean[i] = static_cast<float>(acc[i] / static_cast<double>(models.size()));
    }
    return TensorRecord::from_floats(first.name, first.dtype, first.shape, mean);
}

WeightMap wag_average(std::span<const WeightMap> models)
{
    check_same_structure(models);
    WeightMap out;
    for (const auto& t : models.front().tensors()) {
        out.add(average_tensor(models, t.name));
    }
    return out;
}

CandidateModel apply_strategy(const SwitchStrategy& strategy, std::span<const WeightMap> models,
                              const NameMapping& mapping, std::span<const int> permutation,
                              const PassthroughPolicy& passthrough)
{
    validate_permutation(permutation, models.size(), strategy.num_models());
    check_same_structure(models);
    const ModuleGrid grid = resolve_modules(models.front(), mapping, strategy.num_layers());
    const std::vector<WeightMap> participants = pick(models, permutation);
    if (passthrough.mode == PassthroughPolicy::Mode::kCopy
        && (passthrough.copy_from < 0 || static_cast<std::size_t>(passthrough.copy_from) >= models.size())) {
        throw UsageError(fmt::format("passthrough copy source {} outside [0, {})", passthrough.copy_from,
                                     models.size()));
    }

    CandidateModel cand;
    cand.permutation.assign(permutation.begin(), permutation.end());
    SwitchStrategy cells(static_cast<int>(models.size()), strategy.num_layers());
    std::map<std::string, int, std::less<>> source_of;
    for (int l = 0; l < strategy.num_layers(); ++l) {
        for (ModuleRole r : kAllRoles) {
            const int src = permutation[strategy.at(l, r)];
            cells.set(l, r, static_cast<ModelIndex>(src));
            for (const std::string& name : grid.cell(l, r)) {
                source_of[name] = src;
            }
        }
    }
    for (const auto& t : models.front().tensors()) {
        const auto it = source_of.find(t.name);
        if (it != source_of.end()) {
            TensorRecord copy = models[static_cast<std::size_t>(it->second)].at(t.name);
            cand.merged.add(std::move(copy));
        } else if (passthrough.mode == PassthroughPolicy::Mode::kCopy) {
            cand.merged.add(models[static_cast<std::size_t>(passthrough.copy_from)].at(t.name));
        } else {
            cand.merged.add(average_tensor(participants, t.name));
        }
    }
    cand.provenance.cells = std::move(cells);
    cand.provenance.permutation = cand.permutation;
    cand.provenance.passthrough = passthrough;
    cand.provenance.architecture = mapping.architecture;
    return cand;
}

std::vector<CandidateModel> permute_candidates(const SwitchStrategy& strategy, std::span<const WeightMap> models,
                                               const NameMapping& mapping, const PassthroughPolicy& passthrough)
{
    constexpr int kMaxModels = 4;
    const int n = strategy.num_models();
    if (n > kMaxModels) {
        throw UsageError(fmt::format("permutation enumeration is limited to {} models, got {}", kMaxModels, n));
    }
    if (static_cast<int>(models.size()) != n) {
        throw UsageError(fmt::format("strategy has {} slots but {} models were given", n, models.size()));
    }
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<CandidateModel> out;
    std::set<std::vector<LayerRow>> seen;
    do {
        std::vector<LayerRow> grid;
        grid.reserve(static_cast<std::size_t>(strategy.num_layers()));
        for (const LayerRow& row : strategy.rows()) {
            LayerRow mapped{};
            for (int m = 0; m < kNumRoles; ++m) {
                mapped[m] = static_cast<ModelIndex>(perm[row[m]]);
            }
            grid.push_back(mapped);
        }
        if (seen.insert(std::move(grid)).second) {
            out.push_back(apply_strategy(strategy, models, mapping, perm, passthrough));
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
    return out;
}

std::vector<const AuditEntry*> AuditReport::violations() const
{
    std::vector<const AuditEntry*> out;
    for (const auto& e : entries) {
        if (!e.ok) {
            out.push_back(&e);
        }
    }
    return out;
}

AuditReport audit_provenance(const WeightMap& merged, std::span<const WeightMap> models, const Provenance& provenance,
                             const std::optional<NameMapping>& mapping)
{
    check_same_structure(models);
    AuditReport report;
    const WeightMap& ref = models.front();

    auto bytes_equal = [&](const std::string& name, const TensorRecord& expected, std::string& detail) {
        const TensorRecord* got = merged.find(name);
        if (got == nullptr) {
            detail = fmt::format("'{}' missing from merged checkpoint", name);
            return false;
        }
        if (got->dtype != expected.dtype || got->shape != expected.shape || got->data != expected.data) {
            detail = fmt::format("'{}' differs from its declared origin", name);
            return false;
        }
        return true;
    };

    std::vector<int> averaged_over = provenance.permutation;
    if (averaged_over.empty()) {
        averaged_over.resize(models.size());
        std::iota(averaged_over.begin(), averaged_over.end(), 0);
    }
    for (int idx : averaged_over) {
        if (idx < 0 || static_cast<std::size_t>(idx) >= models.size()) {
            throw DataError(fmt::format("provenance names model {} but only {} were given", idx, models.size()));
        }
    }
    const std::vector<WeightMap> participants = pick(models, averaged_over);

    std::set<std::string> covered;
    if (provenance.cells) {
        if (!mapping) {
            throw UsageError("auditing a switched checkpoint needs the name mapping");
        }
        const SwitchStrategy& cells = *provenance.cells;
        if (static_cast<std::size_t>(cells.num_models()) > models.size()) {
            throw DataError(fmt::format("provenance references {} source models but {} were given", cells.num_models(),
                                        models.size()));
        }
        const ModuleGrid grid = resolve_modules(ref, *mapping, cells.num_layers());
        for (int l = 0; l < cells.num_layers(); ++l) {
            for (ModuleRole r : kAllRoles) {
                AuditEntry entry;
                entry.kind = "cell";
                entry.layer = l;
                entry.role = r;
                entry.source = cells.at(l, r);
                entry.tensors = grid.cell(l, r);
                for (const std::string& name : entry.tensors) {
                    covered.insert(name);
                    std::string detail;
                    if (!bytes_equal(name, models[static_cast<std::size_t>(entry.source)].at(name), detail)) {
                        entry.ok = false;
                        entry.detail += (entry.detail.empty() ? "" : "; ") + detail;
                    }
                }
                report.entries.push_back(std::move(entry));
            }
        }
    }

    for (const auto& t : ref.tensors()) {
        if (covered.count(t.name) != 0) {
            continue;
        }
        AuditEntry entry;
        entry.tensors = {t.name};
        std::string detail;
        if (provenance.passthrough.mode == PassthroughPolicy::Mode::kCopy && provenance.cells) {
            entry.kind = "passthrough";
            entry.source = provenance.passthrough.copy_from;
            entry.ok = bytes_equal(t.name, models[static_cast<std::size_t>(entry.source)].at(t.name), detail);
        } else {
            entry.kind = "averaged";
            entry.ok = bytes_equal(t.name, average_tensor(participants, t.name), detail);
        }
        entry.detail = detail;
        report.entries.push_back(std::move(entry));
    }

    for (const auto& t : merged.tensors()) {
        if (!ref.contains(t.name)) {
            AuditEntry entry;
            entry.kind = "unknown";
            entry.tensors = {t.name};
            entry.ok = false;
            entry.detail = fmt::format("'{}' has no counterpart in the source models", t.name);
            report.entries.push_back(std::move(entry));
        }
    }
    return report;
}

std::string format_audit(const AuditReport& report)
{
    std::size_t cells = 0;
    std::size_t averaged = 0;
    std::size_t copied = 0;
    for (const auto& e : report.entries) {
        cells += e.kind == "cell";
        averaged += e.kind == "averaged";
        copied += e.kind == "passthrough";
    }
    const auto violations = report.violations();
    std::string out = fmt::format("audited {} module cells, {} averaged tensors, {} copied passthrough tensors\n",
                                  cells, averaged, copied);
    out += fmt::format("violations: {}\n", violations.size());
    for (const AuditEntry* v : violations) {
        if (v->role) {
            out += fmt::format("  layer {} {} (declared source {}): {}\n", v->layer, role_symbol(*v->role), v->source,
                               v->detail);
        } else {
            out += fmt::format("  {} {}: {}\n", v->kind, fmt::join(v->tensors, ","), v->detail);
        }
    }
    return out;
}

} // namespace msd
