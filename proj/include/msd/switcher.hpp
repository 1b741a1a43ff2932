// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "msd/strategy.hpp"
#include "msd/tensor_store.hpp"

namespace msd {

/// How tensors outside the six switched roles are combined.
struct PassthroughPolicy {
    enum class Mode { kAverage, kCopy };
    Mode mode = Mode::kAverage;
    /// Source model for kCopy.
    int copy_from = 0;
};

/// Where each merged tensor came from.
struct Provenance {
    /// (layer, role) -> source model index; absent for a plain weight average.
    std::optional<SwitchStrategy> cells;
    std::vector<int> permutation;
    PassthroughPolicy passthrough;
    std::string architecture;
    std::vector<std::string> sources;
    std::vector<std::string> source_digests;
};

nlohmann::json to_json(const Provenance& p);
Provenance provenance_from_json(const nlohmann::json& j);
/// Sidecar path for a merged checkpoint: "<out>.provenance.json".
std::string provenance_path(const std::string& checkpoint_path);

struct CandidateModel {
    /// slot -> source model
    std::vector<int> permutation;
    WeightMap merged;
    Provenance provenance;
};

/// Throws DataError unless every model has the same tensor names, dtypes and shapes.
void check_same_structure(std::span<const WeightMap> models);

/// Copies every (layer, role) cell byte-for-byte from
/// models[permutation[strategy(layer, role)]].
CandidateModel apply_strategy(const SwitchStrategy& strategy, std::span<const WeightMap> models,
                              const NameMapping& mapping, std::span<const int> permutation,
                              const PassthroughPolicy& passthrough = {});

/// Elementwise mean of one tensor across models, accumulated in f64 and
/// rounded back to the source dtype.
TensorRecord average_tensor(std::span<const WeightMap> models, std::string_view name);
WeightMap wag_average(std::span<const WeightMap> models);

/// One candidate per distinct provenance grid over all permutations of the
/// models into strategy slots. Refuses more than 4 models.
std::vector<CandidateModel> permute_candidates(const SwitchStrategy& strategy, std::span<const WeightMap> models,
                                               const NameMapping& mapping, const PassthroughPolicy& passthrough = {});

struct AuditEntry {
    /// "cell", "passthrough", "averaged" or "unknown"
    std::string kind;
    int layer = -1;
    std::optional<ModuleRole> role;
    std::vector<std::string> tensors;
    /// Declared source model, -1 when averaged.
    int source = -1;
    bool ok = true;
    std::string detail;
};

struct AuditReport {
    std::vector<AuditEntry> entries;

    std::vector<const AuditEntry*> violations() const;
    bool clean() const { return violations().empty(); }
};

/// Re-verifies every merged tensor against its declared origin.
AuditReport audit_provenance(const WeightMap& merged, std::span<const WeightMap> models, const Provenance& provenance,
                             const std::optional<NameMapping>& mapping);

std::string format_audit(const AuditReport& report);

} // namespace msd
