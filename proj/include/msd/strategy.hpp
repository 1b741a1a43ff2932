// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace msd {

/// The six switchable weight modules of a transformer layer, in dataflow order:
/// attention query/key/value/output, FFN input and projection-output.
enum class ModuleRole : std::uint8_t { Q = 0, K, V, O, I, P };

inline constexpr int kNumRoles = 6;
inline constexpr std::array<ModuleRole, kNumRoles> kAllRoles = {
    ModuleRole::Q, ModuleRole::K, ModuleRole::V, ModuleRole::O, ModuleRole::I, ModuleRole::P};

constexpr int role_index(ModuleRole r) noexcept { return static_cast<int>(r); }
char role_symbol(ModuleRole r) noexcept;
/// Parses "Q".."P" (single letter, case-sensitive); throws UsageError otherwise.
ModuleRole parse_role(std::string_view s);

using ModelIndex = std::uint16_t;
using LayerRow = std::array<ModelIndex, kNumRoles>;

/// L x 6 grid assigning every (layer, role) cell to a source model.
class SwitchStrategy {
public:
    /// All cells start at model 0.
    SwitchStrategy(int num_models, int num_layers);
    /// Validates dimensions and cell range; throws UsageError on violation.
    SwitchStrategy(int num_models, std::vector<LayerRow> rows);

    int num_models() const noexcept { return num_models_; }
    int num_layers() const noexcept { return static_cast<int>(rows_.size()); }
    int num_cells() const noexcept { return num_layers() * kNumRoles; }

    ModelIndex at(int layer, ModuleRole role) const { return rows_.at(layer)[role_index(role)]; }
    ModelIndex cell(int flat) const { return rows_[flat / kNumRoles][flat % kNumRoles]; }
    const LayerRow& row(int layer) const { return rows_.at(layer); }
    std::span<const LayerRow> rows() const noexcept { return rows_; }

    void set(int layer, ModuleRole role, ModelIndex model);
    void set_cell(int flat, ModelIndex model) { set(flat / kNumRoles, kAllRoles[flat % kNumRoles], model); }

    friend bool operator==(const SwitchStrategy&, const SwitchStrategy&) = default;

private:
    int num_models_;
    std::vector<LayerRow> rows_;
};

using RolePair = std::pair<ModuleRole, ModuleRole>;

/// Which module pairs count as adjacent for the three path penalties.
struct AdjacencyConfig {
    /// Unordered pairs within one layer.
    std::vector<RolePair> intra_pairs;
    /// (role in layer i, role in layer i+1).
    std::vector<RolePair> consec_pairs;
    std::vector<ModuleRole> residual_sources;
    std::vector<ModuleRole> residual_targets;
    double residual_decay = 0.5;

    /// Chain Q-K-V-O-I-P within a layer, P feeding Q'/K', O and P feeding later Q/K.
    static AdjacencyConfig defaults();
    /// Throws UsageError if decay is outside (0, 1).
    void validate() const;
};

struct FitnessWeights {
    double intra = 1.0;
    double consec = 1.0;
    double residual = 1.0;
    double balance = 1.0;
    double diversity = 1.0;
};

struct FitnessBreakdown {
    double intra = 0.0;
    double consec = 0.0;
    double residual = 0.0;
    double balance = 0.0;
    double diversity = 0.0;
    double total = 0.0;

    friend bool operator==(const FitnessBreakdown&, const FitnessBreakdown&) = default;
};

double intra_penalty(const SwitchStrategy& s, const AdjacencyConfig& cfg);
double consec_penalty(const SwitchStrategy& s, const AdjacencyConfig& cfg);
double residual_penalty(const SwitchStrategy& s, const AdjacencyConfig& cfg);
/// Uses the exact (unrounded) ideal count L / num_models.
double balance_penalty(const SwitchStrategy& s);
/// Number of distinct rows; relabeled rows count as distinct.
double diversity_reward(const SwitchStrategy& s);

/// Weighted total in fixed component order.
double weighted_total(double intra, double consec, double residual, double balance, double diversity,
                      const FitnessWeights& w) noexcept;

FitnessBreakdown score_strategy(const SwitchStrategy& s, const AdjacencyConfig& cfg, const FitnessWeights& w);

enum class RenderFormat { kText, kSvg };
RenderFormat parse_render_format(std::string_view name);

std::string render_strategy(const SwitchStrategy& s, RenderFormat format);
/// Inverse of the text grid rendering.
SwitchStrategy parse_text_grid(std::string_view text, int num_models);

// JSON file formats.

struct StrategyDocument {
    SwitchStrategy strategy;
    std::optional<FitnessBreakdown> fitness;
    std::optional<std::uint64_t> seed;
};

nlohmann::json to_json(const FitnessBreakdown& f);
FitnessBreakdown fitness_from_json(const nlohmann::json& j);
nlohmann::json to_json(const StrategyDocument& doc);
StrategyDocument strategy_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AdjacencyConfig& cfg);
AdjacencyConfig adjacency_from_json(const nlohmann::json& j);
nlohmann::json to_json(const FitnessWeights& w);
FitnessWeights weights_from_json(const nlohmann::json& j);

StrategyDocument load_strategy(const std::string& path);
void save_strategy(const StrategyDocument& doc, const std::string& path);
AdjacencyConfig load_adjacency(const std::string& path);

} // namespace msd
