// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

#include "msd/strategy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "msd/error.hpp"
#include "msd/io.hpp"

namespace msd {

char role_symbol(ModuleRole r) noexcept
{
    static constexpr char kSymbols[kNumRoles] = {'Q', 'K', 'V', 'O', 'I', 'P'};
    return kSymbols[role_index(r)];
}

ModuleRole parse_role(std::string_view s)
{
    if (s.size() == 1) {
        for (ModuleRole r : kAllRoles) {
            if (role_symbol(r) == s[0]) {
                return r;
            }
        }
    }
    throw UsageError(fmt::format("unknown module role '{}' (expected one of Q K V O I P)", s));
}

SwitchStrategy::SwitchStrategy(int num_models, int num_layers)
    : num_models_(num_models)
{
    if (num_models < 1 || num_layers < 1) {
        throw UsageError(fmt::format("strategy needs num_models >= 1 and num_layers >= 1, got {} and {}",
                                     num_models, num_layers));
    }
    if (num_models > 0xffff) {
        throw UsageError("num_models exceeds 65535");
    }
    rows_.assign(static_cast<std::size_t>(num_layers), LayerRow{});
}

SwitchStrategy::SwitchStrategy(int num_models, std::vector<LayerRow> rows)
    : num_models_(num_models)
    , rows_(std::move(rows))
{
    if (num_models < 1 || num_models > 0xffff || rows_.empty()) {
        throw UsageError(fmt::format("strategy needs num_models in [1, 65535] and at least one layer, got {} and {}",
                                     num_models, rows_.size()));
    }
    for (std::size_t l = 0; l < rows_.size(); ++l) {
        for (int m = 0; m < kNumRoles; ++m) {
            if (rows_[l][m] >= num_models) {
                throw UsageError(fmt::format("cell (layer {}, {}) = {} is outside [0, {})", l,
                                             role_symbol(kAllRoles[m]), rows_[l][m], num_models));
            }
        }
    }
}

void SwitchStrategy::set(int layer, ModuleRole role, ModelIndex model)
{
    if (model >= num_models_) {
        throw UsageError(fmt::format("model index {} is outside [0, {})", model, num_models_));
    }
    rows_.at(layer)[role_index(role)] = model;
}

AdjacencyConfig AdjacencyConfig::defaults()
{
    using R = ModuleRole;
    AdjacencyConfig cfg;
    cfg.intra_pairs = {{R::Q, R::K}, {R::K, R::V}, {R::V, R::O}, {R::O, R::I}, {R::I, R::P}};
    cfg.consec_pairs = {{R::P, R::Q}, {R::P, R::K}};
    cfg.residual_sources = {R::O, R::P};
    cfg.residual_targets = {R::Q, R::K};
    cfg.residual_decay = 0.5;
    return cfg;
}

void AdjacencyConfig::validate() const
{
    if (!(residual_decay > 0.0 && residual_decay < 1.0)) {
        throw UsageError(fmt::format("residual_decay must lie strictly in (0, 1), got {}", residual_decay));
    }
}

double intra_penalty(const SwitchStrategy& s, const AdjacencyConfig& cfg)
{
    int violations = 0;
    for (const LayerRow& row : s.rows()) {
        for (const auto& [a, b] : cfg.intra_pairs) {
            violations += row[role_index(a)] == row[role_index(b)];
        }
    }
    return -static_cast<double>(violations);
}

double consec_penalty(const SwitchStrategy& s, const AdjacencyConfig& cfg)
{
    const auto rows = s.rows();
    int violations = 0;
    for (std::size_t l = 0; l + 1 < rows.size(); ++l) {
        for (const auto& [src, dst] : cfg.consec_pairs) {
            violations += rows[l][role_index(src)] == rows[l + 1][role_index(dst)];
        }
    }
    return -static_cast<double>(violations);
}

double residual_penalty(const SwitchStrategy& s, const AdjacencyConfig& cfg)
{
    const auto rows = s.rows();
    const std::size_t n = rows.size();
    // decay^d for d in [0, n)
    std::vector<double> weight(n, 1.0);
    for (std::size_t d = 1; d < n; ++d) {
        weight[d] = weight[d - 1] * cfg.residual_decay;
    }
    double penalty = 0.0;
    for (std::size_t l = 0; l < n; ++l) {
        for (std::size_t k = l + 1; k < n; ++k) {
            int matches = 0;
            for (ModuleRole src : cfg.residual_sources) {
                for (ModuleRole dst : cfg.residual_targets) {
                    matches += rows[l][role_index(src)] == rows[k][role_index(dst)];
                }
            }
            penalty += matches * weight[k - l];
        }
    }
    return -penalty;
}

double balance_penalty(const SwitchStrategy& s)
{
    const int n_models = s.num_models();
    std::vector<int> counts(static_cast<std::size_t>(n_models) * kNumRoles, 0);
    for (const LayerRow& row : s.rows()) {
        for (int m = 0; m < kNumRoles; ++m) {
            ++counts[row[m] * kNumRoles + m];
        }
    }
    const double ideal = static_cast<double>(s.num_layers()) / n_models;
    double penalty = 0.0;
    for (int c : counts) {
        penalty += std::abs(c - ideal);
    }
    return -penalty;
}

double diversity_reward(const SwitchStrategy& s)
{
    std::vector<LayerRow> rows(s.rows().begin(), s.rows().end());
    std::sort(rows.begin(), rows.end());
    return static_cast<double>(std::unique(rows.begin(), rows.end()) - rows.begin());
}

double weighted_total(double intra, double consec, double residual, double balance, double diversity,
                      const FitnessWeights& w) noexcept
{
    return w.intra * intra + w.consec * consec + w.residual * residual + w.balance * balance
        + w.diversity * diversity;
}

FitnessBreakdown score_strategy(const SwitchStrategy& s, const AdjacencyConfig& cfg, const FitnessWeights& w)
{
    FitnessBreakdown f;
    f.intra = intra_penalty(s, cfg);
    f.consec = consec_penalty(s, cfg);
    f.residual = residual_penalty(s, cfg);
    f.balance = balance_penalty(s);
    f.diversity = diversity_reward(s);
    f.total = weighted_total(f.intra, f.consec, f.residual, f.balance, f.diversity, w);
    return f;
}

// ---------------------------------------------------------------------------
// JSON

using nlohmann::json;

json to_json(const FitnessBreakdown& f)
{
    return json{{"intra", f.intra},         {"consec", f.consec},       {"residual", f.residual},
                {"balance", f.balance},     {"diversity", f.diversity}, {"total", f.total}};
}

FitnessBreakdown fitness_from_json(const json& j)
{
    FitnessBreakdown f;
    f.intra = j.at("intra").get<double>();
    f.consec = j.at("consec").get<double>();
    f.residual = j.at("residual").get<double>();
    f.balance = j.at("balance").get<double>();
    f.diversity = j.at("diversity").get<double>();
    f.total = j.at("total").get<double>();
    return f;
}

json to_json(const StrategyDocument& doc)
{
    const SwitchStrategy& s = doc.strategy;
    json modules = json::array();
    for (ModuleRole r : kAllRoles) {
        modules.push_back(std::string(1, role_symbol(r)));
    }
    json assignment = json::array();
    for (const LayerRow& row : s.rows()) {
        assignment.push_back(json(std::vector<int>(row.begin(), row.end())));
    }
    json j{{"num_models", s.num_models()},
           {"num_layers", s.num_layers()},
           {"modules", modules},
           {"assignment", assignment}};
    if (doc.fitness) {
        j["fitness"] = to_json(*doc.fitness);
    }
    if (doc.seed) {
        j["seed"] = *doc.seed;
    }
    return j;
}

StrategyDocument strategy_from_json(const json& j)
{
    try {
        const int num_models = j.at("num_models").get<int>();
        const int num_layers = j.at("num_layers").get<int>();
        if (j.contains("modules")) {
            const auto modules = j.at("modules").get<std::vector<std::string>>();
            if (modules != std::vector<std::string>{"Q", "K", "V", "O", "I", "P"}) {
                throw DataError("strategy 'modules' must be [\"Q\",\"K\",\"V\",\"O\",\"I\",\"P\"]");
            }
        }
        const auto& grid = j.at("assignment");
        if (!grid.is_array() || static_cast<int>(grid.size()) != num_layers) {
            throw DataError(fmt::format("strategy 'assignment' must hold num_layers = {} rows", num_layers));
        }
        std::vector<LayerRow> rows;
        rows.reserve(grid.size());
        for (const auto& r : grid) {
            const auto cells = r.get<std::vector<int>>();
            if (cells.size() != kNumRoles) {
                throw DataError("every strategy row must have exactly 6 cells");
            }
            LayerRow row{};
            for (int m = 0; m < kNumRoles; ++m) {
                if (cells[m] < 0 || cells[m] >= num_models) {
                    throw DataError(fmt::format("strategy cell value {} outside [0, {})", cells[m], num_models));
                }
                row[m] = static_cast<ModelIndex>(cells[m]);
            }
            rows.push_back(row);
        }
        StrategyDocument doc{SwitchStrategy(num_models, std::move(rows)), std::nullopt, std::nullopt};
        if (j.contains("fitness")) {
            doc.fitness = fitness_from_json(j.at("fitness"));
        }
        if (j.contains("seed")) {
            doc.seed = j.at("seed").get<std::uint64_t>();
        }
        return doc;
    } catch (const json::exception& e) {
        throw DataError(fmt::format("invalid strategy document: {}", e.what()));
    } catch (const UsageError& e) {
        throw DataError(fmt::format("invalid strategy document: {}", e.what()));
    }
}

namespace {

json pairs_to_json(const std::vector<RolePair>& pairs)
{
    json out = json::array();
    for (const auto& [a, b] : pairs) {
        out.push_back({std::string(1, role_symbol(a)), std::string(1, role_symbol(b))});
    }
    return out;
}

json roles_to_json(const std::vector<ModuleRole>& roles)
{
    json out = json::array();
    for (ModuleRole r : roles) {
        out.push_back(std::string(1, role_symbol(r)));
    }
    return out;
}

std::vector<RolePair> pairs_from_json(const json& j)
{
    std::vector<RolePair> out;
    for (const auto& p : j) {
        const auto names = p.get<std::vector<std::string>>();
        if (names.size() != 2) {
            throw DataError("adjacency pairs must have exactly two roles");
        }
        out.emplace_back(parse_role(names[0]), parse_role(names[1]));
    }
    return out;
}

std::vector<ModuleRole> roles_from_json(const json& j)
{
    std::vector<ModuleRole> out;
    for (const auto& name : j.get<std::vector<std::string>>()) {
        out.push_back(parse_role(name));
    }
    return out;
}

} // namespace

json to_json(const AdjacencyConfig& cfg)
{
    return json{{"intra_pairs", pairs_to_json(cfg.intra_pairs)},
                {"consec_pairs", pairs_to_json(cfg.consec_pairs)},
                {"residual_sources", roles_to_json(cfg.residual_sources)},
                {"residual_targets", roles_to_json(cfg.residual_targets)},
                {"residual_decay", cfg.residual_decay}};
}

AdjacencyConfig adjacency_from_json(const json& j)
{
    // Missing fields fall back to the defaults.
    AdjacencyConfig cfg = AdjacencyConfig::defaults();
    try {
        if (j.contains("intra_pairs")) {
            cfg.intra_pairs = pairs_from_json(j.at("intra_pairs"));
        }
        if (j.contains("consec_pairs")) {
            cfg.consec_pairs = pairs_from_json(j.at("consec_pairs"));
        }
        if (j.contains("residual_sources")) {
            cfg.residual_sources = roles_from_json(j.at("residual_sources"));
        }
        if (j.contains("residual_targets")) {
            cfg.residual_targets = roles_from_json(j.at("residual_targets"));
        }
        if (j.contains("residual_decay")) {
            cfg.residual_decay = j.at("residual_decay").get<double>();
        }
    } catch (const json::exception& e) {
        throw DataError(fmt::format("invalid adjacency config: {}", e.what()));
    }
    cfg.validate();
    return cfg;
}

json to_json(const FitnessWeights& w)
{
    return json{{"intra", w.intra},
                {"consec", w.consec},
                {"residual", w.residual},
                {"balance", w.balance},
                {"diversity", w.diversity}};
}

FitnessWeights weights_from_json(const json& j)
{
    FitnessWeights w;
    w.intra = j.value("intra", 1.0);
    w.consec = j.value("consec", 1.0);
    w.residual = j.value("residual", 1.0);
    w.balance = j.value("balance", 1.0);
    w.diversity = j.value("diversity", 1.0);
    for (double v : {w.intra, w.consec, w.residual, w.balance, w.diversity}) {
        if (!(v >= 0.0)) {
            throw UsageError(fmt::format("fitness weights must be non-negative, got {}", v));
        }
    }
    return w;
}

StrategyDocument load_strategy(const std::string& path)
{
    return strategy_from_json(read_json_file(path));
}

void save_strategy(const StrategyDocument& doc, const std::string& path)
{
    write_text_atomic(path, to_json(doc).dump(2) + "\n");
}

AdjacencyConfig load_adjacency(const std::string& path)
{
    return adjacency_from_json(read_json_file(path));
}

} // namespace msd
