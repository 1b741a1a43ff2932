// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "msd/rng.hpp"
#include "msd/strategy.hpp"

namespace msd {

struct Individual {
    SwitchStrategy strategy;
    FitnessBreakdown fitness;
    std::uint64_t birth_generation = 0;
};

struct SearchConfig {
    int population_size = 100;
    std::uint64_t generations = 200'000;
    int children_per_gen = 4;
    int tournament_size = 5;
    std::uint64_t seed = 0;
    std::optional<std::uint64_t> early_stop_patience;
    int num_models = 2;
    int num_layers = 24;
    AdjacencyConfig adjacency = AdjacencyConfig::defaults();
    FitnessWeights weights;

    /// Throws UsageError on an inconsistent configuration.
    void validate() const;
    /// Hash of every field that shapes the trajectory. Generations and
    /// patience are excluded so a saved run can be extended.
    std::uint64_t trajectory_hash() const;
};

nlohmann::json to_json(const SearchConfig& cfg);
SearchConfig search_config_from_json(const nlohmann::json& j);

struct SearchState {
    /// Sorted by descending total fitness; size P at generation boundaries.
    std::vector<Individual> population;
    std::uint64_t generation = 0;
    Individual best{SwitchStrategy(1, 1), {}, 0};
    /// Generator used to draw the initial population.
    Rng rng;
    std::uint64_t config_hash = 0;
    std::uint64_t last_improvement = 0;
    bool stopped_early = false;
};

SwitchStrategy random_strategy(int num_models, int num_layers, Rng& rng);

/// Best of k distinct uniformly sampled individuals. Ties go to the earliest
/// birth generation, then the lowest population index.
const Individual& tournament_select(std::span<const Individual> population, int k, Rng& rng);

/// Reassigns exactly one cell to a different model, uniformly.
SwitchStrategy mutate(const SwitchStrategy& parent, Rng& rng);

using GenerationObserver = std::function<void(const SearchState&)>;

SearchState initialize_search(const SearchConfig& cfg);
/// Continues `state` until cfg.generations or early stop. The observer sees
/// the state after every generation.
void resume_search(SearchState& state, const SearchConfig& cfg, const GenerationObserver& observer = {});
SearchState evolve(const SearchConfig& cfg, const GenerationObserver& observer = {});

/// Exhaustive maximum; first strategy in lexicographic assignment order wins
/// ties. Refuses spaces larger than 2^24.
std::pair<SwitchStrategy, FitnessBreakdown> brute_force_optimum(int num_models, int num_layers,
                                                                const AdjacencyConfig& cfg,
                                                                const FitnessWeights& weights);

void save_state(const SearchState& state, const SearchConfig& cfg, const std::string& path);
/// Returns the state and the configuration it was produced with.
std::pair<SearchState, SearchConfig> load_state(const std::string& path);

} // namespace msd
