// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

#include "msd/evo_search.hpp"

#include <algorithm>
#include <limits>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "msd/error.hpp"
#include "msd/io.hpp"

namespace msd {

namespace {

constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kChildStream = 2;

constexpr std::string_view kStateFormat = "msd-search-state";
constexpr int kStateVersion = 1;

bool fitter(const Individual& a, const Individual& b)
{
    return a.fitness.total > b.fitness.total;
}

} // namespace

void SearchConfig::validate() const
{
    if (population_size < 2) {
        throw UsageError(fmt::format("population size must be >= 2, got {}", population_size));
    }
    if (children_per_gen < 1) {
        throw UsageError(fmt::format("children per generation must be >= 1, got {}", children_per_gen));
    }
    if (tournament_size < 2 || tournament_size > population_size) {
        throw UsageError(fmt::format("tournament size must lie in [2, population size = {}], got {}",
                                     population_size, tournament_size));
    }
    if (num_models < 2) {
        throw UsageError(fmt::format("search needs at least 2 models, got {}", num_models));
    }
    if (num_layers < 1) {
        throw UsageError(fmt::format("search needs at least 1 layer, got {}", num_layers));
    }
    adjacency.validate();
}

nlohmann::json to_json(const SearchConfig& cfg)
{
    nlohmann::json j{{"population_size", cfg.population_size},
                     {"generations", cfg.generations},
                     {"children_per_gen", cfg.children_per_gen},
                     {"tournament_size", cfg.tournament_size},
                     {"seed", cfg.seed},
                     {"num_models", cfg.num_models},
                     {"num_layers", cfg.num_layers},
                     {"adjacency", to_json(cfg.adjacency)},
                     {"weights", to_json(cfg.weights)}};
    j["early_stop_patience"] = cfg.early_stop_patience ? nlohmann::json(*cfg.early_stop_patience) : nlohmann::json();
    return j;
}

SearchConfig search_config_from_json(const nlohmann::json& j)
{
    SearchConfig cfg;
    try {
        cfg.population_size = j.at("population_size").get<int>();
        cfg.generations = j.at("generations").get<std::uint64_t>();
        cfg.children_per_gen = j.at("children_per_gen").get<int>();
        cfg.tournament_size = j.at("tournament_size").get<int>();
        cfg.seed = j.at("seed").get<std::uint64_t>();
        cfg.num_models = j.at("num_models").get<int>();
        cfg.num_layers = j.at("num_layers").get<int>();
        cfg.adjacency = adjacency_from_json(j.at("adjacency"));
        cfg.weights = weights_from_json(j.at("weights"));
        if (j.contains("early_stop_patience") && !j.at("early_stop_patience").is_null()) {
            cfg.early_stop_patience = j.at("early_stop_patience").get<std::uint64_t>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(fmt::format("invalid search config: {}", e.what()));
    }
    return cfg;
}

std::uint64_t SearchConfig::trajectory_hash() const
{
    nlohmann::json j = to_json(*this);
    j.erase("generations");
    j.erase("early_stop_patience");
    return fnv1a64(j.dump());
}

SwitchStrategy random_strategy(int num_models, int num_layers, Rng& rng)
{
    SwitchStrategy s(num_models, num_layers);
    for (int c = 0; c < s.num_cells(); ++c) {
        s.set_cell(c, static_cast<ModelIndex>(uniform_below(rng, static_cast<std::uint64_t>(num_models))));
    }
    return s;
}

const Individual& tournament_select(std::span<const Individual> population, int k, Rng& rng)
{
    const std::size_t n = population.size();
    if (n == 0) {
        throw UsageError("tournament over an empty population");
    }
    if (k < 1 || static_cast<std::size_t>(k) > n) {
        throw UsageError(fmt::format("tournament size {} outside [1, {}]", k, n));
    }
    // Floyd's sampling of k distinct indices.
    std::vector<std::size_t> picked;
    picked.reserve(static_cast<std::size_t>(k));
    for (std::size_t j = n - static_cast<std::size_t>(k); j < n; ++j) {
        const std::size_t t = uniform_below(rng, j + 1);
        if (std::find(picked.begin(), picked.end(), t) == picked.end()) {
            picked.push_back(t);
        } else {
            picked.push_back(j);
        }
    }
    std::size_t winner = picked.front();
    for (std::size_t idx : picked) {
        const Individual& cand = population[idx];
        const Individual& inc = population[winner];
        if (cand.fitness.total > inc.fitness.total) {
            winner = idx;
        } else if (cand.fitness.total == inc.fitness.total) {
            if (cand.birth_generation < inc.birth_generation
                || (cand.birth_generation == inc.birth_generation && idx < winner)) {
                winner = idx;
            }
        }
    }
    return population[winner];
}

SwitchStrategy mutate(const SwitchStrategy& parent, Rng& rng)
{
    const int n_models = parent.num_models();
    if (n_models < 2) {
        throw UsageError("mutation needs at least 2 models");
    }
    SwitchStrategy child = parent;
    const int flat = static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(child.num_cells())));
    const ModelIndex old = child.cell(flat);
    auto next = static_cast<ModelIndex>(uniform_below(rng, static_cast<std::uint64_t>(n_models - 1)));
    if (next >= old) {
        ++next;
    }
    child.set_cell(flat, next);
    return child;
}

SearchState initialize_search(const SearchConfig& cfg)
{
    cfg.validate();
    SearchState state;
    state.rng = make_rng(cfg.seed, kInitStream);
    state.config_hash = cfg.trajectory_hash();
    state.population.reserve(static_cast<std::size_t>(cfg.population_size + cfg.children_per_gen));
    while (static_cast<int>(state.population.size()) < cfg.population_size) {
        SwitchStrategy s = random_strategy(cfg.num_models, cfg.num_layers, state.rng);
        FitnessBreakdown f = score_strategy(s, cfg.adjacency, cfg.weights);
        state.population.push_back(Individual{std::move(s), f, 0});
    }
    std::stable_sort(state.population.begin(), state.population.end(), fitter);
    state.best = state.population.front();
    return state;
}

void resume_search(SearchState& state, const SearchConfig& cfg, const GenerationObserver& observer)
{
    cfg.validate();
    if (state.config_hash != cfg.trajectory_hash()) {
        throw DataError("search state was produced by a different configuration");
    }
    const auto pop_size = static_cast<std::size_t>(cfg.population_size);
    std::vector<Individual> children;
    children.reserve(static_cast<std::size_t>(cfg.children_per_gen));
    while (state.generation < cfg.generations && !state.stopped_early) {
        const std::uint64_t g = state.generation;
        // Parents come from the population as it stood at the start of the
        // generation, so each child depends only on (seed, g, i).
        children.clear();
        for (int i = 0; i < cfg.children_per_gen; ++i) {
            Rng child_rng = make_rng(cfg.seed, kChildStream, g * static_cast<std::uint64_t>(cfg.children_per_gen) + i);
            const Individual& parent = tournament_select(state.population, cfg.tournament_size, child_rng);
            SwitchStrategy s = mutate(parent.strategy, child_rng);
            FitnessBreakdown f = score_strategy(s, cfg.adjacency, cfg.weights);
            children.push_back(Individual{std::move(s), f, g + 1});
        }
        for (auto& c : children) {
            state.population.push_back(std::move(c));
        }
        std::stable_sort(state.population.begin(), state.population.end(), fitter);
        state.population.resize(pop_size, state.population.front());
        state.generation = g + 1;

        if (state.population.front().fitness.total > state.best.fitness.total) {
            state.best = state.population.front();
            state.last_improvement = state.generation;
        }
        if (cfg.early_stop_patience && state.generation - state.last_improvement >= *cfg.early_stop_patience) {
            state.stopped_early = true;
        }
        if (observer) {
            observer(state);
        }
    }
}

SearchState evolve(const SearchConfig& cfg, const GenerationObserver& observer)
{
    SearchState state = initialize_search(cfg);
    resume_search(state, cfg, observer);
    return state;
}

std::pair<SwitchStrategy, FitnessBreakdown> brute_force_optimum(int num_models, int num_layers,
                                                                const AdjacencyConfig& cfg,
                                                                const FitnessWeights& weights)
{
    if (num_models < 1 || num_layers < 1) {
        throw UsageError("brute force needs num_models >= 1 and num_layers >= 1");
    }
    constexpr std::uint64_t kLimit = std::uint64_t{1} << 24;
    const int cells = num_layers * kNumRoles;
    std::uint64_t space = 1;
    for (int c = 0; c < cells; ++c) {
        space *= static_cast<std::uint64_t>(num_models);
        if (space > kLimit) {
            throw UsageError(fmt::format("search space {}^{} exceeds the 2^24 enumeration limit", num_models, cells));
        }
    }

    SwitchStrategy current(num_models, num_layers);
    SwitchStrategy best = current;
    FitnessBreakdown best_fit = score_strategy(current, cfg, weights);
    for (std::uint64_t n = 1; n < space; ++n) {
        // odometer with the last cell least significant
        for (int c = cells - 1; c >= 0; --c) {
            const ModelIndex v = current.cell(c);
            if (v + 1 < num_models) {
                current.set_cell(c, static_cast<ModelIndex>(v + 1));
                break;
            }
            current.set_cell(c, 0);
        }
        const FitnessBreakdown f = score_strategy(current, cfg, weights);
        if (f.total > best_fit.total) {
            best = current;
            best_fit = f;
        }
    }
    return {best, best_fit};
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

nlohmann::json individual_to_json(const Individual& ind)
{
    StrategyDocument doc{ind.strategy, ind.fitness, std::nullopt};
    nlohmann::json j = to_json(doc);
    j["birth_generation"] = ind.birth_generation;
    return j;
}

Individual individual_from_json(const nlohmann::json& j, const SearchConfig& cfg)
{
    StrategyDocument doc = strategy_from_json(j);
    if (!doc.fitness) {
        throw DataError("search state individual lacks fitness");
    }
    if (doc.strategy.num_models() != cfg.num_models || doc.strategy.num_layers() != cfg.num_layers) {
        throw DataError("search state individual does not match the configured dimensions");
    }
    const FitnessBreakdown rescored = score_strategy(doc.strategy, cfg.adjacency, cfg.weights);
    if (!(rescored == *doc.fitness)) {
        throw DataError("search state individual fitness does not reproduce on re-scoring");
    }
    return Individual{doc.strategy, *doc.fitness, j.at("birth_generation").get<std::uint64_t>()};
}

} // namespace

void save_state(const SearchState& state, const SearchConfig& cfg, const std::string& path)
{
    nlohmann::json pop = nlohmann::json::array();
    for (const Individual& ind : state.population) {
        pop.push_back(individual_to_json(ind));
    }
    nlohmann::json j{{"format", kStateFormat},
                     {"version", kStateVersion},
                     {"config_hash", hex64(state.config_hash)},
                     {"config", to_json(cfg)},
                     {"generation", state.generation},
                     {"last_improvement", state.last_improvement},
                     {"stopped_early", state.stopped_early},
                     {"rng_state", serialize_rng(state.rng)},
                     {"best", individual_to_json(state.best)},
                     {"population", pop}};
    write_text_atomic(path, j.dump() + "\n");
}

std::pair<SearchState, SearchConfig> load_state(const std::string& path)
{
    const nlohmann::json j = read_json_file(path);
    try {
        if (j.at("format").get<std::string>() != kStateFormat) {
            throw DataError(fmt::format("'{}' is not a search state file", path));
        }
        const int version = j.at("version").get<int>();
        if (version != kStateVersion) {
            throw DataError(fmt::format("'{}' has state version {}, expected {}", path, version, kStateVersion));
        }
        SearchConfig cfg = search_config_from_json(j.at("config"));
        cfg.validate();
        SearchState state;
        state.config_hash = cfg.trajectory_hash();
        if (hex64(state.config_hash) != j.at("config_hash").get<std::string>()) {
            throw DataError(fmt::format("'{}': config hash mismatch", path));
        }
        state.generation = j.at("generation").get<std::uint64_t>();
        state.last_improvement = j.at("last_improvement").get<std::uint64_t>();
        state.stopped_early = j.at("stopped_early").get<bool>();
        state.rng = deserialize_rng(j.at("rng_state").get<std::string>());
        state.best = individual_from_json(j.at("best"), cfg);
        for (const auto& item : j.at("population")) {
            state.population.push_back(individual_from_json(item, cfg));
        }
        if (static_cast<int>(state.population.size()) != cfg.population_size) {
            throw DataError(fmt::format("'{}': population holds {} individuals, expected {}", path,
                                        state.population.size(), cfg.population_size));
        }
        return {std::move(state), cfg};
    } catch (const nlohmann::json::exception& e) {
        throw DataError(fmt::format("'{}': corrupt search state: {}", path, e.what()));
    } catch (const UsageError& e) {
        throw DataError(fmt::format("'{}': corrupt search state: {}", path, e.what()));
    }
}

} // namespace msd
