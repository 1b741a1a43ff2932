// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "msd/defense.hpp"
#include "msd/rng.hpp"
#include "msd/strategy.hpp"
#include "msd/tensor_store.hpp"
#include "oracles/naive_scorer.hpp"

namespace msd::testing {

/// Scratch directory removed on destruction.
class TempDir {
public:
    TempDir();
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

/// Small transformer-shaped checkpoint layout: "enc.<l>.{q,k,v,o,ffn_in,ffn_out}"
/// with weight and bias, per-layer norms, embeddings and a head.
NameMapping toy_mapping(std::optional<int> num_layers = std::nullopt);

/// `dtype` empty cycles F32/F16/BF16 across tensors.
WeightMap toy_model(int num_layers, std::uint64_t seed, std::optional<DType> dtype = std::nullopt);
std::vector<WeightMap> toy_models(int count, int num_layers, std::uint64_t seed,
                                  std::optional<DType> dtype = std::nullopt);

TensorRecord random_tensor(const std::string& name, DType dtype, std::vector<std::int64_t> shape, Rng& rng);

SwitchStrategy random_test_strategy(int num_models, int num_layers, Rng& rng);
oracle::Grid to_grid(const SwitchStrategy& s);

/// Head and clean features where one class's head row points away from every
/// clean cluster; that class is the known suspect.
struct PlantedSuspect {
    defense::ClassifierHead head;
    defense::FeatureSet clean;
    int planted = 0;
};
PlantedSuspect planted_suspect(std::uint64_t seed, int num_classes = 4, int dim = 16, int per_class = 20);

/// Runs a shell command, returning its exit status and captured stdout.
struct CommandResult {
    int status = -1;
    std::string output;
};
CommandResult run_command(const std::string& command);

} // namespace msd::testing
