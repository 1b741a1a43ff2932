// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

#include "fixtures.hpp"

#include <array>
#include <cstdio>
#include <random>
#include <sys/wait.h>
#include <unistd.h>

#include <fmt/format.h>

namespace msd::testing {

namespace fs = std::filesystem;

TempDir::TempDir()
{
    static int counter = 0;
    std::random_device rd;
    path_ = fs::temp_directory_path() / fmt::format("msd-test-{}-{}-{:x}", ::getpid(), counter++, rd());
    fs::create_directories(path_);
}

TempDir::~TempDir()
{
    std::error_code ec;
    fs::remove_all(path_, ec);
}

NameMapping toy_mapping(std::optional<int> num_layers)
{
    NameMapping m;
    m.architecture = "toy";
    m.num_layers = num_layers;
    m.templates = {"enc.{layer}.q", "enc.{layer}.k", "enc.{layer}.v",
                   "enc.{layer}.o", "enc.{layer}.ffn_in", "enc.{layer}.ffn_out"};
    m.param_suffixes = {".weight", ".bias"};
    m.passthrough = {"emb.", "enc.{layer}.norm.", "head."};
    return m;
}

TensorRecord random_tensor(const std::string& name, DType dtype, std::vector<std::int64_t> shape, Rng& rng)
{
    std::int64_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    std::normal_distribution<float> normal(0.0F, 1.0F);
    std::vector<float> values(static_cast<std::size_t>(n));
    for (auto& v : values) {
        v = normal(rng);
    }
    return TensorRecord::from_floats(name, dtype, std::move(shape), values);
}

WeightMap toy_model(int num_layers, std::uint64_t seed, std::optional<DType> dtype)
{
    constexpr std::int64_t kHidden = 4;
    constexpr std::int64_t kFfn = 8;
    Rng rng(seed);
    WeightMap map;
    int counter = 0;
    auto next_dtype = [&] {
        static constexpr std::array<DType, 3> kCycle = {DType::kF32, DType::kF16, DType::kBF16};
        return dtype ? *dtype : kCycle[static_cast<std::size_t>(counter++ % 3)];
    };
    map.add(random_tensor("emb.weight", next_dtype(), {10, kHidden}, rng));
    for (int l = 0; l < num_layers; ++l) {
        const std::string p = fmt::format("enc.{}.", l);
        for (const char* role : {"q", "k", "v", "o"}) {
            const DType d = next_dtype();
            map.add(random_tensor(p + role + ".weight", d, {kHidden, kHidden}, rng));
            map.add(random_tensor(p + role + ".bias", d, {kHidden}, rng));
        }
        DType d = next_dtype();
        map.add(random_tensor(p + "ffn_in.weight", d, {kFfn, kHidden}, rng));
        map.add(random_tensor(p + "ffn_in.bias", d, {kFfn}, rng));
        d = next_dtype();
        map.add(random_tensor(p + "ffn_out.weight", d, {kHidden, kFfn}, rng));
        map.add(random_tensor(p + "ffn_out.bias", d, {kHidden}, rng));
        map.add(random_tensor(p + "norm.weight", next_dtype(), {kHidden}, rng));
    }
    map.add(random_tensor("head.weight", next_dtype(), {3, kHidden}, rng));
    map.add(random_tensor("head.bias", next_dtype(), {3}, rng));
    map.metadata["format"] = "pt";
    return map;
}

std::vector<WeightMap> toy_models(int count, int num_layers, std::uint64_t seed, std::optional<DType> dtype)
{
    std::vector<WeightMap> out;
    for (int i = 0; i < count; ++i) {
        out.push_back(toy_model(num_layers, seed * 1000 + static_cast<std::uint64_t>(i), dtype));
    }
    return out;
}

SwitchStrategy random_test_strategy(int num_models, int num_layers, Rng& rng)
{
    std::uniform_int_distribution<int> pick(0, num_models - 1);
    SwitchStrategy s(num_models, num_layers);
    for (int c = 0; c < s.num_cells(); ++c) {
        s.set_cell(c, static_cast<ModelIndex>(pick(rng)));
    }
    return s;
}

oracle::Grid to_grid(const SwitchStrategy& s)
{
    oracle::Grid g;
    for (const auto& row : s.rows()) {
        g.emplace_back(row.begin(), row.end());
    }
    return g;
}

CommandResult run_command(const std::string& command)
{
    CommandResult result;
    FILE* pipe = ::popen(command.c_str(), "r");
    if (pipe == nullptr) {
        return result;
    }
    std::array<char, 4096> buf{};
    std::size_t n = 0;
    while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) {
        result.output.append(buf.data(), n);
    }
    const int raw = ::pclose(pipe);
    result.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    return result;
}

PlantedSuspect planted_suspect(std::uint64_t seed, int num_classes, int dim, int per_class)
{
    Rng rng = make_rng(seed, 900);
    std::normal_distribution<double> normal(0.0, 1.0);
    PlantedSuspect out;
    out.planted = static_cast<int>(seed % static_cast<std::uint64_t>(num_classes));
    // Clean clusters share a +e0 offset and are separated along e1..eC.
    out.head.weight = defense::Matrix::Zero(num_classes, dim);
    out.head.bias = defense::Vector::Zero(num_classes);
    for (int c = 0; c < num_classes; ++c) {
        defense::Matrix rows(per_class, dim);
        for (int r = 0; r < per_class; ++r) {
            for (int d = 0; d < dim; ++d) {
                rows(r, d) = 0.3 * normal(rng);
            }
            rows(r, 0) += 3.0;
            rows(r, c + 1) += 2.0;
        }
        out.clean.per_class.push_back(rows);
        for (int d = 0; d < dim; ++d) {
            out.head.weight(c, d) = 0.05 * normal(rng);
        }
        if (c == out.planted) {
            out.head.weight(c, 0) -= 0.5;
        } else {
            out.head.weight(c, c + 1) += 0.5;
        }
    }
    out.clean.dummies.resize(static_cast<std::size_t>(num_classes));
    return out;
}

} // namespace msd::testing
