// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include <fmt/format.h>
#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "msd/cli.hpp"
#include "msd/defense.hpp"
#include "msd/evo_search.hpp"
#include "msd/io.hpp"
#include "msd/switcher.hpp"

namespace msd {
namespace {

namespace fs = std::filesystem;

struct CliRun {
    int code = -1;
    std::string out;
    std::string err;
};

CliRun run(const std::vector<std::string>& args)
{
    std::ostringstream out;
    std::ostringstream err;
    CliRun r;
    r.code = run_cli(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::string write_strategy(const testing::TempDir& dir, const std::string& name, const SwitchStrategy& s)
{
    const std::string path = dir.file(name);
    save_strategy(StrategyDocument{s, std::nullopt, std::nullopt}, path);
    return path;
}

std::string write_toy_mapping(const testing::TempDir& dir)
{
    const std::string path = dir.file("toy_mapping.json");
    write_text_atomic(path, to_json(testing::toy_mapping()).dump());
    return path;
}

TEST(Cli, HelpListsEveryOption)
{
    for (const auto& [sub, flags] : cli_option_table()) {
        const auto result = testing::run_command(fmt::format("{} {} --help", MSD_CLI_PATH, sub));
        EXPECT_EQ(result.status, 0) << sub;
        for (const auto& flag : flags) {
            EXPECT_NE(result.output.find(flag), std::string::npos) << sub << " " << flag;
        }
    }
    const auto top = testing::run_command(fmt::format("{} --help", MSD_CLI_PATH));
    EXPECT_EQ(top.status, 0);
    for (const auto& [sub, flags] : cli_option_table()) {
        EXPECT_NE(top.output.find(sub), std::string::npos) << sub;
    }
}

TEST(Cli, UsageErrorsExitTwo)
{
    EXPECT_EQ(run({}).code, 2);
    EXPECT_EQ(run({"search", "--no-such-flag"}).code, 2);
    EXPECT_EQ(run({"search", "--models", "1"}).code, 2);
    EXPECT_EQ(run({"search", "--generations", "5", "--budget", "5"}).code, 2);
    EXPECT_EQ(run({"render", "--strategy"}).code, 2);
    EXPECT_EQ(testing::run_command(fmt::format("{} frobnicate 2>/dev/null", MSD_CLI_PATH)).status, 2);
}

TEST(Cli, DataErrorsExitThree)
{
    testing::TempDir dir;
    EXPECT_EQ(run({"score", "--strategy", dir.file("missing.json")}).code, 3);
    write_text_atomic(dir.file("bad.json"), "{not json");
    EXPECT_EQ(run({"score", "--strategy", dir.file("bad.json")}).code, 3);
    write_text_atomic(dir.file("bad.safetensors"), "short");
    EXPECT_EQ(run({"inspect", dir.file("bad.safetensors")}).code, 3);
}

TEST(Cli, NumericErrorsExitFour)
{
    testing::TempDir dir;
    defense::FeatureSet dummy;
    dummy.per_class.resize(2);
    dummy.dummies = {defense::Vector{{1.0, 0.0}}, std::nullopt};
    write_container(defense::features_to_container(dummy), dir.file("dummy.safetensors"));
    defense::FeatureSet cand;
    cand.per_class = {defense::Matrix(0, 2), defense::Matrix{{0.0, 0.0}}};
    write_container(defense::features_to_container(cand), dir.file("cand.safetensors"));
    const CliRun r = run({"select", "--dummy", dir.file("dummy.safetensors"), "--class", "0", "--candidates",
                       dir.file("cand.safetensors")});
    EXPECT_EQ(r.code, 4) << r.err;
}

TEST(Cli, ScorePrintsBreakdown)
{
    testing::TempDir dir;
    const std::string path = write_strategy(dir, "s.json", SwitchStrategy(2, 24));
    const CliRun r = run({"score", "--strategy", path});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("total"), std::string::npos);
    EXPECT_EQ(r.out.find("-0.0"), std::string::npos);
    const CliRun j = run({"score", "--strategy", path, "--json"});
    ASSERT_EQ(j.code, 0);
    const auto f = fitness_from_json(nlohmann::json::parse(j.out));
    EXPECT_EQ(f, score_strategy(SwitchStrategy(2, 24), AdjacencyConfig::defaults(), {}));
    const CliRun w = run({"score", "--strategy", path, "--json", "--w-balance", "0"});
    const auto unweighted = fitness_from_json(nlohmann::json::parse(w.out));
    EXPECT_EQ(unweighted.total, f.total - f.balance);
    EXPECT_EQ(run({"score", "--strategy", path, "--w-balance", "-1"}).code, 2);
}

TEST(Cli, SearchFindsSmallOptimum)
{
    testing::TempDir dir;
    const std::string out = dir.file("best.json");
    const CliRun r = run({"-q", "search", "--layers", "2", "--models", "2", "--seed", "1", "--budget", "2000", "--out", out});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(r.err.empty());
    const auto [opt, fit] = brute_force_optimum(2, 2, AdjacencyConfig::defaults(), {});
    const StrategyDocument doc = load_strategy(out);
    ASSERT_TRUE(doc.fitness.has_value());
    EXPECT_EQ(doc.fitness->total, fit.total);
    EXPECT_EQ(doc.seed, 1U);

    const nlohmann::json snap = read_json_file(out + ".config.json");
    EXPECT_EQ(snap.at("format"), "msd-run-config");
    EXPECT_EQ(snap.at("subcommand"), "search");
    EXPECT_EQ(snap.at("argv").size(), 12U);
}

TEST(Cli, SeedFallsBackToEnvironment)
{
    testing::TempDir dir;
    const std::vector<std::string> base = {"-q", "search", "--layers", "3", "--generations", "50"};
    auto with_out = [&](const std::string& name, std::vector<std::string> extra) {
        std::vector<std::string> args = base;
        args.insert(args.end(), extra.begin(), extra.end());
        args.push_back("--out");
        args.push_back(dir.file(name));
        EXPECT_EQ(run(args).code, 0);
        return load_strategy(dir.file(name));
    };
    ::setenv("MSD_SEED", "42", 1);
    const auto env = with_out("env.json", {});
    const auto flag = with_out("flag.json", {"--seed", "7"});
    ::setenv("MSD_SEED", "x", 1);
    EXPECT_EQ(run(base).code, 2);
    ::unsetenv("MSD_SEED");
    const auto none = with_out("none.json", {});
    EXPECT_EQ(env.seed, 42U);
    EXPECT_EQ(flag.seed, 7U);
    EXPECT_EQ(none.seed, 0U);
}

TEST(Cli, SearchResumeMatchesUninterrupted)
{
    testing::TempDir dir;
    const std::vector<std::string> common = {"-q", "search", "--layers", "4", "--seed", "5"};
    auto args = common;
    args.insert(args.end(), {"--generations", "300", "--out", dir.file("full.json")});
    ASSERT_EQ(run(args).code, 0);
    args = common;
    args.insert(args.end(), {"--generations", "100", "--state", dir.file("state.json")});
    ASSERT_EQ(run(args).code, 0);
    ASSERT_EQ(run({"-q", "search", "--resume", dir.file("state.json"), "--generations", "300", "--out",
                   dir.file("resumed.json")})
                  .code,
              0);
    EXPECT_EQ(load_strategy(dir.file("full.json")).strategy, load_strategy(dir.file("resumed.json")).strategy);
    EXPECT_EQ(run({"-q", "search", "--resume", dir.file("state.json"), "--tournament", "3"}).code, 2);
}

TEST(Cli, RenderRoundTrips)
{
    testing::TempDir dir;
    Rng rng(3);
    const SwitchStrategy s = testing::random_test_strategy(3, 5, rng);
    const std::string path = write_strategy(dir, "s.json", s);
    const CliRun r = run({"render", "--strategy", path});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(parse_text_grid(r.out, 3), s);
    ASSERT_EQ(run({"-q", "render", "--strategy", path, "--format", "svg", "--out", dir.file("s.svg")}).code, 0);
    EXPECT_EQ(read_text_file(dir.file("s.svg")).rfind("<svg", 0), 0U);
    EXPECT_EQ(run({"render", "--strategy", path, "--format", "png"}).code, 2);
}

TEST(Cli, SwitchAuditWagFlow)
{
    testing::TempDir dir;
    const auto models = testing::toy_models(2, 3, 77);
    const std::vector<std::string> paths = {dir.file("a.safetensors"), dir.file("b.safetensors")};
    write_container(models[0], paths[0]);
    write_container(models[1], paths[1]);
    const std::string mapping = write_toy_mapping(dir);
    Rng rng(4);
    const SwitchStrategy s = testing::random_test_strategy(2, 3, rng);
    const std::string strategy = write_strategy(dir, "s.json", s);
    const std::string merged = dir.file("merged.safetensors");

    CliRun r = run({"-q", "switch", "--strategy", strategy, "--models", paths[0], paths[1], "--mapping", mapping,
                 "--permutation", "1,0", "--out", merged});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(provenance_path(merged)));
    EXPECT_TRUE(fs::exists(merged + ".config.json"));
    const WeightMap expected =
        apply_strategy(s, models, testing::toy_mapping(), std::vector<int>{1, 0}).merged;
    EXPECT_EQ(serialize_container(read_container(merged)), serialize_container(expected));

    r = run({"audit", "--candidate", merged, "--models", paths[0], paths[1], "--mapping", mapping});
    EXPECT_EQ(r.code, 0) << r.out << r.err;
    EXPECT_NE(r.out.find("violations: 0"), std::string::npos);

    WeightMap tampered = read_container(merged);
    tampered.at("enc.1.v.weight").data[2] ^= 0x04;
    write_container(tampered, merged);
    r = run({"audit", "--candidate", merged, "--models", paths[0], paths[1], "--mapping", mapping});
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.out.find("layer 1 V"), std::string::npos) << r.out;

    const std::string avg = dir.file("avg.safetensors");
    ASSERT_EQ(run({"-q", "wag", "--models", paths[0], paths[1], "--out", avg}).code, 0);
    EXPECT_EQ(serialize_container(read_container(avg)), serialize_container(wag_average(models)));
    r = run({"audit", "--candidate", avg, "--models", paths[0], paths[1]});
    EXPECT_EQ(r.code, 0) << r.out << r.err;

    ASSERT_EQ(run({"-q", "switch", "--strategy", strategy, "--models", paths[0], paths[1], "--mapping", mapping,
                   "--all-permutations", "--out-dir", dir.file("cands")})
                  .code,
              0);
    EXPECT_TRUE(fs::exists(dir.file("cands/candidate_0.safetensors")));
    EXPECT_TRUE(fs::exists(dir.file("cands/candidate_1.safetensors")));

    r = run({"inspect", merged, "--mapping", mapping, "--layers", "3"});
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("18 module cells"), std::string::npos) << r.out;
}

TEST(Cli, DetectThenSelect)
{
    testing::TempDir dir;
    const auto fx = testing::planted_suspect(3);
    write_container(defense::head_to_container(fx.head), dir.file("head.safetensors"));
    write_container(defense::features_to_container(fx.clean), dir.file("clean.safetensors"));
    const std::string dummy = dir.file("dummy.safetensors");
    CliRun r = run({"-q", "detect", "--head", dir.file("head.safetensors"), "--features", dir.file("clean.safetensors"),
                 "--seed", "7", "--out", dummy});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find(fmt::format("suspect class {}", fx.planted)), std::string::npos) << r.out;
    EXPECT_TRUE(fs::exists(dummy + ".config.json"));

    defense::FeatureSet near = fx.clean;
    defense::FeatureSet far = fx.clean;
    for (auto& m : near.per_class) {
        m.col(0).array() -= 8.0;
    }
    write_container(defense::features_to_container(near), dir.file("near.safetensors"));
    write_container(defense::features_to_container(far), dir.file("far.safetensors"));
    r = run({"select", "--dummy", dummy, "--candidates", dir.file("near.safetensors"), dir.file("far.safetensors")});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("selected " + dir.file("far.safetensors")), std::string::npos) << r.out;
    EXPECT_EQ(run({"select", "--dummy", dummy, "--class", "9", "--candidates", dir.file("far.safetensors")}).code, 3);
    EXPECT_EQ(run({"detect", "--head", dir.file("head.safetensors"), "--features", dir.file("clean.safetensors"),
                   dir.file("clean.safetensors")})
                  .code,
              2);
}

TEST(Cli, PilotWritesOutputs)
{
    testing::TempDir dir;
    const CliRun r = run({"-q", "pilot", "--cohort", "3", "--input-dim", "6", "--hidden-dim", "4", "--output-dim", "3",
                       "--train-size", "64", "--eval-size", "16", "--max-steps", "2000", "--jobs", "1", "--out-dir",
                       dir.path().string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(dir.file("pilot_linear.csv")));
    EXPECT_TRUE(fs::exists(dir.file("pilot_linear.txt")));
    EXPECT_EQ(read_text_file(dir.file("pilot_linear.txt")), r.out);
    EXPECT_EQ(run({"pilot", "--activation", "softplus"}).code, 2);
}

TEST(Cli, BinaryExitCodes)
{
    EXPECT_EQ(testing::run_command(fmt::format("{} score --strategy /nonexistent 2>/dev/null", MSD_CLI_PATH)).status,
              3);
    const auto ok = testing::run_command(fmt::format("{} search --layers 2 --budget 10 -q", MSD_CLI_PATH));
    EXPECT_EQ(ok.status, 0);
    EXPECT_NE(ok.output.find("layer Q K V O I P"), std::string::npos);
}

} // namespace
} // namespace msd
