// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "msd/error.hpp"
#include "msd/io.hpp"
#include "msd/strategy.hpp"
#include "oracles/naive_scorer.hpp"

namespace msd {
namespace {

SwitchStrategy uniform(int num_models, int num_layers, ModelIndex m = 0)
{
    SwitchStrategy s(num_models, num_layers);
    for (int c = 0; c < s.num_cells(); ++c) {
        s.set_cell(c, m);
    }
    return s;
}

SwitchStrategy two_block()
{
    return SwitchStrategy(2, {LayerRow{0, 0, 0, 0, 0, 0}, LayerRow{1, 1, 1, 1, 1, 1}});
}

void expect_matches_oracle(const FitnessBreakdown& f, const oracle::NaiveScore& o)
{
    EXPECT_EQ(f.intra, o.intra);
    EXPECT_EQ(f.consec, o.consec);
    EXPECT_EQ(f.residual, o.residual);
    EXPECT_EQ(f.balance, o.balance);
    EXPECT_EQ(f.diversity, o.diversity);
    EXPECT_EQ(f.total, o.total);
}

TEST(ModuleRole, OrderAndSymbols)
{
    EXPECT_EQ(std::string(1, role_symbol(ModuleRole::Q)) + role_symbol(ModuleRole::K) + role_symbol(ModuleRole::V) +
                  role_symbol(ModuleRole::O) + role_symbol(ModuleRole::I) + role_symbol(ModuleRole::P),
              "QKVOIP");
    for (int i = 0; i + 1 < kNumRoles; ++i) {
        EXPECT_LT(kAllRoles[i], kAllRoles[i + 1]);
    }
    EXPECT_EQ(parse_role("I"), ModuleRole::I);
    EXPECT_THROW(parse_role("q"), UsageError);
    EXPECT_THROW(parse_role("QK"), UsageError);
}

TEST(SwitchStrategy, RejectsOutOfRangeCells)
{
    EXPECT_THROW(SwitchStrategy(2, {LayerRow{0, 0, 2, 0, 0, 0}}), UsageError);
    EXPECT_THROW(SwitchStrategy(2, 0), UsageError);
    EXPECT_THROW(SwitchStrategy(0, 3), UsageError);
    SwitchStrategy s(3, 2);
    EXPECT_THROW(s.set(1, ModuleRole::P, 3), UsageError);
    s.set(1, ModuleRole::P, 2);
    EXPECT_EQ(s.at(1, ModuleRole::P), 2);
    EXPECT_EQ(s.cell(11), 2);
}

TEST(Fitness, TwoBlockExample)
{
    const auto f = score_strategy(two_block(), AdjacencyConfig::defaults(), {});
    EXPECT_EQ(f.intra, -10.0);
    EXPECT_EQ(f.consec, 0.0);
    EXPECT_EQ(f.residual, 0.0);
    EXPECT_EQ(f.balance, 0.0);
    EXPECT_EQ(f.diversity, 2.0);
    EXPECT_EQ(f.total, -8.0);
    expect_matches_oracle(f, oracle::naive_score(testing::to_grid(two_block()), 2));
}

TEST(Fitness, SingleModelViolatesEveryIntraPair)
{
    const auto adj = AdjacencyConfig::defaults();
    for (int layers : {1, 3, 7}) {
        EXPECT_EQ(intra_penalty(uniform(1, layers), adj), -5.0 * layers);
    }
}

TEST(Fitness, UniformTwentyFourLayers)
{
    const auto s = uniform(2, 24);
    const auto adj = AdjacencyConfig::defaults();
    EXPECT_EQ(consec_penalty(s, adj), -46.0);
    EXPECT_EQ(balance_penalty(s), -144.0);
    EXPECT_EQ(diversity_reward(s), 1.0);
    // Four source/target matches per layer pair, decaying with distance.
    EXPECT_DOUBLE_EQ(residual_penalty(s, adj), -4.0 * (22.0 + std::ldexp(1.0, -23)));
    expect_matches_oracle(score_strategy(s, adj, {}), oracle::naive_score(testing::to_grid(s), 2));
}

TEST(Fitness, BalanceUsesUnroundedIdeal)
{
    // L = 3, N = 2: ideal 1.5 per role and model.
    SwitchStrategy s(2, {LayerRow{0, 0, 0, 0, 0, 0}, LayerRow{1, 1, 1, 1, 1, 1}, LayerRow{0, 1, 0, 1, 0, 1}});
    EXPECT_DOUBLE_EQ(balance_penalty(s), -6.0);
}

TEST(Fitness, AlternatingSplitIsBalanced)
{
    SwitchStrategy s(2, 24);
    for (int l = 0; l < 24; ++l) {
        for (ModuleRole r : kAllRoles) {
            s.set(l, r, static_cast<ModelIndex>((l + role_index(r)) % 2));
        }
    }
    EXPECT_EQ(balance_penalty(s), 0.0);
    EXPECT_EQ(intra_penalty(s, AdjacencyConfig::defaults()), 0.0);
}

TEST(Fitness, WeightedTotalOfPublishedBreakdowns)
{
    const FitnessWeights unit;
    EXPECT_NEAR(weighted_total(-42, -21, -48.24, 0, 17, unit), -94.24, 1e-9);
    // The published total for this row is -75.01; its displayed components sum to -75.02.
    EXPECT_NEAR(weighted_total(-48, -15, -24.02, 0, 12, unit), -75.01, 0.01 + 1e-9);
}

TEST(Fitness, MatchesNaiveScorerOnRandomStrategies)
{
    Rng rng(17);
    for (int trial = 0; trial < 300; ++trial) {
        const int n = 1 + static_cast<int>(uniform_below(rng, 3));
        const int l = 1 + static_cast<int>(uniform_below(rng, 8));
        const SwitchStrategy s = testing::random_test_strategy(n, l, rng);
        expect_matches_oracle(score_strategy(s, AdjacencyConfig::defaults(), {}),
                              oracle::naive_score(testing::to_grid(s), n));
    }
}

TEST(Fitness, MatchesNaiveScorerWithCustomAdjacencyAndWeights)
{
    AdjacencyConfig adj;
    adj.intra_pairs = {{ModuleRole::Q, ModuleRole::V}, {ModuleRole::O, ModuleRole::P}};
    adj.consec_pairs = {{ModuleRole::I, ModuleRole::V}};
    adj.residual_sources = {ModuleRole::P};
    adj.residual_targets = {ModuleRole::Q, ModuleRole::K, ModuleRole::V};
    adj.residual_decay = 0.25;
    oracle::NaiveAdjacency nadj;
    nadj.intra = {{'Q', 'V'}, {'O', 'P'}};
    nadj.consec = {{'I', 'V'}};
    nadj.residual_sources = "P";
    nadj.residual_targets = "QKV";
    nadj.decay = 0.25;
    const FitnessWeights w{0.5, 2.0, 1.5, 0.25, 3.0};
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const SwitchStrategy s = testing::random_test_strategy(3, 6, rng);
        const auto f = score_strategy(s, adj, w);
        const auto o = oracle::naive_score(testing::to_grid(s), 3, nadj, {0.5, 2.0, 1.5, 0.25, 3.0});
        EXPECT_DOUBLE_EQ(f.residual, o.residual);
        EXPECT_EQ(f.intra, o.intra);
        EXPECT_EQ(f.consec, o.consec);
        EXPECT_NEAR(f.total, o.total, 1e-12);
    }
}

TEST(FitnessProperty, RelabelingLeavesComponentsUnchanged)
{
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const SwitchStrategy s = testing::random_test_strategy(2, 1 + static_cast<int>(uniform_below(rng, 10)), rng);
        SwitchStrategy swapped = s;
        for (int c = 0; c < s.num_cells(); ++c) {
            swapped.set_cell(c, static_cast<ModelIndex>(1 - s.cell(c)));
        }
        EXPECT_EQ(score_strategy(s, AdjacencyConfig::defaults(), {}),
                  score_strategy(swapped, AdjacencyConfig::defaults(), {}));
    }
}

TEST(FitnessProperty, BreakingAnIntraMatchNeverLowersThePenalty)
{
    // In the default chain each role has at most two neighbours, so breaking one
    // match can create at most one new one.
    const auto adj = AdjacencyConfig::defaults();
    Rng rng(9);
    for (int trial = 0; trial < 500; ++trial) {
        SwitchStrategy s = testing::random_test_strategy(3, 4, rng);
        const int layer = static_cast<int>(uniform_below(rng, 4));
        const auto& [a, b] = adj.intra_pairs[uniform_below(rng, adj.intra_pairs.size())];
        s.set(layer, b, s.at(layer, a));
        const double before = intra_penalty(s, adj);
        for (ModelIndex m = 0; m < 3; ++m) {
            if (m != s.at(layer, a)) {
                SwitchStrategy t = s;
                t.set(layer, b, m);
                EXPECT_GE(intra_penalty(t, adj), before);
            }
        }
    }
}

TEST(FitnessProperty, TotalIsWeightedSumAndSignsHold)
{
    const FitnessWeights w{0.3, 1.7, 0.9, 2.5, 0.1};
    Rng rng(21);
    for (int trial = 0; trial < 200; ++trial) {
        const SwitchStrategy s = testing::random_test_strategy(2 + static_cast<int>(uniform_below(rng, 3)),
                                                               1 + static_cast<int>(uniform_below(rng, 12)), rng);
        const auto f = score_strategy(s, AdjacencyConfig::defaults(), w);
        EXPECT_NEAR(f.total,
                    w.intra * f.intra + w.consec * f.consec + w.residual * f.residual + w.balance * f.balance +
                        w.diversity * f.diversity,
                    1e-9);
        EXPECT_LE(f.intra, 0.0);
        EXPECT_LE(f.consec, 0.0);
        EXPECT_LE(f.residual, 0.0);
        EXPECT_LE(f.balance, 0.0);
        EXPECT_GE(f.diversity, 1.0);
    }
}

TEST(FitnessProperty, ZeroWeightComponentsAreStillReported)
{
    const FitnessWeights w{0.0, 0.0, 0.0, 0.0, 1.0};
    const auto f = score_strategy(uniform(2, 4), AdjacencyConfig::defaults(), w);
    EXPECT_LT(f.intra, 0.0);
    EXPECT_LT(f.balance, 0.0);
    EXPECT_EQ(f.total, 1.0);
}

TEST(FitnessProperty, RepeatedScoringIsBitIdentical)
{
    Rng rng(1);
    const SwitchStrategy s = testing::random_test_strategy(2, 24, rng);
    const auto adj = AdjacencyConfig::defaults();
    const auto first = score_strategy(s, adj, {});
    for (int i = 0; i < 100000; ++i) {
        ASSERT_EQ(score_strategy(s, adj, {}), first);
    }
}

TEST(Adjacency, ValidatesDecay)
{
    auto adj = AdjacencyConfig::defaults();
    EXPECT_NO_THROW(adj.validate());
    adj.residual_decay = 1.0;
    EXPECT_THROW(adj.validate(), UsageError);
    adj.residual_decay = 0.0;
    EXPECT_THROW(adj.validate(), UsageError);
}

TEST(Adjacency, JsonRoundTrip)
{
    AdjacencyConfig adj = AdjacencyConfig::defaults();
    adj.residual_decay = 0.75;
    adj.consec_pairs.push_back({ModuleRole::I, ModuleRole::V});
    const AdjacencyConfig back = adjacency_from_json(to_json(adj));
    EXPECT_EQ(back.intra_pairs, adj.intra_pairs);
    EXPECT_EQ(back.consec_pairs, adj.consec_pairs);
    EXPECT_EQ(back.residual_sources, adj.residual_sources);
    EXPECT_EQ(back.residual_targets, adj.residual_targets);
    EXPECT_EQ(back.residual_decay, 0.75);
    EXPECT_THROW(adjacency_from_json(nlohmann::json{{"intra_pairs", {{"Q", "X"}}}}), Error);
}

TEST(Render, TextGridRoundTrips)
{
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 2 + static_cast<int>(uniform_below(rng, 11));
        const SwitchStrategy s = testing::random_test_strategy(n, 1 + static_cast<int>(uniform_below(rng, 30)), rng);
        const std::string text = render_strategy(s, RenderFormat::kText);
        EXPECT_EQ(parse_text_grid(text, n), s);
    }
}

TEST(Render, UniformGridShowsOneSymbol)
{
    const std::string text = render_strategy(uniform(2, 3, 1), RenderFormat::kText);
    EXPECT_EQ(text, "layer Q K V O I P\n0     1 1 1 1 1 1\n1     1 1 1 1 1 1\n2     1 1 1 1 1 1\n");
}

TEST(Render, SvgUsesOneFillPerModel)
{
    const std::string svg = render_strategy(two_block(), RenderFormat::kSvg);
    EXPECT_EQ(svg.rfind("<svg", 0), 0U);
    EXPECT_NE(svg.find("</svg>"), std::string::npos);
    const auto first = svg.find("fill=\"#");
    ASSERT_NE(first, std::string::npos);
    const std::string fill0 = svg.substr(first, 14);
    const auto other = svg.find("fill=\"#", svg.rfind(fill0) + 1);
    ASSERT_NE(other, std::string::npos);
    EXPECT_NE(svg.substr(other, 14), fill0);
    EXPECT_EQ(render_strategy(two_block(), RenderFormat::kSvg), svg);
}

TEST(Render, RejectsUnknownFormatAndMalformedGrids)
{
    EXPECT_THROW(parse_render_format("png"), UsageError);
    EXPECT_EQ(parse_render_format("svg"), RenderFormat::kSvg);
    EXPECT_THROW(parse_text_grid("0 0 0 0 0 0 0\n1 0 0 0 0 0\n", 2), Error);
    EXPECT_THROW(parse_text_grid("0 0 0 0 0 0 2\n", 2), Error);
    EXPECT_THROW(parse_text_grid("1 0 0 0 0 0 0\n", 2), Error);
}

TEST(StrategyFile, RoundTripWithFitnessAndSeed)
{
    testing::TempDir dir;
    Rng rng(2);
    StrategyDocument doc{testing::random_test_strategy(3, 5, rng), std::nullopt, 42};
    doc.fitness = score_strategy(doc.strategy, AdjacencyConfig::defaults(), {});
    save_strategy(doc, dir.file("s.json"));
    const StrategyDocument back = load_strategy(dir.file("s.json"));
    EXPECT_EQ(back.strategy, doc.strategy);
    ASSERT_TRUE(back.fitness.has_value());
    EXPECT_EQ(*back.fitness, *doc.fitness);
    EXPECT_EQ(back.seed, std::optional<std::uint64_t>(42));

    const auto j = read_json_file(dir.file("s.json"));
    EXPECT_EQ(j.at("modules"), nlohmann::json({"Q", "K", "V", "O", "I", "P"}));
    EXPECT_EQ(j.at("num_layers"), 5);
}

TEST(StrategyFile, RejectsMalformedDocuments)
{
    nlohmann::json good = to_json(StrategyDocument{two_block(), std::nullopt, std::nullopt});
    EXPECT_NO_THROW(strategy_from_json(good));

    auto bad_modules = good;
    bad_modules["modules"] = {"Q", "K", "V", "O", "P", "I"};
    EXPECT_THROW(strategy_from_json(bad_modules), DataError);

    auto bad_rows = good;
    bad_rows["num_layers"] = 3;
    EXPECT_THROW(strategy_from_json(bad_rows), DataError);

    auto bad_cell = good;
    bad_cell["assignment"][0][0] = 5;
    EXPECT_THROW(strategy_from_json(bad_cell), DataError);

    auto short_row = good;
    short_row["assignment"][1] = {1, 1, 1};
    EXPECT_THROW(strategy_from_json(short_row), DataError);

    testing::TempDir dir;
    write_text_atomic(dir.file("broken.json"), "{ not json");
    EXPECT_THROW(load_strategy(dir.file("broken.json")), DataError);
    EXPECT_THROW(load_strategy(dir.file("missing.json")), DataError);
}

TEST(Weights, RejectNegativeValues)
{
    EXPECT_THROW(weights_from_json(nlohmann::json{{"intra", -1.0}}), UsageError);
    const FitnessWeights w = weights_from_json(nlohmann::json{{"balance", 2.0}});
    EXPECT_EQ(w.balance, 2.0);
    EXPECT_EQ(w.intra, 1.0);
}

} // namespace
} // namespace msd
