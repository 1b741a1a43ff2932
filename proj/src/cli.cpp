// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

#include "msd/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>
#include <nlohmann/json.hpp>

#include "msd/defense.hpp"
#include "msd/error.hpp"
#include "msd/evo_search.hpp"
#include "msd/io.hpp"
#include "msd/pilot.hpp"
#include "msd/strategy.hpp"
#include "msd/switcher.hpp"
#include "msd/tensor_store.hpp"

namespace msd {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

struct WeightFlags {
    double intra = 1.0;
    double consec = 1.0;
    double residual = 1.0;
    double balance = 1.0;
    double diversity = 1.0;
};

struct Options {
    int verbose = 0;
    bool quiet = false;
    std::uint64_t seed = 0;
    std::vector<CLI::Option*> seed_opts;

    // search
    SearchConfig search;
    std::uint64_t patience = 0;
    CLI::Option* patience_opt = nullptr;
    CLI::Option* generations_opt = nullptr;
    CLI::Option* budget_opt = nullptr;
    std::vector<CLI::Option*> trajectory_opts;
    std::string adjacency_path;
    WeightFlags weights;
    std::string resume_path;
    std::string state_out;
    std::uint64_t log_every = 0;

    // score / render
    std::string strategy_path;
    bool as_json = false;
    std::string format = "text";

    // pilot
    pilot::CohortConfig cohort;
    std::string activation = "linear";
    std::string out_dir;
    int jobs = 0;

    // switch / wag / audit
    std::vector<std::string> models;
    std::string mapping;
    std::vector<int> permutation;
    std::string passthrough = "average";
    int passthrough_from = 0;
    bool all_permutations = false;
    std::string out;
    std::string candidate;
    std::string provenance;

    // detect / select
    std::vector<std::string> heads;
    std::vector<std::string> features;
    defense::DummyConfig dummy;
    std::string dummy_path;
    std::optional<int> target_class;
    std::vector<std::string> candidates;

    // inspect
    std::string file;
    int layers = 0;
};

struct Context {
    std::ostream& out;
    std::ostream& err;
    const Options& opt;
    const std::vector<std::string>& args;

    void info(const std::string& line) const
    {
        if (!opt.quiet) {
            err << line << '\n';
        }
    }
};

std::uint64_t resolve_seed(const Options& opt)
{
    for (const CLI::Option* o : opt.seed_opts) {
        if (o->count() > 0) {
            return opt.seed;
        }
    }
    if (const char* env = std::getenv("MSD_SEED"); env != nullptr && *env != '\0') {
        const std::string_view text(env);
        std::uint64_t value = 0;
        const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
        if (ec != std::errc() || ptr != text.data() + text.size()) {
            throw UsageError(fmt::format("MSD_SEED must be a non-negative integer, got '{}'", text));
        }
        return value;
    }
    return 0;
}

FitnessWeights to_weights(const WeightFlags& w)
{
    FitnessWeights out{w.intra, w.consec, w.residual, w.balance, w.diversity};
    // Reuse the file-format validation for negative weights.
    return weights_from_json(to_json(out));
}

void write_snapshot(const Context& ctx, const std::string& output_path, const std::string& subcommand,
                    json config)
{
    json snap = {{"format", "msd-run-config"},
                 {"version", 1},
                 {"subcommand", subcommand},
                 {"argv", ctx.args},
                 {"config", std::move(config)}};
    const std::string path = output_path + ".config.json";
    write_text_atomic(path, snap.dump(2) + "\n");
    ctx.info(fmt::format("wrote {}", path));
}

std::string format_breakdown(const FitnessBreakdown& f)
{
    std::string s = fmt::format("{:<10} {:>14}\n", "component", "value");
    const std::pair<const char*, double> rows[] = {{"intra", f.intra},         {"consec", f.consec},
                                                   {"residual", f.residual},   {"balance", f.balance},
                                                   {"diversity", f.diversity}, {"total", f.total}};
    for (const auto& [name, value] : rows) {
        s += fmt::format("{:<10} {:>14.6f}\n", name, value + 0.0);
    }
    return s;
}

NameMapping resolve_mapping(const std::string& name_or_path)
{
    if (fs::exists(name_or_path)) {
        return load_mapping(name_or_path);
    }
    return builtin_mapping(name_or_path);
}

std::vector<WeightMap> read_models(const std::vector<std::string>& paths)
{
    std::vector<WeightMap> models;
    models.reserve(paths.size());
    for (const auto& p : paths) {
        models.push_back(read_container(p));
    }
    return models;
}

std::vector<std::string> file_digests(const std::vector<std::string>& paths)
{
    std::vector<std::string> out;
    for (const auto& p : paths) {
        out.push_back(hex64(fnv1a64(read_file_bytes(p))));
    }
    return out;
}

PassthroughPolicy parse_passthrough(const Options& opt)
{
    PassthroughPolicy policy;
    if (opt.passthrough == "average") {
        policy.mode = PassthroughPolicy::Mode::kAverage;
    } else if (opt.passthrough == "copy") {
        policy.mode = PassthroughPolicy::Mode::kCopy;
        policy.copy_from = opt.passthrough_from;
    } else {
        throw UsageError(fmt::format("--passthrough must be 'average' or 'copy', got '{}'", opt.passthrough));
    }
    return policy;
}

void write_merged(const Context& ctx, CandidateModel& cand, const std::vector<std::string>& sources,
                  const std::vector<std::string>& digests, const std::string& path)
{
    cand.provenance.sources = sources;
    cand.provenance.source_digests = digests;
    write_container(cand.merged, path);
    write_text_atomic(provenance_path(path), to_json(cand.provenance).dump(2) + "\n");
    ctx.info(fmt::format("wrote {} and {}", path, provenance_path(path)));
}

// Subcommands.

int cmd_search(const Context& ctx, const Options& opt)
{
    SearchConfig cfg;
    SearchState state;
    const bool resuming = !opt.resume_path.empty();
    if (resuming) {
        for (const CLI::Option* o : opt.trajectory_opts) {
            if (o->count() > 0) {
                throw UsageError(fmt::format("{} cannot be changed when resuming; the saved configuration is used",
                                             o->get_name()));
            }
        }
        auto loaded = load_state(opt.resume_path);
        state = std::move(loaded.first);
        cfg = std::move(loaded.second);
        if (opt.generations_opt->count() > 0 || opt.budget_opt->count() > 0) {
            cfg.generations = opt.search.generations;
        }
        if (opt.patience_opt->count() > 0) {
            cfg.early_stop_patience = opt.patience;
        }
    } else {
        cfg = opt.search;
        cfg.seed = resolve_seed(opt);
        cfg.early_stop_patience = opt.patience_opt->count() > 0 ? std::optional(opt.patience) : std::nullopt;
        if (!opt.adjacency_path.empty()) {
            cfg.adjacency = load_adjacency(opt.adjacency_path);
        }
        cfg.weights = to_weights(opt.weights);
        cfg.validate();
        state = initialize_search(cfg);
    }

    GenerationObserver observer;
    const std::uint64_t log_every = opt.log_every > 0 ? opt.log_every : (opt.verbose > 0 ? 1000 : 0);
    if (log_every > 0 && !opt.quiet) {
        observer = [&](const SearchState& s) {
            if (s.generation % log_every == 0) {
                ctx.err << fmt::format("generation {} best {:.6f}\n", s.generation, s.best.fitness.total);
            }
        };
    }
    resume_search(state, cfg, observer);

    ctx.out << fmt::format("generations {}{}\n", state.generation, state.stopped_early ? " (early stop)" : "");
    ctx.out << format_breakdown(state.best.fitness);
    ctx.out << render_strategy(state.best.strategy, RenderFormat::kText);

    if (!opt.out.empty()) {
        save_strategy({state.best.strategy, state.best.fitness, cfg.seed}, opt.out);
        ctx.info(fmt::format("wrote {}", opt.out));
        write_snapshot(ctx, opt.out, "search", to_json(cfg));
    }
    if (!opt.state_out.empty()) {
        save_state(state, cfg, opt.state_out);
        ctx.info(fmt::format("wrote {}", opt.state_out));
        if (opt.out.empty()) {
            write_snapshot(ctx, opt.state_out, "search", to_json(cfg));
        }
    }
    return 0;
}

int cmd_score(const Context& ctx, const Options& opt)
{
    const StrategyDocument doc = load_strategy(opt.strategy_path);
    const AdjacencyConfig adj =
        opt.adjacency_path.empty() ? AdjacencyConfig::defaults() : load_adjacency(opt.adjacency_path);
    const FitnessWeights w = to_weights(opt.weights);
    const FitnessBreakdown f = score_strategy(doc.strategy, adj, w);
    if (opt.as_json) {
        ctx.out << to_json(f).dump(2) << '\n';
    } else {
        ctx.out << format_breakdown(f);
    }
    return 0;
}

int cmd_render(const Context& ctx, const Options& opt)
{
    const StrategyDocument doc = load_strategy(opt.strategy_path);
    const std::string text = render_strategy(doc.strategy, parse_render_format(opt.format));
    if (opt.out.empty()) {
        ctx.out << text;
    } else {
        write_text_atomic(opt.out, text);
        ctx.info(fmt::format("wrote {}", opt.out));
    }
    return 0;
}

int cmd_pilot(const Context& ctx, const Options& opt)
{
    pilot::CohortConfig cfg = opt.cohort;
    cfg.activation = pilot::parse_activation(opt.activation);
    cfg.seed = resolve_seed(opt);
    cfg.jobs = opt.jobs > 0 ? opt.jobs : static_cast<int>(std::max(1U, std::thread::hardware_concurrency()));
    cfg.validate();
    const pilot::CohortResult result = pilot::run_cohort(cfg);
    ctx.out << pilot::format_report(result.report);
    if (!opt.out_dir.empty()) {
        const std::string stem =
            (fs::path(opt.out_dir) / fmt::format("pilot_{}", pilot::activation_name(cfg.activation))).string();
        write_text_atomic(stem + ".csv", result.csv);
        write_text_atomic(stem + ".txt", pilot::format_report(result.report));
        ctx.info(fmt::format("wrote {}.csv and {}.txt", stem, stem));
        write_snapshot(ctx, stem, "pilot", pilot::to_json(cfg));
    }
    return 0;
}

int cmd_switch(const Context& ctx, const Options& opt)
{
    const StrategyDocument doc = load_strategy(opt.strategy_path);
    const NameMapping mapping = resolve_mapping(opt.mapping);
    const std::vector<WeightMap> models = read_models(opt.models);
    const std::vector<std::string> digests = file_digests(opt.models);
    const PassthroughPolicy policy = parse_passthrough(opt);
    const json config = {{"strategy", opt.strategy_path},
                         {"models", opt.models},
                         {"mapping", to_json(mapping)},
                         {"passthrough", opt.passthrough},
                         {"passthrough_from", opt.passthrough_from}};

    if (opt.all_permutations) {
        if (opt.out_dir.empty()) {
            throw UsageError("--all-permutations writes into --out-dir");
        }
        std::vector<CandidateModel> cands = permute_candidates(doc.strategy, models, mapping, policy);
        for (std::size_t i = 0; i < cands.size(); ++i) {
            const std::string path = (fs::path(opt.out_dir) / fmt::format("candidate_{}.safetensors", i)).string();
            write_merged(ctx, cands[i], opt.models, digests, path);
            ctx.out << fmt::format("{} permutation {}\n", path, fmt::join(cands[i].permutation, ","));
        }
        write_snapshot(ctx, (fs::path(opt.out_dir) / "candidates").string(), "switch", config);
        return 0;
    }
    if (opt.out.empty()) {
        throw UsageError("switch needs --out (or --all-permutations with --out-dir)");
    }
    std::vector<int> perm = opt.permutation;
    if (perm.empty()) {
        perm.resize(static_cast<std::size_t>(doc.strategy.num_models()));
        for (std::size_t i = 0; i < perm.size(); ++i) {
            perm[i] = static_cast<int>(i);
        }
    }
    CandidateModel cand = apply_strategy(doc.strategy, models, mapping, perm, policy);
    write_merged(ctx, cand, opt.models, digests, opt.out);
    json snap = config;
    snap["permutation"] = perm;
    write_snapshot(ctx, opt.out, "switch", snap);
    return 0;
}

int cmd_wag(const Context& ctx, const Options& opt)
{
    const std::vector<WeightMap> models = read_models(opt.models);
    CandidateModel cand;
    cand.merged = wag_average(models);
    for (std::size_t i = 0; i < models.size(); ++i) {
        cand.provenance.permutation.push_back(static_cast<int>(i));
    }
    write_merged(ctx, cand, opt.models, file_digests(opt.models), opt.out);
    write_snapshot(ctx, opt.out, "wag", json{{"models", opt.models}});
    return 0;
}

int cmd_audit(const Context& ctx, const Options& opt)
{
    const WeightMap merged = read_container(opt.candidate);
    const std::vector<WeightMap> models = read_models(opt.models);
    const std::string prov_path = opt.provenance.empty() ? provenance_path(opt.candidate) : opt.provenance;
    const Provenance prov = provenance_from_json(read_json_file(prov_path));
    std::optional<NameMapping> mapping;
    if (!opt.mapping.empty()) {
        mapping = resolve_mapping(opt.mapping);
    } else if (prov.cells && !prov.architecture.empty()) {
        mapping = builtin_mapping(prov.architecture);
    }
    if (!prov.source_digests.empty()) {
        const std::vector<std::string> digests = file_digests(opt.models);
        for (std::size_t i = 0; i < std::min(digests.size(), prov.source_digests.size()); ++i) {
            if (digests[i] != prov.source_digests[i]) {
                ctx.err << fmt::format("warning: {} does not match the recorded source digest\n", opt.models[i]);
            }
        }
    }
    const AuditReport report = audit_provenance(merged, models, prov, mapping);
    ctx.out << format_audit(report);
    if (!report.clean()) {
        throw DataError(fmt::format("{} provenance violations", report.violations().size()));
    }
    return 0;
}

defense::DummyConfig dummy_config(const Options& opt)
{
    defense::DummyConfig cfg = opt.dummy;
    cfg.seed = resolve_seed(opt);
    if (cfg.steps < 0 || !(cfg.learning_rate > 0.0) || !(cfg.target_probability > 0.0) ||
        !(cfg.target_probability < 1.0)) {
        throw UsageError("--steps must be >= 0, --lr > 0 and --target-prob in (0, 1)");
    }
    return cfg;
}

int cmd_detect(const Context& ctx, const Options& opt)
{
    if (opt.heads.size() != opt.features.size()) {
        throw UsageError(fmt::format("{} --head files but {} --features files", opt.heads.size(), opt.features.size()));
    }
    const defense::DummyConfig cfg = dummy_config(opt);
    std::vector<int> votes;
    std::optional<defense::SuspectResult> last;
    for (std::size_t m = 0; m < opt.heads.size(); ++m) {
        const defense::ClassifierHead head = defense::head_from_container(read_container(opt.heads[m]));
        const defense::FeatureSet clean = defense::features_from_container(read_container(opt.features[m]));
        defense::SuspectResult r = defense::detect_suspect(head, clean, cfg);
        ctx.out << fmt::format("model {} ({})\n", m, opt.heads[m]);
        for (std::size_t c = 0; c < r.class_distance.size(); ++c) {
            ctx.out << fmt::format("  class {:>3}  distance {:.6f}  dummy p={:.4f}{}\n", c, r.class_distance[c],
                                   r.dummies[c].probability, r.dummies[c].converged ? "" : " (not converged)");
        }
        ctx.out << fmt::format("  suspect {}\n", r.suspect);
        votes.push_back(r.suspect);
        last = std::move(r);
    }
    // With several models the last pair is the weight average, whose vote breaks ties.
    const int target = votes.size() == 1 ? votes.front() : defense::majority_vote(votes, votes.back());
    ctx.out << fmt::format("suspect class {}\n", target);

    if (!opt.out.empty()) {
        defense::FeatureSet dummy_set;
        dummy_set.dummies.resize(static_cast<std::size_t>(target) + 1);
        dummy_set.per_class.resize(dummy_set.dummies.size());
        dummy_set.dummies[static_cast<std::size_t>(target)] = last->dummies[static_cast<std::size_t>(target)].feature;
        dummy_set.model_id = opt.heads.back();
        WeightMap map = defense::features_to_container(dummy_set);
        map.metadata["suspect_class"] = std::to_string(target);
        map.metadata["votes"] = fmt::format("{}", fmt::join(votes, ","));
        write_container(map, opt.out);
        ctx.info(fmt::format("wrote {}", opt.out));
        write_snapshot(ctx, opt.out, "detect",
                       json{{"heads", opt.heads},
                            {"features", opt.features},
                            {"seed", cfg.seed},
                            {"steps", cfg.steps},
                            {"lr", cfg.learning_rate},
                            {"target_prob", cfg.target_probability}});
    }
    return 0;
}

int cmd_select(const Context& ctx, const Options& opt)
{
    const WeightMap dummy_map = read_container(opt.dummy_path);
    const defense::FeatureSet dummy_set = defense::features_from_container(dummy_map);
    std::optional<int> target = opt.target_class;
    if (!target) {
        if (const auto it = dummy_map.metadata.find("suspect_class"); it != dummy_map.metadata.end()) {
            target = std::stoi(it->second);
        }
    }
    if (!target) {
        for (std::size_t c = 0; c < dummy_set.dummies.size(); ++c) {
            if (dummy_set.dummies[c]) {
                if (target) {
                    throw UsageError("dummy file holds several dummies; pick one with --class");
                }
                target = static_cast<int>(c);
            }
        }
    }
    if (!target || *target < 0 || static_cast<std::size_t>(*target) >= dummy_set.dummies.size() ||
        !dummy_set.dummies[static_cast<std::size_t>(*target)]) {
        throw DataError(fmt::format("{} holds no dummy feature for the requested class", opt.dummy_path));
    }
    const defense::Vector& dummy = *dummy_set.dummies[static_cast<std::size_t>(*target)];

    std::vector<defense::CandidateFeatures> cands;
    for (const auto& path : opt.candidates) {
        const defense::FeatureSet fs = defense::features_from_container(read_container(path));
        cands.push_back({path, fs.pooled(*target)});
    }
    const defense::Selection sel = defense::select_candidate(cands, dummy);
    for (std::size_t i = 0; i < sel.scores.size(); ++i) {
        ctx.out << fmt::format("{} {:<40} mean distance {:.6f} over {} samples\n", i == sel.winner ? '*' : ' ',
                               sel.scores[i].id, sel.scores[i].mean_distance, sel.scores[i].samples);
    }
    ctx.out << fmt::format("selected {}\n", sel.scores[sel.winner].id);
    return 0;
}

int cmd_inspect(const Context& ctx, const Options& opt)
{
    const WeightMap map = read_container(opt.file);
    std::uint64_t total = 0;
    for (const auto& [k, v] : map.metadata) {
        ctx.out << fmt::format("metadata {} = {}\n", k, v);
    }
    for (const auto& t : map.tensors()) {
        ctx.out << fmt::format("{:<60} {:<5} [{}] bytes [{}, {})\n", t.name, dtype_name(t.dtype),
                               fmt::join(t.shape, ", "), t.byte_offset, t.byte_offset + t.byte_length);
        total += t.byte_length;
    }
    ctx.out << fmt::format("{} tensors, {} data bytes\n", map.size(), total);
    if (!opt.mapping.empty()) {
        const NameMapping mapping = resolve_mapping(opt.mapping);
        int layers = opt.layers;
        if (layers <= 0) {
            if (!mapping.num_layers) {
                throw UsageError("--layers is required when the mapping does not fix the layer count");
            }
            layers = *mapping.num_layers;
        }
        const ModuleGrid grid = resolve_modules(map, mapping, layers);
        ctx.out << fmt::format("mapping {}: {} layers, {} module cells, {} passthrough tensors\n",
                               mapping.architecture, grid.num_layers, grid.cells.size(), grid.passthrough.size());
    }
    return 0;
}

using Handler = int (*)(const Context&, const Options&);

struct Registered {
    CLI::App* app;
    Handler handler;
};

void add_weight_flags(CLI::App* sub, WeightFlags& w)
{
    sub->add_option("--w-intra", w.intra, "Weight of the intra-layer penalty")->capture_default_str();
    sub->add_option("--w-consec", w.consec, "Weight of the consecutive-layer penalty")->capture_default_str();
    sub->add_option("--w-residual", w.residual, "Weight of the residual-path penalty")->capture_default_str();
    sub->add_option("--w-balance", w.balance, "Weight of the balance penalty")->capture_default_str();
    sub->add_option("--w-diversity", w.diversity, "Weight of the diversity reward")->capture_default_str();
}

CLI::Option* add_seed(CLI::App* sub, Options& o)
{
    o.seed_opts.push_back(sub->add_option("--seed", o.seed, "Random seed (falls back to $MSD_SEED, then 0)"));
    return o.seed_opts.back();
}

std::vector<Registered> build_app(CLI::App& app, Options& o)
{
    app.require_subcommand(1);
    app.fallthrough();
    app.add_flag("-v,--verbose", o.verbose, "More progress output (repeatable)");
    app.add_flag("-q,--quiet", o.quiet, "Suppress informational messages");
    std::vector<Registered> subs;

    {
        CLI::App* s = app.add_subcommand("search", "Evolutionary search for a switching strategy");
        SearchConfig& c = o.search;
        auto track = [&](CLI::Option* opt) {
            o.trajectory_opts.push_back(opt);
            return opt;
        };
        track(s->add_option("--models", c.num_models, "Number of source models N")->capture_default_str());
        track(s->add_option("--layers", c.num_layers, "Number of transformer layers L")->capture_default_str());
        track(s->add_option("--population", c.population_size, "Population size")->capture_default_str());
        o.generations_opt =
            s->add_option("--generations", c.generations, "Number of generations")->capture_default_str();
        o.budget_opt = s->add_option("--budget", c.generations, "Alias of --generations");
        o.budget_opt->excludes(o.generations_opt);
        track(s->add_option("--children", c.children_per_gen, "Children per generation")->capture_default_str());
        track(s->add_option("--tournament", c.tournament_size, "Tournament size")->capture_default_str());
        o.patience_opt = s->add_option("--patience", o.patience, "Stop after this many generations without improvement");
        track(add_seed(s, o));
        track(s->add_option("--adjacency", o.adjacency_path, "Adjacency configuration file (JSON)"));
        add_weight_flags(s, o.weights);
        for (const char* name : {"--w-intra", "--w-consec", "--w-residual", "--w-balance", "--w-diversity"}) {
            o.trajectory_opts.push_back(s->get_option(name));
        }
        s->add_option("--resume", o.resume_path, "Continue from a saved search state")->check(CLI::ExistingFile);
        s->add_option("--state", o.state_out, "Write the final search state here");
        s->add_option("--out", o.out, "Write the best strategy here");
        s->add_option("--log-every", o.log_every, "Print progress every N generations (0 = never)");
        subs.push_back({s, cmd_search});
    }
    {
        CLI::App* s = app.add_subcommand("score", "Print the fitness breakdown of a strategy");
        s->add_option("--strategy", o.strategy_path, "Strategy file")->required();
        s->add_option("--adjacency", o.adjacency_path, "Adjacency configuration file (JSON)");
        add_weight_flags(s, o.weights);
        s->add_flag("--json", o.as_json, "Print JSON instead of a table");
        subs.push_back({s, cmd_score});
    }
    {
        CLI::App* s = app.add_subcommand("render", "Render a strategy grid");
        s->add_option("--strategy", o.strategy_path, "Strategy file")->required();
        s->add_option("--format", o.format, "Output format: text or svg")->capture_default_str();
        s->add_option("--out", o.out, "Output file (default stdout)");
        subs.push_back({s, cmd_render});
    }
    {
        CLI::App* s = app.add_subcommand("pilot", "Two-layer network switching experiment");
        pilot::CohortConfig& c = o.cohort;
        s->add_option("--activation", o.activation, "linear, relu, tanh or sigmoid")->capture_default_str();
        s->add_option("--cohort", c.cohort_size, "Number of fine-tuned nets")->capture_default_str();
        s->add_option("--input-dim", c.input_dim, "Input dimension N")->capture_default_str();
        s->add_option("--hidden-dim", c.hidden_dim, "Hidden dimension K")->capture_default_str();
        s->add_option("--output-dim", c.output_dim, "Output dimension M")->capture_default_str();
        s->add_option("--semantic-scale", c.semantic_scale, "Entry scale of S")->capture_default_str();
        s->add_option("--backdoor-scale", c.backdoor_scale, "Entry scale of each backdoor")->capture_default_str();
        s->add_option("--train-size", c.train_set_size, "Training inputs")->capture_default_str();
        s->add_option("--eval-size", c.eval_set_size, "Evaluation inputs")->capture_default_str();
        s->add_option("--lr", c.learning_rate, "Learning rate")->capture_default_str();
        s->add_option("--max-steps", c.max_steps, "Training step cap")->capture_default_str();
        s->add_option("--tolerance", c.mse_tolerance, "Relative MSE stopping threshold")->capture_default_str();
        add_seed(s, o);
        s->add_option("--jobs", o.jobs, "Worker threads (default: available cores)");
        s->add_option("--out-dir", o.out_dir, "Write CSV, report and config snapshot here");
        subs.push_back({s, cmd_pilot});
    }
    {
        CLI::App* s = app.add_subcommand("switch", "Build a merged checkpoint from a strategy");
        s->add_option("--strategy", o.strategy_path, "Strategy file")->required();
        s->add_option("--models", o.models, "Source checkpoints")->required()->expected(1, -1);
        s->add_option("--mapping", o.mapping, "Name mapping file or built-in architecture id")->required();
        s->add_option("--permutation", o.permutation, "Source model for each strategy slot, e.g. 0,1")
            ->delimiter(',');
        s->add_option("--passthrough", o.passthrough, "average or copy")->capture_default_str();
        s->add_option("--passthrough-from", o.passthrough_from, "Source model for --passthrough copy")
            ->capture_default_str();
        s->add_flag("--all-permutations", o.all_permutations, "Write one candidate per distinct permutation");
        s->add_option("--out", o.out, "Merged checkpoint path");
        s->add_option("--out-dir", o.out_dir, "Directory for --all-permutations candidates");
        subs.push_back({s, cmd_switch});
    }
    {
        CLI::App* s = app.add_subcommand("wag", "Average checkpoints elementwise");
        s->add_option("--models", o.models, "Source checkpoints")->required()->expected(1, -1);
        s->add_option("--out", o.out, "Averaged checkpoint path")->required();
        subs.push_back({s, cmd_wag});
    }
    {
        CLI::App* s = app.add_subcommand("audit", "Verify a merged checkpoint against its provenance");
        s->add_option("--candidate", o.candidate, "Merged checkpoint")->required();
        s->add_option("--models", o.models, "Source checkpoints, in provenance order")->required()->expected(1, -1);
        s->add_option("--provenance", o.provenance, "Provenance file (default <candidate>.provenance.json)");
        s->add_option("--mapping", o.mapping, "Name mapping file or built-in architecture id");
        subs.push_back({s, cmd_audit});
    }
    {
        CLI::App* s = app.add_subcommand("detect", "Find the suspicious class of one or more models");
        s->add_option("--head", o.heads, "Classifier head file; repeat per model, weight average last")
            ->required();
        s->add_option("--features", o.features, "Clean feature file; one per --head")->required();
        s->add_option("--steps", o.dummy.steps, "Dummy optimization steps")->capture_default_str();
        s->add_option("--lr", o.dummy.learning_rate, "Dummy optimization learning rate")->capture_default_str();
        s->add_option("--target-prob", o.dummy.target_probability, "Stop once the class probability reaches this")
            ->capture_default_str();
        add_seed(s, o);
        s->add_option("--out", o.out, "Write the suspect class's dummy feature here");
        subs.push_back({s, cmd_detect});
    }
    {
        CLI::App* s = app.add_subcommand("select", "Pick the candidate farthest from the dummy feature");
        s->add_option("--dummy", o.dummy_path, "Dummy feature file written by detect")->required();
        s->add_option("--class", o.target_class, "Suspect class (default: from the dummy file)");
        s->add_option("--candidates", o.candidates, "Candidate feature files")->required()->expected(1, -1);
        subs.push_back({s, cmd_select});
    }
    {
        CLI::App* s = app.add_subcommand("inspect", "List the tensors of a container file");
        s->add_option("file,--file", o.file, "Container file")->required();
        s->add_option("--mapping", o.mapping, "Also resolve module cells with this mapping");
        s->add_option("--layers", o.layers, "Layer count for --mapping");
        subs.push_back({s, cmd_inspect});
    }
    return subs;
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app("Module switching toolkit: strategy search, checkpoint switching and backdoor defense", "msd");
    Options opt;
    const std::vector<Registered> subs = build_app(app, opt);
    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return static_cast<int>(ErrorKind::kUsage);
    }

    const Context ctx{out, err, opt, args};
    try {
        for (const Registered& r : subs) {
            if (r.app->parsed()) {
                return r.handler(ctx, opt);
            }
        }
        throw UsageError("no subcommand given");
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return e.exit_code();
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return static_cast<int>(ErrorKind::kData);
    } catch (const nlohmann::json::exception& e) {
        err << "error: " << e.what() << '\n';
        return static_cast<int>(ErrorKind::kData);
    }
}

int run_cli(int argc, char** argv)
{
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) {
        args.emplace_back(argv[i]);
    }
    return run_cli(args, std::cout, std::cerr);
}

std::vector<std::pair<std::string, std::vector<std::string>>> cli_option_table()
{
    CLI::App app;
    Options opt;
    std::vector<std::pair<std::string, std::vector<std::string>>> table;
    for (const Registered& r : build_app(app, opt)) {
        std::vector<std::string> names;
        for (const CLI::Option* o : r.app->get_options()) {
            for (const std::string& n : o->get_lnames()) {
                names.push_back("--" + n);
            }
        }
        table.emplace_back(r.app->get_name(), std::move(names));
    }
    return table;
}

} // namespace msd
