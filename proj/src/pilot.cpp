// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

#include "msd/pilot.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <thread>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "msd/error.hpp"

namespace msd::pilot {

namespace {

constexpr std::uint64_t kBaseStream = 10;
constexpr std::uint64_t kMemberStream = 11;

// Loss growth beyond this factor of the starting loss counts as divergence.
constexpr double kDivergenceFactor = 1e6;

Matrix activate(const Matrix& z, Activation a)
{
    switch (a) {
    case Activation::kLinear:
        return z;
    case Activation::kRelu:
        return z.cwiseMax(0.0);
    case Activation::kTanh:
        return z.array().tanh().matrix();
    case Activation::kSigmoid:
        return (1.0 / (1.0 + (-z.array()).exp())).matrix();
    }
    return z;
}

// Derivative of the activation, expressed through pre-activation z and output h.
Matrix activation_slope(const Matrix& z, const Matrix& h, Activation a)
{
    switch (a) {
    case Activation::kLinear:
        return Matrix::Ones(z.rows(), z.cols());
    case Activation::kRelu:
        return (z.array() > 0.0).cast<double>().matrix();
    case Activation::kTanh:
        return (1.0 - h.array().square()).matrix();
    case Activation::kSigmoid:
        return (h.array() * (1.0 - h.array())).matrix();
    }
    return Matrix::Ones(z.rows(), z.cols());
}

bool bad_loss(double loss, double initial)
{
    return !std::isfinite(loss) || loss > kDivergenceFactor * std::max(initial, 1.0);
}

TrainResult train_linear(TwoLayerNet net, const Matrix& target, const Matrix& inputs, const TrainOptions& opts)
{
    const double n = static_cast<double>(inputs.cols());
    const double m = static_cast<double>(target.rows());
    const Matrix second_moment = inputs * inputs.transpose() / n;
    const double target_energy = (target * second_moment * target.transpose()).trace();

    auto relative_loss = [&](const Matrix& gap) {
        const double err = (gap * second_moment * gap.transpose()).trace();
        return target_energy > 0.0 ? err / target_energy : err;
    };

    TrainResult result;
    Matrix gap = net.w2 * net.w1 - target;
    result.initial_loss = relative_loss(gap);
    result.loss_curve.reserve(static_cast<std::size_t>(opts.max_steps) + 1);
    double loss = result.initial_loss;
    for (int step = 0; step < opts.max_steps; ++step) {
        result.loss_curve.push_back(loss);
        if (loss < opts.mse_tolerance) {
            result.converged = true;
            break;
        }
        const Matrix g = (2.0 / m) * gap * second_moment;
        const Matrix grad_w2 = g * net.w1.transpose();
        const Matrix grad_w1 = net.w2.transpose() * g;
        net.w2 -= opts.learning_rate * grad_w2;
        net.w1 -= opts.learning_rate * grad_w1;
        ++result.steps;
        gap = net.w2 * net.w1 - target;
        loss = relative_loss(gap);
        if (bad_loss(loss, result.initial_loss)) {
            result.diverged = true;
            break;
        }
    }
    if (!result.converged && !result.diverged && loss < opts.mse_tolerance) {
        result.converged = true;
    }
    result.loss_curve.push_back(loss);
    result.final_loss = loss;
    result.net = std::move(net);
    return result;
}

TrainResult train_general(TwoLayerNet net, const Matrix& target, const Matrix& inputs, const TrainOptions& opts)
{
    const double n = static_cast<double>(inputs.cols());
    const double m = static_cast<double>(target.rows());
    const Matrix wanted = target * inputs;
    const double target_energy = wanted.squaredNorm();

    TrainResult result;
    result.loss_curve.reserve(static_cast<std::size_t>(opts.max_steps) + 1);
    Matrix z = net.w1 * inputs;
    Matrix h = activate(z, net.activation);
    Matrix err = net.w2 * h - wanted;
    auto relative_loss = [&] { return target_energy > 0.0 ? err.squaredNorm() / target_energy : err.squaredNorm(); };
    result.initial_loss = relative_loss();
    double loss = result.initial_loss;
    for (int step = 0; step < opts.max_steps; ++step) {
        result.loss_curve.push_back(loss);
        if (loss < opts.mse_tolerance) {
            result.converged = true;
            break;
        }
        const double scale = 2.0 / (n * m);
        const Matrix grad_w2 = scale * err * h.transpose();
        const Matrix back = (scale * net.w2.transpose() * err).cwiseProduct(activation_slope(z, h, net.activation));
        const Matrix grad_w1 = back * inputs.transpose();
        net.w2 -= opts.learning_rate * grad_w2;
        net.w1 -= opts.learning_rate * grad_w1;
        ++result.steps;
        z.noalias() = net.w1 * inputs;
        h = activate(z, net.activation);
        err.noalias() = net.w2 * h;
        err -= wanted;
        loss = relative_loss();
        if (bad_loss(loss, result.initial_loss)) {
            result.diverged = true;
            break;
        }
    }
    if (!result.converged && !result.diverged && loss < opts.mse_tolerance) {
        result.converged = true;
    }
    result.loss_curve.push_back(loss);
    result.final_loss = loss;
    result.net = std::move(net);
    return result;
}

} // namespace

Activation parse_activation(std::string_view name)
{
    if (name == "linear" || name == "identity") {
        return Activation::kLinear;
    }
    if (name == "relu") {
        return Activation::kRelu;
    }
    if (name == "tanh") {
        return Activation::kTanh;
    }
    if (name == "sigmoid") {
        return Activation::kSigmoid;
    }
    throw UsageError(fmt::format("unknown activation '{}' (expected linear, relu, tanh or sigmoid)", name));
}

std::string_view activation_name(Activation a)
{
    switch (a) {
    case Activation::kLinear:
        return "linear";
    case Activation::kRelu:
        return "relu";
    case Activation::kTanh:
        return "tanh";
    case Activation::kSigmoid:
        return "sigmoid";
    }
    return "unknown";
}

Vector TwoLayerNet::forward(const Vector& x) const
{
    return w2 * activate(w1 * x, activation);
}

Matrix TwoLayerNet::forward_batch(const Matrix& inputs) const
{
    return w2 * activate(w1 * inputs, activation);
}

Matrix gaussian_matrix(int rows, int cols, double stddev, Rng& rng)
{
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix out(rows, cols);
    // column-major fill order is part of the determinism contract
    for (Eigen::Index j = 0; j < out.cols(); ++j) {
        for (Eigen::Index i = 0; i < out.rows(); ++i) {
            out(i, j) = stddev * normal(rng);
        }
    }
    return out;
}

TwoLayerNet random_net(int input_dim, int hidden_dim, int output_dim, Activation act, Rng& rng)
{
    TwoLayerNet net;
    net.activation = act;
    net.w1 = gaussian_matrix(hidden_dim, input_dim, 1.0 / std::sqrt(static_cast<double>(input_dim)), rng);
    net.w2 = gaussian_matrix(output_dim, hidden_dim, 1.0 / std::sqrt(static_cast<double>(hidden_dim)), rng);
    return net;
}

TrainResult train_toward(TwoLayerNet net, const Matrix& target, const Matrix& inputs, const TrainOptions& opts)
{
    if (net.w1.cols() != inputs.rows() || net.w2.rows() != target.rows() || target.cols() != inputs.rows()
        || net.w2.cols() != net.w1.rows()) {
        throw UsageError("training shapes are inconsistent");
    }
    if (inputs.cols() == 0) {
        throw UsageError("training set is empty");
    }
    if (net.activation == Activation::kLinear) {
        return train_linear(std::move(net), target, inputs, opts);
    }
    return train_general(std::move(net), target, inputs, opts);
}

TrainResult pretrain(const TwoLayerNet& net, const Matrix& semantic, const Matrix& inputs, const TrainOptions& opts)
{
    return train_toward(net, semantic, inputs, opts);
}

TrainResult finetune(const TwoLayerNet& net, const Matrix& semantic, const Matrix& backdoor, const Matrix& inputs,
                     const TrainOptions& opts)
{
    if (semantic.rows() != backdoor.rows() || semantic.cols() != backdoor.cols()) {
        throw UsageError("backdoor pattern shape differs from the semantic map");
    }
    return train_toward(net, semantic + backdoor, inputs, opts);
}

TwoLayerNet switch_pair(const TwoLayerNet& first, const TwoLayerNet& second)
{
    if (first.activation != second.activation || first.w1.rows() != second.w1.rows()
        || first.w1.cols() != second.w1.cols() || first.w2.rows() != second.w2.rows()
        || first.w2.cols() != second.w2.cols()) {
        throw UsageError("cannot switch layers between nets of different shape or activation");
    }
    return TwoLayerNet{first.w1, second.w2, first.activation};
}

namespace {

Vector checked_unit(const Vector& v, double reference_norm, const char* what)
{
    const double norm = v.norm();
    if (!(norm > 0.0) || !std::isfinite(norm) || norm <= 1e-12 * reference_norm) {
        throw NumericError(fmt::format("{} has zero norm", what));
    }
    return v / norm;
}

} // namespace

Vector normalized(const Vector& v)
{
    return checked_unit(v, 0.0, "vector");
}

double semantic_distance(const TwoLayerNet& net, const Matrix& semantic, const Vector& x)
{
    const Vector out = net.forward(x);
    const Vector sem = semantic * x;
    return (checked_unit(out, 0.0, "network output") - checked_unit(sem, 0.0, "semantic output")).norm();
}

double backdoor_distance(const TwoLayerNet& net, const Matrix& semantic, const Matrix& backdoor, const Vector& x)
{
    const Vector sem = semantic * x;
    const Vector residual = net.forward(x) - sem;
    const Vector trigger = backdoor * x;
    return (checked_unit(residual, sem.norm(), "output residual f(x) - Sx")
            - checked_unit(trigger, 0.0, "backdoor output Bx"))
        .norm();
}

AdaptationTerms decompose_adaptation(const TwoLayerNet& before, const TwoLayerNet& after)
{
    if (before.activation != Activation::kLinear || after.activation != Activation::kLinear) {
        throw UsageError("adaptation decomposition is defined for linear nets only");
    }
    if (before.w1.rows() != after.w1.rows() || before.w1.cols() != after.w1.cols()
        || before.w2.rows() != after.w2.rows() || before.w2.cols() != after.w2.cols()) {
        throw UsageError("adaptation decomposition needs nets of identical shape");
    }
    const Matrix d1 = after.w1 - before.w1;
    const Matrix d2 = after.w2 - before.w2;
    return AdaptationTerms{before.w2 * before.w1, before.w2 * d1, d2 * before.w1, d2 * d1};
}

double matrix_distance(const Matrix& a, const Matrix& b)
{
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw UsageError("matrix distance needs equal shapes");
    }
    const double na = a.norm();
    const double nb = b.norm();
    if (!(na > 0.0) || !(nb > 0.0)) {
        throw NumericError("matrix distance of a zero matrix");
    }
    return (a / na - b / nb).norm();
}

// ---------------------------------------------------------------------------
// Cohort

void CohortConfig::validate() const
{
    if (input_dim < 1 || output_dim < 1 || hidden_dim < 1) {
        throw UsageError("pilot dimensions must be positive");
    }
    if (cohort_size < 2) {
        throw UsageError(fmt::format("cohort size must be >= 2, got {}", cohort_size));
    }
    if (train_set_size < 1 || eval_set_size < 1) {
        throw UsageError("train and eval set sizes must be positive");
    }
    if (!(learning_rate > 0.0) || max_steps < 0 || !(mse_tolerance >= 0.0)) {
        throw UsageError("learning rate must be positive, steps and tolerance non-negative");
    }
    if (!(semantic_scale >= 0.0) || !(backdoor_scale >= 0.0)) {
        throw UsageError("semantic and backdoor scales must be non-negative");
    }
    if (jobs < 1) {
        throw UsageError("jobs must be >= 1");
    }
}

nlohmann::json to_json(const CohortConfig& cfg)
{
    return nlohmann::json{{"input_dim", cfg.input_dim},
                          {"output_dim", cfg.output_dim},
                          {"hidden_dim", cfg.hidden_dim},
                          {"cohort_size", cfg.cohort_size},
                          {"semantic_scale", cfg.semantic_scale},
                          {"backdoor_scale", cfg.backdoor_scale},
                          {"train_set_size", cfg.train_set_size},
                          {"eval_set_size", cfg.eval_set_size},
                          {"learning_rate", cfg.learning_rate},
                          {"max_steps", cfg.max_steps},
                          {"mse_tolerance", cfg.mse_tolerance},
                          {"seed", cfg.seed},
                          {"activation", std::string(activation_name(cfg.activation))}};
}

CohortConfig cohort_config_from_json(const nlohmann::json& j)
{
    CohortConfig cfg;
    try {
        cfg.input_dim = j.value("input_dim", cfg.input_dim);
        cfg.output_dim = j.value("output_dim", cfg.output_dim);
        cfg.hidden_dim = j.value("hidden_dim", cfg.hidden_dim);
        cfg.cohort_size = j.value("cohort_size", cfg.cohort_size);
        cfg.semantic_scale = j.value("semantic_scale", cfg.semantic_scale);
        cfg.backdoor_scale = j.value("backdoor_scale", cfg.backdoor_scale);
        cfg.train_set_size = j.value("train_set_size", cfg.train_set_size);
        cfg.eval_set_size = j.value("eval_set_size", cfg.eval_set_size);
        cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
        cfg.max_steps = j.value("max_steps", cfg.max_steps);
        cfg.mse_tolerance = j.value("mse_tolerance", cfg.mse_tolerance);
        cfg.seed = j.value("seed", cfg.seed);
        cfg.activation = parse_activation(j.value("activation", std::string("linear")));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(fmt::format("invalid pilot config: {}", e.what()));
    }
    return cfg;
}

DistanceStats summarize(std::vector<double> values)
{
    DistanceStats s;
    s.count = values.size();
    if (values.empty()) {
        s.mean = s.median = s.stddev = std::numeric_limits<double>::quiet_NaN();
        return s;
    }
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    double sq = 0.0;
    for (double v : values) {
        sq += (v - s.mean) * (v - s.mean);
    }
    s.stddev = std::sqrt(sq / static_cast<double>(values.size()));
    const std::size_t mid = values.size() / 2;
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
    const double upper = values[mid];
    if (values.size() % 2 == 1) {
        s.median = upper;
    } else {
        const double lower = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
        s.median = 0.5 * (lower + upper);
    }
    return s;
}

const DistanceStats& DistanceReport::at(std::string_view phase, std::string_view reference) const
{
    const auto it = cells.find({std::string(phase), std::string(reference)});
    if (it == cells.end()) {
        throw UsageError(fmt::format("no distance cell for ({}, {})", phase, reference));
    }
    return it->second;
}

namespace {

struct Member {
    Matrix backdoor;
    TrainResult trained;
};

std::string csv_number(double v)
{
    return fmt::format("{:.17g}", v);
}

} // namespace

CohortResult run_cohort(const CohortConfig& cfg)
{
    cfg.validate();
    const TrainOptions opts = cfg.train_options();

    Rng base_rng = make_rng(cfg.seed, kBaseStream);
    const Matrix semantic = gaussian_matrix(cfg.output_dim, cfg.input_dim, cfg.semantic_scale, base_rng);
    const Matrix pretrain_inputs = gaussian_matrix(cfg.input_dim, cfg.train_set_size, 1.0, base_rng);
    const Matrix eval_inputs = gaussian_matrix(cfg.input_dim, cfg.eval_set_size, 1.0, base_rng);
    const TwoLayerNet init = random_net(cfg.input_dim, cfg.hidden_dim, cfg.output_dim, cfg.activation, base_rng);
    const TrainResult base = pretrain(init, semantic, pretrain_inputs, opts);
    if (base.diverged) {
        throw NumericError(fmt::format("pretraining diverged (relative MSE {} after {} steps); lower the learning rate",
                                       base.final_loss, base.steps));
    }

    const auto n = static_cast<std::size_t>(cfg.cohort_size);
    std::vector<Member> members(n);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t r = next++; r < n; r = next++) {
            Rng rng = make_rng(cfg.seed, kMemberStream, r);
            Matrix backdoor = gaussian_matrix(cfg.output_dim, cfg.input_dim, cfg.backdoor_scale, rng);
            const Matrix inputs = gaussian_matrix(cfg.input_dim, cfg.train_set_size, 1.0, rng);
            members[r].trained = finetune(base.net, semantic, backdoor, inputs, opts);
            members[r].backdoor = std::move(backdoor);
        }
    };
    const auto workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.jobs), n);
    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back(worker);
        }
        for (auto& t : pool) {
            t.join();
        }
    }

    DistanceReport report;
    report.activation = cfg.activation;
    report.pretrain_loss = base.final_loss;
    report.cohort_size = cfg.cohort_size;
    std::vector<std::size_t> diverged;
    for (std::size_t r = 0; r < n; ++r) {
        report.members_converged += members[r].trained.converged;
        if (members[r].trained.diverged) {
            diverged.push_back(r);
        }
    }
    report.members_diverged = static_cast<int>(diverged.size());
    if (diverged.size() * 10 > n) {
        std::string ids;
        for (std::size_t r : diverged) {
            ids += fmt::format("{}{}", ids.empty() ? "" : ",", r);
        }
        throw NumericError(fmt::format("{} of {} fine-tuning runs diverged (members {}); lower the learning rate",
                                       diverged.size(), n, ids));
    }

    std::map<std::pair<std::string, std::string>, std::vector<double>> pooled;
    std::map<std::pair<std::string, std::string>, std::pair<std::vector<double>, std::vector<double>>> adapt_pooled;
    std::string csv = "run_id,pair,phase,reference,activation,mean_dist,median_dist,std_dist,train_loss_i,train_loss_j\n";
    const std::string act_name(activation_name(cfg.activation));

    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t i = r;
        const std::size_t j = (r + 1) % n;
        const std::size_t k = (r + 2) % n;
        const TwoLayerNet& net_i = members[i].trained.net;
        const TwoLayerNet& net_j = members[j].trained.net;
        const TwoLayerNet switched = switch_pair(net_i, net_j);
        const std::pair<std::string_view, const TwoLayerNet*> phases[] = {
            {kPhases[0], &base.net}, {kPhases[1], &net_i}, {kPhases[2], &net_j}, {kPhases[3], &switched}};
        const Matrix* backdoors[] = {nullptr, &members[i].backdoor, &members[j].backdoor, &members[k].backdoor};

        for (const auto& [phase, net] : phases) {
            for (int ref = 0; ref < 4; ++ref) {
                std::vector<double> values;
                values.reserve(static_cast<std::size_t>(cfg.eval_set_size));
                for (Eigen::Index c = 0; c < eval_inputs.cols(); ++c) {
                    const Vector x = eval_inputs.col(c);
                    try {
                        values.push_back(ref == 0 ? semantic_distance(*net, semantic, x)
                                                  : backdoor_distance(*net, semantic, *backdoors[ref], x));
                    } catch (const NumericError&) {
                        ++report.skipped;
                    }
                }
                auto& sink = pooled[{std::string(phase), std::string(kReferences[ref])}];
                sink.insert(sink.end(), values.begin(), values.end());
                const DistanceStats s = summarize(std::move(values));
                csv += fmt::format("{},{}-{},{},{},{},{},{},{},{},{}\n", r, i, j, phase, kReferences[ref], act_name,
                                   csv_number(s.mean), csv_number(s.median), csv_number(s.stddev),
                                   csv_number(members[i].trained.final_loss),
                                   csv_number(members[j].trained.final_loss));
            }
        }

        if (cfg.activation == Activation::kLinear) {
            const std::pair<std::string_view, const TwoLayerNet*> nets[] = {
                {"finetuned_i", &net_i}, {"finetuned_j", &net_j}, {"switched", &switched}};
            for (const auto& [name, net] : nets) {
                const AdaptationTerms terms = decompose_adaptation(base.net, *net);
                const std::pair<std::string_view, Matrix> parts[] = {{"cross_first", terms.cross_first},
                                                                     {"cross_second", terms.cross_second},
                                                                     {"second_order", terms.second_order},
                                                                     {"adaptation", terms.adaptation()}};
                for (const auto& [term, m] : parts) {
                    auto& sink = adapt_pooled[{std::string(name), std::string(term)}];
                    try {
                        const double di = matrix_distance(m, members[i].backdoor);
                        const double dj = matrix_distance(m, members[j].backdoor);
                        sink.first.push_back(di);
                        sink.second.push_back(dj);
                    } catch (const NumericError&) {
                        ++report.skipped;
                    }
                }
            }
        }
    }

    for (auto& [key, values] : pooled) {
        report.cells[key] = summarize(std::move(values));
    }
    for (auto& [key, values] : adapt_pooled) {
        report.adaptation[key] = {summarize(std::move(values.first)), summarize(std::move(values.second))};
    }
    return CohortResult{std::move(report), std::move(csv)};
}

std::string format_report(const DistanceReport& report)
{
    std::string out = fmt::format("activation: {}\ncohort: {} (converged {}, diverged {})\npretrain relative MSE: {:.3e}\n",
                                  activation_name(report.activation), report.cohort_size, report.members_converged,
                                  report.members_diverged, report.pretrain_loss);
    if (report.skipped > 0) {
        out += fmt::format("skipped zero-norm samples: {}\n", report.skipped);
    }
    out += fmt::format("\n{:<12} {:<4} {:>10} {:>10} {:>10} {:>8}\n", "phase", "ref", "mean", "median", "std", "n");
    for (std::string_view phase : kPhases) {
        for (std::string_view ref : kReferences) {
            const auto it = report.cells.find({std::string(phase), std::string(ref)});
            if (it == report.cells.end()) {
                continue;
            }
            const DistanceStats& s = it->second;
            out += fmt::format("{:<12} {:<4} {:>10.4f} {:>10.4f} {:>10.4f} {:>8}\n", phase, ref, s.mean, s.median,
                               s.stddev, s.count);
        }
    }
    if (!report.adaptation.empty()) {
        out += fmt::format("\nweight-space adaptation vs backdoor (mean normalized distance)\n{:<12} {:<13} {:>8} {:>8}\n",
                           "network", "term", "Bi", "Bj");
        for (const auto& [key, stats] : report.adaptation) {
            out += fmt::format("{:<12} {:<13} {:>8.4f} {:>8.4f}\n", key.first, key.second, stats.first.mean,
                               stats.second.mean);
        }
    }
    return out;
}

} // namespace msd::pilot
