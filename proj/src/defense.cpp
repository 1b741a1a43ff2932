// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

#include "msd/defense.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <random>

#include <fmt/format.h>

#include "msd/error.hpp"
#include "msd/rng.hpp"

namespace msd::defense {

namespace {

constexpr std::uint64_t kDummyStream = 20;

Matrix tensor_matrix(const TensorRecord& rec, std::int64_t rows, std::int64_t cols)
{
    const std::vector<float> values = rec.to_floats();
    Matrix m(rows, cols);
    for (std::int64_t i = 0; i < rows; ++i) {
        for (std::int64_t j = 0; j < cols; ++j) {
            m(i, j) = values[static_cast<std::size_t>(i * cols + j)];
        }
    }
    return m;
}

TensorRecord matrix_tensor(std::string name, const Matrix& m)
{
    std::vector<float> values(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            values[static_cast<std::size_t>(i * m.cols() + j)] = static_cast<float>(m(i, j));
        }
    }
    return TensorRecord::from_floats(std::move(name), DType::kF32, {m.rows(), m.cols()}, values);
}

TensorRecord vector_tensor(std::string name, const Vector& v)
{
    std::vector<float> values(static_cast<std::size_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        values[static_cast<std::size_t>(i)] = static_cast<float>(v(i));
    }
    return TensorRecord::from_floats(std::move(name), DType::kF32, {v.size()}, values);
}

// "class_<k>/<leaf>" -> k
std::optional<int> class_index(std::string_view name, std::string_view leaf)
{
    constexpr std::string_view kPrefix = "class_";
    if (!name.starts_with(kPrefix) || !name.ends_with(leaf) || name.size() <= kPrefix.size() + leaf.size() + 1) {
        return std::nullopt;
    }
    const std::string_view digits = name.substr(kPrefix.size(), name.size() - kPrefix.size() - leaf.size() - 1);
    if (name[name.size() - leaf.size() - 1] != '/') {
        return std::nullopt;
    }
    int k = -1;
    const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), k);
    if (ec != std::errc() || ptr != digits.data() + digits.size() || k < 0) {
        return std::nullopt;
    }
    return k;
}

} // namespace

void ClassifierHead::validate() const
{
    if (weight.rows() < 2 || weight.cols() < 1) {
        throw UsageError(fmt::format("classifier head needs >= 2 classes and >= 1 feature, got {}x{}", weight.rows(),
                                     weight.cols()));
    }
    if (bias.size() != weight.rows()) {
        throw UsageError(fmt::format("classifier bias has {} entries for {} classes", bias.size(), weight.rows()));
    }
}

Vector ClassifierHead::probabilities(const Vector& feature) const
{
    Vector logits = weight * feature + bias;
    logits.array() -= logits.maxCoeff();
    Vector p = logits.array().exp().matrix();
    return p / p.sum();
}

Matrix FeatureSet::pooled(std::optional<int> excluded) const
{
    Eigen::Index rows = 0;
    Eigen::Index dim = -1;
    for (int c = 0; c < num_classes(); ++c) {
        if (excluded && *excluded == c) {
            continue;
        }
        rows += per_class[c].rows();
        if (per_class[c].rows() > 0) {
            dim = per_class[c].cols();
        }
    }
    if (dim < 0) {
        throw DataError("no clean features outside the excluded class");
    }
    Matrix out(rows, dim);
    Eigen::Index at = 0;
    for (int c = 0; c < num_classes(); ++c) {
        if ((excluded && *excluded == c) || per_class[c].rows() == 0) {
            continue;
        }
        out.middleRows(at, per_class[c].rows()) = per_class[c];
        at += per_class[c].rows();
    }
    return out;
}

double softmax_cross_entropy(const ClassifierHead& head, const Vector& feature, int target)
{
    const Vector logits = head.weight * feature + head.bias;
    const double top = logits.maxCoeff();
    const double lse = top + std::log((logits.array() - top).exp().sum());
    return lse - logits(target);
}

Vector cross_entropy_gradient(const ClassifierHead& head, const Vector& feature, int target)
{
    Vector delta = head.probabilities(feature);
    delta(target) -= 1.0;
    return head.weight.transpose() * delta;
}

DummyResult optimize_dummy_feature(const ClassifierHead& head, int target, const DummyConfig& cfg)
{
    head.validate();
    if (target < 0 || target >= head.num_classes()) {
        throw UsageError(fmt::format("target class {} outside [0, {})", target, head.num_classes()));
    }
    Rng rng = make_rng(cfg.seed, kDummyStream, static_cast<std::uint64_t>(target));
    std::normal_distribution<double> normal(0.0, 1.0);
    DummyResult result;
    result.feature.resize(head.feature_dim());
    for (Eigen::Index i = 0; i < result.feature.size(); ++i) {
        result.feature(i) = normal(rng);
    }
    for (int step = 0; step < cfg.steps; ++step) {
        result.probability = head.probabilities(result.feature)(target);
        if (result.probability >= cfg.target_probability) {
            result.converged = true;
            return result;
        }
        result.feature -= cfg.learning_rate * cross_entropy_gradient(head, result.feature, target);
        ++result.steps;
    }
    result.probability = head.probabilities(result.feature)(target);
    result.converged = result.probability >= cfg.target_probability;
    return result;
}

double cosine_distance(const Vector& a, const Vector& b)
{
    if (a.size() != b.size()) {
        throw UsageError(fmt::format("cosine distance of vectors of length {} and {}", a.size(), b.size()));
    }
    const double na = a.norm();
    const double nb = b.norm();
    if (!(na > 0.0) || !(nb > 0.0) || !std::isfinite(na) || !std::isfinite(nb)) {
        throw NumericError("cosine distance with a zero-norm or non-finite vector");
    }
    const double cos = std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
    return 1.0 - cos;
}

SuspectResult detect_suspect(const ClassifierHead& head, const FeatureSet& clean, const DummyConfig& cfg)
{
    head.validate();
    const int classes = head.num_classes();
    if (clean.num_classes() < classes) {
        throw DataError(fmt::format("clean features cover {} classes, the head has {}", clean.num_classes(), classes));
    }
    for (int c = 0; c < classes; ++c) {
        if (clean.per_class[c].rows() == 0) {
            throw DataError(fmt::format("no clean features for class {}", c));
        }
        if (clean.per_class[c].cols() != head.feature_dim()) {
            throw DataError(fmt::format("class {} features have dimension {}, the head expects {}", c,
                                        clean.per_class[c].cols(), head.feature_dim()));
        }
    }
    SuspectResult result;
    result.class_distance.assign(static_cast<std::size_t>(classes), 0.0);
    for (int c = 0; c < classes; ++c) {
        result.dummies.push_back(optimize_dummy_feature(head, c, cfg));
        const Vector& dummy = result.dummies.back().feature;
        double sum = 0.0;
        std::size_t count = 0;
        for (int other = 0; other < classes; ++other) {
            if (other == c) {
                continue;
            }
            const Matrix& rows = clean.per_class[other];
            for (Eigen::Index r = 0; r < rows.rows(); ++r) {
                sum += cosine_distance(rows.row(r).transpose(), dummy);
                ++count;
            }
        }
        result.class_distance[c] = sum / static_cast<double>(count);
        if (result.class_distance[c] > result.class_distance[result.suspect]) {
            result.suspect = c;
        }
    }
    return result;
}

int majority_vote(std::span<const int> votes, std::optional<int> wag_vote)
{
    if (votes.empty()) {
        throw UsageError("majority vote over no votes");
    }
    std::map<int, int> counts;
    for (int v : votes) {
        ++counts[v];
    }
    int top = 0;
    for (const auto& [cls, n] : counts) {
        top = std::max(top, n);
    }
    if (wag_vote) {
        const auto it = counts.find(*wag_vote);
        if (it != counts.end() && it->second == top) {
            return *wag_vote;
        }
    }
    for (const auto& [cls, n] : counts) {
        if (n == top) {
            return cls;
        }
    }
    return votes.front();
}

CandidateScore feature_dist(const Matrix& features, const Vector& dummy, std::string id)
{
    if (features.rows() == 0) {
        throw UsageError(fmt::format("candidate '{}' has no feature rows", id));
    }
    if (features.cols() != dummy.size()) {
        throw DataError(fmt::format("candidate '{}' features have dimension {}, dummy has {}", id, features.cols(),
                                    dummy.size()));
    }
    double sum = 0.0;
    for (Eigen::Index r = 0; r < features.rows(); ++r) {
        try {
            sum += cosine_distance(features.row(r).transpose(), dummy);
        } catch (const NumericError&) {
            throw NumericError(fmt::format("candidate '{}': feature row {} (or the dummy) has zero norm", id, r));
        }
    }
    return CandidateScore{std::move(id), sum / static_cast<double>(features.rows()),
                          static_cast<std::size_t>(features.rows())};
}

Selection select_candidate(std::span<const CandidateFeatures> candidates, const Vector& dummy)
{
    if (candidates.empty()) {
        throw UsageError("no candidates to select from");
    }
    Selection sel;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        sel.scores.push_back(feature_dist(candidates[i].features, dummy, candidates[i].id));
        if (sel.scores[i].mean_distance > sel.scores[sel.winner].mean_distance) {
            sel.winner = i;
        }
    }
    return sel;
}

DefenseDecision run_defense(std::span<const ModelEvidence> models, const ModelEvidence& wag,
                            std::span<const FeatureSet> candidates, std::span<const std::string> candidate_ids,
                            const DummyConfig& cfg)
{
    if (candidates.size() != candidate_ids.size()) {
        throw UsageError("candidate ids and feature sets differ in count");
    }
    DefenseDecision decision;
    for (const ModelEvidence& m : models) {
        decision.votes.push_back(detect_suspect(m.head, m.clean, cfg).suspect);
    }
    const SuspectResult wag_result = detect_suspect(wag.head, wag.clean, cfg);
    decision.votes.push_back(wag_result.suspect);
    decision.target_class = majority_vote(decision.votes, wag_result.suspect);
    decision.dummy = wag_result.dummies[static_cast<std::size_t>(decision.target_class)].feature;

    std::vector<CandidateFeatures> scored;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        scored.push_back({candidate_ids[i], candidates[i].pooled(decision.target_class)});
    }
    decision.selection = select_candidate(scored, decision.dummy);
    return decision;
}

ClassifierHead head_from_container(const WeightMap& map)
{
    const TensorRecord& w = map.at("head/weight");
    const TensorRecord& b = map.at("head/bias");
    if (w.shape.size() != 2 || b.shape.size() != 1 || b.shape[0] != w.shape[0]) {
        throw DataError("head/weight must be [C, D] and head/bias [C]");
    }
    ClassifierHead head;
    head.weight = tensor_matrix(w, w.shape[0], w.shape[1]);
    head.bias = tensor_matrix(b, b.shape[0], 1).col(0);
    try {
        head.validate();
    } catch (const UsageError& e) {
        throw DataError(e.what());
    }
    return head;
}

WeightMap head_to_container(const ClassifierHead& head)
{
    head.validate();
    WeightMap map;
    map.add(matrix_tensor("head/weight", head.weight));
    map.add(vector_tensor("head/bias", head.bias));
    return map;
}

FeatureSet features_from_container(const WeightMap& map)
{
    FeatureSet fs;
    for (const auto& t : map.tensors()) {
        if (const auto k = class_index(t.name, "features")) {
            if (t.shape.size() != 2) {
                throw DataError(fmt::format("'{}' must be a [n, D] matrix", t.name));
            }
            if (static_cast<int>(fs.per_class.size()) <= *k) {
                fs.per_class.resize(static_cast<std::size_t>(*k) + 1);
            }
            fs.per_class[*k] = tensor_matrix(t, t.shape[0], t.shape[1]);
        }
    }
    fs.dummies.resize(fs.per_class.size());
    for (const auto& t : map.tensors()) {
        if (const auto k = class_index(t.name, "dummy")) {
            if (t.shape.size() != 1) {
                throw DataError(fmt::format("'{}' must be a [D] vector", t.name));
            }
            if (static_cast<int>(fs.dummies.size()) <= *k) {
                fs.dummies.resize(static_cast<std::size_t>(*k) + 1);
                fs.per_class.resize(fs.dummies.size());
            }
            fs.dummies[*k] = tensor_matrix(t, t.shape[0], 1).col(0);
        }
    }
    if (const auto it = map.metadata.find("num_classes"); it != map.metadata.end()) {
        int n = -1;
        const auto [ptr, ec] = std::from_chars(it->second.data(), it->second.data() + it->second.size(), n);
        if (ec != std::errc() || ptr != it->second.data() + it->second.size() || n < 0 ||
            n < static_cast<int>(fs.per_class.size())) {
            throw DataError(fmt::format("invalid num_classes metadata '{}'", it->second));
        }
        fs.per_class.resize(static_cast<std::size_t>(n));
        fs.dummies.resize(static_cast<std::size_t>(n));
    }
    for (const auto& block : fs.per_class) {
        if (!block.allFinite()) {
            throw DataError("feature file holds non-finite values");
        }
    }
    if (const auto it = map.metadata.find("model_id"); it != map.metadata.end()) {
        fs.model_id = it->second;
    }
    if (const auto it = map.metadata.find("dataset"); it != map.metadata.end()) {
        fs.dataset = it->second;
    }
    return fs;
}

WeightMap features_to_container(const FeatureSet& features)
{
    WeightMap map;
    const std::size_t classes = std::max(features.per_class.size(), features.dummies.size());
    map.metadata["num_classes"] = std::to_string(classes);
    for (int c = 0; c < features.num_classes(); ++c) {
        if (features.per_class[c].rows() > 0) {
            map.add(matrix_tensor(fmt::format("class_{}/features", c), features.per_class[c]));
        }
    }
    for (std::size_t c = 0; c < features.dummies.size(); ++c) {
        if (features.dummies[c]) {
            map.add(vector_tensor(fmt::format("class_{}/dummy", c), *features.dummies[c]));
        }
    }
    if (!features.model_id.empty()) {
        map.metadata["model_id"] = features.model_id;
    }
    if (!features.dataset.empty()) {
        map.metadata["dataset"] = features.dataset;
    }
    return map;
}

} // namespace msd::defense
