// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "msd/tensor_store.hpp"

namespace msd::defense {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Final linear classifier: logits = weight * feature + bias.
struct ClassifierHead {
    Matrix weight; // C x D
    Vector bias;   // C

    int num_classes() const { return static_cast<int>(weight.rows()); }
    int feature_dim() const { return static_cast<int>(weight.cols()); }
    /// Throws UsageError on inconsistent shapes or fewer than two classes.
    void validate() const;
    Vector probabilities(const Vector& feature) const;
};

/// Hidden-state features of one model on clean samples, grouped by class.
struct FeatureSet {
    std::vector<Matrix> per_class; // n_c x D; may be empty for unobserved classes
    std::vector<std::optional<Vector>> dummies;
    std::string model_id;
    std::string dataset;

    int num_classes() const { return static_cast<int>(per_class.size()); }
    /// Rows of every class except `excluded`, stacked.
    Matrix pooled(std::optional<int> excluded = std::nullopt) const;
};

struct DummyConfig {
    int steps = 500;
    double learning_rate = 0.1;
    double target_probability = 0.99;
    std::uint64_t seed = 0;
};

struct DummyResult {
    Vector feature;
    double probability = 0.0;
    int steps = 0;
    bool converged = false;
};

double softmax_cross_entropy(const ClassifierHead& head, const Vector& feature, int target);
/// W^T (softmax(W f + b) - e_target).
Vector cross_entropy_gradient(const ClassifierHead& head, const Vector& feature, int target);

/// Gradient descent from f ~ N(0, I) until the target class probability
/// reaches cfg.target_probability or the step budget runs out. The start
/// point is drawn from a substream keyed by (seed, target).
DummyResult optimize_dummy_feature(const ClassifierHead& head, int target, const DummyConfig& cfg);

/// 1 - cos(a, b), in [0, 2]. Throws NumericError on a zero-norm operand.
double cosine_distance(const Vector& a, const Vector& b);

struct SuspectResult {
    int suspect = 0;
    /// Mean cosine distance of each class's dummy to clean features of the other classes.
    std::vector<double> class_distance;
    std::vector<DummyResult> dummies;
};

/// Argmax over classes of the dummy-to-clean distance; ties go to the lowest class.
SuspectResult detect_suspect(const ClassifierHead& head, const FeatureSet& clean, const DummyConfig& cfg);

/// Modal class. Ties go to `wag_vote` when it is among the tied classes, then
/// to the lowest class index.
int majority_vote(std::span<const int> votes, std::optional<int> wag_vote = std::nullopt);

struct CandidateScore {
    std::string id;
    double mean_distance = 0.0;
    std::size_t samples = 0;
};

/// Mean over rows of 1 - cos(row, dummy).
CandidateScore feature_dist(const Matrix& features, const Vector& dummy, std::string id = {});

struct Selection {
    std::size_t winner = 0;
    std::vector<CandidateScore> scores;
};

struct CandidateFeatures {
    std::string id;
    Matrix features;
};

/// Candidate with the largest mean distance; ties go to the lowest index.
Selection select_candidate(std::span<const CandidateFeatures> candidates, const Vector& dummy);

struct ModelEvidence {
    ClassifierHead head;
    FeatureSet clean;
};

struct DefenseDecision {
    int target_class = 0;
    std::vector<int> votes;
    Vector dummy;
    Selection selection;
};

/// Suspicious-class vote over the models and their weight average, then
/// candidate selection by distance to the averaged model's dummy feature.
/// Candidate features exclude the voted class.
DefenseDecision run_defense(std::span<const ModelEvidence> models, const ModelEvidence& wag,
                            std::span<const FeatureSet> candidates, std::span<const std::string> candidate_ids,
                            const DummyConfig& cfg);

// Container files: head/weight, head/bias; class_<k>/features, class_<k>/dummy,
// with the class count in the "num_classes" metadata entry.
ClassifierHead head_from_container(const WeightMap& map);
WeightMap head_to_container(const ClassifierHead& head);
FeatureSet features_from_container(const WeightMap& map);
WeightMap features_to_container(const FeatureSet& features);

} // namespace msd::defense
