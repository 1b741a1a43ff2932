// Copyright 2026 The MSD Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "msd/rng.hpp"

namespace msd::pilot {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { kLinear, kRelu, kTanh, kSigmoid };

Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation a);

/// y = W2 * act(W1 * x), W1: K x N, W2: M x K.
struct TwoLayerNet {
    Matrix w1;
    Matrix w2;
    Activation activation = Activation::kLinear;

    int input_dim() const { return static_cast<int>(w1.cols()); }
    int hidden_dim() const { return static_cast<int>(w1.rows()); }
    int output_dim() const { return static_cast<int>(w2.rows()); }

    Vector forward(const Vector& x) const;
    /// Columns of `inputs` are samples.
    Matrix forward_batch(const Matrix& inputs) const;
};

/// W1 ~ N(0, 1/N), W2 ~ N(0, 1/K).
TwoLayerNet random_net(int input_dim, int hidden_dim, int output_dim, Activation act, Rng& rng);
Matrix gaussian_matrix(int rows, int cols, double stddev, Rng& rng);

struct TrainOptions {
    double learning_rate = 0.05;
    int max_steps = 5000;
    /// Stop once ||Y - f(X)||^2 / ||Y||^2 falls below this.
    double mse_tolerance = 1e-3;
};

struct TrainResult {
    TwoLayerNet net;
    /// Relative MSE after the last step.
    double final_loss = 0.0;
    double initial_loss = 0.0;
    int steps = 0;
    bool converged = false;
    /// Non-finite or exploding loss.
    bool diverged = false;
    /// Relative MSE before each step, then the final value.
    std::vector<double> loss_curve;
};

/// Full-batch gradient descent on mean squared error against target * x over
/// the columns of `inputs`. Linear nets train on the input second-moment
/// matrix, which yields the same gradient as the per-sample sum.
TrainResult train_toward(TwoLayerNet net, const Matrix& target, const Matrix& inputs, const TrainOptions& opts);

TrainResult pretrain(const TwoLayerNet& net, const Matrix& semantic, const Matrix& inputs, const TrainOptions& opts);
TrainResult finetune(const TwoLayerNet& net, const Matrix& semantic, const Matrix& backdoor, const Matrix& inputs,
                     const TrainOptions& opts);

/// W1 from `first`, W2 from `second`. Throws UsageError on shape or activation mismatch.
TwoLayerNet switch_pair(const TwoLayerNet& first, const TwoLayerNet& second);

Vector normalized(const Vector& v);
/// || norm(f(x)) - norm(Sx) ||, in [0, 2].
double semantic_distance(const TwoLayerNet& net, const Matrix& semantic, const Vector& x);
/// || norm(f(x) - Sx) - norm(Bx) ||, in [0, 2].
double backdoor_distance(const TwoLayerNet& net, const Matrix& semantic, const Matrix& backdoor, const Vector& x);

struct AdaptationTerms {
    Matrix semantic;     // W2 W1
    Matrix cross_first;  // W2 dW1
    Matrix cross_second; // dW2 W1
    Matrix second_order; // dW2 dW1

    Matrix adaptation() const { return cross_first + cross_second + second_order; }
    Matrix sum() const { return semantic + adaptation(); }
};

/// Expansion of W2' W1' around (W1, W2). Linear nets only.
AdaptationTerms decompose_adaptation(const TwoLayerNet& before, const TwoLayerNet& after);

/// Flatten, unit-Frobenius normalize, Euclidean distance.
double matrix_distance(const Matrix& a, const Matrix& b);

struct CohortConfig {
    int input_dim = 16;
    int output_dim = 16;
    int hidden_dim = 32;
    int cohort_size = 100;
    double semantic_scale = 1.0;
    double backdoor_scale = 0.1;
    int train_set_size = 4096;
    int eval_set_size = 256;
    double learning_rate = 0.05;
    int max_steps = 5000;
    double mse_tolerance = 1e-3;
    std::uint64_t seed = 0;
    Activation activation = Activation::kLinear;
    /// Worker threads for member training; results do not depend on it.
    int jobs = 1;

    void validate() const;
    TrainOptions train_options() const { return {learning_rate, max_steps, mse_tolerance}; }
};

nlohmann::json to_json(const CohortConfig& cfg);
CohortConfig cohort_config_from_json(const nlohmann::json& j);

struct DistanceStats {
    double mean = 0.0;
    double median = 0.0;
    double stddev = 0.0;
    std::size_t count = 0;
};

DistanceStats summarize(std::vector<double> values);

inline constexpr std::string_view kPhases[] = {"pretrained", "finetuned_i", "finetuned_j", "switched"};
inline constexpr std::string_view kReferences[] = {"S", "Bi", "Bj", "Bk"};

struct DistanceReport {
    Activation activation = Activation::kLinear;
    /// (phase, reference) -> pooled statistics over eval inputs and tuples.
    std::map<std::pair<std::string, std::string>, DistanceStats> cells;
    /// Linear nets only: (network, term) -> distance to (Bi, Bj).
    std::map<std::pair<std::string, std::string>, std::pair<DistanceStats, DistanceStats>> adaptation;
    double pretrain_loss = 0.0;
    int members_converged = 0;
    int members_diverged = 0;
    int cohort_size = 0;
    /// Samples skipped because an operand had zero norm.
    std::size_t skipped = 0;

    const DistanceStats& at(std::string_view phase, std::string_view reference) const;
};

struct CohortResult {
    DistanceReport report;
    std::string csv;
};

/// Pretrains one base net toward S, fine-tunes cohort_size copies toward
/// S + B_r, and measures tuples (i = r, j = r+1, k = r+2 mod n).
CohortResult run_cohort(const CohortConfig& cfg);

std::string format_report(const DistanceReport& report);

} // namespace msd::pilot
