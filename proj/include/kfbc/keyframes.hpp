#pragma once

// Keyframe scoring and sample weighting.
//
// A copycat predicts a_t from the past actions only. Its squared error on a
// sample (the action prediction error, APE) is large exactly where the
// expert's action departs from its recent history, i.e. at keyframes. The
// weight schemes below turn APE (or an ablation score) into per-sample loss
// weights for behavioral cloning.

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "kfbc/demos.hpp"
#include "kfbc/neuralnet.hpp"

namespace kfbc {

struct CopycatSpec {
  std::size_t context = 3;
  std::vector<std::size_t> hidden_dims{32, 32};
  Activation activation = Activation::relu;
  TrainConfig train{.learning_rate = 1e-3, .batch_size = 128, .iterations = 2000, .lr_decay = std::nullopt, .rng_seed = 0};
  std::size_t folds = 1;  // 1 = no cross-validation
  std::uint64_t seed = 0;

  void validate() const;
};

// One model per fold. Model f was trained on every fold except f; with a
// single fold the only model saw all training trajectories.
struct CopycatEnsemble {
  std::vector<MlpModel> models;
  std::map<std::uint64_t, int> fold_of_trajectory;
  std::size_t context = 0;
  std::size_t action_dim = 0;

  // Prediction for a sample from a model that never saw its trajectory. For
  // trajectories outside the training set the fold models are averaged.
  std::vector<double> predict(const HistorySample& sample) const;
  int fold_for(std::uint64_t trajectory) const;
};

CopycatEnsemble train_copycat(const Dataset& dataset, const CopycatSpec& spec);

struct ApeTable {
  std::vector<double> ape;           // aligned with the dataset
  std::vector<int> fold;             // fold of the sample, -1 if held out
  std::vector<bool> context_padded;
  double mean = 0.0;                 // empirical copycat error, the eps_CP proxy
  double p50 = 0.0;
  double p90 = 0.0;
  double p99 = 0.0;
  double max = 0.0;

  std::size_t size() const { return ape.size(); }
};

// APE_t = ||copycat(context_t) - a_t||^2 / action_dim.
ApeTable compute_ape(const CopycatEnsemble& ensemble, const Dataset& dataset);

// Fills mean and percentiles from `ape`.
void summarize(ApeTable& table);

// w_i = exp(tau * s_i) / sum_j exp(tau * s_j), max-shifted.
std::vector<double> softmax_weights(std::span<const double> scores, double temperature);

struct WeightTable {
  std::vector<double> weights;
  std::string scheme;
  bool per_batch = false;  // true only for softmax, which has no static table

  std::size_t size() const { return weights.size(); }
};

// Indices of the ceil(percent/100 * N) highest scores; ties go to the lower
// index. Sorted ascending.
std::vector<std::size_t> top_percentile_indices(std::span<const double> scores, double percent);

// Weight W on the top `threshold_percent` scores, 1 elsewhere.
WeightTable step_weights(std::span<const double> scores, double threshold_percent,
                         double weight);

struct BcpdParams {
  double hazard_rate = 0.02;
  double obs_noise_variance = 0.01;
  double prior_mean = 0.0;
  double prior_variance = 1.0;

  void validate() const;
};

// Online Bayesian changepoint detection with constant hazard and a Gaussian
// mean model of known noise variance. Element t is P(a segment starts at t |
// x_1..x_t); a new segment's first point is scored under the prior predictive.
std::vector<double> bcpd_changepoint_probabilities(std::span<const double> series,
                                                   const BcpdParams& params);

// Per trajectory and per action dimension (max over dimensions), aligned with
// the dataset's sample order.
std::vector<double> bcpd_scores(const Dataset& dataset, const BcpdParams& params);

struct KMeansResult {
  std::vector<std::size_t> assignment;
  std::vector<std::size_t> counts;
  Matrix centroids;
  std::size_t iterations = 0;
};

// Lloyd's algorithm from k-means++ seeds (k distinct samples, D^2-weighted);
// ties go to the lowest cluster index. Throws ConfigError when there are
// fewer than k distinct points or a cluster ends up empty twice.
KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed,
                    std::size_t max_iterations = 100);

// Weight N / n_c for a sample in cluster c of a k-means clustering of actions.
WeightTable actfreq_weights(const Matrix& actions, std::size_t k, std::uint64_t seed);

struct CopycatVerdict {
  bool copycat_preferred = false;  // reference_mse > eps_cp
  double margin = 0.0;             // reference_mse - eps_cp
  double eps_cp = 0.0;
  double reference_mse = 0.0;
};

CopycatVerdict copycat_condition(double eps_cp, double reference_mse);

nlohmann::json to_json(const CopycatVerdict& verdict);

struct UniformScheme {};
struct SoftmaxScheme {
  double temperature = 0.2;
};
struct StepScheme {
  double threshold_percent = 10.0;
  double weight = 5.0;
};
struct BcpdScheme {
  BcpdParams params;
  StepScheme step;
};
struct ActFreqScheme {
  std::size_t clusters = 6;
  std::uint64_t seed = 0;
};
struct BoostingScheme {
  std::size_t rounds = 3;
  double shrinkage = 1.0;  // exponent multiplier on the beta update
};

using WeightScheme =
    std::variant<UniformScheme, SoftmaxScheme, StepScheme, BcpdScheme, ActFreqScheme,
                 BoostingScheme>;

std::string scheme_name(const WeightScheme& scheme);
void validate(const WeightScheme& scheme);
bool needs_ape(const WeightScheme& scheme);

nlohmann::json to_json(const WeightScheme& scheme);
WeightScheme weight_scheme_from_json(const nlohmann::json& doc);

nlohmann::json to_json(const CopycatSpec& spec);
CopycatSpec copycat_spec_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& doc);

// sample, trajectory, step, ape, weight
void export_ape_csv(const std::filesystem::path& path, const Dataset& dataset,
                    const ApeTable& ape, std::span<const double> weights);

}  // namespace kfbc
