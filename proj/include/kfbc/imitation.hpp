#pragma once

// Behavioral cloning trainers: BC-SO / BC-OH, keyframe-weighted BC,
// HistoryDropout, DAGGER and the boosting ablation, plus the agents used to
// run policies in ToyCar.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "kfbc/demos.hpp"
#include "kfbc/envs.hpp"
#include "kfbc/keyframes.hpp"
#include "kfbc/neuralnet.hpp"

namespace kfbc {

enum class InputMode { single_observation, observation_history };

struct PolicySpec {
  std::size_t history = 0;  // H; 0 is BC-SO
  std::vector<std::size_t> hidden_dims{64, 64};
  Activation activation = Activation::relu;
  double history_dropout_rate = 0.0;  // 0 disables
  std::uint64_t init_seed = 0;

  InputMode input_mode() const {
    return history == 0 ? InputMode::single_observation : InputMode::observation_history;
  }
  void validate() const;
  MlpSpec mlp_spec(std::size_t obs_dim, std::size_t action_dim) const;
};

struct Provenance {
  std::string scheme = "uniform";
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<double> loss_trace;
};

struct TrainedPolicy {
  MlpModel model;
  PolicySpec spec;
  std::size_t obs_dim = 0;
  std::size_t action_dim = 0;
  Provenance provenance;
};

// How the trainer weights each sample. Softmax holds the APE scores and is
// normalized inside every minibatch; table holds static weights.
struct SampleWeights {
  enum class Kind { uniform, table, softmax };

  Kind kind = Kind::uniform;
  std::vector<double> values;
  double temperature = 0.0;
  std::string scheme = "uniform";

  static SampleWeights uniform();
  static SampleWeights table(const WeightTable& table);
  static SampleWeights softmax(std::vector<double> ape, double temperature);
};

// Materializes the weights for a static or per-batch scheme on `train`.
// Softmax and step need an APE table aligned with `train`; boosting is
// trained separately (see boosting_weights) and is rejected here.
SampleWeights resolve_weights(const WeightScheme& scheme, const Dataset& train,
                              const ApeTable* ape);

// Weighted BC on dataset windows. With uniform weights and H = 0 this is
// BC-SO, with H > 0 BC-OH. spec.history_dropout_rate > 0 blanks past frames.
TrainedPolicy train_bc(const Dataset& dataset, const PolicySpec& spec,
                       const SampleWeights& weights, const TrainConfig& config);

// BC-OH with each past frame o_{t-1..t-H} of each presented sample zeroed
// independently with probability spec.history_dropout_rate. No rescaling.
TrainedPolicy train_history_dropout(const Dataset& dataset, const PolicySpec& spec,
                                    const TrainConfig& config);

// Zeroes each of the first `history` frames of every row with probability p.
void mask_history(Matrix& batch, std::size_t obs_dim, std::size_t history, double p, Rng& rng);

// Deterministic forward pass clamped to [-1, 1].
std::vector<double> predict(const TrainedPolicy& policy, std::span<const double> window);

// Raw, unclamped network output.
std::vector<double> predict_raw(const TrainedPolicy& policy, std::span<const double> window);

nlohmann::json to_json(const PolicySpec& spec);
PolicySpec policy_spec_from_json(const nlohmann::json& doc);
nlohmann::json policy_to_json(const TrainedPolicy& policy);
TrainedPolicy policy_from_json(const nlohmann::json& doc);

// FNV-1a of the compact JSON dump, as 16 hex digits.
std::string hash_json(const nlohmann::json& doc);

class Agent {
 public:
  virtual ~Agent() = default;
  // Called at the start of every episode.
  virtual void reset() = 0;
  // `observation` is partial; `state` is the full state, used only by agents
  // that are allowed to see it.
  virtual std::vector<double> act(std::span<const double> observation,
                                  const ToyCarState& state, const ToyCarConfig& config) = 0;
  virtual std::string name() const = 0;
};

class ExpertAgent final : public Agent {
 public:
  void reset() override {}
  std::vector<double> act(std::span<const double>, const ToyCarState& state,
                          const ToyCarConfig& config) override {
    return {toycar_expert(state, config)};
  }
  std::string name() const override { return "expert"; }
};

class ConstantAgent final : public Agent {
 public:
  explicit ConstantAgent(double value) : value_(value) {}
  void reset() override {}
  std::vector<double> act(std::span<const double>, const ToyCarState&,
                          const ToyCarConfig&) override {
    return {value_};
  }
  std::string name() const override { return "constant"; }

 private:
  double value_;
};

// Runs a trained policy on partial observations, keeping the last H + 1
// frames. Before H steps have elapsed the first frame is repeated, matching
// dataset padding.
class PolicyAgent final : public Agent {
 public:
  explicit PolicyAgent(std::shared_ptr<const TrainedPolicy> policy);
  void reset() override { frames_.clear(); }
  std::vector<double> act(std::span<const double> observation, const ToyCarState& state,
                          const ToyCarConfig& config) override;
  std::string name() const override { return "policy"; }

 private:
  std::shared_ptr<const TrainedPolicy> policy_;
  std::vector<std::vector<double>> frames_;  // oldest first
  std::vector<double> window_;
};

struct DaggerResult {
  TrainedPolicy policy;
  std::vector<Trajectory> aggregated;
  std::vector<std::size_t> states_per_round;
};

// Round 1 runs the expert; later rounds run the current policy and label
// every visited state with the expert's action. Each round adds
// query_budget / n_rounds labeled states (the last round takes the
// remainder) and the policy is retrained from scratch on the aggregate.
DaggerResult dagger(const ToyCarConfig& env_config, const PolicySpec& policy_spec,
                    std::size_t query_budget, std::size_t n_rounds,
                    const TrainConfig& train_config, std::uint64_t seed,
                    std::size_t context = 3);

struct BoostingRound {
  std::vector<double> weights;        // weights used to train this round
  std::vector<double> normalized_loss;  // L_i / max L, empty on the last round
  double average_loss = 0.0;
  double beta = 0.0;
};

struct BoostingResult {
  WeightTable table;  // weights the final policy was trained with
  TrainedPolicy policy;
  std::vector<BoostingRound> rounds;
};

// AdaBoost.R2-style reweighting of BC-OH: each round trains on the current
// weights; between rounds w_i <- w_i * beta^(shrinkage * (1 - L_i)) with
// beta = Lbar / (1 - Lbar), then weights are rescaled to mean 1.
BoostingResult boosting_weights(const Dataset& dataset, const PolicySpec& spec,
                                const BoostingScheme& scheme, const TrainConfig& config);

}  // namespace kfbc
