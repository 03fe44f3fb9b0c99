#include "kfbc/imitation.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>

#include "kfbc/errors.hpp"
#include "kfbc/random.hpp"

namespace kfbc {

namespace {

constexpr const char* kPolicyFormat = "kfbc-policy";
constexpr int kPolicyVersion = 1;

}  // namespace

void PolicySpec::validate() const {
  for (auto h : hidden_dims) {
    if (h == 0) throw ConfigError("policy hidden widths must be positive");
  }
  if (!(history_dropout_rate >= 0.0 && history_dropout_rate < 1.0))
    throw ConfigError("history_dropout_rate must lie in [0, 1)");
  if (history_dropout_rate > 0.0 && history == 0)
    throw ConfigError("history dropout needs H > 0");
}

MlpSpec PolicySpec::mlp_spec(std::size_t obs_dim, std::size_t action_dim) const {
  return {.input_dim = (history + 1) * obs_dim,
          .hidden_dims = hidden_dims,
          .output_dim = action_dim,
          .activation = activation,
          .init_seed = init_seed};
}

SampleWeights SampleWeights::uniform() { return {}; }

SampleWeights SampleWeights::table(const WeightTable& table) {
  SampleWeights w;
  w.kind = Kind::table;
  w.values = table.weights;
  w.scheme = table.scheme;
  return w;
}

SampleWeights SampleWeights::softmax(std::vector<double> ape, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("softmax temperature must be positive");
  SampleWeights w;
  w.kind = Kind::softmax;
  w.values = std::move(ape);
  w.temperature = temperature;
  w.scheme = "softmax";
  return w;
}

SampleWeights resolve_weights(const WeightScheme& scheme, const Dataset& train,
                              const ApeTable* ape) {
  validate(scheme);
  if (needs_ape(scheme)) {
    if (ape == nullptr) throw ConfigError(scheme_name(scheme) + " weighting needs an APE table");
    if (ape->size() != train.size())
      throw ShapeError("APE table is not aligned with the training set");
  }
  if (std::holds_alternative<UniformScheme>(scheme)) return SampleWeights::uniform();
  if (const auto* s = std::get_if<SoftmaxScheme>(&scheme))
    return SampleWeights::softmax(ape->ape, s->temperature);
  if (const auto* s = std::get_if<StepScheme>(&scheme))
    return SampleWeights::table(step_weights(ape->ape, s->threshold_percent, s->weight));
  if (const auto* s = std::get_if<BcpdScheme>(&scheme)) {
    auto table = step_weights(bcpd_scores(train, s->params), s->step.threshold_percent,
                              s->step.weight);
    table.scheme = "bcpd";
    return SampleWeights::table(table);
  }
  if (const auto* s = std::get_if<ActFreqScheme>(&scheme))
    return SampleWeights::table(actfreq_weights(train.targets(), s->clusters, s->seed));
  throw ConfigError("boosting weights are produced by boosting_weights, not resolve_weights");
}

void mask_history(Matrix& batch, std::size_t obs_dim, std::size_t history, double p, Rng& rng) {
  if (batch.cols() != (history + 1) * obs_dim) throw ShapeError("batch width != (H+1)*obs_dim");
  if (p <= 0.0) return;
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    auto row = batch.row(r);
    for (std::size_t k = 0; k < history; ++k) {
      if (bernoulli(rng, p)) std::fill_n(row.begin() + k * obs_dim, obs_dim, 0.0);
    }
  }
}

TrainedPolicy train_bc(const Dataset& dataset, const PolicySpec& spec,
                       const SampleWeights& weights, const TrainConfig& config) {
  spec.validate();
  if (dataset.empty()) throw ConfigError("cannot train a policy on an empty dataset");
  if (dataset.history != spec.history)
    throw ConfigError("dataset H=" + std::to_string(dataset.history) +
                      " does not match policy H=" + std::to_string(spec.history));
  if (weights.kind != SampleWeights::Kind::uniform && weights.values.size() != dataset.size())
    throw ShapeError("sample weights are not aligned with the dataset");

  TrainingSet data{dataset.windows(), dataset.targets(), {}};
  BatchHooks hooks;
  if (weights.kind == SampleWeights::Kind::table) {
    data.weights = weights.values;
  } else if (weights.kind == SampleWeights::Kind::softmax) {
    std::vector<double> batch_scores;
    hooks.weights = [&weights, batch_scores](std::span<const std::size_t> idx,
                                             std::span<double> out) mutable {
      batch_scores.resize(idx.size());
      for (std::size_t b = 0; b < idx.size(); ++b) batch_scores[b] = weights.values[idx[b]];
      const auto w = softmax_weights(batch_scores, weights.temperature);
      std::copy(w.begin(), w.end(), out.begin());
    };
  }
  if (spec.history_dropout_rate > 0.0) {
    const std::size_t obs_dim = dataset.obs_dim;
    const std::size_t history = spec.history;
    const double p = spec.history_dropout_rate;
    hooks.inputs = [obs_dim, history, p](std::span<const std::size_t>, Matrix& batch, Rng& rng) {
      mask_history(batch, obs_dim, history, p, rng);
    };
  }

  auto trained = train_supervised(data, spec.mlp_spec(dataset.obs_dim, dataset.action_dim),
                                  config, hooks);
  TrainedPolicy policy{std::move(trained.model), spec, dataset.obs_dim, dataset.action_dim, {}};
  policy.provenance.scheme = spec.history_dropout_rate > 0.0 ? "history_dropout" : weights.scheme;
  policy.provenance.seed = config.rng_seed;
  policy.provenance.config_hash = hash_json(
      {{"spec", to_json(spec)}, {"train", to_json(config)}, {"scheme", policy.provenance.scheme}});
  policy.provenance.loss_trace = std::move(trained.loss_trace);
  return policy;
}

TrainedPolicy train_history_dropout(const Dataset& dataset, const PolicySpec& spec,
                                    const TrainConfig& config) {
  if (spec.history == 0) throw ConfigError("HistoryDropout needs H > 0");
  if (!(spec.history_dropout_rate > 0.0 && spec.history_dropout_rate < 1.0))
    throw ConfigError("HistoryDropout rate must lie in (0, 1)");
  return train_bc(dataset, spec, SampleWeights::uniform(), config);
}

std::vector<double> predict_raw(const TrainedPolicy& policy, std::span<const double> window) {
  if (window.size() != (policy.spec.history + 1) * policy.obs_dim)
    throw ShapeError("observation window has length " + std::to_string(window.size()) +
                     ", policy expects " +
                     std::to_string((policy.spec.history + 1) * policy.obs_dim));
  return forward(policy.model, window);
}

std::vector<double> predict(const TrainedPolicy& policy, std::span<const double> window) {
  auto out = predict_raw(policy, window);
  for (double& v : out) v = std::clamp(v, -1.0, 1.0);
  return out;
}

std::string hash_json(const nlohmann::json& doc) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : doc.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

nlohmann::json to_json(const PolicySpec& s) {
  return {{"history", s.history},
          {"hidden_dims", s.hidden_dims},
          {"activation", to_string(s.activation)},
          {"history_dropout_rate", s.history_dropout_rate},
          {"init_seed", s.init_seed}};
}

PolicySpec policy_spec_from_json(const nlohmann::json& doc) {
  PolicySpec s;
  s.history = doc.value("history", s.history);
  s.hidden_dims = doc.value("hidden_dims", s.hidden_dims);
  s.activation = activation_from_string(doc.value("activation", std::string("relu")));
  s.history_dropout_rate = doc.value("history_dropout_rate", s.history_dropout_rate);
  s.init_seed = doc.value("init_seed", s.init_seed);
  s.validate();
  return s;
}

nlohmann::json policy_to_json(const TrainedPolicy& p) {
  return {{"format", kPolicyFormat},
          {"version", kPolicyVersion},
          {"spec", to_json(p.spec)},
          {"obs_dim", p.obs_dim},
          {"action_dim", p.action_dim},
          {"model", model_to_json(p.model)},
          {"provenance",
           {{"scheme", p.provenance.scheme},
            {"seed", p.provenance.seed},
            {"config_hash", p.provenance.config_hash},
            {"loss_trace", p.provenance.loss_trace}}}};
}

TrainedPolicy policy_from_json(const nlohmann::json& doc) {
  if (doc.value("format", "") != kPolicyFormat) throw ConfigError("not a kfbc policy document");
  if (doc.value("version", 0) != kPolicyVersion) throw ConfigError("unsupported policy version");
  TrainedPolicy p{model_from_json(doc.at("model")), policy_spec_from_json(doc.at("spec")),
                  doc.at("obs_dim").get<std::size_t>(), doc.at("action_dim").get<std::size_t>(),
                  {}};
  if (p.model.spec().input_dim != (p.spec.history + 1) * p.obs_dim ||
      p.model.spec().output_dim != p.action_dim)
    throw ShapeError("policy spec does not match its model");
  const auto& prov = doc.at("provenance");
  p.provenance.scheme = prov.value("scheme", std::string("uniform"));
  p.provenance.seed = prov.value("seed", std::uint64_t{0});
  p.provenance.config_hash = prov.value("config_hash", std::string());
  p.provenance.loss_trace = prov.value("loss_trace", std::vector<double>{});
  return p;
}

PolicyAgent::PolicyAgent(std::shared_ptr<const TrainedPolicy> policy)
    : policy_(std::move(policy)) {
  if (!policy_) throw ConfigError("PolicyAgent needs a policy");
}

std::vector<double> PolicyAgent::act(std::span<const double> observation, const ToyCarState&,
                                     const ToyCarConfig&) {
  const std::size_t frames = policy_->spec.history + 1;
  if (observation.size() != policy_->obs_dim) throw ShapeError("observation dimension mismatch");
  if (frames_.empty()) {
    frames_.assign(frames, std::vector<double>(observation.begin(), observation.end()));
  } else {
    std::rotate(frames_.begin(), frames_.begin() + 1, frames_.end());
    frames_.back().assign(observation.begin(), observation.end());
  }
  window_.clear();
  for (const auto& f : frames_) window_.insert(window_.end(), f.begin(), f.end());
  return predict(*policy_, window_);
}

DaggerResult dagger(const ToyCarConfig& env_config, const PolicySpec& policy_spec,
                    std::size_t query_budget, std::size_t n_rounds,
                    const TrainConfig& train_config, std::uint64_t seed, std::size_t context) {
  if (n_rounds == 0) throw ConfigError("DAGGER needs at least one round");
  if (query_budget == 0) throw ConfigError("DAGGER query budget is zero and there is no seed data");
  if (query_budget < n_rounds) throw ConfigError("DAGGER needs query_budget >= n_rounds");
  policy_spec.validate();

  ToyCar env(env_config);
  std::vector<Trajectory> aggregated;
  std::vector<std::size_t> states_per_round;
  std::shared_ptr<const TrainedPolicy> current;
  std::uint64_t next_id = 0;
  const std::size_t per_round = query_budget / n_rounds;

  for (std::size_t round = 0; round < n_rounds; ++round) {
    const std::size_t quota =
        round + 1 == n_rounds ? query_budget - per_round * (n_rounds - 1) : per_round;
    ExpertAgent expert;
    std::unique_ptr<Agent> learner;
    if (round > 0) learner = std::make_unique<PolicyAgent>(current);
    Agent& actor = round == 0 ? static_cast<Agent&>(expert) : *learner;

    std::size_t collected = 0;
    std::uint64_t episode = 0;
    while (collected < quota) {
      Trajectory traj;
      traj.id = next_id++;
      traj.episode_seed = derive_seed(derive_seed(seed, round), episode++);
      auto obs = env.reset(traj.episode_seed);
      actor.reset();
      bool done = false;
      while (!done && collected < quota) {
        StepRecord rec;
        rec.observation = obs;
        rec.state = env.state();
        rec.expert_action = {toycar_expert(env.state(), env_config)};
        rec.executed_action = actor.act(obs, env.state(), env_config);
        auto outcome = env.step(rec.executed_action.front());
        rec.events = outcome.events;
        done = outcome.done;
        obs = std::move(outcome.observation);
        traj.steps.push_back(std::move(rec));
        ++collected;
      }
      aggregated.push_back(std::move(traj));
    }
    states_per_round.push_back(collected);

    const auto dataset = build_history_dataset(
        aggregated, {.history = policy_spec.history, .context = context});
    current = std::make_shared<const TrainedPolicy>(
        train_bc(dataset, policy_spec, SampleWeights::uniform(), train_config));
  }
  DaggerResult result{*current, std::move(aggregated), std::move(states_per_round)};
  result.policy.provenance.scheme = "dagger";
  return result;
}

BoostingResult boosting_weights(const Dataset& dataset, const PolicySpec& spec,
                                const BoostingScheme& scheme, const TrainConfig& config) {
  validate(WeightScheme{scheme});
  if (dataset.empty()) throw ConfigError("boosting needs a non-empty dataset");
  std::vector<double> weights(dataset.size(), 1.0);
  const Matrix inputs = dataset.windows();
  const Matrix targets = dataset.targets();

  BoostingResult result{{}, {MlpModel(spec.mlp_spec(dataset.obs_dim, dataset.action_dim)), spec,
                             dataset.obs_dim, dataset.action_dim, {}},
                        {}};
  for (std::size_t round = 0; round < scheme.rounds; ++round) {
    WeightTable table{weights, "boosting", false};
    result.policy = train_bc(dataset, spec, SampleWeights::table(table), config);
    BoostingRound record;
    record.weights = weights;
    if (round + 1 == scheme.rounds) {
      result.table = table;
      result.rounds.push_back(std::move(record));
      break;
    }

    auto losses = per_sample_squared_error(result.policy.model, inputs, targets);
    const double max_loss = *std::max_element(losses.begin(), losses.end());
    if (max_loss <= 0.0) {
      // Perfect fit: nothing left to upweight.
      record.normalized_loss.assign(losses.size(), 0.0);
      result.rounds.push_back(std::move(record));
      continue;
    }
    double weight_sum = 0.0, avg = 0.0;
    for (std::size_t i = 0; i < losses.size(); ++i) {
      losses[i] /= max_loss;
      weight_sum += weights[i];
      avg += weights[i] * losses[i];
    }
    avg /= weight_sum;
    if (avg >= 0.5)
      throw NumericError("boosting aborted: weighted average loss " + std::to_string(avg) +
                         " >= 0.5 in round " + std::to_string(round + 1));
    const double beta = avg / (1.0 - avg);
    for (std::size_t i = 0; i < weights.size(); ++i)
      weights[i] *= std::pow(beta, scheme.shrinkage * (1.0 - losses[i]));
    double mean = 0.0;
    for (double w : weights) mean += w;
    mean /= static_cast<double>(weights.size());
    for (double& w : weights) w /= mean;

    record.normalized_loss = std::move(losses);
    record.average_loss = avg;
    record.beta = beta;
    result.rounds.push_back(std::move(record));
  }
  result.policy.provenance.scheme = "boosting";
  return result;
}

}  // namespace kfbc
