#include "kfbc/errors.hpp"
#include "kfbc/keyframes.hpp"

namespace kfbc {

namespace {

template <class... Fs>
struct Overloaded : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

}  // namespace

std::string scheme_name(const WeightScheme& scheme) {
  return std::visit(Overloaded{[](const UniformScheme&) { return std::string("uniform"); },
                               [](const SoftmaxScheme&) { return std::string("softmax"); },
                               [](const StepScheme&) { return std::string("step"); },
                               [](const BcpdScheme&) { return std::string("bcpd"); },
                               [](const ActFreqScheme&) { return std::string("actfreq"); },
                               [](const BoostingScheme&) { return std::string("boosting"); }},
                    scheme);
}

bool needs_ape(const WeightScheme& scheme) {
  return std::holds_alternative<SoftmaxScheme>(scheme) ||
         std::holds_alternative<StepScheme>(scheme);
}

void validate(const WeightScheme& scheme) {
  auto check_step = [](const StepScheme& s) {
    if (!(s.threshold_percent > 0.0 && s.threshold_percent <= 100.0))
      throw ConfigError("step THR must lie in (0, 100]");
    if (!(s.weight >= 1.0)) throw ConfigError("step W must be at least 1");
  };
  std::visit(Overloaded{[](const UniformScheme&) {},
                        [](const SoftmaxScheme& s) {
                          if (!(s.temperature > 0.0))
                            throw ConfigError("softmax temperature must be positive");
                        },
                        check_step,
                        [&](const BcpdScheme& s) {
                          s.params.validate();
                          check_step(s.step);
                        },
                        [](const ActFreqScheme& s) {
                          if (s.clusters < 2) throw ConfigError("actfreq needs k >= 2");
                        },
                        [](const BoostingScheme& s) {
                          if (s.rounds < 1) throw ConfigError("boosting needs rounds >= 1");
                          if (!(s.shrinkage > 0.0))
                            throw ConfigError("boosting shrinkage must be positive");
                        }},
             scheme);
}

nlohmann::json to_json(const WeightScheme& scheme) {
  nlohmann::json doc = std::visit(
      Overloaded{[](const UniformScheme&) { return nlohmann::json::object(); },
                 [](const SoftmaxScheme& s) { return nlohmann::json{{"temperature", s.temperature}}; },
                 [](const StepScheme& s) {
                   return nlohmann::json{{"threshold_percent", s.threshold_percent},
                                         {"weight", s.weight}};
                 },
                 [](const BcpdScheme& s) {
                   return nlohmann::json{{"hazard_rate", s.params.hazard_rate},
                                         {"obs_noise_variance", s.params.obs_noise_variance},
                                         {"prior_mean", s.params.prior_mean},
                                         {"prior_variance", s.params.prior_variance},
                                         {"threshold_percent", s.step.threshold_percent},
                                         {"weight", s.step.weight}};
                 },
                 [](const ActFreqScheme& s) {
                   return nlohmann::json{{"clusters", s.clusters}, {"seed", s.seed}};
                 },
                 [](const BoostingScheme& s) {
                   return nlohmann::json{{"rounds", s.rounds}, {"shrinkage", s.shrinkage}};
                 }},
      scheme);
  doc["type"] = scheme_name(scheme);
  return doc;
}

WeightScheme weight_scheme_from_json(const nlohmann::json& doc) {
  const auto type = doc.value("type", std::string("uniform"));
  WeightScheme scheme;
  if (type == "uniform") {
    scheme = UniformScheme{};
  } else if (type == "softmax") {
    scheme = SoftmaxScheme{doc.value("temperature", 0.2)};
  } else if (type == "step") {
    scheme = StepScheme{doc.value("threshold_percent", 10.0), doc.value("weight", 5.0)};
  } else if (type == "bcpd") {
    BcpdScheme s;
    s.params.hazard_rate = doc.value("hazard_rate", s.params.hazard_rate);
    s.params.obs_noise_variance = doc.value("obs_noise_variance", s.params.obs_noise_variance);
    s.params.prior_mean = doc.value("prior_mean", s.params.prior_mean);
    s.params.prior_variance = doc.value("prior_variance", s.params.prior_variance);
    s.step = {doc.value("threshold_percent", 10.0), doc.value("weight", 5.0)};
    scheme = s;
  } else if (type == "actfreq") {
    scheme = ActFreqScheme{doc.value("clusters", std::size_t{6}), doc.value("seed", std::uint64_t{0})};
  } else if (type == "boosting") {
    scheme = BoostingScheme{doc.value("rounds", std::size_t{3}), doc.value("shrinkage", 1.0)};
  } else {
    throw ConfigError("unknown weight scheme '" + type + "'");
  }
  validate(scheme);
  return scheme;
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json doc{{"learning_rate", c.learning_rate},
                     {"batch_size", c.batch_size},
                     {"iterations", c.iterations},
                     {"rng_seed", c.rng_seed}};
  if (c.lr_decay)
    doc["lr_decay"] = {{"factor", c.lr_decay->factor},
                       {"patience_iterations", c.lr_decay->patience_iterations}};
  return doc;
}

TrainConfig train_config_from_json(const nlohmann::json& doc) {
  TrainConfig c;
  c.learning_rate = doc.value("learning_rate", c.learning_rate);
  c.batch_size = doc.value("batch_size", c.batch_size);
  c.iterations = doc.value("iterations", c.iterations);
  c.rng_seed = doc.value("rng_seed", c.rng_seed);
  if (doc.contains("lr_decay") && !doc.at("lr_decay").is_null()) {
    const auto& d = doc.at("lr_decay");
    c.lr_decay = LrDecay{d.value("factor", 0.1), d.value("patience_iterations", std::size_t{1000})};
  }
  c.validate();
  return c;
}

nlohmann::json to_json(const CopycatSpec& s) {
  return {{"context", s.context},
          {"hidden_dims", s.hidden_dims},
          {"activation", to_string(s.activation)},
          {"train", to_json(s.train)},
          {"folds", s.folds},
          {"seed", s.seed}};
}

CopycatSpec copycat_spec_from_json(const nlohmann::json& doc) {
  CopycatSpec s;
  s.context = doc.value("context", s.context);
  s.hidden_dims = doc.value("hidden_dims", s.hidden_dims);
  s.activation = activation_from_string(doc.value("activation", std::string("relu")));
  if (doc.contains("train")) {
    auto train = to_json(s.train);
    train.merge_patch(doc.at("train"));
    s.train = train_config_from_json(train);
  }
  s.folds = doc.value("folds", s.folds);
  s.seed = doc.value("seed", s.seed);
  s.validate();
  return s;
}

}  // namespace kfbc
