#include "kfbc/neuralnet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "kfbc/errors.hpp"

namespace kfbc {

namespace {

constexpr const char* kModelFormat = "kfbc-mlp";
constexpr int kModelVersion = 1;

double activate(Activation activation, double z) {
  return activation == Activation::relu ? (z > 0.0 ? z : 0.0) : std::tanh(z);
}

// Derivative expressed through the pre-activation z and output a.
double activate_grad(Activation activation, double z, double a) {
  return activation == Activation::relu ? (z > 0.0 ? 1.0 : 0.0) : 1.0 - a * a;
}

void require_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
  }
}

// Per-sample activations for one forward pass, kept for backprop.
struct Trace {
  std::vector<std::vector<double>> pre;   // z per layer
  std::vector<std::vector<double>> post;  // a per layer, post[0] = input

  explicit Trace(const MlpModel& model) {
    post.resize(model.num_layers() + 1);
    pre.resize(model.num_layers());
    post[0].resize(model.layer_inputs(0));
    for (std::size_t l = 0; l < model.num_layers(); ++l) {
      pre[l].resize(model.layer_outputs(l));
      post[l + 1].resize(model.layer_outputs(l));
    }
  }
};

void run_forward(const MlpModel& model, std::span<const double> input, Trace& trace) {
  std::copy(input.begin(), input.end(), trace.post[0].begin());
  const std::size_t last = model.num_layers() - 1;
  const Activation act = model.spec().activation;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const auto w = model.weights(l);
    const auto b = model.biases(l);
    const std::size_t n_in = model.layer_inputs(l);
    const auto& a_in = trace.post[l];
    auto& z = trace.pre[l];
    auto& a_out = trace.post[l + 1];
    for (std::size_t o = 0; o < z.size(); ++o) {
      const double* row = w.data() + o * n_in;
      double sum = b[o];
      for (std::size_t i = 0; i < n_in; ++i) sum += row[i] * a_in[i];
      z[o] = sum;
      a_out[o] = l == last ? sum : activate(act, sum);
    }
  }
}

void check_batch(const MlpModel& model, const Matrix& inputs, const Matrix& targets,
                 std::span<const double> weights) {
  if (inputs.cols() != model.spec().input_dim)
    throw ShapeError("input width " + std::to_string(inputs.cols()) + " != input_dim " +
                     std::to_string(model.spec().input_dim));
  if (targets.cols() != model.spec().output_dim)
    throw ShapeError("target width " + std::to_string(targets.cols()) +
                     " != output_dim " + std::to_string(model.spec().output_dim));
  if (inputs.rows() != targets.rows())
    throw ShapeError("inputs and targets have different batch sizes");
  if (!weights.empty() && weights.size() != inputs.rows())
    throw ShapeError("weights and inputs have different batch sizes");
  require_finite(inputs.data(), "inputs");
  require_finite(targets.data(), "targets");
  require_finite(weights, "weights");
  for (double w : weights) {
    if (w < 0.0) throw ConfigError("sample weights must be non-negative");
  }
}

}  // namespace

std::string to_string(Activation activation) {
  return activation == Activation::relu ? "relu" : "tanh";
}

Activation activation_from_string(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + name + "'");
}

void MlpSpec::validate() const {
  if (input_dim == 0) throw ConfigError("input_dim must be positive");
  if (output_dim == 0) throw ConfigError("output_dim must be positive");
  for (std::size_t h : hidden_dims) {
    if (h == 0) throw ConfigError("hidden layer widths must be positive");
  }
}

std::vector<std::size_t> MlpSpec::layer_sizes() const {
  std::vector<std::size_t> sizes{input_dim};
  sizes.insert(sizes.end(), hidden_dims.begin(), hidden_dims.end());
  sizes.push_back(output_dim);
  return sizes;
}

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return {};
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != m.cols()) throw ShapeError("ragged rows");
    std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
  }
  return m;
}

MlpModel::MlpModel(MlpSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  const auto sizes = spec_.layer_sizes();
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    fan_in_.push_back(sizes[l]);
    fan_out_.push_back(sizes[l + 1]);
    weight_offset_.push_back(offset);
    offset += sizes[l] * sizes[l + 1];
    bias_offset_.push_back(offset);
    offset += sizes[l + 1];
  }
  params_.assign(offset, 0.0);
}

std::span<double> MlpModel::weights(std::size_t layer) {
  return {params_.data() + weight_offset_[layer], fan_in_[layer] * fan_out_[layer]};
}
std::span<const double> MlpModel::weights(std::size_t layer) const {
  return {params_.data() + weight_offset_[layer], fan_in_[layer] * fan_out_[layer]};
}
std::span<double> MlpModel::biases(std::size_t layer) {
  return {params_.data() + bias_offset_[layer], fan_out_[layer]};
}
std::span<const double> MlpModel::biases(std::size_t layer) const {
  return {params_.data() + bias_offset_[layer], fan_out_[layer]};
}

MlpModel init_mlp(const MlpSpec& spec) {
  MlpModel model(spec);
  Rng rng(spec.init_seed);
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(model.layer_inputs(l)));
    for (double& w : model.weights(l)) w = uniform_real(rng, -bound, bound);
    for (double& b : model.biases(l)) b = uniform_real(rng, -bound, bound);
  }
  return model;
}

std::vector<double> forward(const MlpModel& model, std::span<const double> input) {
  if (input.size() != model.spec().input_dim)
    throw ShapeError("input length " + std::to_string(input.size()) + " != input_dim " +
                     std::to_string(model.spec().input_dim));
  require_finite(input, "forward input");
  Trace trace(model);
  run_forward(model, input, trace);
  return trace.post.back();
}

LossGradient weighted_mse_backward(const MlpModel& model, const Matrix& inputs,
                                   const Matrix& targets,
                                   std::span<const double> weights) {
  check_batch(model, inputs, targets, weights);
  if (weights.size() != inputs.rows())
    throw ShapeError("weights and inputs have different batch sizes");

  LossGradient result;
  result.gradient.assign(model.parameter_count(), 0.0);
  const std::size_t batch = inputs.rows();
  if (batch == 0) return result;

  const std::size_t out_dim = model.spec().output_dim;
  const double scale = 1.0 / (static_cast<double>(batch) * static_cast<double>(out_dim));
  const Activation act = model.spec().activation;
  const std::size_t n_layers = model.num_layers();

  Trace trace(model);
  std::vector<std::vector<double>> delta(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) delta[l].resize(model.layer_outputs(l));

  double loss = 0.0;
  for (std::size_t i = 0; i < batch; ++i) {
    const double w_i = weights[i];
    if (w_i == 0.0) continue;
    run_forward(model, inputs.row(i), trace);
    const auto& pred = trace.post.back();
    const auto target = targets.row(i);
    double sq = 0.0;
    for (std::size_t k = 0; k < out_dim; ++k) {
      const double d = pred[k] - target[k];
      sq += d * d;
      delta[n_layers - 1][k] = 2.0 * w_i * scale * d;
    }
    loss += w_i * (sq / static_cast<double>(out_dim));

    for (std::size_t l = n_layers; l-- > 0;) {
      const std::size_t n_in = model.layer_inputs(l);
      const auto& a_in = trace.post[l];
      const auto& d = delta[l];
      double* gw = result.gradient.data() + model.weight_offset(l);
      double* gb = result.gradient.data() + model.bias_offset(l);
      for (std::size_t o = 0; o < d.size(); ++o) {
        gb[o] += d[o];
        double* grow = gw + o * n_in;
        for (std::size_t j = 0; j < n_in; ++j) grow[j] += d[o] * a_in[j];
      }
      if (l == 0) break;
      const auto w = model.weights(l);
      auto& d_prev = delta[l - 1];
      const auto& z_prev = trace.pre[l - 1];
      const auto& a_prev = trace.post[l];
      for (std::size_t j = 0; j < n_in; ++j) {
        double sum = 0.0;
        for (std::size_t o = 0; o < d.size(); ++o) sum += w[o * n_in + j] * d[o];
        d_prev[j] = sum * activate_grad(act, z_prev[j], a_prev[j]);
      }
    }
  }
  result.loss = loss / static_cast<double>(batch);
  return result;
}

double weighted_mse(const MlpModel& model, const Matrix& inputs, const Matrix& targets,
                    std::span<const double> weights) {
  check_batch(model, inputs, targets, weights);
  if (inputs.rows() == 0) return 0.0;
  const auto errors = per_sample_squared_error(model, inputs, targets);
  double loss = 0.0;
  for (std::size_t i = 0; i < errors.size(); ++i) {
    loss += (weights.empty() ? 1.0 : weights[i]) * errors[i];
  }
  return loss / static_cast<double>(inputs.rows());
}

std::vector<double> per_sample_squared_error(const MlpModel& model, const Matrix& inputs,
                                             const Matrix& targets) {
  check_batch(model, inputs, targets, {});
  Trace trace(model);
  const std::size_t out_dim = model.spec().output_dim;
  std::vector<double> errors(inputs.rows());
  for (std::size_t i = 0; i < inputs.rows(); ++i) {
    run_forward(model, inputs.row(i), trace);
    const auto& pred = trace.post.back();
    double sq = 0.0;
    for (std::size_t k = 0; k < out_dim; ++k) {
      const double d = pred[k] - targets(i, k);
      sq += d * d;
    }
    errors[i] = sq / static_cast<double>(out_dim);
  }
  return errors;
}

AdamState AdamState::for_model(const MlpModel& model) {
  AdamState state;
  state.first_moment.assign(model.parameter_count(), 0.0);
  state.second_moment.assign(model.parameter_count(), 0.0);
  return state;
}

void adam_step(MlpModel& model, std::span<const double> gradient, AdamState& state,
               double learning_rate) {
  auto params = model.parameters();
  if (gradient.size() != params.size() || state.first_moment.size() != params.size() ||
      state.second_moment.size() != params.size())
    throw ShapeError("gradient / optimizer state does not match parameter count");
  require_finite(gradient, "gradient");

  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = gradient[i];
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g * g;
    const double m_hat = m / correction1;
    const double v_hat = v / correction2;
    params[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("learning_rate must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (iterations == 0) throw ConfigError("iterations must be positive");
  if (lr_decay) {
    if (!(lr_decay->factor > 0.0 && lr_decay->factor < 1.0))
      throw ConfigError("lr_decay.factor must be in (0, 1)");
    if (lr_decay->patience_iterations == 0)
      throw ConfigError("lr_decay.patience_iterations must be positive");
  }
}

TrainResult train_supervised(const TrainingSet& data, const MlpSpec& spec,
                             const TrainConfig& config, const BatchHooks& hooks) {
  config.validate();
  const std::size_t n = data.inputs.rows();
  if (n == 0) throw ConfigError("training set is empty");
  if (data.targets.rows() != n) throw ShapeError("inputs and targets differ in length");
  if (!data.weights.empty() && data.weights.size() != n)
    throw ShapeError("weights and inputs differ in length");

  TrainResult result{init_mlp(spec), {}};
  result.loss_trace.reserve(config.iterations);
  AdamState adam = AdamState::for_model(result.model);
  Rng rng(config.rng_seed);

  const std::size_t batch = std::min(config.batch_size, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = n;  // forces a shuffle on the first batch

  std::vector<std::size_t> indices(batch);
  Matrix batch_inputs(batch, data.inputs.cols());
  Matrix batch_targets(batch, data.targets.cols());
  std::vector<double> batch_weights(batch, 1.0);

  double lr = config.learning_rate;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  for (std::size_t it = 0; it < config.iterations; ++it) {
    for (std::size_t b = 0; b < batch; ++b) {
      if (cursor == n) {
        shuffle(std::span<std::size_t>(order), rng);
        cursor = 0;
      }
      indices[b] = order[cursor++];
    }
    for (std::size_t b = 0; b < batch; ++b) {
      const auto src_in = data.inputs.row(indices[b]);
      std::copy(src_in.begin(), src_in.end(), batch_inputs.row(b).begin());
      const auto src_t = data.targets.row(indices[b]);
      std::copy(src_t.begin(), src_t.end(), batch_targets.row(b).begin());
    }
    if (hooks.weights) {
      hooks.weights(indices, batch_weights);
    } else if (!data.weights.empty()) {
      for (std::size_t b = 0; b < batch; ++b) batch_weights[b] = data.weights[indices[b]];
    }
    if (hooks.inputs) hooks.inputs(indices, batch_inputs, rng);

    const auto step = weighted_mse_backward(result.model, batch_inputs, batch_targets,
                                            batch_weights);
    adam_step(result.model, step.gradient, adam, lr);
    result.loss_trace.push_back(step.loss);

    if (config.lr_decay) {
      if (step.loss < best_loss) {
        best_loss = step.loss;
        since_best = 0;
      } else if (++since_best >= config.lr_decay->patience_iterations) {
        lr *= config.lr_decay->factor;
        since_best = 0;
      }
    }
  }
  return result;
}

nlohmann::json spec_to_json(const MlpSpec& spec) {
  return {{"input_dim", spec.input_dim},
          {"hidden_dims", spec.hidden_dims},
          {"output_dim", spec.output_dim},
          {"activation", to_string(spec.activation)},
          {"init_seed", spec.init_seed}};
}

MlpSpec spec_from_json(const nlohmann::json& doc) {
  MlpSpec spec;
  spec.input_dim = doc.at("input_dim").get<std::size_t>();
  spec.hidden_dims = doc.at("hidden_dims").get<std::vector<std::size_t>>();
  spec.output_dim = doc.at("output_dim").get<std::size_t>();
  spec.activation = activation_from_string(doc.value("activation", "relu"));
  spec.init_seed = doc.value("init_seed", std::uint64_t{0});
  spec.validate();
  return spec;
}

nlohmann::json model_to_json(const MlpModel& model) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const auto w = model.weights(l);
    const auto b = model.biases(l);
    layers.push_back({{"weights", std::vector<double>(w.begin(), w.end())},
                      {"biases", std::vector<double>(b.begin(), b.end())}});
  }
  return {{"format", kModelFormat},
          {"version", kModelVersion},
          {"spec", spec_to_json(model.spec())},
          {"layers", layers}};
}

MlpModel model_from_json(const nlohmann::json& doc) {
  if (doc.value("format", "") != kModelFormat) throw ConfigError("not a kfbc model document");
  if (doc.value("version", 0) != kModelVersion)
    throw ConfigError("unsupported model version");
  MlpModel model(spec_from_json(doc.at("spec")));
  const auto& layers = doc.at("layers");
  if (layers.size() != model.num_layers()) throw ShapeError("layer count mismatch");
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const auto w = layers[l].at("weights").get<std::vector<double>>();
    const auto b = layers[l].at("biases").get<std::vector<double>>();
    auto dst_w = model.weights(l);
    auto dst_b = model.biases(l);
    if (w.size() != dst_w.size() || b.size() != dst_b.size())
      throw ShapeError("layer " + std::to_string(l) + " has wrong parameter count");
    std::copy(w.begin(), w.end(), dst_w.begin());
    std::copy(b.begin(), b.end(), dst_b.begin());
  }
  require_finite(model.parameters(), "model parameters");
  return model;
}

}  // namespace kfbc
