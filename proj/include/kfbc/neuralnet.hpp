#pragma once

// Small dense feed-forward networks with analytic gradients and Adam.
//
// Parameters live in one flat buffer, laid out layer by layer as
// [W_0 (rows = output units, row-major), b_0, W_1, b_1, ...]. Gradients and
// optimizer moments share that layout, so they are plain vectors.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "kfbc/random.hpp"

namespace kfbc {

enum class Activation { relu, tanh };

std::string to_string(Activation activation);
Activation activation_from_string(const std::string& name);

struct MlpSpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden_dims;
  std::size_t output_dim = 1;
  Activation activation = Activation::relu;  // hidden layers only
  std::uint64_t init_seed = 0;

  // Throws ConfigError on a zero dimension.
  void validate() const;
  // input, hidden..., output
  std::vector<std::size_t> layer_sizes() const;

  bool operator==(const MlpSpec&) const = default;
};

// Row-major dense matrix; rows are samples in batch contexts.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix from_rows(const std::vector<std::vector<double>>& rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

class MlpModel {
 public:
  // All parameters zero. Use init_mlp for a trainable starting point.
  explicit MlpModel(MlpSpec spec);

  const MlpSpec& spec() const { return spec_; }
  std::size_t num_layers() const { return fan_in_.size(); }
  std::size_t layer_inputs(std::size_t layer) const { return fan_in_[layer]; }
  std::size_t layer_outputs(std::size_t layer) const { return fan_out_[layer]; }
  std::size_t parameter_count() const { return params_.size(); }

  std::span<double> parameters() { return params_; }
  std::span<const double> parameters() const { return params_; }

  std::span<double> weights(std::size_t layer);
  std::span<const double> weights(std::size_t layer) const;
  std::span<double> biases(std::size_t layer);
  std::span<const double> biases(std::size_t layer) const;

  // Offsets of the layer's weight block and bias block in the flat buffer.
  std::size_t weight_offset(std::size_t layer) const { return weight_offset_[layer]; }
  std::size_t bias_offset(std::size_t layer) const { return bias_offset_[layer]; }

  bool operator==(const MlpModel& other) const {
    return spec_ == other.spec_ && params_ == other.params_;
  }

 private:
  MlpSpec spec_;
  std::vector<std::size_t> fan_in_, fan_out_;
  std::vector<std::size_t> weight_offset_, bias_offset_;
  std::vector<double> params_;
};

// Weights and biases of layer l are drawn from U(-1/sqrt(fan_in_l),
// 1/sqrt(fan_in_l)) using spec.init_seed. Deterministic.
MlpModel init_mlp(const MlpSpec& spec);

// Hidden layers apply spec.activation; the output layer is linear.
std::vector<double> forward(const MlpModel& model, std::span<const double> input);

struct LossGradient {
  double loss = 0.0;
  std::vector<double> gradient;  // parameter layout
};

// loss = (1/B) sum_i w_i * ||f(x_i) - y_i||^2 / output_dim, plus its exact
// gradient. Weights must be finite and non-negative.
LossGradient weighted_mse_backward(const MlpModel& model, const Matrix& inputs,
                                   const Matrix& targets,
                                   std::span<const double> weights);

// Same loss value without the backward pass. Empty weights mean all ones.
double weighted_mse(const MlpModel& model, const Matrix& inputs, const Matrix& targets,
                    std::span<const double> weights = {});

// ||f(x_i) - y_i||^2 / output_dim per row.
std::vector<double> per_sample_squared_error(const MlpModel& model, const Matrix& inputs,
                                             const Matrix& targets);

struct AdamState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::uint64_t step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_model(const MlpModel& model);
};

// One bias-corrected Adam update in place.
void adam_step(MlpModel& model, std::span<const double> gradient, AdamState& state,
               double learning_rate);

struct LrDecay {
  double factor = 0.1;
  std::size_t patience_iterations = 1000;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 64;
  std::size_t iterations = 1000;
  std::optional<LrDecay> lr_decay;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

struct TrainingSet {
  Matrix inputs;
  Matrix targets;
  std::vector<double> weights;  // empty means uniform 1
};

// Optional per-minibatch callbacks. `weights` fills the batch weights from
// the sample indices (overrides TrainingSet::weights). `inputs` may rewrite
// the gathered batch inputs in place, e.g. for input masking.
struct BatchHooks {
  std::function<void(std::span<const std::size_t> indices, std::span<double> weights)>
      weights;
  std::function<void(std::span<const std::size_t> indices, Matrix& batch_inputs,
                     Rng& rng)>
      inputs;
};

struct TrainResult {
  MlpModel model;
  std::vector<double> loss_trace;  // minibatch loss per iteration
};

// Minibatch Adam over epoch-wise seeded shuffles of the data.
TrainResult train_supervised(const TrainingSet& data, const MlpSpec& spec,
                             const TrainConfig& config, const BatchHooks& hooks = {});

// Versioned JSON: {"format", "version", "spec", "layers": [{"weights", "biases"}]}.
nlohmann::json model_to_json(const MlpModel& model);
MlpModel model_from_json(const nlohmann::json& doc);

nlohmann::json spec_to_json(const MlpSpec& spec);
MlpSpec spec_from_json(const nlohmann::json& doc);

}  // namespace kfbc
