#pragma once

// Config-driven experiment runner behind the kfbc CLI.
//
// Output layout under the experiment directory:
//   config.json                      resolved config (after --seed-offset)
//   data/demos.jsonl, data/ape.csv   demonstrations and copycat scores
//   data/meta.json                   data hash, noise fraction, copycat summary
//   runs/<method>/seed_<s>/          record.json, policy.json (or error.txt)
//   aggregate.csv, summary.json
//   diag/, grid/

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kfbc/demos.hpp"
#include "kfbc/envs.hpp"
#include "kfbc/eval.hpp"
#include "kfbc/imitation.hpp"
#include "kfbc/keyframes.hpp"

namespace kfbc {

struct DataConfig {
  std::size_t episodes = 20;
  double noise_rate = 0.1;
  std::size_t history = 4;  // H used for the APE dataset and by default
  std::size_t context = 3;  // K
  double val_fraction = 0.2;
  std::uint64_t seed = 7;
};

enum class MethodKind { bc, dagger, boosting };

struct DaggerConfig {
  std::size_t query_budget = 1000;
  std::size_t rounds = 5;
};

struct MethodConfig {
  std::string name;
  MethodKind kind = MethodKind::bc;
  PolicySpec policy;
  WeightScheme scheme = UniformScheme{};
  TrainConfig train;
  DaggerConfig dagger;
};

struct EvalConfig {
  std::size_t episodes = 100;
  bool avg_ape = true;
  bool include_expert = true;
  double breakdown_percentile = 10.0;
  double avg_ape_heldout = 0.25;
  StallConfig stall;
};

struct DiagConfig {
  std::string reference_method = "BC-OH";
  std::size_t histogram_bins = 20;
};

// Each value in a list becomes one variant of `base_method`.
struct GridConfig {
  std::string base_method = "Ours";
  std::vector<double> temperatures{0.1, 0.2, 0.5, 1.0, 5.0, 10.0};
  std::vector<double> thresholds{10.0, 20.0};
  std::vector<double> weights{3.0, 5.0, 10.0};
};

struct ExperimentConfig {
  std::string name = "experiment";
  ToyCarConfig env;
  DataConfig data;
  CopycatSpec copycat;
  std::vector<MethodConfig> methods;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  EvalConfig eval;
  DiagConfig diag;
  GridConfig grid;
  std::filesystem::path output = "out";

  void validate() const;
  const MethodConfig& method(const std::string& name) const;
};

// Method entries are merged over an optional top-level "defaults" object
// ({"policy": ..., "train": ...}), so methods only state what differs.
ExperimentConfig experiment_config_from_json(const nlohmann::json& doc);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& config);
nlohmann::json to_json(const MethodConfig& method);

// Adds `offset` to the data seed and to every run seed.
void apply_seed_offset(ExperimentConfig& config, std::uint64_t offset);

// Hash of the full resolved config (output path excluded) and of the parts
// that determine the demonstration data and APE scores.
std::string config_hash(const ExperimentConfig& config);
std::string data_hash(const ExperimentConfig& config);

// Everything a run needs that is shared across methods and seeds.
struct PreparedData {
  std::vector<Trajectory> trajectories;
  TrajectorySplit split;
  CopycatEnsemble copycat;
  ApeTable train_ape;  // cross-validated on the training split
  ApeTable val_ape;    // fold-averaged copycat on validation trajectories
  double constant_mean_mse = 0.0;  // val MSE of predicting the train action mean
  double perturbed_fraction = 0.0;
  std::string data_hash;

  // History datasets for a given H; sample order does not depend on H.
  Dataset train_set(std::size_t history, std::size_t context) const;
  Dataset val_set(std::size_t history, std::size_t context) const;
};

// Collects demonstrations (or loads them from data/demos.jsonl when its hash
// matches) and trains the copycat.
PreparedData prepare_data(const ExperimentConfig& config, const std::filesystem::path& dir,
                          bool reuse_existing);

// Writes data/demos.jsonl, data/ape.csv and data/meta.json.
void write_data_artifacts(const ExperimentConfig& config, const PreparedData& data,
                          const std::filesystem::path& dir);

struct RunOutcome {
  std::string method;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  nlohmann::json record;
};

using Logger = std::function<void(const std::string&)>;

// Trains and evaluates every method x seed (plus the expert reference when
// enabled) on a pool of `jobs` workers. Failed runs leave error.txt in their
// directory and do not stop the others.
std::vector<RunOutcome> run_methods(const ExperimentConfig& config, const PreparedData& data,
                                    const std::filesystem::path& dir, std::size_t jobs,
                                    const Logger& log);

// Re-evaluates saved policies without retraining.
std::vector<RunOutcome> evaluate_saved(const ExperimentConfig& config, const PreparedData& data,
                                       const std::filesystem::path& dir, std::size_t jobs,
                                       const Logger& log);

// Reads every record under dir/runs, refuses records whose config hash
// differs from the config, and writes aggregate.csv (mean and population std
// per method, methods in config order, expert last). Returns the CSV text.
std::string aggregate_runs(const ExperimentConfig& config, const std::filesystem::path& dir);

// Copycat condition, APE histogram and per-step validation trace. Needs the
// data artifacts and the reference method's policy for the first seed.
nlohmann::json run_diagnostics(const ExperimentConfig& config, const PreparedData& data,
                               const std::filesystem::path& dir);

// Expands the grid into softmax and step variants of the base method.
std::vector<MethodConfig> grid_methods(const ExperimentConfig& config);

// Runs `fn(i)` for i in [0, n) on up to `jobs` threads. Exceptions are the
// callee's business.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

}  // namespace kfbc
