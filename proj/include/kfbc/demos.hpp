#pragma once

// Demonstration trajectories, history-window datasets and their persistence.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "kfbc/envs.hpp"
#include "kfbc/neuralnet.hpp"

namespace kfbc {

struct StepRecord {
  std::vector<double> observation;  // partial observation before acting
  std::optional<ToyCarState> state; // full state before acting (ToyCar only)
  std::vector<double> expert_action;
  std::vector<double> executed_action;
  bool perturbed = false;
  StepEvents events;  // produced by this step

  bool operator==(const StepRecord&) const = default;
};

struct Trajectory {
  std::uint64_t id = 0;
  std::uint64_t episode_seed = 0;
  std::vector<StepRecord> steps;

  std::size_t size() const { return steps.size(); }
  bool operator==(const Trajectory&) const = default;
};

// Expert rollouts with DART-style noise: on each step, with probability
// noise_rate, the executed action is redrawn uniformly from [-1, 1] while the
// label stays the expert's action. Episode i uses derive_seed(seed, i).
std::vector<Trajectory> collect_demonstrations(const ToyCarConfig& config,
                                               std::size_t n_episodes, double noise_rate,
                                               std::uint64_t seed);

// Steps a ScriptedEnv with its own expert actions.
Trajectory record_script(const std::vector<ScriptStep>& script, std::uint64_t id);

enum class ActionSource { label, executed };

struct HistoryOptions {
  std::size_t history = 0;  // H past observations besides the current one
  std::size_t context = 3;  // K past actions for the copycat
  ActionSource context_source = ActionSource::label;
  ActionSource target_source = ActionSource::label;
};

struct HistorySample {
  std::vector<double> window;   // [o_{t-H}, ..., o_t], oldest first
  std::vector<double> target;   // a_t
  std::vector<double> context;  // [a_{t-1}, ..., a_{t-K}], newest first
  std::uint64_t trajectory = 0;
  std::size_t step = 0;
  int fold = -1;
  bool window_padded = false;
  bool context_padded = false;
};

struct Dataset {
  std::vector<HistorySample> samples;
  std::size_t obs_dim = 0;
  std::size_t action_dim = 0;
  std::size_t history = 0;
  std::size_t context = 0;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  std::size_t window_dim() const { return (history + 1) * obs_dim; }

  // Distinct trajectory ids in first-appearance order.
  std::vector<std::uint64_t> trajectory_ids() const;

  Matrix windows() const;
  Matrix targets() const;
  Matrix contexts() const;
};

// Steps before H are padded by repeating the first observation; action
// context before K is padded with zeros. Both are flagged on the sample.
Dataset build_history_dataset(std::span<const Trajectory> trajectories,
                              const HistoryOptions& options);

struct TrajectorySplit {
  std::vector<Trajectory> train;
  std::vector<Trajectory> val;
};

// round(val_fraction * n) whole trajectories, clamped to [1, n - 1], go to val.
TrajectorySplit split_trajectories(std::span<const Trajectory> trajectories,
                                   double val_fraction, std::uint64_t seed);

struct DatasetSplit {
  Dataset train;
  Dataset val;
};

// Same assignment rule applied to the trajectories present in a dataset.
DatasetSplit split_by_trajectory(const Dataset& dataset, double val_fraction,
                                 std::uint64_t seed);

// Keeps the samples whose trajectory id is in `ids`, preserving order.
Dataset subset_by_trajectory(const Dataset& dataset, std::span<const std::uint64_t> ids);

// JSON-lines: a header line {"format","version","count"} then one trajectory
// per line. Doubles are written with round-trip precision.
void save_dataset(const std::filesystem::path& path, std::span<const Trajectory> trajectories);
// Throws ParseError naming the offending line, or DataError for an empty file.
std::vector<Trajectory> load_dataset(const std::filesystem::path& path);

nlohmann::json to_json(const Trajectory& trajectory);
Trajectory trajectory_from_json(const nlohmann::json& doc);

// One row per sample: trajectory, step, padding flags, window, context, target.
void export_samples_csv(const std::filesystem::path& path, const Dataset& dataset);

// Fraction of steps whose executed action was perturbed.
double perturbed_fraction(std::span<const Trajectory> trajectories);

}  // namespace kfbc
