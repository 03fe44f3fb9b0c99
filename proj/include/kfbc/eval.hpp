#pragma once

// Rollout evaluation in ToyCar and the diagnostics used to compare methods.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "kfbc/demos.hpp"
#include "kfbc/envs.hpp"
#include "kfbc/imitation.hpp"
#include "kfbc/keyframes.hpp"

namespace kfbc {

// An inertia stall is a run of at least `min_steps` consecutive steps with
// green light, goal not reached and velocity below speed_fraction * v_max.
struct StallConfig {
  double speed_fraction = 0.05;
  std::size_t min_steps = 30;
};

struct EpisodeRecord {
  std::uint64_t seed = 0;
  bool success = false;
  bool violation = false;
  bool timeout = false;
  bool stalled = false;
  double progress = 0.0;
  double avg_speed = 0.0;
  std::size_t steps = 0;
};

struct EvalReport {
  std::size_t n_episodes = 0;
  double success_rate = 0.0;
  std::size_t violations = 0;
  double progress = 0.0;   // mean over episodes
  double avg_speed = 0.0;  // mean over episodes, m/s
  std::size_t inertia_stalls = 0;  // episodes with at least one stall
  std::vector<EpisodeRecord> episodes;
};

struct RolloutResult {
  std::vector<Trajectory> trajectories;
  EvalReport report;
};

// Episode i is reset with derive_seed(seed, i). Trajectories record the
// agent's action as executed_action and the expert's action at the same
// state as expert_action.
RolloutResult rollout(const ToyCarConfig& config, Agent& agent, std::size_t n_episodes,
                      std::uint64_t seed, const StallConfig& stall = {});

// Mean squared difference between executed actions and the expert's action
// on each visited state. Throws DataError when a step has no full state.
double rollout_imitation_error(std::span<const Trajectory> trajectories,
                               const ToyCarConfig& config);

struct AvgApeReport {
  double avg_ape = 0.0;
  std::size_t train_episodes = 0;
  std::size_t heldout_episodes = 0;
  std::size_t heldout_samples = 0;
  nlohmann::json copycat;
};

// Trains a copycat on the executed actions of a trajectory split and reports
// its mean APE on the held-out trajectories.
AvgApeReport avg_ape_from_trajectories(std::span<const Trajectory> trajectories,
                                       const CopycatSpec& spec, std::uint64_t seed,
                                       double heldout_fraction = 0.25);

// Rolls out `agent` for n_episodes (>= 4) and applies avg_ape_from_trajectories.
AvgApeReport avg_ape(const ToyCarConfig& config, Agent& agent, std::size_t n_episodes,
                     const CopycatSpec& spec, std::uint64_t seed,
                     double heldout_fraction = 0.25);

struct LossBreakdown {
  double changepoint_mse = 0.0;
  double other_mse = 0.0;
  double overall_mse = 0.0;
  std::size_t n_changepoint = 0;
  std::size_t n_other = 0;
};

// Unweighted MSE of the policy on the top `percentile` APE samples, on the
// rest, and on all samples.
LossBreakdown loss_breakdown(const TrainedPolicy& policy, const Dataset& dataset,
                             const ApeTable& ape, double percentile);

// Pearson correlation; 0 when either side is constant.
double pearson(std::span<const double> x, std::span<const double> y);

nlohmann::json to_json(const EvalReport& report);
nlohmann::json to_json(const AvgApeReport& report);
nlohmann::json to_json(const LossBreakdown& breakdown);

}  // namespace kfbc
