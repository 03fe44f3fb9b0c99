#pragma once

// ToyCar: a point-mass car on a straight road with one traffic light.
// Imitators see a partial observation (no velocity, no light countdown);
// the rule-based expert reads the full state.
//
// ScriptedEnv replays a fixed observation / expert-action sequence and is
// used as a deterministic oracle.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "kfbc/random.hpp"

namespace kfbc {

struct ToyCarConfig {
  double road_length = 100.0;   // m
  double dt = 0.1;              // s
  double accel_throttle = 2.0;  // m/s^2
  double accel_brake = 4.0;     // m/s^2, applied as a deceleration
  double v_max = 10.0;          // m/s
  double light_position = 50.0; // m
  int light_duration_min = 20;  // steps
  int light_duration_max = 80;  // steps
  int horizon = 400;            // steps
  double stop_margin = 2.0;     // m, stop line sits this far before the light
  std::uint64_t episode_seed = 0;

  void validate() const;
  double stop_line() const { return light_position - stop_margin; }

  bool operator==(const ToyCarConfig&) const = default;
};

enum class Light { red, green };

struct ToyCarState {
  double position = 0.0;
  double velocity = 0.0;
  Light light = Light::green;
  int light_time_remaining = 0;
  int step_index = 0;
  bool crossed_on_red = false;
  // Set when the light turned red while the car could no longer stop before
  // it; crossing during that red phase is not a violation.
  bool red_committed = false;
  bool terminal = false;

  bool operator==(const ToyCarState&) const = default;
};

struct StepEvents {
  bool reached_goal = false;
  bool red_violation = false;
  bool timeout = false;

  bool any() const { return reached_goal || red_violation || timeout; }
  bool operator==(const StepEvents&) const = default;
};

struct StepOutcome {
  std::vector<double> observation;
  double reward = 0.0;
  bool done = false;
  StepEvents events;
};

inline constexpr std::size_t kToyCarObsDim = 3;
inline constexpr std::size_t kToyCarActionDim = 1;

// [position / road_length, light (1 = green, 0 = red), light_position / road_length]
std::vector<double> partial_observation(const ToyCarState& state, const ToyCarConfig& config);

// All state fields, for the expert and for logging.
std::vector<double> full_observation(const ToyCarState& state, const ToyCarConfig& config);

class ToyCar {
 public:
  explicit ToyCar(ToyCarConfig config);

  // Start at rest at position 0 with a random light phase and duration drawn
  // from the episode seed. The no-argument form uses config.episode_seed.
  std::vector<double> reset();
  std::vector<double> reset(std::uint64_t episode_seed);

  // Semi-implicit Euler step. The action is clamped to [-1, 1]: positive
  // values scale accel_throttle, negative values scale accel_brake.
  // Throws UsageError once the episode is over.
  StepOutcome step(double action);

  // Places the car in an arbitrary state; the light stream keeps its seed.
  void set_state(const ToyCarState& state);

  const ToyCarState& state() const { return state_; }
  const ToyCarConfig& config() const { return config_; }

 private:
  int sample_duration();

  ToyCarConfig config_;
  ToyCarState state_;
  Rng light_rng_;
};

// Distance covered under full braking from `velocity` with the simulator's
// integrator: dt * sum_k max(v - k b dt, 0). It equals v^2/(2b) - v dt/2 when
// v is a multiple of b dt, and is invariant along a braking trajectory (it
// shrinks by exactly the distance travelled each step).
double braking_distance(double velocity, const ToyCarConfig& config);

// Rule-based expert. Throttles (+1) unless the light is red, the car is before
// the light and not committed, and either braking_distance(v) reaches the
// stop line or the next step would carry the car into the stop
// window [stop_line - stop_margin, light). Then it brakes (-1).
double toycar_expert(const ToyCarState& state, const ToyCarConfig& config);

nlohmann::json to_json(const ToyCarConfig& config);
ToyCarConfig toycar_config_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const ToyCarState& state);
ToyCarState toycar_state_from_json(const nlohmann::json& doc);

struct ScriptStep {
  std::vector<double> observation;
  std::vector<double> expert_action;
};

// Replays a script verbatim: reset returns script[0].observation and the
// expert action at step t is script[t].expert_action. The episode ends after
// exactly script.size() steps.
class ScriptedEnv {
 public:
  explicit ScriptedEnv(std::vector<ScriptStep> script);

  std::vector<double> reset();
  StepOutcome step(std::span<const double> action);
  std::span<const double> expert_action() const;

  std::size_t length() const { return script_.size(); }
  std::size_t position() const { return cursor_; }
  std::size_t obs_dim() const { return script_.front().observation.size(); }
  std::size_t action_dim() const { return script_.front().expert_action.size(); }

 private:
  std::vector<ScriptStep> script_;
  std::size_t cursor_ = 0;
  bool started_ = false;
};

// Scripts with scalar observations equal to the step index and scalar
// actions. `switch_at` = L gives a constant script.
std::vector<ScriptStep> single_switch_script(std::size_t length, std::size_t switch_at,
                                             double before, double after);

}  // namespace kfbc
