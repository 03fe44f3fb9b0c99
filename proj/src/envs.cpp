#include "kfbc/envs.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "kfbc/errors.hpp"

namespace kfbc {

void ToyCarConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v))
      throw ConfigError(std::string(name) + " must be positive");
  };
  positive(road_length, "road_length");
  positive(dt, "dt");
  positive(accel_throttle, "accel_throttle");
  positive(accel_brake, "accel_brake");
  positive(v_max, "v_max");
  if (!(light_position > 0.0 && light_position < road_length))
    throw ConfigError("light_position must lie in (0, road_length)");
  if (light_duration_min < 1 || light_duration_min > light_duration_max)
    throw ConfigError("need 1 <= light_duration_min <= light_duration_max");
  if (horizon < 1) throw ConfigError("horizon must be positive");
  if (!(stop_margin >= 0.0) || stop_margin >= light_position)
    throw ConfigError("stop_margin must lie in [0, light_position)");
}

std::vector<double> partial_observation(const ToyCarState& state, const ToyCarConfig& config) {
  return {state.position / config.road_length, state.light == Light::green ? 1.0 : 0.0,
          config.light_position / config.road_length};
}

std::vector<double> full_observation(const ToyCarState& state, const ToyCarConfig& config) {
  return {state.position,
          state.velocity,
          config.light_position,
          state.light == Light::green ? 1.0 : 0.0,
          static_cast<double>(state.light_time_remaining)};
}

ToyCar::ToyCar(ToyCarConfig config) : config_(config), light_rng_(config.episode_seed) {
  config_.validate();
}

int ToyCar::sample_duration() {
  return static_cast<int>(
      uniform_int(light_rng_, config_.light_duration_min, config_.light_duration_max));
}

std::vector<double> ToyCar::reset() { return reset(config_.episode_seed); }

std::vector<double> ToyCar::reset(std::uint64_t episode_seed) {
  light_rng_.seed(episode_seed);
  state_ = ToyCarState{};
  state_.light = bernoulli(light_rng_, 0.5) ? Light::red : Light::green;
  state_.light_time_remaining = sample_duration();
  return partial_observation(state_, config_);
}

void ToyCar::set_state(const ToyCarState& state) { state_ = state; }

StepOutcome ToyCar::step(double action) {
  if (state_.terminal) throw UsageError("step called on a terminal ToyCar state");
  if (!std::isfinite(action)) throw NumericError("non-finite action");
  const double a = std::clamp(action, -1.0, 1.0);
  const double accel = a >= 0.0 ? a * config_.accel_throttle : a * config_.accel_brake;

  ToyCarState next = state_;
  next.velocity = std::clamp(state_.velocity + accel * config_.dt, 0.0, config_.v_max);
  next.position = state_.position + next.velocity * config_.dt;
  next.step_index = state_.step_index + 1;

  StepOutcome outcome;
  const bool crossed =
      state_.position < config_.light_position && next.position >= config_.light_position;
  if (crossed && state_.light == Light::red && !state_.red_committed) {
    next.crossed_on_red = true;
    outcome.events.red_violation = true;
  }
  if (!outcome.events.red_violation && next.position >= config_.road_length)
    outcome.events.reached_goal = true;

  next.light_time_remaining -= 1;
  if (next.light_time_remaining <= 0) {
    next.light = next.light == Light::red ? Light::green : Light::red;
    next.light_time_remaining = sample_duration();
    next.red_committed = false;
    if (next.light == Light::red && next.position < config_.light_position) {
      const double braking = next.velocity * next.velocity / (2.0 * config_.accel_brake);
      next.red_committed = braking >= config_.light_position - next.position;
    }
  }

  if (!outcome.events.any() && next.step_index >= config_.horizon)
    outcome.events.timeout = true;
  outcome.done = outcome.events.any();
  next.terminal = outcome.done;
  outcome.reward = outcome.events.reached_goal ? 1.0 : (outcome.events.red_violation ? -1.0 : 0.0);

  state_ = next;
  outcome.observation = partial_observation(state_, config_);
  return outcome;
}

double braking_distance(double velocity, const ToyCarConfig& config) {
  const double dv = config.accel_brake * config.dt;
  const double n = std::floor(velocity / dv);
  return config.dt * (n * velocity - dv * n * (n + 1.0) / 2.0);
}

double toycar_expert(const ToyCarState& state, const ToyCarConfig& config) {
  if (state.light == Light::green || state.position >= config.light_position ||
      state.red_committed)
    return 1.0;
  const double gap = config.stop_line() - state.position;
  if (braking_distance(state.velocity, config) >= gap) return -1.0;
  if (state.position + state.velocity * config.dt >= config.stop_line() - config.stop_margin)
    return -1.0;
  return 1.0;
}

nlohmann::json to_json(const ToyCarConfig& c) {
  return {{"road_length", c.road_length},
          {"dt", c.dt},
          {"accel_throttle", c.accel_throttle},
          {"accel_brake", c.accel_brake},
          {"v_max", c.v_max},
          {"light_position", c.light_position},
          {"light_duration_min", c.light_duration_min},
          {"light_duration_max", c.light_duration_max},
          {"horizon", c.horizon},
          {"stop_margin", c.stop_margin},
          {"episode_seed", c.episode_seed}};
}

ToyCarConfig toycar_config_from_json(const nlohmann::json& doc) {
  ToyCarConfig c;
  c.road_length = doc.value("road_length", c.road_length);
  c.dt = doc.value("dt", c.dt);
  c.accel_throttle = doc.value("accel_throttle", c.accel_throttle);
  c.accel_brake = doc.value("accel_brake", c.accel_brake);
  c.v_max = doc.value("v_max", c.v_max);
  c.light_position = doc.value("light_position", c.light_position);
  c.light_duration_min = doc.value("light_duration_min", c.light_duration_min);
  c.light_duration_max = doc.value("light_duration_max", c.light_duration_max);
  c.horizon = doc.value("horizon", c.horizon);
  c.stop_margin = doc.value("stop_margin", c.stop_margin);
  c.episode_seed = doc.value("episode_seed", c.episode_seed);
  c.validate();
  return c;
}

nlohmann::json to_json(const ToyCarState& s) {
  return {{"position", s.position},
          {"velocity", s.velocity},
          {"light", s.light == Light::green ? "green" : "red"},
          {"light_time_remaining", s.light_time_remaining},
          {"step_index", s.step_index},
          {"crossed_on_red", s.crossed_on_red},
          {"red_committed", s.red_committed},
          {"terminal", s.terminal}};
}

ToyCarState toycar_state_from_json(const nlohmann::json& doc) {
  ToyCarState s;
  s.position = doc.at("position").get<double>();
  s.velocity = doc.at("velocity").get<double>();
  const auto light = doc.at("light").get<std::string>();
  if (light != "green" && light != "red") throw ConfigError("bad light value '" + light + "'");
  s.light = light == "green" ? Light::green : Light::red;
  s.light_time_remaining = doc.at("light_time_remaining").get<int>();
  s.step_index = doc.at("step_index").get<int>();
  s.crossed_on_red = doc.value("crossed_on_red", false);
  s.red_committed = doc.value("red_committed", false);
  s.terminal = doc.value("terminal", false);
  return s;
}

ScriptedEnv::ScriptedEnv(std::vector<ScriptStep> script) : script_(std::move(script)) {
  if (script_.empty()) throw ConfigError("script must not be empty");
  for (const auto& s : script_) {
    if (s.observation.size() != script_.front().observation.size() ||
        s.expert_action.size() != script_.front().expert_action.size())
      throw ShapeError("script steps have inconsistent dimensions");
  }
}

std::vector<double> ScriptedEnv::reset() {
  cursor_ = 0;
  started_ = true;
  return script_.front().observation;
}

std::span<const double> ScriptedEnv::expert_action() const {
  if (!started_ || cursor_ >= script_.size())
    throw UsageError("no expert action outside a running script");
  return script_[cursor_].expert_action;
}

StepOutcome ScriptedEnv::step(std::span<const double> action) {
  if (!started_) throw UsageError("reset the scripted environment before stepping");
  if (cursor_ >= script_.size()) throw UsageError("stepped past the end of the script");
  if (action.size() != action_dim()) throw ShapeError("action dimension mismatch");
  ++cursor_;
  StepOutcome outcome;
  outcome.done = cursor_ == script_.size();
  outcome.events.timeout = outcome.done;
  outcome.observation = outcome.done ? script_.back().observation : script_[cursor_].observation;
  return outcome;
}

std::vector<ScriptStep> single_switch_script(std::size_t length, std::size_t switch_at,
                                             double before, double after) {
  std::vector<ScriptStep> script(length);
  for (std::size_t t = 0; t < length; ++t) {
    script[t].observation = {static_cast<double>(t) / static_cast<double>(length)};
    script[t].expert_action = {t < switch_at ? before : after};
  }
  return script;
}

}  // namespace kfbc
