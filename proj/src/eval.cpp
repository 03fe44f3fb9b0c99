#include "kfbc/eval.hpp"

#include <algorithm>
#include <cmath>

#include "kfbc/errors.hpp"
#include "kfbc/random.hpp"

namespace kfbc {

RolloutResult rollout(const ToyCarConfig& config, Agent& agent, std::size_t n_episodes,
                      std::uint64_t seed, const StallConfig& stall) {
  if (n_episodes == 0) throw ConfigError("rollout needs at least one episode");
  ToyCar env(config);
  RolloutResult result;
  result.trajectories.reserve(n_episodes);
  const double slow = stall.speed_fraction * config.v_max;

  for (std::size_t i = 0; i < n_episodes; ++i) {
    Trajectory traj;
    traj.id = i;
    traj.episode_seed = derive_seed(seed, i);
    auto obs = env.reset(traj.episode_seed);
    agent.reset();
    EpisodeRecord ep;
    ep.seed = traj.episode_seed;
    std::size_t slow_run = 0;
    bool done = false;
    while (!done) {
      StepRecord rec;
      rec.observation = obs;
      rec.state = env.state();
      rec.expert_action = {toycar_expert(env.state(), config)};
      rec.executed_action = agent.act(obs, env.state(), config);
      auto outcome = env.step(rec.executed_action.front());
      rec.events = outcome.events;
      done = outcome.done;
      obs = std::move(outcome.observation);
      traj.steps.push_back(std::move(rec));

      const auto& s = env.state();
      if (s.light == Light::green && !outcome.events.reached_goal && s.velocity < slow) {
        if (++slow_run >= stall.min_steps) ep.stalled = true;
      } else {
        slow_run = 0;
      }
      ep.success = ep.success || outcome.events.reached_goal;
      ep.violation = ep.violation || outcome.events.red_violation;
      ep.timeout = ep.timeout || outcome.events.timeout;
    }
    const auto& final_state = env.state();
    ep.steps = traj.steps.size();
    const double remaining = std::max(0.0, config.road_length - final_state.position);
    ep.progress = std::clamp(1.0 - remaining / config.road_length, 0.0, 1.0);
    ep.avg_speed = std::min(final_state.position, config.road_length) /
                   (static_cast<double>(ep.steps) * config.dt);
    result.report.episodes.push_back(ep);
    result.trajectories.push_back(std::move(traj));
  }

  auto& r = result.report;
  r.n_episodes = n_episodes;
  std::size_t successes = 0;
  for (const auto& ep : r.episodes) {
    successes += ep.success ? 1 : 0;
    r.violations += ep.violation ? 1 : 0;
    r.inertia_stalls += ep.stalled ? 1 : 0;
    r.progress += ep.progress;
    r.avg_speed += ep.avg_speed;
  }
  const auto n = static_cast<double>(n_episodes);
  r.success_rate = static_cast<double>(successes) / n;
  r.progress /= n;
  r.avg_speed /= n;
  return result;
}

double rollout_imitation_error(std::span<const Trajectory> trajectories,
                               const ToyCarConfig& config) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& traj : trajectories) {
    for (const auto& rec : traj.steps) {
      if (!rec.state)
        throw DataError("trajectory " + std::to_string(traj.id) + " lacks full states");
      const double expert = toycar_expert(*rec.state, config);
      double sq = 0.0;
      for (double a : rec.executed_action) sq += (a - expert) * (a - expert);
      sum += sq / static_cast<double>(rec.executed_action.size());
      ++count;
    }
  }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

AvgApeReport avg_ape_from_trajectories(std::span<const Trajectory> trajectories,
                                       const CopycatSpec& spec, std::uint64_t seed,
                                       double heldout_fraction) {
  if (trajectories.size() < 4) throw ConfigError("avgAPE needs at least 4 rollout episodes");
  // Sorted by id so the result depends on the set of rollouts, not their order.
  std::vector<Trajectory> sorted(trajectories.begin(), trajectories.end());
  std::sort(sorted.begin(), sorted.end(),
            [](const Trajectory& a, const Trajectory& b) { return a.id < b.id; });
  const auto split = split_trajectories(sorted, heldout_fraction, derive_seed(seed, 0));
  const HistoryOptions options{.history = 0,
                               .context = spec.context,
                               .context_source = ActionSource::executed,
                               .target_source = ActionSource::executed};
  const auto train = build_history_dataset(split.train, options);
  const auto heldout = build_history_dataset(split.val, options);
  CopycatSpec single = spec;
  single.folds = 1;
  single.seed = derive_seed(seed, 1);
  const auto ensemble = train_copycat(train, single);
  const auto table = compute_ape(ensemble, heldout);

  AvgApeReport report;
  report.avg_ape = table.mean;
  report.train_episodes = split.train.size();
  report.heldout_episodes = split.val.size();
  report.heldout_samples = heldout.size();
  report.copycat = to_json(single);
  return report;
}

AvgApeReport avg_ape(const ToyCarConfig& config, Agent& agent, std::size_t n_episodes,
                     const CopycatSpec& spec, std::uint64_t seed, double heldout_fraction) {
  if (n_episodes < 4) throw ConfigError("avgAPE needs at least 4 rollout episodes");
  const auto result = rollout(config, agent, n_episodes, seed);
  return avg_ape_from_trajectories(result.trajectories, spec, seed, heldout_fraction);
}

LossBreakdown loss_breakdown(const TrainedPolicy& policy, const Dataset& dataset,
                             const ApeTable& ape, double percentile) {
  if (!(percentile > 0.0 && percentile <= 100.0))
    throw ConfigError("breakdown percentile must lie in (0, 100]");
  if (ape.size() != dataset.size()) throw ShapeError("APE table is not aligned with the dataset");
  LossBreakdown out;
  if (dataset.empty()) return out;
  const auto errors =
      per_sample_squared_error(policy.model, dataset.windows(), dataset.targets());
  const auto top = top_percentile_indices(ape.ape, percentile);
  std::vector<bool> is_cp(dataset.size(), false);
  for (auto i : top) is_cp[i] = true;
  double cp = 0.0, other = 0.0;
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (is_cp[i]) {
      cp += errors[i];
      ++out.n_changepoint;
    } else {
      other += errors[i];
      ++out.n_other;
    }
  }
  out.changepoint_mse = out.n_changepoint ? cp / static_cast<double>(out.n_changepoint) : 0.0;
  out.other_mse = out.n_other ? other / static_cast<double>(out.n_other) : 0.0;
  out.overall_mse = (cp + other) / static_cast<double>(errors.size());
  return out;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("pearson needs equal-length inputs");
  if (x.empty()) return 0.0;
  const auto n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json episodes = nlohmann::json::array();
  for (const auto& ep : r.episodes) {
    episodes.push_back({{"seed", ep.seed},
                        {"success", ep.success},
                        {"violation", ep.violation},
                        {"timeout", ep.timeout},
                        {"stalled", ep.stalled},
                        {"progress", ep.progress},
                        {"avg_speed", ep.avg_speed},
                        {"steps", ep.steps}});
  }
  return {{"n_episodes", r.n_episodes},     {"success_rate", r.success_rate},
          {"violations", r.violations},     {"progress", r.progress},
          {"avg_speed", r.avg_speed},       {"inertia_stalls", r.inertia_stalls},
          {"episodes", episodes}};
}

nlohmann::json to_json(const AvgApeReport& r) {
  return {{"avg_ape", r.avg_ape},
          {"train_episodes", r.train_episodes},
          {"heldout_episodes", r.heldout_episodes},
          {"heldout_samples", r.heldout_samples},
          {"copycat", r.copycat}};
}

nlohmann::json to_json(const LossBreakdown& b) {
  return {{"changepoint_mse", b.changepoint_mse}, {"other_mse", b.other_mse},
          {"overall_mse", b.overall_mse},         {"n_changepoint", b.n_changepoint},
          {"n_other", b.n_other}};
}

}  // namespace kfbc
