#include "kfbc/demos.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <string>

#include "kfbc/errors.hpp"
#include "kfbc/random.hpp"

namespace kfbc {

namespace {

constexpr const char* kTrajectoryFormat = "kfbc-trajectories";
constexpr int kTrajectoryVersion = 1;

const std::vector<double>& pick(const StepRecord& record, ActionSource source) {
  return source == ActionSource::label ? record.expert_action : record.executed_action;
}

std::size_t val_count(std::size_t n, double val_fraction) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw ConfigError("val_fraction must lie in (0, 1)");
  if (n < 2) throw ConfigError("need at least 2 trajectories to split");
  const auto wanted = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  return std::clamp<std::size_t>(wanted, 1, n - 1);
}

// Ids drawn for validation, by seeded shuffle of the sorted id list.
std::set<std::uint64_t> pick_val_ids(std::vector<std::uint64_t> ids, double val_fraction,
                                     std::uint64_t seed) {
  const std::size_t n_val = val_count(ids.size(), val_fraction);
  std::sort(ids.begin(), ids.end());
  Rng rng(seed);
  shuffle(std::span<std::uint64_t>(ids), rng);
  return {ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_val)};
}

}  // namespace

std::vector<Trajectory> collect_demonstrations(const ToyCarConfig& config,
                                               std::size_t n_episodes, double noise_rate,
                                               std::uint64_t seed) {
  if (n_episodes == 0) throw ConfigError("n_episodes must be at least 1");
  if (!(noise_rate >= 0.0 && noise_rate < 1.0))
    throw ConfigError("noise_rate must lie in [0, 1)");
  ToyCar env(config);
  std::vector<Trajectory> out;
  out.reserve(n_episodes);
  for (std::size_t i = 0; i < n_episodes; ++i) {
    Trajectory traj;
    traj.id = i;
    traj.episode_seed = derive_seed(seed, i);
    Rng noise(derive_seed(traj.episode_seed, 1));
    std::vector<double> obs = env.reset(traj.episode_seed);
    bool done = false;
    while (!done) {
      StepRecord rec;
      rec.observation = obs;
      rec.state = env.state();
      const double label = toycar_expert(env.state(), config);
      double executed = label;
      if (noise_rate > 0.0 && bernoulli(noise, noise_rate)) {
        executed = uniform_real(noise, -1.0, 1.0);
        rec.perturbed = true;
      }
      rec.expert_action = {label};
      rec.executed_action = {executed};
      auto outcome = env.step(executed);
      rec.events = outcome.events;
      done = outcome.done;
      obs = std::move(outcome.observation);
      traj.steps.push_back(std::move(rec));
    }
    out.push_back(std::move(traj));
  }
  return out;
}

Trajectory record_script(const std::vector<ScriptStep>& script, std::uint64_t id) {
  ScriptedEnv env(script);
  Trajectory traj;
  traj.id = id;
  std::vector<double> obs = env.reset();
  bool done = false;
  while (!done) {
    StepRecord rec;
    rec.observation = obs;
    const auto expert = env.expert_action();
    rec.expert_action.assign(expert.begin(), expert.end());
    rec.executed_action = rec.expert_action;
    auto outcome = env.step(rec.executed_action);
    rec.events = outcome.events;
    done = outcome.done;
    obs = std::move(outcome.observation);
    traj.steps.push_back(std::move(rec));
  }
  return traj;
}

std::vector<std::uint64_t> Dataset::trajectory_ids() const {
  std::vector<std::uint64_t> ids;
  std::set<std::uint64_t> seen;
  for (const auto& s : samples) {
    if (seen.insert(s.trajectory).second) ids.push_back(s.trajectory);
  }
  return ids;
}

Matrix Dataset::windows() const {
  Matrix m(samples.size(), window_dim());
  for (std::size_t i = 0; i < samples.size(); ++i)
    std::copy(samples[i].window.begin(), samples[i].window.end(), m.row(i).begin());
  return m;
}

Matrix Dataset::targets() const {
  Matrix m(samples.size(), action_dim);
  for (std::size_t i = 0; i < samples.size(); ++i)
    std::copy(samples[i].target.begin(), samples[i].target.end(), m.row(i).begin());
  return m;
}

Matrix Dataset::contexts() const {
  Matrix m(samples.size(), context * action_dim);
  for (std::size_t i = 0; i < samples.size(); ++i)
    std::copy(samples[i].context.begin(), samples[i].context.end(), m.row(i).begin());
  return m;
}

Dataset build_history_dataset(std::span<const Trajectory> trajectories,
                              const HistoryOptions& options) {
  if (trajectories.empty()) throw ConfigError("no trajectories to build a dataset from");
  if (options.context == 0) throw ConfigError("action context length K must be at least 1");

  Dataset ds;
  ds.history = options.history;
  ds.context = options.context;
  for (const auto& traj : trajectories) {
    if (traj.steps.empty()) continue;
    const auto& first = traj.steps.front();
    if (ds.obs_dim == 0) {
      ds.obs_dim = first.observation.size();
      ds.action_dim = first.expert_action.size();
    }
    const std::size_t H = options.history;
    const std::size_t K = options.context;
    for (std::size_t t = 0; t < traj.steps.size(); ++t) {
      const auto& rec = traj.steps[t];
      if (rec.observation.size() != ds.obs_dim || rec.expert_action.size() != ds.action_dim ||
          rec.executed_action.size() != ds.action_dim)
        throw ShapeError("trajectory " + std::to_string(traj.id) +
                         " has inconsistent dimensions");
      HistorySample s;
      s.trajectory = traj.id;
      s.step = t;
      s.window.reserve((H + 1) * ds.obs_dim);
      for (std::size_t k = 0; k <= H; ++k) {
        // frame t - H + k, clamped to the first frame
        const std::size_t back = H - k;
        const std::size_t src = t >= back ? t - back : 0;
        const auto& o = traj.steps[src].observation;
        s.window.insert(s.window.end(), o.begin(), o.end());
      }
      s.window_padded = t < H;
      s.context.reserve(K * ds.action_dim);
      for (std::size_t k = 1; k <= K; ++k) {
        if (t >= k) {
          const auto& a = pick(traj.steps[t - k], options.context_source);
          s.context.insert(s.context.end(), a.begin(), a.end());
        } else {
          s.context.insert(s.context.end(), ds.action_dim, 0.0);
        }
      }
      s.context_padded = t < K;
      s.target = pick(rec, options.target_source);
      ds.samples.push_back(std::move(s));
    }
  }
  if (ds.samples.empty()) throw ConfigError("trajectories contain no steps");
  return ds;
}

TrajectorySplit split_trajectories(std::span<const Trajectory> trajectories,
                                   double val_fraction, std::uint64_t seed) {
  std::vector<std::uint64_t> ids;
  for (const auto& t : trajectories) ids.push_back(t.id);
  const auto val_ids = pick_val_ids(ids, val_fraction, seed);
  TrajectorySplit split;
  for (const auto& t : trajectories) (val_ids.count(t.id) ? split.val : split.train).push_back(t);
  return split;
}

Dataset subset_by_trajectory(const Dataset& dataset, std::span<const std::uint64_t> ids) {
  const std::set<std::uint64_t> keep(ids.begin(), ids.end());
  Dataset out = dataset;
  out.samples.clear();
  for (const auto& s : dataset.samples) {
    if (keep.count(s.trajectory)) out.samples.push_back(s);
  }
  return out;
}

DatasetSplit split_by_trajectory(const Dataset& dataset, double val_fraction,
                                 std::uint64_t seed) {
  const auto val_ids = pick_val_ids(dataset.trajectory_ids(), val_fraction, seed);
  DatasetSplit split{dataset, dataset};
  split.train.samples.clear();
  split.val.samples.clear();
  for (const auto& s : dataset.samples)
    (val_ids.count(s.trajectory) ? split.val : split.train).samples.push_back(s);
  return split;
}

nlohmann::json to_json(const Trajectory& trajectory) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& rec : trajectory.steps) {
    steps.push_back({{"obs", rec.observation},
                     {"state", rec.state ? to_json(*rec.state) : nlohmann::json(nullptr)},
                     {"expert", rec.expert_action},
                     {"executed", rec.executed_action},
                     {"perturbed", rec.perturbed},
                     {"events",
                      {rec.events.reached_goal, rec.events.red_violation, rec.events.timeout}}});
  }
  return {{"id", trajectory.id}, {"episode_seed", trajectory.episode_seed}, {"steps", steps}};
}

Trajectory trajectory_from_json(const nlohmann::json& doc) {
  Trajectory t;
  t.id = doc.at("id").get<std::uint64_t>();
  t.episode_seed = doc.at("episode_seed").get<std::uint64_t>();
  for (const auto& s : doc.at("steps")) {
    StepRecord rec;
    rec.observation = s.at("obs").get<std::vector<double>>();
    if (!s.at("state").is_null()) rec.state = toycar_state_from_json(s.at("state"));
    rec.expert_action = s.at("expert").get<std::vector<double>>();
    rec.executed_action = s.at("executed").get<std::vector<double>>();
    rec.perturbed = s.at("perturbed").get<bool>();
    const auto& ev = s.at("events");
    rec.events = {ev.at(0).get<bool>(), ev.at(1).get<bool>(), ev.at(2).get<bool>()};
    t.steps.push_back(std::move(rec));
  }
  return t;
}

void save_dataset(const std::filesystem::path& path, std::span<const Trajectory> trajectories) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << nlohmann::json{{"format", kTrajectoryFormat},
                        {"version", kTrajectoryVersion},
                        {"count", trajectories.size()}}
             .dump()
      << '\n';
  for (const auto& t : trajectories) out << to_json(t).dump() << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<Trajectory> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  std::vector<Trajectory> out;
  std::size_t expected = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line_no, std::string("malformed JSON: ") + e.what());
    }
    try {
      if (line_no == 1) {
        if (doc.value("format", "") != kTrajectoryFormat)
          throw ParseError(line_no, "missing trajectory header");
        if (doc.value("version", 0) != kTrajectoryVersion)
          throw ParseError(line_no, "unsupported version");
        expected = doc.at("count").get<std::size_t>();
        continue;
      }
      out.push_back(trajectory_from_json(doc));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, std::string("bad record: ") + e.what());
    }
  }
  if (line_no == 0 || (out.empty() && expected == 0))
    throw DataError("dataset file " + path.string() + " is empty");
  if (out.size() != expected)
    throw ParseError(line_no + 1, "expected " + std::to_string(expected) +
                                      " trajectories, found " + std::to_string(out.size()));
  return out;
}

void export_samples_csv(const std::filesystem::path& path, const Dataset& dataset) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  out << "trajectory,step,window_padded,context_padded";
  for (std::size_t i = 0; i < dataset.window_dim(); ++i) out << ",w" << i;
  for (std::size_t i = 0; i < dataset.context * dataset.action_dim; ++i) out << ",c" << i;
  for (std::size_t i = 0; i < dataset.action_dim; ++i) out << ",a" << i;
  out << '\n';
  for (const auto& s : dataset.samples) {
    out << s.trajectory << ',' << s.step << ',' << s.window_padded << ',' << s.context_padded;
    for (double v : s.window) out << ',' << v;
    for (double v : s.context) out << ',' << v;
    for (double v : s.target) out << ',' << v;
    out << '\n';
  }
}

double perturbed_fraction(std::span<const Trajectory> trajectories) {
  std::size_t total = 0, perturbed = 0;
  for (const auto& t : trajectories) {
    for (const auto& s : t.steps) {
      ++total;
      perturbed += s.perturbed ? 1 : 0;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(perturbed) / static_cast<double>(total);
}

}  // namespace kfbc
