#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "kfbc/demos.hpp"
#include "kfbc/errors.hpp"
#include "kfbc/keyframes.hpp"

using namespace kfbc;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "kfbc_unit_demos";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<Trajectory> scripted_set(std::size_t n, std::size_t length) {
  std::vector<Trajectory> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(record_script(single_switch_script(length, length / 2, -1.0, 1.0), i));
  return out;
}

}  // namespace

TEST_SUITE("demos") {

TEST_CASE("noise injection perturbs about the requested fraction") {
  const auto trajs = collect_demonstrations({}, 200, 0.1, 42);
  const double frac = perturbed_fraction(trajs);
  CHECK(frac >= 0.09);
  CHECK(frac <= 0.11);
  for (const auto& t : trajs) {
    for (const auto& s : t.steps) {
      CHECK((s.expert_action[0] == 1.0 || s.expert_action[0] == -1.0));
      if (!s.perturbed) CHECK(s.executed_action == s.expert_action);
      CHECK(s.state.has_value());
    }
  }
}

TEST_CASE("zero noise gives the expert's own trajectories") {
  const auto trajs = collect_demonstrations({}, 20, 0.0, 1);
  CHECK(perturbed_fraction(trajs) == 0.0);
  for (const auto& t : trajs) CHECK(t.steps.back().events.reached_goal);
}

TEST_CASE("collection is deterministic and seed-sensitive") {
  const auto a = collect_demonstrations({}, 5, 0.1, 9);
  const auto b = collect_demonstrations({}, 5, 0.1, 9);
  const auto c = collect_demonstrations({}, 5, 0.1, 10);
  CHECK(a == b);
  CHECK_FALSE(a == c);
}

TEST_CASE("history windows pad with the first observation") {
  const auto traj = record_script(single_switch_script(5, 2, -1.0, 1.0), 7);
  const auto ds = build_history_dataset(std::vector<Trajectory>{traj}, {.history = 2, .context = 2});
  REQUIRE(ds.size() == 5);
  CHECK(ds.window_dim() == 3);
  // observations are t / 5
  CHECK(ds.samples[0].window == std::vector<double>{0.0, 0.0, 0.0});
  CHECK(ds.samples[1].window == std::vector<double>{0.0, 0.0, 0.2});
  CHECK(ds.samples[3].window == std::vector<double>{0.2, 0.4, 0.6});
  CHECK(ds.samples[0].window_padded);
  CHECK_FALSE(ds.samples[2].window_padded);
  // contexts are newest first and zero padded
  CHECK(ds.samples[0].context == std::vector<double>{0.0, 0.0});
  CHECK(ds.samples[1].context == std::vector<double>{-1.0, 0.0});
  CHECK(ds.samples[3].context == std::vector<double>{1.0, -1.0});
  CHECK(ds.samples[1].context_padded);
  CHECK_FALSE(ds.samples[2].context_padded);
  CHECK(ds.samples[2].target == std::vector<double>{1.0});
  CHECK(ds.samples[4].trajectory == 7);
  CHECK(ds.samples[4].step == 4);
}

TEST_CASE("context and target can come from executed actions") {
  auto trajs = collect_demonstrations({}, 3, 0.5, 4);
  const auto labels = build_history_dataset(trajs, {.history = 0, .context = 1});
  const auto executed = build_history_dataset(
      trajs, {.history = 0, .context = 1, .context_source = ActionSource::executed,
              .target_source = ActionSource::executed});
  REQUIRE(labels.size() == executed.size());
  std::size_t differ = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    differ += labels.samples[i].target != executed.samples[i].target ? 1 : 0;
  CHECK(differ > 0);
}

TEST_CASE("trajectory splits are whole, disjoint and seeded") {
  const auto trajs = scripted_set(10, 6);
  const auto split = split_trajectories(trajs, 0.2, 3);
  CHECK(split.val.size() == 2);
  CHECK(split.train.size() == 8);
  std::set<std::uint64_t> ids;
  for (const auto& t : split.train) ids.insert(t.id);
  for (const auto& t : split.val) CHECK(ids.insert(t.id).second);
  CHECK(ids.size() == 10);
  const auto again = split_trajectories(trajs, 0.2, 3);
  CHECK(again.val == split.val);

  // clamped to keep both sides non-empty
  CHECK(split_trajectories(trajs, 0.01, 1).val.size() == 1);
  CHECK(split_trajectories(trajs, 0.99, 1).train.size() == 1);
  CHECK_THROWS_AS(split_trajectories(scripted_set(1, 3), 0.5, 1), ConfigError);

  const auto ds = build_history_dataset(trajs, {.history = 1, .context = 1});
  const auto dsplit = split_by_trajectory(ds, 0.2, 3);
  CHECK(dsplit.train.size() + dsplit.val.size() == ds.size());
  CHECK(dsplit.val.trajectory_ids().size() == 2);
}

TEST_CASE("unpadded windows are the raw observation subsequence") {
  const auto trajs = collect_demonstrations({}, 3, 0.1, 8);
  const std::size_t H = 3;
  const auto ds = build_history_dataset(trajs, {.history = H, .context = 3});
  std::size_t checked = 0;
  for (const auto& s : ds.samples) {
    const auto& steps = trajs[s.trajectory].steps;
    CHECK(s.window_padded == (s.step < H));
    if (s.window_padded) continue;
    std::vector<double> raw;
    for (std::size_t t = s.step - H; t <= s.step; ++t)
      raw.insert(raw.end(), steps[t].observation.begin(), steps[t].observation.end());
    CHECK(s.window == raw);
    ++checked;
  }
  CHECK(checked > 100);
}

TEST_CASE("validation samples never come from training trajectories") {
  const auto trajs = collect_demonstrations({}, 10, 0.1, 2);
  const auto ds = build_history_dataset(trajs, {.history = 2, .context = 3});
  const auto split = split_by_trajectory(ds, 0.3, 4);
  const auto train_ids = split.train.trajectory_ids();
  const std::set<std::uint64_t> train_set(train_ids.begin(), train_ids.end());
  for (const auto& s : split.val.samples) CHECK_FALSE(train_set.contains(s.trajectory));
  CHECK(split.val.size() > 0);
}

TEST_CASE("without noise a copycat on executed actions equals one on labels") {
  const auto trajs = collect_demonstrations({}, 4, 0.0, 6);
  const auto labels = build_history_dataset(trajs, {.history = 0, .context = 3});
  const auto executed = build_history_dataset(
      trajs, {.history = 0, .context = 3, .context_source = ActionSource::executed,
              .target_source = ActionSource::executed});
  CopycatSpec spec;
  spec.hidden_dims = {8};
  spec.train.iterations = 100;
  spec.folds = 2;
  const auto a = train_copycat(labels, spec);
  const auto b = train_copycat(executed, spec);
  REQUIRE(a.models.size() == b.models.size());
  for (std::size_t f = 0; f < a.models.size(); ++f) CHECK(a.models[f] == b.models[f]);
  CHECK(compute_ape(a, labels).ape == compute_ape(b, executed).ape);
}

TEST_CASE("dataset save and load round trip") {
  const auto trajs = collect_demonstrations({}, 4, 0.2, 5);
  const auto path = scratch("roundtrip.jsonl");
  save_dataset(path, trajs);
  CHECK(load_dataset(path) == trajs);
  // identical bytes on re-save
  std::ifstream in(path);
  std::stringstream first;
  first << in.rdbuf();
  save_dataset(path, trajs);
  std::ifstream in2(path);
  std::stringstream second;
  second << in2.rdbuf();
  CHECK(first.str() == second.str());
}

TEST_CASE("truncated and empty dataset files are rejected") {
  const auto trajs = collect_demonstrations({}, 3, 0.1, 5);
  const auto path = scratch("truncated.jsonl");
  save_dataset(path, trajs);
  std::string text;
  {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  {
    std::ofstream out(path, std::ios::trunc);
    out << text.substr(0, text.size() / 2);
  }
  try {
    load_dataset(path);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() >= 2);
  }

  const auto empty = scratch("empty.jsonl");
  { std::ofstream out(empty, std::ios::trunc); }
  CHECK_THROWS_AS(load_dataset(empty), DataError);
  CHECK_THROWS_AS(load_dataset(scratch("missing.jsonl")), IoError);
}

TEST_CASE("sample CSV export has one row per sample") {
  const auto trajs = scripted_set(2, 4);
  const auto ds = build_history_dataset(trajs, {.history = 1, .context = 2});
  const auto path = scratch("samples.csv");
  export_samples_csv(path, ds);
  std::ifstream in(path);
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == ds.size() + 1);
}

}  // TEST_SUITE
