#include <doctest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "kfbc/errors.hpp"
#include "kfbc/experiment.hpp"

namespace fs = std::filesystem;
using namespace kfbc;

namespace {

ExperimentConfig tiny() {
  return load_experiment_config(fs::path(KFBC_SOURCE_DIR) / "tests/data/cli_tiny.json");
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("kfbc_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void silent(const std::string&) {}

}  // namespace

TEST_SUITE("experiment") {

TEST_CASE("methods merge over defaults") {
  const auto c = tiny();
  REQUIRE(c.methods.size() == 3);
  CHECK(c.methods[0].policy.history == 0);
  CHECK(c.methods[1].policy.history == 2);
  CHECK(c.methods[1].policy.hidden_dims == std::vector<std::size_t>{16});
  CHECK(c.methods[2].train.iterations == 120);
  CHECK(std::holds_alternative<StepScheme>(c.methods[2].scheme));
  CHECK(c.copycat.train.iterations == 150);
  CHECK(c.copycat.context == 3);
  CHECK(c.method("BC-OH").name == "BC-OH");
  CHECK_THROWS_AS(c.method("nope"), ConfigError);
  // the resolved config reparses to itself
  CHECK(to_json(experiment_config_from_json(to_json(c))) == to_json(c));
}

TEST_CASE("config validation") {
  auto doc = to_json(tiny());
  doc["methods"][1]["name"] = "BC-SO";
  CHECK_THROWS_AS(experiment_config_from_json(doc), ConfigError);
  doc = to_json(tiny());
  doc["methods"][0]["name"] = "expert";
  CHECK_THROWS_AS(experiment_config_from_json(doc), ConfigError);
  doc = to_json(tiny());
  doc["data"]["noise_rate"] = 1.0;
  CHECK_THROWS_AS(experiment_config_from_json(doc), ConfigError);
  doc = to_json(tiny());
  doc["methods"][1]["kind"] = "dagger";
  doc["methods"][1]["scheme"] = {{"type", "step"}};
  CHECK_THROWS_AS(experiment_config_from_json(doc), ConfigError);
  doc = to_json(tiny());
  doc["seeds"] = {1, 1};
  CHECK_THROWS_AS(experiment_config_from_json(doc), ConfigError);
  doc = to_json(tiny());
  doc["methods"][0]["scheme"] = {{"type", "boosting"}};
  CHECK_THROWS_AS(experiment_config_from_json(doc), ConfigError);  // kind says bc
  doc["methods"][0].erase("kind");
  CHECK(experiment_config_from_json(doc).methods[0].kind == MethodKind::boosting);
  CHECK_THROWS_AS(load_experiment_config("/nonexistent/cfg.json"), IoError);
}

TEST_CASE("hashes and seed offsets") {
  auto a = tiny();
  auto b = tiny();
  b.output = "elsewhere";
  CHECK(config_hash(a) == config_hash(b));
  b.methods[1].train.iterations = 121;
  CHECK(config_hash(a) != config_hash(b));
  CHECK(data_hash(a) == data_hash(b));
  apply_seed_offset(b, 10);
  CHECK(b.data.seed == a.data.seed + 10);
  CHECK(b.seeds == std::vector<std::uint64_t>{10, 11});
  CHECK(data_hash(a) != data_hash(b));
}

TEST_CASE("grid variant names") {
  auto c = tiny();
  c.grid.temperatures = {0.1, 10};
  c.grid.thresholds = {20};
  c.grid.weights = {3, 5};
  const auto g = grid_methods(c);
  REQUIRE(g.size() == 4);
  CHECK(g[0].name == "softmax_t0.1");
  CHECK(g[1].name == "softmax_t10");
  CHECK(g[2].name == "step_thr20_w3");
  CHECK(g[3].name == "step_thr20_w5");
  CHECK(g[3].policy.history == c.method("Ours").policy.history);
}

TEST_CASE("run, aggregate, diagnose and re-evaluate a tiny experiment") {
  auto c = tiny();
  const auto dir = fresh_dir("run");
  c.output = dir;
  const auto data = prepare_data(c, dir, true);
  write_data_artifacts(c, data, dir);
  CHECK(data.split.val.size() == 2);
  CHECK(data.train_ape.size() == data.train_set(2, 3).size());
  CHECK(fs::exists(dir / "data/demos.jsonl"));
  CHECK(fs::exists(dir / "data/ape.csv"));

  // Diagnostics refuse to run before the reference policy exists.
  CHECK_THROWS_AS(run_diagnostics(c, data, dir), IoError);

  const auto outcomes = run_methods(c, data, dir, 3, silent);
  CHECK(outcomes.size() == (3 + 1) * 2);
  for (const auto& o : outcomes) {
    INFO(o.method << " seed " << o.seed << ": " << o.error);
    CHECK(o.ok);
    CHECK(fs::exists(dir / "runs" / o.method / ("seed_" + std::to_string(o.seed)) / "record.json"));
  }
  // BC-SO, BC-OH and Ours differ only in history length and weighting.
  std::set<std::string> controlled;
  for (const auto* m : {"BC-SO", "BC-OH", "Ours"}) {
    std::ifstream in(dir / "runs" / m / "seed_0/record.json");
    controlled.insert(nlohmann::json::parse(in).at("controlled_hash").get<std::string>());
  }
  CHECK(controlled.size() == 1);

  const auto csv = aggregate_runs(c, dir);
  CHECK(csv.rfind("method,n_runs,success_mean,success_std", 0) == 0);
  CHECK(csv.find("\nBC-OH,2,") != std::string::npos);
  CHECK(csv.find("\nexpert,2,1.000000,0.000000") != std::string::npos);

  const auto diag = run_diagnostics(c, data, dir);
  CHECK(diag.contains("copycat_condition"));
  CHECK(fs::exists(dir / "diag/trace.csv"));
  CHECK(fs::exists(dir / "diag/ape_histogram.csv"));

  // Re-evaluation reproduces the records exactly.
  const auto before = slurp(dir / "runs/Ours/seed_1/record.json");
  const auto again = evaluate_saved(c, data, dir, 2, silent);
  for (const auto& o : again) CHECK(o.ok);
  CHECK(slurp(dir / "runs/Ours/seed_1/record.json") == before);

  // A changed config must not silently mix with old records.
  auto changed = c;
  changed.methods[1].train.iterations = 7;
  CHECK_THROWS_AS(aggregate_runs(changed, dir), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("results do not depend on the number of jobs") {
  auto c = tiny();
  c.methods.resize(2);
  c.eval.avg_ape = false;
  const auto d1 = fresh_dir("jobs1");
  const auto d3 = fresh_dir("jobs3");
  const auto data = prepare_data(c, d1, false);
  run_methods(c, data, d1, 1, silent);
  run_methods(c, data, d3, 3, silent);
  for (const auto* m : {"BC-SO", "BC-OH", "expert"})
    for (const auto* s : {"seed_0", "seed_1"}) {
      const auto rel = fs::path("runs") / m / s / "record.json";
      CHECK(slurp(d1 / rel) == slurp(d3 / rel));
    }
  fs::remove_all(d1);
  fs::remove_all(d3);
}

TEST_CASE("a failing run is isolated") {
  auto c = tiny();
  c.methods.resize(2);
  MethodConfig bad = c.methods[1];
  bad.name = "ActFreq6";
  bad.scheme = ActFreqScheme{6, 0};  // ToyCar actions take two values
  c.methods.push_back(bad);
  c.seeds = {0};
  c.eval.avg_ape = false;
  const auto dir = fresh_dir("fail");
  const auto data = prepare_data(c, dir, false);
  const auto outcomes = run_methods(c, data, dir, 2, silent);
  std::size_t failed = 0;
  for (const auto& o : outcomes) {
    if (o.method == "ActFreq6") {
      CHECK_FALSE(o.ok);
      CHECK_FALSE(o.error.empty());
      CHECK(fs::exists(dir / "runs/ActFreq6/seed_0/error.txt"));
      CHECK_FALSE(fs::exists(dir / "runs/ActFreq6/seed_0/record.json"));
      ++failed;
    } else {
      CHECK(o.ok);
    }
  }
  CHECK(failed == 1);
  const auto csv = aggregate_runs(c, dir);
  CHECK(csv.find("\nActFreq6,0,nan,nan") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("parallel_for visits every index once") {
  std::vector<std::atomic<int>> hits(100);
  parallel_for(100, 7, [&](std::size_t i) { hits[i]++; });
  for (const auto& h : hits) CHECK(h.load() == 1);
  parallel_for(0, 4, [](std::size_t) { FAIL("called"); });
}

}  // TEST_SUITE
