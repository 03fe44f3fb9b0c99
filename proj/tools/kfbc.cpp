// kfbc: run keyframe-weighted behavioral cloning experiments from a JSON config.
//
//   kfbc gen-data --config cfg.json --out dir
//   kfbc run      --config cfg.json --out dir --jobs 8
//   kfbc eval | diag | grid  (same flags)

#include <cstdio>
#include <iostream>
#include <mutex>
#include <string>
#include <thread>

#include <CLI11.hpp>

#include "kfbc/errors.hpp"
#include "kfbc/experiment.hpp"

namespace fs = std::filesystem;
using namespace kfbc;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::size_t jobs = 1;
  std::uint64_t seed_offset = 0;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", c.out, "Output directory (defaults to the config's \"output\")");
  cmd->add_option("--jobs", c.jobs, "Concurrent runs")->check(CLI::PositiveNumber);
  cmd->add_option("--seed-offset", c.seed_offset, "Added to the data seed and every run seed");
}

std::mutex log_mutex;

void log_line(const std::string& line) {
  std::lock_guard lock(log_mutex);
  std::cerr << line << '\n';
}

struct Loaded {
  ExperimentConfig config;
  fs::path dir;
};

Loaded load(const Common& c) {
  Loaded l{load_experiment_config(c.config), {}};
  apply_seed_offset(l.config, c.seed_offset);
  if (!c.out.empty()) l.config.output = c.out;
  l.dir = l.config.output;
  fs::create_directories(l.dir);
  std::ofstream(l.dir / "config.json") << to_json(l.config).dump(2) << '\n';
  return l;
}

PreparedData data_for(const Loaded& l, bool reuse) {
  log_line("preparing data (" + std::to_string(l.config.data.episodes) + " episodes)");
  auto data = prepare_data(l.config, l.dir, reuse);
  write_data_artifacts(l.config, data, l.dir);
  char buf[200];
  std::snprintf(buf, sizeof buf,
                "data: perturbed fraction %.4f, copycat held-out MSE %.5f, constant-mean MSE %.5f",
                data.perturbed_fraction, data.val_ape.mean, data.constant_mean_mse);
  log_line(buf);
  return data;
}

int finish(const ExperimentConfig& config, const fs::path& dir,
           const std::vector<RunOutcome>& outcomes) {
  nlohmann::json runs = nlohmann::json::array();
  std::size_t failed = 0;
  for (const auto& o : outcomes) {
    runs.push_back({{"method", o.method}, {"seed", o.seed}, {"ok", o.ok}, {"error", o.error}});
    failed += o.ok ? 0 : 1;
  }
  std::ofstream(dir / "summary.json")
      << nlohmann::json{{"config_hash", config_hash(config)},
                        {"runs", runs},
                        {"failed", failed}}
             .dump(2)
      << '\n';
  std::cout << aggregate_runs(config, dir);
  if (failed > 0) log_line(std::to_string(failed) + " run(s) failed; see summary.json");
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Keyframe-weighted behavioral cloning experiments"};
  app.require_subcommand(1);
  Common gen, run, eval, diag, grid;
  auto* gen_cmd = app.add_subcommand("gen-data", "Collect demonstrations and score them with the copycat");
  auto* run_cmd = app.add_subcommand("run", "Train and evaluate every method x seed, then aggregate");
  auto* eval_cmd = app.add_subcommand("eval", "Re-evaluate saved policies and aggregate");
  auto* diag_cmd = app.add_subcommand("diag", "Copycat condition, APE histogram and validation trace");
  auto* grid_cmd = app.add_subcommand("grid", "Sweep softmax temperatures and step thresholds/weights");
  add_common(gen_cmd, gen);
  add_common(run_cmd, run);
  add_common(eval_cmd, eval);
  add_common(diag_cmd, diag);
  add_common(grid_cmd, grid);
  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_cmd) {
      auto l = load(gen);
      data_for(l, false);
      return 0;
    }
    if (*run_cmd) {
      auto l = load(run);
      const auto data = data_for(l, true);
      const auto outcomes = run_methods(l.config, data, l.dir, run.jobs, log_line);
      return finish(l.config, l.dir, outcomes);
    }
    if (*eval_cmd) {
      auto l = load(eval);
      const auto data = data_for(l, true);
      const auto outcomes = evaluate_saved(l.config, data, l.dir, eval.jobs, log_line);
      return finish(l.config, l.dir, outcomes);
    }
    if (*diag_cmd) {
      auto l = load(diag);
      const auto data = data_for(l, true);
      std::cout << run_diagnostics(l.config, data, l.dir).dump(2) << '\n';
      return 0;
    }
    if (*grid_cmd) {
      auto l = load(grid);
      const auto data = data_for(l, true);
      ExperimentConfig sweep = l.config;
      sweep.methods = grid_methods(l.config);
      sweep.eval.include_expert = false;
      const fs::path gdir = l.dir / "grid";
      sweep.output = gdir;
      fs::create_directories(gdir);
      std::ofstream(gdir / "config.json") << to_json(sweep).dump(2) << '\n';
      const auto outcomes = run_methods(sweep, data, gdir, grid.jobs, log_line);
      return finish(sweep, gdir, outcomes);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
