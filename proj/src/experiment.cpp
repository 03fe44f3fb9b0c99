#include "kfbc/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <thread>

#include "kfbc/errors.hpp"
#include "kfbc/random.hpp"

namespace kfbc {

namespace fs = std::filesystem;

namespace {

std::string fmt_num(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string short_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void write_json(const fs::path& path, const nlohmann::json& doc) {
  write_text(path, doc.dump(2) + "\n");
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

std::string kind_name(MethodKind k) {
  switch (k) {
    case MethodKind::bc: return "bc";
    case MethodKind::dagger: return "dagger";
    case MethodKind::boosting: return "boosting";
  }
  return "bc";
}

MethodKind kind_from_string(const std::string& s) {
  if (s == "bc") return MethodKind::bc;
  if (s == "dagger") return MethodKind::dagger;
  if (s == "boosting") return MethodKind::boosting;
  throw ConfigError("unknown method kind '" + s + "'");
}

fs::path run_dir(const fs::path& dir, const std::string& method, std::uint64_t seed) {
  return dir / "runs" / method / ("seed_" + std::to_string(seed));
}

// Hash of the knobs that must be identical across methods that only differ
// in history length and weighting.
std::string controlled_hash(const MethodConfig& m) {
  return hash_json({{"hidden_dims", m.policy.hidden_dims},
                    {"activation", to_string(m.policy.activation)},
                    {"train", to_json(m.train)}});
}

struct RunSeeds {
  std::uint64_t init, train, eval, avg_ape, dagger;
};

RunSeeds run_seeds(std::uint64_t seed) {
  return {derive_seed(seed, 1), derive_seed(seed, 2), derive_seed(seed, 3), derive_seed(seed, 4),
          derive_seed(seed, 5)};
}

}  // namespace

void ExperimentConfig::validate() const {
  env.validate();
  copycat.validate();
  if (data.episodes < 2) throw ConfigError("data.episodes must be at least 2");
  if (!(data.noise_rate >= 0.0 && data.noise_rate < 1.0))
    throw ConfigError("data.noise_rate must lie in [0, 1)");
  if (!(data.val_fraction > 0.0 && data.val_fraction < 1.0))
    throw ConfigError("data.val_fraction must lie in (0, 1)");
  if (copycat.context != data.context)
    throw ConfigError("copycat.context must equal data.context");
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (methods.empty()) throw ConfigError("at least one method is required");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw ConfigError("seeds must be distinct");
  std::set<std::string> names;
  for (const auto& m : methods) {
    if (m.name.empty()) throw ConfigError("method name must not be empty");
    if (m.name == "expert") throw ConfigError("method name 'expert' is reserved");
    if (m.name.find('/') != std::string::npos) throw ConfigError("method names cannot contain '/'");
    if (!names.insert(m.name).second) throw ConfigError("duplicate method name '" + m.name + "'");
    m.policy.validate();
    m.train.validate();
    kfbc::validate(m.scheme);
    const bool boosting = std::holds_alternative<BoostingScheme>(m.scheme);
    if (boosting != (m.kind == MethodKind::boosting))
      throw ConfigError("method '" + m.name + "': boosting scheme and kind must go together");
    if (m.kind == MethodKind::dagger) {
      if (!std::holds_alternative<UniformScheme>(m.scheme))
        throw ConfigError("method '" + m.name + "': DAGGER uses uniform weights");
      if (m.dagger.rounds == 0 || m.dagger.query_budget < m.dagger.rounds)
        throw ConfigError("method '" + m.name + "': need query_budget >= rounds >= 1");
    }
    if (m.policy.history_dropout_rate > 0.0 && m.policy.history == 0)
      throw ConfigError("method '" + m.name + "': history dropout needs history > 0");
  }
  if (!(eval.breakdown_percentile > 0.0 && eval.breakdown_percentile <= 100.0))
    throw ConfigError("eval.breakdown_percentile must lie in (0, 100]");
  if (eval.episodes == 0) throw ConfigError("eval.episodes must be positive");
  if (eval.avg_ape && eval.episodes < 4) throw ConfigError("avgAPE needs eval.episodes >= 4");
}

const MethodConfig& ExperimentConfig::method(const std::string& wanted) const {
  for (const auto& m : methods)
    if (m.name == wanted) return m;
  throw ConfigError("no method named '" + wanted + "'");
}

nlohmann::json to_json(const MethodConfig& m) {
  nlohmann::json doc{{"name", m.name},
                     {"kind", kind_name(m.kind)},
                     {"policy", to_json(m.policy)},
                     {"scheme", to_json(m.scheme)},
                     {"train", to_json(m.train)}};
  if (m.kind == MethodKind::dagger)
    doc["dagger"] = {{"query_budget", m.dagger.query_budget}, {"rounds", m.dagger.rounds}};
  return doc;
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& doc) {
  static const std::set<std::string> known{"name", "env", "data", "copycat", "defaults",
                                           "methods", "seeds", "eval", "diag", "grid",
                                           "output"};
  if (!doc.is_object()) throw ConfigError("experiment config must be a JSON object");
  for (const auto& [key, value] : doc.items())
    if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  try {
    ExperimentConfig c;
    c.name = doc.value("name", c.name);
    if (doc.contains("env")) c.env = toycar_config_from_json(doc.at("env"));
    if (doc.contains("data")) {
      const auto& d = doc.at("data");
      c.data.episodes = d.value("episodes", c.data.episodes);
      c.data.noise_rate = d.value("noise_rate", c.data.noise_rate);
      c.data.history = d.value("history", c.data.history);
      c.data.context = d.value("context", c.data.context);
      c.data.val_fraction = d.value("val_fraction", c.data.val_fraction);
      c.data.seed = d.value("seed", c.data.seed);
    }
    c.copycat.context = c.data.context;
    if (doc.contains("copycat")) {
      auto cc = to_json(c.copycat);
      cc.merge_patch(doc.at("copycat"));
      c.copycat = copycat_spec_from_json(cc);
    }

    PolicySpec base_policy;
    base_policy.history = c.data.history;
    TrainConfig base_train;
    base_train.iterations = 3000;
    nlohmann::json policy_defaults = to_json(base_policy);
    nlohmann::json train_defaults = to_json(base_train);
    if (doc.contains("defaults")) {
      const auto& d = doc.at("defaults");
      if (d.contains("policy")) policy_defaults.merge_patch(d.at("policy"));
      if (d.contains("train")) train_defaults.merge_patch(d.at("train"));
    }
    for (const auto& mdoc : doc.value("methods", nlohmann::json::array())) {
      MethodConfig m;
      m.name = mdoc.at("name").get<std::string>();
      auto policy = policy_defaults;
      if (mdoc.contains("policy")) policy.merge_patch(mdoc.at("policy"));
      m.policy = policy_spec_from_json(policy);
      auto train = train_defaults;
      if (mdoc.contains("train")) train.merge_patch(mdoc.at("train"));
      m.train = train_config_from_json(train);
      if (mdoc.contains("scheme")) m.scheme = weight_scheme_from_json(mdoc.at("scheme"));
      const bool boosting = std::holds_alternative<BoostingScheme>(m.scheme);
      m.kind = kind_from_string(mdoc.value("kind", boosting ? "boosting" : "bc"));
      if (mdoc.contains("dagger")) {
        const auto& dg = mdoc.at("dagger");
        m.dagger.query_budget = dg.value("query_budget", m.dagger.query_budget);
        m.dagger.rounds = dg.value("rounds", m.dagger.rounds);
      }
      c.methods.push_back(std::move(m));
    }
    if (doc.contains("seeds")) c.seeds = doc.at("seeds").get<std::vector<std::uint64_t>>();
    if (doc.contains("eval")) {
      const auto& e = doc.at("eval");
      c.eval.episodes = e.value("episodes", c.eval.episodes);
      c.eval.avg_ape = e.value("avg_ape", c.eval.avg_ape);
      c.eval.include_expert = e.value("include_expert", c.eval.include_expert);
      c.eval.breakdown_percentile = e.value("breakdown_percentile", c.eval.breakdown_percentile);
      c.eval.avg_ape_heldout = e.value("avg_ape_heldout", c.eval.avg_ape_heldout);
      c.eval.stall.speed_fraction = e.value("stall_speed_fraction", c.eval.stall.speed_fraction);
      c.eval.stall.min_steps = e.value("stall_min_steps", c.eval.stall.min_steps);
    }
    if (doc.contains("diag")) {
      const auto& d = doc.at("diag");
      c.diag.reference_method = d.value("reference_method", c.diag.reference_method);
      c.diag.histogram_bins = d.value("histogram_bins", c.diag.histogram_bins);
    }
    if (doc.contains("grid")) {
      const auto& g = doc.at("grid");
      c.grid.base_method = g.value("base_method", c.grid.base_method);
      c.grid.temperatures = g.value("temperatures", c.grid.temperatures);
      c.grid.thresholds = g.value("thresholds", c.grid.thresholds);
      c.grid.weights = g.value("weights", c.grid.weights);
    }
    c.output = doc.value("output", c.output.string());
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad experiment config: ") + e.what());
  }
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return experiment_config_from_json(doc);
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json methods = nlohmann::json::array();
  for (const auto& m : c.methods) methods.push_back(to_json(m));
  return {{"name", c.name},
          {"env", to_json(c.env)},
          {"data",
           {{"episodes", c.data.episodes},
            {"noise_rate", c.data.noise_rate},
            {"history", c.data.history},
            {"context", c.data.context},
            {"val_fraction", c.data.val_fraction},
            {"seed", c.data.seed}}},
          {"copycat", to_json(c.copycat)},
          {"methods", methods},
          {"seeds", c.seeds},
          {"eval",
           {{"episodes", c.eval.episodes},
            {"avg_ape", c.eval.avg_ape},
            {"include_expert", c.eval.include_expert},
            {"breakdown_percentile", c.eval.breakdown_percentile},
            {"avg_ape_heldout", c.eval.avg_ape_heldout},
            {"stall_speed_fraction", c.eval.stall.speed_fraction},
            {"stall_min_steps", c.eval.stall.min_steps}}},
          {"diag",
           {{"reference_method", c.diag.reference_method},
            {"histogram_bins", c.diag.histogram_bins}}},
          {"grid",
           {{"base_method", c.grid.base_method},
            {"temperatures", c.grid.temperatures},
            {"thresholds", c.grid.thresholds},
            {"weights", c.grid.weights}}},
          {"output", c.output.string()}};
}

void apply_seed_offset(ExperimentConfig& config, std::uint64_t offset) {
  config.data.seed += offset;
  for (auto& s : config.seeds) s += offset;
}

std::string config_hash(const ExperimentConfig& config) {
  auto doc = to_json(config);
  doc.erase("output");
  return hash_json(doc);
}

std::string data_hash(const ExperimentConfig& config) {
  const auto doc = to_json(config);
  return hash_json({{"env", doc.at("env")}, {"data", doc.at("data")}, {"copycat", doc.at("copycat")}});
}

Dataset PreparedData::train_set(std::size_t history, std::size_t context) const {
  return build_history_dataset(split.train, {.history = history, .context = context});
}

Dataset PreparedData::val_set(std::size_t history, std::size_t context) const {
  return build_history_dataset(split.val, {.history = history, .context = context});
}

PreparedData prepare_data(const ExperimentConfig& config, const fs::path& dir,
                          bool reuse_existing) {
  PreparedData out;
  out.data_hash = data_hash(config);
  const auto demos = dir / "data" / "demos.jsonl";
  const auto meta = dir / "data" / "meta.json";
  bool loaded = false;
  if (reuse_existing && fs::exists(demos) && fs::exists(meta)) {
    if (read_json(meta).value("data_hash", "") == out.data_hash) {
      out.trajectories = load_dataset(demos);
      loaded = true;
    }
  }
  if (!loaded)
    out.trajectories = collect_demonstrations(config.env, config.data.episodes,
                                              config.data.noise_rate, config.data.seed);
  out.perturbed_fraction = perturbed_fraction(out.trajectories);
  out.split = split_trajectories(out.trajectories, config.data.val_fraction,
                                 derive_seed(config.data.seed, 101));

  const auto train = out.train_set(config.data.history, config.data.context);
  const auto val = out.val_set(config.data.history, config.data.context);
  if (train.size() == 0 || val.size() == 0) throw DataError("empty train or validation split");
  out.copycat = train_copycat(train, config.copycat);
  out.train_ape = compute_ape(out.copycat, train);
  out.val_ape = compute_ape(out.copycat, val);

  std::vector<double> mean(train.action_dim, 0.0);
  for (const auto& s : train.samples)
    for (std::size_t d = 0; d < mean.size(); ++d) mean[d] += s.target[d];
  for (double& m : mean) m /= static_cast<double>(train.size());
  double mse = 0.0;
  for (const auto& s : val.samples) {
    double sq = 0.0;
    for (std::size_t d = 0; d < mean.size(); ++d) sq += (s.target[d] - mean[d]) * (s.target[d] - mean[d]);
    mse += sq / static_cast<double>(mean.size());
  }
  out.constant_mean_mse = mse / static_cast<double>(val.size());
  return out;
}

namespace {

nlohmann::json ape_summary(const ApeTable& t) {
  return {{"mean", t.mean}, {"p50", t.p50}, {"p90", t.p90}, {"p99", t.p99}, {"max", t.max},
          {"samples", t.size()}};
}

StepScheme csv_step_scheme(const ExperimentConfig& config) {
  for (const auto& m : config.methods)
    if (const auto* s = std::get_if<StepScheme>(&m.scheme)) return *s;
  return {};
}

}  // namespace

void write_data_artifacts(const ExperimentConfig& config, const PreparedData& data,
                          const fs::path& dir) {
  const auto data_dir = dir / "data";
  fs::create_directories(data_dir);
  save_dataset(data_dir / "demos.jsonl", data.trajectories);

  const auto train = data.train_set(config.data.history, config.data.context);
  const auto val = data.val_set(config.data.history, config.data.context);
  const auto step = csv_step_scheme(config);
  const auto table = step_weights(data.train_ape.ape, step.threshold_percent, step.weight);
  export_ape_csv(data_dir / "ape.csv", train, data.train_ape, table.weights);
  const std::vector<double> ones(val.size(), 1.0);
  export_ape_csv(data_dir / "ape_val.csv", val, data.val_ape, ones);

  std::vector<std::uint64_t> train_ids, val_ids;
  for (const auto& t : data.split.train) train_ids.push_back(t.id);
  for (const auto& t : data.split.val) val_ids.push_back(t.id);
  write_json(data_dir / "meta.json",
             {{"data_hash", data.data_hash},
              {"config_hash", config_hash(config)},
              {"episodes", data.trajectories.size()},
              {"perturbed_fraction", data.perturbed_fraction},
              {"train_trajectories", train_ids},
              {"val_trajectories", val_ids},
              {"train_samples", train.size()},
              {"val_samples", val.size()},
              {"train_ape", ape_summary(data.train_ape)},
              {"val_ape", ape_summary(data.val_ape)},
              {"copycat_heldout_mse", data.val_ape.mean},
              {"constant_mean_mse", data.constant_mean_mse},
              {"weights_in_ape_csv",
               {{"threshold_percent", step.threshold_percent}, {"weight", step.weight}}}});
}

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
}

namespace {

struct Job {
  const MethodConfig* method = nullptr;  // null for the expert reference
  std::uint64_t seed = 0;
};

std::vector<Job> make_jobs(const ExperimentConfig& config) {
  std::vector<Job> jobs;
  for (const auto& m : config.methods)
    for (auto s : config.seeds) jobs.push_back({&m, s});
  if (config.eval.include_expert)
    for (auto s : config.seeds) jobs.push_back({nullptr, s});
  return jobs;
}

// Evaluation shared by fresh runs and re-evaluation of saved policies.
nlohmann::json evaluate(const ExperimentConfig& config, const PreparedData& data,
                        const TrainedPolicy* policy, std::uint64_t seed) {
  const auto seeds = run_seeds(seed);
  std::unique_ptr<Agent> agent;
  if (policy) {
    agent = std::make_unique<PolicyAgent>(std::make_shared<const TrainedPolicy>(*policy));
  } else {
    agent = std::make_unique<ExpertAgent>();
  }
  auto result = rollout(config.env, *agent, config.eval.episodes, seeds.eval, config.eval.stall);
  nlohmann::json doc;
  doc["eval"] = to_json(result.report);
  doc["rollout_imitation_error"] = rollout_imitation_error(result.trajectories, config.env);
  if (config.eval.avg_ape) {
    doc["avg_ape"] = to_json(avg_ape_from_trajectories(result.trajectories, config.copycat,
                                                       seeds.avg_ape, config.eval.avg_ape_heldout));
  } else {
    doc["avg_ape"] = nullptr;
  }
  if (policy) {
    const auto h = policy->spec.history;
    const auto train = data.train_set(h, config.data.context);
    const auto val = data.val_set(h, config.data.context);
    doc["breakdown"] = {
        {"percentile", config.eval.breakdown_percentile},
        {"train", to_json(loss_breakdown(*policy, train, data.train_ape,
                                         config.eval.breakdown_percentile))},
        {"val", to_json(loss_breakdown(*policy, val, data.val_ape,
                                       config.eval.breakdown_percentile))}};
  } else {
    doc["breakdown"] = nullptr;
  }
  return doc;
}

TrainedPolicy train_method(const ExperimentConfig& config, const PreparedData& data,
                           const MethodConfig& m, std::uint64_t seed, nlohmann::json& extra) {
  const auto seeds = run_seeds(seed);
  PolicySpec spec = m.policy;
  spec.init_seed = seeds.init;
  TrainConfig train_config = m.train;
  train_config.rng_seed = seeds.train;

  switch (m.kind) {
    case MethodKind::dagger: {
      auto result = dagger(config.env, spec, m.dagger.query_budget, m.dagger.rounds, train_config,
                           seeds.dagger, config.data.context);
      extra["dagger"] = {{"states_per_round", result.states_per_round},
                         {"trajectories", result.aggregated.size()}};
      return std::move(result.policy);
    }
    case MethodKind::boosting: {
      const auto train = data.train_set(spec.history, config.data.context);
      auto result =
          boosting_weights(train, spec, std::get<BoostingScheme>(m.scheme), train_config);
      nlohmann::json rounds = nlohmann::json::array();
      for (const auto& r : result.rounds)
        rounds.push_back({{"average_loss", r.average_loss}, {"beta", r.beta}});
      extra["boosting"] = {{"rounds", rounds}};
      return std::move(result.policy);
    }
    case MethodKind::bc: break;
  }
  const auto train = data.train_set(spec.history, config.data.context);
  const auto weights = resolve_weights(m.scheme, train, &data.train_ape);
  return train_bc(train, spec, weights, train_config);
}

nlohmann::json record_header(const ExperimentConfig& config, const PreparedData& data,
                             const Job& job) {
  nlohmann::json rec{{"method", job.method ? job.method->name : "expert"},
                     {"seed", job.seed},
                     {"config_hash", config_hash(config)},
                     {"data_hash", data.data_hash}};
  if (job.method) {
    rec["method_config"] = to_json(*job.method);
    rec["controlled_hash"] = controlled_hash(*job.method);
  }
  return rec;
}

std::vector<RunOutcome> execute(const ExperimentConfig& config, const PreparedData& data,
                                const fs::path& dir, std::size_t jobs, const Logger& log,
                                bool retrain) {
  const auto all = make_jobs(config);
  std::vector<RunOutcome> outcomes(all.size());
  parallel_for(all.size(), jobs, [&](std::size_t i) {
    const auto& job = all[i];
    auto& out = outcomes[i];
    out.method = job.method ? job.method->name : "expert";
    out.seed = job.seed;
    const auto rdir = run_dir(dir, out.method, job.seed);
    try {
      nlohmann::json rec = record_header(config, data, job);
      std::unique_ptr<TrainedPolicy> policy;
      if (job.method) {
        if (retrain) {
          fs::remove_all(rdir);
          fs::create_directories(rdir);
          nlohmann::json extra = nlohmann::json::object();
          policy = std::make_unique<TrainedPolicy>(
              train_method(config, data, *job.method, job.seed, extra));
          policy->provenance.config_hash = config_hash(config);
          rec.update(extra);
          write_json(rdir / "policy.json", policy_to_json(*policy));
        } else {
          const auto ppath = rdir / "policy.json";
          if (!fs::exists(ppath)) throw IoError("missing policy artifact " + ppath.string());
          policy = std::make_unique<TrainedPolicy>(policy_from_json(read_json(ppath)));
          if (policy->provenance.config_hash != config_hash(config))
            throw ConfigError("policy " + ppath.string() + " was trained under config hash " +
                              policy->provenance.config_hash);
          fs::remove(rdir / "record.json");
          fs::remove(rdir / "error.txt");
        }
        rec["policy_file"] = "policy.json";
        rec["final_loss"] = policy->provenance.loss_trace.empty()
                                ? nlohmann::json(nullptr)
                                : nlohmann::json(policy->provenance.loss_trace.back());
      } else {
        fs::remove_all(rdir);
        fs::create_directories(rdir);
      }
      rec.update(evaluate(config, data, policy.get(), job.seed));
      write_json(rdir / "record.json", rec);
      out.record = std::move(rec);
      out.ok = true;
      if (log) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s seed %llu: success %.3f violations %zu stalls %zu",
                      out.method.c_str(), static_cast<unsigned long long>(job.seed),
                      out.record["eval"]["success_rate"].get<double>(),
                      out.record["eval"]["violations"].get<std::size_t>(),
                      out.record["eval"]["inertia_stalls"].get<std::size_t>());
        log(buf);
      }
    } catch (const std::exception& e) {
      out.ok = false;
      out.error = e.what();
      try {
        fs::create_directories(rdir);
        fs::remove(rdir / "record.json");
        write_text(rdir / "error.txt", out.error + "\n");
      } catch (...) {
      }
      if (log) log(out.method + " seed " + std::to_string(job.seed) + " FAILED: " + out.error);
    }
  });
  return outcomes;
}

}  // namespace

std::vector<RunOutcome> run_methods(const ExperimentConfig& config, const PreparedData& data,
                                    const fs::path& dir, std::size_t jobs, const Logger& log) {
  return execute(config, data, dir, jobs, log, true);
}

std::vector<RunOutcome> evaluate_saved(const ExperimentConfig& config, const PreparedData& data,
                                       const fs::path& dir, std::size_t jobs,
                                       const Logger& log) {
  return execute(config, data, dir, jobs, log, false);
}

namespace {

struct Metric {
  const char* column;
  std::function<double(const nlohmann::json&)> get;
};

double opt_number(const nlohmann::json& doc, std::initializer_list<const char*> path) {
  const nlohmann::json* cur = &doc;
  for (const char* key : path) {
    if (!cur->is_object() || !cur->contains(key) || cur->at(key).is_null()) return NAN;
    cur = &cur->at(key);
  }
  return cur->get<double>();
}

const std::vector<Metric>& metrics() {
  static const std::vector<Metric> m{
      {"success", [](const auto& r) { return opt_number(r, {"eval", "success_rate"}); }},
      {"violations", [](const auto& r) { return opt_number(r, {"eval", "violations"}); }},
      {"progress", [](const auto& r) { return opt_number(r, {"eval", "progress"}); }},
      {"avg_speed", [](const auto& r) { return opt_number(r, {"eval", "avg_speed"}); }},
      {"inertia_stalls", [](const auto& r) { return opt_number(r, {"eval", "inertia_stalls"}); }},
      {"rollout_error", [](const auto& r) { return opt_number(r, {"rollout_imitation_error"}); }},
      {"avg_ape", [](const auto& r) { return opt_number(r, {"avg_ape", "avg_ape"}); }},
      {"cp_val_mse",
       [](const auto& r) { return opt_number(r, {"breakdown", "val", "changepoint_mse"}); }},
      {"other_val_mse",
       [](const auto& r) { return opt_number(r, {"breakdown", "val", "other_mse"}); }},
      {"overall_val_mse",
       [](const auto& r) { return opt_number(r, {"breakdown", "val", "overall_mse"}); }},
  };
  return m;
}

}  // namespace

std::string aggregate_runs(const ExperimentConfig& config, const fs::path& dir) {
  const auto hash = config_hash(config);
  std::vector<std::string> methods;
  for (const auto& m : config.methods) methods.push_back(m.name);
  if (config.eval.include_expert) methods.push_back("expert");

  std::ostringstream csv;
  csv << "method,n_runs";
  for (const auto& m : metrics()) csv << ',' << m.column << "_mean," << m.column << "_std";
  csv << '\n';
  for (const auto& name : methods) {
    std::vector<nlohmann::json> records;
    for (auto seed : config.seeds) {
      const auto path = run_dir(dir, name, seed) / "record.json";
      if (!fs::exists(path)) continue;
      auto rec = read_json(path);
      if (rec.value("config_hash", "") != hash)
        throw ConfigError("refusing to aggregate " + path.string() + ": config hash " +
                          rec.value("config_hash", "<none>") + " differs from " + hash);
      records.push_back(std::move(rec));
    }
    csv << name << ',' << records.size();
    for (const auto& m : metrics()) {
      std::vector<double> values;
      for (const auto& r : records) {
        const double v = m.get(r);
        if (std::isfinite(v)) values.push_back(v);
      }
      if (values.empty()) {
        csv << ",nan,nan";
        continue;
      }
      double mean = 0.0;
      for (double v : values) mean += v;
      mean /= static_cast<double>(values.size());
      double var = 0.0;
      for (double v : values) var += (v - mean) * (v - mean);
      var /= static_cast<double>(values.size());
      csv << ',' << fmt_num(mean) << ',' << fmt_num(std::sqrt(var));
    }
    csv << '\n';
  }
  write_text(dir / "aggregate.csv", csv.str());
  return csv.str();
}

nlohmann::json run_diagnostics(const ExperimentConfig& config, const PreparedData& data,
                               const fs::path& dir) {
  const auto& ref = config.method(config.diag.reference_method);
  const auto ppath = run_dir(dir, ref.name, config.seeds.front()) / "policy.json";
  if (!fs::exists(ppath))
    throw IoError("diagnostics need the trained reference policy " + ppath.string() +
                  " (run `kfbc run` first)");
  const auto policy = policy_from_json(read_json(ppath));
  if (policy.provenance.config_hash != config_hash(config))
    throw ConfigError("reference policy " + ppath.string() + " belongs to a different config");

  const auto val = data.val_set(policy.spec.history, config.data.context);
  const auto errors = per_sample_squared_error(policy.model, val.windows(), val.targets());
  double ref_mse = 0.0;
  for (double e : errors) ref_mse += e;
  ref_mse /= static_cast<double>(errors.size());

  const auto verdict = copycat_condition(data.val_ape.mean, ref_mse);
  const double corr = pearson(data.val_ape.ape, errors);

  const auto ddir = dir / "diag";
  fs::create_directories(ddir);

  // APE histogram over training and validation samples.
  std::vector<double> all = data.train_ape.ape;
  all.insert(all.end(), data.val_ape.ape.begin(), data.val_ape.ape.end());
  const double hi = std::max(*std::max_element(all.begin(), all.end()), 1e-12);
  const std::size_t bins = std::max<std::size_t>(1, config.diag.histogram_bins);
  std::vector<std::size_t> counts(bins, 0);
  for (double a : all) {
    auto b = static_cast<std::size_t>(a / hi * static_cast<double>(bins));
    counts[std::min(b, bins - 1)]++;
  }
  std::ostringstream hist;
  hist << "bin_lo,bin_hi,count\n";
  for (std::size_t b = 0; b < bins; ++b) {
    hist << fmt_num(hi * static_cast<double>(b) / static_cast<double>(bins)) << ','
         << fmt_num(hi * static_cast<double>(b + 1) / static_cast<double>(bins)) << ','
         << counts[b] << '\n';
  }
  write_text(ddir / "ape_histogram.csv", hist.str());

  // One row per validation step.
  std::ostringstream trace;
  trace << "trajectory,step,expert_action,policy_action,copycat_prediction,ape,policy_sq_error\n";
  for (std::size_t i = 0; i < val.size(); ++i) {
    const auto& s = val.samples[i];
    const auto action = predict_raw(policy, s.window);
    const auto cc = data.copycat.predict(s);
    trace << s.trajectory << ',' << s.step << ',' << fmt_num(s.target[0]) << ','
          << fmt_num(action[0]) << ',' << fmt_num(cc[0]) << ',' << fmt_num(data.val_ape.ape[i])
          << ',' << fmt_num(errors[i]) << '\n';
  }
  write_text(ddir / "trace.csv", trace.str());

  nlohmann::json report{{"config_hash", config_hash(config)},
                        {"data_hash", data.data_hash},
                        {"reference_method", ref.name},
                        {"reference_seed", config.seeds.front()},
                        {"copycat_condition", to_json(verdict)},
                        {"eps_cp_proxy", data.val_ape.mean},
                        {"copycat_heldout_mse", data.val_ape.mean},
                        {"constant_mean_mse", data.constant_mean_mse},
                        {"copycat_to_constant_ratio",
                         data.constant_mean_mse > 0.0 ? data.val_ape.mean / data.constant_mean_mse
                                                      : 0.0},
                        {"reference_val_mse", ref_mse},
                        {"ape_vs_reference_error_pearson", corr},
                        {"val_samples", val.size()},
                        {"perturbed_fraction", data.perturbed_fraction}};
  write_json(ddir / "copycat_condition.json", report);
  return report;
}

std::vector<MethodConfig> grid_methods(const ExperimentConfig& config) {
  const auto& base = config.method(config.grid.base_method);
  if (base.kind != MethodKind::bc) throw ConfigError("grid base method must be a BC method");
  std::vector<MethodConfig> out;
  for (double t : config.grid.temperatures) {
    MethodConfig m = base;
    m.name = "softmax_t" + short_num(t);
    m.scheme = SoftmaxScheme{t};
    out.push_back(std::move(m));
  }
  for (double thr : config.grid.thresholds) {
    for (double w : config.grid.weights) {
      MethodConfig m = base;
      m.name = "step_thr" + short_num(thr) + "_w" + short_num(w);
      m.scheme = StepScheme{thr, w};
      out.push_back(std::move(m));
    }
  }
  for (const auto& m : out) validate(m.scheme);
  return out;
}

}  // namespace kfbc
