// Python bindings. Structured values cross the boundary as JSON text; the
// kfbc package turns them into dicts.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <filesystem>

#include "kfbc/errors.hpp"
#include "kfbc/experiment.hpp"

namespace py = pybind11;
using namespace kfbc;
using nlohmann::json;

namespace {

ToyCarConfig env_config(const std::string& text) {
  return text.empty() ? ToyCarConfig{} : toycar_config_from_json(json::parse(text));
}

std::string demonstrations(const std::string& config, std::size_t episodes, double noise_rate,
                           std::uint64_t seed) {
  json out = json::array();
  for (const auto& t : collect_demonstrations(env_config(config), episodes, noise_rate, seed))
    out.push_back(to_json(t));
  return out.dump();
}

std::vector<Trajectory> trajectories(const std::string& text) {
  std::vector<Trajectory> out;
  for (const auto& doc : json::parse(text)) out.push_back(trajectory_from_json(doc));
  return out;
}

// Trains a cross-validated copycat on the trajectories and scores every sample.
std::string score_keyframes(const std::string& trajs, const std::string& copycat) {
  const auto spec = copycat.empty() ? CopycatSpec{} : copycat_spec_from_json(json::parse(copycat));
  const auto ds = build_history_dataset(trajectories(trajs), {.history = 0, .context = spec.context});
  const auto ape = compute_ape(train_copycat(ds, spec), ds);
  json rows = json::array();
  for (std::size_t i = 0; i < ds.size(); ++i)
    rows.push_back({{"trajectory", ds.samples[i].trajectory},
                    {"step", ds.samples[i].step},
                    {"ape", ape.ape[i]}});
  return json{{"samples", rows},
              {"mean", ape.mean},
              {"p50", ape.p50},
              {"p90", ape.p90},
              {"p99", ape.p99},
              {"max", ape.max}}
      .dump();
}

std::string run_experiment(const std::string& config_text, const std::string& out_dir,
                           std::size_t jobs) {
  auto config = experiment_config_from_json(json::parse(config_text));
  if (!out_dir.empty()) config.output = out_dir;
  const std::filesystem::path dir = config.output;
  std::filesystem::create_directories(dir);
  std::vector<RunOutcome> outcomes;
  {
    py::gil_scoped_release release;
    const auto data = prepare_data(config, dir, true);
    write_data_artifacts(config, data, dir);
    outcomes = run_methods(config, data, dir, jobs, [](const std::string&) {});
  }
  json runs = json::array();
  for (const auto& o : outcomes)
    runs.push_back({{"method", o.method}, {"seed", o.seed}, {"ok", o.ok}, {"error", o.error}});
  return json{{"aggregate_csv", aggregate_runs(config, dir)},
              {"runs", runs},
              {"config_hash", config_hash(config)}}
      .dump();
}

}  // namespace

PYBIND11_MODULE(_kfbc, m) {
  m.doc() = "Keyframe-weighted behavioral cloning core";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<UsageError>(m, "UsageError", PyExc_RuntimeError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);

  py::class_<ToyCar>(m, "ToyCar")
      .def(py::init([](const std::string& config) { return ToyCar(env_config(config)); }),
           py::arg("config") = "")
      .def("reset", py::overload_cast<std::uint64_t>(&ToyCar::reset), py::arg("seed"))
      .def("step",
           [](ToyCar& env, double action) {
             const auto o = env.step(action);
             return py::make_tuple(o.observation, o.reward, o.done,
                                   json{{"reached_goal", o.events.reached_goal},
                                        {"red_violation", o.events.red_violation},
                                        {"timeout", o.events.timeout}}
                                       .dump());
           })
      .def("state_json", [](const ToyCar& env) { return to_json(env.state()).dump(); })
      .def("expert_action",
           [](const ToyCar& env) { return toycar_expert(env.state(), env.config()); });

  m.def("collect_demonstrations", &demonstrations, py::arg("config"), py::arg("episodes"),
        py::arg("noise_rate"), py::arg("seed"));
  m.def("score_keyframes", &score_keyframes, py::arg("trajectories"), py::arg("copycat") = "");
  m.def("softmax_weights",
        [](const std::vector<double>& s, double t) { return softmax_weights(s, t); },
        py::arg("scores"), py::arg("temperature"));
  m.def("step_weights",
        [](const std::vector<double>& s, double thr, double w) {
          return step_weights(s, thr, w).weights;
        },
        py::arg("scores"), py::arg("threshold_percent"), py::arg("weight"));
  m.def("bcpd_changepoint_probabilities",
        [](const std::vector<double>& x, double hazard, double noise, double mean, double var) {
          BcpdParams p{hazard, noise, mean, var};
          p.validate();
          return bcpd_changepoint_probabilities(x, p);
        },
        py::arg("series"), py::arg("hazard_rate") = 0.02, py::arg("obs_noise_variance") = 0.01,
        py::arg("prior_mean") = 0.0, py::arg("prior_variance") = 1.0);
  m.def("actfreq_weights",
        [](const std::vector<std::vector<double>>& actions, std::size_t k, std::uint64_t seed) {
          return actfreq_weights(Matrix::from_rows(actions), k, seed).weights;
        },
        py::arg("actions"), py::arg("clusters"), py::arg("seed") = 0);
  m.def("copycat_condition",
        [](double eps, double ref) { return to_json(copycat_condition(eps, ref)).dump(); },
        py::arg("eps_cp"), py::arg("reference_mse"));
  m.def("config_hash",
        [](const std::string& text) {
          return config_hash(experiment_config_from_json(json::parse(text)));
        },
        py::arg("config"));
  m.def("run_experiment", &run_experiment, py::arg("config"), py::arg("out") = "",
        py::arg("jobs") = 1);
}
