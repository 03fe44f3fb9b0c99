#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bcpd_oracle.hpp"
#include "kfbc/demos.hpp"
#include "kfbc/errors.hpp"
#include "kfbc/keyframes.hpp"

using namespace kfbc;

namespace {

// Trajectories of length 30 that switch from -1 to +1 at varying steps.
std::vector<Trajectory> switch_set(std::size_t n) {
  std::vector<Trajectory> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(record_script(single_switch_script(30, 8 + (i * 3) % 15, -1.0, 1.0), i));
  return out;
}

CopycatSpec quick_copycat(std::size_t folds, std::uint64_t seed) {
  CopycatSpec spec;
  spec.context = 3;
  spec.hidden_dims = {16, 16};
  spec.train.iterations = 1500;
  spec.train.batch_size = 64;
  spec.train.learning_rate = 3e-3;
  spec.folds = folds;
  spec.seed = seed;
  return spec;
}

Dataset from_series(const std::vector<std::vector<double>>& series) {
  std::vector<Trajectory> trajs;
  for (std::size_t i = 0; i < series.size(); ++i) {
    std::vector<ScriptStep> script;
    for (std::size_t t = 0; t < series[i].size(); ++t)
      script.push_back({{static_cast<double>(t)}, {series[i][t]}});
    trajs.push_back(record_script(script, i));
  }
  return build_history_dataset(trajs, {.history = 0, .context = 3});
}

}  // namespace

TEST_SUITE("keyframes") {

TEST_CASE("constant actions are perfectly predictable") {
  const auto ds = from_series({std::vector<double>(40, 0.7), std::vector<double>(40, 0.7)});
  const auto cc = train_copycat(ds, quick_copycat(1, 1));
  const auto ape = compute_ape(cc, ds);
  // skip the zero-padded context at t = 0..2
  double worst = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (!ape.context_padded[i]) worst = std::max(worst, ape.ape[i]);
  CHECK(worst < 1e-4);
}

TEST_CASE("alternating actions are learned from one step of context") {
  std::vector<std::vector<double>> series(4, std::vector<double>(60));
  for (auto& s : series)
    for (std::size_t t = 0; t < s.size(); ++t) s[t] = t % 2 ? 1.0 : -1.0;
  const auto ds = from_series(series);
  const auto cc = train_copycat(ds, quick_copycat(1, 2));
  const auto ape = compute_ape(cc, ds);
  double mse = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ape.context_padded[i]) continue;
    mse += ape.ape[i];
    ++n;
  }
  CHECK(mse / static_cast<double>(n) < 1e-3);
}

TEST_CASE("APE peaks at the switch with cross-validation") {
  const auto trajs = switch_set(10);
  const auto ds = build_history_dataset(trajs, {.history = 0, .context = 3});
  const auto cc = train_copycat(ds, quick_copycat(5, 11));
  CHECK(cc.models.size() == 5);
  const auto ape = compute_ape(cc, ds);
  for (const auto& traj : trajs) {
    std::size_t best = 0;
    double best_ape = -1.0;
    std::size_t switch_at = 0;
    for (std::size_t t = 1; t < traj.steps.size(); ++t)
      if (traj.steps[t].expert_action != traj.steps[t - 1].expert_action) switch_at = t;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (ds.samples[i].trajectory != traj.id) continue;
      CHECK(ape.fold[i] == cc.fold_for(traj.id));
      if (ape.ape[i] > best_ape) {
        best_ape = ape.ape[i];
        best = ds.samples[i].step;
      }
    }
    CHECK(best == switch_at);
  }
}

TEST_CASE("folds need enough trajectories and a fold model") {
  const auto ds = build_history_dataset(switch_set(3), {.history = 0, .context = 3});
  CHECK_THROWS_AS(train_copycat(ds, quick_copycat(5, 1)), ConfigError);
  auto wrong_k = quick_copycat(1, 1);
  wrong_k.context = 2;
  CHECK_THROWS_AS(train_copycat(ds, wrong_k), ConfigError);
}

TEST_CASE("APE definition on a hand-set copycat") {
  const auto ds = from_series({{0.0, 0.0, 0.0, 1.0}});
  CopycatEnsemble cc;
  cc.context = 3;
  cc.action_dim = 1;
  cc.models.emplace_back(MlpSpec{.input_dim = 3, .hidden_dims = {}, .output_dim = 1});
  cc.fold_of_trajectory[0] = 0;
  const auto ape = compute_ape(cc, ds);  // always predicts 0
  CHECK(ape.ape == std::vector<double>{0.0, 0.0, 0.0, 1.0});
  CHECK(ape.mean == doctest::Approx(0.25));
  CHECK(ape.max == 1.0);
}

TEST_CASE("held-out trajectories use the fold average") {
  CopycatEnsemble cc;
  cc.context = 1;
  cc.action_dim = 1;
  for (double b : {0.2, 0.6}) {
    MlpModel m(MlpSpec{.input_dim = 1, .hidden_dims = {}, .output_dim = 1});
    m.biases(0)[0] = b;
    cc.models.push_back(m);
  }
  cc.fold_of_trajectory = {{0, 0}, {1, 1}};
  HistorySample s;
  s.context = {0.0};
  s.trajectory = 1;
  CHECK(cc.predict(s)[0] == doctest::Approx(0.6));
  s.trajectory = 99;
  CHECK(cc.predict(s)[0] == doctest::Approx(0.4));
  CHECK(cc.fold_for(99) == -1);
}

TEST_CASE("softmax weights") {
  const std::vector<double> equal{0.3, 0.3, 0.3, 0.3};
  for (double w : softmax_weights(equal, 5.0)) CHECK(w == doctest::Approx(0.25));
  const std::vector<double> two{0.0, std::log(3.0)};
  const auto w = softmax_weights(two, 1.0);
  CHECK(w[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(w[1] == doctest::Approx(0.75).epsilon(1e-12));
  const std::vector<double> big{1000.0, 1001.0, 999.0};
  const auto stable = softmax_weights(big, 10.0);
  CHECK(std::accumulate(stable.begin(), stable.end(), 0.0) == doctest::Approx(1.0));
  CHECK(stable[1] > stable[0]);
  CHECK(stable[0] > stable[2]);
}

TEST_CASE("step weights mark the top percentile") {
  std::vector<double> ape(10);
  std::iota(ape.begin(), ape.end(), 1.0);
  const auto t = step_weights(ape, 10.0, 5.0);
  for (std::size_t i = 0; i < 9; ++i) CHECK(t.weights[i] == 1.0);
  CHECK(t.weights[9] == 5.0);
  for (double w : step_weights(ape, 100.0, 3.0).weights) CHECK(w == 3.0);
  // ceil(0.15 * 10) = 2
  CHECK(top_percentile_indices(ape, 15.0) == std::vector<std::size_t>{8, 9});
  // ties go to the lower index
  const std::vector<double> ties{2.0, 5.0, 5.0, 5.0, 1.0};
  CHECK(top_percentile_indices(ties, 40.0) == std::vector<std::size_t>{1, 2});
  // exact integer boundary: 20% of 10 is 2, not 3
  CHECK(top_percentile_indices(ape, 20.0).size() == 2);
}

TEST_CASE("BCPD matches the brute-force posterior") {
  BcpdParams p;
  p.hazard_rate = 0.1;
  p.obs_noise_variance = 0.05;
  p.prior_mean = 0.0;
  p.prior_variance = 1.0;
  Rng rng(8);
  for (int trial = 0; trial < 6; ++trial) {
    std::vector<double> x(12);
    for (std::size_t t = 0; t < x.size(); ++t)
      x[t] = (t >= 5 ? 1.0 : -0.5) + uniform_real(rng, -0.3, 0.3);
    const auto got = bcpd_changepoint_probabilities(x, p);
    const auto want =
        oracle::changepoint_posterior(x, p.hazard_rate, p.prior_mean, p.prior_variance,
                                      p.obs_noise_variance);
    REQUIRE(got.size() == want.size());
    for (std::size_t t = 0; t < x.size(); ++t) CHECK(got[t] == doctest::Approx(want[t]).epsilon(1e-6));
  }
}

TEST_CASE("BCPD on constant and shifted sequences") {
  BcpdParams p;
  const std::vector<double> constant(20, 0.3);
  const auto c = bcpd_changepoint_probabilities(constant, p);
  for (std::size_t t = 3; t < c.size(); ++t) CHECK(c[t] < p.hazard_rate + 0.05);
  std::vector<double> shift(20, 0.0);
  for (std::size_t t = 11; t < shift.size(); ++t) shift[t] = 1.0;
  const auto s = bcpd_changepoint_probabilities(shift, p);
  CHECK(std::max_element(s.begin(), s.end()) - s.begin() == 11);
  const std::vector<double> single{0.5};
  const auto one = bcpd_changepoint_probabilities(single, p);
  CHECK(one.size() == 1);
  CHECK(std::isfinite(one[0]));
  BcpdParams bad;
  bad.obs_noise_variance = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.hazard_rate = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("BCPD scores align with the dataset") {
  const auto trajs = switch_set(3);
  const auto ds = build_history_dataset(trajs, {.history = 0, .context = 3});
  const auto scores = bcpd_scores(ds, {});
  REQUIRE(scores.size() == ds.size());
  for (const auto& traj : trajs) {
    std::size_t best = 0;
    double best_score = -1.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (ds.samples[i].trajectory != traj.id || ds.samples[i].step == 0) continue;
      if (scores[i] > best_score) {
        best_score = scores[i];
        best = ds.samples[i].step;
      }
    }
    CHECK(traj.steps[best].expert_action[0] == 1.0);
    CHECK(traj.steps[best - 1].expert_action[0] == -1.0);
  }
}

TEST_CASE("ActFreq weights follow N / n_c") {
  Matrix actions(100, 1);
  for (std::size_t i = 0; i < 100; ++i) actions(i, 0) = i < 90 ? 0.0 : 1.0;
  const auto t = actfreq_weights(actions, 2, 4);
  for (std::size_t i = 0; i < 100; ++i) CHECK(t.weights[i] == (i < 90 ? 100.0 / 90.0 : 10.0));
  Matrix same(10, 1, 0.5);
  CHECK_THROWS_AS(actfreq_weights(same, 2, 1), ConfigError);
  // duplicated points must not leave a seed centre without members
  const auto dup = Matrix::from_rows({{0.0}, {0.0}, {0.0}, {0.0}, {3.0}, {3.0}, {9.0}});
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto w = actfreq_weights(dup, 3, seed).weights;
    CHECK(w == std::vector<double>{7.0 / 4, 7.0 / 4, 7.0 / 4, 7.0 / 4, 3.5, 3.5, 7.0});
  }
}

TEST_CASE("k-means is seeded and breaks ties low") {
  const auto pts = Matrix::from_rows({{0.0}, {0.1}, {5.0}, {5.1}, {10.0}, {10.2}});
  const auto a = kmeans(pts, 3, 7);
  const auto b = kmeans(pts, 3, 7);
  CHECK(a.assignment == b.assignment);
  CHECK(a.assignment[0] == a.assignment[1]);
  CHECK(a.assignment[2] == a.assignment[3]);
  CHECK(a.assignment[4] == a.assignment[5]);
  CHECK(std::accumulate(a.counts.begin(), a.counts.end(), std::size_t{0}) == 6);
  CHECK_THROWS_AS(kmeans(pts, 7, 1), ConfigError);
}

TEST_CASE("copycat condition verdicts") {
  const auto a = copycat_condition(0.1, 0.2);
  CHECK(a.copycat_preferred);
  CHECK(a.margin == doctest::Approx(0.1));
  CHECK_FALSE(copycat_condition(0.2, 0.2).copycat_preferred);
  CHECK(copycat_condition(0.0, 1e-9).copycat_preferred);
  CHECK(to_json(a).at("eps_cp") == 0.1);
}

TEST_CASE("weight scheme JSON round trip and validation") {
  const std::vector<WeightScheme> schemes{UniformScheme{}, SoftmaxScheme{0.5}, StepScheme{20, 3},
                                          BcpdScheme{}, ActFreqScheme{4, 2},
                                          BoostingScheme{5, 0.5}};
  for (const auto& s : schemes) {
    const auto back = weight_scheme_from_json(to_json(s));
    CHECK(to_json(back) == to_json(s));
    CHECK(scheme_name(back) == scheme_name(s));
  }
  CHECK(needs_ape(SoftmaxScheme{}));
  CHECK(needs_ape(StepScheme{}));
  CHECK_FALSE(needs_ape(BcpdScheme{}));
  CHECK_THROWS_AS(validate(WeightScheme{StepScheme{0.0, 5.0}}), ConfigError);
  CHECK_THROWS_AS(validate(WeightScheme{StepScheme{10.0, 0.5}}), ConfigError);
  CHECK_THROWS_AS(validate(WeightScheme{SoftmaxScheme{0.0}}), ConfigError);
  CHECK_THROWS_AS(weight_scheme_from_json({{"type", "nope"}}), ConfigError);
}

}  // TEST_SUITE
