#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "kfbc/errors.hpp"
#include "kfbc/eval.hpp"

using namespace kfbc;

namespace {

// Expert plus a fixed offset, so every step disagrees by exactly `offset`.
class OffsetExpert final : public Agent {
 public:
  explicit OffsetExpert(double offset) : offset_(offset) {}
  void reset() override {}
  std::vector<double> act(std::span<const double>, const ToyCarState& state,
                          const ToyCarConfig& config) override {
    return {toycar_expert(state, config) + offset_};
  }
  std::string name() const override { return "offset"; }

 private:
  double offset_;
};

CopycatSpec quick_copycat() {
  CopycatSpec spec;
  spec.hidden_dims = {8};
  spec.train.iterations = 3000;
  spec.train.batch_size = 64;
  spec.train.learning_rate = 3e-3;
  return spec;
}

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("the expert succeeds without violations") {
  ToyCarConfig env;
  ExpertAgent expert;
  const auto r = rollout(env, expert, 50, 1);
  CHECK(r.report.n_episodes == 50);
  CHECK(r.report.success_rate == 1.0);
  CHECK(r.report.violations == 0);
  CHECK(r.report.inertia_stalls == 0);
  CHECK(r.report.progress == 1.0);
  CHECK(r.report.avg_speed > 0.0);
  CHECK(r.report.avg_speed <= env.v_max);
  CHECK(rollout_imitation_error(r.trajectories, env) == 0.0);
  for (std::size_t i = 0; i < 50; ++i) CHECK(r.report.episodes[i].seed == derive_seed(1, i));
}

TEST_CASE("a car that never moves fails and stalls") {
  ToyCarConfig env;
  ConstantAgent brake(-1.0);
  const auto r = rollout(env, brake, 30, 2);
  CHECK(r.report.success_rate == 0.0);
  CHECK(r.report.violations == 0);
  CHECK(r.report.progress == 0.0);
  CHECK(r.report.avg_speed == 0.0);
  // green phases of 30+ steps occur in all but very unlucky episodes
  CHECK(r.report.inertia_stalls >= 27);
  for (const auto& ep : r.report.episodes) {
    CHECK(ep.timeout);
    CHECK(ep.steps == static_cast<std::size_t>(env.horizon));
  }
}

TEST_CASE("full throttle runs the red light") {
  ToyCarConfig env;
  ConstantAgent gas(1.0);
  const auto r = rollout(env, gas, 40, 3);
  CHECK(r.report.violations > 0);
  CHECK(r.report.success_rate + static_cast<double>(r.report.violations) / 40.0 ==
        doctest::Approx(1.0));
}

TEST_CASE("rollout imitation error") {
  ToyCarConfig env;
  OffsetExpert offset(0.1);
  const auto r = rollout(env, offset, 5, 4);
  CHECK(rollout_imitation_error(r.trajectories, env) == doctest::Approx(0.01).epsilon(1e-9));
  auto stripped = r.trajectories;
  stripped[2].steps[3].state.reset();
  CHECK_THROWS_AS(rollout_imitation_error(stripped, env), DataError);
}

TEST_CASE("rollouts are deterministic in the seed") {
  ToyCarConfig env;
  ExpertAgent expert;
  const auto a = rollout(env, expert, 10, 77);
  const auto b = rollout(env, expert, 10, 77);
  CHECK(a.trajectories == b.trajectories);
  CHECK(to_json(a.report) == to_json(b.report));
  CHECK_THROWS_AS(rollout(env, expert, 0, 1), ConfigError);
}

TEST_CASE("avgAPE of a constant policy is near zero") {
  ToyCarConfig env;
  ConstantAgent brake(-1.0);
  const auto r = avg_ape(env, brake, 8, quick_copycat(), 5);
  CHECK(r.avg_ape < 1e-4);
  CHECK(r.heldout_episodes == 2);
  CHECK(r.train_episodes == 6);
  CHECK(r.heldout_samples == 2 * static_cast<std::size_t>(env.horizon));
  CHECK_THROWS_AS(avg_ape(env, brake, 3, quick_copycat(), 5), ConfigError);
}

TEST_CASE("avgAPE depends on the set of rollouts, not their order") {
  ToyCarConfig env;
  ExpertAgent expert;
  const auto r = rollout(env, expert, 8, 12);
  auto shuffled = r.trajectories;
  std::reverse(shuffled.begin(), shuffled.end());
  std::swap(shuffled[1], shuffled[5]);
  auto spec = quick_copycat();
  spec.train.iterations = 200;
  const auto a = avg_ape_from_trajectories(r.trajectories, spec, 3);
  const auto b = avg_ape_from_trajectories(shuffled, spec, 3);
  CHECK(a.avg_ape == b.avg_ape);
  CHECK(a.heldout_samples == b.heldout_samples);
}

TEST_CASE("loss breakdown partitions the samples") {
  ToyCarConfig env;
  const auto trajs = collect_demonstrations(env, 3, 0.1, 6);
  const auto ds = build_history_dataset(trajs, {.history = 1, .context = 3});
  PolicySpec spec;
  spec.history = 1;
  spec.hidden_dims = {8};
  TrainConfig cfg;
  cfg.iterations = 100;
  cfg.batch_size = 32;
  const auto policy = train_bc(ds, spec, SampleWeights::uniform(), cfg);
  ApeTable ape;
  Rng rng(1);
  for (std::size_t i = 0; i < ds.size(); ++i) ape.ape.push_back(uniform_real(rng, 0.0, 1.0));

  const auto b = loss_breakdown(policy, ds, ape, 10.0);
  CHECK(b.n_changepoint + b.n_other == ds.size());
  CHECK(b.n_changepoint ==
        static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(ds.size()))));
  const double n = static_cast<double>(ds.size());
  const double recombined = (b.changepoint_mse * static_cast<double>(b.n_changepoint) +
                             b.other_mse * static_cast<double>(b.n_other)) / n;
  CHECK(std::abs(recombined - b.overall_mse) < 1e-12);
  CHECK(std::abs(b.overall_mse - weighted_mse(policy.model, ds.windows(), ds.targets())) < 1e-12);

  const auto all = loss_breakdown(policy, ds, ape, 100.0);
  CHECK(all.n_other == 0);
  CHECK(all.other_mse == 0.0);
  CHECK(all.changepoint_mse == doctest::Approx(all.overall_mse));
  CHECK_THROWS_AS(loss_breakdown(policy, ds, ape, 0.0), ConfigError);
  ape.ape.pop_back();
  CHECK_THROWS_AS(loss_breakdown(policy, ds, ape, 10.0), ShapeError);
}

TEST_CASE("pearson correlation") {
  const std::vector<double> x{1, 2, 3, 4}, y{2, 4, 6, 8}, z{4, 3, 2, 1}, c{5, 5, 5, 5};
  CHECK(pearson(x, y) == doctest::Approx(1.0));
  CHECK(pearson(x, z) == doctest::Approx(-1.0));
  CHECK(pearson(x, c) == 0.0);
  const std::vector<double> a{1, 2, 3}, b{1, 3, 2};
  CHECK(pearson(a, b) == doctest::Approx(0.5));
  CHECK_THROWS_AS(pearson(a, x), ShapeError);
}

}  // TEST_SUITE
