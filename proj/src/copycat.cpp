#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>

#include "kfbc/errors.hpp"
#include "kfbc/keyframes.hpp"
#include "kfbc/random.hpp"

namespace kfbc {

namespace {

double percentile_of_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

}  // namespace

void CopycatSpec::validate() const {
  if (context == 0) throw ConfigError("copycat context length must be at least 1");
  if (folds == 0) throw ConfigError("copycat folds must be at least 1");
  for (auto h : hidden_dims) {
    if (h == 0) throw ConfigError("copycat hidden widths must be positive");
  }
  train.validate();
}

int CopycatEnsemble::fold_for(std::uint64_t trajectory) const {
  const auto it = fold_of_trajectory.find(trajectory);
  return it == fold_of_trajectory.end() ? -1 : it->second;
}

std::vector<double> CopycatEnsemble::predict(const HistorySample& sample) const {
  if (models.empty()) throw ConfigError("copycat ensemble has no models");
  if (sample.context.size() != context * action_dim)
    throw ShapeError("sample action context does not match the copycat input");
  const int fold = fold_for(sample.trajectory);
  if (fold >= 0) {
    const auto f = models.size() == 1 ? 0 : static_cast<std::size_t>(fold);
    if (f >= models.size())
      throw ConfigError("no copycat model for fold " + std::to_string(fold));
    return forward(models[f], sample.context);
  }
  std::vector<double> mean(action_dim, 0.0);
  for (const auto& m : models) {
    const auto p = forward(m, sample.context);
    for (std::size_t k = 0; k < action_dim; ++k) mean[k] += p[k];
  }
  for (double& v : mean) v /= static_cast<double>(models.size());
  return mean;
}

CopycatEnsemble train_copycat(const Dataset& dataset, const CopycatSpec& spec) {
  spec.validate();
  if (dataset.empty()) throw ConfigError("cannot train a copycat on an empty dataset");
  if (dataset.context != spec.context)
    throw ConfigError("dataset action context K=" + std::to_string(dataset.context) +
                      " does not match copycat K=" + std::to_string(spec.context));

  auto ids = dataset.trajectory_ids();
  if (spec.folds > 1 && ids.size() < spec.folds)
    throw ConfigError("copycat cross-validation needs at least " +
                      std::to_string(spec.folds) + " trajectories, got " +
                      std::to_string(ids.size()));

  CopycatEnsemble ensemble;
  ensemble.context = spec.context;
  ensemble.action_dim = dataset.action_dim;

  std::sort(ids.begin(), ids.end());
  Rng rng(derive_seed(spec.seed, 0xf01d));
  shuffle(std::span<std::uint64_t>(ids), rng);
  for (std::size_t i = 0; i < ids.size(); ++i)
    ensemble.fold_of_trajectory[ids[i]] = static_cast<int>(i % spec.folds);

  const Matrix contexts = dataset.contexts();
  const Matrix targets = dataset.targets();
  for (std::size_t f = 0; f < spec.folds; ++f) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      const auto fold = static_cast<std::size_t>(ensemble.fold_of_trajectory.at(
          dataset.samples[i].trajectory));
      if (spec.folds == 1 || fold != f) rows.push_back(i);
    }
    TrainingSet data{Matrix(rows.size(), contexts.cols()), Matrix(rows.size(), targets.cols()),
                     {}};
    for (std::size_t r = 0; r < rows.size(); ++r) {
      std::copy(contexts.row(rows[r]).begin(), contexts.row(rows[r]).end(),
                data.inputs.row(r).begin());
      std::copy(targets.row(rows[r]).begin(), targets.row(rows[r]).end(),
                data.targets.row(r).begin());
    }
    MlpSpec mlp{.input_dim = spec.context * dataset.action_dim,
                .hidden_dims = spec.hidden_dims,
                .output_dim = dataset.action_dim,
                .activation = spec.activation,
                .init_seed = derive_seed(spec.seed, 2 * f)};
    TrainConfig train = spec.train;
    train.rng_seed = derive_seed(spec.seed, 2 * f + 1);
    ensemble.models.push_back(train_supervised(data, mlp, train).model);
  }
  return ensemble;
}

void summarize(ApeTable& table) {
  if (table.ape.empty()) return;
  double sum = 0.0;
  for (double v : table.ape) sum += v;
  table.mean = sum / static_cast<double>(table.ape.size());
  auto sorted = table.ape;
  std::sort(sorted.begin(), sorted.end());
  table.p50 = percentile_of_sorted(sorted, 50);
  table.p90 = percentile_of_sorted(sorted, 90);
  table.p99 = percentile_of_sorted(sorted, 99);
  table.max = sorted.back();
}

ApeTable compute_ape(const CopycatEnsemble& ensemble, const Dataset& dataset) {
  if (ensemble.models.empty()) throw ConfigError("copycat ensemble has no models");
  ApeTable table;
  table.ape.reserve(dataset.size());
  for (const auto& s : dataset.samples) {
    const int fold = ensemble.fold_for(s.trajectory);
    if (fold >= 0 && ensemble.models.size() > 1 &&
        static_cast<std::size_t>(fold) >= ensemble.models.size())
      throw ConfigError("no copycat model for fold " + std::to_string(fold));
    const auto pred = ensemble.predict(s);
    double sq = 0.0;
    for (std::size_t k = 0; k < pred.size(); ++k) {
      const double d = pred[k] - s.target[k];
      sq += d * d;
    }
    table.ape.push_back(sq / static_cast<double>(pred.size()));
    table.fold.push_back(fold);
    table.context_padded.push_back(s.context_padded);
  }
  summarize(table);
  return table;
}

void export_ape_csv(const std::filesystem::path& path, const Dataset& dataset,
                    const ApeTable& ape, std::span<const double> weights) {
  if (ape.size() != dataset.size() || (!weights.empty() && weights.size() != dataset.size()))
    throw ShapeError("APE / weight table not aligned with the dataset");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  out << "sample,trajectory,step,fold,context_padded,ape,weight\n";
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& s = dataset.samples[i];
    out << i << ',' << s.trajectory << ',' << s.step << ',' << ape.fold[i] << ','
        << (ape.context_padded[i] ? 1 : 0) << ',' << ape.ape[i] << ','
        << (weights.empty() ? 1.0 : weights[i]) << '\n';
  }
}

}  // namespace kfbc
