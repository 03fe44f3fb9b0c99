#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "kfbc/errors.hpp"
#include "kfbc/keyframes.hpp"
#include "kfbc/random.hpp"

namespace kfbc {

namespace {

double log_normal_pdf(double x, double mean, double variance) {
  const double d = x - mean;
  return -0.5 * (std::log(2.0 * std::numbers::pi * variance) + d * d / variance);
}

double log_sum_exp(std::span<const double> values) {
  double hi = -std::numeric_limits<double>::infinity();
  for (double v : values) hi = std::max(hi, v);
  if (!std::isfinite(hi)) return hi;
  double sum = 0.0;
  for (double v : values) sum += std::exp(v - hi);
  return hi + std::log(sum);
}

}  // namespace

std::vector<double> softmax_weights(std::span<const double> scores, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("softmax temperature must be positive");
  if (scores.empty()) return {};
  const double hi = *std::max_element(scores.begin(), scores.end());
  std::vector<double> w(scores.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    w[i] = std::exp(temperature * (scores[i] - hi));
    sum += w[i];
  }
  for (double& v : w) v /= sum;
  return w;
}

std::vector<std::size_t> top_percentile_indices(std::span<const double> scores,
                                                double percent) {
  if (!(percent > 0.0 && percent <= 100.0))
    throw ConfigError("percentile must lie in (0, 100]");
  const std::size_t n = scores.size();
  const double product = percent * static_cast<double>(n);
  std::size_t count;
  if (product == std::floor(product)) {
    const auto p = static_cast<std::size_t>(product);
    count = (p + 99) / 100;
  } else {
    count = static_cast<std::size_t>(std::ceil(product / 100.0));
  }
  count = std::min(count, n);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(count);
  std::sort(order.begin(), order.end());
  return order;
}

WeightTable step_weights(std::span<const double> scores, double threshold_percent,
                         double weight) {
  if (!(weight >= 1.0)) throw ConfigError("step weight W must be at least 1");
  WeightTable table;
  table.scheme = "step";
  table.weights.assign(scores.size(), 1.0);
  for (std::size_t i : top_percentile_indices(scores, threshold_percent))
    table.weights[i] = weight;
  return table;
}

void BcpdParams::validate() const {
  if (!(hazard_rate > 0.0 && hazard_rate < 1.0))
    throw ConfigError("BCPD hazard_rate must lie in (0, 1)");
  if (!(obs_noise_variance > 0.0)) throw ConfigError("BCPD obs_noise_variance must be positive");
  if (!(prior_variance > 0.0)) throw ConfigError("BCPD prior_variance must be positive");
}

std::vector<double> bcpd_changepoint_probabilities(std::span<const double> series,
                                                   const BcpdParams& params) {
  params.validate();
  const double log_h = std::log(params.hazard_rate);
  const double log_1mh = std::log1p(-params.hazard_rate);
  const double prior_precision = 1.0 / params.prior_variance;
  const double noise_precision = 1.0 / params.obs_noise_variance;

  // Hypotheses over the length of the current segment; each carries the
  // log posterior weight and the running sum of its points.
  struct Run {
    double log_p;
    std::size_t length;
    double sum;
  };
  std::vector<Run> runs{{0.0, 0, 0.0}};
  std::vector<double> scores;
  scores.reserve(series.size());
  std::vector<double> log_joint;

  auto predictive = [&](const Run& r, double x) {
    const double precision = prior_precision + static_cast<double>(r.length) * noise_precision;
    const double mean =
        (params.prior_mean * prior_precision + r.sum * noise_precision) / precision;
    return log_normal_pdf(x, mean, 1.0 / precision + params.obs_noise_variance);
  };

  for (double x : series) {
    if (!std::isfinite(x)) throw NumericError("non-finite value in BCPD series");
    const double log_prior_pred =
        log_normal_pdf(x, params.prior_mean, params.prior_variance + params.obs_noise_variance);
    log_joint.clear();
    std::vector<Run> next;
    next.reserve(runs.size() + 1);
    // A new segment starting at x; the run-length posterior sums to one.
    const double log_cp = log_h + log_prior_pred;
    next.push_back({log_cp, 1, x});
    log_joint.push_back(log_cp);
    for (const auto& r : runs) {
      const double lj = r.log_p + log_1mh + predictive(r, x);
      next.push_back({lj, r.length + 1, r.sum + x});
      log_joint.push_back(lj);
    }
    const double log_evidence = log_sum_exp(log_joint);
    scores.push_back(std::exp(log_cp - log_evidence));
    for (auto& r : next) r.log_p -= log_evidence;
    runs = std::move(next);
  }
  return scores;
}

std::vector<double> bcpd_scores(const Dataset& dataset, const BcpdParams& params) {
  params.validate();
  std::vector<double> scores(dataset.size(), 0.0);
  for (const auto id : dataset.trajectory_ids()) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      if (dataset.samples[i].trajectory == id) idx.push_back(i);
    }
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return dataset.samples[a].step < dataset.samples[b].step;
    });
    std::vector<double> series(idx.size());
    for (std::size_t d = 0; d < dataset.action_dim; ++d) {
      for (std::size_t j = 0; j < idx.size(); ++j) series[j] = dataset.samples[idx[j]].target[d];
      const auto p = bcpd_changepoint_probabilities(series, params);
      for (std::size_t j = 0; j < idx.size(); ++j)
        scores[idx[j]] = d == 0 ? p[j] : std::max(scores[idx[j]], p[j]);
    }
  }
  return scores;
}

KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed,
                    std::size_t max_iterations) {
  const std::size_t n = points.rows();
  const std::size_t dim = points.cols();
  if (k < 2) throw ConfigError("k-means needs k >= 2");
  if (n < k) throw ConfigError("k-means needs at least k points");
  Rng rng(seed);

  for (int attempt = 0; attempt < 2; ++attempt) {
    // k-means++ seeding: the first centre is uniform, each further one is
    // drawn with probability proportional to its squared distance from the
    // nearest chosen centre, so duplicates of a chosen value are never drawn.
    KMeansResult result;
    result.centroids = Matrix(k, dim);
    std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
    std::size_t pick = uniform_index(rng, n);
    for (std::size_t c = 0; c < k; ++c) {
      const auto src = points.row(pick);
      std::copy(src.begin(), src.end(), result.centroids.row(c).begin());
      if (c + 1 == k) break;
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double d = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
          const double diff = points(i, j) - result.centroids(c, j);
          d += diff * diff;
        }
        nearest[i] = std::min(nearest[i], d);
        total += nearest[i];
      }
      if (!(total > 0.0))
        throw ConfigError("k-means needs at least k distinct points (k=" + std::to_string(k) + ")");
      double target = uniform01(rng) * total;
      pick = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (nearest[i] <= 0.0) continue;
        pick = i;
        target -= nearest[i];
        if (target < 0.0) break;
      }
    }
    result.assignment.assign(n, 0);
    bool changed = true;
    for (std::size_t it = 0; it < max_iterations && changed; ++it) {
      changed = false;
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) {
          double d = 0.0;
          for (std::size_t j = 0; j < dim; ++j) {
            const double diff = points(i, j) - result.centroids(c, j);
            d += diff * diff;
          }
          if (d < best_d) {
            best_d = d;
            best = c;
          }
        }
        if (it == 0 || result.assignment[i] != best) changed = true;
        result.assignment[i] = best;
      }
      Matrix sums(k, dim);
      std::vector<std::size_t> counts(k, 0);
      for (std::size_t i = 0; i < n; ++i) {
        counts[result.assignment[i]] += 1;
        for (std::size_t j = 0; j < dim; ++j) sums(result.assignment[i], j) += points(i, j);
      }
      for (std::size_t c = 0; c < k; ++c) {
        if (counts[c] == 0) continue;  // keep the previous centroid
        for (std::size_t j = 0; j < dim; ++j)
          result.centroids(c, j) = sums(c, j) / static_cast<double>(counts[c]);
      }
      result.counts = counts;
      result.iterations = it + 1;
    }
    if (std::find(result.counts.begin(), result.counts.end(), 0) == result.counts.end())
      return result;
  }
  throw ConfigError("k-means left a cluster empty after re-seeding (k=" + std::to_string(k) +
                    ")");
}

WeightTable actfreq_weights(const Matrix& actions, std::size_t k, std::uint64_t seed) {
  const auto clusters = kmeans(actions, k, seed);
  const auto n = static_cast<double>(actions.rows());
  WeightTable table;
  table.scheme = "actfreq";
  table.weights.resize(actions.rows());
  for (std::size_t i = 0; i < actions.rows(); ++i)
    table.weights[i] = n / static_cast<double>(clusters.counts[clusters.assignment[i]]);
  return table;
}

CopycatVerdict copycat_condition(double eps_cp, double reference_mse) {
  if (!(eps_cp >= 0.0) || !(reference_mse >= 0.0))
    throw ConfigError("copycat condition needs non-negative errors");
  return {reference_mse > eps_cp, reference_mse - eps_cp, eps_cp, reference_mse};
}

nlohmann::json to_json(const CopycatVerdict& v) {
  return {{"copycat_preferred", v.copycat_preferred},
          {"margin", v.margin},
          {"eps_cp", v.eps_cp},
          {"reference_mse", v.reference_mse}};
}

}  // namespace kfbc
