#pragma once

// Brute-force changepoint posterior: enumerate every segmentation of
// x_1..x_t, each step after the first independently starting a new segment
// with probability h, and score segments by their exact Gaussian marginal
// likelihood (mean ~ N(mu0, s0^2), observations x ~ N(mean, s^2) i.i.d.).

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

namespace oracle {

inline double segment_log_marginal(std::span<const double> x, double mu0, double s0sq,
                                   double ssq) {
  const double n = static_cast<double>(x.size());
  double sum_d = 0.0, sum_d2 = 0.0;
  for (double v : x) {
    sum_d += v - mu0;
    sum_d2 += (v - mu0) * (v - mu0);
  }
  const double denom = ssq + n * s0sq;
  const double log_det = (n - 1.0) * std::log(ssq) + std::log(denom);
  const double quad = (sum_d2 - s0sq * sum_d * sum_d / denom) / ssq;
  return -0.5 * n * std::log(2.0 * std::numbers::pi) - 0.5 * log_det - 0.5 * quad;
}

// P(a segment starts at t | x_1..x_t) for every t; h for t = 1 by convention.
inline std::vector<double> changepoint_posterior(const std::vector<double>& x, double h,
                                                 double mu0, double s0sq, double ssq) {
  std::vector<double> out;
  for (std::size_t t = 1; t <= x.size(); ++t) {
    if (t == 1) {
      out.push_back(h);
      continue;
    }
    const std::size_t free_bits = t - 1;  // steps 2..t
    double total = 0.0, starts_at_t = 0.0;
    std::vector<double> logs;
    double max_log = -INFINITY;
    for (std::size_t mask = 0; mask < (std::size_t{1} << free_bits); ++mask) {
      double lp = 0.0;
      std::size_t start = 0;
      for (std::size_t s = 1; s < t; ++s) {
        const bool cp = (mask >> (s - 1)) & 1;
        lp += std::log(cp ? h : 1.0 - h);
        if (cp) {
          lp += segment_log_marginal(std::span(x).subspan(start, s - start), mu0, s0sq, ssq);
          start = s;
        }
      }
      lp += segment_log_marginal(std::span(x).subspan(start, t - start), mu0, s0sq, ssq);
      logs.push_back(lp);
      max_log = std::max(max_log, lp);
    }
    for (std::size_t mask = 0; mask < logs.size(); ++mask) {
      const double p = std::exp(logs[mask] - max_log);
      total += p;
      if ((mask >> (free_bits - 1)) & 1) starts_at_t += p;
    }
    out.push_back(starts_at_t / total);
  }
  return out;
}

}  // namespace oracle
