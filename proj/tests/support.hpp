#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "dmh/rng.hpp"

namespace dmh::support {

/// Two-sample Kolmogorov-Smirnov statistic.
inline double ks_statistic(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double v = std::min(a[i], b[j]);
    while (i < a.size() && a[i] == v) ++i;
    while (j < b.size() && b[j] == v) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  return d;
}

/// Asymptotic Kolmogorov tail with Stephens' small-sample correction.
inline double ks_pvalue(double d, std::size_t na, std::size_t nb) {
  const double ne = static_cast<double>(na) * static_cast<double>(nb) / static_cast<double>(na + nb);
  const double sq = std::sqrt(ne);
  const double lambda = (sq + 0.12 + 0.11 / sq) * d;
  if (lambda < 1e-3) return 1.0;
  double p = 0.0;
  for (int k = 1; k <= 200; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    p += (k % 2 == 1 ? 2.0 : -2.0) * term;
    if (term < 1e-16) break;
  }
  return std::clamp(p, 0.0, 1.0);
}

inline double ks_two_sample_pvalue(const std::vector<double>& a, const std::vector<double>& b) {
  return ks_pvalue(ks_statistic(a, b), a.size(), b.size());
}

/// Stationary AR(1) chains with unit marginal variance, one per column.
inline Matrix ar1_chains(double rho, Eigen::Index draws, Eigen::Index chains, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal;
  const double innovation = std::sqrt(1.0 - rho * rho);
  Matrix out(draws, chains);
  for (Eigen::Index c = 0; c < chains; ++c) {
    double x = normal(gen);
    for (Eigen::Index t = 0; t < draws; ++t) {
      out(t, c) = x;
      x = rho * x + innovation * normal(gen);
    }
  }
  return out;
}

inline Matrix iid_normal(Eigen::Index draws, Eigen::Index chains, std::uint64_t seed) {
  return ar1_chains(0.0, draws, chains, seed);
}

}  // namespace dmh::support
