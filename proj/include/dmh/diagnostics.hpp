#pragma once

// Rank-normalized split-chain diagnostics (bulk/tail ESS, R-hat, MC standard error).
// Draw matrices are (draws x chains).

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "dmh/rng.hpp"

namespace dmh::diagnostics {

/// A diagnostic value plus a flag for the constant-chain case, where the statistic
/// is defined by convention (ESS = total draws, R-hat = 1).
struct Value {
  double value = 0.0;
  bool degenerate = false;
};

inline void check_shape(const Matrix& chains, Eigen::Index min_draws = 4) {
  if (chains.cols() < 2) throw std::invalid_argument("diagnostics need at least 2 chains");
  if (chains.rows() < min_draws) throw std::invalid_argument("too few draws per chain");
}

inline bool is_constant(const Matrix& chains) {
  return (chains.array() == chains(0, 0)).all();
}

/// Halves every chain; an odd middle draw is dropped.
inline Matrix split_chains(const Matrix& chains) {
  const Eigen::Index n = chains.rows() / 2;
  const Eigen::Index m = chains.cols();
  Matrix out(n, 2 * m);
  for (Eigen::Index c = 0; c < m; ++c) {
    out.col(2 * c) = chains.col(c).head(n);
    out.col(2 * c + 1) = chains.col(c).tail(n);
  }
  return out;
}

/// Pooled ranks (ties averaged) mapped through the normal quantile at
/// (r - 3/8) / (S + 1/4).
inline Matrix rank_normalize(const Matrix& chains) {
  const Eigen::Index S = chains.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(S));
  std::iota(order.begin(), order.end(), 0);
  const double* data = chains.data();
  std::stable_sort(order.begin(), order.end(),
                   [data](Eigen::Index a, Eigen::Index b) { return data[a] < data[b]; });
  Matrix z(chains.rows(), chains.cols());
  double* out = z.data();
  const boost::math::normal_distribution<double> unit;
  Eigen::Index i = 0;
  while (i < S) {
    Eigen::Index j = i;
    while (j + 1 < S && data[order[j + 1]] == data[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    const double q = boost::math::quantile(unit, (rank - 0.375) / (static_cast<double>(S) + 0.25));
    for (Eigen::Index k = i; k <= j; ++k) out[order[k]] = q;
    i = j + 1;
  }
  return z;
}

/// Biased (divide-by-n) autocovariance of one chain at `lag`.
inline double autocovariance(const Eigen::Ref<const Vector>& x, double mean, Eigen::Index lag) {
  const Eigen::Index n = x.size();
  double s = 0.0;
  for (Eigen::Index t = 0; t + lag < n; ++t) s += (x[t] - mean) * (x[t + lag] - mean);
  return s / static_cast<double>(n);
}

/// Multi-chain ESS with Geyer's initial positive and monotone sequence truncation.
/// Chains are used as given (no splitting or rank normalization).
inline Value ess_raw(const Matrix& chains) {
  const Eigen::Index n = chains.rows();
  const Eigen::Index m = chains.cols();
  const double total = static_cast<double>(n * m);
  if (is_constant(chains)) return {total, true};

  const Vector chain_mean = chains.colwise().mean().transpose();
  std::vector<std::vector<double>> acov(static_cast<std::size_t>(m));
  auto mean_acov = [&](Eigen::Index lag) {
    double s = 0.0;
    for (Eigen::Index c = 0; c < m; ++c) {
      auto& cache = acov[c];
      while (static_cast<Eigen::Index>(cache.size()) <= lag) {
        cache.push_back(autocovariance(chains.col(c), chain_mean[c],
                                       static_cast<Eigen::Index>(cache.size())));
      }
      s += cache[lag];
    }
    return s / static_cast<double>(m);
  };

  const double nd = static_cast<double>(n);
  const double mean_var = mean_acov(0) * nd / (nd - 1.0);
  double var_plus = mean_var * (nd - 1.0) / nd;
  if (m > 1) {
    const double mu = chain_mean.mean();
    var_plus += (chain_mean.array() - mu).square().sum() / static_cast<double>(m - 1);
  }
  if (!(var_plus > 0.0)) return {total, true};

  std::vector<double> rho(static_cast<std::size_t>(n), 0.0);
  Eigen::Index t = 0;
  double even = 1.0;
  double odd = 1.0 - (mean_var - mean_acov(1)) / var_plus;
  rho[0] = even;
  rho[1] = odd;
  while (t < n - 5 && std::isfinite(even + odd) && even + odd > 0.0) {
    t += 2;
    even = 1.0 - (mean_var - mean_acov(t)) / var_plus;
    odd = 1.0 - (mean_var - mean_acov(t + 1)) / var_plus;
    if (even + odd >= 0.0) {
      rho[t] = even;
      rho[t + 1] = odd;
    }
  }
  const Eigen::Index max_t = t;
  if (even > 0.0) rho[max_t] = even;

  // initial monotone sequence
  t = 0;
  while (t <= max_t - 4) {
    t += 2;
    if (rho[t] + rho[t + 1] > rho[t - 2] + rho[t - 1]) {
      rho[t] = 0.5 * (rho[t - 2] + rho[t - 1]);
      rho[t + 1] = rho[t];
    }
  }
  double tau = -1.0 + rho[max_t];
  for (Eigen::Index k = 0; k < max_t; ++k) tau += 2.0 * rho[k];
  tau = std::max(tau, 1.0 / std::log10(total));
  return {total / tau, false};
}

/// Bulk ESS: rank-normalized split chains.
inline Value ess_bulk(const Matrix& chains) {
  check_shape(chains);
  if (is_constant(chains)) return {static_cast<double>(chains.size()), true};
  return ess_raw(rank_normalize(split_chains(chains)));
}

/// ESS of the mean on split chains without rank normalization.
inline Value ess_mean(const Matrix& chains) {
  check_shape(chains);
  return ess_raw(split_chains(chains));
}

/// Type-7 sample quantile of all draws.
inline double quantile(const Matrix& chains, double prob) {
  std::vector<double> v(chains.data(), chains.data() + chains.size());
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Tail ESS: minimum ESS of the 5% and 95% quantile indicators.
inline Value ess_tail(const Matrix& chains) {
  check_shape(chains);
  if (is_constant(chains)) return {static_cast<double>(chains.size()), true};
  auto indicator_ess = [&](double prob) {
    const double q = quantile(chains, prob);
    const Matrix ind = (chains.array() <= q).cast<double>().matrix();
    return ess_raw(split_chains(ind));
  };
  const Value lo = indicator_ess(0.05);
  const Value hi = indicator_ess(0.95);
  return {std::min(lo.value, hi.value), lo.degenerate || hi.degenerate};
}

/// Classic potential scale reduction on the chains as given.
inline double rhat_basic(const Matrix& chains) {
  const double n = static_cast<double>(chains.rows());
  const Eigen::Index m = chains.cols();
  const Vector mean = chains.colwise().mean().transpose();
  double within = 0.0;
  for (Eigen::Index c = 0; c < m; ++c) {
    within += (chains.col(c).array() - mean[c]).square().sum() / (n - 1.0);
  }
  within /= static_cast<double>(m);
  const double between =
      n * (mean.array() - mean.mean()).square().sum() / static_cast<double>(m - 1);
  return std::sqrt((between / within + n - 1.0) / n);
}

/// Rank-normalized split R-hat: max of the bulk and folded (|x - median|) versions.
inline Value rhat(const Matrix& chains) {
  check_shape(chains);
  if (is_constant(chains)) return {1.0, true};
  const Matrix split = split_chains(chains);
  const double bulk = rhat_basic(rank_normalize(split));
  const double med = quantile(chains, 0.5);
  const Matrix folded = (split.array() - med).abs().matrix();
  const double tail = rhat_basic(rank_normalize(folded));
  return {std::max(bulk, tail), false};
}

/// Pooled sample standard deviation over every draw.
inline double pooled_std(const Matrix& chains) {
  const double mu = chains.mean();
  return std::sqrt((chains.array() - mu).square().sum() / static_cast<double>(chains.size() - 1));
}

/// Monte Carlo standard error of the mean: pooled std / sqrt(ESS of the mean).
inline Value mc_se(const Matrix& chains) {
  check_shape(chains);
  if (is_constant(chains)) return {0.0, true};
  const Value e = ess_mean(chains);
  return {pooled_std(chains) / std::sqrt(e.value), e.degenerate};
}

/// One row of the diagnostics table.
struct ChainDiagnostics {
  double mean = 0.0;
  double std = 0.0;
  double mc_se = 0.0;
  double ess_bulk = 0.0;
  double ess_tail = 0.0;
  double rhat = 1.0;
  double acceptance_rate = 0.0;
  bool degenerate = false;
};

inline ChainDiagnostics summarize(const Matrix& chains, double acceptance_rate = 0.0) {
  ChainDiagnostics d;
  d.mean = chains.mean();
  d.std = pooled_std(chains);
  const Value se = mc_se(chains);
  const Value eb = ess_bulk(chains);
  const Value et = ess_tail(chains);
  const Value rh = rhat(chains);
  d.mc_se = se.value;
  d.ess_bulk = eb.value;
  d.ess_tail = et.value;
  d.rhat = rh.value;
  d.acceptance_rate = acceptance_rate;
  d.degenerate = se.degenerate || eb.degenerate || et.degenerate || rh.degenerate;
  return d;
}

}  // namespace dmh::diagnostics
