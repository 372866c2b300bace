#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmh/chain.hpp"
#include "dmh/estimator.hpp"
#include "dmh/functionals.hpp"
#include "dmh/model.hpp"
#include "dmh/proposal.hpp"

namespace dmh {

struct AdamState {
  Vector params;
  Vector m;
  Vector v;
  std::int64_t t = 0;
  double lr = 0.005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState init(Vector params, double lr) {
    AdamState s;
    s.m = Vector::Zero(params.size());
    s.v = Vector::Zero(params.size());
    s.params = std::move(params);
    s.lr = lr;
    return s;
  }
};

/// Bias-corrected Adam update (minimization).
inline AdamState adam_step(AdamState state, const Vector& grad) {
  if (grad.size() != state.params.size()) throw DimensionError("gradient/parameter size mismatch");
  if (!grad.allFinite()) {
    throw NumericalError("non-finite gradient at optimizer iteration " + std::to_string(state.t + 1));
  }
  state.t += 1;
  state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad;
  state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  const Vector m_hat = state.m / c1;
  const Vector v_hat = state.v / c2;
  state.params.array() -= state.lr * m_hat.array() / (v_hat.array().sqrt() + state.eps);
  return state;
}

/// Unconstrained parameterization of a lower-triangular Cholesky factor: diagonal entries
/// are stored as logs, off-diagonals raw, in row-major order (0,0), (1,0), (1,1), ...
/// With `diagonal_only` only the d log-diagonal entries are free.
class CholeskyParameterization {
 public:
  CholeskyParameterization(int dim, bool diagonal_only) : dim_(dim), diagonal_only_(diagonal_only) {
    if (dim <= 0) throw std::invalid_argument("dimension must be positive");
    for (int i = 0; i < dim; ++i) {
      for (int j = 0; j <= i; ++j) {
        if (diagonal_only && i != j) continue;
        rows_.push_back(i);
        cols_.push_back(j);
      }
    }
  }

  int dim() const noexcept { return dim_; }
  int size() const noexcept { return static_cast<int>(rows_.size()); }
  bool diagonal_only() const noexcept { return diagonal_only_; }
  bool is_diagonal(int p) const { return rows_.at(p) == cols_.at(p); }
  int row(int p) const { return rows_.at(p); }
  int col(int p) const { return cols_.at(p); }

  Vector params_from(const Matrix& L) const {
    Vector p(size());
    for (int k = 0; k < size(); ++k) {
      const double e = L(rows_[k], cols_[k]);
      p[k] = is_diagonal(k) ? std::log(e) : e;
    }
    return p;
  }

  Matrix matrix(const Vector& params) const {
    Matrix L = Matrix::Zero(dim_, dim_);
    for (int k = 0; k < size(); ++k) {
      L(rows_[k], cols_[k]) = is_diagonal(k) ? std::exp(params[k]) : params[k];
    }
    return L;
  }

  /// dL / dparams[k] for every k.
  std::vector<Matrix> jacobian(const Vector& params) const {
    std::vector<Matrix> out;
    for (int k = 0; k < size(); ++k) {
      Matrix d = Matrix::Zero(dim_, dim_);
      d(rows_[k], cols_[k]) = is_diagonal(k) ? std::exp(params[k]) : 1.0;
      out.push_back(std::move(d));
    }
    return out;
  }

 private:
  int dim_;
  bool diagonal_only_;
  std::vector<int> rows_, cols_;
};

/// Lag-1 objective and its gradient from one chain run with pathwise tangents: the
/// cross-covariance C = E[X_k X_{k+1}^T] - m m^T, its determinant (gamma_1 in 1-D) and
/// d det(C) / d param via Jacobi's formula, with the mean-term derivative dropped.
struct LagOneGradient {
  Matrix cross;
  double objective = 0.0;
  Vector gradient;  // per direction
  double acceptance_rate = 0.0;
  std::int64_t truncated = 0;
  std::int64_t max_alive = 0;
};

inline LagOneGradient lag_one_gradient_from(const ChainResult& r, int dim) {
  LagOneGradient out;
  const Matrix moment = Eigen::Map<const Matrix>(r.primal_mean.data(), dim, dim).transpose();
  out.cross = moment - r.state_mean * r.state_mean.transpose();
  out.objective = out.cross.determinant();
  const int P = static_cast<int>(r.gradient.cols());
  out.gradient.resize(P);
  for (int p = 0; p < P; ++p) {
    // output i*d + j holds dE[x_k[i] x_k1[j]]; Map is column-major, so transpose
    const Matrix dC = Eigen::Map<const Matrix>(r.gradient.col(p).data(), dim, dim).transpose();
    if (dim == 1) {
      out.gradient[p] = dC(0, 0);
    } else {
      try {
        out.gradient[p] = det_gradient_assemble(out.cross, dC);
      } catch (const NumericalError&) {
        out.gradient[p] = std::numeric_limits<double>::quiet_NaN();
      }
    }
  }
  out.acceptance_rate = r.acceptance_rate;
  out.truncated = r.truncated;
  out.max_alive = r.max_alive;
  return out;
}

/// Runs one pathwise DMH chain for a random-walk kernel with scale L and
/// directions dL, and assembles the lag-1 objective gradient.
inline LagOneGradient lag_one_gradient(const ParametricTarget& target, const Matrix& L,
                                       const std::vector<Matrix>& dL, const ChainConfig& config,
                                       EstimatorOptions options, std::uint64_t alt_key) {
  const ProposalKernel kernel = ProposalKernel::gaussian_rw(L);
  options.pathwise = PathwiseSpec{dL, Matrix()};
  const int d = target.dim();
  const ChainResult r =
      run_dmh_chain(target, kernel, Functional::lag1_cross_products(d), config, options, alt_key);
  return lag_one_gradient_from(r, d);
}

struct TuneConfig {
  Matrix initial_scale;  // lower-triangular L0
  bool diagonal_only = false;
  int iterations = 200;
  std::int64_t steps_per_iter = 50'000;
  std::int64_t burn_in = 5'000;
  double lr = 0.005;
  std::uint64_t seed = 0;
  std::int64_t max_horizon = 0;
  double pruning_prob = 1.0;
};

struct TuneRecord {
  int iteration = 0;
  Vector params;  // before the update of this iteration
  Matrix scale;
  double objective = 0.0;
  Vector gradient;
  double grad_norm = 0.0;
  double acceptance_rate = 0.0;
  std::int64_t truncated = 0;
  bool skipped = false;  // unusable gradient (singular C or non-finite); no update applied
};

struct TuneResult {
  std::vector<TuneRecord> trajectory;
  Vector final_params;
  Matrix final_scale;
  std::int64_t skipped = 0;
  std::int64_t truncated = 0;
};

using TuneObserver = std::function<void(const TuneRecord&)>;

/// Adam on the Cholesky parameters of a random-walk proposal, minimizing det of the
/// lag-1 cross-covariance. Each iteration runs a fresh chain from the origin seeded by
/// (seed, iteration).
inline TuneResult tune_proposal(const ParametricTarget& target, const TuneConfig& cfg,
                                const TuneObserver& observer = {}) {
  const int d = target.dim();
  if (cfg.initial_scale.rows() != d || cfg.initial_scale.cols() != d) {
    throw DimensionError("initial scale must be dim x dim");
  }
  if (!target.has_grad_x()) throw std::invalid_argument("proposal tuning needs grad_x");
  if (cfg.iterations < 0) throw std::invalid_argument("iterations must be non-negative");
  const CholeskyParameterization param(d, cfg.diagonal_only);
  AdamState adam = AdamState::init(param.params_from(cfg.initial_scale), cfg.lr);

  TuneResult result;
  for (int it = 0; it < cfg.iterations; ++it) {
    const Matrix L = param.matrix(adam.params);
    for (int i = 0; i < d; ++i) {
      if (!(L(i, i) > 0.0) || !std::isfinite(L(i, i))) {
        throw NumericalError("invalid Cholesky factor at iteration " + std::to_string(it));
      }
    }
    ChainConfig cc;
    cc.n_steps = cfg.steps_per_iter;
    cc.burn_in = cfg.burn_in;
    cc.seed = chain_seed(cfg.seed, static_cast<std::uint64_t>(it));
    cc.theta = 0.0;
    cc.initial_state = Vector::Zero(d);
    EstimatorOptions opt;
    opt.max_horizon = cfg.max_horizon;
    opt.pruning_prob = cfg.pruning_prob;

    TuneRecord rec;
    rec.iteration = it;
    rec.params = adam.params;
    rec.scale = L;
    LagOneGradient g;
    try {
      g = lag_one_gradient(target, L, param.jacobian(adam.params), cc, opt,
                           alternative_key(cfg.seed, static_cast<std::uint64_t>(it)));
    } catch (const NumericalError& e) {
      throw NumericalError(std::string(e.what()) + " (optimizer iteration " + std::to_string(it) + ")");
    }
    rec.objective = g.objective;
    rec.gradient = g.gradient;
    rec.grad_norm = g.gradient.norm();
    rec.acceptance_rate = g.acceptance_rate;
    rec.truncated = g.truncated;
    result.truncated += g.truncated;
    if (g.gradient.allFinite()) {
      adam = adam_step(adam, g.gradient);
    } else {
      rec.skipped = true;
      ++result.skipped;
    }
    if (observer) observer(rec);
    result.trajectory.push_back(std::move(rec));
  }
  result.final_params = adam.params;
  result.final_scale = param.matrix(adam.params);
  return result;
}

}  // namespace dmh
