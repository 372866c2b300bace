#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "dmh/chain.hpp"
#include "dmh/functionals.hpp"
#include "dmh/model.hpp"
#include "dmh/proposal.hpp"
#include "dmh/rng.hpp"

namespace dmh {

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

/// d alpha / d theta for a theta-free proposal via the score expansion
/// 1{alpha < 1} alpha (s(x_prop) - s(x)). Exactly zero on the clip and when alpha = 0.
inline double d_alpha_d_theta(const ParametricTarget& target, double theta,
                              const AugmentedStep& step) {
  if (step.log_alpha == 0.0 || step.log_alpha == kNegInf) return 0.0;
  const double diff = target.score_theta(theta, step.x_prop) - target.score_theta(theta, step.x);
  const double d = std::exp(step.log_alpha) * diff;
  if (!std::isfinite(d)) throw NumericalError("non-finite acceptance derivative");
  return d;
}

/// -1 if the primal accepted, +1 if it rejected.
inline double decision_sign(const AugmentedStep& step) { return step.accepted ? -1.0 : 1.0; }

/// W = d alpha / d theta * (1 - 2 * 1{u <= alpha}).
inline double weight(const ParametricTarget& target, double theta, const AugmentedStep& step) {
  return d_alpha_d_theta(target, theta, step) * decision_sign(step);
}

/// Pathwise part of the total derivative of alpha for a symmetric proposal:
/// 1{alpha < 1} alpha (<grad log g(x_prop), dx_prop> - <grad log g(x), dx>).
inline double pathwise_d_alpha(const Vector& grad_prop, const Vector& grad_x,
                               const AugmentedStep& step, const Vector& tangent_x,
                               const Vector& tangent_xprop) {
  if (step.log_alpha == 0.0 || step.log_alpha == kNegInf) return 0.0;
  return std::exp(step.log_alpha) * (grad_prop.dot(tangent_xprop) - grad_x.dot(tangent_x));
}

/// Extended weight W~ = W + (d alpha/dx_prop dx_prop + d alpha/dx dx) * sign, for a
/// symmetric proposal whose own density terms cancel.
inline double extended_weight(const ParametricTarget& target, double theta,
                              const AugmentedStep& step, const Vector& tangent_x,
                              const Vector& tangent_xprop) {
  if (!target.has_grad_x()) {
    throw std::invalid_argument("extended weight needs a target with an x-gradient");
  }
  const double base = weight(target, theta, step);
  if (step.log_alpha == 0.0 || step.log_alpha == kNegInf) return base;
  const double path = pathwise_d_alpha(target.grad_x(theta, step.x_prop),
                                       target.grad_x(theta, step.x), step, tangent_x,
                                       tangent_xprop);
  return base + path * decision_sign(step);
}

// ---------------------------------------------------------------------------
// Tangents
// ---------------------------------------------------------------------------

/// Pathwise derivative dX/dtheta of the current primal state.
struct Tangent {
  Vector dx;
};

/// dX_prop/dtheta = dX/dtheta + (dL/dtheta) z for x_prop = x + L z.
inline Vector proposal_tangent(const Vector& dx, const AugmentedStep& step, const Matrix& dL) {
  if (step.z.size() != dx.size()) {
    throw std::invalid_argument("tangent recursion needs the step's random-walk increment");
  }
  return dx + dL * step.z;
}

/// Accepted steps carry the proposal tangent, rejected steps keep the state tangent.
inline Tangent advance_tangent(const Tangent& tangent, const AugmentedStep& step, const Matrix& dL) {
  if (!step.accepted) return tangent;
  return Tangent{proposal_tangent(tangent.dx, step, dL)};
}

// ---------------------------------------------------------------------------
// Alternatives
// ---------------------------------------------------------------------------

/// A live perturbation branch split off the primal at step `birth`.
struct Alternative {
  std::int64_t birth = 0;
  Vector weight;  // one entry per differentiation direction
  Vector y;
  double log_g_y = 0.0;
  std::int64_t k = 0;  // terms accumulated so far
  Vector partial_sum;  // one entry per functional output
  bool recoupled = false;
  CounterStream stream;
};

/// Splits an alternative off `step` by taking the opposite accept/reject decision and
/// records its first functional difference against the primal's next state. For lag-1
/// functionals the first pair is (x, y1) against (x, x_next).
inline Alternative spawn_alternative(const AugmentedStep& step, Vector weight,
                                     const Functional& f, CounterStream stream,
                                     std::int64_t birth = 0) {
  Alternative alt;
  alt.birth = birth;
  alt.weight = std::move(weight);
  if (step.accepted) {
    alt.y = step.x;
    alt.log_g_y = step.log_g_x;
  } else {
    alt.y = step.x_prop;
    alt.log_g_y = step.log_g_prop;
  }
  alt.stream = stream;
  alt.k = 1;
  if (f.lag == 0) {
    alt.partial_sum = f.value(alt.y) - f.value(step.x_next);
  } else {
    alt.partial_sum = pair_diff(f, step.x, alt.y, step.x, step.x_next);
  }
  alt.recoupled = alt.y == step.x_next;
  return alt;
}

/// Moves the alternative through the primal transition `step` with the coupled proposal
/// and the primal's uniform, accumulating the functional difference. Recoupling is exact
/// equality with the primal's next state.
inline void advance_alternative(Alternative& alt, const AugmentedStep& step,
                                const ParametricTarget& target, const ProposalKernel& kernel,
                                double theta, const Functional& f,
                                const Vector* primal_term = nullptr) {
  if (alt.recoupled) throw std::logic_error("cannot advance a recoupled alternative");
  CouplingOutcome c = kernel.couple(alt.stream, step.x, step.x_prop, alt.y);
  const double log_g_prop = c.met ? step.log_g_prop : target.log_g(theta, c.y_proposal);
  const double log_alpha =
      log_acceptance_from(kernel, alt.y, alt.log_g_y, c.y_proposal, log_g_prop);
  const bool accept = log_alpha != kNegInf && std::log(step.u) <= log_alpha;

  Vector term;
  if (f.lag == 0) {
    const Vector& y_next = accept ? c.y_proposal : alt.y;
    term = f.value(y_next) - (primal_term ? *primal_term : f.value(step.x_next));
  } else {
    const Vector& y_next = accept ? c.y_proposal : alt.y;
    term = f.value(alt.y, y_next) - (primal_term ? *primal_term : f.value(step.x, step.x_next));
  }
  alt.partial_sum += term;
  ++alt.k;
  if (accept) {
    alt.y = std::move(c.y_proposal);
    alt.log_g_y = log_g_prop;
  }
  alt.recoupled = alt.y == step.x_next;
}

// ---------------------------------------------------------------------------
// Estimator
// ---------------------------------------------------------------------------

/// Proposal-parameter differentiation: x_prop = x + L(theta) z with one dL per
/// direction. Tangents start at `initial_tangent` (dim x directions, zero if empty).
struct PathwiseSpec {
  std::vector<Matrix> dL;
  Matrix initial_tangent;
};

struct EstimatorOptions {
  int n_chains = 4;
  int threads = 1;
  double pruning_prob = 1.0;
  /// Maximum number of terms per alternative; 0 means the rest of the run.
  std::int64_t max_horizon = 0;
  std::optional<PathwiseSpec> pathwise;
  /// Keep post-burn-in primal states in ChainResult::samples.
  bool keep_samples = false;
};

/// Output of a single chain; gradient is outputs x directions.
struct ChainResult {
  Matrix gradient;
  Vector primal_mean;  // mean of f over the post-burn-in terms
  Vector state_mean;   // mean of the post-burn-in states X_0..X_{N-1}
  std::int64_t steps = 0;
  double acceptance_rate = 0.0;
  std::int64_t spawned = 0;
  std::int64_t recoupled = 0;
  std::int64_t truncated = 0;     // hit max_horizon
  std::int64_t open_at_end = 0;   // still alive when the run ended
  double meeting_time_sum = 0.0;  // over recoupled alternatives
  std::int64_t max_alive = 0;
  Matrix samples;  // rows are states, only with keep_samples
};

struct GradientEstimate {
  double value = 0.0;
  double std_error = 0.0;
  std::vector<double> per_chain;
  int n_chains = 0;
  std::int64_t steps_per_chain = 0;
  double mean_meeting_time = 0.0;
  std::int64_t max_alive = 0;
};

/// Mean and cross-chain standard error of a per-chain statistic.
struct CrossChainMean {
  double value = 0.0;
  double std_error = 0.0;
};

inline CrossChainMean cross_chain_mean(const std::vector<double>& v) {
  CrossChainMean out;
  if (v.empty()) return out;
  double s = 0.0;
  for (double x : v) s += x;
  out.value = s / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - out.value) * (x - out.value);
    out.std_error = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
  }
  return out;
}

namespace detail {

inline Vector tangent_term(const Functional& f, const Vector& x, const Vector& x_next,
                           const Matrix& T, const Matrix& T_next, int p) {
  if (f.lag == 0) return f.single_tangent(x, T.col(p));
  return f.pair_tangent(x, x_next, T.col(p), T_next.col(p));
}

}  // namespace detail

/// Runs one chain of the estimator. The primal generator is seeded with config.seed and
/// alternative randomness is keyed by (alt_key, birth step), so the primal trajectory is
/// independent of pruning and of how many alternatives are alive.
inline ChainResult run_dmh_chain(const ParametricTarget& target, const ProposalKernel& kernel,
                                 const Functional& f, const ChainConfig& config,
                                 const EstimatorOptions& options, std::uint64_t alt_key) {
  config.validate();
  if (config.n_steps == 0) throw std::invalid_argument("estimator needs n_steps > 0");
  if (!(options.pruning_prob > 0.0 && options.pruning_prob <= 1.0)) {
    throw std::invalid_argument("pruning probability must lie in (0, 1]");
  }
  if (options.max_horizon < 0) throw std::invalid_argument("max_horizon must be non-negative");
  if (f.lag != 0 && f.lag != 1) throw std::invalid_argument("functional lag must be 0 or 1");

  const double theta = config.theta;
  const int dim = target.dim();
  const bool pathwise = options.pathwise.has_value();
  const int P = pathwise ? static_cast<int>(options.pathwise->dL.size()) : 1;
  const int M = f.outputs;
  if (P == 0) throw std::invalid_argument("pathwise mode needs at least one direction");

  Matrix T;  // state tangents, dim x P
  std::vector<Matrix> dL;
  if (pathwise) {
    if (kernel.kind() != ProposalKernel::Kind::GaussianRandomWalk) {
      throw std::invalid_argument("pathwise mode needs a Gaussian random-walk kernel");
    }
    if (!target.has_grad_x()) {
      throw std::invalid_argument("pathwise mode needs a target with an x-gradient");
    }
    if (!f.has_tangent()) throw std::invalid_argument("pathwise mode needs functional tangents");
    dL = options.pathwise->dL;
    for (const Matrix& m : dL) {
      if (m.rows() != dim || m.cols() != dim) throw DimensionError("dL must be dim x dim");
    }
    T = options.pathwise->initial_tangent.size() == 0 ? Matrix::Zero(dim, P)
                                                      : options.pathwise->initial_tangent;
    if (T.rows() != dim || T.cols() != P) throw DimensionError("initial tangent must be dim x P");
  }

  Chain chain(target, kernel, theta, config.initial_state, config.seed);

  auto advance_tangents = [&](const AugmentedStep& s, Matrix& T_prop, Matrix& T_next) {
    T_prop = T;
    for (int p = 0; p < P; ++p) T_prop.col(p) += dL[p] * s.z;
    T_next = s.accepted ? T_prop : T;
  };

  Matrix T_prop, T_next;
  for (std::int64_t i = 0; i < config.burn_in; ++i) {
    AugmentedStep s = chain.advance();
    if (pathwise) {
      advance_tangents(s, T_prop, T_next);
      T = T_next;
    }
  }

  const std::int64_t N = config.n_steps - config.burn_in;
  ChainResult r;
  r.steps = N;
  r.gradient = Matrix::Zero(M, P);
  r.primal_mean = Vector::Zero(M);
  r.state_mean = Vector::Zero(dim);
  if (options.keep_samples) r.samples.resize(N, dim);

  Matrix spa = Matrix::Zero(M, P);
  Matrix ipa = Matrix::Zero(M, P);
  std::vector<Alternative> alive;
  std::int64_t accepted = 0;
  const std::int64_t horizon = options.max_horizon;

  Vector grad_cached;  // grad log g at the primal state, pathwise only
  if (pathwise) grad_cached = target.grad_x(theta, chain.state());

  auto finalize = [&](const Alternative& a, std::int64_t t) {
    const Matrix contrib = a.partial_sum * a.weight.transpose();
    if (!contrib.allFinite()) {
      throw NumericalError("non-finite estimator contribution from the alternative born at step " +
                           std::to_string(a.birth) + " (closed at step " + std::to_string(t) + ")");
    }
    spa += contrib;
  };

  Vector w(P);
  for (std::int64_t t = 0; t < N; ++t) {
    AugmentedStep s = chain.advance();
    if (s.accepted) ++accepted;
    if (!std::isfinite(s.log_g_x) || !s.x_next.allFinite()) {
      throw NumericalError("primal chain diverged at step " + std::to_string(t));
    }
    r.state_mean += s.x;
    if (options.keep_samples) r.samples.row(t) = s.x.transpose();

    if (pathwise) advance_tangents(s, T_prop, T_next);

    // primal term of index t and its pathwise derivative
    const Vector primal_t = f.lag == 0 ? f.value(s.x) : f.value(s.x, s.x_next);
    r.primal_mean += primal_t;
    if (pathwise) {
      for (int p = 0; p < P; ++p) ipa.col(p) += detail::tangent_term(f, s.x, s.x_next, T, T_next, p);
    }

    // advance live alternatives through this transition
    const bool lag0_tail = f.lag == 0 && t == N - 1;  // term t+1 would fall outside the run
    if (!lag0_tail && !alive.empty()) {
      const Vector primal_next = f.lag == 0 ? f.value(s.x_next) : primal_t;
      std::size_t keep = 0;
      for (std::size_t i = 0; i < alive.size(); ++i) {
        Alternative& a = alive[i];
        advance_alternative(a, s, target, kernel, theta, f, &primal_next);
        if (a.recoupled) {
          ++r.recoupled;
          r.meeting_time_sum += static_cast<double>(a.k - 1);
          finalize(a, t);
        } else if (horizon > 0 && a.k >= horizon) {
          ++r.truncated;
          finalize(a, t);
        } else {
          if (keep != i) alive[keep] = std::move(a);
          ++keep;
        }
      }
      alive.resize(keep);
    }

    // weight of this transition
    const double base = weight(target, theta, s);
    if (pathwise) {
      Vector grad_prop;
      const bool interior = s.log_alpha < 0.0 && s.log_alpha != kNegInf;
      if (interior || s.accepted) grad_prop = target.grad_x(theta, s.x_prop);
      for (int p = 0; p < P; ++p) {
        double path = 0.0;
        if (interior) path = pathwise_d_alpha(grad_prop, grad_cached, s, T.col(p), T_prop.col(p));
        w[p] = base + path * decision_sign(s);
      }
      if (s.accepted) grad_cached = std::move(grad_prop);
      T = T_next;
    } else {
      w[0] = base;
    }

    const bool room = f.lag == 1 || t + 1 <= N - 1;
    if (room && !w.isZero(0.0)) {
      bool keep_it = true;
      if (options.pruning_prob < 1.0) {
        CounterStream coin(derive_seed(alt_key, 2 * static_cast<std::uint64_t>(t)));
        keep_it = coin.uniform() <= options.pruning_prob;
      }
      if (keep_it) {
        CounterStream eps(derive_seed(alt_key, 2 * static_cast<std::uint64_t>(t) + 1));
        Alternative a = spawn_alternative(s, w / options.pruning_prob, f, eps, t);
        ++r.spawned;
        if (a.recoupled) {
          ++r.recoupled;
          finalize(a, t);
        } else if (horizon > 0 && a.k >= horizon) {
          ++r.truncated;
          finalize(a, t);
        } else {
          alive.push_back(std::move(a));
        }
      }
    }
    r.max_alive = std::max<std::int64_t>(r.max_alive, static_cast<std::int64_t>(alive.size()));
  }
  for (const Alternative& a : alive) finalize(a, N);
  r.open_at_end = static_cast<std::int64_t>(alive.size());

  const double n = static_cast<double>(N);
  r.gradient = (spa + ipa) / n;
  r.primal_mean /= n;
  r.state_mean /= n;
  r.acceptance_rate = static_cast<double>(accepted) / n;
  if (!r.gradient.allFinite()) throw NumericalError("non-finite gradient accumulator");
  return r;
}

/// Seed used to key alternative randomness for chain `index` of a run.
inline std::uint64_t alternative_key(std::uint64_t run_seed, std::uint64_t index) {
  return derive_seed(run_seed, 2 * index + 1);
}

/// Runs `count` independent jobs on up to `threads` workers; results keep job order.
template <class Job>
auto run_parallel(int count, int threads, Job job) -> std::vector<decltype(job(0))> {
  using Result = decltype(job(0));
  std::vector<std::optional<Result>> slots(static_cast<std::size_t>(count));
  const int workers = std::max(1, std::min(threads, count));
  if (workers == 1) {
    for (int i = 0; i < count; ++i) slots[i] = job(i);
  } else {
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (int i = next++; i < count; i = next++) {
          try {
            slots[i] = job(i);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error) error = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
  }
  std::vector<Result> out;
  out.reserve(slots.size());
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

/// Multi-chain estimate: entry (m, p) is d/dtheta_p E[f_m].
struct GradientReport {
  std::vector<ChainResult> chains;
  std::vector<std::vector<GradientEstimate>> estimates;  // [output][direction]
  std::vector<CrossChainMean> primal_means;             // per output
  std::int64_t truncated = 0;
  std::int64_t open_at_end = 0;

  const GradientEstimate& at(int output, int direction = 0) const {
    return estimates.at(output).at(direction);
  }
};

inline GradientReport estimate_gradients(const ParametricTarget& target,
                                         const ProposalKernel& kernel, const Functional& f,
                                         const ChainConfig& config,
                                         const EstimatorOptions& options) {
  config.validate();
  if (options.n_chains < 1) throw std::invalid_argument("n_chains must be positive");
  GradientReport report;
  report.chains = run_parallel(options.n_chains, options.threads, [&](int c) {
    ChainConfig cc = config;
    cc.seed = chain_seed(config.seed, static_cast<std::uint64_t>(c));
    return run_dmh_chain(target, kernel, f, cc, options,
                         alternative_key(config.seed, static_cast<std::uint64_t>(c)));
  });

  const int M = static_cast<int>(report.chains.front().gradient.rows());
  const int P = static_cast<int>(report.chains.front().gradient.cols());
  double meet_sum = 0.0;
  std::int64_t meet_n = 0, max_alive = 0;
  for (const ChainResult& c : report.chains) {
    meet_sum += c.meeting_time_sum;
    meet_n += c.recoupled;
    max_alive = std::max(max_alive, c.max_alive);
    report.truncated += c.truncated;
    report.open_at_end += c.open_at_end;
  }
  report.estimates.assign(M, std::vector<GradientEstimate>(P));
  for (int m = 0; m < M; ++m) {
    std::vector<double> means;
    for (const ChainResult& c : report.chains) means.push_back(c.primal_mean[m]);
    report.primal_means.push_back(cross_chain_mean(means));
    for (int p = 0; p < P; ++p) {
      GradientEstimate& e = report.estimates[m][p];
      for (const ChainResult& c : report.chains) e.per_chain.push_back(c.gradient(m, p));
      const CrossChainMean cm = cross_chain_mean(e.per_chain);
      e.value = cm.value;
      e.std_error = cm.std_error;
      e.n_chains = options.n_chains;
      e.steps_per_chain = report.chains.front().steps;
      e.mean_meeting_time = meet_n > 0 ? meet_sum / static_cast<double>(meet_n) : 0.0;
      e.max_alive = max_alive;
    }
  }
  return report;
}

/// Scalar convenience wrapper: single-output functional, single direction.
inline GradientEstimate estimate_gradient(const ParametricTarget& target,
                                          const ProposalKernel& kernel, const Functional& f,
                                          const ChainConfig& config,
                                          const EstimatorOptions& options) {
  if (f.outputs != 1) throw std::invalid_argument("estimate_gradient needs a scalar functional");
  GradientReport r = estimate_gradients(target, kernel, f, config, options);
  if (r.estimates.front().size() != 1) {
    throw std::invalid_argument("estimate_gradient needs a single direction");
  }
  return r.at(0, 0);
}

}  // namespace dmh
