#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmh/model.hpp"
#include "dmh/proposal.hpp"
#include "dmh/rng.hpp"

namespace dmh {

/// One transition of the augmented chain: the state, the proposal, the acceptance
/// uniform and the resulting state. `z` is the proposal's standard-normal increment
/// (random-walk kernels only) so tangents and finite-difference checks can replay it.
struct AugmentedStep {
  Vector x;
  Vector x_prop;
  Vector z;
  double u = 1.0;
  double log_alpha = 0.0;
  bool accepted = false;
  Vector x_next;
  double log_g_x = 0.0;
  double log_g_prop = 0.0;
};

struct ChainConfig {
  std::int64_t n_steps = 0;
  std::int64_t burn_in = 0;
  std::uint64_t seed = 0;
  double theta = 0.0;
  Vector initial_state;

  void validate() const {
    if (n_steps < 0) throw std::invalid_argument("n_steps must be non-negative");
    if (burn_in < 0) throw std::invalid_argument("burn_in must be non-negative");
    if (n_steps > 0 && burn_in >= n_steps) throw std::invalid_argument("burn_in must be < n_steps");
    if (initial_state.size() == 0) throw std::invalid_argument("initial_state is empty");
  }
};

/// min(0, log g(x') + log q(x|x') - log g(x) - log q(x'|x)) given log g at both ends.
/// A proposal outside the support (log g = -inf) gives -inf.
inline double log_acceptance_from(const ProposalKernel& kernel, const Vector& x, double log_g_x,
                                  const Vector& x_prop, double log_g_prop) {
  if (log_g_prop == kNegInf) return kNegInf;
  double r = log_g_prop - log_g_x;
  if (!kernel.symmetric()) r += kernel.log_q(x, x_prop) - kernel.log_q(x_prop, x);
  if (std::isnan(r)) throw NumericalError("acceptance ratio is NaN");
  return std::min(0.0, r);
}

inline double acceptance_log_prob(const ParametricTarget& target, const ProposalKernel& kernel,
                                  double theta, const Vector& x, const Vector& x_prop) {
  const double lx = target.log_g(theta, x);
  if (lx == kNegInf) throw std::domain_error("chain state lies outside the target support");
  return log_acceptance_from(kernel, x, lx, x_prop, target.log_g(theta, x_prop));
}

/// Deterministic MH transition given the proposal and the uniform `u`.
/// Accepts iff log(u) <= log_alpha, except that alpha = 0 always rejects.
inline AugmentedStep transition(const ParametricTarget& target, const ProposalKernel& kernel,
                                double theta, const Vector& x, double log_g_x, Proposal proposal,
                                double u) {
  AugmentedStep s;
  s.x = x;
  s.log_g_x = log_g_x;
  s.x_prop = std::move(proposal.x_prop);
  s.z = std::move(proposal.z);
  s.u = u;
  s.log_g_prop = target.log_g(theta, s.x_prop);
  s.log_alpha = log_acceptance_from(kernel, x, log_g_x, s.x_prop, s.log_g_prop);
  s.accepted = s.log_alpha != kNegInf && std::log(u) <= s.log_alpha;
  s.x_next = s.accepted ? s.x_prop : s.x;
  return s;
}

inline AugmentedStep step(const ParametricTarget& target, const ProposalKernel& kernel,
                          double theta, const Vector& x, Rng& rng) {
  const double lx = target.log_g(theta, x);
  if (lx == kNegInf) throw std::domain_error("chain state lies outside the target support");
  Proposal p = kernel.propose(rng, x);
  const double u = rng.uniform();
  return transition(target, kernel, theta, x, lx, std::move(p), u);
}

/// Incremental primal chain; caches log g at the current state.
class Chain {
 public:
  Chain(const ParametricTarget& target, const ProposalKernel& kernel, double theta, Vector x0,
        std::uint64_t seed)
      : target_(target), kernel_(kernel), theta_(theta), x_(std::move(x0)), rng_(seed) {
    if (x_.size() != target.dim() || kernel.dim() != target.dim()) {
      throw DimensionError("target, kernel and initial state dimensions differ");
    }
    log_g_x_ = target.log_g(theta_, x_);
    if (log_g_x_ == kNegInf) throw std::domain_error("initial state lies outside the target support");
  }

  AugmentedStep advance() {
    Proposal p = kernel_.propose(rng_, x_);
    const double u = rng_.uniform();
    AugmentedStep s = transition(target_, kernel_, theta_, x_, log_g_x_, std::move(p), u);
    if (s.accepted) {
      x_ = s.x_prop;
      log_g_x_ = s.log_g_prop;
    }
    return s;
  }

  const Vector& state() const noexcept { return x_; }
  double log_g_state() const noexcept { return log_g_x_; }

 private:
  ParametricTarget target_;
  ProposalKernel kernel_;
  double theta_;
  Vector x_;
  double log_g_x_ = 0.0;
  Rng rng_;
};

/// Seed of the primal generator of chain `index` under a run seed.
inline std::uint64_t chain_seed(std::uint64_t run_seed, std::uint64_t index) {
  return derive_seed(run_seed, 2 * index);
}

using StepObserver = std::function<void(std::int64_t index, const AugmentedStep&)>;

/// Runs config.n_steps transitions (burn-in included); deterministic given the seed.
inline std::vector<AugmentedStep> run_primal(const ParametricTarget& target,
                                             const ProposalKernel& kernel,
                                             const ChainConfig& config,
                                             const StepObserver& observer = {}) {
  config.validate();
  std::vector<AugmentedStep> steps;
  steps.reserve(static_cast<std::size_t>(config.n_steps));
  Chain chain(target, kernel, config.theta, config.initial_state, config.seed);
  for (std::int64_t i = 0; i < config.n_steps; ++i) {
    steps.push_back(chain.advance());
    if (observer) observer(i, steps.back());
  }
  return steps;
}

}  // namespace dmh
