#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "dmh/chain.hpp"
#include "dmh/estimator.hpp"
#include "dmh/functionals.hpp"
#include "dmh/model.hpp"

using namespace dmh;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

AugmentedStep make_step(const ParametricTarget& t, const ProposalKernel& k, double theta, const Vector& x,
                        const Vector& xp, double u, Vector z = Vector()) {
  return transition(t, k, theta, x, t.log_g(theta, x), Proposal{xp, std::move(z)}, u);
}

ChainConfig config(std::int64_t n, std::int64_t burn, std::uint64_t seed, double theta, Vector x0) {
  ChainConfig c;
  c.n_steps = n;
  c.burn_in = burn;
  c.seed = seed;
  c.theta = theta;
  c.initial_state = std::move(x0);
  return c;
}

double sigmoid_derivative(double t) { return std::exp(t) / ((1 + std::exp(t)) * (1 + std::exp(t))); }

// Meeting times (k - 1 at recoupling) of alternatives spawned every `every` steps of an
// independence sampler.
std::vector<std::int64_t> independence_meeting_times(const ParametricTarget& t, const ProposalKernel& k,
                                                     int wanted, int every, std::uint64_t seed) {
  Chain chain(t, k, 0.0, vec({0.0}), seed);
  const Functional f = Functional::coordinate(0);
  std::vector<Alternative> alive;
  std::vector<std::int64_t> times;
  std::int64_t spawned = 0;
  for (std::int64_t step = 0; times.size() < static_cast<std::size_t>(wanted); ++step) {
    const AugmentedStep s = chain.advance();
    std::size_t keep = 0;
    for (std::size_t i = 0; i < alive.size(); ++i) {
      advance_alternative(alive[i], s, t, k, 0.0, f);
      if (alive[i].recoupled) {
        times.push_back(alive[i].k - 1);
      } else {
        alive[keep++] = std::move(alive[i]);
      }
    }
    alive.resize(keep);
    if (step % every == 0 && spawned < wanted) {
      Alternative a = spawn_alternative(s, Vector::Ones(1), f, CounterStream(derive_seed(seed, step)), step);
      ++spawned;
      if (a.recoupled) {
        times.push_back(0);
      } else {
        alive.push_back(std::move(a));
      }
    }
  }
  return times;
}

}  // namespace

// ---------------------------------------------------------------- weights

TEST(Weight, ZeroAtTheClip) {
  const ParametricTarget t = targets::gaussian_mean_shift(1);
  const ProposalKernel k = ProposalKernel::gaussian_rw(1, 1.0);
  const AugmentedStep s = make_step(t, k, 0.0, vec({1.0}), vec({0.2}), 0.5);
  ASSERT_EQ(s.log_alpha, 0.0);
  EXPECT_EQ(d_alpha_d_theta(t, 0.0, s), 0.0);
  EXPECT_EQ(weight(t, 0.0, s), 0.0);
}

TEST(Weight, TwoPointExample) {
  const ParametricTarget t = targets::two_point();
  const ProposalKernel k = ProposalKernel::flip();
  const AugmentedStep acc = make_step(t, k, 0.5, vec({1.0}), vec({0.0}), 0.1);
  const AugmentedStep rej = make_step(t, k, 0.5, vec({1.0}), vec({0.0}), 0.9);
  ASSERT_TRUE(acc.accepted);
  ASSERT_FALSE(rej.accepted);
  const double expected = -std::exp(-0.5);
  EXPECT_NEAR(d_alpha_d_theta(t, 0.5, acc), expected, 1e-12);
  // central difference of alpha(theta) = exp(-theta)
  const double h = 1e-6;
  EXPECT_NEAR(expected, (std::exp(-(0.5 + h)) - std::exp(-(0.5 - h))) / (2 * h), 1e-8);
  EXPECT_NEAR(weight(t, 0.5, acc), -expected, 1e-12);
  EXPECT_NEAR(weight(t, 0.5, rej), expected, 1e-12);
}

TEST(Weight, ThetaFreeTargetGivesZero) {
  const ParametricTarget t = targets::standard_gaussian(1);
  const ProposalKernel k = ProposalKernel::gaussian_rw(1, 2.0);
  ChainConfig c = config(500, 0, 1, 0.0, vec({0.0}));
  for (const AugmentedStep& s : run_primal(t, k, c)) EXPECT_EQ(weight(t, 0.0, s), 0.0);
}

// ---------------------------------------------------------------- alternatives

TEST(Alternative, SpawnTakesTheOppositeDecision) {
  const ParametricTarget t = targets::gaussian_mean_shift(1);
  const ProposalKernel k = ProposalKernel::gaussian_rw(1, 1.0);
  const Functional f = Functional::coordinate(0);
  const AugmentedStep acc = make_step(t, k, 0.0, vec({0.0}), vec({1.0}), 0.1);
  const AugmentedStep rej = make_step(t, k, 0.0, vec({0.0}), vec({1.0}), 0.9);
  ASSERT_TRUE(acc.accepted);
  ASSERT_FALSE(rej.accepted);
  const Alternative a = spawn_alternative(acc, Vector::Ones(1), f, CounterStream(1));
  const Alternative b = spawn_alternative(rej, Vector::Ones(1), f, CounterStream(1));
  EXPECT_EQ(a.y, acc.x);
  EXPECT_EQ(b.y, rej.x_prop);
  EXPECT_EQ(a.k, 1);
  EXPECT_DOUBLE_EQ(a.partial_sum[0], 0.0 - 1.0);  // f(Y_1) - f(X_{n+1})
  EXPECT_DOUBLE_EQ(b.partial_sum[0], 1.0 - 0.0);
}

TEST(Alternative, LagOneFirstTermUsesTheSharedStartingState) {
  const ParametricTarget t = targets::gaussian_mean_shift(1);
  const ProposalKernel k = ProposalKernel::gaussian_rw(1, 1.0);
  const AugmentedStep acc = make_step(t, k, 0.0, vec({2.0}), vec({1.0}), 0.5);
  ASSERT_TRUE(acc.accepted);
  const Alternative a = spawn_alternative(acc, Vector::Ones(1), Functional::lag1_product(0, 0), CounterStream(1));
  // (X_n, Y_1) = (2, 2) against (X_n, X_{n+1}) = (2, 1)
  EXPECT_DOUBLE_EQ(a.partial_sum[0], 4.0 - 2.0);
}

TEST(Alternative, EqualStatesRecoupleImmediately) {
  const ParametricTarget t = targets::gaussian_mean_shift(1);
  const ProposalKernel k = ProposalKernel::gaussian_rw(1, 1.0);
  const Functional f = Functional::coordinate(0);
  const AugmentedStep first = make_step(t, k, 0.0, vec({0.0}), vec({0.4}), 0.99);  // rejected
  Alternative a = spawn_alternative(first, Vector::Ones(1), f, CounterStream(3));
  // a primal step that starts from the alternative's state
  const AugmentedStep s = make_step(t, k, 0.0, a.y, vec({0.1}), 0.3);
  advance_alternative(a, s, t, k, 0.0, f);
  EXPECT_TRUE(a.recoupled);
  EXPECT_EQ(a.y, s.x_next);
  EXPECT_THROW(advance_alternative(a, s, t, k, 0.0, f), std::logic_error);
}

TEST(Alternative, IndependenceKernelRecouplesOnJointAcceptance) {
  const ParametricTarget t = targets::standard_gaussian(1);
  const ProposalKernel k = ProposalKernel::independence_gaussian(Vector::Zero(1), Matrix::Identity(1, 1) * 2.0);
  Chain chain(t, k, 0.0, vec({0.0}), 5);
  const Functional f = Functional::coordinate(0);
  int checked = 0;
  for (int i = 0; i < 2000; ++i) {
    const AugmentedStep s = chain.advance();
    Alternative a = spawn_alternative(s, Vector::Ones(1), f, CounterStream(i));
    if (a.recoupled) continue;
    const AugmentedStep next = chain.advance();
    const Vector y_before = a.y;
    advance_alternative(a, next, t, k, 0.0, f);
    const double la = acceptance_log_prob(t, k, 0.0, y_before, next.x_prop);
    if (next.accepted && std::log(next.u) <= la) {
      EXPECT_TRUE(a.recoupled);
      ++checked;
    }
    if (!a.recoupled) {
      EXPECT_TRUE(a.y == y_before || a.y == next.x_prop);
    }
  }
  EXPECT_GT(checked, 100);
}

TEST(Alternative, ConstantFunctionalKeepsZeroSum) {
  const ParametricTarget t = targets::gaussian_mean_shift(1);
  const ProposalKernel k = ProposalKernel::gaussian_rw(1, 1.0);
  const Functional f = Functional::constant(3.0);
  Chain chain(t, k, 0.0, vec({0.0}), 8);
  Alternative a = spawn_alternative(chain.advance(), Vector::Ones(1), f, CounterStream(2));
  for (int i = 0; i < 200 && !a.recoupled; ++i) {
    advance_alternative(a, chain.advance(), t, k, 0.0, f);
    EXPECT_EQ(a.partial_sum[0], 0.0);
  }
}

TEST(MeetingTime, IndependenceSamplerEqualToTargetMeetsInOneStep) {
  const ParametricTarget t = targets::standard_gaussian(1);
  const ProposalKernel k = ProposalKernel::independence_gaussian(Vector::Zero(1), Matrix::Identity(1, 1));
  for (std::int64_t tau : independence_meeting_times(t, k, 2000, 3, 1)) EXPECT_EQ(tau, 1);
}

TEST(MeetingTime, GeometricTailBound) {
  // target N(0,1), proposal N(0, 2^2): sup pi/q = 2, so P(tau > t) <= 2^-t
  const ParametricTarget t = targets::standard_gaussian(1);
  const ProposalKernel k = ProposalKernel::independence_gaussian(Vector::Zero(1), Matrix::Identity(1, 1) * 2.0);
  const auto times = independence_meeting_times(t, k, 10'000, 7, 2);
  ASSERT_EQ(times.size(), 10'000u);
  for (int s = 0; s <= 20; ++s) {
    double tail = 0.0;
    for (std::int64_t tau : times) tail += tau > s ? 1.0 : 0.0;
    tail /= static_cast<double>(times.size());
    EXPECT_LE(tail, std::pow(0.5, s) * 1.1) << "t = " << s;
  }
}

// ---------------------------------------------------------------- tangents

TEST(Tangent, ZeroStaysZero) {
  const ParametricTarget t = targets::standard_gaussian(2);
  const ProposalKernel k = ProposalKernel::gaussian_rw(2, 1.0);
  ChainConfig c = config(1000, 0, 3, 0.0, Vector::Zero(2));
  Tangent tg{Vector::Zero(2)};
  for (const AugmentedStep& s : run_primal(t, k, c)) tg = advance_tangent(tg, s, Matrix::Zero(2, 2));
  EXPECT_TRUE(tg.dx.isZero(0.0));
}

TEST(Tangent, OneAcceptedStepGivesIncrement) {
  const ParametricTarget t = targets::standard_gaussian(1);
  const ProposalKernel k = ProposalKernel::gaussian_rw(1, 1.0);
  const AugmentedStep s = make_step(t, k, 0.0, vec({1.0}), vec({0.3}), 0.5, vec({-0.7}));
  ASSERT_TRUE(s.accepted);
  EXPECT_EQ(advance_tangent(Tangent{vec({0.0})}, s, Matrix::Identity(1, 1)).dx[0], -0.7);
  const AugmentedStep r = make_step(t, k, 0.0, vec({0.0}), vec({3.0}), 0.5, vec({3.0}));
  ASSERT_FALSE(r.accepted);
  EXPECT_EQ(advance_tangent(Tangent{vec({0.25})}, r, Matrix::Identity(1, 1)).dx[0], 0.25);
}

TEST(Tangent, RescalingIdentity) {
  const double sigma = 2.38;
  const ParametricTarget t = targets::standard_gaussian(1);
  const ProposalKernel k = ProposalKernel::gaussian_rw(1, sigma);
  ChainConfig c = config(10'000, 0, 4, 0.0, vec({0.7}));
  Tangent tg{c.initial_state / sigma};
  for (const AugmentedStep& s : run_primal(t, k, c)) {
    tg = advance_tangent(tg, s, Matrix::Identity(1, 1));
    const double expected = s.x_next[0] / sigma;
    EXPECT_NEAR(tg.dx[0], expected, 1e-12 * std::max(1.0, std::abs(expected)));
  }
}

TEST(ExtendedWeight, ReducesToWeightWithZeroTangents) {
  const ParametricTarget t = targets::gaussian_mean_shift(2);
  const ProposalKernel k = ProposalKernel::gaussian_rw(2, 1.5);
  ChainConfig c = config(300, 0, 6, 0.2, Vector::Zero(2));
  for (const AugmentedStep& s : run_primal(t, k, c)) {
    EXPECT_EQ(extended_weight(t, 0.2, s, Vector::Zero(2), Vector::Zero(2)), weight(t, 0.2, s));
  }
}

TEST(ExtendedWeight, ZeroWhenAlphaIsOne) {
  const ParametricTarget t = targets::standard_gaussian(1);
  const ProposalKernel k = ProposalKernel::gaussian_rw(1, 1.0);
  const AugmentedStep s = make_step(t, k, 0.0, vec({2.0}), vec({1.0}), 0.3, vec({-1.0}));
  ASSERT_EQ(s.log_alpha, 0.0);
  EXPECT_EQ(extended_weight(t, 0.0, s, vec({1.0}), vec({5.0})), 0.0);
}

TEST(ExtendedWeight, MissingGradientIsAConfigurationError) {
  const ParametricTarget t = targets::two_point();
  const AugmentedStep s = make_step(t, ProposalKernel::flip(), 0.5, vec({1.0}), vec({0.0}), 0.9);
  EXPECT_THROW(extended_weight(t, 0.5, s, vec({0.0}), vec({0.0})), std::invalid_argument);
}

TEST(ExtendedWeight, MatchesFiniteDifferenceOfAlpha) {
  // theta moves the target mean and the proposal scale; x moves along a tangent
  const ParametricTarget t = targets::gaussian_mean_shift(2);
  Matrix L(2, 2), dL(2, 2);
  L << 1.2, 0.0, 0.3, 0.9;
  dL << 0.5, 0.0, -0.2, 1.0;
  const ProposalKernel k = ProposalKernel::gaussian_rw(L);
  std::mt19937_64 gen(3);
  std::normal_distribution<double> normal;
  const double theta = 0.3, h = 1e-5;
  int checked = 0;
  while (checked < 1000) {
    const Vector x = vec({normal(gen), normal(gen)});
    const Vector dx = vec({normal(gen), normal(gen)});
    const Vector z = vec({normal(gen), normal(gen)});
    auto alpha_at = [&](double e) {
      const Vector xe = x + e * dx;
      const Vector xpe = xe + (L + e * dL) * z;
      return std::exp(std::min(0.0, t.log_g(theta + e, xpe) - t.log_g(theta + e, xe)));
    };
    const AugmentedStep s = make_step(t, k, theta, x, x + L * z, 0.5, z);
    if (s.log_alpha > -1e-3) continue;  // stay away from the kink
    const double fd = (alpha_at(h) - alpha_at(-h)) / (2 * h);
    const double total = extended_weight(t, theta, s, dx, proposal_tangent(dx, s, dL)) * decision_sign(s);
    EXPECT_NEAR(total, fd, 1e-3 * std::max(std::abs(fd), 1e-3));
    ++checked;
  }
}

// ---------------------------------------------------------------- estimator

TEST(Estimator, TwoPointBernoulliProposal) {
  const GradientEstimate g =
      estimate_gradient(targets::two_point(), ProposalKernel::independence_bernoulli(0.3), Functional::coordinate(0),
                        config(200'000, 0, 1, 0.0, vec({0.0})), EstimatorOptions{});
  EXPECT_GT(g.std_error, 0.0);
  EXPECT_NEAR(g.value, 0.25, 4.0 * g.std_error);
  EXPECT_EQ(g.n_chains, 4);
  EXPECT_EQ(g.per_chain.size(), 4u);
}

TEST(Estimator, TwoPointFlipAwayFromTheKink) {
  const GradientEstimate g = estimate_gradient(targets::two_point(), ProposalKernel::flip(), Functional::coordinate(0),
                                               config(200'000, 0, 2, 0.5, vec({0.0})), EstimatorOptions{});
  EXPECT_GT(g.std_error, 0.0);
  EXPECT_NEAR(g.value, sigmoid_derivative(0.5), 4.0 * g.std_error);
}

TEST(Estimator, GaussianMeanShift) {
  // 16 chains keep the standard error itself well estimated
  EstimatorOptions o;
  o.n_chains = 16;
  const GradientEstimate g =
      estimate_gradient(targets::gaussian_mean_shift(1), ProposalKernel::gaussian_rw(1, 2.38),
                        Functional::coordinate(0), config(200'000, 1000, 3, 0.0, vec({0.0})), o);
  EXPECT_NEAR(g.value, 1.0, 4.0 * g.std_error);
  EXPECT_LT(g.std_error, 0.05);
  EXPECT_GT(g.mean_meeting_time, 0.0);
}

TEST(Estimator, ThetaFreeTargetIsExactlyZero) {
  const GradientReport r = estimate_gradients(targets::standard_gaussian(2), ProposalKernel::gaussian_rw(2, 1.0),
                                              Functional::coordinates(2), config(20'000, 0, 4, 0.0, Vector::Zero(2)),
                                              EstimatorOptions{});
  for (const ChainResult& c : r.chains) EXPECT_EQ(c.spawned, 0);
  EXPECT_EQ(r.at(0).value, 0.0);
  EXPECT_EQ(r.at(1).value, 0.0);
}

TEST(Estimator, ValueIsMeanOfPerChain) {
  const GradientEstimate g =
      estimate_gradient(targets::gaussian_mean_shift(1), ProposalKernel::gaussian_rw(1, 1.0),
                        Functional::coordinate(0), config(5000, 0, 5, 0.0, vec({0.0})), EstimatorOptions{});
  double m = 0.0;
  for (double v : g.per_chain) m += v / g.per_chain.size();
  EXPECT_DOUBLE_EQ(g.value, m);
  EXPECT_GE(g.std_error, 0.0);
}

TEST(Estimator, PruningLeavesPrimalUntouched) {
  const ParametricTarget t = targets::two_point();
  const ProposalKernel k = ProposalKernel::independence_bernoulli(0.3);
  const ChainConfig c = config(50'000, 0, 7, 0.0, vec({0.0}));
  EstimatorOptions o;
  o.keep_samples = true;
  const ChainResult full = run_dmh_chain(t, k, Functional::coordinate(0), c, o, 11);
  o.pruning_prob = 0.2;
  const ChainResult pruned = run_dmh_chain(t, k, Functional::coordinate(0), c, o, 11);
  EXPECT_EQ(full.samples, pruned.samples);
  EXPECT_EQ(full.primal_mean, pruned.primal_mean);
  EXPECT_LT(pruned.spawned, full.spawned);
}

TEST(Estimator, PruningIsUnbiased) {
  const ParametricTarget t = targets::two_point();
  const ProposalKernel k = ProposalKernel::independence_bernoulli(0.3);
  std::vector<GradientEstimate> est;
  for (double p : {1.0, 0.5, 0.2}) {
    EstimatorOptions o;
    o.pruning_prob = p;
    est.push_back(estimate_gradient(t, k, Functional::coordinate(0), config(100'000, 0, 8, 0.0, vec({0.0})), o));
    EXPECT_NEAR(est.back().value, 0.25, 4.0 * est.back().std_error) << "p = " << p;
  }
  for (std::size_t i = 0; i < est.size(); ++i) {
    for (std::size_t j = i + 1; j < est.size(); ++j) {
      const double combined = std::hypot(est[i].std_error, est[j].std_error);
      EXPECT_LT(std::abs(est[i].value - est[j].value), 4.0 * combined);
    }
  }
}

TEST(Estimator, HorizonBeyondRunLengthChangesNothing) {
  const ParametricTarget t = targets::gaussian_mean_shift(1);
  const ProposalKernel k = ProposalKernel::gaussian_rw(1, 2.0);
  const ChainConfig c = config(20'000, 0, 9, 0.0, vec({0.0}));
  EstimatorOptions o;
  const ChainResult unbounded = run_dmh_chain(t, k, Functional::coordinate(0), c, o, 3);
  o.max_horizon = 20'001;
  const ChainResult capped = run_dmh_chain(t, k, Functional::coordinate(0), c, o, 3);
  EXPECT_EQ(unbounded.gradient, capped.gradient);
  EXPECT_EQ(capped.truncated, 0);
  o.max_horizon = 2;
  const ChainResult short_h = run_dmh_chain(t, k, Functional::coordinate(0), c, o, 3);
  EXPECT_GT(short_h.truncated, 0);
}

TEST(Estimator, ThreadCountDoesNotChangeResults) {
  const ParametricTarget t = targets::gaussian_mean_shift(1);
  const ProposalKernel k = ProposalKernel::gaussian_rw(1, 2.0);
  EstimatorOptions o;
  o.n_chains = 3;
  const GradientEstimate a = estimate_gradient(t, k, Functional::coordinate(0), config(5000, 0, 1, 0.0, vec({0.0})), o);
  o.threads = 3;
  const GradientEstimate b = estimate_gradient(t, k, Functional::coordinate(0), config(5000, 0, 1, 0.0, vec({0.0})), o);
  EXPECT_EQ(a.per_chain, b.per_chain);
}

TEST(Estimator, NonFiniteWeightIsAnError) {
  const ParametricTarget t("explosive", 1, [](double, const Vector& x) { return -0.5 * x[0] * x[0]; },
                           [](double, const Vector& x) { return x[0] > 0 ? 1e308 : -1e308; });
  EXPECT_THROW(estimate_gradient(t, ProposalKernel::gaussian_rw(1, 1.0), Functional::coordinate(0),
                                 config(1000, 0, 1, 0.0, vec({0.1})), EstimatorOptions{}),
               NumericalError);
}

TEST(Estimator, RejectsBadOptions) {
  const ParametricTarget t = targets::gaussian_mean_shift(1);
  const ProposalKernel k = ProposalKernel::gaussian_rw(1, 1.0);
  EstimatorOptions o;
  o.pruning_prob = 0.0;
  EXPECT_THROW(estimate_gradient(t, k, Functional::coordinate(0), config(100, 0, 1, 0.0, vec({0.0})), o),
               std::invalid_argument);
  o.pruning_prob = 1.0;
  o.pathwise = PathwiseSpec{{Matrix::Identity(1, 1)}, Matrix()};
  EXPECT_THROW(estimate_gradient(t, ProposalKernel::independence_gaussian(Vector::Zero(1), Matrix::Identity(1, 1)),
                                 Functional::coordinate(0), config(100, 0, 1, 0.0, vec({0.0})), o),
               std::invalid_argument);
}

TEST(Estimator, PathwiseMeanDerivativeUnderScaleChange) {
  // the proposal scale does not change the stationary law, so dE[X^2]/dsigma = 0
  const double s = 1.5;
  const ParametricTarget t(
      "scaled_normal", 1, [s](double, const Vector& x) { return -0.5 * x[0] * x[0] / (s * s); },
      [](double, const Vector&) { return 0.0; }, [s](double, const Vector& x) -> Vector { return -x / (s * s); });
  Functional sq = Functional::scalar("x2", [](const Vector& x) { return x[0] * x[0]; });
  sq.single_tangent = [](const Vector& x, const Vector& dx) { return Vector::Constant(1, 2 * x[0] * dx[0]); };
  EstimatorOptions o;
  o.pathwise = PathwiseSpec{{Matrix::Identity(1, 1)}, Matrix()};
  const GradientEstimate g = estimate_gradient(t, ProposalKernel::gaussian_rw(1, 2.38 * s), sq,
                                               config(100'000, 1000, 10, 0.0, vec({0.0})), o);
  EXPECT_NEAR(g.value, 0.0, 4.0 * g.std_error + 1e-3);
}
