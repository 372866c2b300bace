#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>

#include "dmh/rng.hpp"

namespace dmh {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unnormalized log-density log g_theta(x) over R^dim, together with its
/// theta-score and (optionally) its x-gradient.
///
/// Targets are immutable once built; a single instance can be shared by any
/// number of concurrently running chains.
class ParametricTarget {
 public:
  using LogDensityFn = std::function<double(double theta, const Vector& x)>;
  using ScoreFn = std::function<double(double theta, const Vector& x)>;
  using GradientFn = std::function<Vector(double theta, const Vector& x)>;

  ParametricTarget(std::string name, int dim, LogDensityFn log_g, ScoreFn score,
                   GradientFn grad_x = {})
      : name_(std::move(name)),
        dim_(dim),
        log_g_(std::move(log_g)),
        score_(std::move(score)),
        grad_x_(std::move(grad_x)) {
    if (dim_ <= 0) throw std::invalid_argument("target dimension must be positive");
    if (!log_g_ || !score_) throw std::invalid_argument("target needs log_g and score_theta");
  }

  const std::string& name() const noexcept { return name_; }
  int dim() const noexcept { return dim_; }
  bool has_grad_x() const noexcept { return static_cast<bool>(grad_x_); }

  /// May return -inf (zero density).
  double log_g(double theta, const Vector& x) const {
    check_dim(x);
    return log_g_(theta, x);
  }

  double score_theta(double theta, const Vector& x) const {
    check_dim(x);
    const double s = score_(theta, x);
    if (!std::isfinite(s)) throw NumericalError("score_theta is not finite in target " + name_);
    return s;
  }

  Vector grad_x(double theta, const Vector& x) const {
    check_dim(x);
    if (!grad_x_) throw std::logic_error("target " + name_ + " provides no x-gradient");
    return grad_x_(theta, x);
  }

 private:
  void check_dim(const Vector& x) const {
    if (x.size() != dim_) {
      throw DimensionError("target " + name_ + " expects dimension " + std::to_string(dim_) +
                           ", got " + std::to_string(x.size()));
    }
  }

  std::string name_;
  int dim_;
  LogDensityFn log_g_;
  ScoreFn score_;
  GradientFn grad_x_;
};

/// Builds a target whose theta-score is a central finite difference of log_g.
/// Intended for user targets without a hand-coded score.
inline ParametricTarget with_finite_difference_score(std::string name, int dim,
                                                     ParametricTarget::LogDensityFn log_g,
                                                     double step = 1e-5) {
  auto score = [log_g, step](double theta, const Vector& x) {
    return (log_g(theta + step, x) - log_g(theta - step, x)) / (2.0 * step);
  };
  return ParametricTarget(std::move(name), dim, std::move(log_g), std::move(score));
}

namespace targets {

/// N(theta * 1, I) in d dimensions; theta shifts every coordinate's mean.
inline ParametricTarget gaussian_mean_shift(int d) {
  return ParametricTarget(
      "gaussian_mean_shift", d,
      [](double theta, const Vector& x) { return -0.5 * (x.array() - theta).square().sum(); },
      [](double theta, const Vector& x) { return (x.array() - theta).sum(); },
      [](double theta, const Vector& x) -> Vector { return -(x.array() - theta).matrix(); });
}

/// Standard normal in d dimensions, independent of theta.
inline ParametricTarget standard_gaussian(int d) {
  return ParametricTarget(
      "standard_gaussian", d, [](double, const Vector& x) { return -0.5 * x.squaredNorm(); },
      [](double, const Vector&) { return 0.0; }, [](double, const Vector& x) -> Vector { return -x; });
}

/// Two-point law on the real states {0, 1}: g(0) = 1, g(1) = e^theta.
inline ParametricTarget two_point() {
  return ParametricTarget(
      "two_point", 1,
      [](double theta, const Vector& x) {
        if (x[0] == 0.0) return 0.0;
        if (x[0] == 1.0) return theta;
        return kNegInf;
      },
      [](double, const Vector& x) { return x[0] == 1.0 ? 1.0 : 0.0; });
}

/// Zero-mean bivariate Gaussian with unit variances and correlation rho; theta-free.
inline ParametricTarget correlated_gaussian(double rho) {
  if (!(std::abs(rho) < 1.0)) throw std::invalid_argument("correlation must lie in (-1, 1)");
  const double inv = 1.0 / (1.0 - rho * rho);
  return ParametricTarget(
      "correlated_gaussian", 2,
      [inv, rho](double, const Vector& x) {
        return -0.5 * inv * (x[0] * x[0] - 2.0 * rho * x[0] * x[1] + x[1] * x[1]);
      },
      [](double, const Vector&) { return 0.0; },
      [inv, rho](double, const Vector& x) -> Vector {
        Vector g(2);
        g[0] = -inv * (x[0] - rho * x[1]);
        g[1] = -inv * (x[1] - rho * x[0]);
        return g;
      });
}

/// "Dual moon" stand-in: equal mixture of two unit-variance Gaussian bumps centred at
/// +/-(1.25, 1.25), i.e. a two-mode landscape rotated 45 degrees. Marginal standard
/// deviation is 1.6 per coordinate. Theta-free.
inline ParametricTarget dual_moon() {
  constexpr double c = 1.25;
  auto log_g = [](double, const Vector& x) {
    const double a = -0.5 * ((x[0] - c) * (x[0] - c) + (x[1] - c) * (x[1] - c));
    const double b = -0.5 * ((x[0] + c) * (x[0] + c) + (x[1] + c) * (x[1] + c));
    const double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
  };
  auto grad = [](double, const Vector& x) -> Vector {
    const double a = -0.5 * ((x[0] - c) * (x[0] - c) + (x[1] - c) * (x[1] - c));
    const double b = -0.5 * ((x[0] + c) * (x[0] + c) + (x[1] + c) * (x[1] + c));
    // responsibility of the +c bump
    const double w = 1.0 / (1.0 + std::exp(b - a));
    Vector g(2);
    g[0] = w * (c - x[0]) + (1.0 - w) * (-c - x[0]);
    g[1] = w * (c - x[1]) + (1.0 - w) * (-c - x[1]);
    return g;
  };
  return ParametricTarget("dual_moon", 2, log_g, [](double, const Vector&) { return 0.0; }, grad);
}

/// log g(x1, x2) = -50 (x2 - x1^2)^2 - 5/2 x1^2. Theta-free.
inline ParametricTarget rosenbrock() {
  return ParametricTarget(
      "rosenbrock", 2,
      [](double, const Vector& x) {
        const double r = x[1] - x[0] * x[0];
        return -50.0 * r * r - 2.5 * x[0] * x[0];
      },
      [](double, const Vector&) { return 0.0; },
      [](double, const Vector& x) -> Vector {
        const double r = x[1] - x[0] * x[0];
        Vector g(2);
        g[0] = 200.0 * r * x[0] - 5.0 * x[0];
        g[1] = -100.0 * r;
        return g;
      });
}

}  // namespace targets
}  // namespace dmh
