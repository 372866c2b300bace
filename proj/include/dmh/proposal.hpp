#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "dmh/model.hpp"
#include "dmh/rng.hpp"

namespace dmh {

/// A draw from q(.|x). `z` holds the standard-normal increment for Gaussian kernels
/// (x_prop = x + L z for the random walk) and is empty otherwise.
struct Proposal {
  Vector x_prop;
  Vector z;
};

/// Result of the reparameterized coupled proposal y_prop = q~(eps, x, x_prop, y).
/// `met` is set only on the branch that copies x_prop verbatim, so met implies bitwise
/// equality of y_prop and x_prop.
struct CouplingOutcome {
  Vector y_proposal;
  bool met = false;
};

class ProposalKernel {
 public:
  enum class Kind { GaussianRandomWalk, IndependenceGaussian, IndependenceBernoulli, Flip };

  /// x_prop = x + L z, z ~ N(0, I). L must be lower triangular with positive diagonal.
  static ProposalKernel gaussian_rw(Matrix L) {
    ProposalKernel k(Kind::GaussianRandomWalk, static_cast<int>(L.rows()));
    k.set_scale(std::move(L));
    return k;
  }

  static ProposalKernel gaussian_rw(int dim, double sigma) {
    return gaussian_rw(Matrix::Identity(dim, dim) * sigma);
  }

  /// x_prop ~ N(mean, L L^T) regardless of the current state.
  static ProposalKernel independence_gaussian(Vector mean, Matrix L) {
    ProposalKernel k(Kind::IndependenceGaussian, static_cast<int>(mean.size()));
    if (L.rows() != mean.size()) throw DimensionError("independence base: scale/mean mismatch");
    k.set_scale(std::move(L));
    k.mean_ = std::move(mean);
    return k;
  }

  /// x_prop = 1 with probability p, 0 otherwise, on the real states {0, 1}.
  static ProposalKernel independence_bernoulli(double p) {
    if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("bernoulli proposal needs p in (0, 1)");
    ProposalKernel k(Kind::IndependenceBernoulli, 1);
    k.p_one_ = p;
    return k;
  }

  /// Deterministic x_prop = 1 - x on {0, 1}.
  static ProposalKernel flip() { return ProposalKernel(Kind::Flip, 1); }

  Kind kind() const noexcept { return kind_; }
  int dim() const noexcept { return dim_; }
  const Matrix& scale() const noexcept { return L_; }

  bool is_independence() const noexcept {
    return kind_ == Kind::IndependenceGaussian || kind_ == Kind::IndependenceBernoulli;
  }

  /// q(x|x') = q(x'|x) for all pairs; the q-terms of the acceptance ratio cancel.
  bool symmetric() const noexcept {
    return kind_ == Kind::GaussianRandomWalk || kind_ == Kind::Flip;
  }

  /// log q(to | from).
  double log_q(const Vector& to, const Vector& from) const {
    check(to);
    check(from);
    switch (kind_) {
      case Kind::GaussianRandomWalk:
        return gaussian_log_density(whiten(to - from));
      case Kind::IndependenceGaussian:
        return gaussian_log_density(whiten(to - mean_));
      case Kind::IndependenceBernoulli:
        if (to[0] == 1.0) return std::log(p_one_);
        if (to[0] == 0.0) return std::log1p(-p_one_);
        return kNegInf;
      case Kind::Flip:
        return to[0] == 1.0 - from[0] ? 0.0 : kNegInf;
    }
    return kNegInf;
  }

  Proposal propose(Rng& rng, const Vector& x) const {
    check(x);
    switch (kind_) {
      case Kind::GaussianRandomWalk: {
        Vector z = rng.normal_vector(dim_);
        Vector xp = x + L_ * z;
        return {std::move(xp), std::move(z)};
      }
      case Kind::IndependenceGaussian: {
        Vector z = rng.normal_vector(dim_);
        Vector xp = mean_ + L_ * z;
        return {std::move(xp), std::move(z)};
      }
      case Kind::IndependenceBernoulli: {
        Vector xp(1);
        xp[0] = rng.uniform() <= p_one_ ? 1.0 : 0.0;
        return {std::move(xp), Vector()};
      }
      case Kind::Flip: {
        Vector xp(1);
        xp[0] = 1.0 - x[0];
        return {std::move(xp), Vector()};
      }
    }
    throw std::logic_error("unknown proposal kind");
  }

  Vector whiten(const Vector& v) const {
    return L_.triangularView<Eigen::Lower>().solve(v);
  }
  Vector unwhiten(const Vector& v) const { return L_.triangularView<Eigen::Lower>() * v; }

  /// Coupled proposal for a second chain at y, given the primal's (x, x_prop).
  /// The only randomness is one uniform, drawn from `stream` on the random-walk
  /// reflection branch when y != x; the y == x case returns x_prop without drawing.
  template <class UniformStream>
  CouplingOutcome couple(UniformStream& stream, const Vector& x, const Vector& x_prop,
                         const Vector& y) const {
    if (y == x) return {x_prop, true};
    switch (kind_) {
      case Kind::IndependenceGaussian:
      case Kind::IndependenceBernoulli:
        return {x_prop, true};
      case Kind::Flip: {
        Vector yp(1);
        yp[0] = 1.0 - y[0];
        return {std::move(yp), false};
      }
      case Kind::GaussianRandomWalk:
        return reflection_maximal(stream.uniform(), x, x_prop, y);
    }
    throw std::logic_error("unknown proposal kind");
  }

  /// Reflection-maximal coupling with an explicit uniform `epsilon`, in whitened
  /// coordinates: meet if eps <= phi(z - d) / phi(z) with z = L^-1 (x_prop - x) and
  /// d = L^-1 (y - x); otherwise reflect z across the hyperplane orthogonal to d.
  CouplingOutcome reflection_maximal(double epsilon, const Vector& x, const Vector& x_prop,
                                     const Vector& y) const {
    if (kind_ != Kind::GaussianRandomWalk) {
      throw std::logic_error("reflection coupling needs a Gaussian random-walk kernel");
    }
    if (y == x) return {x_prop, true};
    const Vector d = whiten(y - x);
    const Vector z = whiten(x_prop - x);
    const double log_ratio = 0.5 * (z.squaredNorm() - (z - d).squaredNorm());
    // ties go to the meet branch
    if (std::log(epsilon) <= log_ratio) return {x_prop, true};
    const Vector z_reflected = z - (2.0 * d.dot(z) / d.squaredNorm()) * d;
    return {y + unwhiten(z_reflected), false};
  }

 private:
  ProposalKernel(Kind kind, int dim) : kind_(kind), dim_(dim) {
    if (dim_ <= 0) throw std::invalid_argument("proposal dimension must be positive");
  }

  void set_scale(Matrix L) {
    if (L.rows() != L.cols() || L.rows() != dim_) throw DimensionError("scale must be dim x dim");
    for (int i = 0; i < dim_; ++i) {
      if (!(L(i, i) > 0.0) || !std::isfinite(L(i, i))) {
        throw std::invalid_argument("proposal scale needs a strictly positive diagonal");
      }
      for (int j = i + 1; j < dim_; ++j) {
        if (L(i, j) != 0.0) throw std::invalid_argument("proposal scale must be lower triangular");
      }
    }
    L_ = std::move(L);
    log_det_L_ = L_.diagonal().array().log().sum();
  }

  double gaussian_log_density(const Vector& w) const {
    return -0.5 * w.squaredNorm() - log_det_L_ -
           0.5 * dim_ * std::log(2.0 * std::numbers::pi);
  }

  void check(const Vector& v) const {
    if (v.size() != dim_) {
      throw DimensionError("proposal expects dimension " + std::to_string(dim_) + ", got " +
                           std::to_string(v.size()));
    }
  }

  Kind kind_;
  int dim_;
  Matrix L_;
  double log_det_L_ = 0.0;
  Vector mean_;
  double p_one_ = 0.5;
};

}  // namespace dmh
