#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>

#include "dmh/model.hpp"
#include "dmh/rng.hpp"

namespace dmh {

/// Vector-valued performance functional over single states (lag 0) or over
/// consecutive pairs (lag 1). The optional tangent maps give the directional
/// derivative of f along state tangents; they are needed only in pathwise mode.
struct Functional {
  using SingleFn = std::function<Vector(const Vector& x)>;
  using PairFn = std::function<Vector(const Vector& x_k, const Vector& x_k1)>;
  using SingleTangentFn = std::function<Vector(const Vector& x, const Vector& dx)>;
  using PairTangentFn = std::function<Vector(const Vector& x_k, const Vector& x_k1,
                                             const Vector& dx_k, const Vector& dx_k1)>;

  std::string name;
  int lag = 0;
  int outputs = 1;
  SingleFn single;
  PairFn pair;
  SingleTangentFn single_tangent;
  PairTangentFn pair_tangent;

  bool has_tangent() const {
    return lag == 0 ? static_cast<bool>(single_tangent) : static_cast<bool>(pair_tangent);
  }

  Vector value(const Vector& x) const {
    if (lag != 0) throw std::logic_error("functional " + name + " needs a state pair");
    return single(x);
  }
  Vector value(const Vector& x_k, const Vector& x_k1) const {
    if (lag != 1) throw std::logic_error("functional " + name + " takes a single state");
    return pair(x_k, x_k1);
  }

  /// f(x) with a user scalar function.
  static Functional scalar(std::string name, std::function<double(const Vector&)> f) {
    Functional fn;
    fn.name = std::move(name);
    fn.single = [f = std::move(f)](const Vector& x) { return Vector::Constant(1, f(x)); };
    return fn;
  }

  static Functional constant(double c) {
    Functional fn;
    fn.name = "constant";
    fn.single = [c](const Vector&) { return Vector::Constant(1, c); };
    fn.single_tangent = [](const Vector&, const Vector&) { return Vector::Zero(1); };
    return fn;
  }

  /// f(x) = x[i].
  static Functional coordinate(int i) {
    Functional fn;
    fn.name = "x" + std::to_string(i);
    fn.single = [i](const Vector& x) { return Vector::Constant(1, x[i]); };
    fn.single_tangent = [i](const Vector&, const Vector& dx) { return Vector::Constant(1, dx[i]); };
    return fn;
  }

  /// f(x) = x, one output per coordinate.
  static Functional coordinates(int dim) {
    Functional fn;
    fn.name = "coordinates";
    fn.outputs = dim;
    fn.single = [](const Vector& x) { return x; };
    fn.single_tangent = [](const Vector&, const Vector& dx) { return dx; };
    return fn;
  }

  /// f(x_k, x_k1) = x_k[i] * x_k1[j].
  static Functional lag1_product(int i, int j) {
    Functional fn;
    fn.name = "lag1_product";
    fn.lag = 1;
    fn.pair = [i, j](const Vector& a, const Vector& b) { return Vector::Constant(1, a[i] * b[j]); };
    fn.pair_tangent = [i, j](const Vector& a, const Vector& b, const Vector& da, const Vector& db) {
      return Vector::Constant(1, da[i] * b[j] + a[i] * db[j]);
    };
    return fn;
  }

  /// All d*d lag-1 cross products; output i*d + j is x_k[i] * x_k1[j].
  static Functional lag1_cross_products(int dim) {
    Functional fn;
    fn.name = "lag1_cross_products";
    fn.lag = 1;
    fn.outputs = dim * dim;
    fn.pair = [dim](const Vector& a, const Vector& b) {
      Vector out(dim * dim);
      for (int i = 0; i < dim; ++i)
        for (int j = 0; j < dim; ++j) out[i * dim + j] = a[i] * b[j];
      return out;
    };
    fn.pair_tangent = [dim](const Vector& a, const Vector& b, const Vector& da, const Vector& db) {
      Vector out(dim * dim);
      for (int i = 0; i < dim; ++i)
        for (int j = 0; j < dim; ++j) out[i * dim + j] = da[i] * b[j] + a[i] * db[j];
      return out;
    };
    return fn;
  }
};

/// f(y_k, y_k1) - f(x_k, x_k1) for a lag-1 functional.
inline Vector pair_diff(const Functional& f, const Vector& y_k, const Vector& y_k1,
                        const Vector& x_k, const Vector& x_k1) {
  if (f.lag != 1) throw std::invalid_argument("pair_diff needs a lag-1 functional");
  return f.value(y_k, y_k1) - f.value(x_k, x_k1);
}

/// Empirical lag-1 cross-covariance C = mean(X_k X_{k+1}^T) - m m^T of a sample path
/// (rows are states) and its determinant. In 1-D, det == C(0,0) == gamma_1.
struct Autocovariance {
  Matrix cross;
  double determinant = 0.0;

  double scalar() const { return cross(0, 0); }
};

inline Autocovariance autocov_objective(const Matrix& samples, int lag = 1) {
  if (lag != 1) throw std::invalid_argument("only lag 1 is supported");
  const Eigen::Index n = samples.rows();
  if (n < 2) throw std::invalid_argument("autocovariance needs at least 2 samples");
  const Vector mean = samples.colwise().mean().transpose();
  const Matrix lead = samples.topRows(n - 1);
  const Matrix trail = samples.bottomRows(n - 1);
  Autocovariance out;
  out.cross = lead.transpose() * trail / static_cast<double>(n - 1) - mean * mean.transpose();
  out.determinant = out.cross.determinant();
  return out;
}

/// Jacobi's formula: d det(C) = det(C) tr(C^-1 dC).
inline double det_gradient_assemble(const Matrix& C, const Matrix& dC) {
  if (C.rows() != C.cols() || dC.rows() != C.rows() || dC.cols() != C.cols()) {
    throw DimensionError("det_gradient_assemble needs matching square matrices");
  }
  Eigen::FullPivLU<Matrix> lu(C);
  if (!lu.isInvertible()) throw NumericalError("cross-covariance matrix is singular");
  return lu.determinant() * lu.solve(dC).trace();
}

}  // namespace dmh
