#pragma once

// Bayesian linear regression with a power-scaled prior:
//   p_theta(phi | data) ∝ p(data | phi) * p(phi)^(2^theta)
// over phi = (beta_0, beta_1..beta_K, log sigma).

#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmh/chain.hpp"
#include "dmh/estimator.hpp"
#include "dmh/functionals.hpp"
#include "dmh/model.hpp"
#include "dmh/proposal.hpp"

namespace dmh::bayes {

struct RegressionData {
  std::vector<std::string> covariate_names;
  std::string response_name;
  Matrix X;  // raw covariates, n x K
  Vector y;
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\"");
  const auto e = s.find_last_not_of(" \t\r\"");
  if (b == std::string::npos) return "";
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double sample_sd(const Eigen::Ref<const Vector>& v) {
  const double mu = v.mean();
  return std::sqrt((v.array() - mu).square().sum() / static_cast<double>(v.size() - 1));
}

}  // namespace detail

/// Reads a numeric CSV with one header row. `response` names the response column;
/// every other column becomes a covariate, in file order.
inline RegressionData load_csv(const std::string& path, const std::string& response) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("dataset " + path + " is empty");
  const std::vector<std::string> header = detail::split_csv_line(line);
  int resp = -1;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == response) resp = static_cast<int>(i);
  }
  if (resp < 0) throw std::runtime_error("response column '" + response + "' not found in " + path);

  RegressionData data;
  data.response_name = response;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (static_cast<int>(i) != resp) data.covariate_names.push_back(header[i]);
  }
  std::vector<std::vector<double>> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const std::vector<std::string> cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": expected " +
                               std::to_string(header.size()) + " columns");
    }
    std::vector<double> row;
    for (const std::string& c : cells) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(c, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != c.size() || c.empty()) {
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": non-numeric cell '" + c + "'");
      }
      row.push_back(v);
    }
    rows.push_back(std::move(row));
  }
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto K = static_cast<Eigen::Index>(data.covariate_names.size());
  if (n < 3) throw std::runtime_error("dataset " + path + " needs at least 3 rows");
  data.X.resize(n, K);
  data.y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index k = 0;
    for (std::size_t j = 0; j < header.size(); ++j) {
      if (static_cast<int>(j) == resp) {
        data.y[i] = rows[i][j];
      } else {
        data.X(i, k++) = rows[i][j];
      }
    }
  }
  return data;
}

enum class PriorSpec { Original, Adjusted };

inline PriorSpec parse_prior(const std::string& s) {
  if (s == "original") return PriorSpec::Original;
  if (s == "adjusted") return PriorSpec::Adjusted;
  throw std::invalid_argument("prior must be 'original' or 'adjusted', got '" + s + "'");
}

inline const char* to_string(PriorSpec p) { return p == PriorSpec::Original ? "original" : "adjusted"; }

struct ModelOptions {
  PriorSpec prior = PriorSpec::Original;
  bool power_scale_sigma = true;  // include the sigma prior in the scaled block
  bool theta_dependent = true;    // false fixes the prior power at 1
  double intercept_scale = 9.2;
  double sigma_scale = 9.2;
  double nu = 3.0;
};

/// Centered regression problem with its prior settings. Immutable once built.
class RegressionModel {
 public:
  RegressionModel(const RegressionData& data, ModelOptions options) : options_(options) {
    const Eigen::Index n = data.X.rows();
    const Eigen::Index K = data.X.cols();
    if (data.y.size() != n) throw DimensionError("response length does not match design rows");
    if (n < 3) throw std::invalid_argument("need at least 3 observations");
    names_ = data.covariate_names;
    if (static_cast<Eigen::Index>(names_.size()) != K) {
      names_.clear();
      for (Eigen::Index k = 0; k < K; ++k) names_.push_back("x" + std::to_string(k + 1));
    }
    X_ = data.X.rowwise() - data.X.colwise().mean();
    y_ = data.y;
    response_mean_ = y_.mean();
    response_scale_ = detail::sample_sd(y_);
    covariate_scales_.resize(K);
    for (Eigen::Index k = 0; k < K; ++k) {
      covariate_scales_[k] = detail::sample_sd(X_.col(k));
      if (!(covariate_scales_[k] > 0.0)) throw std::invalid_argument("covariate " + names_[k] + " is constant");
    }
    coef_sd_ = Vector::Ones(K);
    if (options_.prior == PriorSpec::Adjusted) {
      coef_sd_ = (2.5 * response_scale_) * covariate_scales_.cwiseInverse();
    }
    gram_ = X_.transpose() * X_;
    xty_ = X_.transpose() * y_;
    x_sum_ = X_.colwise().sum().transpose();
    yty_ = y_.squaredNorm();
    y_sum_ = y_.sum();
  }

  int n_obs() const { return static_cast<int>(X_.rows()); }
  int n_covariates() const { return static_cast<int>(X_.cols()); }
  int dim() const { return n_covariates() + 2; }
  const Matrix& X() const { return X_; }
  const Vector& y() const { return y_; }
  const ModelOptions& options() const { return options_; }
  double response_mean() const { return response_mean_; }
  double response_scale() const { return response_scale_; }
  const Vector& covariate_scales() const { return covariate_scales_; }
  const Vector& coefficient_prior_sd() const { return coef_sd_; }

  /// beta_0, covariate names, log_sigma.
  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out{"beta0"};
    out.insert(out.end(), names_.begin(), names_.end());
    out.push_back("log_sigma");
    return out;
  }

  double log_likelihood(const Vector& phi) const {
    check(phi);
    const Eigen::Index K = X_.cols();
    const double b0 = phi[0];
    const auto beta = phi.segment(1, K);
    const double log_sigma = phi[K + 1];
    const double n = static_cast<double>(X_.rows());
    // ||y - b0 - X beta||^2 from sufficient statistics
    const double rss = yty_ + n * b0 * b0 + beta.dot(gram_ * beta) - 2.0 * b0 * y_sum_ -
                       2.0 * beta.dot(xty_) + 2.0 * b0 * beta.dot(x_sum_);
    return -n * log_sigma - 0.5 * n * std::log(2.0 * std::numbers::pi) -
           0.5 * std::max(rss, 0.0) * std::exp(-2.0 * log_sigma);
  }

  /// Prior block that is raised to the power 2^theta.
  double log_prior_scaled(const Vector& phi) const {
    check(phi);
    double s = log_t(phi[0], response_mean_, options_.intercept_scale);
    const Eigen::Index K = X_.cols();
    for (Eigen::Index k = 0; k < K; ++k) s += log_normal(phi[1 + k], coef_sd_[k]);
    if (options_.power_scale_sigma) s += log_half_t(phi[K + 1]);
    return s;
  }

  /// Prior terms left unscaled (the sigma prior when it is excluded from scaling).
  double log_prior_fixed(const Vector& phi) const {
    check(phi);
    return options_.power_scale_sigma ? 0.0 : log_half_t(phi[X_.cols() + 1]);
  }

  double prior_power(double theta) const { return options_.theta_dependent ? std::exp2(theta) : 1.0; }

  double log_posterior(double theta, const Vector& phi) const {
    const double log_sigma = phi[X_.cols() + 1];
    return log_likelihood(phi) + prior_power(theta) * log_prior_scaled(phi) + log_prior_fixed(phi) +
           log_sigma;
  }

  double score(double theta, const Vector& phi) const {
    if (!options_.theta_dependent) return 0.0;
    return std::exp2(theta) * std::numbers::ln2 * log_prior_scaled(phi);
  }

 private:
  void check(const Vector& phi) const {
    if (phi.size() != X_.cols() + 2) {
      throw DimensionError("regression parameter vector must have length " + std::to_string(X_.cols() + 2));
    }
  }

  double log_t(double x, double loc, double scale) const {
    const double nu = options_.nu;
    const double z = (x - loc) / scale;
    return std::lgamma(0.5 * (nu + 1.0)) - std::lgamma(0.5 * nu) - 0.5 * std::log(nu * std::numbers::pi) -
           std::log(scale) - 0.5 * (nu + 1.0) * std::log1p(z * z / nu);
  }

  static double log_normal(double x, double sd) {
    const double z = x / sd;
    return -0.5 * z * z - std::log(sd) - 0.5 * std::log(2.0 * std::numbers::pi);
  }

  double log_half_t(double log_sigma) const {
    return std::numbers::ln2 + log_t(std::exp(log_sigma), 0.0, options_.sigma_scale);
  }

  ModelOptions options_;
  std::vector<std::string> names_;
  Matrix X_;
  Vector y_;
  double response_mean_ = 0.0;
  double response_scale_ = 1.0;
  Vector covariate_scales_;
  Vector coef_sd_;
  Matrix gram_;
  Vector xty_;
  Vector x_sum_;
  double yty_ = 0.0;
  double y_sum_ = 0.0;
};

/// The posterior as a target in theta (the power-scaling exponent).
inline ParametricTarget power_scaled_posterior(std::shared_ptr<const RegressionModel> model) {
  if (!model) throw std::invalid_argument("null regression model");
  const int d = model->dim();
  return ParametricTarget(
      "power_scaled_regression", d,
      [model](double theta, const Vector& phi) { return model->log_posterior(theta, phi); },
      [model](double theta, const Vector& phi) { return model->score(theta, phi); });
}

struct SyntheticTruth {
  RegressionData data;
  Vector beta;  // beta_0, beta_1..K on the raw (uncentered) covariates
  double sigma = 1.0;
};

/// Covariates with heterogeneous scales, coefficients drawn from the original prior,
/// sigma from the half-t prior truncated to [0.5, 5] so the data stay informative.
inline SyntheticTruth synthetic(int n_obs, int n_covariates, std::uint64_t seed) {
  if (n_obs < 3 || n_covariates < 1) throw std::invalid_argument("synthetic data needs n >= 3, K >= 1");
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> normal;
  std::student_t_distribution<double> t3(3.0);
  SyntheticTruth s;
  const int K = n_covariates;
  Vector scales(K);
  for (int k = 0; k < K; ++k) scales[k] = std::exp(0.5 * normal(gen));
  s.beta.resize(K + 1);
  s.beta[0] = 9.2 * t3(gen);
  for (int k = 1; k <= K; ++k) s.beta[k] = normal(gen);
  do {
    s.sigma = 9.2 * std::abs(t3(gen));
  } while (s.sigma < 0.5 || s.sigma > 5.0);
  s.data.response_name = "y";
  for (int k = 0; k < K; ++k) s.data.covariate_names.push_back("x" + std::to_string(k + 1));
  s.data.X.resize(n_obs, K);
  s.data.y.resize(n_obs);
  for (int i = 0; i < n_obs; ++i) {
    double mu = s.beta[0];
    for (int k = 0; k < K; ++k) {
      s.data.X(i, k) = scales[k] * normal(gen);
      mu += s.beta[k + 1] * s.data.X(i, k);
    }
    s.data.y[i] = mu + s.sigma * normal(gen);
  }
  return s;
}

/// OLS fit on the centered design: coefficient covariance sigma_hat^2 (A^T A)^-1 for
/// (beta_0, beta), and 1 / (2 (n - K - 1)) for log sigma.
struct OlsFit {
  Vector coefficients;  // beta_0, beta_1..K
  double sigma = 1.0;
  Matrix covariance;  // dim x dim including log sigma
};

inline OlsFit ols(const RegressionModel& model) {
  const Eigen::Index n = model.n_obs();
  const Eigen::Index K = model.n_covariates();
  if (n <= K + 1) throw std::invalid_argument("OLS needs more observations than coefficients");
  Matrix A(n, K + 1);
  A.col(0).setOnes();
  A.rightCols(K) = model.X();
  const Matrix ata = A.transpose() * A;
  Eigen::LLT<Matrix> llt(ata);
  if (llt.info() != Eigen::Success) throw NumericalError("design matrix is rank deficient");
  OlsFit fit;
  fit.coefficients = llt.solve(A.transpose() * model.y());
  const double dof = static_cast<double>(n - K - 1);
  const double s2 = (model.y() - A * fit.coefficients).squaredNorm() / dof;
  fit.sigma = std::sqrt(s2);
  fit.covariance = Matrix::Zero(K + 2, K + 2);
  fit.covariance.topLeftCorner(K + 1, K + 1) = s2 * llt.solve(Matrix::Identity(K + 1, K + 1));
  fit.covariance(K + 1, K + 1) = 1.0 / (2.0 * dof);
  return fit;
}

/// Random-walk scale: factor * chol(OLS covariance); factor defaults to 2.38 / sqrt(dim).
inline Matrix ols_preconditioner(const RegressionModel& model, double factor = 0.0) {
  const OlsFit fit = ols(model);
  if (factor <= 0.0) factor = 2.38 / std::sqrt(static_cast<double>(model.dim()));
  Eigen::LLT<Matrix> llt(fit.covariance);
  if (llt.info() != Eigen::Success) throw NumericalError("OLS covariance is not positive definite");
  return factor * Matrix(llt.matrixL());
}

struct SensitivityConfig {
  int n_chains = 4;
  std::int64_t n_steps = 350'000;
  std::int64_t burn_in = 100'000;
  std::uint64_t seed = 0;
  int threads = 1;
  double theta = 0.0;
  double scale_factor = 0.0;  // 0 selects 2.38 / sqrt(dim)
  double pruning_prob = 1.0;
  std::int64_t max_horizon = 0;
};

struct SensitivityResult {
  std::vector<std::string> names;
  std::vector<CrossChainMean> posterior_mean;
  std::vector<GradientEstimate> sensitivity;
  Matrix scale;
  double acceptance_rate = 0.0;
  std::int64_t truncated = 0;
};

/// d/dtheta of every posterior mean, from one vector-valued DMH run per chain.
inline SensitivityResult sensitivity_run(std::shared_ptr<const RegressionModel> model,
                                         const SensitivityConfig& cfg) {
  const ParametricTarget target = power_scaled_posterior(model);
  const int d = target.dim();
  SensitivityResult out;
  out.names = model->parameter_names();
  out.scale = ols_preconditioner(*model, cfg.scale_factor);
  const ProposalKernel kernel = ProposalKernel::gaussian_rw(out.scale);

  ChainConfig cc;
  cc.n_steps = cfg.n_steps;
  cc.burn_in = cfg.burn_in;
  cc.seed = cfg.seed;
  cc.theta = cfg.theta;
  cc.initial_state = Vector::Zero(d);
  EstimatorOptions opt;
  opt.n_chains = cfg.n_chains;
  opt.threads = cfg.threads;
  opt.pruning_prob = cfg.pruning_prob;
  opt.max_horizon = cfg.max_horizon;

  const GradientReport report = estimate_gradients(target, kernel, Functional::coordinates(d), cc, opt);
  out.posterior_mean = report.primal_means;
  for (int m = 0; m < d; ++m) out.sensitivity.push_back(report.estimates[m][0]);
  double acc = 0.0;
  for (const ChainResult& c : report.chains) acc += c.acceptance_rate;
  out.acceptance_rate = acc / static_cast<double>(report.chains.size());
  out.truncated = report.truncated;
  return out;
}

}  // namespace dmh::bayes
