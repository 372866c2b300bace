#pragma once

// Command implementations behind the dmh executable. Each command takes a parsed
// JSON config plus command-line overrides and returns the CSV text it produced.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmh/bayes.hpp"
#include "dmh/chain.hpp"
#include "dmh/diagnostics.hpp"
#include "dmh/estimator.hpp"
#include "dmh/model.hpp"
#include "dmh/optimize.hpp"
#include "dmh/proposal.hpp"

namespace dmh::cli {

using json = nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Command-line overrides applied on top of the config file.
struct RunFlags {
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  bool paper_scale = false;
  std::filesystem::path config_dir;  // base for relative dataset paths
};

struct CommandOutput {
  std::string csv;
  bool all_finite = true;
};

/// Typed access to one JSON object; every key must be consumed before finish().
class ConfigReader {
 public:
  ConfigReader(const json& j, std::string path) : j_(&j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(label() + " must be an object");
  }

  bool has(const std::string& key) const { return j_->contains(key); }

  template <class T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return require<T>(key);
  }

  template <class T>
  T require(const std::string& key) {
    if (!has(key)) throw ConfigError("missing key " + qualified(key));
    used_.insert(key);
    try {
      return j_->at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("wrong type for " + qualified(key));
    }
  }

  const json& raw(const std::string& key) {
    if (!has(key)) throw ConfigError("missing key " + qualified(key));
    used_.insert(key);
    return j_->at(key);
  }

  ConfigReader child(const std::string& key) { return ConfigReader(raw(key), qualified(key)); }

  void finish() const {
    for (const auto& item : j_->items()) {
      if (!used_.count(item.key())) throw ConfigError("unknown key " + qualified(item.key()));
    }
  }

 private:
  std::string label() const { return path_.empty() ? "config" : path_; }
  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* j_;
  std::string path_;
  std::set<std::string> used_;
};

inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline Matrix matrix_from_json(const json& j, const std::string& key) {
  if (!j.is_array() || j.empty()) throw ConfigError(key + " must be a non-empty array of rows");
  const auto n = static_cast<Eigen::Index>(j.size());
  Matrix m(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const json& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != n) {
      throw ConfigError(key + " must be square");
    }
    for (Eigen::Index k = 0; k < n; ++k) {
      if (!row[static_cast<std::size_t>(k)].is_number()) throw ConfigError(key + " entries must be numbers");
      m(i, k) = row[static_cast<std::size_t>(k)].get<double>();
    }
  }
  return m;
}

inline json matrix_to_json(const Matrix& m) {
  json out = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index k = 0; k < m.cols(); ++k) row.push_back(m(i, k));
    out.push_back(row);
  }
  return out;
}

// ---------------------------------------------------------------- targets

struct TargetSpec {
  std::string name = "standard_gaussian";
  int dim = 1;
  double rho = 0.5;

  static TargetSpec parse(ConfigReader r) {
    TargetSpec t;
    t.name = r.require<std::string>("name");
    if (t.name == "standard_gaussian" || t.name == "gaussian_mean_shift") {
      t.dim = r.get<int>("dim", 1);
      if (t.dim < 1) throw ConfigError("target.dim must be positive");
    } else if (t.name == "correlated_gaussian") {
      t.dim = 2;
      t.rho = r.get<double>("rho", 0.5);
    } else if (t.name == "two_point") {
      t.dim = 1;
    } else if (t.name == "dual_moon" || t.name == "rosenbrock") {
      t.dim = 2;
    } else {
      throw ConfigError("unknown target '" + t.name + "'");
    }
    r.finish();
    return t;
  }

  ParametricTarget build() const {
    if (name == "standard_gaussian") return targets::standard_gaussian(dim);
    if (name == "gaussian_mean_shift") return targets::gaussian_mean_shift(dim);
    if (name == "correlated_gaussian") return targets::correlated_gaussian(rho);
    if (name == "two_point") return targets::two_point();
    if (name == "dual_moon") return targets::dual_moon();
    return targets::rosenbrock();
  }

  json to_json() const {
    json j{{"name", name}, {"dim", dim}};
    if (name == "correlated_gaussian") j["rho"] = rho;
    return j;
  }
};

struct ProposalSpec {
  std::string kind = "gaussian_rw";
  Matrix scale;
  Vector mean;
  double p = 0.5;

  static ProposalSpec parse(ConfigReader r, int dim) {
    ProposalSpec s;
    s.kind = r.require<std::string>("kind");
    if (s.kind == "gaussian_rw" || s.kind == "independence_gaussian") {
      if (r.has("sigma") == r.has("scale")) {
        throw ConfigError("proposal needs exactly one of sigma or scale");
      }
      if (r.has("sigma")) {
        const double sigma = r.require<double>("sigma");
        if (!(sigma > 0.0)) throw ConfigError("proposal.sigma must be positive");
        s.scale = Matrix::Identity(dim, dim) * sigma;
      } else {
        s.scale = matrix_from_json(r.raw("scale"), "proposal.scale");
      }
      if (s.scale.rows() != dim) throw ConfigError("proposal scale does not match target dimension");
      if (s.kind == "independence_gaussian") {
        s.mean = Vector::Zero(dim);
        if (r.has("mean")) {
          const auto v = r.require<std::vector<double>>("mean");
          if (static_cast<int>(v.size()) != dim) throw ConfigError("proposal.mean has wrong length");
          s.mean = Eigen::Map<const Vector>(v.data(), dim);
        }
      }
    } else if (s.kind == "independence_bernoulli") {
      s.p = r.get<double>("p", 0.5);
    } else if (s.kind != "flip") {
      throw ConfigError("unknown proposal kind '" + s.kind + "'");
    }
    r.finish();
    return s;
  }

  ProposalKernel build() const {
    try {
      if (kind == "gaussian_rw") return ProposalKernel::gaussian_rw(scale);
      if (kind == "independence_gaussian") return ProposalKernel::independence_gaussian(mean, scale);
      if (kind == "independence_bernoulli") return ProposalKernel::independence_bernoulli(p);
      return ProposalKernel::flip();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("invalid proposal: ") + e.what());
    }
  }

  json to_json() const {
    json j{{"kind", kind}};
    if (kind == "gaussian_rw" || kind == "independence_gaussian") j["scale"] = matrix_to_json(scale);
    if (kind == "independence_gaussian") j["mean"] = std::vector<double>(mean.data(), mean.data() + mean.size());
    if (kind == "independence_bernoulli") j["p"] = p;
    return j;
  }
};

/// Settings shared by the estimator-driven commands.
struct RunSettings {
  int n_chains = 4;
  std::int64_t n_steps = 50'000;
  std::int64_t burn_in = 5'000;
  std::uint64_t seed = 0;
  int threads = 1;
  double pruning_prob = 1.0;
  std::int64_t max_horizon = 0;

  void read(ConfigReader& r) {
    n_chains = r.get<int>("n_chains", n_chains);
    n_steps = r.get<std::int64_t>("n_steps", n_steps);
    burn_in = r.get<std::int64_t>("burn_in", burn_in);
    seed = r.get<std::uint64_t>("seed", seed);
    threads = r.get<int>("threads", threads);
    pruning_prob = r.get<double>("pruning_prob", pruning_prob);
    max_horizon = r.get<std::int64_t>("max_horizon", max_horizon);
  }

  void apply(const RunFlags& flags) {
    if (flags.seed) seed = *flags.seed;
    if (flags.threads) threads = *flags.threads;
  }

  void validate() const {
    if (n_chains < 1) throw ConfigError("n_chains must be positive");
    if (n_steps < 1) throw ConfigError("n_steps must be positive");
    if (burn_in < 0 || burn_in >= n_steps) throw ConfigError("burn_in must lie in [0, n_steps)");
    if (threads < 1) throw ConfigError("threads must be positive");
    if (!(pruning_prob > 0.0 && pruning_prob <= 1.0)) throw ConfigError("pruning_prob must lie in (0, 1]");
    if (max_horizon < 0) throw ConfigError("max_horizon must be non-negative");
  }

  void write(json& j) const {
    j["n_chains"] = n_chains;
    j["n_steps"] = n_steps;
    j["burn_in"] = burn_in;
    j["seed"] = seed;
    j["threads"] = threads;
    j["pruning_prob"] = pruning_prob;
    j["max_horizon"] = max_horizon;
  }

  EstimatorOptions estimator_options() const {
    EstimatorOptions o;
    o.n_chains = n_chains;
    o.threads = threads;
    o.pruning_prob = pruning_prob;
    o.max_horizon = max_horizon;
    return o;
  }
};

/// "# key: value" lines for every resolved setting. Thread count is left out so that
/// output bytes do not depend on parallelism.
inline std::string config_header(const std::string& command, const json& resolved) {
  std::ostringstream os;
  os << "# dmh " << command << "\n";
  for (const auto& item : resolved.items()) {
    if (item.key() == "threads") continue;
    os << "# " << item.key() << ": " << item.value().dump() << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------- sweep

struct SweepRow {
  double sigma = 0.0;
  double objective = 0.0;
  double objective_se = 0.0;
  double derivative = 0.0;
  double derivative_se = 0.0;
  std::int64_t truncated = 0;
};

/// One grid point: random walk with scale sigma * I, objective det of the lag-1
/// cross-covariance (gamma_1 in 1-D) and its derivative in sigma, over n_chains chains.
/// All grid points reuse the same chain seeds.
inline SweepRow sweep_point(const ParametricTarget& target, double sigma, const RunSettings& s) {
  const int d = target.dim();
  const Matrix L = Matrix::Identity(d, d) * sigma;
  const std::vector<Matrix> dL{Matrix::Identity(d, d)};
  EstimatorOptions opt = s.estimator_options();
  const auto per_chain = run_parallel(s.n_chains, s.threads, [&](int c) {
    ChainConfig cc;
    cc.n_steps = s.n_steps;
    cc.burn_in = s.burn_in;
    cc.seed = chain_seed(s.seed, static_cast<std::uint64_t>(c));
    cc.initial_state = Vector::Zero(d);
    return lag_one_gradient(target, L, dL, cc, opt, alternative_key(s.seed, static_cast<std::uint64_t>(c)));
  });
  std::vector<double> obj, grad;
  SweepRow row;
  row.sigma = sigma;
  for (const LagOneGradient& g : per_chain) {
    obj.push_back(g.objective);
    grad.push_back(g.gradient[0]);
    row.truncated += g.truncated;
  }
  const CrossChainMean o = cross_chain_mean(obj);
  const CrossChainMean gr = cross_chain_mean(grad);
  row.objective = o.value;
  row.objective_se = o.std_error;
  row.derivative = gr.value;
  row.derivative_se = gr.std_error;
  return row;
}

struct SweepConfig {
  TargetSpec target;
  std::vector<double> sigmas;
  json grid;
  RunSettings run;

  static SweepConfig parse(const json& j, const RunFlags& flags) {
    ConfigReader r(j, "");
    SweepConfig c;
    c.run.n_chains = 20;
    c.run.n_steps = 50'000;
    c.run.burn_in = 5'000;
    c.target = TargetSpec::parse(r.child("target"));
    if (r.has("sigmas") == r.has("grid")) throw ConfigError("sweep needs exactly one of sigmas or grid");
    if (r.has("sigmas")) {
      c.sigmas = r.require<std::vector<double>>("sigmas");
      c.grid = c.sigmas;
    } else {
      ConfigReader g = r.child("grid");
      const double start = g.require<double>("start");
      const double stop = g.require<double>("stop");
      const double step = g.require<double>("step");
      g.finish();
      if (!(step > 0.0) || !(stop >= start)) throw ConfigError("grid needs step > 0 and stop >= start");
      const auto n = static_cast<int>(std::floor((stop - start) / step + 1e-9)) + 1;
      for (int i = 0; i < n; ++i) c.sigmas.push_back(start + i * step);
      c.grid = json{{"start", start}, {"stop", stop}, {"step", step}};
    }
    if (c.sigmas.empty()) throw ConfigError("sigma grid is empty");
    for (double s : c.sigmas) {
      if (!(s > 0.0) || !std::isfinite(s)) throw ConfigError("grid sigmas must be positive");
    }
    c.run.read(r);
    r.finish();
    if (flags.paper_scale) {
      c.run.n_chains = 100;
      c.run.n_steps = 250'000;
    }
    c.run.apply(flags);
    c.run.validate();
    return c;
  }

  json resolved() const {
    json j{{"target", target.to_json()}, {"sigmas", sigmas}, {"grid", grid}};
    run.write(j);
    return j;
  }
};

inline CommandOutput cmd_sweep(const json& config, const RunFlags& flags) {
  const SweepConfig c = SweepConfig::parse(config, flags);
  const ParametricTarget target = c.target.build();
  CommandOutput out;
  std::ostringstream os;
  os << config_header("sweep", c.resolved());
  os << "sigma,gamma1,gamma1_se,dgamma1_dsigma,dgamma1_se\n";
  std::int64_t truncated = 0;
  for (double sigma : c.sigmas) {
    const SweepRow row = sweep_point(target, sigma, c.run);
    truncated += row.truncated;
    for (double v : {row.objective, row.objective_se, row.derivative, row.derivative_se}) {
      if (!std::isfinite(v)) out.all_finite = false;
    }
    os << fmt(row.sigma) << ',' << fmt(row.objective) << ',' << fmt(row.objective_se) << ','
       << fmt(row.derivative) << ',' << fmt(row.derivative_se) << '\n';
  }
  os << "# truncated_alternatives: " << truncated << '\n';
  out.csv = os.str();
  return out;
}

// ---------------------------------------------------------------- tune

struct OptimizerSettings {
  double lr = 0.005;
  int iterations = 200;
  std::int64_t steps_per_iter = 50'000;
  std::int64_t burn_in = 5'000;
  bool diagonal_only = false;

  void read(ConfigReader r) {
    lr = r.get<double>("lr", lr);
    iterations = r.get<int>("iterations", iterations);
    steps_per_iter = r.get<std::int64_t>("steps_per_iter", steps_per_iter);
    burn_in = r.get<std::int64_t>("burn_in", burn_in);
    diagonal_only = r.get<bool>("diagonal_only", diagonal_only);
    r.finish();
  }

  void validate() const {
    if (!(lr >= 0.0)) throw ConfigError("optimizer.lr must be non-negative");
    if (iterations < 0) throw ConfigError("optimizer.iterations must be non-negative");
    if (steps_per_iter < 1) throw ConfigError("optimizer.steps_per_iter must be positive");
    if (burn_in < 0 || burn_in >= steps_per_iter) {
      throw ConfigError("optimizer.burn_in must lie in [0, steps_per_iter)");
    }
  }

  json to_json() const {
    return json{{"lr", lr},
                {"iterations", iterations},
                {"steps_per_iter", steps_per_iter},
                {"burn_in", burn_in},
                {"diagonal_only", diagonal_only}};
  }
};

inline Matrix read_initial_scale(ConfigReader& r, int dim) {
  if (r.has("initial_sigma") && r.has("initial_scale")) {
    throw ConfigError("give at most one of initial_sigma and initial_scale");
  }
  if (r.has("initial_scale")) {
    Matrix L = matrix_from_json(r.raw("initial_scale"), "initial_scale");
    if (L.rows() != dim) throw ConfigError("initial_scale does not match target dimension");
    return L;
  }
  const double sigma = r.get<double>("initial_sigma", 1.0);
  if (!(sigma > 0.0)) throw ConfigError("initial_sigma must be positive");
  return Matrix::Identity(dim, dim) * sigma;
}

struct TuneCommandConfig {
  TargetSpec target;
  Matrix initial_scale;
  OptimizerSettings optimizer;
  std::uint64_t seed = 0;
  double pruning_prob = 1.0;
  std::int64_t max_horizon = 0;

  static TuneCommandConfig parse(const json& j, const RunFlags& flags) {
    ConfigReader r(j, "");
    TuneCommandConfig c;
    c.target = TargetSpec::parse(r.child("target"));
    c.initial_scale = read_initial_scale(r, c.target.dim);
    if (r.has("optimizer")) c.optimizer.read(r.child("optimizer"));
    c.seed = r.get<std::uint64_t>("seed", 0);
    r.get<int>("threads", 1);  // accepted; each iteration runs a single chain
    c.pruning_prob = r.get<double>("pruning_prob", 1.0);
    c.max_horizon = r.get<std::int64_t>("max_horizon", 0);
    r.finish();
    if (flags.paper_scale) {
      c.optimizer.iterations = 800;
      c.optimizer.steps_per_iter = 250'000;
    }
    if (flags.seed) c.seed = *flags.seed;
    c.optimizer.validate();
    if (!(c.pruning_prob > 0.0 && c.pruning_prob <= 1.0)) throw ConfigError("pruning_prob must lie in (0, 1]");
    try {
      (void)ProposalKernel::gaussian_rw(c.initial_scale);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("invalid initial scale: ") + e.what());
    }
    return c;
  }

  TuneConfig tune_config() const {
    TuneConfig t;
    t.initial_scale = initial_scale;
    t.diagonal_only = optimizer.diagonal_only;
    t.iterations = optimizer.iterations;
    t.steps_per_iter = optimizer.steps_per_iter;
    t.burn_in = optimizer.burn_in;
    t.lr = optimizer.lr;
    t.seed = seed;
    t.max_horizon = max_horizon;
    t.pruning_prob = pruning_prob;
    return t;
  }

  json resolved() const {
    return json{{"target", target.to_json()},         {"initial_scale", matrix_to_json(initial_scale)},
                {"optimizer", optimizer.to_json()},    {"seed", seed},
                {"pruning_prob", pruning_prob},        {"max_horizon", max_horizon}};
  }
};

inline std::vector<std::string> cholesky_param_names(const CholeskyParameterization& p) {
  std::vector<std::string> out;
  for (int k = 0; k < p.size(); ++k) {
    const std::string idx = std::to_string(p.row(k)) + std::to_string(p.col(k));
    out.push_back(p.is_diagonal(k) ? "log_L" + idx : "L" + idx);
  }
  return out;
}

/// Trajectory of a tuning run; a diverged chain ends the run early and is reported in
/// the trailing comment lines.
struct TuneOutcome {
  std::vector<TuneRecord> trajectory;
  Matrix final_scale;
  std::int64_t skipped = 0;
  std::int64_t truncated = 0;
  std::optional<std::string> aborted;
};

inline TuneOutcome run_tune(const ParametricTarget& target, const TuneConfig& cfg) {
  TuneOutcome out;
  try {
    TuneResult r = tune_proposal(target, cfg, [&](const TuneRecord& rec) { out.trajectory.push_back(rec); });
    out.final_scale = r.final_scale;
    out.skipped = r.skipped;
    out.truncated = r.truncated;
  } catch (const NumericalError& e) {
    out.aborted = e.what();
    for (const TuneRecord& rec : out.trajectory) {
      out.skipped += rec.skipped ? 1 : 0;
      out.truncated += rec.truncated;
    }
    out.final_scale = out.trajectory.empty() ? cfg.initial_scale : out.trajectory.back().scale;
  }
  return out;
}

inline CommandOutput cmd_tune(const json& config, const RunFlags& flags) {
  const TuneCommandConfig c = TuneCommandConfig::parse(config, flags);
  const ParametricTarget target = c.target.build();
  const CholeskyParameterization param(c.target.dim, c.optimizer.diagonal_only);
  const TuneOutcome t = run_tune(target, c.tune_config());

  CommandOutput out;
  std::ostringstream os;
  os << config_header("tune", c.resolved());
  os << "iter";
  for (const std::string& n : cholesky_param_names(param)) os << ',' << n;
  os << ",objective,grad_norm,acceptance_rate\n";
  for (const TuneRecord& rec : t.trajectory) {
    os << rec.iteration;
    for (Eigen::Index k = 0; k < rec.params.size(); ++k) os << ',' << fmt(rec.params[k]);
    os << ',' << fmt(rec.objective) << ',' << fmt(rec.grad_norm) << ',' << fmt(rec.acceptance_rate) << '\n';
  }
  os << "# completed_iterations: " << t.trajectory.size() << '\n';
  os << "# skipped_iterations: " << t.skipped << '\n';
  os << "# truncated_alternatives: " << t.truncated << '\n';
  os << "# final_scale: " << matrix_to_json(t.final_scale).dump() << '\n';
  if (t.aborted) {
    os << "# aborted: " << *t.aborted << '\n';
    out.all_finite = false;
  }
  if (t.skipped > 0) out.all_finite = false;
  out.csv = os.str();
  return out;
}

// ---------------------------------------------------------------- sensitivity

struct SensitivityCommandConfig {
  std::optional<std::string> dataset_path;  // as resolved against the config directory
  std::string response = "y";
  int synthetic_n = 200;
  int synthetic_k = 5;
  std::uint64_t synthetic_seed = 1;
  std::vector<std::string> priors{"original", "adjusted"};
  bool theta_dependent = true;
  bool power_scale_sigma = true;
  double theta = 0.0;
  double scale_factor = 0.0;
  RunSettings run;

  static SensitivityCommandConfig parse(const json& j, const RunFlags& flags) {
    ConfigReader r(j, "");
    SensitivityCommandConfig c;
    c.run.n_chains = 4;
    c.run.n_steps = 50'000;
    c.run.burn_in = 10'000;
    if (r.has("dataset") == r.has("synthetic")) {
      throw ConfigError("sensitivity needs exactly one of dataset or synthetic");
    }
    if (r.has("dataset")) {
      ConfigReader d = r.child("dataset");
      std::filesystem::path p = d.require<std::string>("path");
      if (p.is_relative() && !flags.config_dir.empty()) p = flags.config_dir / p;
      c.dataset_path = p.lexically_normal().string();
      c.response = d.require<std::string>("response");
      d.finish();
    } else {
      ConfigReader s = r.child("synthetic");
      c.synthetic_n = s.get<int>("n_obs", c.synthetic_n);
      c.synthetic_k = s.get<int>("n_covariates", c.synthetic_k);
      c.synthetic_seed = s.get<std::uint64_t>("seed", c.synthetic_seed);
      s.finish();
    }
    c.priors = r.get<std::vector<std::string>>("priors", c.priors);
    if (c.priors.empty()) throw ConfigError("priors must not be empty");
    for (const std::string& p : c.priors) {
      try {
        (void)bayes::parse_prior(p);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    }
    c.theta_dependent = r.get<bool>("theta_dependent", true);
    c.power_scale_sigma = r.get<bool>("power_scale_sigma", true);
    c.theta = r.get<double>("theta", 0.0);
    c.scale_factor = r.get<double>("scale_factor", 0.0);
    c.run.read(r);
    r.finish();
    if (flags.paper_scale) {
      c.run.n_chains = 4;
      c.run.n_steps = 350'000;
      c.run.burn_in = 100'000;
    }
    c.run.apply(flags);
    c.run.validate();
    return c;
  }

  json resolved() const {
    json j{{"priors", priors},
           {"theta_dependent", theta_dependent},
           {"power_scale_sigma", power_scale_sigma},
           {"theta", theta},
           {"scale_factor", scale_factor}};
    if (dataset_path) {
      j["dataset"] = json{{"path", *dataset_path}, {"response", response}};
    } else {
      j["synthetic"] = json{{"n_obs", synthetic_n}, {"n_covariates", synthetic_k}, {"seed", synthetic_seed}};
    }
    run.write(j);
    return j;
  }

  bayes::RegressionData load() const {
    if (dataset_path) {
      if (!std::filesystem::exists(*dataset_path)) {
        throw std::runtime_error("dataset file not found: " + *dataset_path);
      }
      return bayes::load_csv(*dataset_path, response);
    }
    return bayes::synthetic(synthetic_n, synthetic_k, synthetic_seed).data;
  }

  bayes::SensitivityConfig sensitivity_config() const {
    bayes::SensitivityConfig s;
    s.n_chains = run.n_chains;
    s.n_steps = run.n_steps;
    s.burn_in = run.burn_in;
    s.seed = run.seed;
    s.threads = run.threads;
    s.theta = theta;
    s.scale_factor = scale_factor;
    s.pruning_prob = run.pruning_prob;
    s.max_horizon = run.max_horizon;
    return s;
  }
};

inline CommandOutput cmd_sensitivity(const json& config, const RunFlags& flags) {
  const SensitivityCommandConfig c = SensitivityCommandConfig::parse(config, flags);
  const bayes::RegressionData data = c.load();
  CommandOutput out;
  std::ostringstream os;
  os << config_header("sensitivity", c.resolved());
  os << "param,prior_spec,mean,mean_se,sensitivity,sensitivity_se\n";
  for (const std::string& prior : c.priors) {
    bayes::ModelOptions mo;
    mo.prior = bayes::parse_prior(prior);
    mo.theta_dependent = c.theta_dependent;
    mo.power_scale_sigma = c.power_scale_sigma;
    auto model = std::make_shared<const bayes::RegressionModel>(data, mo);
    const bayes::SensitivityResult r = bayes::sensitivity_run(model, c.sensitivity_config());
    for (std::size_t m = 0; m < r.names.size(); ++m) {
      const CrossChainMean& mean = r.posterior_mean[m];
      const GradientEstimate& g = r.sensitivity[m];
      for (double v : {mean.value, mean.std_error, g.value, g.std_error}) {
        if (!std::isfinite(v)) out.all_finite = false;
      }
      os << r.names[m] << ',' << prior << ',' << fmt(mean.value) << ',' << fmt(mean.std_error) << ','
         << fmt(g.value) << ',' << fmt(g.std_error) << '\n';
    }
    os << "# " << prior << " acceptance_rate: " << fmt(r.acceptance_rate)
       << ", truncated_alternatives: " << r.truncated << '\n';
  }
  out.csv = os.str();
  return out;
}

// ---------------------------------------------------------------- diagnose

struct DiagnoseConfig {
  TargetSpec target;
  ProposalSpec proposal;
  std::optional<OptimizerSettings> tune;
  double theta = 0.0;
  int n_chains = 4;
  std::int64_t n_steps = 50'000;
  std::int64_t burn_in = 5'000;
  std::uint64_t seed = 0;
  int threads = 1;

  static DiagnoseConfig parse(const json& j, const RunFlags& flags) {
    ConfigReader r(j, "");
    DiagnoseConfig c;
    c.target = TargetSpec::parse(r.child("target"));
    c.proposal = ProposalSpec::parse(r.child("proposal"), c.target.dim);
    if (r.has("tune")) {
      if (c.proposal.kind != "gaussian_rw") throw ConfigError("tune requires a gaussian_rw proposal");
      OptimizerSettings o;
      o.read(r.child("tune"));
      c.tune = o;
    }
    c.theta = r.get<double>("theta", 0.0);
    c.n_chains = r.get<int>("n_chains", c.n_chains);
    c.n_steps = r.get<std::int64_t>("n_steps", c.n_steps);
    c.burn_in = r.get<std::int64_t>("burn_in", c.burn_in);
    c.seed = r.get<std::uint64_t>("seed", 0);
    c.threads = r.get<int>("threads", 1);
    r.finish();
    if (flags.paper_scale) {
      c.n_steps = 250'000;
      if (c.tune) {
        c.tune->iterations = 800;
        c.tune->steps_per_iter = 250'000;
      }
    }
    if (flags.seed) c.seed = *flags.seed;
    if (flags.threads) c.threads = *flags.threads;
    if (c.n_chains < 2) throw ConfigError("diagnose needs at least 2 chains (R-hat is undefined for one)");
    if (c.n_steps < 1 || c.burn_in < 0 || c.burn_in >= c.n_steps) {
      throw ConfigError("need n_steps > 0 and burn_in in [0, n_steps)");
    }
    if (c.n_steps - c.burn_in < 8) throw ConfigError("too few retained draws for diagnostics");
    if (c.threads < 1) throw ConfigError("threads must be positive");
    if (c.tune) c.tune->validate();
    (void)c.proposal.build();
    return c;
  }

  json resolved() const {
    json j{{"target", target.to_json()}, {"proposal", proposal.to_json()}, {"theta", theta},
           {"n_chains", n_chains},       {"n_steps", n_steps},             {"burn_in", burn_in},
           {"seed", seed}};
    if (tune) j["tune"] = tune->to_json();
    return j;
  }
};

struct DiagnosticsRow {
  std::string param;
  diagnostics::ChainDiagnostics d;
};

/// Post-burn-in draws of n_chains independent chains: one (draws x chains) matrix per
/// coordinate, plus the overall acceptance rate. Every chain starts at `initial`.
struct ChainDraws {
  std::vector<Matrix> per_coordinate;
  double acceptance_rate = 0.0;
};

inline ChainDraws sample_chains(const ParametricTarget& target, const ProposalKernel& kernel, double theta,
                                const Vector& initial, int n_chains, std::int64_t n_steps,
                                std::int64_t burn_in, std::uint64_t seed, int threads) {
  const int d = target.dim();
  const std::int64_t kept = n_steps - burn_in;
  struct One {
    Matrix draws;
    std::int64_t accepted = 0;
  };
  const auto runs = run_parallel(n_chains, threads, [&](int c) {
    Chain chain(target, kernel, theta, initial, chain_seed(seed, static_cast<std::uint64_t>(c)));
    One o;
    o.draws.resize(kept, d);
    for (std::int64_t t = 0; t < n_steps; ++t) {
      const AugmentedStep s = chain.advance();
      if (t >= burn_in) {
        o.draws.row(t - burn_in) = chain.state().transpose();
        o.accepted += s.accepted ? 1 : 0;
      }
    }
    return o;
  });
  ChainDraws out;
  out.per_coordinate.assign(d, Matrix(kept, n_chains));
  std::int64_t acc = 0;
  for (int c = 0; c < n_chains; ++c) {
    for (int i = 0; i < d; ++i) out.per_coordinate[i].col(c) = runs[c].draws.col(i);
    acc += runs[c].accepted;
  }
  out.acceptance_rate = static_cast<double>(acc) / static_cast<double>(kept * n_chains);
  return out;
}

/// The six-column table for already sampled chains; also the entry point for
/// injecting externally generated draws.
inline std::vector<DiagnosticsRow> diagnostics_table(const std::vector<Matrix>& per_coordinate,
                                                     double acceptance_rate) {
  std::vector<DiagnosticsRow> rows;
  for (std::size_t i = 0; i < per_coordinate.size(); ++i) {
    rows.push_back({"x" + std::to_string(i + 1), diagnostics::summarize(per_coordinate[i], acceptance_rate)});
  }
  return rows;
}

inline std::string diagnostics_csv(const std::vector<DiagnosticsRow>& rows) {
  std::ostringstream os;
  os << "param,mean,std,mc_se,ess_bulk,ess_tail,rhat,acceptance_rate\n";
  for (const DiagnosticsRow& r : rows) {
    os << r.param << ',' << fmt(r.d.mean) << ',' << fmt(r.d.std) << ',' << fmt(r.d.mc_se) << ','
       << fmt(r.d.ess_bulk) << ',' << fmt(r.d.ess_tail) << ',' << fmt(r.d.rhat) << ','
       << fmt(r.d.acceptance_rate) << '\n';
  }
  return os.str();
}

inline CommandOutput cmd_diagnose(const json& config, const RunFlags& flags) {
  DiagnoseConfig c = DiagnoseConfig::parse(config, flags);
  const ParametricTarget target = c.target.build();
  const std::string header = config_header("diagnose", c.resolved());
  CommandOutput out;
  std::ostringstream tail;
  if (c.tune) {
    TuneConfig tc;
    tc.initial_scale = c.proposal.scale;
    tc.diagonal_only = c.tune->diagonal_only;
    tc.iterations = c.tune->iterations;
    tc.steps_per_iter = c.tune->steps_per_iter;
    tc.burn_in = c.tune->burn_in;
    tc.lr = c.tune->lr;
    tc.seed = c.seed;
    const TuneOutcome t = run_tune(target, tc);
    tail << "# tuned_scale: " << matrix_to_json(t.final_scale).dump() << '\n';
    tail << "# tune_skipped_iterations: " << t.skipped << '\n';
    if (t.aborted) {
      tail << "# tune_aborted: " << *t.aborted << '\n';
      out.all_finite = false;
    }
    c.proposal.scale = t.final_scale;
  }
  const ProposalKernel kernel = c.proposal.build();
  const ChainDraws draws = sample_chains(target, kernel, c.theta, Vector::Zero(target.dim()), c.n_chains,
                                         c.n_steps, c.burn_in, derive_seed(c.seed, 0xd1a6), c.threads);
  const std::vector<DiagnosticsRow> rows = diagnostics_table(draws.per_coordinate, draws.acceptance_rate);
  for (const DiagnosticsRow& r : rows) {
    for (double v : {r.d.mean, r.d.std, r.d.mc_se, r.d.ess_bulk, r.d.ess_tail, r.d.rhat}) {
      if (!std::isfinite(v)) out.all_finite = false;
    }
  }
  out.csv = header + diagnostics_csv(rows) + tail.str();
  return out;
}

// ---------------------------------------------------------------- entry

inline json read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    return json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

inline CommandOutput run_command(const std::string& command, const json& config, const RunFlags& flags) {
  if (command == "sweep") return cmd_sweep(config, flags);
  if (command == "tune") return cmd_tune(config, flags);
  if (command == "sensitivity") return cmd_sensitivity(config, flags);
  if (command == "diagnose") return cmd_diagnose(config, flags);
  throw ConfigError("unknown subcommand '" + command + "'");
}

}  // namespace dmh::cli
