#pragma once

// Simulator interface, tractable benchmark tasks with reference posteriors,
// and the toy origin-destination (OD) demand task.

#include "asnpe/prior.hpp"

#include <functional>
#include <map>
#include <memory>
#include <optional>

namespace asnpe {

/// Result of one simulator call: an observation or an error message.
struct SimOutcome {
  std::optional<Vec> x;
  std::string error;

  [[nodiscard]] bool ok() const { return x.has_value(); }
  static SimOutcome success(Vec v) { return {std::move(v), {}}; }
  static SimOutcome failure(std::string e) { return {std::nullopt, std::move(e)}; }
};

class Simulator {
 public:
  virtual ~Simulator() = default;
  [[nodiscard]] virtual int theta_dim() const = 0;
  [[nodiscard]] virtual int x_dim() const = 0;
  /// Simulates every theta. Call i draws its noise from seeds[i]; outcomes
  /// come back in submission order.
  virtual std::vector<SimOutcome> simulate(const std::vector<Vec>& thetas, std::span<const std::uint64_t> seeds) = 0;
};

/// Raised when a run would exceed its simulation cap.
class BudgetExceeded : public Error {
 public:
  using Error::Error;
};

/// Counts calls made through it and enforces a hard cap.
class CountingSimulator final : public Simulator {
 public:
  CountingSimulator(Simulator& inner, std::size_t cap = std::numeric_limits<std::size_t>::max())
      : inner_(&inner), cap_(cap) {}

  [[nodiscard]] int theta_dim() const override { return inner_->theta_dim(); }
  [[nodiscard]] int x_dim() const override { return inner_->x_dim(); }

  std::vector<SimOutcome> simulate(const std::vector<Vec>& thetas, std::span<const std::uint64_t> seeds) override {
    if (calls_ + thetas.size() > cap_)
      throw BudgetExceeded("simulation cap of " + std::to_string(cap_) + " calls would be exceeded");
    calls_ += thetas.size();
    return inner_->simulate(thetas, seeds);
  }

  [[nodiscard]] std::size_t calls() const { return calls_; }
  [[nodiscard]] std::size_t remaining() const { return cap_ - calls_; }

 private:
  Simulator* inner_;
  std::size_t cap_;
  std::size_t calls_ = 0;
};

enum class ReferenceKind { analytic, grid, mcmc, none };

struct ReferenceSamples {
  SampleSet samples;
  std::vector<std::string> warnings;
  double acceptance_rate = std::nan("");
};

/// A benchmark problem: prior, stochastic simulator, optional tractable
/// likelihood and a reference-posterior recipe.
struct TaskSpec {
  std::string name;
  int theta_dim = 0;
  int x_dim = 0;
  PriorSpec prior;
  std::function<Vec(const Vec& theta, Rng& rng)> simulate;
  std::function<double(const Vec& theta, const Vec& x)> log_likelihood;  // up to a theta-free constant
  ReferenceKind reference = ReferenceKind::none;
  std::function<ReferenceSamples(const Vec& x_o, Eigen::Index n, std::uint64_t seed)> reference_sampler;
  std::optional<Vec> true_theta;  // fixed ground truth; otherwise drawn from the prior
};

/// Adapts a TaskSpec to the Simulator interface; calls run on up to
/// `workers` threads and are reassembled in submission order.
class TaskSimulator final : public Simulator {
 public:
  explicit TaskSimulator(TaskSpec task, unsigned workers = 1) : task_(std::move(task)), workers_(workers) {}

  [[nodiscard]] int theta_dim() const override { return task_.theta_dim; }
  [[nodiscard]] int x_dim() const override { return task_.x_dim; }
  [[nodiscard]] const TaskSpec& task() const { return task_; }

  std::vector<SimOutcome> simulate(const std::vector<Vec>& thetas, std::span<const std::uint64_t> seeds) override {
    if (seeds.size() != thetas.size()) throw Error("simulate: one seed per theta required");
    std::vector<SimOutcome> out(thetas.size());
    parallel_for(thetas.size(), workers_, [&](std::size_t i) {
      try {
        Rng rng(seeds[i]);
        Vec x = task_.simulate(thetas[i], rng);
        if (x.size() != task_.x_dim) throw Error("simulator returned wrong dimension");
        out[i] = SimOutcome::success(std::move(x));
      } catch (const std::exception& e) {
        out[i] = SimOutcome::failure(e.what());
      }
    });
    return out;
  }

 private:
  TaskSpec task_;
  unsigned workers_;
};

/// Ground-truth parameter and the observation generated from it.
struct Observation {
  Vec true_theta;
  Vec x_o;
};

inline Observation make_observation(const TaskSpec& task, std::uint64_t seed) {
  Rng rng(derive_seed(seed, fnv1a("truth")));
  Vec theta = task.true_theta ? *task.true_theta : Vec(task.prior.sample(1, rng).row(0).transpose());
  Rng sim_rng(derive_seed(seed, fnv1a("observation")));
  return {theta, task.simulate(theta, sim_rng)};
}

inline ReferenceSamples reference_posterior(const TaskSpec& task, const Vec& x_o, Eigen::Index n, std::uint64_t seed) {
  if (task.reference == ReferenceKind::none || !task.reference_sampler)
    throw Error("reference_posterior: task '" + task.name + "' has no reference posterior");
  if (n < 1) throw Error("reference_posterior: n must be >= 1");
  return task.reference_sampler(x_o, n, seed);
}

// ---- random-walk Metropolis oracle --------------------------------------------

struct MetropolisConfig {
  Eigen::Index burn_in = 10000;
  Eigen::Index thin = 10;
  Eigen::Index pilot_steps = 2000;
  int pilot_rounds = 8;
  double rhat_threshold = 1.1;
};

namespace detail {

inline double split_rhat(const Vec& chain) {
  const Eigen::Index h = chain.size() / 2;
  if (h < 2) return 1.0;
  const Vec a = chain.head(h), b = chain.segment(h, h);
  const double ma = a.mean(), mb = b.mean();
  const double va = (a.array() - ma).square().sum() / static_cast<double>(h - 1);
  const double vb = (b.array() - mb).square().sum() / static_cast<double>(h - 1);
  const double w = 0.5 * (va + vb);
  const double m = 0.5 * (ma + mb);
  const double bvar = static_cast<double>(h) * ((ma - m) * (ma - m) + (mb - m) * (mb - m));
  const double var = (static_cast<double>(h - 1) / static_cast<double>(h)) * w + bvar / static_cast<double>(h);
  return w > 0.0 ? std::sqrt(var / w) : 1.0;
}

}  // namespace detail

/// Random-walk Metropolis on log_target with a pilot phase that adapts a
/// Gaussian proposal (scaled empirical covariance) until the acceptance rate
/// lies in [0.2, 0.5]. Returns n thinned draws after burn-in.
inline ReferenceSamples metropolis(const std::function<double(const Vec&)>& log_target, const Vec& start,
                                   Eigen::Index n, std::uint64_t seed, const MetropolisConfig& cfg = {}) {
  const Eigen::Index d = start.size();
  Rng rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Vec cur = start;
  double cur_lp = log_target(cur);
  if (!std::isfinite(cur_lp)) throw Error("metropolis: start point has zero density");
  Mat chol = Mat::Identity(d, d) * 0.1;
  double scale = 2.38 / std::sqrt(static_cast<double>(d));

  auto step = [&](std::size_t& accepted) {
    const Vec prop = cur + scale * (chol * standard_normal_vec(d, rng));
    const double lp = log_target(prop);
    if (std::isfinite(lp) && std::log(unif(rng)) < lp - cur_lp) {
      cur = prop;
      cur_lp = lp;
      ++accepted;
    }
  };

  double rate = 0.0;
  for (int round = 0; round < cfg.pilot_rounds; ++round) {
    std::size_t accepted = 0;
    Mat pilot(cfg.pilot_steps, d);
    for (Eigen::Index i = 0; i < cfg.pilot_steps; ++i) {
      step(accepted);
      pilot.row(i) = cur.transpose();
    }
    rate = static_cast<double>(accepted) / static_cast<double>(cfg.pilot_steps);
    const Mat centered = pilot.rowwise() - pilot.colwise().mean();
    Mat cov = centered.transpose() * centered / static_cast<double>(cfg.pilot_steps - 1);
    cov += Mat::Identity(d, d) * 1e-10;
    Eigen::LLT<Mat> llt(cov);
    if (llt.info() == Eigen::Success && accepted > 10) chol = llt.matrixL();
    if (rate < 0.2) scale *= 0.6;
    else if (rate > 0.5) scale *= 1.5;
    else if (round >= 2) break;
  }

  for (Eigen::Index i = 0; i < cfg.burn_in; ++i) {
    std::size_t dummy = 0;
    step(dummy);
  }
  ReferenceSamples out;
  out.samples.resize(n, d);
  std::size_t accepted = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index t = 0; t < cfg.thin; ++t) step(accepted);
    out.samples.row(i) = cur.transpose();
  }
  out.acceptance_rate = static_cast<double>(accepted) / static_cast<double>(n * cfg.thin);
  if (out.acceptance_rate < 0.2 || out.acceptance_rate > 0.5)
    out.warnings.push_back("metropolis: acceptance rate " + std::to_string(out.acceptance_rate) +
                           " outside [0.2, 0.5]");
  for (Eigen::Index j = 0; j < d; ++j) {
    const double r = detail::split_rhat(out.samples.col(j));
    if (!(r < cfg.rhat_threshold))
      out.warnings.push_back("metropolis: split-chain R-hat " + std::to_string(r) + " for coordinate " +
                             std::to_string(j));
  }
  return out;
}

// ---- benchmark tasks ----------------------------------------------------------

/// x = theta + N(0, 0.5^2 I), prior N(0, I); posterior N(x_o / 1.25, 0.2 I).
inline TaskSpec task_linear_gaussian(int d) {
  if (d < 1) throw ConfigError("linear_gaussian: dimension must be >= 1");
  constexpr double noise_var = 0.25;
  TaskSpec t;
  t.name = "linear_gaussian";
  t.theta_dim = d;
  t.x_dim = d;
  t.prior = PriorSpec::standard_normal(d);
  t.simulate = [](const Vec& theta, Rng& rng) -> Vec {
    return theta + std::sqrt(noise_var) * standard_normal_vec(theta.size(), rng);
  };
  t.log_likelihood = [](const Vec& theta, const Vec& x) { return -0.5 * (x - theta).squaredNorm() / noise_var; };
  t.reference = ReferenceKind::analytic;
  t.reference_sampler = [d](const Vec& x_o, Eigen::Index n, std::uint64_t seed) {
    const Vec mean = x_o / (1.0 + noise_var);
    const double sd = std::sqrt(noise_var / (1.0 + noise_var));
    Rng rng(seed);
    ReferenceSamples r;
    r.samples.resize(n, d);
    for (Eigen::Index i = 0; i < n; ++i) r.samples.row(i) = (mean + sd * standard_normal_vec(d, rng)).transpose();
    return r;
  };
  return t;
}

/// Analytic posterior moments of the linear-Gaussian task.
inline std::pair<Vec, Vec> linear_gaussian_posterior(const Vec& x_o) {
  return {x_o / 1.25, Vec::Constant(x_o.size(), std::sqrt(0.25 / 1.25))};
}

namespace detail {

inline double gaussian_mixture_loglik(const Vec& theta, const Vec& x) {
  const double r2 = (x - theta).squaredNorm();
  // 0.5 N(x; theta, I) + 0.5 N(x; theta, 0.01 I) in 2-D
  const double a = std::log(0.5) - kLog2Pi - 0.5 * r2;
  const double b = std::log(0.5) - kLog2Pi - 2.0 * std::log(0.1) - 0.5 * r2 / 0.01;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace detail

/// Self-normalized importance sampling of a 2-D posterior on a regular grid:
/// cell weights prior * likelihood, multinomial cell draws, uniform jitter.
struct GridPosterior {
  double x0, y0, h;
  Eigen::Index nx, ny;
  std::vector<double> weights;  // normalized, row-major over (ix, iy)
};

inline GridPosterior grid_posterior_2d(const std::function<double(const Vec&)>& log_density, double xlo, double xhi,
                                       double ylo, double yhi, double h) {
  GridPosterior g{xlo, ylo, h, static_cast<Eigen::Index>(std::ceil((xhi - xlo) / h)),
                  static_cast<Eigen::Index>(std::ceil((yhi - ylo) / h)), {}};
  g.weights.resize(static_cast<std::size_t>(g.nx * g.ny));
  double mx = -std::numeric_limits<double>::infinity();
  Vec p(2);
  for (Eigen::Index i = 0; i < g.nx; ++i)
    for (Eigen::Index j = 0; j < g.ny; ++j) {
      p << xlo + (static_cast<double>(i) + 0.5) * h, ylo + (static_cast<double>(j) + 0.5) * h;
      const double lw = log_density(p);
      g.weights[static_cast<std::size_t>(i * g.ny + j)] = lw;
      mx = std::max(mx, lw);
    }
  double total = 0.0;
  for (double& w : g.weights) {
    w = std::exp(w - mx);
    total += w;
  }
  for (double& w : g.weights) w /= total;
  return g;
}

inline SampleSet sample_grid(const GridPosterior& g, Eigen::Index n, Rng& rng) {
  std::discrete_distribution<std::size_t> pick(g.weights.begin(), g.weights.end());
  std::uniform_real_distribution<double> jitter(0.0, 1.0);
  SampleSet s(n, 2);
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto c = static_cast<Eigen::Index>(pick(rng));
    s(k, 0) = g.x0 + (static_cast<double>(c / g.ny) + jitter(rng)) * g.h;
    s(k, 1) = g.y0 + (static_cast<double>(c % g.ny) + jitter(rng)) * g.h;
  }
  return s;
}

/// theta in [-10, 10]^2; x ~ 0.5 N(theta, I) + 0.5 N(theta, 0.01 I).
inline TaskSpec task_gaussian_mixture() {
  TaskSpec t;
  t.name = "gaussian_mixture";
  t.theta_dim = 2;
  t.x_dim = 2;
  t.prior = PriorSpec::uniform_box(Vec::Constant(2, -10.0), Vec::Constant(2, 10.0));
  t.simulate = [](const Vec& theta, Rng& rng) -> Vec {
    std::bernoulli_distribution narrow(0.5);
    const double sd = narrow(rng) ? 0.1 : 1.0;
    return theta + sd * standard_normal_vec(2, rng);
  };
  t.log_likelihood = detail::gaussian_mixture_loglik;
  t.reference = ReferenceKind::grid;
  t.reference_sampler = [](const Vec& x_o, Eigen::Index n, std::uint64_t seed) {
    const double half = 7.0;
    const auto g = grid_posterior_2d([&](const Vec& th) { return detail::gaussian_mixture_loglik(th, x_o); },
                                     std::max(-10.0, x_o[0] - half), std::min(10.0, x_o[0] + half),
                                     std::max(-10.0, x_o[1] - half), std::min(10.0, x_o[1] + half), 0.01);
    Rng rng(seed);
    ReferenceSamples r;
    r.samples = sample_grid(g, n, rng);
    return r;
  };
  return t;
}

/// Fixed design of the Bernoulli GLM task: a constant column plus nine lags of
/// a seeded white-noise stimulus over 100 time bins.
inline Mat bernoulli_glm_design() {
  constexpr int bins = 100, taps = 9;
  Rng rng(42);
  const Vec stimulus = standard_normal_vec(bins, rng);
  Mat v = Mat::Zero(bins, taps + 1);
  for (int t = 0; t < bins; ++t) {
    v(t, 0) = 1.0;
    for (int k = 0; k < taps; ++k)
      if (t - k >= 0) v(t, k + 1) = stimulus[t - k];
  }
  return v;
}

/// Smoothness prior of the GLM filter: offset precision 0.5, filter precision F^T F
/// with F = D^2 + diag(sqrt(i / 9)), D the first-difference matrix.
inline PriorSpec bernoulli_glm_prior() {
  constexpr int m = 9;
  Mat dmat = Mat::Identity(m, m);
  for (int i = 1; i < m; ++i) dmat(i, i - 1) = -1.0;
  Mat f = dmat * dmat;
  for (int i = 0; i < m; ++i) f(i, i) += std::sqrt(static_cast<double>(i) / m);
  Mat precision = Mat::Zero(m + 1, m + 1);
  precision(0, 0) = 0.5;
  precision.bottomRightCorner(m, m) = f.transpose() * f;
  return PriorSpec::gaussian(Vec::Zero(m + 1), precision.inverse());
}

inline TaskSpec task_bernoulli_glm() {
  const auto design = std::make_shared<const Mat>(bernoulli_glm_design());
  TaskSpec t;
  t.name = "bernoulli_glm";
  t.theta_dim = 10;
  t.x_dim = 10;
  t.prior = bernoulli_glm_prior();
  t.simulate = [design](const Vec& theta, Rng& rng) -> Vec {
    const Vec psi = *design * theta;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Vec y(psi.size());
    for (Eigen::Index i = 0; i < psi.size(); ++i) y[i] = u(rng) < 1.0 / (1.0 + std::exp(-psi[i])) ? 1.0 : 0.0;
    return design->transpose() * y;
  };
  // x = V^T y is sufficient: log p(y | theta) = theta . x - sum log(1 + exp(V theta)).
  t.log_likelihood = [design](const Vec& theta, const Vec& x) {
    const Vec psi = *design * theta;
    double s = theta.dot(x);
    for (Eigen::Index i = 0; i < psi.size(); ++i)
      s -= psi[i] > 0 ? psi[i] + std::log1p(std::exp(-psi[i])) : std::log1p(std::exp(psi[i]));
    return s;
  };
  t.reference = ReferenceKind::mcmc;
  const auto prior = t.prior;
  const auto loglik = t.log_likelihood;
  t.reference_sampler = [prior, loglik](const Vec& x_o, Eigen::Index n, std::uint64_t seed) {
    return metropolis([&](const Vec& th) { return prior.log_density(th) + loglik(th, x_o); }, prior.mean(), n, seed);
  };
  return t;
}

namespace detail {

struct SlcpParams {
  Vec mean;
  Mat cov;
};

inline SlcpParams slcp_params(const Vec& theta) {
  const double s1 = theta[2] * theta[2], s2 = theta[3] * theta[3], rho = std::tanh(theta[4]);
  SlcpParams p{theta.head(2), Mat(2, 2)};
  p.cov << s1 * s1, rho * s1 * s2, rho * s1 * s2, s2 * s2;
  return p;
}

}  // namespace detail

/// theta in [-3, 3]^5; x = four draws from N(m(theta), S(theta)) followed by
/// `distractor_dims` standard-normal noise coordinates.
inline TaskSpec task_slcp(int distractor_dims) {
  if (distractor_dims < 0) throw ConfigError("slcp: distractor_dims must be >= 0");
  TaskSpec t;
  t.name = "slcp";
  t.theta_dim = 5;
  t.x_dim = 8 + distractor_dims;
  t.prior = PriorSpec::uniform_box(Vec::Constant(5, -3.0), Vec::Constant(5, 3.0));
  t.simulate = [distractor_dims](const Vec& theta, Rng& rng) -> Vec {
    const auto p = detail::slcp_params(theta);
    Mat cov = p.cov + Mat::Identity(2, 2) * 1e-12;
    Eigen::LLT<Mat> llt(cov);
    const Mat l = llt.matrixL();
    Vec x(8 + distractor_dims);
    for (int k = 0; k < 4; ++k) x.segment(2 * k, 2) = p.mean + l * standard_normal_vec(2, rng);
    if (distractor_dims > 0) x.tail(distractor_dims) = standard_normal_vec(distractor_dims, rng);
    return x;
  };
  t.log_likelihood = [](const Vec& theta, const Vec& x) {
    const auto p = detail::slcp_params(theta);
    const double det = p.cov.determinant();
    if (!(det > 1e-300)) return -std::numeric_limits<double>::infinity();
    const Mat inv = p.cov.inverse();
    double s = 0.0;
    for (int k = 0; k < 4; ++k) {
      const Vec r = x.segment(2 * k, 2) - p.mean;
      s += -kLog2Pi - 0.5 * std::log(det) - 0.5 * r.dot(inv * r);
    }
    return s;
  };
  t.reference = ReferenceKind::mcmc;
  const auto prior = t.prior;
  const auto loglik = t.log_likelihood;
  t.reference_sampler = [prior, loglik](const Vec& x_o, Eigen::Index n, std::uint64_t seed) {
    auto target = [&](const Vec& th) {
      const double lp = prior.log_density(th);
      return std::isfinite(lp) ? lp + loglik(th, x_o) : lp;
    };
    // Start from the best of a few hundred prior draws.
    Rng init_rng(derive_seed(seed, fnv1a("init")));
    const SampleSet cand = prior.sample(500, init_rng);
    Vec start = cand.row(0).transpose();
    double best = target(start);
    for (Eigen::Index i = 1; i < cand.rows(); ++i) {
      const double v = target(cand.row(i).transpose());
      if (v > best) {
        best = v;
        start = cand.row(i).transpose();
      }
    }
    ReferenceSamples r = metropolis(target, start, n, seed);
    // The likelihood depends on theta_3 and theta_4 only through their squares
    // and the prior is symmetric, so sign flips are exact symmetries.
    Rng flip(derive_seed(seed, fnv1a("flip")));
    std::bernoulli_distribution coin(0.5);
    for (Eigen::Index i = 0; i < r.samples.rows(); ++i) {
      if (coin(flip)) r.samples(i, 2) = -r.samples(i, 2);
      if (coin(flip)) r.samples(i, 3) = -r.samples(i, 3);
    }
    return r;
  };
  t.true_theta = Vec(5);
  *t.true_theta << 0.7, -2.9, -1.0, -0.9, 0.6;
  return t;
}

// ---- toy origin-destination task ------------------------------------------------

inline constexpr int kOdScenarioSchemaVersion = 1;

/// Routing of OD demand onto detectors plus the demand ground truth and the
/// perturbed prior estimate. assignment is m x d (detectors x OD pairs).
struct OdScenario {
  Mat assignment;
  Vec true_demand;
  Vec prior_estimate;
  double bias_r = 0.6;
  double noise_q = 0.3;
  double demand_noise_sd = 0.05;
  double detector_noise_frac = 0.02;
  double prior_cv = 0.5;
  double prior_floor = 1.0;

  void validate() const {
    if (assignment.rows() < 1 || assignment.cols() < 1) throw ConfigError("od: empty assignment matrix");
    if ((assignment.array() < 0.0).any()) throw ConfigError("od: assignment must be nonnegative");
    for (Eigen::Index r = 0; r < assignment.rows(); ++r)
      if (assignment.row(r).maxCoeff() <= 0.0) throw ConfigError("od: assignment has an all-zero row");
    if (assignment.cols() < assignment.rows()) throw ConfigError("od: need at least as many OD pairs as detectors");
    if (true_demand.size() != assignment.cols() || prior_estimate.size() != assignment.cols())
      throw ConfigError("od: demand vectors do not match the assignment matrix");
  }
};

struct PriorEstimate {
  Vec d_hat;
  PriorSpec prior;
};

/// Truncated-normal prior (lower bound 0) around the estimate; centers and
/// scales use max(d_hat, floor) so every factor keeps most of its mass.
inline PriorSpec od_prior(const Vec& d_hat, double cv, double floor) {
  std::vector<PriorFactor> f;
  for (Eigen::Index i = 0; i < d_hat.size(); ++i) {
    const double c = std::max(d_hat[i], floor);
    f.push_back(PriorFactor::normal(c, cv * c, 0.0));
  }
  return PriorSpec::product(std::move(f));
}

/// d_hat = (r + q * delta) * d_true elementwise, delta ~ N(0, 1/3).
inline PriorEstimate make_prior_estimate(const Vec& d_true, double r, double q, std::uint64_t seed,
                                         double cv = 0.5, double floor = 1.0) {
  if (!(r > 0.0)) throw ConfigError("prior estimate: r must be > 0");
  if (!(q >= 0.0)) throw ConfigError("prior estimate: q must be >= 0");
  Rng rng(seed);
  std::normal_distribution<double> delta(0.0, std::sqrt(1.0 / 3.0));
  Vec d_hat(d_true.size());
  for (Eigen::Index i = 0; i < d_true.size(); ++i) {
    const double dl = delta(rng);
    d_hat[i] = (r + q * dl) * d_true[i];
  }
  return {d_hat, od_prior(d_hat, cv, floor)};
}

struct OdScenarioRecipe {
  int od_pairs = 40;
  int detectors = 12;
  double demand_mean = 5.0;  // truncated-normal (lower bound 0) ground-truth demand
  double demand_sd = 25.0;
  double bias_r = 0.6;
  double noise_q = 0.3;
  std::uint64_t seed = 0;
};

/// Sparse random routing (each OD pair crosses 1-3 detectors with route shares
/// in [0.3, 1]), ground-truth demand and the perturbed prior estimate.
inline OdScenario make_od_scenario(const OdScenarioRecipe& recipe) {
  if (recipe.od_pairs < recipe.detectors) throw ConfigError("od: need od_pairs >= detectors");
  Rng rng(derive_seed(recipe.seed, fnv1a("routing")));
  OdScenario s;
  s.assignment = Mat::Zero(recipe.detectors, recipe.od_pairs);
  std::uniform_int_distribution<int> count(1, 3);
  std::uniform_int_distribution<int> det(0, recipe.detectors - 1);
  std::uniform_real_distribution<double> share(0.3, 1.0);
  for (int j = 0; j < recipe.od_pairs; ++j) {
    // Guarantee coverage: OD pair j always crosses detector j mod m.
    s.assignment(j % recipe.detectors, j) = share(rng);
    const int extra = count(rng) - 1;
    for (int e = 0; e < extra; ++e) s.assignment(det(rng), j) = share(rng);
  }
  Rng demand_rng(derive_seed(recipe.seed, fnv1a("demand")));
  const auto truth = PriorFactor::normal(recipe.demand_mean, recipe.demand_sd, 0.0);
  s.true_demand.resize(recipe.od_pairs);
  for (int j = 0; j < recipe.od_pairs; ++j) s.true_demand[j] = truth.sample(demand_rng);
  s.bias_r = recipe.bias_r;
  s.noise_q = recipe.noise_q;
  s.prior_estimate =
      make_prior_estimate(s.true_demand, recipe.bias_r, recipe.noise_q, derive_seed(recipe.seed, fnv1a("estimate")))
          .d_hat;
  s.validate();
  return s;
}

/// Expected detector flows A * d.
inline Vec od_expected_flows(const OdScenario& s, const Vec& demand) { return s.assignment * demand; }

/// simulate(d) = A (d * eta) + eps with eta ~ N(1, sd^2) per OD pair and
/// eps ~ N(0, (frac * mean flow)^2) per detector.
inline TaskSpec task_toy_od(const OdScenario& scenario) {
  scenario.validate();
  const auto sc = std::make_shared<const OdScenario>(scenario);
  TaskSpec t;
  t.name = "toy_od";
  t.theta_dim = static_cast<int>(scenario.assignment.cols());
  t.x_dim = static_cast<int>(scenario.assignment.rows());
  t.prior = od_prior(scenario.prior_estimate, scenario.prior_cv, scenario.prior_floor);
  t.simulate = [sc](const Vec& demand, Rng& rng) -> Vec {
    if (demand.size() != sc->assignment.cols()) throw Error("od: demand has wrong dimension");
    if ((demand.array() < 0.0).any()) throw Error("od: negative demand");
    std::normal_distribution<double> eta(1.0, sc->demand_noise_sd);
    Vec noisy(demand.size());
    for (Eigen::Index i = 0; i < demand.size(); ++i) noisy[i] = demand[i] * eta(rng);
    Vec flows = sc->assignment * noisy;
    const double sd = sc->detector_noise_frac * flows.mean();
    std::normal_distribution<double> eps(0.0, 1.0);
    for (Eigen::Index j = 0; j < flows.size(); ++j) flows[j] += sd * eps(rng);
    return flows;
  };
  t.reference = ReferenceKind::none;
  t.true_theta = scenario.true_demand;
  return t;
}

inline nlohmann::json od_scenario_to_json(const OdScenario& s) {
  nlohmann::json j;
  j["schema_version"] = kOdScenarioSchemaVersion;
  j["detectors"] = s.assignment.rows();
  j["od_pairs"] = s.assignment.cols();
  std::vector<double> a;
  for (Eigen::Index r = 0; r < s.assignment.rows(); ++r)
    for (Eigen::Index c = 0; c < s.assignment.cols(); ++c) a.push_back(s.assignment(r, c));
  j["assignment_row_major"] = a;
  j["true_demand"] = to_std(s.true_demand);
  j["prior_estimate"] = to_std(s.prior_estimate);
  j["bias_r"] = s.bias_r;
  j["noise_q"] = s.noise_q;
  j["demand_noise_sd"] = s.demand_noise_sd;
  j["detector_noise_frac"] = s.detector_noise_frac;
  j["prior_cv"] = s.prior_cv;
  j["prior_floor"] = s.prior_floor;
  return j;
}

inline OdScenario od_scenario_from_json(const nlohmann::json& j) {
  if (j.value("schema_version", -1) != kOdScenarioSchemaVersion)
    throw ConfigError("od scenario: unsupported schema_version");
  OdScenario s;
  const auto m = j.at("detectors").get<Eigen::Index>();
  const auto d = j.at("od_pairs").get<Eigen::Index>();
  const auto a = j.at("assignment_row_major").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(a.size()) != m * d) throw ConfigError("od scenario: assignment has wrong size");
  s.assignment.resize(m, d);
  for (Eigen::Index r = 0; r < m; ++r)
    for (Eigen::Index c = 0; c < d; ++c) s.assignment(r, c) = a[static_cast<std::size_t>(r * d + c)];
  s.true_demand = to_vec(j.at("true_demand").get<std::vector<double>>());
  s.prior_estimate = to_vec(j.at("prior_estimate").get<std::vector<double>>());
  s.bias_r = j.value("bias_r", 0.6);
  s.noise_q = j.value("noise_q", 0.3);
  s.demand_noise_sd = j.value("demand_noise_sd", 0.05);
  s.detector_noise_frac = j.value("detector_noise_frac", 0.02);
  s.prior_cv = j.value("prior_cv", 0.5);
  s.prior_floor = j.value("prior_floor", 1.0);
  s.validate();
  return s;
}

}  // namespace asnpe
