#pragma once

// Variance-of-posteriors acquisition over MC-dropout weight samples, plus the
// distributional-uncertainty diagnostic and an exact discrete check of the
// mutual-information / expected-KL identity.

#include "asnpe/flow.hpp"

#include <concepts>
#include <iomanip>
#include <ostream>

namespace asnpe {

enum class KlDirection {
  component_to_marginal,  // E_phi KL(p(.|x,phi) || p(.|x,D)); equals I[phi; theta]
  marginal_to_component,  // E_phi KL(p(.|x,D) || p(.|x,phi))
};

struct AcquisitionConfig {
  int num_weight_samples = 100;
  double lambda = 1.0;
  double density_floor = 0.0;
  bool use_proposal_weight = true;
  KlDirection kl_direction = KlDirection::component_to_marginal;

  void validate() const {
    if (num_weight_samples < 2) throw ConfigError("acquisition: need at least 2 weight samples");
    if (!(lambda > 0.0)) throw ConfigError("acquisition: lambda must be > 0");
    if (!(density_floor >= 0.0)) throw ConfigError("acquisition: density_floor must be >= 0");
  }
};

/// Densities of N candidates under S weight samples. All entries share one
/// multiplicative factor exp(-log_shift), so ratios and orderings are exact.
struct ComponentDensities {
  Mat density;  // N x S
  double log_shift = 0.0;
  std::vector<bool> degenerate;
};

inline ComponentDensities component_densities(const ConditionalMaf& flow, const SampleSet& thetas, const Vec& x_o,
                                              std::span<const WeightSample> phis, double density_floor = 0.0) {
  if (phis.empty()) throw Error("component_densities: no weight samples");
  const Eigen::Index n = thetas.rows();
  const auto s = static_cast<Eigen::Index>(phis.size());
  Mat logs(n, s);
  for (Eigen::Index j = 0; j < s; ++j) {
    try {
      logs.col(j) = flow.log_prob_batch(thetas, x_o, phis[static_cast<std::size_t>(j)]);
    } catch (const EvaluationError&) {
      // Fall back to per-candidate evaluation so one bad theta does not sink the batch.
      for (Eigen::Index i = 0; i < n; ++i) {
        try {
          logs(i, j) = flow.log_prob(thetas.row(i).transpose(), x_o, phis[static_cast<std::size_t>(j)]);
        } catch (const EvaluationError&) {
          logs(i, j) = -std::numeric_limits<double>::infinity();
        }
      }
    }
  }
  ComponentDensities out;
  out.log_shift = logs.maxCoeff();
  if (!std::isfinite(out.log_shift)) out.log_shift = 0.0;
  // Scalar exp keeps each entry independent of its position in memory.
  out.density.resize(n, s);
  for (Eigen::Index j = 0; j < s; ++j)
    for (Eigen::Index i = 0; i < n; ++i) out.density(i, j) = std::exp(logs(i, j) - out.log_shift);
  if (density_floor > 0.0) {
    const double floor_shifted = std::exp(std::log(density_floor) - out.log_shift);
    out.density = out.density.cwiseMax(floor_shifted);
  }
  out.degenerate.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) out.degenerate[static_cast<std::size_t>(i)] = out.density.row(i).maxCoeff() <= 0.0;
  return out;
}

/// Population variance of the component densities around their mean. Computed
/// relative to the first component so identical components give exactly 0.
inline double component_variance(std::span<const double> components) {
  if (components.empty()) return 0.0;
  const double ref = components.front();
  double s1 = 0.0, s2 = 0.0;
  for (double c : components) {
    const double dlt = c - ref;
    s1 += dlt;
    s2 += dlt * dlt;
  }
  const double n = static_cast<double>(components.size());
  const double m = s1 / n;
  return std::max(0.0, s2 / n - m * m);
}

/// proposal_density * Var_phi[p(theta | x_o, phi)]^lambda. Without the
/// proposal weight the factor is dropped (pure disagreement score).
inline double acquisition_score(std::span<const double> components, double proposal_density, double lambda,
                                bool use_proposal_weight = true) {
  if (components.size() < 2) throw Error("acquisition_score: need at least 2 components");
  const double var = component_variance(components);
  const double w = use_proposal_weight ? proposal_density : 1.0;
  if (var == 0.0) return 0.0;
  return w * std::pow(var, lambda);
}

struct ScoredCandidate {
  std::size_t index = 0;  // draw order within the proposal pool
  Vec theta;
  double proposal_density = 0.0;  // unshifted proposal density
  Vec component_densities;        // shifted by exp(-log_shift)
  double marginal_density = 0.0;  // shifted
  double variance = 0.0;          // shifted by exp(-2 log_shift)
  double score = 0.0;
  double log_score = -std::numeric_limits<double>::infinity();
  double log_shift = 0.0;
  bool degenerate = false;
};

/// Scores every candidate with one shared set of weight samples.
/// `proposal_log_density[i]` is log p~(theta_i).
inline std::vector<ScoredCandidate> score_candidates(const ConditionalMaf& flow, const SampleSet& thetas,
                                                     const Vec& proposal_log_density, const Vec& x_o,
                                                     std::span<const WeightSample> phis,
                                                     const AcquisitionConfig& config) {
  config.validate();
  if (static_cast<int>(phis.size()) < 2) throw Error("score_candidates: need at least 2 weight samples");
  const ComponentDensities comp = component_densities(flow, thetas, x_o, phis, config.density_floor);
  std::vector<ScoredCandidate> out(static_cast<std::size_t>(thetas.rows()));
  for (Eigen::Index i = 0; i < thetas.rows(); ++i) {
    auto& c = out[static_cast<std::size_t>(i)];
    c.index = static_cast<std::size_t>(i);
    c.theta = thetas.row(i).transpose();
    c.proposal_density = std::exp(proposal_log_density[i]);
    c.component_densities = comp.density.row(i).transpose();
    c.marginal_density = c.component_densities.mean();
    c.log_shift = comp.log_shift;
    c.degenerate = comp.degenerate[static_cast<std::size_t>(i)];
    c.variance = c.degenerate ? 0.0
                              : component_variance(std::span<const double>(c.component_densities.data(),
                                                                           static_cast<std::size_t>(phis.size())));
    if (c.variance > 0.0) {
      c.log_score = config.lambda * std::log(c.variance) +
                    (config.use_proposal_weight ? proposal_log_density[i] : 0.0);
      c.score = std::exp(c.log_score);
    }
  }
  return out;
}

/// Indices (draw order) of the B highest-scoring candidates; exact ties keep
/// draw order, so all-equal scores return the first B draws.
inline std::vector<std::size_t> select_top_b(std::span<const ScoredCandidate> candidates, std::size_t b) {
  if (b > candidates.size()) throw Error("select_top_b: B exceeds the candidate count");
  std::vector<std::size_t> idx(candidates.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t c) {
    return candidates[a].log_score > candidates[c].log_score;
  });
  idx.resize(b);
  std::vector<std::size_t> out;
  out.reserve(b);
  for (std::size_t i : idx) out.push_back(candidates[i].index);
  return out;
}

inline void write_acquisition_dump(std::ostream& os, std::span<const ScoredCandidate> candidates,
                                   std::span<const std::size_t> selected) {
  std::vector<bool> flag(candidates.size(), false);
  for (std::size_t s : selected)
    for (std::size_t i = 0; i < candidates.size(); ++i)
      if (candidates[i].index == s) flag[i] = true;
  os << "candidate,proposal_density,marginal_density,variance,score,selected,log_score,log_shift\n";
  os << std::setprecision(17);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& c = candidates[i];
    os << c.index << ',' << c.proposal_density << ',' << c.marginal_density << ',' << c.variance << ',' << c.score
       << ',' << (flag[i] ? 1 : 0) << ',' << c.log_score << ',' << c.log_shift << '\n';
  }
}

// ---- distributional uncertainty ---------------------------------------------

/// A finite family of densities over theta, weighted uniformly.
template <typename F>
concept ComponentFamily = requires(const F& f, std::size_t s, const Vec& theta, Rng& rng) {
  { f.size() } -> std::convertible_to<std::size_t>;
  { f.log_prob(s, theta) } -> std::convertible_to<double>;
  { f.sample(s, rng) } -> std::convertible_to<Vec>;
};

/// Flow conditionals under a list of weight samples.
struct FlowComponents {
  const ConditionalMaf* flow;
  Vec x;
  std::span<const WeightSample> phis;

  [[nodiscard]] std::size_t size() const { return phis.size(); }
  [[nodiscard]] double log_prob(std::size_t s, const Vec& theta) const { return flow->log_prob(theta, x, phis[s]); }
  Vec sample(std::size_t s, Rng& rng) const {
    return flow->sample(1, x, phis[s], rng()).row(0).transpose();
  }
};

struct Estimate {
  double value = 0.0;
  double standard_error = 0.0;
  bool available = true;
};

/// Monte Carlo estimate of the expected divergence between the components and
/// their uniform mixture.
template <ComponentFamily F>
Estimate distributional_uncertainty(const F& family, std::size_t num_samples, std::uint64_t seed,
                                    KlDirection direction = KlDirection::component_to_marginal) {
  const std::size_t s = family.size();
  if (s < 2) throw Error("distributional_uncertainty: need at least 2 components");
  if (num_samples < 2) throw Error("distributional_uncertainty: need at least 2 samples");
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, s - 1);
  std::vector<double> terms;
  terms.reserve(num_samples);
  std::vector<double> logs(s);
  for (std::size_t n = 0; n < num_samples; ++n) {
    const std::size_t k = pick(rng);
    const Vec theta = family.sample(k, rng);
    for (std::size_t j = 0; j < s; ++j) logs[j] = family.log_prob(j, theta);
    const double log_mix = log_mean_exp(logs);
    if (direction == KlDirection::component_to_marginal) {
      // theta ~ p_k with k uniform is a draw from the mixture-weighted joint.
      terms.push_back(logs[k] - log_mix);
    } else {
      double mean_log = 0.0;
      for (double l : logs) mean_log += l;
      terms.push_back(log_mix - mean_log / static_cast<double>(s));
    }
  }
  Estimate e;
  double m = 0.0;
  for (double t : terms) m += t;
  m /= static_cast<double>(terms.size());
  double v = 0.0;
  for (double t : terms) v += (t - m) * (t - m);
  v /= static_cast<double>(terms.size() - 1);
  e.value = m;
  e.standard_error = std::sqrt(v / static_cast<double>(terms.size()));
  e.available = std::isfinite(e.value) && std::isfinite(e.standard_error);
  return e;
}

// ---- discrete identity oracle ------------------------------------------------

struct MiIdentity {
  double mutual_information = 0.0;
  double expected_kl = 0.0;
};

/// Both sides of I[phi; theta] = E_phi KL(p(theta|phi) || p(theta)) by exact
/// enumeration over a joint table joint(phi, theta).
inline MiIdentity mi_identity_oracle(const Mat& joint) {
  if (joint.size() == 0) throw Error("mi_identity_oracle: empty table");
  if ((joint.array() < 0.0).any() || !joint.allFinite()) throw Error("mi_identity_oracle: negative or non-finite entry");
  if (std::abs(joint.sum() - 1.0) > 1e-9) throw Error("mi_identity_oracle: table does not sum to 1");
  const Vec p_phi = joint.rowwise().sum();
  const Vec p_theta = joint.colwise().sum().transpose();
  MiIdentity r;
  for (Eigen::Index i = 0; i < joint.rows(); ++i)
    for (Eigen::Index j = 0; j < joint.cols(); ++j) {
      const double p = joint(i, j);
      if (p > 0.0) r.mutual_information += p * std::log(p / (p_phi[i] * p_theta[j]));
    }
  for (Eigen::Index i = 0; i < joint.rows(); ++i) {
    if (p_phi[i] <= 0.0) continue;
    double kl = 0.0;
    for (Eigen::Index j = 0; j < joint.cols(); ++j) {
      const double cond = joint(i, j) / p_phi[i];
      if (cond > 0.0) kl += cond * std::log(cond / p_theta[j]);
    }
    r.expected_kl += p_phi[i] * kl;
  }
  return r;
}

}  // namespace asnpe
