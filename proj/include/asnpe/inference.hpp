#pragma once

// Round-based sequential inference (ASNPE and plain SNPE), truncated flow
// proposals, and the rejection-ABC and SPSA baselines.

#include "asnpe/acquisition.hpp"
#include "asnpe/metrics.hpp"
#include "asnpe/simulators.hpp"
#include "asnpe/training.hpp"

#include <chrono>
#include <fstream>

namespace asnpe {

enum class Method { asnpe, snpe };

inline std::string to_string(Method m) { return m == Method::asnpe ? "asnpe" : "snpe"; }

struct InferenceConfig {
  int rounds = 4;
  int pool_size = 256;  // N proposal draws per round
  int batch_size = 32;  // B simulations per round
  AcquisitionConfig acquisition;
  TrainConfig train;
  FlowConfig flow;  // theta_dim and context_dim are filled from the simulator
  std::uint64_t seed = 0;
  std::size_t budget_cap = std::numeric_limits<std::size_t>::max();
  std::size_t proposal_draw_budget = 1'000'000;
  double min_acceptance = 1e-3;
  // Draws inspected before a low acceptance rate may abort the proposal.
  std::size_t acceptance_probe = 10'000;

  void validate() const {
    if (rounds < 1) throw ConfigError("inference: rounds must be >= 1");
    if (batch_size < 1) throw ConfigError("inference: batch size must be >= 1");
    if (batch_size > pool_size) throw ConfigError("inference: batch size exceeds the proposal pool");
    acquisition.validate();
    train.validate();
    if (!(min_acceptance >= 0.0 && min_acceptance < 1.0)) throw ConfigError("inference: min_acceptance out of range");
  }
};

struct PhaseTimes {
  double propose_s = 0.0;
  double acquire_s = 0.0;
  double simulate_s = 0.0;
  double train_s = 0.0;
};

struct RoundRecord {
  int round = 0;
  std::vector<std::size_t> selected_indices;  // draw order within the pool
  std::vector<Vec> selected;
  std::vector<Vec> outputs;
  std::size_t simulator_calls = 0;
  std::size_t replacements = 0;
  std::size_t failures = 0;
  double acceptance_rate = 1.0;
  PhaseTimes times;
  std::vector<ScoredCandidate> candidates;  // empty when acquisition is bypassed
  std::vector<TrainLogEntry> train_log;
  std::vector<std::string> warnings;
};

// ---- truncated proposal ------------------------------------------------------

struct ProposalDraws {
  SampleSet thetas;
  Vec log_density;  // unnormalized proposal log-density of each draw
  double acceptance_rate = 1.0;
  std::size_t draws = 0;
};

class ProposalError : public Error {
 public:
  using Error::Error;
};

/// n draws of the undropped flow conditional at x_o, rejected against the
/// prior support. The returned log-densities omit the truncation constant.
inline ProposalDraws propose(const ConditionalMaf& flow, const Vec& x_o, const PriorSpec& prior, Eigen::Index n,
                             std::uint64_t seed, std::size_t draw_budget = 1'000'000, double min_acceptance = 1e-3,
                             std::size_t acceptance_probe = 10'000) {
  if (n < 1) throw Error("propose: n must be >= 1");
  const WeightSample phi = flow.deterministic();
  ProposalDraws out;
  out.thetas.resize(n, flow.config().theta_dim);
  Eigen::Index accepted = 0;
  std::size_t drawn = 0;
  for (std::uint64_t chunk = 0; accepted < n; ++chunk) {
    if (drawn >= draw_budget)
      throw ProposalError("propose: draw budget of " + std::to_string(draw_budget) + " exhausted after " +
                          std::to_string(accepted) + " accepted draws; the posterior has escaped the prior support");
    const double rate = drawn ? static_cast<double>(accepted) / static_cast<double>(drawn) : 1.0;
    const auto want = static_cast<std::size_t>(
        std::ceil(1.2 * static_cast<double>(n - accepted) / std::max(rate, 1e-3)));
    const auto m = static_cast<Eigen::Index>(std::clamp<std::size_t>(want, 64, draw_budget - drawn));
    const SampleSet s = flow.sample(m, x_o, phi, derive_seed(seed, chunk));
    // Only draws inspected before the pool filled count toward the rate.
    for (Eigen::Index i = 0; i < m && accepted < n; ++i, ++drawn) {
      if (prior.contains(s.row(i).transpose())) out.thetas.row(accepted++) = s.row(i);
    }
    const double now = static_cast<double>(accepted) / static_cast<double>(drawn);
    if (accepted < n && drawn >= acceptance_probe && now < min_acceptance) {
      std::ostringstream msg;
      msg << "propose: acceptance rate " << now << " below " << min_acceptance << " after " << drawn
          << " draws; the posterior has escaped the prior support";
      throw ProposalError(msg.str());
    }
  }
  out.draws = drawn;
  out.acceptance_rate = static_cast<double>(n) / static_cast<double>(drawn);
  out.log_density = flow.log_prob_batch(out.thetas, x_o, phi);
  return out;
}

// ---- dataset persistence --------------------------------------------------------

inline constexpr std::uint32_t kDatasetVersion = 1;

inline void save_dataset(std::ostream& os, const RoundDataset& data) {
  os.write("ASNPEDAT", 8);
  detail::put(os, kDatasetVersion);
  detail::put<std::uint64_t>(os, data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    detail::put_vec(os, data.theta(i));
    detail::put_vec(os, data.x(i));
    detail::put<std::int32_t>(os, data.round(i));
    detail::put(os, data.prior_log_density(i));
    detail::put(os, data.proposal_log_density(i));
  }
  if (!os) throw Error("dataset: write failed");
}

inline RoundDataset load_dataset(std::istream& is) {
  std::array<char, 8> magic{};
  is.read(magic.data(), 8);
  if (!is || std::string(magic.data(), 8) != "ASNPEDAT") throw Error("dataset: bad magic");
  const auto version = detail::get<std::uint32_t>(is);
  if (version != kDatasetVersion) throw Error("dataset: unsupported version " + std::to_string(version));
  const auto n = detail::get<std::uint64_t>(is);
  RoundDataset data;
  for (std::uint64_t i = 0; i < n; ++i) {
    Vec theta = detail::get_vec(is);
    Vec x = detail::get_vec(is);
    const auto round = detail::get<std::int32_t>(is);
    const auto pld = detail::get<double>(is);
    const auto qld = detail::get<double>(is);
    data.append(theta, x, round, pld, qld);
  }
  return data;
}

// ---- the round loop ------------------------------------------------------------------

/// Everything needed to continue a run after `completed_rounds` rounds.
struct InferenceState {
  int completed_rounds = 0;
  std::optional<ConditionalMaf> flow;
  RoundDataset data;
  std::size_t simulator_calls = 0;
};

struct InferenceResult {
  InferenceState state;
  std::vector<RoundRecord> records;
};

/// Called after each round with the finished record and the state to resume
/// from. Throwing from the callback stops the run.
using RoundCallback = std::function<void(const RoundRecord&, const InferenceState&)>;

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Simulates candidates in ranking order until `want` succeed, the ranking is
/// exhausted or the budget runs out. Seeds depend only on the draw index.
struct SimulationPass {
  std::vector<std::size_t> used;  // pool indices whose simulation succeeded
  std::vector<Vec> outputs;
  std::size_t calls = 0;
  std::size_t failures = 0;
  std::vector<std::string> warnings;
};

inline SimulationPass simulate_ranked(Simulator& simulator, const SampleSet& pool, std::span<const std::size_t> ranking,
                                      std::size_t want, std::size_t budget_left, std::uint64_t seed) {
  SimulationPass out;
  std::size_t next = 0;
  while (out.used.size() < want && next < ranking.size()) {
    const std::size_t room = budget_left - out.calls;
    if (room == 0) {
      out.warnings.push_back("simulation budget exhausted");
      break;
    }
    const std::size_t take = std::min({want - out.used.size(), ranking.size() - next, room});
    std::vector<Vec> thetas;
    std::vector<std::uint64_t> seeds;
    std::vector<std::size_t> idx;
    for (std::size_t k = 0; k < take; ++k, ++next) {
      idx.push_back(ranking[next]);
      thetas.emplace_back(pool.row(static_cast<Eigen::Index>(ranking[next])).transpose());
      seeds.push_back(derive_seed(seed, ranking[next]));
    }
    const auto results = simulator.simulate(thetas, seeds);
    out.calls += take;
    for (std::size_t k = 0; k < take; ++k) {
      if (results[k].ok() && results[k].x->allFinite()) {
        out.used.push_back(idx[k]);
        out.outputs.push_back(*results[k].x);
      } else {
        ++out.failures;
        out.warnings.push_back("simulation of candidate " + std::to_string(idx[k]) + " failed: " +
                               (results[k].ok() ? std::string("non-finite output") : results[k].error));
      }
    }
  }
  if (out.used.size() < want && next >= ranking.size())
    out.warnings.push_back("replacement candidates exhausted; round proceeds with " + std::to_string(out.used.size()) +
                           " pairs");
  return out;
}

}  // namespace detail

/// Runs rounds [state.completed_rounds + 1, config.rounds] of sequential
/// posterior estimation. Every stochastic phase of round r draws from
/// derive_seed(config.seed, "round", r, phase), so resuming from a saved state
/// reproduces the uninterrupted run.
inline InferenceResult run_sequential(Method method, const PriorSpec& prior, Simulator& simulator, const Vec& x_o,
                                      const InferenceConfig& config, InferenceState state = {},
                                      const RoundCallback& on_round = {}) {
  config.validate();
  if (x_o.size() != simulator.x_dim()) throw ConfigError("inference: x_o dimension does not match the simulator");
  if (prior.dim() != simulator.theta_dim()) throw ConfigError("inference: prior dimension does not match the simulator");
  FlowConfig flow_cfg = config.flow;
  flow_cfg.theta_dim = simulator.theta_dim();
  flow_cfg.context_dim = simulator.x_dim();
  flow_cfg.validate();

  InferenceResult result;
  for (int r = state.completed_rounds + 1; r <= config.rounds; ++r) {
    const std::uint64_t round_seed = derive_seed(config.seed, fnv1a("round"), r);
    RoundRecord rec;
    rec.round = r;
    const auto n = static_cast<Eigen::Index>(config.pool_size);

    auto t0 = std::chrono::steady_clock::now();
    ProposalDraws pool;
    if (!state.flow) {
      Rng rng(derive_seed(round_seed, fnv1a("proposal")));
      pool.thetas = prior.sample(n, rng);
      pool.log_density.resize(n);
      for (Eigen::Index i = 0; i < n; ++i) pool.log_density[i] = prior.log_density(pool.thetas.row(i).transpose());
      pool.draws = static_cast<std::size_t>(n);
    } else {
      pool = propose(*state.flow, x_o, prior, n, derive_seed(round_seed, fnv1a("proposal")),
                     config.proposal_draw_budget, config.min_acceptance, config.acceptance_probe);
    }
    rec.acceptance_rate = pool.acceptance_rate;
    rec.times.propose_s = detail::seconds_since(t0);

    // Ranking of the pool: selection takes a prefix, replacements continue it.
    t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> ranking(static_cast<std::size_t>(n));
    std::iota(ranking.begin(), ranking.end(), 0);
    if (method == Method::asnpe && state.flow) {
      std::vector<WeightSample> phis;
      for (int s = 0; s < config.acquisition.num_weight_samples; ++s)
        phis.push_back(state.flow->weight_sample(derive_seed(round_seed, fnv1a("phi"), s)));
      rec.candidates = score_candidates(*state.flow, pool.thetas, pool.log_density, x_o, phis, config.acquisition);
      ranking = select_top_b(rec.candidates, rec.candidates.size());
    }
    rec.times.acquire_s = detail::seconds_since(t0);

    t0 = std::chrono::steady_clock::now();
    const std::size_t budget_left =
        config.budget_cap > state.simulator_calls ? config.budget_cap - state.simulator_calls : 0;
    auto sims = detail::simulate_ranked(simulator, pool.thetas, ranking, static_cast<std::size_t>(config.batch_size),
                                        budget_left, derive_seed(round_seed, fnv1a("simulate")));
    rec.times.simulate_s = detail::seconds_since(t0);
    rec.simulator_calls = sims.calls;
    rec.failures = sims.failures;
    rec.replacements = sims.calls > static_cast<std::size_t>(config.batch_size)
                           ? sims.calls - static_cast<std::size_t>(config.batch_size)
                           : 0;
    rec.warnings = std::move(sims.warnings);
    state.simulator_calls += sims.calls;
    for (std::size_t k = 0; k < sims.used.size(); ++k) {
      const Eigen::Index i = static_cast<Eigen::Index>(sims.used[k]);
      const Vec theta = pool.thetas.row(i).transpose();
      state.data.append(theta, sims.outputs[k], r, prior.log_density(theta), pool.log_density[i]);
      rec.selected_indices.push_back(sims.used[k]);
      rec.selected.push_back(theta);
      rec.outputs.push_back(sims.outputs[k]);
    }
    if (state.data.size() < static_cast<std::size_t>(config.train.atoms))
      throw Error("inference: too few successful simulations to train (" + std::to_string(state.data.size()) + ")");

    t0 = std::chrono::steady_clock::now();
    if (!state.flow) {
      ConditionalMaf fresh(flow_cfg, derive_seed(config.seed, fnv1a("init")));
      fresh.set_standardizer(Standardizer::fit(state.data.theta_matrix(), state.data.x_matrix()));
      state.flow = std::move(fresh);
    }
    TrainConfig tc = config.train;
    tc.seed = derive_seed(round_seed, fnv1a("train"));
    TrainResult trained = train_round(state.data, *state.flow, tc);
    state.flow = std::move(trained.flow);
    rec.train_log = std::move(trained.log);
    rec.times.train_s = detail::seconds_since(t0);
    state.completed_rounds = r;

    if (on_round) on_round(rec, state);
    result.records.push_back(std::move(rec));
  }
  result.state = std::move(state);
  return result;
}

inline InferenceResult run_asnpe(const PriorSpec& prior, Simulator& simulator, const Vec& x_o,
                                 const InferenceConfig& config) {
  return run_sequential(Method::asnpe, prior, simulator, x_o, config);
}

inline InferenceResult run_snpe(const PriorSpec& prior, Simulator& simulator, const Vec& x_o,
                                const InferenceConfig& config) {
  return run_sequential(Method::snpe, prior, simulator, x_o, config);
}

/// n posterior draws of the trained flow at x_o, truncated to the prior support.
inline SampleSet posterior_samples(const ConditionalMaf& flow, const Vec& x_o, const PriorSpec& prior, Eigen::Index n,
                                   std::uint64_t seed) {
  return propose(flow, x_o, prior, n, seed).thetas;
}

// ---- rejection ABC -------------------------------------------------------------------

struct AbcResult {
  SampleSet samples;
  Vec distances;  // of the accepted draws, ascending
  std::vector<Vec> outputs;  // every successful simulation, in draw order
  std::size_t failures = 0;
  std::size_t simulator_calls = 0;
};

/// Simulates `budget` prior draws and keeps the accept_quantile fraction
/// closest to x_o in Euclidean distance on outputs z-scored by the simulated
/// batch. Ties keep draw order.
inline AbcResult run_rejection_abc(const PriorSpec& prior, Simulator& simulator, const Vec& x_o, std::size_t budget,
                                   double accept_quantile, std::uint64_t seed) {
  if (budget < 1) throw ConfigError("abc: budget must be >= 1");
  if (!(accept_quantile > 0.0 && accept_quantile <= 1.0)) throw ConfigError("abc: accept_quantile must lie in (0, 1]");
  Rng rng(derive_seed(seed, fnv1a("abc-prior")));
  const SampleSet draws = prior.sample(static_cast<Eigen::Index>(budget), rng);
  std::vector<Vec> thetas;
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < budget; ++i) {
    thetas.emplace_back(draws.row(static_cast<Eigen::Index>(i)).transpose());
    seeds.push_back(derive_seed(seed, fnv1a("abc-sim"), i));
  }
  const auto outcomes = simulator.simulate(thetas, seeds);
  AbcResult out;
  out.simulator_calls = budget;
  std::vector<std::size_t> ok;
  for (std::size_t i = 0; i < budget; ++i) {
    if (outcomes[i].ok() && outcomes[i].x->allFinite()) {
      ok.push_back(i);
      out.outputs.push_back(*outcomes[i].x);
    } else {
      ++out.failures;
    }
  }
  if (ok.empty()) throw Error("abc: every simulation failed");
  SampleSet xs(static_cast<Eigen::Index>(ok.size()), x_o.size());
  for (std::size_t k = 0; k < ok.size(); ++k) xs.row(static_cast<Eigen::Index>(k)) = outcomes[ok[k]].x->transpose();
  Vec sd = column_moments(xs).second;
  for (auto& s : sd)
    if (!(s > 0.0)) s = 1.0;
  std::vector<std::pair<double, std::size_t>> dist;
  for (std::size_t k = 0; k < ok.size(); ++k)
    dist.emplace_back(((xs.row(static_cast<Eigen::Index>(k)).transpose() - x_o).array() / sd.array()).matrix().norm(),
                      k);
  std::stable_sort(dist.begin(), dist.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  const auto keep = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(accept_quantile * static_cast<double>(ok.size()) - 1e-9)));
  out.samples.resize(static_cast<Eigen::Index>(keep), draws.cols());
  out.distances.resize(static_cast<Eigen::Index>(keep));
  std::vector<std::size_t> chosen;
  for (std::size_t k = 0; k < keep; ++k) chosen.push_back(dist[k].second);
  if (keep == ok.size()) std::sort(chosen.begin(), chosen.end());
  for (std::size_t k = 0; k < keep; ++k) {
    out.samples.row(static_cast<Eigen::Index>(k)) = draws.row(static_cast<Eigen::Index>(ok[chosen[k]]));
    out.distances[static_cast<Eigen::Index>(k)] = dist[k].first;
  }
  return out;
}

// ---- SPSA ---------------------------------------------------------------------------

struct SpsaGains {
  double a = 1.0;
  double c = 0.1;
  double A = 0.0;
  double alpha = 0.602;
  double gamma = 0.101;

  void validate() const {
    if (!(a > 0.0)) throw ConfigError("spsa: gain a must be > 0");
    if (!(c > 0.0)) throw ConfigError("spsa: perturbation size c must be > 0");
    if (!(A >= 0.0)) throw ConfigError("spsa: stability constant A must be >= 0");
    if (!(alpha > 0.0) || !(gamma > 0.0)) throw ConfigError("spsa: exponents must be > 0");
  }
  [[nodiscard]] double a_k(int k) const { return a / std::pow(k + 1 + A, alpha); }
  [[nodiscard]] double c_k(int k) const { return c / std::pow(k + 1, gamma); }
};

struct SpsaStep {
  Vec theta;         // iterate after the step
  double objective;  // mean of the two measurements taken this iteration
};

struct SpsaEvaluation {
  Vec theta;
  double objective;
};

struct SpsaResult {
  std::vector<SpsaStep> trajectory;
  std::vector<SpsaEvaluation> evaluations;  // every objective measurement, in call order
  std::size_t calls = 0;
  std::size_t skipped = 0;
};

/// Noisy objective; returns nullopt when the measurement failed.
using SpsaObjective = std::function<std::optional<double>(const Vec& theta, std::uint64_t seed)>;

/// Classic two-measurement SPSA with Rademacher perturbations. A failed
/// measurement retries the iteration once with a fresh perturbation; a second
/// failure leaves the iterate unchanged. No pair of measurements starts once
/// it would take the total past max_calls.
inline SpsaResult spsa_minimize(const SpsaObjective& f, const Vec& start, int iterations, const SpsaGains& gains,
                                std::uint64_t seed, bool project_nonnegative = true,
                                std::size_t max_calls = std::numeric_limits<std::size_t>::max()) {
  gains.validate();
  if (iterations < 0) throw ConfigError("spsa: iterations must be >= 0");
  SpsaResult out;
  Vec theta = start;
  Rng rng(derive_seed(seed, fnv1a("spsa-delta")));
  std::bernoulli_distribution coin(0.5);
  std::uint64_t eval = 0;
  for (int k = 0; k < iterations && out.calls + 2 <= max_calls; ++k) {
    const double ck = gains.c_k(k);
    bool done = false;
    for (int attempt = 0; attempt < 2 && !done && out.calls + 2 <= max_calls; ++attempt) {
      Vec delta(theta.size());
      for (auto& v : delta) v = coin(rng) ? 1.0 : -1.0;
      Vec plus = theta + ck * delta;
      Vec minus = theta - ck * delta;
      if (project_nonnegative) {
        plus = plus.cwiseMax(0.0);
        minus = minus.cwiseMax(0.0);
      }
      const auto fp = f(plus, derive_seed(seed, fnv1a("spsa-eval"), eval++));
      const auto fm = f(minus, derive_seed(seed, fnv1a("spsa-eval"), eval++));
      out.calls += 2;
      if (fp) out.evaluations.push_back({plus, *fp});
      if (fm) out.evaluations.push_back({minus, *fm});
      if (!fp || !fm || !std::isfinite(*fp) || !std::isfinite(*fm)) continue;
      const Vec g = ((*fp - *fm) / (2.0 * ck)) * delta.cwiseInverse();
      theta -= gains.a_k(k) * g;
      if (project_nonnegative) theta = theta.cwiseMax(0.0);
      out.trajectory.push_back({theta, 0.5 * (*fp + *fm)});
      done = true;
    }
    if (!done) {
      ++out.skipped;
      out.trajectory.push_back({theta, std::nan("")});
    }
  }
  return out;
}

/// SPSA on RMSNE between one simulation at theta and x_o. Each measurement is
/// one simulator call.
inline SpsaResult run_spsa(Simulator& simulator, const Vec& x_o, const Vec& start, int iterations,
                           const SpsaGains& gains, std::uint64_t seed,
                           std::size_t max_calls = std::numeric_limits<std::size_t>::max()) {
  if (start.size() != simulator.theta_dim()) throw ConfigError("spsa: start has wrong dimension");
  if ((start.array() < 0.0).any()) throw ConfigError("spsa: start must be nonnegative");
  const SpsaObjective f = [&](const Vec& theta, std::uint64_t s) -> std::optional<double> {
    const std::uint64_t seeds[] = {s};
    const auto r = simulator.simulate({theta}, seeds);
    if (!r[0].ok()) return std::nullopt;
    return rmsne(*r[0].x, x_o);
  };
  return spsa_minimize(f, start, iterations, gains, seed, true, max_calls);
}

}  // namespace asnpe
