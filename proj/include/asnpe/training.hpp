#pragma once

// Proposal-corrected (atomic APT) maximum-likelihood training of the flow.

#include "asnpe/flow.hpp"

#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

namespace asnpe {

/// Accumulated (theta, x) pairs across rounds.
class RoundDataset {
 public:
  void append(const Vec& theta, const Vec& x, int round, double prior_log_density, double proposal_log_density) {
    if (!std::isfinite(prior_log_density)) throw Error("dataset: theta outside prior support");
    if (!rounds_.empty() && round < rounds_.back()) throw Error("dataset: round index must be non-decreasing");
    if (!thetas_.empty() && (theta.size() != thetas_.front().size() || x.size() != xs_.front().size()))
      throw Error("dataset: dimension mismatch");
    thetas_.push_back(theta);
    xs_.push_back(x);
    rounds_.push_back(round);
    prior_ld_.push_back(prior_log_density);
    proposal_ld_.push_back(proposal_log_density);
  }

  [[nodiscard]] std::size_t size() const { return thetas_.size(); }
  [[nodiscard]] bool empty() const { return thetas_.empty(); }
  [[nodiscard]] const Vec& theta(std::size_t i) const { return thetas_[i]; }
  [[nodiscard]] const Vec& x(std::size_t i) const { return xs_[i]; }
  [[nodiscard]] int round(std::size_t i) const { return rounds_[i]; }
  [[nodiscard]] double prior_log_density(std::size_t i) const { return prior_ld_[i]; }
  [[nodiscard]] double proposal_log_density(std::size_t i) const { return proposal_ld_[i]; }

  [[nodiscard]] SampleSet theta_matrix() const { return stack(thetas_); }
  [[nodiscard]] SampleSet x_matrix() const { return stack(xs_); }

  friend bool operator==(const RoundDataset& a, const RoundDataset& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a.thetas_[i] != b.thetas_[i] || a.xs_[i] != b.xs_[i] || a.rounds_[i] != b.rounds_[i]) return false;
    return true;
  }

 private:
  static SampleSet stack(const std::vector<Vec>& rows) {
    if (rows.empty()) return {};
    SampleSet m(static_cast<Eigen::Index>(rows.size()), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    return m;
  }

  std::vector<Vec> thetas_, xs_;
  std::vector<int> rounds_;
  std::vector<double> prior_ld_, proposal_ld_;
};

struct TrainConfig {
  int atoms = 10;
  int batch_size = 50;
  double learning_rate = 5e-4;
  int max_epochs = 300;
  double validation_fraction = 0.1;
  int patience = 20;
  double clip_norm = 5.0;
  bool train_dropout = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (atoms < 1) throw ConfigError("train: atoms must be >= 1");
    if (batch_size < 1 || atoms > batch_size) throw ConfigError("train: need 1 <= atoms <= batch_size");
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
    if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
    if (!(validation_fraction > 0.0 && validation_fraction <= 0.5))
      throw ConfigError("train: validation_fraction must lie in (0, 0.5]");
    if (patience < 1) throw ConfigError("train: patience must be >= 1");
  }
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

struct LossAndGradient {
  double loss = 0.0;
  Weights gradient;
};

/// Dropout handling inside apt_loss: a fresh mask per example (training) or
/// the undropped network (evaluation).
enum class DropoutMode { per_example, off };

namespace detail {

/// Picks `count` contrast atoms for dataset example `self` among `pool`
/// (excluding self). The choice depends only on (seed, self, candidate), so it
/// is independent of the order in which the pool is listed.
inline std::vector<std::size_t> pick_atoms(std::uint64_t seed, std::size_t self, std::span<const std::size_t> pool,
                                           std::size_t count) {
  std::vector<std::pair<std::uint64_t, std::size_t>> keyed;
  keyed.reserve(pool.size());
  for (std::size_t j : pool)
    if (j != self) keyed.emplace_back(derive_seed(seed, self, j), j);
  count = std::min(count, keyed.size());
  std::partial_sort(keyed.begin(), keyed.begin() + static_cast<std::ptrdiff_t>(count), keyed.end());
  std::vector<std::size_t> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) out.push_back(keyed[k].second);
  return out;
}

}  // namespace detail

/// Atomic APT loss averaged over `batch`, with its gradient. For example i the
/// logits are log q(theta_k | x_i) - log p(theta_k) over the atom set
/// {i} + (atoms - 1) contrast parameters from `atom_pool` (default: the batch).
inline LossAndGradient apt_loss(const ConditionalMaf& flow, const RoundDataset& data,
                                std::span<const std::size_t> batch, int atoms, std::uint64_t seed,
                                DropoutMode dropout = DropoutMode::per_example,
                                std::span<const std::size_t> atom_pool = {}) {
  if (batch.empty()) throw Error("apt_loss: empty batch");
  if (atoms < 1) throw Error("apt_loss: atoms must be >= 1");
  const auto pool = atom_pool.empty() ? batch : atom_pool;
  if (static_cast<std::size_t>(atoms) > pool.size()) throw Error("apt_loss: fewer candidates than atoms");

  LossAndGradient out;
  out.gradient.assign(static_cast<std::size_t>(flow.num_weights()), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  const int d = flow.config().theta_dim;
  for (std::size_t i : batch) {
    const auto others = detail::pick_atoms(derive_seed(seed, fnv1a("atoms")), i, pool,
                                           static_cast<std::size_t>(atoms - 1));
    SampleSet thetas(static_cast<Eigen::Index>(others.size() + 1), d);
    Vec prior_ld(thetas.rows());
    thetas.row(0) = data.theta(i).transpose();
    prior_ld[0] = data.prior_log_density(i);
    for (std::size_t k = 0; k < others.size(); ++k) {
      thetas.row(static_cast<Eigen::Index>(k + 1)) = data.theta(others[k]).transpose();
      prior_ld[static_cast<Eigen::Index>(k + 1)] = data.prior_log_density(others[k]);
    }
    const WeightSample phi = dropout == DropoutMode::per_example
                                 ? flow.weight_sample(derive_seed(seed, fnv1a("dropout"), i))
                                 : flow.deterministic();
    const FlowPass pass = flow.forward_pass(thetas, data.x(i), phi);
    const Vec logits = pass.log_prob - prior_ld;
    const double lse = log_sum_exp(std::span<const double>(logits.data(), static_cast<std::size_t>(logits.size())));
    const double loss_i = lse - logits[0];
    if (!std::isfinite(loss_i)) throw EvaluationError("apt_loss: non-finite loss");
    out.loss += loss_i * inv_n;
    Vec coeffs = (logits.array() - lse).exp().matrix();
    coeffs[0] -= 1.0;
    coeffs *= inv_n;
    flow.backward(pass, data.x(i), phi, coeffs, out.gradient);
  }
  return out;
}

struct TrainLogEntry {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double learning_rate = 0.0;
};

struct TrainResult {
  ConditionalMaf flow;
  std::vector<TrainLogEntry> log;
  int best_epoch = 0;
  double best_val_loss = 0.0;
};

class Adam {
 public:
  Adam(std::size_t n, double lr) : m_(n, 0.0), v_(n, 0.0), lr_(lr) {}

  void step(Weights& w, const Weights& g) {
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, t_), c2 = 1.0 - std::pow(kBeta2, t_);
    for (std::size_t i = 0; i < w.size(); ++i) {
      m_[i] = kBeta1 * m_[i] + (1.0 - kBeta1) * g[i];
      v_[i] = kBeta2 * v_[i] + (1.0 - kBeta2) * g[i] * g[i];
      w[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + kEps);
    }
  }

  [[nodiscard]] double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  std::vector<double> m_, v_;
  double lr_;
  int t_ = 0;
};

/// Trains `flow` on `data` with Adam on the APT loss, early stopping on a
/// held-out split and restoring the best-validation weights.
inline TrainResult train_round(const RoundDataset& data, ConditionalMaf flow, const TrainConfig& config) {
  config.validate();
  if (data.empty()) throw TrainingError("train_round: empty dataset");
  if (data.size() < static_cast<std::size_t>(config.atoms))
    throw TrainingError("train_round: dataset smaller than the atom count");

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(derive_seed(config.seed, fnv1a("split")));
  std::shuffle(order.begin(), order.end(), split_rng);
  const auto n_val = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(config.validation_fraction * static_cast<double>(data.size()))), 1,
      data.size() - 1 > 0 ? data.size() - 1 : 1);
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  if (train.empty()) train = val;
  std::sort(val.begin(), val.end());

  const int val_atoms = std::min<int>(config.atoms, static_cast<int>(data.size()));
  const std::uint64_t val_seed = derive_seed(config.seed, fnv1a("validation"));
  auto validation_loss = [&](const ConditionalMaf& f) {
    try {
      return apt_loss(f, data, val, val_atoms, val_seed, DropoutMode::off, order).loss;
    } catch (const EvaluationError&) {
      return std::numeric_limits<double>::infinity();
    }
  };

  TrainResult result{flow, {}, 0, 0.0};
  double best = validation_loss(flow);
  {
    const int train_atoms = std::min<int>(config.atoms, static_cast<int>(train.size()));
    double initial_train = std::numeric_limits<double>::infinity();
    try {
      initial_train = apt_loss(flow, data, train, train_atoms, val_seed, DropoutMode::off).loss;
    } catch (const EvaluationError&) {
    }
    result.log.push_back({0, initial_train, best, config.learning_rate});
  }
  Weights best_weights = flow.weights();
  Adam adam(best_weights.size(), config.learning_rate);
  bool halved = false;
  int since_best = 0;

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    Rng rng(derive_seed(config.seed, fnv1a("epoch"), epoch));
    std::shuffle(train.begin(), train.end(), rng);
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < train.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(train.size(), start + static_cast<std::size_t>(config.batch_size));
      std::span<const std::size_t> batch(train.data() + start, end - start);
      const int atoms = std::min<int>(config.atoms, static_cast<int>(batch.size()));
      const std::uint64_t step_seed = derive_seed(config.seed, fnv1a("step"), epoch, start);
      LossAndGradient lg;
      bool ok = true;
      try {
        lg = apt_loss(flow, data, batch, atoms, step_seed,
                      config.train_dropout ? DropoutMode::per_example : DropoutMode::off);
        ok = std::isfinite(lg.loss) &&
             std::all_of(lg.gradient.begin(), lg.gradient.end(), [](double g) { return std::isfinite(g); });
      } catch (const EvaluationError&) {
        ok = false;
      }
      if (!ok) {
        if (halved) {
          std::ostringstream msg;
          msg << "train_round: non-finite loss at epoch " << epoch << " after halving the learning rate to "
              << adam.learning_rate();
          throw TrainingError(msg.str());
        }
        halved = true;
        adam.set_learning_rate(adam.learning_rate() * 0.5);
        continue;
      }
      double norm = 0.0;
      for (double g : lg.gradient) norm += g * g;
      norm = std::sqrt(norm);
      if (config.clip_norm > 0.0 && norm > config.clip_norm)
        for (double& g : lg.gradient) g *= config.clip_norm / norm;
      Weights w = flow.weights();
      adam.step(w, lg.gradient);
      flow.set_weights(std::move(w));
      epoch_loss += lg.loss * static_cast<double>(batch.size());
      seen += batch.size();
    }
    const double v = validation_loss(flow);
    result.log.push_back({epoch, seen ? epoch_loss / static_cast<double>(seen) : std::nan(""), v,
                          adam.learning_rate()});
    if (v < best) {
      best = v;
      best_weights = flow.weights();
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  flow.set_weights(best_weights);
  result.flow = std::move(flow);
  result.best_val_loss = best;
  return result;
}

inline void write_training_log(std::ostream& os, const std::vector<TrainLogEntry>& log) {
  os << "epoch,train_loss,val_loss,learning_rate\n";
  os << std::setprecision(17);
  for (const auto& e : log) os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.learning_rate << '\n';
}

}  // namespace asnpe
