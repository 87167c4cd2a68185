#pragma once

// Evaluation metrics: RMSNE, classifier two-sample test, MMD, median
// distance and normalized posterior-mean error.

#include "asnpe/simulators.hpp"

#include <optional>

namespace asnpe {

struct MetricReport {
  std::string name;
  double value = 0.0;
  std::optional<double> standard_error;
  std::vector<Eigen::Index> sample_sizes;
  std::vector<std::string> warnings;
  std::size_t failures = 0;
};

/// sqrt(n * sum (x_hat - x_o)^2) / sum x_o.
///
/// Note the normalization: a single sum of x_o in the denominator, not a
/// per-element relative error.
inline double rmsne(const Vec& x_hat, const Vec& x_o) {
  if (x_hat.size() != x_o.size() || x_o.size() < 1) throw Error("rmsne: length mismatch");
  const double total = x_o.sum();
  if (!(total > 0.0)) throw Error("rmsne: sum of the reference must be positive");
  const double n = static_cast<double>(x_o.size());
  return std::sqrt(n * (x_hat - x_o).squaredNorm()) / total;
}

// ---- MMD ------------------------------------------------------------------------

namespace detail {

inline double sq_dist(const SampleSet& a, Eigen::Index i, const SampleSet& b, Eigen::Index j) {
  return (a.row(i) - b.row(j)).squaredNorm();
}

}  // namespace detail

/// Median pairwise Euclidean distance over the pooled sample.
inline double median_pairwise_distance(const SampleSet& p, const SampleSet& q) {
  SampleSet pooled(p.rows() + q.rows(), p.cols());
  pooled << p, q;
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(pooled.rows() * (pooled.rows() - 1) / 2));
  for (Eigen::Index i = 0; i < pooled.rows(); ++i)
    for (Eigen::Index j = i + 1; j < pooled.rows(); ++j) d.push_back(detail::sq_dist(pooled, i, pooled, j));
  if (d.empty()) return 0.0;
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  return std::sqrt(*mid);
}

/// Unbiased squared MMD with a Gaussian kernel whose bandwidth is the median
/// pooled pairwise distance (1 when that median is 0). May be slightly
/// negative when p = q.
inline MetricReport mmd(const SampleSet& p, const SampleSet& q) {
  if (p.cols() != q.cols()) throw Error("mmd: dimension mismatch");
  if (p.rows() < 2 || q.rows() < 2) throw Error("mmd: need at least 2 samples per side");
  MetricReport r{"mmd", 0.0, std::nullopt, {p.rows(), q.rows()}, {}, 0};
  if (p.rows() < 50 || q.rows() < 50) r.warnings.push_back("mmd: fewer than 50 samples per side");
  double h = median_pairwise_distance(p, q);
  if (!(h > 0.0)) {
    h = 1.0;
    r.warnings.push_back("mmd: zero median distance, bandwidth set to 1");
  }
  const double g = 1.0 / (2.0 * h * h);
  auto within = [&](const SampleSet& a) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      for (Eigen::Index j = i + 1; j < a.rows(); ++j) s += 2.0 * std::exp(-g * detail::sq_dist(a, i, a, j));
    const double n = static_cast<double>(a.rows());
    return s / (n * (n - 1.0));
  };
  double cross = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (Eigen::Index j = 0; j < q.rows(); ++j) cross += std::exp(-g * detail::sq_dist(p, i, q, j));
  cross /= static_cast<double>(p.rows()) * static_cast<double>(q.rows());
  r.value = within(p) + within(q) - 2.0 * cross;
  return r;
}

// ---- C2ST -------------------------------------------------------------------------

struct C2stConfig {
  int folds = 5;
  int hidden = 32;
  int max_epochs = 100;
  int batch_size = 64;
  double learning_rate = 1e-3;
  int patience = 10;
  std::uint64_t seed = 0;
};

namespace detail {

/// Two-hidden-layer ReLU network with a logistic output, trained by Adam on
/// binary cross-entropy with early stopping on a held-out tenth.
class BinaryMlp {
 public:
  BinaryMlp(Eigen::Index in, int hidden, Rng& rng)
      : w1_(hidden, in), b1_(Vec::Zero(hidden)), w2_(hidden, hidden), b2_(Vec::Zero(hidden)), w3_(1, hidden),
        b3_(0.0) {
    auto init = [&](Mat& w) {
      const double bound = std::sqrt(6.0 / static_cast<double>(w.cols() + w.rows()));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
    };
    init(w1_);
    init(w2_);
    init(w3_);
  }

  /// Logits for columns of x.
  [[nodiscard]] Vec logits(const Mat& x) const {
    Mat h1 = (w1_ * x).colwise() + b1_;
    h1 = h1.cwiseMax(0.0);
    Mat h2 = (w2_ * h1).colwise() + b2_;
    h2 = h2.cwiseMax(0.0);
    return ((w3_ * h2).array() + b3_).transpose();
  }

  double train(const Mat& x, const Vec& y, const C2stConfig& cfg, Rng& rng) {
    const Eigen::Index n = x.cols();
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    const Eigen::Index n_val = std::max<Eigen::Index>(1, n / 10);
    Mat xv(x.rows(), n_val);
    Vec yv(n_val);
    for (Eigen::Index i = 0; i < n_val; ++i) {
      xv.col(i) = x.col(idx[static_cast<std::size_t>(i)]);
      yv[i] = y[idx[static_cast<std::size_t>(i)]];
    }
    std::vector<Eigen::Index> train(idx.begin() + n_val, idx.end());
    Params best = params();
    double best_loss = loss(xv, yv);
    int since = 0;
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
      std::shuffle(train.begin(), train.end(), rng);
      for (std::size_t s = 0; s < train.size(); s += static_cast<std::size_t>(cfg.batch_size)) {
        const auto e = std::min(train.size(), s + static_cast<std::size_t>(cfg.batch_size));
        Mat xb(x.rows(), static_cast<Eigen::Index>(e - s));
        Vec yb(static_cast<Eigen::Index>(e - s));
        for (std::size_t k = s; k < e; ++k) {
          xb.col(static_cast<Eigen::Index>(k - s)) = x.col(train[k]);
          yb[static_cast<Eigen::Index>(k - s)] = y[train[k]];
        }
        step(xb, yb, cfg.learning_rate);
      }
      const double v = loss(xv, yv);
      if (v < best_loss - 1e-6) {
        best_loss = v;
        best = params();
        since = 0;
      } else if (++since >= cfg.patience) {
        break;
      }
    }
    set_params(best);
    return best_loss;
  }

 private:
  struct Params {
    Mat w1;
    Vec b1;
    Mat w2;
    Vec b2;
    Mat w3;
    double b3;
  };
  Params params() const { return {w1_, b1_, w2_, b2_, w3_, b3_}; }
  void set_params(const Params& p) {
    w1_ = p.w1;
    b1_ = p.b1;
    w2_ = p.w2;
    b2_ = p.b2;
    w3_ = p.w3;
    b3_ = p.b3;
  }

  double loss(const Mat& x, const Vec& y) const {
    const Vec l = logits(x);
    double s = 0.0;
    for (Eigen::Index i = 0; i < l.size(); ++i) {
      // softplus(l) - y * l
      const double sp = l[i] > 0 ? l[i] + std::log1p(std::exp(-l[i])) : std::log1p(std::exp(l[i]));
      s += sp - y[i] * l[i];
    }
    return s / static_cast<double>(l.size());
  }

  void step(const Mat& x, const Vec& y, double lr) {
    const double inv = 1.0 / static_cast<double>(x.cols());
    Mat a1 = (w1_ * x).colwise() + b1_;
    Mat h1 = a1.cwiseMax(0.0);
    Mat a2 = (w2_ * h1).colwise() + b2_;
    Mat h2 = a2.cwiseMax(0.0);
    const Vec l = ((w3_ * h2).array() + b3_).transpose();
    const Vec g = ((1.0 / (1.0 + (-l.array()).exp())) - y.array()).matrix() * inv;
    Mat gw3 = g.transpose() * h2.transpose();
    const double gb3 = g.sum();
    Mat gh2 = w3_.transpose() * g.transpose();
    Mat ga2 = gh2.cwiseProduct((a2.array() > 0.0).cast<double>().matrix());
    Mat gw2 = ga2 * h1.transpose();
    Vec gb2 = ga2.rowwise().sum();
    Mat gh1 = w2_.transpose() * ga2;
    Mat ga1 = gh1.cwiseProduct((a1.array() > 0.0).cast<double>().matrix());
    Mat gw1 = ga1 * x.transpose();
    Vec gb1 = ga1.rowwise().sum();
    ++t_;
    adam(w1_, gw1, m_[0], v_[0], lr);
    adam(b1_, gb1, m_[1], v_[1], lr);
    adam(w2_, gw2, m_[2], v_[2], lr);
    adam(b2_, gb2, m_[3], v_[3], lr);
    adam(w3_, gw3, m_[4], v_[4], lr);
    Mat b3m(1, 1), gb3m(1, 1);
    b3m(0, 0) = b3_;
    gb3m(0, 0) = gb3;
    adam(b3m, gb3m, m_[5], v_[5], lr);
    b3_ = b3m(0, 0);
  }

  template <typename P>
  void adam(P& p, const P& g, Mat& m, Mat& v, double lr) {
    if (m.size() == 0) {
      m = Mat::Zero(g.rows(), g.cols());
      v = Mat::Zero(g.rows(), g.cols());
    }
    m = 0.9 * m + 0.1 * Mat(g);
    v = 0.999 * v + 0.001 * Mat(g).cwiseProduct(Mat(g));
    const double c1 = 1.0 - std::pow(0.9, t_), c2 = 1.0 - std::pow(0.999, t_);
    const Mat upd = ((m.array() / c1) / ((v.array() / c2).sqrt() + 1e-8)).matrix();
    p -= lr * P(upd);
  }

  Mat w1_;
  Vec b1_;
  Mat w2_;
  Vec b2_;
  Mat w3_;
  double b3_;
  std::array<Mat, 6> m_{}, v_{};
  int t_ = 0;
};

}  // namespace detail

/// k-fold cross-validated accuracy of a classifier separating p from q on the
/// z-scored pooled data. 0.5 means indistinguishable.
inline MetricReport c2st(const SampleSet& p, const SampleSet& q, const C2stConfig& cfg = {}) {
  if (p.cols() != q.cols()) throw Error("c2st: dimension mismatch");
  if (cfg.folds < 2) throw Error("c2st: need at least 2 folds");
  MetricReport r{"c2st", 0.0, std::nullopt, {p.rows(), q.rows()}, {}, 0};
  if (p.rows() < 100 || q.rows() < 100) r.warnings.push_back("c2st: fewer than 100 samples per side");
  SampleSet pooled(p.rows() + q.rows(), p.cols());
  pooled << p, q;
  auto [mean, sd] = column_moments(pooled);
  std::vector<Eigen::Index> keep;
  for (Eigen::Index j = 0; j < pooled.cols(); ++j) {
    if (sd[j] > 1e-12) keep.push_back(j);
    else r.warnings.push_back("c2st: dropped constant feature " + std::to_string(j));
  }
  if (keep.empty()) {
    r.value = 0.5;
    return r;
  }
  Mat x(static_cast<Eigen::Index>(keep.size()), pooled.rows());
  for (std::size_t k = 0; k < keep.size(); ++k)
    x.row(static_cast<Eigen::Index>(k)) =
        ((pooled.col(keep[k]).array() - mean[keep[k]]) / sd[keep[k]]).matrix().transpose();
  Vec y(pooled.rows());
  y.head(p.rows()).setZero();
  y.tail(q.rows()).setOnes();

  // Stratified fold assignment.
  Rng rng(cfg.seed);
  std::vector<int> fold(static_cast<std::size_t>(pooled.rows()));
  auto assign = [&](Eigen::Index begin, Eigen::Index count) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(count));
    std::iota(idx.begin(), idx.end(), begin);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t k = 0; k < idx.size(); ++k) fold[static_cast<std::size_t>(idx[k])] = static_cast<int>(k % cfg.folds);
  };
  assign(0, p.rows());
  assign(p.rows(), q.rows());

  std::vector<double> accs;
  for (int f = 0; f < cfg.folds; ++f) {
    std::vector<Eigen::Index> tr, te;
    for (Eigen::Index i = 0; i < pooled.rows(); ++i) (fold[static_cast<std::size_t>(i)] == f ? te : tr).push_back(i);
    Mat xtr(x.rows(), static_cast<Eigen::Index>(tr.size())), xte(x.rows(), static_cast<Eigen::Index>(te.size()));
    Vec ytr(static_cast<Eigen::Index>(tr.size())), yte(static_cast<Eigen::Index>(te.size()));
    for (std::size_t k = 0; k < tr.size(); ++k) {
      xtr.col(static_cast<Eigen::Index>(k)) = x.col(tr[k]);
      ytr[static_cast<Eigen::Index>(k)] = y[tr[k]];
    }
    for (std::size_t k = 0; k < te.size(); ++k) {
      xte.col(static_cast<Eigen::Index>(k)) = x.col(te[k]);
      yte[static_cast<Eigen::Index>(k)] = y[te[k]];
    }
    Rng fold_rng(derive_seed(cfg.seed, f));
    detail::BinaryMlp net(x.rows(), cfg.hidden, fold_rng);
    net.train(xtr, ytr, cfg, fold_rng);
    const Vec l = net.logits(xte);
    double correct = 0.0;
    for (Eigen::Index i = 0; i < l.size(); ++i) correct += ((l[i] > 0.0) == (yte[i] > 0.5)) ? 1.0 : 0.0;
    accs.push_back(correct / static_cast<double>(l.size()));
  }
  double m = 0.0;
  for (double a : accs) m += a;
  m /= static_cast<double>(accs.size());
  double v = 0.0;
  for (double a : accs) v += (a - m) * (a - m);
  r.value = m;
  r.standard_error = std::sqrt(v / static_cast<double>(accs.size() - 1) / static_cast<double>(accs.size()));
  return r;
}

// ---- simulation-based distances ---------------------------------------------------

/// Simulates each posterior draw once and returns the median of ||x_i - x_o||.
inline MetricReport median_distance(const SampleSet& posterior, Simulator& simulator, const Vec& x_o,
                                    std::uint64_t seed) {
  if (posterior.rows() < 1) throw Error("median_distance: need at least one sample");
  std::vector<Vec> thetas;
  std::vector<std::uint64_t> seeds;
  for (Eigen::Index i = 0; i < posterior.rows(); ++i) {
    thetas.emplace_back(posterior.row(i).transpose());
    seeds.push_back(derive_seed(seed, i));
  }
  const auto outcomes = simulator.simulate(thetas, seeds);
  MetricReport r{"median_dist", 0.0, std::nullopt, {posterior.rows()}, {}, 0};
  std::vector<double> d;
  for (const auto& o : outcomes) {
    if (o.ok()) d.push_back((*o.x - x_o).norm());
    else ++r.failures;
  }
  if (d.empty()) throw Error("median_distance: every simulation failed");
  if (r.failures) r.warnings.push_back("median_distance: " + std::to_string(r.failures) + " simulations failed");
  const std::size_t n = d.size();
  std::sort(d.begin(), d.end());
  r.value = n % 2 ? d[n / 2] : 0.5 * (d[n / 2 - 1] + d[n / 2]);
  return r;
}

/// Mean over dimensions of |mean(approx) - true_mean| / normalizer; dimensions
/// with a zero normalizer are skipped with a warning.
inline MetricReport posterior_mean_error(const SampleSet& approx, const Vec& true_mean, const Vec& normalizer) {
  if (approx.cols() != true_mean.size() || normalizer.size() != true_mean.size())
    throw Error("posterior_mean_error: dimension mismatch");
  if (approx.rows() < 1) throw Error("posterior_mean_error: empty sample");
  MetricReport r{"mean_err", 0.0, std::nullopt, {approx.rows()}, {}, 0};
  const Vec m = approx.colwise().mean().transpose();
  double s = 0.0;
  int used = 0;
  for (Eigen::Index j = 0; j < m.size(); ++j) {
    if (!(normalizer[j] > 0.0)) {
      r.warnings.push_back("posterior_mean_error: zero normalizer in dimension " + std::to_string(j));
      continue;
    }
    s += std::abs(m[j] - true_mean[j]) / normalizer[j];
    ++used;
  }
  if (used == 0) throw Error("posterior_mean_error: every normalizer is zero");
  r.value = s / used;
  return r;
}

}  // namespace asnpe
