#pragma once

// Conditional masked autoregressive flow q(theta | x) built from MADE blocks
// with consistent MC-dropout. A WeightSample pairs the trained weights with one
// frozen dropout mask; every density evaluation and every sampling pass under
// that WeightSample uses the same mask, so each WeightSample is a proper
// density over theta.

#include "asnpe/core.hpp"

#include <array>
#include <cstring>
#include <istream>
#include <memory>
#include <numeric>
#include <ostream>

namespace asnpe {

enum class PermutationScheme { reverse, random_seeded };

struct FlowConfig {
  int theta_dim = 1;
  int context_dim = 1;
  int num_transforms = 5;
  int hidden_units = 50;
  double dropout_rate = 0.25;
  PermutationScheme permutation = PermutationScheme::reverse;
  std::uint64_t permutation_seed = 0;

  void validate() const {
    if (theta_dim < 1) throw ConfigError("flow: theta_dim must be >= 1");
    if (context_dim < 0) throw ConfigError("flow: context_dim must be >= 0");
    if (num_transforms < 1) throw ConfigError("flow: num_transforms must be >= 1");
    if (hidden_units < 1) throw ConfigError("flow: hidden_units must be >= 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
      throw ConfigError("flow: dropout_rate must lie in [0, 1)");
  }

  friend bool operator==(const FlowConfig&, const FlowConfig&) = default;
};

/// MADE connectivity for one transform. `order[p]` is the theta coordinate
/// that sits at autoregressive position p; its input degree is p + 1.
struct TransformMasks {
  std::vector<int> order;
  std::vector<int> input_degree;
  std::vector<int> hidden_degree;
  Mat input;   // hidden x theta_dim
  Mat hidden;  // hidden x hidden
  Mat output;  // theta_dim x hidden
};

struct MadeMaskSet {
  std::vector<TransformMasks> transforms;
};

inline MadeMaskSet build_masks(const FlowConfig& config) {
  config.validate();
  const int d = config.theta_dim;
  const int h = config.hidden_units;
  MadeMaskSet set;
  for (int t = 0; t < config.num_transforms; ++t) {
    TransformMasks m;
    m.order.resize(d);
    std::iota(m.order.begin(), m.order.end(), 0);
    if (config.permutation == PermutationScheme::reverse) {
      if (t % 2 == 1) std::reverse(m.order.begin(), m.order.end());
    } else {
      Rng rng(derive_seed(config.permutation_seed, t));
      std::shuffle(m.order.begin(), m.order.end(), rng);
    }
    m.input_degree.assign(d, 0);
    for (int p = 0; p < d; ++p) m.input_degree[m.order[p]] = p + 1;
    m.hidden_degree.resize(h);
    // Degree-0 units see only the context and feed every output.
    for (int k = 0; k < h; ++k) m.hidden_degree[k] = k % d;

    m.input = Mat::Zero(h, d);
    m.hidden = Mat::Zero(h, h);
    m.output = Mat::Zero(d, h);
    for (int k = 0; k < h; ++k) {
      for (int j = 0; j < d; ++j)
        if (m.input_degree[j] <= m.hidden_degree[k]) m.input(k, j) = 1.0;
      for (int l = 0; l < h; ++l)
        if (m.hidden_degree[l] <= m.hidden_degree[k]) m.hidden(k, l) = 1.0;
    }
    for (int j = 0; j < d; ++j)
      for (int k = 0; k < h; ++k)
        if (m.hidden_degree[k] < m.input_degree[j]) m.output(j, k) = 1.0;
    set.transforms.push_back(std::move(m));
  }
  return set;
}

/// Binary keep-mask over the maskable hidden units. Kept units are scaled by
/// 1 / (1 - rate) so the expected activation matches the undropped network.
struct DropoutMask {
  std::vector<std::uint8_t> keep;
  double rate = 0.0;
  std::uint64_t seed = 0;

  [[nodiscard]] Vec multipliers() const {
    Vec m(static_cast<Eigen::Index>(keep.size()));
    const double scale = 1.0 / (1.0 - rate);
    for (std::size_t i = 0; i < keep.size(); ++i) m[static_cast<Eigen::Index>(i)] = keep[i] ? scale : 0.0;
    return m;
  }
  friend bool operator==(const DropoutMask&, const DropoutMask&) = default;
};

inline DropoutMask sample_weight_mask(std::size_t units, double rate, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
  DropoutMask mask{std::vector<std::uint8_t>(units, 1), rate, seed};
  if (rate == 0.0) return mask;
  Rng rng(seed);
  std::bernoulli_distribution keep(1.0 - rate);
  for (auto& k : mask.keep) k = keep(rng) ? 1 : 0;
  return mask;
}

/// One concrete parameterization of the flow: shared immutable weights plus a
/// frozen dropout mask.
struct WeightSample {
  std::shared_ptr<const Weights> weights;
  DropoutMask mask;

  [[nodiscard]] std::uint64_t mask_seed() const { return mask.seed; }
};

/// z-scoring statistics for theta and x, fitted on a training set.
struct Standardizer {
  Vec theta_mean, theta_sd, x_mean, x_sd;

  static Standardizer identity(int theta_dim, int context_dim) {
    return {Vec::Zero(theta_dim), Vec::Ones(theta_dim), Vec::Zero(context_dim), Vec::Ones(context_dim)};
  }

  static Standardizer fit(const SampleSet& thetas, const SampleSet& xs) {
    auto safe = [](Vec sd) {
      for (auto& s : sd)
        if (!(s > 1e-12) || !std::isfinite(s)) s = 1.0;
      return sd;
    };
    auto [tm, ts] = column_moments(thetas);
    auto [xm, xsd] = column_moments(xs);
    return {tm, safe(ts), xm, safe(xsd)};
  }

  [[nodiscard]] double log_abs_det() const { return theta_sd.array().log().sum(); }
};

namespace detail {

struct TransformLayout {
  Eigen::Index w1t, w1x, b1, w2, b2, wm, bm, wa, ba, end;
};

/// Activations retained by a forward pass for reverse-mode differentiation.
struct TransformCache {
  Mat input;    // d x K
  Vec context;  // hidden: W1x x + b1
  Mat t1, h1;   // tanh output, masked output
  Mat t2, h2;
  Mat mu;
  Mat alpha;    // clamped log-scale
  Mat clamped;  // 1 where the raw log-scale was inside the clamp range
  Mat z;
};

}  // namespace detail

/// Forward activations of a batch of thetas sharing one context.
struct FlowPass {
  std::vector<detail::TransformCache> transforms;
  Vec log_prob;  // length K, raw-space log density
};

inline constexpr double kLogScaleClamp = 7.0;

class ConditionalMaf {
 public:
  ConditionalMaf() = default;

  ConditionalMaf(FlowConfig config, std::uint64_t init_seed)
      : config_(config), masks_(build_masks(config)), init_seed_(init_seed) {
    standardizer_ = Standardizer::identity(config_.theta_dim, config_.context_dim);
    build_layout();
    Weights w(static_cast<std::size_t>(num_weights()), 0.0);
    Rng rng(init_seed);
    const int d = config_.theta_dim, m = config_.context_dim, h = config_.hidden_units;
    auto fill = [&](Eigen::Index off, Eigen::Index n, double bound) {
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Eigen::Index i = 0; i < n; ++i) w[static_cast<std::size_t>(off + i)] = u(rng);
    };
    for (const auto& L : layout_) {
      const double b1 = 1.0 / std::sqrt(static_cast<double>(d + m));
      const double b2 = 1.0 / std::sqrt(static_cast<double>(h));
      fill(L.w1t, h * d, b1);
      fill(L.w1x, h * m, b1);
      fill(L.b1, h, b1);
      fill(L.w2, h * h, b2);
      fill(L.b2, h, b2);
      // Shift and log-scale heads start at zero: every transform is the identity.
    }
    set_weights(std::move(w));
  }

  [[nodiscard]] const FlowConfig& config() const { return config_; }
  [[nodiscard]] const MadeMaskSet& masks() const { return masks_; }
  [[nodiscard]] const Standardizer& standardizer() const { return standardizer_; }
  void set_standardizer(Standardizer s) { standardizer_ = std::move(s); }
  [[nodiscard]] std::uint64_t init_seed() const { return init_seed_; }

  [[nodiscard]] Eigen::Index num_weights() const { return layout_.empty() ? 0 : layout_.back().end; }
  [[nodiscard]] std::size_t num_maskable_units() const {
    return static_cast<std::size_t>(config_.num_transforms) * 2 * static_cast<std::size_t>(config_.hidden_units);
  }

  [[nodiscard]] const Weights& weights() const { return *weights_; }
  [[nodiscard]] std::shared_ptr<const Weights> shared_weights() const { return weights_; }

  /// Replaces all weights; entries excluded by the MADE masks are forced to 0.
  void set_weights(Weights w) {
    if (static_cast<Eigen::Index>(w.size()) != num_weights()) throw Error("flow: weight vector has wrong length");
    apply_masks(w);
    weights_ = std::make_shared<const Weights>(std::move(w));
  }

  /// Zeroes gradient or weight entries that the MADE masks exclude.
  void apply_masks(std::span<double> w) const {
    const int d = config_.theta_dim, h = config_.hidden_units;
    for (std::size_t t = 0; t < layout_.size(); ++t) {
      const auto& L = layout_[t];
      const auto& M = masks_.transforms[t];
      Eigen::Map<Mat>(w.data() + L.w1t, h, d).array() *= M.input.array();
      Eigen::Map<Mat>(w.data() + L.w2, h, h).array() *= M.hidden.array();
      Eigen::Map<Mat>(w.data() + L.wm, d, h).array() *= M.output.array();
      Eigen::Map<Mat>(w.data() + L.wa, d, h).array() *= M.output.array();
    }
  }

  /// The undropped network (all units kept, no rescaling).
  [[nodiscard]] WeightSample deterministic() const {
    return {weights_, DropoutMask{std::vector<std::uint8_t>(num_maskable_units(), 1), 0.0, 0}};
  }

  [[nodiscard]] WeightSample weight_sample(std::uint64_t seed) const {
    return {weights_, sample_weight_mask(num_maskable_units(), config_.dropout_rate, seed)};
  }

  [[nodiscard]] WeightSample with_mask(DropoutMask mask) const {
    if (mask.keep.size() != num_maskable_units()) throw Error("flow: dropout mask has wrong length");
    return {weights_, std::move(mask)};
  }

  // ---- evaluation -------------------------------------------------------

  [[nodiscard]] double log_prob(const Vec& theta, const Vec& x, const WeightSample& phi) const {
    SampleSet one(1, theta.size());
    one.row(0) = theta.transpose();
    return log_prob_batch(one, x, phi)[0];
  }

  /// Log densities of every row of `thetas` under context x.
  [[nodiscard]] Vec log_prob_batch(const SampleSet& thetas, const Vec& x, const WeightSample& phi) const {
    return forward_pass(thetas, x, phi, false).log_prob;
  }

  /// Full forward pass with cached activations (standardized space inside).
  [[nodiscard]] FlowPass forward_pass(const SampleSet& thetas, const Vec& x, const WeightSample& phi,
                                      bool keep_cache = true) const {
    check_dims(thetas.cols(), x.size());
    const auto& w = *phi.weights;
    const Vec mult = phi.mask.multipliers();
    Mat u = standardize_theta(thetas);
    const Vec xs = standardize_x(x);
    const Eigen::Index k = u.cols();
    Vec logdet = Vec::Zero(k);
    FlowPass pass;
    pass.transforms.reserve(layout_.size());
    for (std::size_t t = 0; t < layout_.size(); ++t) {
      detail::TransformCache c;
      transform_forward(w, t, mult, u, xs, c);
      logdet -= c.alpha.colwise().sum().transpose();
      u = c.z;
      if (keep_cache) pass.transforms.push_back(std::move(c));
    }
    const double d = config_.theta_dim;
    pass.log_prob = (-0.5 * u.array().square().colwise().sum()).transpose() - 0.5 * d * kLog2Pi;
    pass.log_prob += logdet;
    pass.log_prob.array() -= standardizer_.log_abs_det();
    for (Eigen::Index i = 0; i < k; ++i)
      if (!std::isfinite(pass.log_prob[i])) throw EvaluationError("flow: non-finite log density");
    return pass;
  }

  /// Adds sum_k coeffs[k] * d log q(theta_k | x) / d weights into grad.
  void backward(const FlowPass& pass, const Vec& x, const WeightSample& phi, const Vec& coeffs,
                std::span<double> grad) const {
    const auto& w = *phi.weights;
    const Vec mult = phi.mask.multipliers();
    const int d = config_.theta_dim, m = config_.context_dim, h = config_.hidden_units;
    const Vec xs = standardize_x(x);
    // d log q / d z_T = -z_T
    Mat gz = -pass.transforms.back().z;
    gz.array().rowwise() *= coeffs.transpose().array();
    for (std::size_t ti = layout_.size(); ti-- > 0;) {
      const auto& L = layout_[ti];
      const auto& c = pass.transforms[ti];
      const auto& M = masks_.transforms[ti];
      Eigen::Map<const Mat> w1t(w.data() + L.w1t, h, d);
      Eigen::Map<const Mat> w2(w.data() + L.w2, h, h);
      Eigen::Map<const Mat> wm(w.data() + L.wm, d, h);
      Eigen::Map<const Mat> wa(w.data() + L.wa, d, h);
      const Mat inv_scale = (-c.alpha).array().exp();
      // z = (u - mu) * exp(-alpha); log q also carries -sum(alpha).
      Mat g_mu = -(gz.array() * inv_scale.array()).matrix();
      Mat g_alpha = (-(gz.array() * c.z.array())).matrix();
      g_alpha.array().rowwise() -= coeffs.transpose().array();
      g_alpha.array() *= c.clamped.array();
      Mat gu = (gz.array() * inv_scale.array()).matrix();

      Eigen::Map<Mat> gwm(grad.data() + L.wm, d, h);
      Eigen::Map<Vec> gbm(grad.data() + L.bm, d);
      Eigen::Map<Mat> gwa(grad.data() + L.wa, d, h);
      Eigen::Map<Vec> gba(grad.data() + L.ba, d);
      gwm.noalias() += (g_mu * c.h2.transpose()).cwiseProduct(M.output);
      gbm += g_mu.rowwise().sum();
      gwa.noalias() += (g_alpha * c.h2.transpose()).cwiseProduct(M.output);
      gba += g_alpha.rowwise().sum();

      Mat g_h2 = wm.transpose() * g_mu + wa.transpose() * g_alpha;
      Mat g_a2 = (g_h2.array().colwise() * mult.segment(static_cast<Eigen::Index>(ti) * 2 * h + h, h).array() *
                  (1.0 - c.t2.array().square()))
                     .matrix();
      Eigen::Map<Mat> gw2(grad.data() + L.w2, h, h);
      Eigen::Map<Vec> gb2(grad.data() + L.b2, h);
      gw2.noalias() += (g_a2 * c.h1.transpose()).cwiseProduct(M.hidden);
      gb2 += g_a2.rowwise().sum();

      Mat g_h1 = w2.transpose() * g_a2;
      Mat g_a1 = (g_h1.array().colwise() * mult.segment(static_cast<Eigen::Index>(ti) * 2 * h, h).array() *
                  (1.0 - c.t1.array().square()))
                     .matrix();
      Eigen::Map<Mat> gw1t(grad.data() + L.w1t, h, d);
      Eigen::Map<Mat> gw1x(grad.data() + L.w1x, h, m);
      Eigen::Map<Vec> gb1(grad.data() + L.b1, h);
      gw1t.noalias() += (g_a1 * c.input.transpose()).cwiseProduct(M.input);
      const Vec g_a1_sum = g_a1.rowwise().sum();
      if (m > 0) gw1x.noalias() += g_a1_sum * xs.transpose();
      gb1 += g_a1_sum;
      gu.noalias() += w1t.transpose() * g_a1;
      gz = std::move(gu);
    }
  }

  /// Exact gradient of log q(theta | x) with respect to all weights.
  [[nodiscard]] Weights grad_log_prob(const Vec& theta, const Vec& x, const WeightSample& phi) const {
    SampleSet one(1, theta.size());
    one.row(0) = theta.transpose();
    const FlowPass pass = forward_pass(one, x, phi);
    Weights g(static_cast<std::size_t>(num_weights()), 0.0);
    backward(pass, x, phi, Vec::Ones(1), g);
    return g;
  }

  /// Maps raw thetas to base-space z (rows).
  [[nodiscard]] SampleSet to_base(const SampleSet& thetas, const Vec& x, const WeightSample& phi) const {
    check_dims(thetas.cols(), x.size());
    const Vec mult = phi.mask.multipliers();
    Mat u = standardize_theta(thetas);
    const Vec xs = standardize_x(x);
    for (std::size_t t = 0; t < layout_.size(); ++t) {
      detail::TransformCache c;
      transform_forward(*phi.weights, t, mult, u, xs, c);
      u = c.z;
    }
    return u.transpose();
  }

  /// Inverse of to_base: base-space rows to raw thetas.
  [[nodiscard]] SampleSet from_base(const SampleSet& base, const Vec& x, const WeightSample& phi) const {
    check_dims(base.cols(), x.size());
    const auto& w = *phi.weights;
    const Vec mult = phi.mask.multipliers();
    const Vec xs = standardize_x(x);
    Mat z = base.transpose();
    for (std::size_t t = layout_.size(); t-- > 0;) {
      Mat u = Mat::Zero(z.rows(), z.cols());
      const auto& order = masks_.transforms[t].order;
      for (int p = 0; p < config_.theta_dim; ++p) {
        detail::TransformCache c;
        transform_forward(w, t, mult, u, xs, c);
        const int j = order[static_cast<std::size_t>(p)];
        u.row(j) = (z.row(j).array() * c.alpha.row(j).array().exp()).matrix() + c.mu.row(j);
      }
      z = std::move(u);
    }
    Mat theta = z.array().colwise() * standardizer_.theta_sd.array();
    theta.colwise() += standardizer_.theta_mean;
    return theta.transpose();
  }

  /// n draws from q(theta | x) under the WeightSample phi.
  [[nodiscard]] SampleSet sample(Eigen::Index n, const Vec& x, const WeightSample& phi, std::uint64_t seed) const {
    if (n < 1) throw Error("flow: sample count must be >= 1");
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    SampleSet base(n, config_.theta_dim);
    for (Eigen::Index i = 0; i < n; ++i)
      for (int j = 0; j < config_.theta_dim; ++j) base(i, j) = normal(rng);
    return from_base(base, x, phi);
  }

  // ---- persistence ------------------------------------------------------

  void save(std::ostream& os) const;
  static ConditionalMaf load(std::istream& is);

 private:
  void build_layout() {
    const Eigen::Index d = config_.theta_dim, m = config_.context_dim, h = config_.hidden_units;
    layout_.clear();
    Eigen::Index off = 0;
    for (int t = 0; t < config_.num_transforms; ++t) {
      detail::TransformLayout L{};
      L.w1t = off; off += h * d;
      L.w1x = off; off += h * m;
      L.b1 = off; off += h;
      L.w2 = off; off += h * h;
      L.b2 = off; off += h;
      L.wm = off; off += d * h;
      L.bm = off; off += d;
      L.wa = off; off += d * h;
      L.ba = off; off += d;
      L.end = off;
      layout_.push_back(L);
    }
  }

  void check_dims(Eigen::Index theta_cols, Eigen::Index x_size) const {
    if (theta_cols != config_.theta_dim) throw Error("flow: theta dimension mismatch");
    if (x_size != config_.context_dim) throw Error("flow: context dimension mismatch");
  }

  [[nodiscard]] Mat standardize_theta(const SampleSet& thetas) const {
    Mat u = thetas.transpose();
    u.colwise() -= standardizer_.theta_mean;
    u.array().colwise() /= standardizer_.theta_sd.array();
    return u;
  }

  [[nodiscard]] Vec standardize_x(const Vec& x) const {
    return ((x - standardizer_.x_mean).array() / standardizer_.x_sd.array()).matrix();
  }

  void transform_forward(const Weights& w, std::size_t t, const Vec& mult, const Mat& u, const Vec& xs,
                         detail::TransformCache& c) const {
    const int d = config_.theta_dim, m = config_.context_dim, h = config_.hidden_units;
    const auto& L = layout_[t];
    Eigen::Map<const Mat> w1t(w.data() + L.w1t, h, d);
    Eigen::Map<const Mat> w1x(w.data() + L.w1x, h, m);
    Eigen::Map<const Vec> b1(w.data() + L.b1, h);
    Eigen::Map<const Mat> w2(w.data() + L.w2, h, h);
    Eigen::Map<const Vec> b2(w.data() + L.b2, h);
    Eigen::Map<const Mat> wm(w.data() + L.wm, d, h);
    Eigen::Map<const Vec> bm(w.data() + L.bm, d);
    Eigen::Map<const Mat> wa(w.data() + L.wa, d, h);
    Eigen::Map<const Vec> ba(w.data() + L.ba, d);
    const auto m1 = mult.segment(static_cast<Eigen::Index>(t) * 2 * h, h);
    const auto m2 = mult.segment(static_cast<Eigen::Index>(t) * 2 * h + h, h);

    c.input = u;
    c.context = b1;
    if (m > 0) c.context.noalias() += w1x * xs;
    Mat a1 = w1t * u;
    a1.colwise() += c.context;
    c.t1 = a1.array().tanh().matrix();
    c.h1 = (c.t1.array().colwise() * m1.array()).matrix();
    Mat a2 = w2 * c.h1;
    a2.colwise() += b2;
    c.t2 = a2.array().tanh().matrix();
    c.h2 = (c.t2.array().colwise() * m2.array()).matrix();
    c.mu = wm * c.h2;
    c.mu.colwise() += bm;
    Mat raw = wa * c.h2;
    raw.colwise() += ba;
    c.clamped = (raw.array().abs() <= kLogScaleClamp).cast<double>().matrix();
    c.alpha = raw.cwiseMax(-kLogScaleClamp).cwiseMin(kLogScaleClamp);
    c.z = ((u - c.mu).array() * (-c.alpha).array().exp()).matrix();
  }

  FlowConfig config_{};
  MadeMaskSet masks_{};
  Standardizer standardizer_{};
  std::vector<detail::TransformLayout> layout_{};
  std::shared_ptr<const Weights> weights_{};
  std::uint64_t init_seed_ = 0;
};

/// log of the arithmetic mean of the per-WeightSample densities.
inline double marginal_log_prob(const ConditionalMaf& flow, const Vec& theta, const Vec& x,
                                std::span<const WeightSample> phis) {
  if (phis.empty()) throw Error("marginal_log_prob: no weight samples");
  std::vector<double> logs;
  logs.reserve(phis.size());
  for (const auto& phi : phis) {
    try {
      logs.push_back(flow.log_prob(theta, x, phi));
    } catch (const EvaluationError&) {
      logs.push_back(-std::numeric_limits<double>::infinity());
    }
  }
  const double r = log_sum_exp(logs);
  if (!std::isfinite(r)) throw EvaluationError("marginal_log_prob: every component is non-finite");
  return r - std::log(static_cast<double>(phis.size()));
}

// ---- checkpoint format ----------------------------------------------------
//
// Little-endian binary: magic "ASNPEFLW", u32 version, config, standardizer,
// weights. Doubles are written bit-for-bit.

inline constexpr std::uint32_t kFlowCheckpointVersion = 1;

namespace detail {

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw Error("checkpoint: truncated stream");
  return v;
}

inline void put_vec(std::ostream& os, const Vec& v) {
  put<std::uint64_t>(os, static_cast<std::uint64_t>(v.size()));
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(sizeof(double) * v.size()));
}

inline Vec get_vec(std::istream& is) {
  const auto n = get<std::uint64_t>(is);
  if (n > (1ULL << 32)) throw Error("checkpoint: implausible vector length");
  Vec v(static_cast<Eigen::Index>(n));
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(sizeof(double) * n));
  if (!is) throw Error("checkpoint: truncated stream");
  return v;
}

}  // namespace detail

inline void ConditionalMaf::save(std::ostream& os) const {
  os.write("ASNPEFLW", 8);
  detail::put(os, kFlowCheckpointVersion);
  detail::put<std::int32_t>(os, config_.theta_dim);
  detail::put<std::int32_t>(os, config_.context_dim);
  detail::put<std::int32_t>(os, config_.num_transforms);
  detail::put<std::int32_t>(os, config_.hidden_units);
  detail::put(os, config_.dropout_rate);
  detail::put<std::int32_t>(os, static_cast<std::int32_t>(config_.permutation));
  detail::put(os, config_.permutation_seed);
  detail::put(os, init_seed_);
  detail::put_vec(os, standardizer_.theta_mean);
  detail::put_vec(os, standardizer_.theta_sd);
  detail::put_vec(os, standardizer_.x_mean);
  detail::put_vec(os, standardizer_.x_sd);
  detail::put_vec(os, Eigen::Map<const Vec>(weights_->data(), static_cast<Eigen::Index>(weights_->size())));
  if (!os) throw Error("checkpoint: write failed");
}

inline ConditionalMaf ConditionalMaf::load(std::istream& is) {
  std::array<char, 8> magic{};
  is.read(magic.data(), 8);
  if (!is || std::string(magic.data(), 8) != "ASNPEFLW") throw Error("checkpoint: bad magic");
  const auto version = detail::get<std::uint32_t>(is);
  if (version != kFlowCheckpointVersion) throw Error("checkpoint: unsupported version " + std::to_string(version));
  FlowConfig cfg;
  cfg.theta_dim = detail::get<std::int32_t>(is);
  cfg.context_dim = detail::get<std::int32_t>(is);
  cfg.num_transforms = detail::get<std::int32_t>(is);
  cfg.hidden_units = detail::get<std::int32_t>(is);
  cfg.dropout_rate = detail::get<double>(is);
  cfg.permutation = static_cast<PermutationScheme>(detail::get<std::int32_t>(is));
  cfg.permutation_seed = detail::get<std::uint64_t>(is);
  const auto init_seed = detail::get<std::uint64_t>(is);
  ConditionalMaf flow(cfg, init_seed);
  Standardizer s;
  s.theta_mean = detail::get_vec(is);
  s.theta_sd = detail::get_vec(is);
  s.x_mean = detail::get_vec(is);
  s.x_sd = detail::get_vec(is);
  flow.set_standardizer(std::move(s));
  const Vec w = detail::get_vec(is);
  flow.set_weights(Weights(w.data(), w.data() + w.size()));
  return flow;
}

}  // namespace asnpe
