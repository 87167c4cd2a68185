#pragma once

// Prior distributions over theta: factorized products of 1-D uniform or
// truncated-normal factors, and full-covariance Gaussians.

#include "asnpe/core.hpp"

#include <json.hpp>

namespace asnpe {

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/// Standard normal quantile (Acklam's rational approximation plus one Halley step).
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    if (p == 0.0) return -std::numeric_limits<double>::infinity();
    if (p == 1.0) return std::numeric_limits<double>::infinity();
    throw Error("normal_quantile: p outside [0, 1]");
  }
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                 1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                 6.680131188771972e+01,  -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                 -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                 3.754408661907416e+00};
  constexpr double lo = 0.02425, hi = 1.0 - lo;
  double x;
  if (p < lo) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= hi) {
    const double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double e = normal_cdf(x) - p;
  const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
  return x - u / (1.0 + 0.5 * x * u);
}

/// One factor of a product prior: uniform on [lower, upper], or a normal
/// (mean, scale) truncated to [lower, upper] (bounds may be infinite).
struct PriorFactor {
  enum class Kind { uniform, truncated_normal };
  Kind kind = Kind::uniform;
  double lower = 0.0;
  double upper = 1.0;
  double mean = 0.0;
  double scale = 1.0;

  static PriorFactor uniform(double lo, double hi) { return {Kind::uniform, lo, hi, 0.0, 1.0}; }
  static PriorFactor normal(double mean, double scale, double lo = -std::numeric_limits<double>::infinity(),
                            double hi = std::numeric_limits<double>::infinity()) {
    return {Kind::truncated_normal, lo, hi, mean, scale};
  }

  void validate() const {
    if (!(lower < upper)) throw ConfigError("prior: factor needs lower < upper");
    if (kind == Kind::uniform && !(std::isfinite(lower) && std::isfinite(upper)))
      throw ConfigError("prior: uniform factor needs finite bounds");
    if (kind == Kind::truncated_normal && !(scale > 0.0)) throw ConfigError("prior: normal factor needs scale > 0");
    if (kind == Kind::truncated_normal && mass() <= 0.0) throw ConfigError("prior: truncation leaves no mass");
  }

  [[nodiscard]] double mass() const {
    return normal_cdf((upper - mean) / scale) - normal_cdf((lower - mean) / scale);
  }

  [[nodiscard]] bool contains(double v) const { return v >= lower && v <= upper; }

  [[nodiscard]] double log_density(double v) const {
    if (!contains(v)) return -std::numeric_limits<double>::infinity();
    if (kind == Kind::uniform) return -std::log(upper - lower);
    const double z = (v - mean) / scale;
    return -0.5 * z * z - 0.5 * kLog2Pi - std::log(scale) - std::log(mass());
  }

  double sample(Rng& rng) const {
    if (kind == Kind::uniform) return std::uniform_real_distribution<double>(lower, upper)(rng);
    const double m = mass();
    if (m > 0.05) {
      std::normal_distribution<double> normal(mean, scale);
      for (;;) {
        const double v = normal(rng);
        if (contains(v)) return v;
      }
    }
    const double a = normal_cdf((lower - mean) / scale);
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const double v = mean + scale * normal_quantile(a + u * m);
    return std::clamp(v, lower, upper);
  }

  /// Mean and variance of the (truncated) factor.
  [[nodiscard]] std::pair<double, double> moments() const {
    if (kind == Kind::uniform) return {0.5 * (lower + upper), (upper - lower) * (upper - lower) / 12.0};
    const double alpha = (lower - mean) / scale, beta = (upper - mean) / scale;
    auto pdf = [](double z) { return std::isfinite(z) ? std::exp(-0.5 * z * z) / std::sqrt(2 * std::numbers::pi) : 0.0; };
    auto zpdf = [&](double z) { return std::isfinite(z) ? z * pdf(z) : 0.0; };
    const double zm = mass();
    const double shift = (pdf(alpha) - pdf(beta)) / zm;
    const double var = scale * scale * (1.0 + (zpdf(alpha) - zpdf(beta)) / zm - shift * shift);
    return {mean + scale * shift, var};
  }
};

class PriorSpec {
 public:
  enum class Kind { product, gaussian };

  PriorSpec() = default;

  static PriorSpec product(std::vector<PriorFactor> factors) {
    PriorSpec p;
    p.kind_ = Kind::product;
    for (const auto& f : factors) f.validate();
    p.factors_ = std::move(factors);
    return p;
  }

  static PriorSpec uniform_box(const Vec& lower, const Vec& upper) {
    std::vector<PriorFactor> f;
    for (Eigen::Index i = 0; i < lower.size(); ++i) f.push_back(PriorFactor::uniform(lower[i], upper[i]));
    return product(std::move(f));
  }

  static PriorSpec standard_normal(int dim) {
    return product(std::vector<PriorFactor>(static_cast<std::size_t>(dim), PriorFactor::normal(0.0, 1.0)));
  }

  static PriorSpec gaussian(Vec mean, const Mat& covariance) {
    PriorSpec p;
    p.kind_ = Kind::gaussian;
    p.mean_ = std::move(mean);
    p.covariance_ = covariance;
    Eigen::LLT<Mat> llt(covariance);
    if (llt.info() != Eigen::Success) throw ConfigError("prior: covariance is not positive definite");
    p.chol_ = llt.matrixL();
    p.log_norm_ = -0.5 * static_cast<double>(p.mean_.size()) * kLog2Pi - p.chol_.diagonal().array().log().sum();
    return p;
  }

  [[nodiscard]] Kind kind() const { return kind_; }
  [[nodiscard]] const std::vector<PriorFactor>& factors() const { return factors_; }
  [[nodiscard]] int dim() const {
    return kind_ == Kind::product ? static_cast<int>(factors_.size()) : static_cast<int>(mean_.size());
  }

  /// True when every coordinate of the support is the whole real line.
  [[nodiscard]] bool unbounded() const {
    if (kind_ == Kind::gaussian) return true;
    return std::all_of(factors_.begin(), factors_.end(),
                       [](const PriorFactor& f) { return !std::isfinite(f.lower) && !std::isfinite(f.upper); });
  }

  [[nodiscard]] bool contains(const Vec& theta) const {
    if (theta.size() != dim()) return false;
    if (!theta.allFinite()) return false;
    if (kind_ == Kind::gaussian) return true;
    for (std::size_t i = 0; i < factors_.size(); ++i)
      if (!factors_[i].contains(theta[static_cast<Eigen::Index>(i)])) return false;
    return true;
  }

  [[nodiscard]] double log_density(const Vec& theta) const {
    if (!contains(theta)) return -std::numeric_limits<double>::infinity();
    if (kind_ == Kind::gaussian) {
      const Vec r = chol_.triangularView<Eigen::Lower>().solve(theta - mean_);
      return log_norm_ - 0.5 * r.squaredNorm();
    }
    double s = 0.0;
    for (std::size_t i = 0; i < factors_.size(); ++i) s += factors_[i].log_density(theta[static_cast<Eigen::Index>(i)]);
    return s;
  }

  [[nodiscard]] SampleSet sample(Eigen::Index n, Rng& rng) const {
    SampleSet out(n, dim());
    if (kind_ == Kind::gaussian) {
      for (Eigen::Index i = 0; i < n; ++i) out.row(i) = (mean_ + chol_ * standard_normal_vec(dim(), rng)).transpose();
      return out;
    }
    for (Eigen::Index i = 0; i < n; ++i)
      for (std::size_t j = 0; j < factors_.size(); ++j) out(i, static_cast<Eigen::Index>(j)) = factors_[j].sample(rng);
    return out;
  }

  [[nodiscard]] Vec mean() const {
    if (kind_ == Kind::gaussian) return mean_;
    Vec m(dim());
    for (std::size_t j = 0; j < factors_.size(); ++j) m[static_cast<Eigen::Index>(j)] = factors_[j].moments().first;
    return m;
  }

  [[nodiscard]] const Mat& covariance() const { return covariance_; }

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json j;
    if (kind_ == Kind::gaussian) {
      j["kind"] = "gaussian";
      j["mean"] = to_std(mean_);
      j["covariance_row_major"] = nlohmann::json::array();
      for (Eigen::Index r = 0; r < covariance_.rows(); ++r)
        for (Eigen::Index c = 0; c < covariance_.cols(); ++c) j["covariance_row_major"].push_back(covariance_(r, c));
      return j;
    }
    j["kind"] = "product";
    j["factors"] = nlohmann::json::array();
    for (const auto& f : factors_) {
      nlohmann::json fj;
      fj["kind"] = f.kind == PriorFactor::Kind::uniform ? "uniform" : "truncated_normal";
      auto bound = [](double v) -> nlohmann::json {
        if (std::isfinite(v)) return v;
        return v > 0 ? "inf" : "-inf";
      };
      fj["lower"] = bound(f.lower);
      fj["upper"] = bound(f.upper);
      if (f.kind == PriorFactor::Kind::truncated_normal) {
        fj["mean"] = f.mean;
        fj["scale"] = f.scale;
      }
      j["factors"].push_back(fj);
    }
    return j;
  }

  static PriorSpec from_json(const nlohmann::json& j) {
    const std::string kind = j.at("kind");
    if (kind == "gaussian") {
      const auto mean = j.at("mean").get<std::vector<double>>();
      const auto cov = j.at("covariance_row_major").get<std::vector<double>>();
      const auto n = static_cast<Eigen::Index>(mean.size());
      if (static_cast<Eigen::Index>(cov.size()) != n * n) throw ConfigError("prior: covariance has wrong size");
      Mat c(n, n);
      for (Eigen::Index r = 0; r < n; ++r)
        for (Eigen::Index k = 0; k < n; ++k) c(r, k) = cov[static_cast<std::size_t>(r * n + k)];
      return gaussian(to_vec(mean), c);
    }
    if (kind == "uniform_box") {
      return uniform_box(to_vec(j.at("lower").get<std::vector<double>>()),
                         to_vec(j.at("upper").get<std::vector<double>>()));
    }
    if (kind != "product") throw ConfigError("prior: unknown kind '" + kind + "'");
    auto bound = [](const nlohmann::json& v) {
      if (v.is_string()) {
        const std::string s = v;
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        throw ConfigError("prior: bad bound '" + s + "'");
      }
      return v.get<double>();
    };
    std::vector<PriorFactor> factors;
    for (const auto& fj : j.at("factors")) {
      PriorFactor f;
      const std::string fk = fj.at("kind");
      f.kind = fk == "uniform" ? PriorFactor::Kind::uniform : PriorFactor::Kind::truncated_normal;
      if (fk != "uniform" && fk != "truncated_normal") throw ConfigError("prior: unknown factor kind '" + fk + "'");
      f.lower = fj.contains("lower") ? bound(fj["lower"]) : -std::numeric_limits<double>::infinity();
      f.upper = fj.contains("upper") ? bound(fj["upper"]) : std::numeric_limits<double>::infinity();
      f.mean = fj.value("mean", 0.0);
      f.scale = fj.value("scale", 1.0);
      factors.push_back(f);
    }
    return product(std::move(factors));
  }

 private:
  Kind kind_ = Kind::product;
  std::vector<PriorFactor> factors_;
  Vec mean_;
  Mat covariance_;
  Mat chol_;
  double log_norm_ = 0.0;
};

}  // namespace asnpe
