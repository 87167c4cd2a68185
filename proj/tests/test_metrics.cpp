#include "asnpe/metrics.hpp"

#include <gtest/gtest.h>

using namespace asnpe;

namespace {

SampleSet gaussian(int n, int d, double mean, double sd, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> z;
  SampleSet s(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) s(i, j) = mean + sd * z(rng);
  return s;
}

class Identity final : public Simulator {
 public:
  explicit Identity(int d) : d_(d) {}
  int theta_dim() const override { return d_; }
  int x_dim() const override { return d_; }
  std::vector<SimOutcome> simulate(const std::vector<Vec>& th, std::span<const std::uint64_t>) override {
    std::vector<SimOutcome> out;
    for (const auto& t : th) {
      if (t[0] < 0) out.push_back(SimOutcome::failure("negative"));
      else out.push_back(SimOutcome::success(t));
    }
    return out;
  }

 private:
  int d_;
};

// Direct O(n^2) unbiased estimator written independently of the library.
double mmd_oracle(const SampleSet& p, const SampleSet& q, double h) {
  auto k = [&](const Vec& a, const Vec& b) { return std::exp(-(a - b).squaredNorm() / (2 * h * h)); };
  const auto m = p.rows(), n = q.rows();
  double xx = 0, yy = 0, xy = 0;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      if (i != j) xx += k(p.row(i), p.row(j));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j) yy += k(q.row(i), q.row(j));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) xy += k(p.row(i), q.row(j));
  return xx / (m * (m - 1.0)) + yy / (n * (n - 1.0)) - 2 * xy / double(m * n);
}

}  // namespace

TEST(Rmsne, HandExample) {
  EXPECT_NEAR(rmsne(Vec::Constant(2, 1.0) + Vec::Unit(2, 0), Vec::Ones(2)), std::sqrt(2.0) / 2.0, 1e-12);
  const Vec x = (Vec(4) << 3, 1, 4, 1).finished();
  EXPECT_EQ(rmsne(x, x), 0.0);
}

TEST(Rmsne, ScaleInvariantTranslationSensitive) {
  const Vec a = (Vec(3) << 1, 2, 3).finished(), b = (Vec(3) << 2, 2, 5).finished();
  EXPECT_NEAR(rmsne(7.5 * a, 7.5 * b), rmsne(a, b), 1e-14);
  EXPECT_GT(std::abs(rmsne(a.array() + 10.0, b.array() + 10.0) - rmsne(a, b)), 0.1);
}

TEST(Rmsne, NonPositiveReferenceIsAnError) {
  EXPECT_THROW(rmsne(Vec::Ones(2), Vec::Zero(2)), Error);
  EXPECT_THROW(rmsne(Vec::Ones(2), Vec::Ones(3)), Error);
}

TEST(Mmd, MatchesDirectEstimator) {
  const auto p = gaussian(60, 2, 0.0, 1.0, 1), q = gaussian(70, 2, 0.5, 1.0, 2);
  const double h = median_pairwise_distance(p, q);
  EXPECT_NEAR(mmd(p, q).value, mmd_oracle(p, q, h), 1e-12);
}

TEST(Mmd, SymmetricAndSeparating) {
  const auto p = gaussian(500, 1, 0.0, 1.0, 3), q = gaussian(500, 1, 3.0, 1.0, 4);
  const double pq = mmd(p, q).value;
  EXPECT_GT(pq, 0.5);
  EXPECT_NEAR(mmd(q, p).value, pq, 1e-12);
}

TEST(Mmd, UnbiasedUnderNull) {
  std::vector<double> v;
  for (int t = 0; t < 200; ++t) v.push_back(mmd(gaussian(50, 2, 0, 1, 100 + t), gaussian(50, 2, 0, 1, 1000 + t)).value);
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  double s2 = 0;
  for (double x : v) s2 += (x - m) * (x - m);
  const double se = std::sqrt(s2 / (v.size() - 1) / v.size());
  EXPECT_LT(std::abs(m), 3 * se);
  // Single split lands within 3 spreads of 0.
  EXPECT_LT(std::abs(v.front()), 3 * std::sqrt(s2 / (v.size() - 1)));
}

TEST(Mmd, IdenticalPointsFallBackToUnitBandwidth) {
  const SampleSet p = SampleSet::Ones(10, 2);
  const auto r = mmd(p, p);
  EXPECT_NEAR(r.value, 0.0, 1e-12);
  EXPECT_EQ(r.warnings.size(), 2u);  // small sample and zero bandwidth
}

TEST(C2st, SeparableSupports) {
  const auto r = c2st(gaussian(200, 2, 0.0, 0.01, 1), gaussian(200, 2, 10.0, 0.01, 2), {.seed = 3});
  EXPECT_GT(r.value, 0.99);
}

TEST(C2st, NullCalibration) {
  int inside = 0;
  for (int s = 0; s < 20; ++s) {
    const auto all = gaussian(2000, 2, 0.0, 1.0, 500 + s);
    const double acc = c2st(all.topRows(1000), all.bottomRows(1000), {.seed = static_cast<std::uint64_t>(s)}).value;
    if (acc >= 0.45 && acc <= 0.55) ++inside;
  }
  EXPECT_GE(inside, 19);
}

TEST(C2st, DeterministicAndDropsConstantFeatures) {
  auto p = gaussian(120, 3, 0.0, 1.0, 7), q = gaussian(120, 3, 0.3, 1.0, 8);
  p.col(2).setConstant(4.0);
  q.col(2).setConstant(4.0);
  const auto a = c2st(p, q, {.seed = 1}), b = c2st(p, q, {.seed = 1});
  EXPECT_EQ(a.value, b.value);
  ASSERT_EQ(a.warnings.size(), 1u);
  EXPECT_NE(a.warnings[0].find("constant"), std::string::npos);
  EXPECT_GE(a.value, 0.0);
  EXPECT_LE(a.value, 1.0);
}

TEST(MedianDistance, IdentitySimulator) {
  Identity sim(2);
  const Vec x_o = Vec::Zero(2);
  EXPECT_EQ(median_distance(SampleSet::Zero(5, 2), sim, x_o, 1).value, 0.0);
  SampleSet post(4, 2);
  post << 1, 0, 0, 2, 3, 0, -1, 0;  // last one fails
  const auto r = median_distance(post, sim, x_o, 1);
  EXPECT_EQ(r.value, 2.0);
  EXPECT_EQ(r.failures, 1u);
}

TEST(PosteriorMeanError, Examples) {
  SampleSet a(2, 1);
  a << 1.0, 2.0;
  EXPECT_EQ(posterior_mean_error(a, Vec::Constant(1, 1.5), Vec::Constant(1, 0.5)).value, 0.0);
  EXPECT_EQ(posterior_mean_error(a, Vec::Constant(1, 1.0), Vec::Constant(1, 0.5)).value, 1.0);
  SampleSet b(1, 2);
  b << 1.0, 5.0;
  const auto r = posterior_mean_error(b, Vec::Zero(2), (Vec(2) << 2.0, 0.0).finished());
  EXPECT_EQ(r.value, 0.5);
  EXPECT_EQ(r.warnings.size(), 1u);
}
