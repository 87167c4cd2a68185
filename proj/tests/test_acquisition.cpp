#include "asnpe/acquisition.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace asnpe;
using asnpe::testing::randomize;
using asnpe::testing::small_config;

namespace {

std::vector<WeightSample> phis_of(const ConditionalMaf& flow, int s, std::uint64_t seed) {
  std::vector<WeightSample> out;
  for (int i = 0; i < s; ++i) out.push_back(flow.weight_sample(derive_seed(seed, i)));
  return out;
}

std::vector<ScoredCandidate> with_scores(std::initializer_list<double> scores) {
  std::vector<ScoredCandidate> c;
  std::size_t i = 0;
  for (double s : scores) {
    ScoredCandidate sc;
    sc.index = i++;
    sc.score = s;
    sc.log_score = s > 0 ? std::log(s) : -INFINITY;
    c.push_back(sc);
  }
  return c;
}

}  // namespace

TEST(ComponentDensities, ZeroDropoutGivesIdenticalComponents) {
  ConditionalMaf flow(small_config(2, 1, 8, 2, 0.0), 1);
  randomize(flow, 0.5, 3);
  Rng rng(1);
  SampleSet th(20, 2);
  for (int i = 0; i < 20; ++i) th.row(i) = standard_normal_vec(2, rng).transpose();
  const auto c = component_densities(flow, th, Vec::Ones(1), phis_of(flow, 5, 2));
  for (int i = 0; i < 20; ++i) EXPECT_EQ(c.density.row(i).maxCoeff(), c.density.row(i).minCoeff());
}

TEST(ComponentDensities, SingleSampleMarginalIsTheComponent) {
  ConditionalMaf flow(small_config(2, 1, 8, 2, 0.25), 1);
  randomize(flow, 0.5, 3);
  SampleSet th(1, 2);
  th << 0.2, -0.3;
  const auto phis = phis_of(flow, 1, 2);
  const auto c = component_densities(flow, th, Vec::Ones(1), phis);
  EXPECT_NEAR(std::log(c.density(0, 0)) + c.log_shift, flow.log_prob(th.row(0).transpose(), Vec::Ones(1), phis[0]),
              1e-12);
  EXPECT_NEAR(std::log(c.density.row(0).mean()) + c.log_shift,
              marginal_log_prob(flow, th.row(0).transpose(), Vec::Ones(1), phis), 1e-12);
}

TEST(ComponentDensities, InvariantToWeightSampleOrder) {
  ConditionalMaf flow(small_config(2, 1, 8, 2, 0.25), 1);
  randomize(flow, 0.5, 3);
  Rng rng(1);
  SampleSet th(10, 2);
  for (int i = 0; i < 10; ++i) th.row(i) = standard_normal_vec(2, rng).transpose();
  auto phis = phis_of(flow, 6, 2);
  const auto a = component_densities(flow, th, Vec::Ones(1), phis);
  std::reverse(phis.begin(), phis.end());
  const auto b = component_densities(flow, th, Vec::Ones(1), phis);
  EXPECT_EQ(a.log_shift, b.log_shift);
  for (int i = 0; i < 10; ++i)
    for (int s = 0; s < 6; ++s) EXPECT_EQ(a.density(i, s), b.density(i, 5 - s));
}

TEST(Score, HandExample) {
  const std::vector<double> comp{0.2, 0.4};
  EXPECT_NEAR(acquisition_score(comp, 0.5, 1.0), 0.005, 1e-12);
}

TEST(Score, EqualComponentsScoreZero) {
  const std::vector<double> comp(7, 0.123456789);
  EXPECT_EQ(acquisition_score(comp, 3.0, 1.0), 0.0);
  EXPECT_EQ(component_variance(comp), 0.0);
}

TEST(Score, LevelSetAndScaleEquivariance) {
  const std::vector<double> comp{0.1, 0.5, 0.25, 0.3};
  const double base = acquisition_score(comp, 0.7, 1.0);
  const double n = 4.0;
  // Multiplying the proposal by n and the squared deviation by 1/n leaves the score fixed.
  std::vector<double> shrunk;
  const double mean = 0.2875;
  for (double c : comp) shrunk.push_back(mean + (c - mean) / std::sqrt(n));
  EXPECT_NEAR(acquisition_score(shrunk, 0.7 * n, 1.0), base, 1e-12 * base + 1e-15);
  std::vector<double> scaled;
  for (double c : comp) scaled.push_back(3.0 * c);
  EXPECT_NEAR(acquisition_score(scaled, 0.7, 1.0), 9.0 * base, 1e-12);
}

TEST(Score, DisagreementOnlyEqualsUnitProposal) {
  const std::vector<double> comp{0.1, 0.5, 0.25};
  EXPECT_EQ(acquisition_score(comp, 0.3, 1.0, false), acquisition_score(comp, 1.0, 1.0, true));
}

TEST(Score, MonotoneInLambda) {
  const std::vector<double> small{0.1, 0.5}, big{0.0, 4.0};
  ASSERT_LT(component_variance(small), 1.0);
  ASSERT_GT(component_variance(big), 1.0);
  EXPECT_GT(acquisition_score(small, 1.0, 0.5), acquisition_score(small, 1.0, 1.0));
  EXPECT_GT(acquisition_score(small, 1.0, 1.0), acquisition_score(small, 1.0, 2.0));
  EXPECT_LT(acquisition_score(big, 1.0, 0.5), acquisition_score(big, 1.0, 1.0));
}

TEST(Score, NeedsTwoComponents) {
  const std::vector<double> one{0.1};
  EXPECT_THROW(acquisition_score(one, 1.0, 1.0), Error);
}

TEST(ScoreCandidates, ZeroDropoutScoresAllZero) {
  ConditionalMaf flow(small_config(2, 1, 8, 2, 0.0), 1);
  randomize(flow, 0.5, 3);
  Rng rng(1);
  SampleSet th(30, 2);
  for (int i = 0; i < 30; ++i) th.row(i) = standard_normal_vec(2, rng).transpose();
  const auto sc = score_candidates(flow, th, Vec::Zero(30), Vec::Ones(1), phis_of(flow, 10, 3), {});
  for (const auto& c : sc) EXPECT_EQ(c.score, 0.0);
  const auto pick = select_top_b(sc, 5);
  EXPECT_EQ(pick, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
}

TEST(ScoreCandidates, MatchesDirectEvaluation) {
  ConditionalMaf flow(small_config(2, 1, 8, 2, 0.3), 1);
  randomize(flow, 0.5, 3);
  Rng rng(1);
  SampleSet th(8, 2);
  for (int i = 0; i < 8; ++i) th.row(i) = standard_normal_vec(2, rng).transpose();
  const Vec qld = Vec::LinSpaced(8, -2.0, -1.0);
  const auto phis = phis_of(flow, 4, 3);
  const auto sc = score_candidates(flow, th, qld, Vec::Ones(1), phis, {});
  for (int i = 0; i < 8; ++i) {
    std::vector<double> dens;
    for (const auto& p : phis) dens.push_back(std::exp(flow.log_prob(th.row(i).transpose(), Vec::Ones(1), p)));
    const double direct = acquisition_score(dens, std::exp(qld[i]), 1.0);
    const double rescaled = sc[i].score * std::exp(2.0 * sc[i].log_shift);
    EXPECT_NEAR(rescaled, direct, 1e-9 * direct);
  }
}

TEST(SelectTopB, SortSemanticsAndTies) {
  const auto c = with_scores({3, 1, 2});
  auto pick = select_top_b(c, 2);
  std::sort(pick.begin(), pick.end());
  EXPECT_EQ(pick, (std::vector<std::size_t>{0, 2}));
  const auto all = with_scores({1, 1, 1, 1});
  EXPECT_EQ(select_top_b(all, 4), (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(select_top_b(all, 2), (std::vector<std::size_t>{0, 1}));
  EXPECT_THROW(select_top_b(all, 5), Error);
}

TEST(SelectTopB, PermutationOnlyReordersTies) {
  auto c = with_scores({5, 2, 2, 9, 1});
  const auto a = select_top_b(c, 3);
  std::swap(c[1], c[2]);  // swap two tied entries (indices travel with them)
  const auto b = select_top_b(c, 3);
  EXPECT_EQ(a[0], b[0]);
  EXPECT_EQ(a[1], b[1]);
  EXPECT_EQ(std::set<std::size_t>(a.begin(), a.end()).count(3), 1u);
  EXPECT_NE(a[2], b[2]);
}

TEST(AcquisitionDump, HasDocumentedColumns) {
  auto c = with_scores({3, 1});
  std::ostringstream os;
  const std::vector<std::size_t> sel{0};
  write_acquisition_dump(os, c, sel);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')),
            "candidate,proposal_density,marginal_density,variance,score,selected,log_score,log_shift");
}

namespace {

struct GaussFamily {
  std::vector<double> means;
  [[nodiscard]] std::size_t size() const { return means.size(); }
  [[nodiscard]] double log_prob(std::size_t s, const Vec& t) const {
    return -0.5 * kLog2Pi - 0.5 * (t[0] - means[s]) * (t[0] - means[s]);
  }
  Vec sample(std::size_t s, Rng& rng) const { return Vec::Constant(1, means[s] + std::normal_distribution<>(0, 1)(rng)); }
};

double quadrature_kl(const GaussFamily& f, KlDirection dir) {
  auto pdf = [&](std::size_t s, double t) { return std::exp(f.log_prob(s, Vec::Constant(1, t))); };
  const double h = 1e-3;
  double total = 0.0;
  for (double t = -15; t < 16; t += h) {
    double m = 0.0;
    for (std::size_t s = 0; s < f.size(); ++s) m += pdf(s, t) / f.size();
    for (std::size_t s = 0; s < f.size(); ++s) {
      const double p = pdf(s, t);
      if (p <= 0 || m <= 0) continue;
      total += (dir == KlDirection::component_to_marginal ? p * std::log(p / m) : m * std::log(m / p)) * h / f.size();
    }
  }
  return total;
}

}  // namespace

TEST(DistributionalUncertainty, IdenticalComponentsGiveZero) {
  GaussFamily f{{0.3, 0.3, 0.3}};
  const auto e = distributional_uncertainty(f, 2000, 1);
  EXPECT_LT(std::abs(e.value), 3 * e.standard_error + 1e-12);
}

TEST(DistributionalUncertainty, MatchesQuadratureInBothDirections) {
  GaussFamily f{{0.0, 1.0}};
  for (auto dir : {KlDirection::component_to_marginal, KlDirection::marginal_to_component}) {
    const double truth = quadrature_kl(f, dir);
    const auto e = distributional_uncertainty(f, 100000, 7, dir);
    EXPECT_TRUE(e.available);
    EXPECT_NEAR(e.value, truth, 0.05 * truth) << "direction " << static_cast<int>(dir);
    EXPECT_GT(e.value, -3 * e.standard_error);
  }
}

TEST(DistributionalUncertainty, WorksOnFlowComponents) {
  ConditionalMaf flow(small_config(2, 1, 8, 2, 0.0), 1);
  randomize(flow, 0.5, 3);
  const auto phis = phis_of(flow, 3, 1);
  const auto e = distributional_uncertainty(FlowComponents{&flow, Vec::Ones(1), phis}, 500, 2);
  EXPECT_LT(std::abs(e.value), 3 * e.standard_error + 1e-12);
}

TEST(MiIdentity, IndependentJointIsZero) {
  Mat j(2, 3);
  j << 0.1, 0.2, 0.2, 0.1, 0.2, 0.2;
  const auto r = mi_identity_oracle(j);
  EXPECT_NEAR(r.mutual_information, 0.0, 1e-15);
  EXPECT_NEAR(r.expected_kl, 0.0, 1e-15);
}

TEST(MiIdentity, TwoByTwoExample) {
  Mat j(2, 2);
  j << 0.4, 0.1, 0.1, 0.4;
  const auto r = mi_identity_oracle(j);
  // Independent evaluation: 0.8 log(0.4 / 0.25) + 0.2 log(0.1 / 0.25).
  const double expected = 0.8 * std::log(1.6) + 0.2 * std::log(0.4);
  EXPECT_NEAR(r.mutual_information, expected, 1e-14);
  EXPECT_NEAR(r.expected_kl, expected, 1e-14);
  EXPECT_NEAR(expected, 0.1927, 5e-5);
}

TEST(MiIdentity, DiagonalJointGivesMarginalEntropy) {
  Mat j = Mat::Zero(3, 3);
  j.diagonal() << 0.5, 0.3, 0.2;
  const double h = -(0.5 * std::log(0.5) + 0.3 * std::log(0.3) + 0.2 * std::log(0.2));
  const auto r = mi_identity_oracle(j);
  EXPECT_NEAR(r.mutual_information, h, 1e-14);
  EXPECT_NEAR(r.expected_kl, h, 1e-14);
}

TEST(MiIdentity, HoldsOnRandomTablesAndRejectsBadInput) {
  Rng rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 50; ++t) {
    Mat j(2 + t % 4, 2 + t % 5);
    for (Eigen::Index i = 0; i < j.size(); ++i) j.data()[i] = u(rng);
    j /= j.sum();
    const auto r = mi_identity_oracle(j);
    EXPECT_NEAR(r.mutual_information, r.expected_kl, 1e-12);
  }
  Mat bad(2, 2);
  bad << 0.5, 0.5, 0.5, 0.5;
  EXPECT_THROW(mi_identity_oracle(bad), Error);
  bad << -0.1, 0.6, 0.3, 0.2;
  EXPECT_THROW(mi_identity_oracle(bad), Error);
}
