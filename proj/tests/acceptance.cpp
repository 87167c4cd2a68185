// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails.

#include "asnpe/experiment.hpp"
#include "test_util.hpp"

#include <iostream>
#include <map>

namespace {

using namespace asnpe;
using asnpe::testing::fd_jacobian;
using asnpe::testing::randomize;
using asnpe::testing::small_config;

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    if (!detail.empty()) detail += "; ";
    detail += (ok ? "" : "FAILED ") + what;
  }
};

std::string num(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

double sd_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

double pooled_se(const std::vector<double>& a, const std::vector<double>& b) {
  return std::sqrt(sd_of(a) * sd_of(a) / static_cast<double>(a.size()) +
                   sd_of(b) * sd_of(b) / static_cast<double>(b.size()));
}

// ---- 1 ---------------------------------------------------------------------------------

Verdict flow_suite() {
  Verdict v;
  double worst_logdet = 0.0;
  {
    ConditionalMaf flow(small_config(3, 2, 10, 3, 0.25), 2);
    randomize(flow, 0.5, 21);
    flow.set_standardizer({Vec::Constant(3, 0.5), Vec::Constant(3, 2.0), Vec::Zero(2), Vec::Ones(2)});
    const auto phi = flow.weight_sample(7);
    Rng rng(1);
    for (int t = 0; t < 20; ++t) {
      const Vec th = standard_normal_vec(3, rng), x = standard_normal_vec(2, rng);
      SampleSet one(1, 3);
      one.row(0) = th.transpose();
      const Vec z = flow.to_base(one, x, phi).row(0).transpose();
      const double logdet = flow.log_prob(th, x, phi) - (-0.5 * z.squaredNorm() - 1.5 * kLog2Pi);
      const double fd = std::log(std::abs(fd_jacobian(flow, th, x, phi).determinant()));
      worst_logdet = std::max(worst_logdet, std::abs(logdet - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  v.require(worst_logdet < 1e-4, "log-det rel err " + num(worst_logdet, 2));

  double lo = 1e9, hi = -1e9;
  for (int t = 0; t < 5; ++t) {
    ConditionalMaf flow(small_config(2, 1, 8, 3, 0.25), 10 + t);
    randomize(flow, 0.4, 100 + t);
    const double h = 0.04;
    const int n = 500;
    SampleSet grid(n * n, 2);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) grid.row(i * n + j) << -10 + (i + 0.5) * h, -10 + (j + 0.5) * h;
    const double mass =
        flow.log_prob_batch(grid, Vec::Constant(1, 0.5), flow.weight_sample(50 + t)).array().exp().sum() * h * h;
    lo = std::min(lo, mass);
    hi = std::max(hi, mass);
  }
  {
    ConditionalMaf flow(small_config(1, 1, 8, 3, 0.25), 30);
    randomize(flow, 0.5, 31);
    const double h = 0.001;
    SampleSet grid(40000, 1);
    for (int i = 0; i < 40000; ++i) grid(i, 0) = -20 + (i + 0.5) * h;
    const double mass = flow.log_prob_batch(grid, Vec::Constant(1, -0.3), flow.weight_sample(3)).array().exp().sum() * h;
    lo = std::min(lo, mass);
    hi = std::max(hi, mass);
  }
  v.require(lo >= 0.95 && hi <= 1.05, "quadrature mass in [" + num(lo) + ", " + num(hi) + "]");

  double worst_trip = 0.0;
  {
    ConditionalMaf flow(small_config(4, 2, 12, 5, 0.25), 3);
    randomize(flow, 0.5, 31);
    const auto phi = flow.weight_sample(77);
    const Vec x = Vec::Constant(2, -0.4);
    const SampleSet th = flow.sample(500, x, phi, 5);
    Rng rng(5);
    SampleSet base(500, 4);
    for (int i = 0; i < 500; ++i) base.row(i) = standard_normal_vec(4, rng).transpose();
    worst_trip = (flow.to_base(th, x, phi) - base).cwiseAbs().maxCoeff();
  }
  v.require(worst_trip < 1e-6, "round trip " + num(worst_trip, 2));

  double worst_grad = 0.0;
  {
    ConditionalMaf flow(small_config(2, 2, 5, 2, 0.3), 6);
    randomize(flow, 0.6, 61);
    flow.set_standardizer(
        {Vec::Constant(2, 0.2), Vec::Constant(2, 1.5), Vec::Constant(2, -0.1), Vec::Constant(2, 0.7)});
    const auto phi = flow.weight_sample(12);
    const Vec th(Vec::Constant(2, 0.4)), x(Vec::Constant(2, 0.9));
    const auto g = flow.grad_log_prob(th, x, phi);
    Weights raw(flow.num_weights(), 1.0);
    flow.apply_masks(raw);
    for (std::size_t k = 0; k < g.size(); ++k) {
      if (raw[k] == 0.0) continue;
      ConditionalMaf f = flow;
      auto w = flow.weights();
      const double h = 1e-5;
      w[k] += h;
      f.set_weights(w);
      const double up = f.log_prob(th, x, f.with_mask(phi.mask));
      w[k] -= 2 * h;
      f.set_weights(w);
      const double fd = (up - f.log_prob(th, x, f.with_mask(phi.mask))) / (2 * h);
      worst_grad = std::max(worst_grad, std::abs(g[k] - fd) / std::max({std::abs(fd), std::abs(g[k]), 1e-4}));
    }
  }
  v.require(worst_grad < 1e-3, "gradient rel err " + num(worst_grad, 2));
  return v;
}

// ---- 2 ---------------------------------------------------------------------------------

Verdict apt_convergence() {
  Verdict v;
  const auto task = task_linear_gaussian(2);
  int good = 0;
  std::string per_seed;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto obs = make_observation(task, seed);
    InferenceConfig cfg;
    cfg.rounds = 4;
    cfg.pool_size = 64;
    cfg.batch_size = 64;
    cfg.seed = seed;
    TaskSimulator sim(task);
    const auto res = run_snpe(task.prior, sim, obs.x_o, cfg);
    const auto [mean, sd] = linear_gaussian_posterior(obs.x_o);
    const SampleSet post = posterior_samples(*res.state.flow, obs.x_o, task.prior, 4000, derive_seed(seed, 99));
    const double err = posterior_mean_error(post, mean, sd).value;
    const Vec ratio = column_moments(post).second.cwiseQuotient(sd);
    const bool ok = err < 0.2 && (ratio.array() - 1.0).abs().maxCoeff() <= 0.3;
    good += ok;
    per_seed += (per_seed.empty() ? "" : " ") + std::string(ok ? "+" : "-") + "(" + num(err, 2) + "," +
                num(ratio.minCoeff(), 3) + ".." + num(ratio.maxCoeff(), 3) + ")";
  }
  v.require(good >= 4, std::to_string(good) + "/5 seeds within mean err < 0.2 and sd +-30% " + per_seed);
  return v;
}

// ---- 3 ---------------------------------------------------------------------------------

Verdict acquisition_algebra() {
  Verdict v;
  const std::vector<double> comp{0.2, 0.4};
  const double s = acquisition_score(comp, 0.5, 1.0);
  v.require(std::abs(s - 0.005) <= 1e-12, "hand example " + num(s, 17));

  const auto task = task_linear_gaussian(2);
  const Vec x_o = (Vec(2) << 0.5, -0.5).finished();
  InferenceConfig cfg;
  cfg.rounds = 3;
  cfg.pool_size = 64;
  cfg.batch_size = 16;
  cfg.acquisition.num_weight_samples = 8;
  cfg.flow.num_transforms = 2;
  cfg.flow.hidden_units = 16;
  cfg.flow.dropout_rate = 0.0;
  cfg.train.max_epochs = 15;
  cfg.train.batch_size = 16;
  cfg.seed = 11;
  TaskSimulator s1(task), s2(task);
  const auto a = run_asnpe(task.prior, s1, x_o, cfg);
  const auto b = run_snpe(task.prior, s2, x_o, cfg);
  bool zero = true;
  std::size_t scored = 0;
  for (const auto& rec : a.records)
    for (const auto& c : rec.candidates) {
      zero = zero && c.score == 0.0;
      ++scored;
    }
  v.require(zero && scored > 0, std::to_string(scored) + " zero-dropout scores all 0");
  v.require(a.state.data == b.state.data && a.state.flow->weights() == b.state.flow->weights(),
            "zero-dropout ASNPE dataset and weights identical to SNPE");
  return v;
}

// ---- 4 ---------------------------------------------------------------------------------

Verdict mi_identity() {
  Verdict v;
  Rng rng(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int t = 0; t < 50; ++t) {
    Mat j(2 + t % 5, 2 + (t * 7) % 6);
    for (Eigen::Index i = 0; i < j.size(); ++i) j.data()[i] = std::pow(u(rng), 3.0);
    j /= j.sum();
    const auto r = mi_identity_oracle(j);
    worst = std::max(worst, std::abs(r.mutual_information - r.expected_kl));
  }
  v.require(worst <= 1e-12, "50 joints, max |MI - E KL| = " + num(worst, 2));
  return v;
}

// ---- 5, 6, 10: batch experiments ------------------------------------------------------------

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("asnpe_accept_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

/// Final-round metric per (method, seed) from metrics.csv.
std::map<std::string, std::map<std::uint64_t, double>> finals(const fs::path& dir, const std::string& metric, int round) {
  std::map<std::string, std::map<std::uint64_t, double>> out;
  const auto lines = detail::read_lines(dir / "metrics.csv");
  const auto header = detail::split_csv(lines.at(0));
  const auto col = static_cast<std::size_t>(std::find(header.begin(), header.end(), metric) - header.begin());
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = detail::split_csv(lines[i]);
    if (std::stoi(f[4]) == round) out[f[2]][std::stoull(f[3])] = detail::parse_field(f[col]);
  }
  return out;
}

std::vector<double> values(const std::map<std::uint64_t, double>& m) {
  std::vector<double> v;
  for (const auto& [k, x] : m) v.push_back(x);
  return v;
}

Verdict gmm_direction() {
  Verdict v;
  const fs::path dir = scratch("gmm");
  ExperimentConfig c;
  c.task.name = "gaussian_mixture";
  c.methods = {"asnpe", "snpe"};
  c.metrics = {"mmd"};
  c.inference.rounds = 4;
  c.inference.batch_size = 64;
  c.budget_cap = 256;
  c.output_dir = dir.string();
  const auto rep = run_experiment(c);
  v.require(rep.failed() == 0, "no failed cells");
  const auto f = finals(dir, "mmd", 4);
  const auto a = values(f.at("asnpe")), s = values(f.at("snpe"));
  const double ma = mean_of(a), ms = mean_of(s), se = pooled_se(a, s);
  int paired = 0;
  for (auto seed : c.seeds) paired += f.at("asnpe").at(seed) <= f.at("snpe").at(seed);
  v.require(ma <= ms + se, "mean MMD asnpe " + num(ma) + " vs snpe " + num(ms) + " (pooled SE " + num(se) + ")");
  v.require(paired >= 3, "asnpe <= snpe on " + std::to_string(paired) + "/5 paired seeds");
  fs::remove_all(dir);
  return v;
}

Verdict od_direction() {
  Verdict v;
  const fs::path dir = scratch("od");
  ExperimentConfig c;
  c.task.name = "toy_od";
  c.task.od.bias_r = 0.6;
  c.task.od.noise_q = 0.3;
  c.methods = {"asnpe", "snpe"};
  c.inference.rounds = 4;
  c.inference.batch_size = 32;
  c.budget_cap = 128;
  c.output_dir = dir.string();
  const auto rep = run_experiment(c);
  v.require(rep.failed() == 0, "no failed cells");
  const auto f = finals(dir, "rmsne", 4);
  const auto a = values(f.at("asnpe")), s = values(f.at("snpe"));
  const double ma = mean_of(a), ms = mean_of(s), se = pooled_se(a, s);
  double prior = std::nan("");
  for (const auto& l : detail::read_lines(dir / "summary.csv")) {
    const auto r = detail::split_csv(l);
    if (r[0] == "prior") prior = std::stod(r[3]);
  }
  v.require(ma <= 0.7 * prior, "asnpe RMSNE " + num(ma) + " vs starting prior " + num(prior) + " (" +
                                   num(100.0 * (1.0 - ma / prior), 3) + "% lower)");
  v.require(ma <= ms + se, "asnpe " + num(ma) + " vs snpe " + num(ms) + " (pooled SE " + num(se) + ")");
  fs::remove_all(dir);
  return v;
}

Verdict resume_determinism() {
  Verdict v;
  const fs::path dir = scratch("resume");
  ExperimentConfig c;
  c.task.name = "toy_od";
  c.task.od.od_pairs = 10;
  c.task.od.detectors = 5;
  c.methods = {"asnpe", "snpe", "abc", "spsa"};
  c.seeds = {1, 2};
  c.inference.rounds = 4;
  c.inference.pool_size = 96;
  c.inference.batch_size = 32;
  c.inference.flow.num_transforms = 3;
  c.inference.flow.hidden_units = 24;
  c.inference.train.max_epochs = 40;
  c.inference.acquisition.num_weight_samples = 20;
  c.budget_cap = 128;
  c.output_dir = (dir / "full").string();
  (void)run_experiment(c);
  c.output_dir = (dir / "cut").string();
  RunOptions stop;
  stop.stop_after_round = 2;
  const auto first = run_experiment(c, stop);
  v.require(!first.complete(), "first leg stopped after round 2");
  (void)resume_experiment(dir / "cut");
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  const std::string a = slurp(dir / "full" / "metrics.csv"), b = slurp(dir / "cut" / "metrics.csv");
  v.require(!a.empty() && a == b, "resumed metrics.csv identical (" + std::to_string(a.size()) + " bytes)");
  fs::remove_all(dir);
  return v;
}

// ---- 7 ---------------------------------------------------------------------------------

Verdict baselines() {
  Verdict v;
  {
    const auto task = task_linear_gaussian(2);
    TaskSimulator sim(task);
    const Vec x_o = (Vec(2) << 1.0, -0.5).finished();
    const auto r = run_rejection_abc(task.prior, sim, x_o, 40000, 0.005, 6);
    const auto [mean, sd] = linear_gaussian_posterior(x_o);
    const double n = static_cast<double>(r.samples.rows());
    const Vec est = r.samples.colwise().mean().transpose();
    const Vec z = (est - mean).cwiseQuotient(sd / std::sqrt(n)).cwiseAbs();
    v.require(z.maxCoeff() <= 3.0, "ABC mean within " + num(z.maxCoeff(), 3) + " SE");
  }
  {
    const Vec optimum = (Vec(4) << 1.0, 2.0, 3.0, 4.0).finished();
    const Vec start = Vec::Constant(4, 10.0);
    const SpsaObjective f = [&](const Vec& th, std::uint64_t s) -> std::optional<double> {
      Rng rng(s);
      return (th - optimum).squaredNorm() + 0.01 * std::normal_distribution<double>()(rng);
    };
    SpsaGains g;
    g.a = 0.1;
    g.c = 0.1;
    g.A = 10;
    const auto r = spsa_minimize(f, start, 500, g, 3);
    const double gain = (start - optimum).norm() / (r.trajectory.back().theta - optimum).norm();
    v.require(gain >= 10.0, "SPSA quadratic distance reduced " + num(gain, 3) + "x");
  }
  {
    const auto scenario = make_od_scenario({});
    TaskSimulator base(task_toy_od(scenario));
    CountingSimulator sim(base);
    const auto obs = make_observation(base.task(), 1);
    bool exact = true;
    for (int iters : {1, 7, 25}) {
      const std::size_t before = sim.calls();
      const auto r = run_spsa(sim, obs.x_o, scenario.prior_estimate, iters, {}, 5);
      exact = exact && sim.calls() - before == 2u * static_cast<std::size_t>(iters) && r.calls == 2u * iters;
    }
    v.require(exact, "SPSA uses exactly 2 simulator calls per iteration");
  }
  return v;
}

// ---- 8 ---------------------------------------------------------------------------------

SampleSet gaussian(int n, int d, std::uint64_t seed) {
  Rng rng(seed);
  SampleSet s(n, d);
  for (int i = 0; i < n; ++i) s.row(i) = standard_normal_vec(d, rng).transpose();
  return s;
}

Verdict metric_calibration() {
  Verdict v;
  int inside = 0;
  for (int s = 0; s < 20; ++s) {
    const auto all = gaussian(2000, 2, 500 + s);
    const double acc = c2st(all.topRows(1000), all.bottomRows(1000), {.seed = static_cast<std::uint64_t>(s)}).value;
    inside += acc >= 0.45 && acc <= 0.55;
  }
  v.require(inside >= 19, "C2ST null in [0.45, 0.55] on " + std::to_string(inside) + "/20 seeds");

  std::vector<double> m;
  for (int t = 0; t < 200; ++t) m.push_back(mmd(gaussian(50, 2, 100 + t), gaussian(50, 2, 1000 + t)).value);
  const double bias = mean_of(m), se = sd_of(m) / std::sqrt(200.0);
  v.require(std::abs(bias) <= 3 * se, "MMD null mean " + num(bias, 3) + " (SE " + num(se, 3) + ")");

  const Vec sim = (Vec(2) << 2.0, 1.0).finished(), obs = (Vec(2) << 1.0, 1.0).finished();
  const double r = rmsne(sim, obs);
  v.require(std::abs(r - std::sqrt(0.5)) <= 1e-9, "RMSNE hand example " + num(r, 10));
  return v;
}

// ---- 9 ---------------------------------------------------------------------------------

Verdict protocol_robustness() {
  Verdict v;
  auto child = [](const std::string& mode) {
    ExternalSimulatorOptions o;
    o.command = {ASNPE_SIM_CHILD, mode};
    o.theta_dim = 3;
    o.timeout = std::chrono::seconds(20);
    return ExternalSimulator(std::move(o));
  };
  std::vector<Vec> th;
  for (int i = 0; i < 24; ++i) th.push_back((Vec(3) << i, 0.1 * i + 1.0 / 3.0, std::exp(-7.3 * i)).finished());
  std::vector<std::uint64_t> seeds(th.size());
  std::iota(seeds.begin(), seeds.end(), 100);

  {
    auto sim = child("echo");
    const auto out = sim.simulate(th, seeds);
    bool exact = true;
    for (std::size_t i = 0; i < th.size(); ++i) exact = exact && out[i].ok() && *out[i].x == th[i];
    v.require(exact, "echo round trip exact");
  }
  {
    auto sim = child("reverse");
    const auto out = sim.simulate(th, seeds);
    bool exact = true;
    for (std::size_t i = 0; i < th.size(); ++i) exact = exact && out[i].ok() && *out[i].x == th[i];
    std::vector<std::int64_t> order;
    for (const auto& line : sim.transcript())
      if (line.rfind("< ", 0) == 0) order.push_back(*protocol::parse_response(line.substr(2)).id);
    v.require(exact && !std::is_sorted(order.begin(), order.end()), "out-of-order replies matched by id");
  }
  {
    auto sim = child("crash");
    auto bad = th;
    bad[13][0] = 13.0;
    const auto out = sim.simulate(bad, seeds);
    bool isolated = !out[13].ok();
    for (std::size_t i = 0; i < bad.size(); ++i)
      if (i != 13) isolated = isolated && out[i].ok() && *out[i].x == bad[i];
    v.require(isolated, "crash fails only the offending theta");
  }
  {
    ExternalSimulatorOptions o;
    o.command = {ASNPE_SIM_CHILD, "task", "toy_od"};
    const auto spec = task_toy_od(make_od_scenario({}));
    o.theta_dim = spec.theta_dim;
    o.x_dim = spec.x_dim;
    ExternalSimulator sim(o);
    Rng rng(3);
    const SampleSet draws = spec.prior.sample(10, rng);
    std::vector<Vec> in;
    for (Eigen::Index i = 0; i < draws.rows(); ++i) in.emplace_back(draws.row(i).transpose());
    const auto out = sim.simulate(in, std::span<const std::uint64_t>(seeds.data(), in.size()));
    std::map<std::int64_t, Vec> replies;
    std::vector<std::int64_t> ids;
    bool same = true;
    for (const auto& line : sim.transcript()) {
      if (line.rfind("> ", 0) == 0) {
        const auto req = nlohmann::json::parse(line.substr(2));
        same = same && to_vec(req["theta"].get<std::vector<double>>()) == in[ids.size()];
        ids.push_back(req["id"].get<std::int64_t>());
      } else {
        const auto r = protocol::parse_response(line.substr(2));
        same = same && r.id && r.outcome.ok();
        if (r.id && r.outcome.ok()) replies[*r.id] = *r.outcome.x;
      }
    }
    for (std::size_t i = 0; i < ids.size(); ++i) same = same && out[i].ok() && replies.at(ids[i]) == *out[i].x;
    v.require(same && ids.size() == in.size(), "transcript replay bit-identical");
  }
  return v;
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    double limit_s;
    Verdict (*check)();
  };
  const Criterion criteria[] = {
      {"1 flow correctness", 60, flow_suite},
      {"2 APT convergence (linear Gaussian)", 300, apt_convergence},
      {"3 acquisition algebra", 0, acquisition_algebra},
      {"4 MI / expected-KL identity", 0, mi_identity},
      {"5 Gaussian mixture: ASNPE vs SNPE MMD", 1800, gmm_direction},
      {"6 toy OD: ASNPE RMSNE", 1200, od_direction},
      {"7 baselines (ABC, SPSA)", 0, baselines},
      {"8 metric calibration", 0, metric_calibration},
      {"9 protocol robustness", 0, protocol_robustness},
      {"10 determinism and resume", 0, resume_determinism},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.check();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.limit_s > 0) v.require(secs < c.limit_s, "runtime " + num(secs, 3) + " s < " + num(c.limit_s) + " s");
    else v.detail += "; runtime " + num(secs, 3) + " s";
    std::cout << (v.pass ? "PASS" : "FAIL") << "  [" << c.name << "]  " << v.detail << std::endl;
    failed += !v.pass;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : "all criteria passed") << std::endl;
  return failed ? 1 : 0;
}
