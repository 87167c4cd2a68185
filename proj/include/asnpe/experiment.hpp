#pragma once

// Batch experiments: configuration, per-(method, seed) cells, on-disk run
// directories, resumption, CSV summaries and SVG plots.
//
// Run directory layout:
//   config.json                 effective configuration + schema version + digest
//   metrics.csv                 one row per (method, seed, round); deterministic
//   timing.csv                  per-round phase times and cumulative wallclock
//   summary.csv                 final-round mean and sd over seeds per method
//   cells/<method>_seed<s>/     state.json, round_<r>.json, flow_round<r>.bin,
//                               dataset.bin, acquisition_round<r>.csv,
//                               training_round<r>.csv, metrics.csv, timing.csv
//   plots/<metric>_vs_simulations.svg, plots/<metric>_vs_wallclock.svg

#include "asnpe/external_simulator.hpp"
#include "asnpe/inference.hpp"

#include <json.hpp>

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>

namespace asnpe {

namespace fs = std::filesystem;

inline constexpr int kExperimentSchemaVersion = 1;

/// Raised when a run directory cannot be resumed by this binary.
class ResumeRefused : public Error {
 public:
  using Error::Error;
};

// ---- configuration --------------------------------------------------------------------

struct TaskConfig {
  std::string name = "toy_od";  // linear_gaussian | gaussian_mixture | bernoulli_glm | slcp | toy_od | external
  int dim = 2;                  // linear_gaussian
  int distractors = 0;          // slcp
  OdScenarioRecipe od;          // toy_od, unless scenario_file is set
  std::string scenario_file;    // toy_od scenario JSON
  std::uint64_t observation_seed = 1;
  // external
  std::vector<std::string> command;
  std::string working_dir = ".";
  double timeout_s = 30.0;
  nlohmann::json prior;      // PriorSpec JSON, external only
  std::vector<double> x_o;   // external only
};

struct ExperimentConfig {
  TaskConfig task;
  std::vector<std::string> methods{"asnpe", "snpe"};
  InferenceConfig inference;
  double abc_quantile = 0.1;
  // Grid-searched on the default toy OD scenario at a 128-call budget.
  SpsaGains spsa{.a = 2048.0, .c = 5.0, .A = 10.0};
  std::vector<std::string> metrics;  // empty: task default
  int metric_samples = 1000;
  int reference_samples = 1000;
  int prior_rmsne_draws = 100;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string output_dir = "runs/experiment";
  std::size_t budget_cap = 128;
  unsigned simulator_workers = 1;
  unsigned cell_workers = 1;  // >1 runs cells concurrently

  [[nodiscard]] std::vector<std::string> effective_metrics() const {
    if (!metrics.empty()) return metrics;
    if (task.name == "toy_od" || task.name == "external") return {"rmsne"};
    return {"mmd", "c2st", "mean_error", "median_distance"};
  }

  void validate() const {
    static const std::set<std::string> tasks{"linear_gaussian", "gaussian_mixture", "bernoulli_glm",
                                             "slcp",            "toy_od",           "external"};
    static const std::set<std::string> known_methods{"asnpe", "snpe", "abc", "spsa"};
    static const std::set<std::string> known_metrics{"rmsne", "mmd", "c2st", "mean_error", "median_distance"};
    if (!tasks.count(task.name)) throw ConfigError("config: unknown task '" + task.name + "'");
    if (methods.empty()) throw ConfigError("config: no methods");
    for (const auto& m : methods)
      if (!known_methods.count(m)) throw ConfigError("config: unknown method '" + m + "'");
    for (const auto& m : effective_metrics())
      if (!known_metrics.count(m)) throw ConfigError("config: unknown metric '" + m + "'");
    if (task.name == "external") {
      if (task.command.empty()) throw ConfigError("config: external task needs a command");
      if (task.x_o.empty()) throw ConfigError("config: external task needs x_o");
      if (task.prior.is_null()) throw ConfigError("config: external task needs a prior");
      try {
        (void)PriorSpec::from_json(task.prior);
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: bad external prior: ") + e.what());
      }
      for (const auto& m : effective_metrics())
        if (m != "rmsne" && m != "median_distance")
          throw ConfigError("config: metric '" + m + "' needs a reference posterior, which external tasks lack");
    }
    if (task.name == "toy_od")
      for (const auto& m : effective_metrics())
        if (m == "mmd" || m == "c2st" || m == "mean_error")
          throw ConfigError("config: metric '" + m + "' needs a reference posterior");
    if (seeds.empty()) throw ConfigError("config: no seeds");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
      throw ConfigError("config: seeds must be distinct");
    inference.validate();
    const bool sequential =
        std::any_of(methods.begin(), methods.end(), [](const auto& m) { return m == "asnpe" || m == "snpe"; });
    const auto needed = static_cast<std::size_t>(inference.rounds) * static_cast<std::size_t>(inference.batch_size);
    if (sequential && budget_cap < needed)
      throw ConfigError("config: budget_cap " + std::to_string(budget_cap) + " is below rounds * batch_size = " +
                        std::to_string(needed));
    if (budget_cap < 2) throw ConfigError("config: budget_cap must be >= 2");
    if (!(abc_quantile > 0.0 && abc_quantile <= 1.0)) throw ConfigError("config: abc_quantile must lie in (0, 1]");
    spsa.validate();
    if (metric_samples < 2 || reference_samples < 2) throw ConfigError("config: metric sample counts must be >= 2");
    if (prior_rmsne_draws < 1) throw ConfigError("config: prior_rmsne_draws must be >= 1");
    if (simulator_workers < 1 || cell_workers < 1) throw ConfigError("config: worker counts must be >= 1");
  }
};

namespace detail {

/// Reads `key` into `out` when present and removes it from `j`, so whatever is
/// left afterwards is an unknown key.
template <typename T>
void take(nlohmann::json& j, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
  }
  j.erase(it);
}

inline void reject_leftovers(const nlohmann::json& j, const std::string& where) {
  if (!j.empty()) throw ConfigError("config: unknown key '" + j.begin().key() + "' in " + where);
}

inline nlohmann::json take_object(nlohmann::json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) return nlohmann::json::object();
  if (!it->is_object()) throw ConfigError(std::string("config: '") + key + "' must be an object");
  nlohmann::json out = *it;
  j.erase(it);
  return out;
}

inline std::string to_string(PermutationScheme p) {
  return p == PermutationScheme::reverse ? "reverse" : "random_seeded";
}

inline std::string to_string(KlDirection k) {
  return k == KlDirection::component_to_marginal ? "component_to_marginal" : "marginal_to_component";
}

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
  using nlohmann::json;
  const auto& t = c.task;
  json task{{"name", t.name},
            {"dim", t.dim},
            {"distractors", t.distractors},
            {"observation_seed", t.observation_seed},
            {"od",
             {{"od_pairs", t.od.od_pairs},
              {"detectors", t.od.detectors},
              {"demand_mean", t.od.demand_mean},
              {"demand_sd", t.od.demand_sd},
              {"bias_r", t.od.bias_r},
              {"noise_q", t.od.noise_q},
              {"seed", t.od.seed}}},
            {"scenario_file", t.scenario_file},
            {"command", t.command},
            {"working_dir", t.working_dir},
            {"timeout_s", t.timeout_s},
            {"prior", t.prior},
            {"x_o", t.x_o}};
  const auto& i = c.inference;
  json inference{{"rounds", i.rounds},
                 {"pool_size", i.pool_size},
                 {"batch_size", i.batch_size},
                 {"proposal_draw_budget", i.proposal_draw_budget},
                 {"min_acceptance", i.min_acceptance},
                 {"acceptance_probe", i.acceptance_probe},
                 {"acquisition",
                  {{"num_weight_samples", i.acquisition.num_weight_samples},
                   {"lambda", i.acquisition.lambda},
                   {"density_floor", i.acquisition.density_floor},
                   {"use_proposal_weight", i.acquisition.use_proposal_weight},
                   {"kl_direction", detail::to_string(i.acquisition.kl_direction)}}},
                 {"train",
                  {{"atoms", i.train.atoms},
                   {"batch_size", i.train.batch_size},
                   {"learning_rate", i.train.learning_rate},
                   {"max_epochs", i.train.max_epochs},
                   {"validation_fraction", i.train.validation_fraction},
                   {"patience", i.train.patience},
                   {"clip_norm", i.train.clip_norm},
                   {"train_dropout", i.train.train_dropout}}},
                 {"flow",
                  {{"num_transforms", i.flow.num_transforms},
                   {"hidden_units", i.flow.hidden_units},
                   {"dropout_rate", i.flow.dropout_rate},
                   {"permutation", detail::to_string(i.flow.permutation)},
                   {"permutation_seed", i.flow.permutation_seed}}}};
  return json{{"schema_version", kExperimentSchemaVersion},
              {"task", task},
              {"methods", c.methods},
              {"inference", inference},
              {"abc", {{"quantile", c.abc_quantile}}},
              {"spsa", {{"a", c.spsa.a}, {"c", c.spsa.c}, {"A", c.spsa.A}, {"alpha", c.spsa.alpha}, {"gamma", c.spsa.gamma}}},
              {"metrics", c.effective_metrics()},
              {"metric_samples", c.metric_samples},
              {"reference_samples", c.reference_samples},
              {"prior_rmsne_draws", c.prior_rmsne_draws},
              {"seeds", c.seeds},
              {"output_dir", c.output_dir},
              {"budget_cap", c.budget_cap},
              {"simulator_workers", c.simulator_workers},
              {"cell_workers", c.cell_workers}};
}

/// Parses a configuration, filling defaults for absent keys. Unknown keys and
/// a mismatched schema_version are configuration errors.
inline ExperimentConfig experiment_config_from_json(nlohmann::json j) {
  using detail::take;
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  int version = kExperimentSchemaVersion;
  take(j, "schema_version", version);
  if (version != kExperimentSchemaVersion)
    throw ConfigError("config: unsupported schema_version " + std::to_string(version));
  ExperimentConfig c;
  {
    auto t = detail::take_object(j, "task");
    take(t, "name", c.task.name);
    take(t, "dim", c.task.dim);
    take(t, "distractors", c.task.distractors);
    take(t, "observation_seed", c.task.observation_seed);
    auto od = detail::take_object(t, "od");
    take(od, "od_pairs", c.task.od.od_pairs);
    take(od, "detectors", c.task.od.detectors);
    take(od, "demand_mean", c.task.od.demand_mean);
    take(od, "demand_sd", c.task.od.demand_sd);
    take(od, "bias_r", c.task.od.bias_r);
    take(od, "noise_q", c.task.od.noise_q);
    take(od, "seed", c.task.od.seed);
    detail::reject_leftovers(od, "task.od");
    take(t, "scenario_file", c.task.scenario_file);
    take(t, "command", c.task.command);
    take(t, "working_dir", c.task.working_dir);
    take(t, "timeout_s", c.task.timeout_s);
    if (t.contains("prior")) {
      c.task.prior = t["prior"];
      t.erase("prior");
    }
    take(t, "x_o", c.task.x_o);
    detail::reject_leftovers(t, "task");
  }
  take(j, "methods", c.methods);
  {
    auto i = detail::take_object(j, "inference");
    auto& ic = c.inference;
    take(i, "rounds", ic.rounds);
    take(i, "pool_size", ic.pool_size);
    take(i, "batch_size", ic.batch_size);
    take(i, "proposal_draw_budget", ic.proposal_draw_budget);
    take(i, "min_acceptance", ic.min_acceptance);
    take(i, "acceptance_probe", ic.acceptance_probe);
    auto a = detail::take_object(i, "acquisition");
    take(a, "num_weight_samples", ic.acquisition.num_weight_samples);
    take(a, "lambda", ic.acquisition.lambda);
    take(a, "density_floor", ic.acquisition.density_floor);
    take(a, "use_proposal_weight", ic.acquisition.use_proposal_weight);
    std::string kl = detail::to_string(ic.acquisition.kl_direction);
    take(a, "kl_direction", kl);
    if (kl == "component_to_marginal") ic.acquisition.kl_direction = KlDirection::component_to_marginal;
    else if (kl == "marginal_to_component") ic.acquisition.kl_direction = KlDirection::marginal_to_component;
    else throw ConfigError("config: unknown kl_direction '" + kl + "'");
    detail::reject_leftovers(a, "inference.acquisition");
    auto tr = detail::take_object(i, "train");
    take(tr, "atoms", ic.train.atoms);
    take(tr, "batch_size", ic.train.batch_size);
    take(tr, "learning_rate", ic.train.learning_rate);
    take(tr, "max_epochs", ic.train.max_epochs);
    take(tr, "validation_fraction", ic.train.validation_fraction);
    take(tr, "patience", ic.train.patience);
    take(tr, "clip_norm", ic.train.clip_norm);
    take(tr, "train_dropout", ic.train.train_dropout);
    detail::reject_leftovers(tr, "inference.train");
    auto f = detail::take_object(i, "flow");
    take(f, "num_transforms", ic.flow.num_transforms);
    take(f, "hidden_units", ic.flow.hidden_units);
    take(f, "dropout_rate", ic.flow.dropout_rate);
    std::string perm = detail::to_string(ic.flow.permutation);
    take(f, "permutation", perm);
    if (perm == "reverse") ic.flow.permutation = PermutationScheme::reverse;
    else if (perm == "random_seeded") ic.flow.permutation = PermutationScheme::random_seeded;
    else throw ConfigError("config: unknown permutation '" + perm + "'");
    take(f, "permutation_seed", ic.flow.permutation_seed);
    detail::reject_leftovers(f, "inference.flow");
    detail::reject_leftovers(i, "inference");
  }
  {
    auto a = detail::take_object(j, "abc");
    take(a, "quantile", c.abc_quantile);
    detail::reject_leftovers(a, "abc");
    auto s = detail::take_object(j, "spsa");
    take(s, "a", c.spsa.a);
    take(s, "c", c.spsa.c);
    take(s, "A", c.spsa.A);
    take(s, "alpha", c.spsa.alpha);
    take(s, "gamma", c.spsa.gamma);
    detail::reject_leftovers(s, "spsa");
  }
  take(j, "metrics", c.metrics);
  take(j, "metric_samples", c.metric_samples);
  take(j, "reference_samples", c.reference_samples);
  take(j, "prior_rmsne_draws", c.prior_rmsne_draws);
  take(j, "seeds", c.seeds);
  take(j, "output_dir", c.output_dir);
  take(j, "budget_cap", c.budget_cap);
  take(j, "simulator_workers", c.simulator_workers);
  take(j, "cell_workers", c.cell_workers);
  detail::reject_leftovers(j, "top level");
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + path.string() + ": " + e.what());
  }
  return experiment_config_from_json(std::move(j));
}

/// Hex digest of everything that influences results (output_dir and worker
/// counts excluded).
inline std::string config_digest(const ExperimentConfig& c) {
  auto j = to_json(c);
  j.erase("output_dir");
  j.erase("simulator_workers");
  j.erase("cell_workers");
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(j.dump());
  return os.str();
}

// ---- task instantiation -----------------------------------------------------------------

/// A task ready to run: prior, observation, simulator factory and, when
/// available, reference posterior samples.
struct PreparedTask {
  std::string name;
  PriorSpec prior;
  Vec x_o;
  std::optional<Vec> true_theta;
  std::optional<SampleSet> reference;
  std::optional<OdScenario> od;
  std::function<std::unique_ptr<Simulator>()> make_simulator;
};

inline PreparedTask prepare_task(const ExperimentConfig& c) {
  const auto& t = c.task;
  PreparedTask p;
  p.name = t.name;
  if (t.name == "external") {
    p.prior = PriorSpec::from_json(t.prior);
    p.x_o = to_vec(t.x_o);
    ExternalSimulatorOptions o;
    o.command = t.command;
    o.working_dir = t.working_dir;
    o.theta_dim = p.prior.dim();
    o.x_dim = static_cast<int>(p.x_o.size());
    o.timeout = std::chrono::milliseconds(static_cast<std::int64_t>(t.timeout_s * 1000.0));
    p.make_simulator = [o] { return std::make_unique<ExternalSimulator>(o); };
    return p;
  }
  TaskSpec spec;
  if (t.name == "linear_gaussian") spec = task_linear_gaussian(t.dim);
  else if (t.name == "gaussian_mixture") spec = task_gaussian_mixture();
  else if (t.name == "bernoulli_glm") spec = task_bernoulli_glm();
  else if (t.name == "slcp") spec = task_slcp(t.distractors);
  else {
    OdScenario sc;
    if (!t.scenario_file.empty()) {
      std::ifstream in(t.scenario_file);
      if (!in) throw ConfigError("config: cannot open scenario file " + t.scenario_file);
      sc = od_scenario_from_json(nlohmann::json::parse(in));
    } else {
      sc = make_od_scenario(t.od);
    }
    p.od = sc;
    spec = task_toy_od(sc);
  }
  const auto obs = make_observation(spec, t.observation_seed);
  p.prior = spec.prior;
  p.x_o = obs.x_o;
  p.true_theta = obs.true_theta;
  if (spec.reference != ReferenceKind::none) {
    const auto needs = c.effective_metrics();
    if (std::any_of(needs.begin(), needs.end(), [](const auto& m) { return m == "mmd" || m == "c2st" || m == "mean_error"; }))
      p.reference = reference_posterior(spec, p.x_o, c.reference_samples,
                                        derive_seed(t.observation_seed, fnv1a("reference")))
                        .samples;
  }
  const unsigned workers = c.simulator_workers;
  p.make_simulator = [spec, workers] { return std::make_unique<TaskSimulator>(spec, workers); };
  return p;
}

// ---- metric rows ----------------------------------------------------------------------

struct MetricRow {
  std::string method;
  std::uint64_t seed = 0;
  int round = 0;
  std::size_t simulations = 0;
  std::map<std::string, double> values;  // NaN when not computed
};

struct TimingRow {
  std::string method;
  std::uint64_t seed = 0;
  int round = 0;
  std::size_t simulations = 0;
  PhaseTimes times;
  double wallclock_s = 0.0;  // cumulative elapsed
};

namespace detail {

inline std::string fmt(double v) {
  if (!std::isfinite(v)) return "";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline double parse_field(const std::string& s) { return s.empty() ? std::nan("") : std::stod(s); }

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string metrics_header(const std::vector<std::string>& metrics) {
  std::string h = "schema_version,config_digest,method,seed,round,simulations";
  for (const auto& m : metrics) h += "," + m;
  return h;
}

inline std::string metrics_line(const MetricRow& r, const std::vector<std::string>& metrics, const std::string& digest) {
  std::ostringstream os;
  os << kExperimentSchemaVersion << ',' << digest << ',' << r.method << ',' << r.seed << ',' << r.round << ','
     << r.simulations;
  for (const auto& m : metrics) {
    auto it = r.values.find(m);
    os << ',' << fmt(it == r.values.end() ? std::nan("") : it->second);
  }
  return os.str();
}

inline const char* kTimingHeader = "method,seed,round,simulations,propose_s,acquire_s,simulate_s,train_s,wallclock_s";

inline std::string timing_line(const TimingRow& r) {
  std::ostringstream os;
  os << r.method << ',' << r.seed << ',' << r.round << ',' << r.simulations << ',' << fmt(r.times.propose_s) << ','
     << fmt(r.times.acquire_s) << ',' << fmt(r.times.simulate_s) << ',' << fmt(r.times.train_s) << ','
     << fmt(r.wallclock_s);
  return os.str();
}

inline std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(line);
  return out;
}

inline void write_text(const fs::path& p, const std::string& text) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + p.string());
    out << text;
    if (!out) throw Error("write failed: " + p.string());
  }
  fs::rename(tmp, p);
}

inline nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error("cannot open " + p.string());
  return nlohmann::json::parse(in);
}

inline double best_rmsne(const std::vector<Vec>& outputs, const Vec& x_o) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& x : outputs) best = std::min(best, rmsne(x, x_o));
  return best;
}

}  // namespace detail

// ---- cells -------------------------------------------------------------------------------

/// Thrown from a round callback to stop a run after a given round.
class StopRequested : public std::exception {
 public:
  const char* what() const noexcept override { return "stop requested"; }
};

struct RunOptions {
  std::optional<int> stop_after_round;  // simulate an interruption
  std::ostream* log = nullptr;
};

struct CellOutcome {
  std::string method;
  std::uint64_t seed = 0;
  bool done = false;
  bool failed = false;
  std::string error;
};

class ExperimentRunner {
 public:
  ExperimentRunner(ExperimentConfig config, fs::path dir, RunOptions options)
      : cfg_(std::move(config)), dir_(std::move(dir)), opts_(options), metrics_(cfg_.effective_metrics()),
        digest_(config_digest(cfg_)) {}

  /// Runs (or continues) every cell, then rebuilds the aggregate files.
  std::vector<CellOutcome> run() {
    task_ = prepare_task(cfg_);
    struct Cell {
      std::string method;
      std::uint64_t seed;
    };
    std::vector<Cell> cells;
    for (const auto& m : cfg_.methods)
      for (auto s : cfg_.seeds) cells.push_back({m, s});
    std::vector<CellOutcome> outcomes(cells.size());
    parallel_for(cells.size(), cfg_.cell_workers, [&](std::size_t i) {
      outcomes[i] = run_cell(cells[i].method, cells[i].seed);
    });
    write_aggregates(outcomes);
    return outcomes;
  }

  [[nodiscard]] fs::path cell_dir(const std::string& method, std::uint64_t seed) const {
    return dir_ / "cells" / (method + "_seed" + std::to_string(seed));
  }

 private:
  void log(const std::string& msg) {
    if (!opts_.log) return;
    std::lock_guard lock(log_mu_);
    *opts_.log << msg << '\n';
  }

  static nlohmann::json load_state(const fs::path& cell) {
    const fs::path p = cell / "state.json";
    if (!fs::exists(p)) return nlohmann::json{{"status", "new"}, {"completed_rounds", 0}, {"simulator_calls", 0}};
    auto j = detail::read_json(p);
    if (j.value("schema_version", -1) != kExperimentSchemaVersion)
      throw ResumeRefused("cell state " + p.string() + " has an unsupported schema version");
    return j;
  }

  static void save_state(const fs::path& cell, const std::string& status, int completed, std::size_t calls,
                         const std::string& error = {}) {
    nlohmann::json j{{"schema_version", kExperimentSchemaVersion},
                     {"status", status},
                     {"completed_rounds", completed},
                     {"simulator_calls", calls}};
    if (!error.empty()) j["error"] = error;
    detail::write_text(cell / "state.json", j.dump(2) + "\n");
  }

  /// Keeps only rows of rounds <= keep in a per-cell CSV (drops the tail of an
  /// interrupted round).
  static void truncate_rows(const fs::path& p, int keep) {
    if (!fs::exists(p)) return;
    auto lines = detail::read_lines(p);
    if (lines.empty()) return;
    std::string out = lines[0] + "\n";
    const auto header = detail::split_csv(lines[0]);
    const auto col = static_cast<std::size_t>(std::find(header.begin(), header.end(), "round") - header.begin());
    for (std::size_t i = 1; i < lines.size(); ++i) {
      const auto f = detail::split_csv(lines[i]);
      if (col < f.size() && std::stoi(f[col]) <= keep) out += lines[i] + "\n";
    }
    detail::write_text(p, out);
  }

  void append_rows(const fs::path& cell, const MetricRow& m, const TimingRow& t) {
    const fs::path mp = cell / "metrics.csv", tp = cell / "timing.csv";
    const bool fresh_m = !fs::exists(mp), fresh_t = !fs::exists(tp);
    std::ofstream mo(mp, std::ios::app), to(tp, std::ios::app);
    if (fresh_m) mo << detail::metrics_header(metrics_) << '\n';
    if (fresh_t) to << detail::kTimingHeader << '\n';
    mo << detail::metrics_line(m, metrics_, digest_) << '\n';
    to << detail::timing_line(t) << '\n';
    if (!mo || !to) throw Error("cannot append to " + cell.string());
  }

  bool wants(const std::string& metric) const {
    return std::find(metrics_.begin(), metrics_.end(), metric) != metrics_.end();
  }

  /// Posterior-sample metrics of one sample set (NaN where not requested).
  void posterior_metrics(const SampleSet& post, Simulator& sim, std::uint64_t seed, MetricRow& row) {
    if (task_.reference) {
      if (wants("mmd")) row.values["mmd"] = mmd(post, *task_.reference).value;
      if (wants("c2st")) {
        C2stConfig cc;
        cc.seed = derive_seed(seed, fnv1a("c2st"));
        row.values["c2st"] = c2st(post, *task_.reference, cc).value;
      }
      if (wants("mean_error")) {
        const auto [mean, sd] = column_moments(*task_.reference);
        row.values["mean_error"] = posterior_mean_error(post, mean, sd).value;
      }
    }
    if (wants("median_distance"))
      row.values["median_distance"] = median_distance(post, sim, task_.x_o, derive_seed(seed, fnv1a("median"))).value;
  }

  CellOutcome run_cell(const std::string& method, std::uint64_t seed) {
    CellOutcome out{method, seed, false, false, {}};
    const fs::path cell = cell_dir(method, seed);
    try {
      fs::create_directories(cell);
      const auto state = load_state(cell);
      if (state.at("status") == "done") {
        out.done = true;
        return out;
      }
      if (method == "asnpe" || method == "snpe") run_sequential_cell(method, seed, cell, state, out);
      else run_single_shot_cell(method, seed, cell, out);
    } catch (const ResumeRefused&) {
      throw;
    } catch (const std::exception& e) {
      out.failed = true;
      out.error = e.what();
      log("cell " + method + " seed " + std::to_string(seed) + " failed: " + e.what());
      try {
        save_state(cell, "failed", 0, 0, e.what());
      } catch (...) {
      }
    }
    return out;
  }

  void run_sequential_cell(const std::string& method, std::uint64_t seed, const fs::path& cell,
                           const nlohmann::json& st, CellOutcome& out) {
    InferenceConfig ic = cfg_.inference;
    ic.seed = seed;
    ic.budget_cap = cfg_.budget_cap;
    InferenceState state;
    const int completed = st.value("completed_rounds", 0);
    double wallclock = 0.0;
    if (st.at("status") == "running" && completed > 0) {
      std::ifstream fin(cell / ("flow_round" + std::to_string(completed) + ".bin"), std::ios::binary);
      std::ifstream din(cell / "dataset.bin", std::ios::binary);
      if (!fin || !din) throw ResumeRefused("cell " + cell.string() + " is missing its checkpoint");
      state.flow = ConditionalMaf::load(fin);
      state.data = load_dataset(din);
      state.completed_rounds = completed;
      state.simulator_calls = st.value("simulator_calls", std::size_t{0});
      truncate_rows(cell / "metrics.csv", completed);
      truncate_rows(cell / "timing.csv", completed);
      const auto rows = detail::read_lines(cell / "timing.csv");
      if (rows.size() > 1) wallclock = detail::parse_field(detail::split_csv(rows.back()).back());
      log("resuming " + method + " seed " + std::to_string(seed) + " after round " + std::to_string(completed));
    } else {
      for (const auto& e : fs::directory_iterator(cell))
        if (e.path().filename() != "state.json") fs::remove_all(e.path());
    }
    auto sim = task_.make_simulator();
    auto metric_sim = task_.make_simulator();
    const Method m = method == "asnpe" ? Method::asnpe : Method::snpe;

    const RoundCallback on_round = [&](const RoundRecord& rec, const InferenceState& s) {
      const std::string r = std::to_string(rec.round);
      {
        std::ofstream f(cell / ("flow_round" + r + ".bin"), std::ios::binary);
        s.flow->save(f);
      }
      {
        std::ofstream d(cell / "dataset.bin.tmp", std::ios::binary);
        save_dataset(d, s.data);
      }
      fs::rename(cell / "dataset.bin.tmp", cell / "dataset.bin");
      detail::write_text(cell / ("round_" + r + ".json"), round_json(rec).dump(1) + "\n");
      if (!rec.candidates.empty()) {
        std::ofstream a(cell / ("acquisition_round" + r + ".csv"));
        write_acquisition_dump(a, rec.candidates, rec.selected_indices);
      }
      {
        std::ofstream t(cell / ("training_round" + r + ".csv"));
        write_training_log(t, rec.train_log);
      }
      MetricRow row{method, seed, rec.round, s.simulator_calls, {}};
      for (const auto& name : metrics_) row.values[name] = std::nan("");
      if (wants("rmsne")) {
        std::vector<Vec> xs;
        for (std::size_t i = 0; i < s.data.size(); ++i) xs.push_back(s.data.x(i));
        row.values["rmsne"] = detail::best_rmsne(xs, task_.x_o);
      }
      const std::uint64_t mseed = derive_seed(seed, fnv1a("metrics"), rec.round);
      if (wants("mmd") || wants("c2st") || wants("mean_error") || wants("median_distance")) {
        try {
          const SampleSet post = posterior_samples(*s.flow, task_.x_o, task_.prior, cfg_.metric_samples, mseed);
          posterior_metrics(post, *metric_sim, mseed, row);
        } catch (const ProposalError& e) {
          log(std::string("metrics skipped: ") + e.what());
        }
      }
      wallclock += rec.times.propose_s + rec.times.acquire_s + rec.times.simulate_s + rec.times.train_s;
      append_rows(cell, row, TimingRow{method, seed, rec.round, s.simulator_calls, rec.times, wallclock});
      const bool last = rec.round == ic.rounds;
      save_state(cell, last ? "done" : "running", rec.round, s.simulator_calls);
      log(method + " seed " + std::to_string(seed) + " round " + r + " done (" + std::to_string(s.simulator_calls) +
          " simulations)");
      if (!last && opts_.stop_after_round && rec.round >= *opts_.stop_after_round) throw StopRequested();
    };
    try {
      (void)run_sequential(m, task_.prior, *sim, task_.x_o, ic, std::move(state), on_round);
      out.done = true;
    } catch (const StopRequested&) {
      out.done = false;
    }
  }

  /// ABC and SPSA: no intermediate state; rows at every batch_size calls.
  void run_single_shot_cell(const std::string& method, std::uint64_t seed, const fs::path& cell, CellOutcome& out) {
    for (const auto& e : fs::directory_iterator(cell)) fs::remove_all(e.path());
    auto sim = task_.make_simulator();
    auto metric_sim = task_.make_simulator();
    const std::size_t step = static_cast<std::size_t>(cfg_.inference.batch_size);
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::pair<Vec, double>> trace;  // output or theta, elapsed seconds
    std::optional<SampleSet> posterior;
    std::size_t calls = 0;
    std::vector<double> objective;  // RMSNE per successful evaluation (SPSA)
    if (method == "abc") {
      const auto r = run_rejection_abc(task_.prior, *sim, task_.x_o, cfg_.budget_cap, cfg_.abc_quantile,
                                       derive_seed(seed, fnv1a("abc")));
      calls = r.simulator_calls;
      const double elapsed = detail::seconds_since(t0);
      for (const auto& x : r.outputs) trace.emplace_back(x, elapsed);
      posterior = r.samples;
    } else {
      const Vec start = task_.od ? task_.od->prior_estimate : task_.prior.mean();
      const SpsaObjective f = [&](const Vec& theta, std::uint64_t s) -> std::optional<double> {
        const std::uint64_t seeds[] = {s};
        const auto res = sim->simulate({theta}, seeds);
        if (!res[0].ok()) return std::nullopt;
        trace.emplace_back(*res[0].x, detail::seconds_since(t0));
        return rmsne(*res[0].x, task_.x_o);
      };
      const int iterations = static_cast<int>(cfg_.budget_cap / 2);
      const auto r = spsa_minimize(f, start.cwiseMax(0.0), iterations, cfg_.spsa, derive_seed(seed, fnv1a("spsa")),
                                   true, cfg_.budget_cap);
      calls = r.calls;
      if (!r.trajectory.empty()) posterior = SampleSet(r.trajectory.back().theta.transpose());
    }
    // Rows at multiples of the batch size; a failed call still uses budget, so
    // the trace is indexed by successes and clipped at the call count.
    const int rows = static_cast<int>((calls + step - 1) / step);
    double best = std::numeric_limits<double>::infinity();
    std::size_t k = 0;
    for (int r = 1; r <= rows; ++r) {
      const std::size_t upto = std::min(calls, static_cast<std::size_t>(r) * step);
      double elapsed = 0.0;
      for (; k < trace.size() && k < upto; ++k) {
        if (wants("rmsne")) best = std::min(best, rmsne(trace[k].first, task_.x_o));
        elapsed = trace[k].second;
      }
      MetricRow row{method, seed, r, upto, {}};
      for (const auto& name : metrics_) row.values[name] = std::nan("");
      if (wants("rmsne")) row.values["rmsne"] = best;
      if (r == rows && posterior && method == "abc")
        posterior_metrics(*posterior, *metric_sim, derive_seed(seed, fnv1a("metrics"), r), row);
      if (r == rows) elapsed = detail::seconds_since(t0);
      TimingRow t{method, seed, r, upto, {}, elapsed};
      t.times.simulate_s = elapsed;
      append_rows(cell, row, t);
    }
    save_state(cell, "done", rows, calls);
    out.done = true;
  }

  static nlohmann::json round_json(const RoundRecord& r) {
    nlohmann::json j;
    j["schema_version"] = kExperimentSchemaVersion;
    j["round"] = r.round;
    j["selected_indices"] = r.selected_indices;
    j["selected"] = nlohmann::json::array();
    for (const auto& t : r.selected) j["selected"].push_back(to_std(t));
    j["outputs"] = nlohmann::json::array();
    for (const auto& x : r.outputs) j["outputs"].push_back(to_std(x));
    j["simulator_calls"] = r.simulator_calls;
    j["replacements"] = r.replacements;
    j["failures"] = r.failures;
    j["acceptance_rate"] = r.acceptance_rate;
    j["times"] = {{"propose_s", r.times.propose_s},
                  {"acquire_s", r.times.acquire_s},
                  {"simulate_s", r.times.simulate_s},
                  {"train_s", r.times.train_s}};
    j["warnings"] = r.warnings;
    return j;
  }

  /// Mean RMSNE of single simulations at prior draws, one value per seed.
  std::vector<double> prior_rmsne() {
    auto sim = task_.make_simulator();
    std::vector<double> per_seed;
    for (auto seed : cfg_.seeds) {
      Rng rng(derive_seed(seed, fnv1a("prior-rmsne")));
      const SampleSet draws = task_.prior.sample(cfg_.prior_rmsne_draws, rng);
      std::vector<Vec> th;
      std::vector<std::uint64_t> seeds;
      for (Eigen::Index i = 0; i < draws.rows(); ++i) {
        th.emplace_back(draws.row(i).transpose());
        seeds.push_back(derive_seed(seed, fnv1a("prior-rmsne-sim"), i));
      }
      double s = 0.0;
      int n = 0;
      for (const auto& o : sim->simulate(th, seeds))
        if (o.ok()) {
          s += rmsne(*o.x, task_.x_o);
          ++n;
        }
      if (n) per_seed.push_back(s / n);
    }
    return per_seed;
  }

  void write_aggregates(const std::vector<CellOutcome>& outcomes) {
    std::string metrics = detail::metrics_header(metrics_) + "\n";
    std::string timing = std::string(detail::kTimingHeader) + "\n";
    std::map<std::string, std::map<std::string, std::vector<double>>> finals;  // method -> metric -> values
    std::map<std::string, std::vector<std::string>> failed;
    for (const auto& o : outcomes) {
      const fs::path cell = cell_dir(o.method, o.seed);
      if (o.failed) failed[o.method].push_back(std::to_string(o.seed));
      const auto mrows = detail::read_lines(cell / "metrics.csv");
      for (std::size_t i = 1; i < mrows.size(); ++i) metrics += mrows[i] + "\n";
      const auto trows = detail::read_lines(cell / "timing.csv");
      for (std::size_t i = 1; i < trows.size(); ++i) timing += trows[i] + "\n";
      if (o.done && !o.failed && mrows.size() > 1) {
        const auto f = detail::split_csv(mrows.back());
        for (std::size_t k = 0; k < metrics_.size(); ++k) {
          const double v = detail::parse_field(f[6 + k]);
          if (std::isfinite(v)) finals[o.method][metrics_[k]].push_back(v);
        }
      }
    }
    detail::write_text(dir_ / "metrics.csv", metrics);
    detail::write_text(dir_ / "timing.csv", timing);

    const bool all_done = std::all_of(outcomes.begin(), outcomes.end(), [](const auto& o) { return o.done || o.failed; });
    if (!all_done) {
      fs::remove(dir_ / "summary.csv");
      return;
    }
    std::ostringstream s;
    s << "method,metric,n,mean,sd,failed_seeds\n";
    auto emit = [&](const std::string& method, const std::string& metric, const std::vector<double>& v) {
      double mean = std::nan(""), sd = std::nan("");
      if (!v.empty()) {
        mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        if (v.size() > 1) {
          double ss = 0.0;
          for (double x : v) ss += (x - mean) * (x - mean);
          sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
        } else {
          sd = 0.0;
        }
      }
      std::string fs_list;
      for (const auto& f : failed[method]) fs_list += (fs_list.empty() ? "" : ";") + f;
      s << method << ',' << metric << ',' << v.size() << ',' << detail::fmt(mean) << ',' << detail::fmt(sd) << ','
        << fs_list << '\n';
    };
    if (wants("rmsne")) {
      try {
        emit("prior", "rmsne", prior_rmsne());
      } catch (const std::exception& e) {
        log(std::string("prior RMSNE skipped: ") + e.what());
      }
    }
    for (const auto& method : cfg_.methods)
      for (const auto& metric : metrics_) emit(method, metric, finals[method][metric]);
    detail::write_text(dir_ / "summary.csv", s.str());
  }

  ExperimentConfig cfg_;
  fs::path dir_;
  RunOptions opts_;
  std::vector<std::string> metrics_;
  std::string digest_;
  PreparedTask task_;
  std::mutex log_mu_;
};

// ---- entry points --------------------------------------------------------------------------

struct RunReport {
  fs::path dir;
  std::vector<CellOutcome> cells;
  [[nodiscard]] bool complete() const {
    return std::all_of(cells.begin(), cells.end(), [](const auto& c) { return c.done || c.failed; });
  }
  [[nodiscard]] std::size_t failed() const {
    return static_cast<std::size_t>(std::count_if(cells.begin(), cells.end(), [](const auto& c) { return c.failed; }));
  }
};

inline void write_config_snapshot(const ExperimentConfig& c, const fs::path& dir) {
  auto j = to_json(c);
  j["config_digest"] = config_digest(c);
  detail::write_text(dir / "config.json", j.dump(2) + "\n");
}

/// Starts a fresh run in config.output_dir (or `dir` when given). An existing
/// run directory with a different configuration is refused.
inline RunReport run_experiment(const ExperimentConfig& config, const RunOptions& options = {},
                                std::optional<fs::path> dir = std::nullopt) {
  config.validate();
  const fs::path out = dir.value_or(fs::path(config.output_dir));
  fs::create_directories(out);
  if (fs::exists(out / "config.json")) {
    const auto existing = detail::read_json(out / "config.json");
    if (existing.value("config_digest", std::string()) != config_digest(config))
      throw ConfigError("run: " + out.string() + " already holds a run with a different configuration");
  }
  write_config_snapshot(config, out);
  ExperimentRunner runner(config, out, options);
  return {out, runner.run()};
}

/// Continues an interrupted run from its snapshot.
inline RunReport resume_experiment(const fs::path& dir, const RunOptions& options = {}) {
  const fs::path snap = dir / "config.json";
  if (!fs::exists(snap)) throw Error("resume: " + dir.string() + " has no config snapshot");
  auto j = detail::read_json(snap);
  const int version = j.value("schema_version", -1);
  if (version != kExperimentSchemaVersion)
    throw ResumeRefused("resume: snapshot schema version " + std::to_string(version) + " differs from this binary's " +
                        std::to_string(kExperimentSchemaVersion));
  const std::string stored = j.value("config_digest", std::string());
  j.erase("config_digest");
  ExperimentConfig c;
  try {
    c = experiment_config_from_json(j);
  } catch (const ConfigError& e) {
    throw ResumeRefused(std::string("resume: snapshot no longer parses: ") + e.what());
  }
  if (config_digest(c) != stored) throw ResumeRefused("resume: snapshot digest mismatch; refusing to resume");
  bool any = false;
  bool all_done = fs::exists(dir / "summary.csv");
  for (const auto& m : c.methods)
    for (auto s : c.seeds) {
      const fs::path st = dir / "cells" / (m + "_seed" + std::to_string(s)) / "state.json";
      if (!fs::exists(st)) {
        all_done = false;
        continue;
      }
      any = true;
      const auto status = detail::read_json(st).value("status", std::string());
      if (status != "done" && status != "failed") all_done = false;
    }
  if (!any) throw Error("resume: " + dir.string() + " has no completed rounds");
  RunReport report{dir, {}};
  if (all_done) {
    if (options.log) *options.log << "run in " << dir.string() << " is already complete; nothing to do\n";
    for (const auto& m : c.methods)
      for (auto s : c.seeds) report.cells.push_back({m, s, true, false, {}});
    return report;
  }
  ExperimentRunner runner(c, dir, options);
  report.cells = runner.run();
  return report;
}

// ---- plots -------------------------------------------------------------------------------

struct Band {
  double mean = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

/// Mean with a percentile-bootstrap 95% interval. Reproducible for a fixed seed.
inline Band bootstrap_band(const std::vector<double>& v, int resamples = 1000, std::uint64_t seed = 2024) {
  if (v.empty()) throw Error("bootstrap: empty sample");
  Band b;
  b.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, v.size() - 1);
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) s += v[pick(rng)];
    m = s / static_cast<double>(v.size());
  }
  std::sort(means.begin(), means.end());
  auto q = [&](double p) {
    const double pos = p * static_cast<double>(means.size() - 1);
    const auto i = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(i);
    return i + 1 < means.size() ? means[i] * (1 - frac) + means[i + 1] * frac : means[i];
  };
  b.lo = q(0.025);
  b.hi = q(0.975);
  return b;
}

namespace detail {

struct Series {
  std::string label;
  std::vector<double> x, y, lo, hi;
};

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  return colors[i % 6];
}

inline std::string svg_plot(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                            const std::vector<Series>& series, double x_max) {
  const double W = 660, H = 420, L = 80, R = 150, T = 40, B = 50;
  double y_min = std::numeric_limits<double>::infinity(), y_max = -y_min;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.y.size(); ++i) {
      y_min = std::min({y_min, s.y[i], s.lo.empty() ? s.y[i] : s.lo[i]});
      y_max = std::max({y_max, s.y[i], s.hi.empty() ? s.y[i] : s.hi[i]});
    }
  if (!std::isfinite(y_min)) y_min = 0, y_max = 1;
  if (y_max - y_min < 1e-12) y_min -= 0.5, y_max += 0.5;
  const double pad = 0.05 * (y_max - y_min);
  y_min -= pad;
  y_max += pad;
  if (!(x_max > 0)) x_max = 1;
  auto px = [&](double x) { return L + (W - L - R) * x / x_max; };
  auto py = [&](double y) { return T + (H - T - B) * (1.0 - (y - y_min) / (y_max - y_min)); };
  auto tick = [](double v) {
    std::ostringstream t;
    t << std::setprecision(3) << (std::abs(v) < 1e-12 ? 0.0 : v);
    return t.str();
  };
  std::ostringstream os;
  os << std::setprecision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x_max * k / 4.0, yv = y_min + (y_max - y_min) * k / 4.0;
    os << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << tick(xv) << "</text>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << tick(yv) << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
  os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << (T + H - B) / 2 << ")\">" << ylabel << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    if (s.x.empty()) continue;
    if (!s.lo.empty()) {
      os << "<polygon fill=\"" << palette(k) << "\" fill-opacity=\"0.2\" stroke=\"none\" points=\"";
      for (std::size_t i = 0; i < s.x.size(); ++i) os << px(s.x[i]) << ',' << py(s.hi[i]) << ' ';
      for (std::size_t i = s.x.size(); i-- > 0;) os << px(s.x[i]) << ',' << py(s.lo[i]) << ' ';
      os << "\"/>\n";
    }
    os << "<polyline fill=\"none\" stroke=\"" << palette(k) << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) os << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
    os << "\"/>\n";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      os << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i]) << "\" r=\"3\" fill=\"" << palette(k) << "\"/>\n";
    os << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * (k + 1) << "\" fill=\"" << palette(k) << "\">"
       << s.label << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace detail

struct PlotReport {
  std::vector<fs::path> files;
  std::vector<std::string> warnings;
};

/// Per-metric SVGs: mean over seeds with bootstrap bands against cumulative
/// simulations, and each method's best run against wallclock.
inline PlotReport emit_plots(const fs::path& dir, int resamples = 1000, std::uint64_t seed = 2024) {
  const auto lines = detail::read_lines(dir / "metrics.csv");
  if (lines.empty()) throw Error("plot: " + (dir / "metrics.csv").string() + " is missing or empty");
  const auto header = detail::split_csv(lines[0]);
  const auto snap = detail::read_json(dir / "config.json");
  const double x_max = snap.value("budget_cap", 0.0);
  const auto expected = snap.value("metrics", std::vector<std::string>{});
  PlotReport rep;
  const fs::path out = dir / "plots";
  fs::create_directories(out);

  // method -> seed -> round -> (simulations, row fields)
  std::vector<std::vector<std::string>> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) rows.push_back(detail::split_csv(lines[i]));
  std::map<std::tuple<std::string, std::string, std::string>, double> wall;
  for (const auto& l : [&] {
         auto t = detail::read_lines(dir / "timing.csv");
         if (!t.empty()) t.erase(t.begin());
         return t;
       }()) {
    const auto f = detail::split_csv(l);
    wall[{f[0], f[1], f[2]}] = detail::parse_field(f.back());
  }
  std::vector<std::string> methods;
  for (const auto& r : rows)
    if (std::find(methods.begin(), methods.end(), r[2]) == methods.end()) methods.push_back(r[2]);

  for (const auto& metric : expected) {
    const auto it = std::find(header.begin(), header.end(), metric);
    if (it == header.end()) {
      rep.warnings.push_back("plot: metrics.csv has no column '" + metric + "'; skipped");
      continue;
    }
    const auto col = static_cast<std::size_t>(it - header.begin());
    std::vector<detail::Series> by_sims, by_wall;
    bool any = false;
    for (const auto& method : methods) {
      std::map<double, std::vector<double>> at;  // simulations -> values over seeds
      std::map<std::string, std::vector<std::pair<double, double>>> runs;
      for (const auto& r : rows) {
        if (r[2] != method) continue;
        const double v = detail::parse_field(r[col]);
        if (!std::isfinite(v)) continue;
        at[std::stod(r[5])].push_back(v);
        const auto w = wall.find({r[2], r[3], r[4]});
        if (w != wall.end()) runs[r[3]].emplace_back(w->second, v);
      }
      if (at.empty()) continue;
      any = true;
      detail::Series s{method, {}, {}, {}, {}};
      for (const auto& [x, vals] : at) {
        const Band b = bootstrap_band(vals, resamples, derive_seed(seed, static_cast<std::uint64_t>(x)));
        s.x.push_back(x);
        s.y.push_back(b.mean);
        s.lo.push_back(b.lo);
        s.hi.push_back(b.hi);
      }
      by_sims.push_back(std::move(s));
      // Best run: lowest final value.
      const std::vector<std::pair<double, double>>* best = nullptr;
      for (const auto& [sd, traj] : runs)
        if (!best || traj.back().second < best->back().second) best = &traj;
      if (best) {
        detail::Series w{method + " (best run)", {}, {}, {}, {}};
        for (const auto& [x, y] : *best) {
          w.x.push_back(x);
          w.y.push_back(y);
        }
        by_wall.push_back(std::move(w));
      }
    }
    if (!any) {
      rep.warnings.push_back("plot: column '" + metric + "' has no values; skipped");
      continue;
    }
    const fs::path a = out / (metric + "_vs_simulations.svg");
    detail::write_text(a, detail::svg_plot(metric + " vs simulations", "simulations", metric, by_sims, x_max));
    rep.files.push_back(a);
    double w_max = 0.0;
    for (const auto& s : by_wall)
      for (double x : s.x) w_max = std::max(w_max, x);
    const fs::path b = out / (metric + "_vs_wallclock.svg");
    detail::write_text(b, detail::svg_plot(metric + " vs wallclock", "elapsed seconds", metric, by_wall, w_max));
    rep.files.push_back(b);
  }
  return rep;
}

}  // namespace asnpe
