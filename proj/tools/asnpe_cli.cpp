// Command-line front end for batch experiments.
//
// Exit codes: 0 success, 1 configuration error, 2 runtime failure,
// 3 resume refused (schema or digest mismatch).

#include "asnpe/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

enum ExitCode : int { kOk = 0, kConfig = 1, kRuntime = 2, kRefused = 3 };

int report(const asnpe::RunReport& r) {
  std::cout << "run directory: " << r.dir.string() << '\n';
  for (const auto& c : r.cells)
    std::cout << "  " << c.method << " seed " << c.seed << ": "
              << (c.failed ? "failed (" + c.error + ")" : c.done ? "done" : "interrupted") << '\n';
  if (r.complete() && std::filesystem::exists(r.dir / "summary.csv")) {
    std::ifstream in(r.dir / "summary.csv");
    std::cout << in.rdbuf();
  }
  return r.failed() > 0 ? kRuntime : kOk;
}

/// Sends one request per dimension check and prints the reply.
int validate_simulator(const asnpe::ExperimentConfig& cfg) {
  const auto task = asnpe::prepare_task(cfg);
  auto sim = task.make_simulator();
  const asnpe::Vec theta = task.prior.mean();
  const std::uint64_t seed = 1;
  const auto out = sim->simulate({theta}, std::span<const std::uint64_t>(&seed, 1));
  if (!out[0].ok()) {
    std::cerr << "simulator failed: " << out[0].error << '\n';
    return kRuntime;
  }
  if (out[0].x->size() != task.x_o.size()) {
    std::cerr << "simulator returned " << out[0].x->size() << " outputs, observation has " << task.x_o.size() << '\n';
    return kRuntime;
  }
  std::cout << "simulator ok: theta_dim " << theta.size() << ", x_dim " << out[0].x->size() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Active sequential neural posterior estimation experiments"};
  app.require_subcommand(1);

  std::string config_path, run_dir, output_dir;
  std::optional<int> stop_after;
  bool quiet = false;

  auto* run = app.add_subcommand("run", "Run an experiment from a JSON configuration");
  run->add_option("config", config_path, "Configuration file")->required()->check(CLI::ExistingFile);
  run->add_option("--output-dir", output_dir, "Override output_dir from the configuration");
  run->add_option("--stop-after-round", stop_after, "Stop every sequential cell after this round (testing aid)");
  run->add_flag("-q,--quiet", quiet, "Suppress progress lines");

  auto* resume = app.add_subcommand("resume", "Continue an interrupted run");
  resume->add_option("dir", run_dir, "Run directory")->required();
  resume->add_option("--stop-after-round", stop_after, "Stop again after this round (testing aid)");
  resume->add_flag("-q,--quiet", quiet, "Suppress progress lines");

  auto* plot = app.add_subcommand("plot", "Write SVG plots for a run directory");
  plot->add_option("dir", run_dir, "Run directory")->required();

  auto* show = app.add_subcommand("print-effective-config", "Print the configuration with defaults filled in");
  show->add_option("config", config_path, "Configuration file")->required()->check(CLI::ExistingFile);

  auto* check = app.add_subcommand("validate-simulator", "Simulate once at the prior mean and check dimensions");
  check->add_option("config", config_path, "Configuration file")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  asnpe::RunOptions opts;
  opts.stop_after_round = stop_after;
  opts.log = quiet ? nullptr : &std::cerr;
  try {
    if (*run) {
      auto cfg = asnpe::load_experiment_config(config_path);
      if (!output_dir.empty()) cfg.output_dir = output_dir;
      return report(asnpe::run_experiment(cfg, opts));
    }
    if (*resume) return report(asnpe::resume_experiment(run_dir, opts));
    if (*plot) {
      const auto r = asnpe::emit_plots(run_dir);
      for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
      for (const auto& f : r.files) std::cout << f.string() << '\n';
      return kOk;
    }
    if (*show) {
      std::cout << asnpe::to_json(asnpe::load_experiment_config(config_path)).dump(2) << '\n';
      return kOk;
    }
    if (*check) return validate_simulator(asnpe::load_experiment_config(config_path));
  } catch (const asnpe::ResumeRefused& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRefused;
  } catch (const asnpe::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kOk;
}
