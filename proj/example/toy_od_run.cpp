// Calibrates origin-destination demand on the toy network with ASNPE and
// SNPE using the library directly, then prints the RMSNE of the best
// simulation so far after every round.
//
//   od_example [seed]

#include "asnpe/inference.hpp"
#include "asnpe/metrics.hpp"

#include <iostream>

int main(int argc, char** argv) {
  using namespace asnpe;
  const std::uint64_t seed = argc > 1 ? std::stoull(argv[1]) : 1;
  try {
    const OdScenario scenario = make_od_scenario(OdScenarioRecipe{});
    const TaskSpec task = task_toy_od(scenario);
    const auto obs = make_observation(task, 1);

    InferenceConfig cfg;
    cfg.rounds = 4;
    cfg.pool_size = 256;
    cfg.batch_size = 32;
    cfg.budget_cap = 128;
    cfg.seed = seed;

    std::cout << "prior estimate RMSNE (noise-free): "
              << rmsne(scenario.assignment * scenario.prior_estimate, obs.x_o) << "\n";
    for (const Method m : {Method::asnpe, Method::snpe}) {
      TaskSimulator sim(task);
      double best = std::numeric_limits<double>::infinity();
      const RoundCallback report = [&](const RoundRecord& rec, const InferenceState& state) {
        for (const auto& x : rec.outputs) best = std::min(best, rmsne(x, obs.x_o));
        std::cout << (m == Method::asnpe ? "asnpe" : "snpe ") << "  round " << rec.round << "  simulations "
                  << state.simulator_calls << "  best RMSNE " << best << "\n";
      };
      (void)run_sequential(m, task.prior, sim, obs.x_o, cfg, {}, report);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
