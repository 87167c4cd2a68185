// Protocol test child. Usage: sim_child <mode> [args]
//   echo                  x = theta
//   reverse               answers each burst of requests in reverse order
//   crash                 exits without answering when theta[0] == 13
//   error                 error response when theta[0] < 0
//   malformed             garbage line when theta[0] < 0
//   sleep                 sleeps theta[0] seconds before answering
//   task <name> [dim]     serves a built-in task (linear_gaussian, toy_od)
#include "asnpe/simulators.hpp"

#include <json.hpp>

#include <chrono>
#include <iostream>
#include <string>
#include <thread>

#include <poll.h>
#include <unistd.h>

using nlohmann::json;

namespace {

json respond(const std::string& mode, const asnpe::TaskSpec* task, const json& req) {
  const auto id = req.at("id").get<std::int64_t>();
  const auto theta = req.at("theta").get<std::vector<double>>();
  const std::uint64_t seed = req.value("seed", std::uint64_t{0});
  json out{{"id", id}};
  if (task) {
    try {
      asnpe::Rng rng(seed);
      out["x"] = asnpe::to_std(task->simulate(asnpe::to_vec(theta), rng));
    } catch (const std::exception& e) {
      out["error"] = e.what();
    }
    return out;
  }
  if (mode == "error" && !theta.empty() && theta[0] < 0) {
    out["error"] = "negative input";
    return out;
  }
  if (mode == "sleep" && !theta.empty()) std::this_thread::sleep_for(std::chrono::duration<double>(theta[0]));
  out["x"] = theta;
  return out;
}

bool input_pending() {
  pollfd p{STDIN_FILENO, POLLIN, 0};
  return ::poll(&p, 1, 50) > 0;
}

}  // namespace

int main(int argc, char** argv) {
  const std::string mode = argc > 1 ? argv[1] : "echo";
  std::optional<asnpe::TaskSpec> task;
  if (mode == "task") {
    const std::string name = argc > 2 ? argv[2] : "linear_gaussian";
    if (name == "linear_gaussian") task = asnpe::task_linear_gaussian(argc > 3 ? std::stoi(argv[3]) : 2);
    else if (name == "toy_od") task = asnpe::task_toy_od(asnpe::make_od_scenario({}));
    else return 2;
  }
  std::ios::sync_with_stdio(false);
  std::vector<json> burst;
  std::string line;
  while (std::getline(std::cin, line)) {
    if (line.empty()) continue;
    const json req = json::parse(line);
    const auto theta = req.at("theta").get<std::vector<double>>();
    if (mode == "crash" && !theta.empty() && theta[0] == 13.0) {
      std::cout.flush();
      ::_exit(3);
    }
    if (mode == "malformed" && !theta.empty() && theta[0] < 0) {
      std::cout << "{not json" << '\n' << std::flush;
      continue;
    }
    burst.push_back(respond(mode, task ? &*task : nullptr, req));
    if (mode == "reverse" && std::cin.rdbuf()->in_avail() > 0) continue;
    if (mode == "reverse" && input_pending()) continue;
    if (mode == "reverse") std::reverse(burst.begin(), burst.end());
    for (const auto& r : burst) std::cout << r.dump() << '\n';
    std::cout << std::flush;
    burst.clear();
  }
  return 0;
}
