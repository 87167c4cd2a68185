#pragma once

// Child-process simulator speaking line-delimited JSON over stdin/stdout.
//
//   request:  {"v": 1, "id": <int>, "theta": [<real>, ...], "seed": <uint>}
//   response: {"id": <int>, "x": [<real>, ...]}  or  {"id": <int>, "error": <string>}
//
// Requests are pipelined; responses may arrive in any order and are matched
// by id. A child that exits, times out or answers with a malformed line fails
// only the requests it left unanswered.

#include "asnpe/simulators.hpp"

#include <json.hpp>

#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <csignal>
#include <mutex>
#include <set>
#include <thread>
#include <unordered_map>

#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

namespace asnpe {

inline constexpr int kSimProtocolVersion = 1;

namespace protocol {

inline std::string encode_request(std::int64_t id, const Vec& theta, std::uint64_t seed) {
  nlohmann::json j;
  j["v"] = kSimProtocolVersion;
  j["id"] = id;
  j["theta"] = to_std(theta);
  j["seed"] = seed;
  return j.dump();
}

struct Response {
  std::optional<std::int64_t> id;
  SimOutcome outcome;
};

/// Parses one response line. A line without a usable id yields id = nullopt.
inline Response parse_response(std::string_view line) {
  Response r;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    r.outcome = SimOutcome::failure(std::string("malformed response: ") + e.what());
    return r;
  }
  if (!j.is_object() || !j.contains("id") || !j["id"].is_number_integer()) {
    r.outcome = SimOutcome::failure("malformed response: missing integer id");
    return r;
  }
  r.id = j["id"].get<std::int64_t>();
  if (j.contains("error")) {
    r.outcome = SimOutcome::failure(j["error"].is_string() ? j["error"].get<std::string>() : j["error"].dump());
    return r;
  }
  if (!j.contains("x") || !j["x"].is_array()) {
    r.outcome = SimOutcome::failure("malformed response: missing x");
    return r;
  }
  Vec x(static_cast<Eigen::Index>(j["x"].size()));
  for (std::size_t i = 0; i < j["x"].size(); ++i) {
    if (!j["x"][i].is_number()) {
      r.outcome = SimOutcome::failure("malformed response: non-numeric x entry");
      return r;
    }
    x[static_cast<Eigen::Index>(i)] = j["x"][i].get<double>();
  }
  r.outcome = SimOutcome::success(std::move(x));
  return r;
}

}  // namespace protocol

struct ExternalSimulatorOptions {
  std::vector<std::string> command;
  std::string working_dir = ".";
  int theta_dim = 0;
  int x_dim = 0;
  std::chrono::milliseconds timeout{30000};
};

class ExternalSimulator final : public Simulator {
 public:
  explicit ExternalSimulator(ExternalSimulatorOptions options) : opts_(std::move(options)) {
    if (opts_.command.empty()) throw ConfigError("external simulator: empty command");
    spawn();
  }

  ExternalSimulator(const ExternalSimulator&) = delete;
  ExternalSimulator& operator=(const ExternalSimulator&) = delete;

  ~ExternalSimulator() override { shutdown(); }

  [[nodiscard]] int theta_dim() const override { return opts_.theta_dim; }
  [[nodiscard]] int x_dim() const override { return opts_.x_dim; }

  std::vector<SimOutcome> simulate(const std::vector<Vec>& thetas, std::span<const std::uint64_t> seeds) override {
    if (seeds.size() != thetas.size()) throw Error("simulate: one seed per theta required");
    std::vector<SimOutcome> out = submit(thetas, seeds);
    // A dying child takes every unanswered request with it. Rerun those one at
    // a time on a fresh child so only the culprit stays failed.
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (out[i].ok() || out[i].error.rfind(kChildExited, 0) != 0) continue;
      const std::vector<Vec> one{thetas[i]};
      const std::uint64_t s = seeds[i];
      out[i] = std::move(submit(one, std::span<const std::uint64_t>(&s, 1))[0]);
    }
    return out;
  }

  /// Every line exchanged so far: "> " requests and "< " responses.
  [[nodiscard]] std::vector<std::string> transcript() const {
    std::lock_guard lock(mu_);
    return transcript_;
  }

  [[nodiscard]] bool is_dead() const {
    std::lock_guard lock(mu_);
    return dead_;
  }

 private:
  static constexpr std::string_view kChildExited = "external simulator: child exited";

  std::vector<SimOutcome> submit(const std::vector<Vec>& thetas, std::span<const std::uint64_t> seeds) {
    if (is_dead()) {
      shutdown();
      spawn();
    }
    std::vector<std::int64_t> ids(thetas.size());
    std::vector<SimOutcome> out(thetas.size());
    std::vector<bool> sent(thetas.size(), false);
    for (std::size_t i = 0; i < thetas.size(); ++i) {
      std::int64_t id;
      {
        std::lock_guard lock(mu_);
        id = next_id_++;
        pending_.insert(id);
      }
      ids[i] = id;
      const std::string line = protocol::encode_request(id, thetas[i], seeds[i]) + "\n";
      if (write_all(line)) {
        sent[i] = true;
        std::lock_guard lock(mu_);
        transcript_.push_back("> " + line.substr(0, line.size() - 1));
      } else {
        out[i] = SimOutcome::failure("external simulator: write to child failed");
      }
    }
    const auto deadline = std::chrono::steady_clock::now() + opts_.timeout;
    bool timed_out = false;
    std::unique_lock lock(mu_);
    for (std::size_t i = 0; i < thetas.size(); ++i) {
      if (!sent[i]) {
        pending_.erase(ids[i]);
        continue;
      }
      const bool got = cv_.wait_until(lock, deadline, [&] { return results_.count(ids[i]) > 0 || dead_; });
      auto it = results_.find(ids[i]);
      if (it != results_.end()) {
        out[i] = std::move(it->second);
        results_.erase(it);
      } else if (dead_) {
        out[i] = SimOutcome::failure(std::string(kChildExited) + " (" + exit_reason_ + ")");
      } else if (!got) {
        out[i] = SimOutcome::failure("external simulator: timeout");
        timed_out = true;
      }
      pending_.erase(ids[i]);
      if (out[i].ok() && opts_.x_dim > 0 && out[i].x->size() != opts_.x_dim)
        out[i] = SimOutcome::failure("external simulator: response has wrong dimension");
    }
    lock.unlock();
    // A stuck child would stall every later request; start over next time.
    if (timed_out) shutdown();
    return out;
  }

  void spawn() {
    int in_pair[2], out_pair[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM, 0, in_pair) != 0 || ::socketpair(AF_UNIX, SOCK_STREAM, 0, out_pair) != 0)
      throw Error("external simulator: socketpair failed");
    std::vector<std::string> args = opts_.command;
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    const pid_t pid = ::fork();
    if (pid < 0) throw Error("external simulator: fork failed");
    if (pid == 0) {
      ::dup2(in_pair[1], STDIN_FILENO);
      ::dup2(out_pair[1], STDOUT_FILENO);
      ::close(in_pair[0]);
      ::close(in_pair[1]);
      ::close(out_pair[0]);
      ::close(out_pair[1]);
      if (::chdir(opts_.working_dir.c_str()) != 0) ::_exit(126);
      ::execvp(argv[0], argv.data());
      ::_exit(127);
    }
    ::close(in_pair[1]);
    ::close(out_pair[1]);
    pid_ = pid;
    to_child_ = in_pair[0];
    from_child_ = out_pair[0];
    {
      std::lock_guard lock(mu_);
      dead_ = false;
      exit_reason_.clear();
      malformed_.clear();
      results_.clear();
    }
    reader_ = std::thread([this] { read_loop(); });
  }

  void shutdown() {
    if (pid_ <= 0) return;
    if (to_child_ >= 0) {
      ::shutdown(to_child_, SHUT_WR);
    }
    int status = 0;
    bool reaped = false;
    for (int i = 0; i < 100 && !reaped; ++i) {
      const pid_t r = ::waitpid(pid_, &status, WNOHANG);
      if (r == pid_ || r < 0) {
        reaped = true;
        break;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    if (!reaped) {
      ::kill(pid_, SIGKILL);
      ::waitpid(pid_, &status, 0);
    }
    if (reader_.joinable()) reader_.join();
    if (to_child_ >= 0) ::close(to_child_);
    if (from_child_ >= 0) ::close(from_child_);
    to_child_ = from_child_ = -1;
    pid_ = -1;
  }

  bool write_all(const std::string& data) {
    std::lock_guard lock(write_mu_);
    std::size_t off = 0;
    while (off < data.size()) {
      const ssize_t n = ::send(to_child_, data.data() + off, data.size() - off, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        return false;
      }
      off += static_cast<std::size_t>(n);
    }
    return true;
  }

  void read_loop() {
    std::string buffer;
    char chunk[4096];
    for (;;) {
      const ssize_t n = ::read(from_child_, chunk, sizeof chunk);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) break;
      buffer.append(chunk, static_cast<std::size_t>(n));
      std::size_t pos;
      while ((pos = buffer.find('\n')) != std::string::npos) {
        std::string line = buffer.substr(0, pos);
        buffer.erase(0, pos + 1);
        if (line.empty()) continue;
        auto resp = protocol::parse_response(line);
        std::lock_guard lock(mu_);
        transcript_.push_back("< " + line);
        if (resp.id && pending_.count(*resp.id)) results_[*resp.id] = std::move(resp.outcome);
        if (!resp.id && malformed_.empty()) {
          // Without an id the stream is out of sync; nothing after it can be trusted.
          malformed_ = resp.outcome.error;
          ::kill(pid_, SIGKILL);
        }
        cv_.notify_all();
      }
    }
    int status = 0;
    std::string reason = "stdout closed";
    if (::waitpid(pid_, &status, 0) == pid_) {
      if (WIFEXITED(status)) reason = "exit status " + std::to_string(WEXITSTATUS(status));
      else if (WIFSIGNALED(status)) reason = "signal " + std::to_string(WTERMSIG(status));
    }
    std::lock_guard lock(mu_);
    dead_ = true;
    exit_reason_ = malformed_.empty() ? reason : malformed_;
    cv_.notify_all();
  }

  ExternalSimulatorOptions opts_;
  pid_t pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::thread reader_;
  mutable std::mutex mu_;
  std::mutex write_mu_;
  std::condition_variable cv_;
  std::int64_t next_id_ = 0;
  std::unordered_map<std::int64_t, SimOutcome> results_;
  std::set<std::int64_t> pending_;
  std::vector<std::string> transcript_;
  bool dead_ = false;
  std::string exit_reason_;
  std::string malformed_;
};

}  // namespace asnpe
