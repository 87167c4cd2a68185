#pragma once

// Shared vocabulary for the asnpe library: vector types, errors, seed
// derivation and a small deterministic parallel-for.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace asnpe {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
/// Flat parameter storage. Eigen-aligned so vectorized kernels over it see the
/// same alignment on every run, which keeps results bit-reproducible.
using Weights = std::vector<double, Eigen::aligned_allocator<double>>;

/// A set of draws, one draw per row.
using SampleSet = Eigen::MatrixXd;

using Rng = std::mt19937_64;

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a density evaluation produces a non-finite intermediate.
class EvaluationError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Derives an independent stream seed from a master seed and a tag path.
/// derive_seed(s, a, b) != derive_seed(s, b, a) in general.
template <typename... Tags>
std::uint64_t derive_seed(std::uint64_t seed, Tags... tags) {
  std::uint64_t h = detail::splitmix64(seed);
  ((h = detail::splitmix64(h ^ static_cast<std::uint64_t>(tags))), ...);
  return h;
}

/// Stable 64-bit FNV-1a hash, used for phase tags and config digests.
inline std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

inline Vec standard_normal_vec(Eigen::Index n, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = normal(rng);
  return v;
}

/// log(sum(exp(v))) with max shift.
inline double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline double log_mean_exp(std::span<const double> v) {
  return log_sum_exp(v) - std::log(static_cast<double>(v.size()));
}

inline Vec to_vec(std::span<const double> v) {
  return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline std::vector<double> to_std(const Vec& v) { return {v.data(), v.data() + v.size()}; }

inline unsigned default_workers() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1u : hw;
}

/// Runs body(i) for i in [0, n) on up to `workers` threads. Each index is
/// visited exactly once; callers write results into slot i so that the
/// outcome does not depend on scheduling.
inline void parallel_for(std::size_t n, unsigned workers, const std::function<void(std::size_t)>& body) {
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(n)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::jthread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) body(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  pool.clear();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Column mean and (population) standard deviation of a sample set.
inline std::pair<Vec, Vec> column_moments(const SampleSet& s) {
  const Vec mean = s.colwise().mean().transpose();
  const Vec sd = ((s.rowwise() - mean.transpose()).array().square().colwise().sum() /
                  static_cast<double>(s.rows()))
                     .sqrt()
                     .transpose();
  return {mean, sd};
}

}  // namespace asnpe
