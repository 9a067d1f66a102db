#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <stdexcept>
#include <thread>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

namespace mechkit {

// Running mean/variance; merge() is Chan's pairwise update so chunked
// reductions are order-deterministic.
struct Moments {
  std::uint64_t n = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void add(double x) {
    ++n;
    const double d = x - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (x - mean);
  }
  void merge(const Moments& o) {
    if (o.n == 0) return;
    if (n == 0) {
      *this = o;
      return;
    }
    const double tot = static_cast<double>(n + o.n);
    const double d = o.mean - mean;
    mean += d * static_cast<double>(o.n) / tot;
    m2 += o.m2 + d * d * static_cast<double>(n) * static_cast<double>(o.n) / tot;
    n += o.n;
  }
  double variance() const { return n > 1 ? m2 / static_cast<double>(n - 1) : 0.0; }
  double stderr_mean() const { return n > 0 ? std::sqrt(variance() / static_cast<double>(n)) : 0.0; }
};

struct Estimate {
  double mean = 0.0;
  double stderr_mean = 0.0;
  std::uint64_t samples = 0;
};

inline Estimate to_estimate(const Moments& m) { return {m.mean, m.stderr_mean(), m.n}; }

inline double chi_square_sf(double stat, double dof) {
  if (dof <= 0) return 1.0;
  if (stat <= 0) return 1.0;
  boost::math::chi_squared dist(dof);
  return boost::math::cdf(boost::math::complement(dist, stat));
}

struct ChiSquareResult {
  double statistic = 0.0;
  double dof = 0.0;
  double p_value = 1.0;
};

// Goodness of fit of observed counts against probabilities. Cells with zero
// expected probability must have zero counts; otherwise p = 0.
inline ChiSquareResult chi_square_gof(const std::vector<std::uint64_t>& counts, const std::vector<double>& probs) {
  if (counts.size() != probs.size()) throw std::invalid_argument("chi_square_gof: size mismatch");
  std::uint64_t total = 0;
  for (auto c : counts) total += c;
  ChiSquareResult r;
  int cells = 0;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    const double e = probs[k] * static_cast<double>(total);
    if (e <= 0.0) {
      if (counts[k] > 0) return {INFINITY, 0.0, 0.0};
      continue;
    }
    const double d = static_cast<double>(counts[k]) - e;
    r.statistic += d * d / e;
    ++cells;
  }
  r.dof = std::max(0, cells - 1);
  r.p_value = chi_square_sf(r.statistic, r.dof);
  return r;
}

// Two-sample homogeneity test on a pair of count vectors.
inline ChiSquareResult chi_square_two_sample(const std::vector<std::uint64_t>& a, const std::vector<std::uint64_t>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("chi_square_two_sample: size mismatch");
  double na = 0, nb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    na += static_cast<double>(a[k]);
    nb += static_cast<double>(b[k]);
  }
  ChiSquareResult r;
  int cells = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double col = static_cast<double>(a[k] + b[k]);
    if (col == 0.0) continue;
    ++cells;
    const double ea = col * na / (na + nb);
    const double eb = col * nb / (na + nb);
    r.statistic += (a[k] - ea) * (a[k] - ea) / ea + (b[k] - eb) * (b[k] - eb) / eb;
  }
  r.dof = std::max(0, cells - 1);
  r.p_value = chi_square_sf(r.statistic, r.dof);
  return r;
}

inline unsigned worker_count() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1u : hw;
}

// Runs body(chunk) for chunk in [0, chunks) on a small pool. Results must be
// written to per-chunk slots so reduction order is fixed by the caller.
inline void parallel_chunks(std::size_t chunks, const std::function<void(std::size_t)>& body,
                            unsigned threads = worker_count()) {
  threads = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, threads), chunks));
  if (threads <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) body(c);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  pool.reserve(threads);
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t c = w; c < chunks; c += threads) body(c);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace mechkit
