#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>

namespace mechkit {

// SplitMix64 finalizer (Stafford mix 13).
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Counter-based generator: the i-th output of a stream with key k is
// mix64(k + i * 0x9e3779b97f4a7c15), i.e. SplitMix64 evaluated at an explicit
// counter. Substreams derive a new key from (key, tag) without touching the
// counter, so any stream can be reconstructed from (seed, path of tags).
class Stream {
 public:
  using result_type = std::uint64_t;
  static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

  explicit Stream(std::uint64_t seed = 0) : key_(mix64(seed ^ 0x6a09e667f3bcc909ULL)) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return next(); }
  std::uint64_t next() { return mix64(key_ + (++counter_) * kGolden); }

  Stream child(std::uint64_t tag) const {
    Stream s;
    s.key_ = mix64(key_ ^ mix64(tag * kGolden + 0xbb67ae8584caa73bULL));
    s.counter_ = 0;
    return s;
  }
  Stream child(std::uint64_t a, std::uint64_t b) const { return child(a).child(b); }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  // Uniform on [0,1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Uniform on (0,1).
  double uniform_open() {
    double u;
    do { u = uniform(); } while (u == 0.0);
    return u;
  }

  // Uniform integer in [0, n) by Lemire's multiply-shift with rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("below: n must be positive");
    unsigned __int128 m = static_cast<unsigned __int128>(next()) * n;
    auto lo = static_cast<std::uint64_t>(m);
    if (lo < n) {
      const std::uint64_t t = (0 - n) % n;
      while (lo < t) {
        m = static_cast<unsigned __int128>(next()) * n;
        lo = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

namespace detail {

inline double log_factorial(std::uint64_t k) { return std::lgamma(static_cast<double>(k) + 1.0); }

}  // namespace detail

// Poisson(lambda). Inversion by sequential search for lambda <= 30; above that
// the PTRS transformed-rejection method (Hormann 1993).
inline std::uint64_t poisson(double lambda, Stream& rng) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("poisson: lambda must be finite and >= 0");
  if (lambda == 0.0) return 0;
  if (lambda <= 30.0) {
    double p = std::exp(-lambda);
    double cdf = p;
    const double u = rng.uniform();
    std::uint64_t k = 0;
    while (u >= cdf) {
      ++k;
      p *= lambda / static_cast<double>(k);
      const double next = cdf + p;
      if (next == cdf) break;  // tail underflow
      cdf = next;
    }
    return k;
  }
  const double slam = std::sqrt(lambda);
  const double loglam = std::log(lambda);
  const double b = 0.931 + 2.53 * slam;
  const double a = -0.059 + 0.02483 * b;
  const double invalpha = 1.1239 + 1.1328 / (b - 3.4);
  const double vr = 0.9277 - 3.6224 / (b - 2.0);
  for (;;) {
    const double u = rng.uniform() - 0.5;
    const double v = rng.uniform_open();
    const double us = 0.5 - std::fabs(u);
    const double kd = std::floor((2.0 * a / us + b) * u + lambda + 0.43);
    if (us >= 0.07 && v <= vr) return static_cast<std::uint64_t>(kd);
    if (kd < 0.0 || (us < 0.013 && v > us)) continue;
    const auto k = static_cast<std::uint64_t>(kd);
    if (std::log(v) + std::log(invalpha) - std::log(a / (us * us) + b) <=
        -lambda + kd * loglam - detail::log_factorial(k))
      return k;
  }
}

}  // namespace mechkit
