#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "mechkit/core.hpp"
#include "mechkit/rng.hpp"

namespace mechkit {

enum class SamplerBackend { race, exact_mean };

inline const char* to_string(SamplerBackend b) { return b == SamplerBackend::race ? "race" : "exact_mean"; }

// A coin emitting bounded reals in [-1,1] (or {0,1}); mean is optional.
struct CoinSource {
  std::function<double(Stream&)> flip;
  std::optional<double> exact_mean;

  static CoinSource constant(double v) {
    return {[v](Stream&) { return v; }, v};
  }
  // Two-point law on {lo, hi} with the given mean.
  static CoinSource two_point(double lo, double hi, double mean) {
    const double p = hi == lo ? 1.0 : (mean - lo) / (hi - lo);
    return {[=](Stream& r) { return r.uniform() < p ? hi : lo; }, mean};
  }
};

struct GibbsRequest {
  std::vector<CoinSource> candidates;
  std::vector<double> offsets;  // alpha_k in [0, h]
  double h = 0.0;
  double delta = 1.0;

  void validate() const {
    if (candidates.empty()) throw InvalidInput("gibbs: empty candidate set");
    if (!(delta > 0.0)) throw InvalidInput("gibbs: delta must be positive");
    if (!(h >= 0.0)) throw InvalidInput("gibbs: h must be nonnegative");
    if (offsets.size() != candidates.size()) throw InvalidInput("gibbs: one offset per candidate");
    for (double a : offsets)
      if (!(a >= -1e-12 && a <= h + 1e-12)) throw InvalidInput("gibbs: offsets must lie in [0,h]");
  }
};

struct GibbsTelemetry {
  std::uint64_t flips = 0;
  std::uint64_t proposals = 0;
  std::uint64_t uniforms = 0;

  GibbsTelemetry& operator+=(const GibbsTelemetry& o) {
    flips += o.flips;
    proposals += o.proposals;
    uniforms += o.uniforms;
    return *this;
  }
};

struct GibbsDraw {
  std::size_t index = 0;
  GibbsTelemetry telemetry;
};

// Returns 1 with probability exp(lambda (p - 1)) given a {0,1}-coin of bias p:
// K ~ Poisson(lambda), then all of K flips must be heads.
template <class Coin01>
bool exp_coin(Coin01&& coin, double lambda, Stream& rng, GibbsTelemetry* tel = nullptr) {
  if (!(lambda >= 0.0)) throw InvalidInput("exp_coin: lambda must be nonnegative");
  const std::uint64_t k = poisson(lambda, rng);
  for (std::uint64_t i = 0; i < k; ++i) {
    if (tel) ++tel->flips;
    if (!coin(rng)) return false;
  }
  return true;
}

// Closed-form Gibbs probabilities exp(e_k / delta) / sum.
inline std::vector<double> softmax(std::span<const double> energies, double delta) {
  if (energies.empty()) throw InvalidInput("softmax: empty");
  const double mx = *std::max_element(energies.begin(), energies.end());
  std::vector<double> p(energies.size());
  double s = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) s += p[k] = std::exp((energies[k] - mx) / delta);
  for (auto& x : p) x /= s;
  return p;
}

inline std::size_t sample_index(std::span<const double> probs, Stream& rng) {
  const double u = rng.uniform();
  double c = 0.0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    c += probs[k];
    if (u < c) return k;
  }
  for (std::size_t k = probs.size(); k-- > 0;)
    if (probs[k] > 0) return k;
  return probs.size() - 1;
}

// Uniform-proposal Bernoulli race. sample(k, rng) draws one bounded real in
// [-1,1] whose mean is w_k; it is rounded to a {0,1}-coin of bias
// Omega_k = (w_k - alpha_k + h + 2) / (h + 4) with one extra uniform.
template <class Sample>
GibbsDraw gibbs_race(std::size_t m, std::span<const double> offsets, double h, double delta, Sample&& sample, Stream& rng) {
  if (m == 0) throw InvalidInput("gibbs: empty candidate set");
  if (!(delta > 0.0)) throw InvalidInput("gibbs: delta must be positive");
  const double lambda = (h + 4.0) / delta;
  GibbsDraw out;
  for (;;) {
    const std::size_t k = m == 1 ? 0 : static_cast<std::size_t>(rng.below(m));
    ++out.telemetry.proposals;
    const double shift = h + 2.0 - offsets[k];
    auto coin = [&](Stream& r) {
      const double x = sample(k, r);
      ++out.telemetry.uniforms;
      return r.uniform() * (h + 4.0) < x + shift;
    };
    if (exp_coin(coin, lambda, rng, &out.telemetry)) {
      out.index = k;
      return out;
    }
  }
}

inline GibbsDraw gibbs_exact(std::span<const double> energies, double delta, Stream& rng) {
  if (!(delta > 0.0)) throw InvalidInput("gibbs: delta must be positive");
  const auto p = softmax(energies, delta);
  return {sample_index(p, rng), {}};
}

inline std::vector<double> gibbs_probabilities(const GibbsRequest& req) {
  req.validate();
  std::vector<double> e(req.candidates.size());
  for (std::size_t k = 0; k < e.size(); ++k) {
    if (!req.candidates[k].exact_mean) throw InvalidInput("gibbs: candidate without exact mean");
    e[k] = *req.candidates[k].exact_mean - req.offsets[k];
  }
  return softmax(e, req.delta);
}

inline GibbsDraw gibbs_sample(const GibbsRequest& req, SamplerBackend backend, Stream& rng) {
  req.validate();
  if (backend == SamplerBackend::exact_mean) {
    const auto p = gibbs_probabilities(req);
    return {sample_index(p, rng), {}};
  }
  return gibbs_race(
      req.candidates.size(), req.offsets, req.h, req.delta,
      [&](std::size_t k, Stream& r) { return req.candidates[k].flip(r); }, rng);
}

// Expected number of proposals of the uniform race for given means.
inline double race_expected_proposals(std::span<const double> means, std::span<const double> offsets, double h, double delta) {
  const double lambda = (h + 4.0) / delta;
  double s = 0.0;
  for (std::size_t k = 0; k < means.size(); ++k) {
    const double omega = (means[k] - offsets[k] + h + 2.0) / (h + 4.0);
    s += std::exp(lambda * (omega - 1.0));
  }
  return static_cast<double>(means.size()) / s;
}

}  // namespace mechkit
