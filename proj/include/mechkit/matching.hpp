#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "mechkit/bernoulli.hpp"
#include "mechkit/core.hpp"
#include "mechkit/rng.hpp"

namespace mechkit {

using Matrix = std::vector<std::vector<double>>;

inline double softplus(double w, double delta) {
  const double a = w / delta;
  if (a > 30.0) return w + delta * std::exp(-a);
  if (a < -30.0) return delta * std::exp(a);
  return delta * std::log1p(std::exp(a));
}

struct MatchParams {
  std::size_t ell = 1;
  std::size_t d = 1;
  double delta = 1.0;
  double eta_prime = 1.0;
  double gamma = 0.0;

  void validate() const {
    if (ell == 0 || d == 0) throw InvalidInput("match: ell and d must be positive");
    if (!(delta > 0.0)) throw InvalidInput("match: delta must be positive");
    if (!(eta_prime > 0.0)) throw InvalidInput("match: eta' must be positive");
    if (!(gamma >= 0.0)) throw InvalidInput("match: gamma must be nonnegative");
  }
  std::size_t lhs() const { return d * ell; }
};

enum class MatchVariant { nonnegative, arbitrary };

// Per-round view: loads before the round, the available set and the duals.
struct RoundContext {
  std::vector<std::size_t> available;  // K, ascending
  std::vector<double> alpha;           // length ell, zero off K
};

class MatchState {
 public:
  MatchState() = default;
  explicit MatchState(const MatchParams& p) : p_(p), loads_(p.ell, 0) { p.validate(); }

  const MatchParams& params() const { return p_; }
  const std::vector<std::size_t>& loads() const { return loads_; }
  std::size_t round() const { return round_; }
  bool done() const { return round_ == p_.lhs(); }

  // alpha_k proportional to exp(eta' * d_k) over K.
  RoundContext context() const {
    RoundContext c;
    c.alpha.assign(p_.ell, 0.0);
    for (std::size_t k = 0; k < p_.ell; ++k)
      if (loads_[k] < p_.d) c.available.push_back(k);
    if (c.available.empty()) throw InternalInvariant("match: capacity exhausted before all LHS nodes");
    double mx = -INFINITY;
    for (auto k : c.available) mx = std::max(mx, p_.eta_prime * static_cast<double>(loads_[k]));
    double s = 0.0;
    for (auto k : c.available) s += c.alpha[k] = std::exp(p_.eta_prime * static_cast<double>(loads_[k]) - mx);
    for (auto k : c.available) c.alpha[k] /= s;
    return c;
  }

  void commit(std::size_t k) {
    if (k >= p_.ell || loads_[k] >= p_.d) throw InternalInvariant("match: commit to a full node");
    ++loads_[k];
    ++round_;
  }

 private:
  MatchParams p_;
  std::vector<std::size_t> loads_;
  std::size_t round_ = 0;
};

// Closed-form round probabilities. For the arbitrary variant the result has
// 2|K| entries: normal nodes first (x), then 0-nodes (y), both indexed by K.
inline std::vector<double> round_energies(const RoundContext& c, std::span<const double> row, MatchVariant v, double gamma) {
  std::vector<double> e;
  const std::size_t K = c.available.size();
  e.reserve(v == MatchVariant::arbitrary ? 2 * K : K);
  for (auto k : c.available) e.push_back(row[k] - gamma * c.alpha[k]);
  if (v == MatchVariant::arbitrary)
    for (auto k : c.available) e.push_back(-gamma * c.alpha[k]);
  return e;
}

inline std::vector<double> round_probabilities(const RoundContext& c, std::span<const double> row, MatchVariant v, double gamma,
                                               double delta) {
  return softmax(round_energies(c, row, v, gamma), delta);
}

struct RoundDraw {
  std::size_t rhs = 0;
  bool zero = false;
  GibbsTelemetry telemetry;
};

// One Gibbs draw for an LHS row. sample(k, rng) returns a bounded sample of
// the row's weight to RHS k; means (optional) enable the exact backend.
template <class Sample>
RoundDraw draw_round(const RoundContext& c, MatchVariant v, const MatchParams& p, SamplerBackend backend,
                     std::span<const double> means, Sample&& sample, Stream& rng) {
  const std::size_t K = c.available.size();
  RoundDraw out;
  std::size_t idx;
  if (backend == SamplerBackend::exact_mean) {
    if (means.size() != p.ell) throw InvalidInput("match: exact backend requires exact weights");
    idx = gibbs_exact(round_energies(c, means, v, p.gamma), p.delta, rng).index;
  } else {
    const std::size_t m = v == MatchVariant::arbitrary ? 2 * K : K;
    std::vector<double> offsets(m);
    for (std::size_t q = 0; q < m; ++q) offsets[q] = p.gamma * c.alpha[c.available[q % K]];
    auto g = gibbs_race(
        m, offsets, p.gamma, p.delta,
        [&](std::size_t q, Stream& r) { return q < K ? sample(c.available[q], r) : 0.0; }, rng);
    idx = g.index;
    out.telemetry = g.telemetry;
  }
  out.rhs = c.available[idx % K];
  out.zero = idx >= K;
  return out;
}

struct MatchStep {
  std::size_t rhs = 0;
  bool zero = false;
  RoundContext context;
  std::vector<double> x;  // closed form over RHS [ell] (zero off K), when weights are exact
  std::vector<double> y;
  GibbsTelemetry telemetry;
};

struct MatchTranscript {
  MatchParams params;
  MatchVariant variant = MatchVariant::nonnegative;
  std::vector<MatchStep> steps;
  std::vector<std::size_t> loads;
  GibbsTelemetry telemetry;

  double matched_weight(const Matrix& w) const {
    double s = 0.0;
    for (std::size_t j = 0; j < steps.size(); ++j)
      if (!steps[j].zero) s += w[j][steps[j].rhs];
    return s;
  }
};

// Exact weight grid; sample() returns the mean itself.
struct MatrixGrid {
  const Matrix* w;
  double sample(std::size_t j, std::size_t k, Stream&) const { return (*w)[j][k]; }
  std::span<const double> means(std::size_t j) const { return (*w)[j]; }
  bool has_means() const { return true; }
};

template <class Grid>
MatchTranscript run_online(const Grid& grid, const MatchParams& p, MatchVariant v, SamplerBackend backend, Stream& rng) {
  p.validate();
  MatchState st(p);
  MatchTranscript tr;
  tr.params = p;
  tr.variant = v;
  for (std::size_t j = 0; j < p.lhs(); ++j) {
    MatchStep step;
    step.context = st.context();
    std::span<const double> means;
    if (grid.has_means()) {
      means = grid.means(j);
      if (means.size() != p.ell) throw InvalidInput("match: weight row length must equal ell");
      if (v == MatchVariant::nonnegative)
        for (double w : means)
          if (w < 0.0) throw InvalidInput("match: nonnegative variant requires weights >= 0");
      const auto probs = round_probabilities(step.context, means, v, p.gamma, p.delta);
      const std::size_t K = step.context.available.size();
      step.x.assign(p.ell, 0.0);
      step.y.assign(p.ell, 0.0);
      for (std::size_t q = 0; q < K; ++q) {
        step.x[step.context.available[q]] = probs[q];
        if (v == MatchVariant::arbitrary) step.y[step.context.available[q]] = probs[K + q];
      }
    }
    const auto draw = draw_round(
        step.context, v, p, backend, means, [&](std::size_t k, Stream& r) { return grid.sample(j, k, r); }, rng);
    step.rhs = draw.rhs;
    step.zero = draw.zero;
    step.telemetry = draw.telemetry;
    tr.telemetry += draw.telemetry;
    st.commit(draw.rhs);
    tr.steps.push_back(std::move(step));
  }
  tr.loads = st.loads();
  return tr;
}

inline void check_shape(const Matrix& w, const MatchParams& p) {
  if (w.size() != p.lhs()) throw InvalidInput("match: weight matrix needs d*ell rows");
  for (auto& r : w) {
    if (r.size() != p.ell) throw InvalidInput("match: weight matrix needs ell columns");
    for (double x : r)
      if (!(x >= -1.0 && x <= 1.0)) throw InvalidInput("match: weights must lie in [-1,1]");
  }
}

inline MatchTranscript run_alg1(const Matrix& w, const MatchParams& p, SamplerBackend backend, Stream& rng) {
  check_shape(w, p);
  return run_online(MatrixGrid{&w}, p, MatchVariant::nonnegative, backend, rng);
}

inline MatchTranscript run_alg2(const Matrix& w, const MatchParams& p, SamplerBackend backend, Stream& rng) {
  check_shape(w, p);
  return run_online(MatrixGrid{&w}, p, MatchVariant::arbitrary, backend, rng);
}

// ---------------------------------------------------------------------------
// Offline entropy-regularized programs.
// ---------------------------------------------------------------------------
struct OfflineSolution {
  double value = 0.0;  // OPT of the x/y program (equal to the softplus program)
  double value_softplus = 0.0;
  Matrix z, x, y;
  std::vector<double> beta;  // capacity duals
  std::size_t iterations = 0;
  double residual = 0.0;
};

inline double entropy_term(double z) { return z > 0.0 ? z * std::log(z) : 0.0; }

inline double softplus_objective(const Matrix& zeta, const Matrix& z, double delta) {
  double v = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j)
    for (std::size_t k = 0; k < z[j].size(); ++k) v += z[j][k] * zeta[j][k] - delta * entropy_term(z[j][k]);
  return v;
}

inline double split_objective(const Matrix& w, const Matrix& x, const Matrix& y, double delta) {
  double v = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j)
    for (std::size_t k = 0; k < x[j].size(); ++k)
      v += x[j][k] * w[j][k] - delta * (entropy_term(x[j][k]) + entropy_term(y[j][k]));
  return v;
}

// Solves max sum z*zeta - delta sum z log z, rows sum to 1, columns <= d,
// by exact block-coordinate descent on the dual (row normalization, then
// clipped column scaling), then splits z with x/y = exp(w/delta).
inline OfflineSolution solve_regularized_offline(const Matrix& w, std::size_t ell, std::size_t d, double delta,
                                                 std::size_t max_iter = 100000, double tol = 1e-10) {
  if (!(delta > 0.0)) throw InvalidInput("offline: delta must be positive");
  if (ell == 0 || d == 0) throw InvalidInput("offline: ell and d must be positive");
  const std::size_t J = w.size();
  if (J > d * ell) throw InvalidInput("offline: more LHS nodes than total capacity");
  for (auto& r : w)
    if (r.size() != ell) throw InvalidInput("offline: weight rows must have ell entries");
  OfflineSolution s;
  Matrix zeta(J, std::vector<double>(ell));
  for (std::size_t j = 0; j < J; ++j)
    for (std::size_t k = 0; k < ell; ++k) zeta[j][k] = softplus(w[j][k], delta);
  s.beta.assign(ell, 0.0);
  s.z.assign(J, std::vector<double>(ell, 0.0));
  const double dd = static_cast<double>(d);
  auto normalize_rows = [&] {
    for (std::size_t j = 0; j < J; ++j) {
      double mx = -INFINITY;
      for (std::size_t k = 0; k < ell; ++k) mx = std::max(mx, (zeta[j][k] - s.beta[k]) / delta);
      double tot = 0.0;
      for (std::size_t k = 0; k < ell; ++k) tot += s.z[j][k] = std::exp((zeta[j][k] - s.beta[k]) / delta - mx);
      for (std::size_t k = 0; k < ell; ++k) s.z[j][k] /= tot;
    }
  };
  auto residual = [&] {
    double r = 0.0;
    for (std::size_t k = 0; k < ell; ++k) {
      double col = 0.0;
      for (std::size_t j = 0; j < J; ++j) col += s.z[j][k];
      r = std::max(r, col - dd);
      r = std::max(r, std::fabs(s.beta[k] * (dd - col)));
    }
    return r;
  };
  normalize_rows();
  for (s.iterations = 0; s.iterations < max_iter; ++s.iterations) {
    s.residual = residual();
    if (s.residual <= tol) break;
    for (std::size_t k = 0; k < ell; ++k) {
      double col = 0.0;
      for (std::size_t j = 0; j < J; ++j) col += s.z[j][k];
      s.beta[k] = std::max(0.0, s.beta[k] + delta * std::log(col / dd));
    }
    normalize_rows();
  }
  s.residual = residual();
  if (s.residual > tol) throw ConvergenceFailure("offline: no convergence, residual " + std::to_string(s.residual));
  s.value_softplus = softplus_objective(zeta, s.z, delta);
  s.x.assign(J, std::vector<double>(ell));
  s.y.assign(J, std::vector<double>(ell));
  for (std::size_t j = 0; j < J; ++j)
    for (std::size_t k = 0; k < ell; ++k) {
      const double share = 1.0 / (1.0 + std::exp(-w[j][k] / delta));  // x / (x+y)
      s.x[j][k] = s.z[j][k] * share;
      s.y[j][k] = s.z[j][k] - s.x[j][k];
    }
  s.value = split_objective(w, s.x, s.y, delta);
  return s;
}

// ---------------------------------------------------------------------------
// Maximum-weight d-to-1 matching.
// ---------------------------------------------------------------------------
struct WeightedMatching {
  std::vector<std::optional<std::size_t>> match;  // per LHS row
  double weight = 0.0;
};

// Rectangular min-cost assignment (rows <= cols) with potentials and
// Dijkstra-style augmentation. Rows and columns are scanned in index order, so
// ties resolve deterministically.
inline std::vector<std::size_t> min_cost_assignment(const Matrix& cost) {
  const std::size_t n = cost.size();
  if (n == 0) return {};
  const std::size_t m = cost[0].size();
  if (m < n) throw InvalidInput("assignment: more rows than columns");
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, INFINITY);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = INFINITY;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> row_to_col(n);
  for (std::size_t j = 1; j <= m; ++j)
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

// Max-weight matching where each row uses at most one column and each column
// at most d rows. perfect = true forces every row to be matched.
inline WeightedMatching max_weight_matching(const Matrix& w, std::size_t ell, std::size_t d, bool perfect = false) {
  const std::size_t J = w.size();
  WeightedMatching out;
  out.match.assign(J, std::nullopt);
  if (J == 0) return out;
  if (perfect && J > d * ell) throw InvalidInput("matching: perfect matching infeasible");
  for (auto& r : w)
    if (r.size() != ell) throw InvalidInput("matching: weight rows must have ell entries");
  const std::size_t cols = d * ell + (perfect ? 0 : J);
  Matrix cost(J, std::vector<double>(cols, 0.0));
  for (std::size_t j = 0; j < J; ++j) {
    for (std::size_t k = 0; k < ell; ++k)
      for (std::size_t c = 0; c < d; ++c) cost[j][k * d + c] = -w[j][k];
  }
  const auto a = min_cost_assignment(cost);
  for (std::size_t j = 0; j < J; ++j) {
    if (a[j] < d * ell) {
      const std::size_t k = a[j] / d;
      if (!perfect && w[j][k] <= 0.0) continue;  // a zero/negative edge is no better than none
      out.match[j] = k;
      out.weight += w[j][k];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gamma estimation from fresh replicas.
// ---------------------------------------------------------------------------
struct GammaEstimate {
  double gamma = 0.0;
  double matching_weight = 0.0;  // A
  double floor_term = 0.0;       // delta d ell log ell
  std::size_t samples_per_edge = 0;
  double samples_required = 0.0;  // theoretical N (inf when ell = 1)
  bool capped = false;
  Matrix means;
};

inline double gamma_samples_required(std::size_t ell, std::size_t d, double delta, double eta_prime) {
  const double l = static_cast<double>(ell);
  const double ll = std::log(l);
  if (ll <= 0.0) return INFINITY;
  return std::ceil(2.0 * std::log(4.0 * l * l * static_cast<double>(d) / eta_prime) / (delta * delta * ll * ll));
}

inline double gamma_from_matching(double A, std::size_t ell, std::size_t d, double delta, bool* capped = nullptr) {
  const double l = static_cast<double>(ell), dd = static_cast<double>(d);
  const double floor_term = delta * dd * l * std::log(l);
  double g = 12.0 * std::max(A, floor_term) / dd;
  const double cap = 12.0 * std::max(l, delta * l * std::log(l));
  if (capped) *capped = g > cap;
  return std::min(g, cap);
}

// sample(j, k, rng): one bounded sample of the weight between fresh replica j
// (j < d*ell) and surrogate k.
template <class Sample>
GammaEstimate estimate_gamma(std::size_t ell, std::size_t d, double delta, double eta_prime, std::size_t samples_per_edge,
                             Sample&& sample, Stream& rng) {
  if (ell == 0 || d == 0) throw InvalidInput("gamma: ell and d must be positive");
  if (!(delta > 0.0) || !(eta_prime > 0.0)) throw InvalidInput("gamma: delta and eta' must be positive");
  if (samples_per_edge == 0) throw InvalidInput("gamma: at least one sample per edge");
  GammaEstimate g;
  g.samples_per_edge = samples_per_edge;
  g.samples_required = gamma_samples_required(ell, d, delta, eta_prime);
  g.means.assign(d * ell, std::vector<double>(ell, 0.0));
  for (std::size_t j = 0; j < d * ell; ++j)
    for (std::size_t k = 0; k < ell; ++k) {
      double s = 0.0;
      for (std::size_t t = 0; t < samples_per_edge; ++t) s += sample(j, k, rng);
      g.means[j][k] = s / static_cast<double>(samples_per_edge);
    }
  g.matching_weight = max_weight_matching(g.means, ell, d).weight;
  g.floor_term = delta * static_cast<double>(d * ell) * std::log(static_cast<double>(ell));
  g.gamma = gamma_from_matching(g.matching_weight, ell, d, delta, &g.capped);
  return g;
}

}  // namespace mechkit
