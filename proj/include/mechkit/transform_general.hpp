#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mechkit/core.hpp"
#include "mechkit/matching.hpp"

namespace mechkit {

// ---------------------------------------------------------------------------
// Regularized fractional assignment.
//   max sum_i F_i (sum_j W_ij q_ij - gamma/2 |q_i|^2)
//   s.t. sum_j q_ij = 1, sum_i F_i q_ij = F_j, q >= 0
// ---------------------------------------------------------------------------
struct AssignmentProgram {
  std::vector<double> masses;  // F
  Matrix weights;              // W
  double gamma = 0.1;

  std::size_t m() const { return masses.size(); }
  void validate() const {
    if (masses.empty()) throw InvalidInput("assignment: no types");
    if (!(gamma > 0.0)) throw InvalidInput("assignment: gamma must be positive");
    if (weights.size() != masses.size()) throw InvalidInput("assignment: W must be m x m");
    double tot = 0.0;
    for (double f : masses) {
      if (!(f > 0.0)) throw InvalidInput("assignment: masses must be positive");
      tot += f;
    }
    if (std::fabs(tot - 1.0) > 1e-9) throw InvalidInput("assignment: masses must sum to 1");
    for (auto& r : weights) {
      if (r.size() != masses.size()) throw InvalidInput("assignment: W must be m x m");
      for (double w : r)
        if (!std::isfinite(w)) throw InvalidInput("assignment: W must be finite");
    }
  }
  double objective(const Matrix& q) const {
    double v = 0.0;
    for (std::size_t i = 0; i < m(); ++i) {
      double row = 0.0, sq = 0.0;
      for (std::size_t j = 0; j < m(); ++j) {
        row += weights[i][j] * q[i][j];
        sq += q[i][j] * q[i][j];
      }
      v += masses[i] * (row - 0.5 * gamma * sq);
    }
    return v;
  }
};

struct AssignmentPlan {
  Matrix q;
  Matrix lambda;
  std::vector<double> mu;
  std::vector<double> pi;
  std::vector<double> p_hat;
  double objective = 0.0;
  double kkt_residual = 0.0;  // max of stationarity, feasibility, sign and slackness residuals
  std::size_t iterations = 0;
  // clipped route
  bool clipped = false;
  double eps1 = 0.0, eps2 = 0.0;
  double clip_floor = -INFINITY;
  std::size_t clipped_cells = 0;
};

inline std::vector<double> payment_offsets(const AssignmentProgram& prog, const Matrix& q, const std::vector<double>& mu,
                                           const std::vector<double>& pi) {
  const std::size_t m = prog.m();
  double mn = INFINITY;
  for (std::size_t l = 0; l < m; ++l) mn = std::min(mn, mu[l] / prog.masses[l]);
  std::vector<double> p(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0, sq = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      s += pi[j] * q[i][j];
      sq += q[i][j] * q[i][j];
    }
    p[i] = s + 0.5 * prog.gamma * sq + mn;
  }
  return p;
}

inline double kkt_residual(const AssignmentProgram& prog, const AssignmentPlan& plan) {
  const std::size_t m = prog.m();
  double r = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double F = prog.masses[i];
      const double lhs = F * (prog.weights[i][j] - prog.gamma * plan.q[i][j]);
      const double rhs = plan.lambda[i][j] + plan.mu[i] + F * plan.pi[j];
      r = std::max(r, std::fabs(lhs - rhs));
      r = std::max(r, plan.lambda[i][j]);
      r = std::max(r, -plan.q[i][j]);
      r = std::max(r, std::fabs(plan.lambda[i][j] * plan.q[i][j]));
      row += plan.q[i][j];
    }
    r = std::max(r, std::fabs(row - 1.0));
  }
  for (std::size_t j = 0; j < m; ++j) {
    double col = 0.0;
    for (std::size_t i = 0; i < m; ++i) col += prog.masses[i] * plan.q[i][j];
    r = std::max(r, std::fabs(col - prog.masses[j]));
  }
  return r;
}

namespace detail {

// Water-filling: returns t with sum_k w_k max(0, c_k - t) = target.
inline double water_level(const std::vector<double>& c, const std::vector<double>& w, double target) {
  std::vector<std::size_t> order(c.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return c[a] > c[b]; });
  double sw = 0.0, swc = 0.0, t = 0.0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    sw += w[order[r]];
    swc += w[order[r]] * c[order[r]];
    t = (swc - target) / sw;
    if (r + 1 == order.size() || c[order[r + 1]] <= t) break;
  }
  return t;
}

}  // namespace detail

// Solves the program through its dual in (a, pi) with mu_i = F_i a_i:
// q_ij = max(0, W_ij - a_i - pi_j) / gamma. Each Newton step solves the
// equality system restricted to the current support (active set); the
// iteration starts from duals that make the identity assignment stationary
// and is globalized by exact block sweeps and an Armijo line search.
inline AssignmentPlan solve_assignment(const AssignmentProgram& prog, std::size_t max_iter = 500, double tol = 1e-12) {
  prog.validate();
  const std::size_t m = prog.m();
  const auto& F = prog.masses;
  const auto& W = prog.weights;
  const double g = prog.gamma;
  std::vector<double> a(m), pi(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) a[i] = W[i][i] - g;

  auto qcell = [&](std::size_t i, std::size_t j, const std::vector<double>& A, const std::vector<double>& P) {
    return std::max(0.0, W[i][j] - A[i] - P[j]) / g;
  };
  auto dual = [&](const std::vector<double>& A, const std::vector<double>& P) {
    double v = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      double sq = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        const double q = qcell(i, j, A, P);
        sq += q * q;
      }
      v += F[i] * (0.5 * g * sq + A[i]);
    }
    for (std::size_t j = 0; j < m; ++j) v += F[j] * P[j];
    return v;
  };
  auto gradient = [&](const std::vector<double>& A, const std::vector<double>& P, Eigen::VectorXd& grad) {
    grad.setZero(static_cast<Eigen::Index>(2 * m));
    for (std::size_t i = 0; i < m; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        const double q = qcell(i, j, A, P);
        row += q;
        grad(static_cast<Eigen::Index>(m + j)) -= F[i] * q;
      }
      grad(static_cast<Eigen::Index>(i)) = F[i] * (1.0 - row);
    }
    for (std::size_t j = 0; j < m; ++j) grad(static_cast<Eigen::Index>(m + j)) += F[j];
  };
  auto sweep = [&] {
    std::vector<double> c(m), w(m);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        c[j] = W[i][j] - pi[j];
        w[j] = 1.0;
      }
      a[i] = detail::water_level(c, w, g);
    }
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t i = 0; i < m; ++i) {
        c[i] = W[i][j] - a[i];
        w[i] = F[i];
      }
      pi[j] = detail::water_level(c, w, g * F[j]);
    }
  };

  AssignmentPlan plan;
  Eigen::VectorXd grad;
  for (int s = 0; s < 3; ++s) sweep();
  std::size_t it = 0;
  for (; it < max_iter; ++it) {
    gradient(a, pi, grad);
    if (grad.lpNorm<Eigen::Infinity>() <= tol) break;
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(2 * m), static_cast<Eigen::Index>(2 * m));
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        if (W[i][j] - a[i] - pi[j] <= 0.0) continue;
        const auto I = static_cast<Eigen::Index>(i), J = static_cast<Eigen::Index>(m + j);
        H(I, I) += F[i] / g;
        H(J, J) += F[i] / g;
        H(I, J) += F[i] / g;
        H(J, I) += F[i] / g;
      }
    const double scale = std::max(1.0, H.diagonal().maxCoeff());
    H.diagonal().array() += 1e-12 * scale;
    const Eigen::VectorXd step = H.ldlt().solve(-grad);
    const double base = dual(a, pi);
    const double slope = grad.dot(step);
    double t = 1.0;
    bool moved = false;
    std::vector<double> na(m), np(m);
    for (int ls = 0; ls < 60; ++ls, t *= 0.5) {
      for (std::size_t i = 0; i < m; ++i) na[i] = a[i] + t * step(static_cast<Eigen::Index>(i));
      for (std::size_t j = 0; j < m; ++j) np[j] = pi[j] + t * step(static_cast<Eigen::Index>(m + j));
      if (dual(na, np) <= base + 1e-4 * t * slope + 1e-15 * std::fabs(base)) {
        moved = true;
        break;
      }
    }
    if (moved) {
      a = na;
      pi = np;
    } else {
      sweep();
    }
  }
  gradient(a, pi, grad);
  plan.iterations = it;
  plan.q.assign(m, std::vector<double>(m));
  plan.lambda.assign(m, std::vector<double>(m));
  plan.mu.resize(m);
  plan.pi = pi;
  for (std::size_t i = 0; i < m; ++i) {
    plan.mu[i] = F[i] * a[i];
    for (std::size_t j = 0; j < m; ++j) {
      const double slack = W[i][j] - a[i] - pi[j];
      plan.q[i][j] = std::max(0.0, slack) / g;
      plan.lambda[i][j] = F[i] * std::min(0.0, slack);
    }
  }
  plan.p_hat = payment_offsets(prog, plan.q, plan.mu, plan.pi);
  plan.objective = prog.objective(plan.q);
  plan.kkt_residual = kkt_residual(prog, plan);
  if (plan.kkt_residual > 1e-7)
    throw ConvergenceFailure("assignment: KKT residual " + std::to_string(plan.kkt_residual) + " after " + std::to_string(it) +
                             " iterations");
  return plan;
}

inline double clip_floor(std::size_t m, double gamma, double eps1, double eps2) {
  return -static_cast<double>(m) * (eps1 + 2.0 * gamma) - eps2;
}

// Clipped program: weights below -m(eps1 + 2 gamma) - eps2 are raised to that
// floor, the clipped program is solved, and its multipliers are mapped back
// to multipliers of the original program. eps1/eps2 are raised to the
// smallest values for which the diagonal condition
// W_ii >= max(W_ij - eps1, -eps2) holds, so the mapping is always valid.
inline AssignmentPlan solve_assignment_clipped(const AssignmentProgram& prog, double eps1, double eps2) {
  prog.validate();
  if (!(eps1 >= eps2 && eps2 >= 0.0)) throw InvalidInput("assignment: requires eps' >= eps'' >= 0");
  const std::size_t m = prog.m();
  for (std::size_t i = 0; i < m; ++i) {
    eps2 = std::max(eps2, -prog.weights[i][i]);
    for (std::size_t j = 0; j < m; ++j) eps1 = std::max(eps1, prog.weights[i][j] - prog.weights[i][i]);
  }
  eps1 = std::max(eps1, eps2);
  AssignmentProgram hat = prog;
  const double floor = clip_floor(m, prog.gamma, eps1, eps2);
  std::size_t clipped = 0;
  for (auto& row : hat.weights)
    for (auto& w : row)
      if (w < floor) {
        w = floor;
        ++clipped;
      }
  AssignmentPlan plan = solve_assignment(hat);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j)
      if (prog.weights[i][j] < floor) plan.lambda[i][j] += prog.masses[i] * (prog.weights[i][j] - floor);
  plan.clipped = true;
  plan.eps1 = eps1;
  plan.eps2 = eps2;
  plan.clip_floor = floor;
  plan.clipped_cells = clipped;
  plan.objective = prog.objective(plan.q);
  plan.kkt_residual = kkt_residual(prog, plan);
  if (plan.kkt_residual > 1e-7) throw InternalInvariant("assignment: mapped multipliers violate KKT, residual " +
                                                        std::to_string(plan.kkt_residual));
  for (double p : plan.p_hat)
    if (p < floor - prog.gamma - 1e-7) throw InternalInvariant("assignment: payment offset below the clipped floor");
  return plan;
}

// ---------------------------------------------------------------------------
// Replica-surrogate weights for general outcome spaces.
// W^k_ij = E[v_k(t_i, x(t_j, t_-k)) - p_k(t_j, t_-k)], indices over supp D_k.
// ---------------------------------------------------------------------------
inline Matrix exact_assignment_weights(const Instance& inst, std::size_t k) {
  const auto& M = *inst.mechanism;
  if (!M.has_exact()) throw UnsupportedMode("exact weights need a tabular mechanism");
  const auto& sup = inst.prior[k].support();
  const std::size_t m = sup.size();
  Matrix W(m, std::vector<double>(m, 0.0));
  for (std::size_t j = 0; j < m; ++j)
    for_each_profile(inst.prior, k, [&](std::span<const TypeIndex> prof, double p) {
      std::vector<TypeIndex> b(prof.begin(), prof.end());
      b[k] = sup[j];
      for (const auto& at : M.exact(b))
        for (std::size_t i = 0; i < m; ++i) W[i][j] += p * at.prob * (inst.value(k, sup[i], at.outcome) - at.payments[k]);
    });
  return W;
}

struct EmpiricalWeights {
  Matrix W;
  std::vector<OutcomeIndex> outcomes;  // observed outcome set, ascending
  std::uint64_t queries = 0;
};

// L samples per surrogate column; each query yields one sample for every row.
inline EmpiricalWeights empirical_assignment_weights(const Instance& inst, std::size_t k, std::uint64_t L, Stream rng) {
  if (L == 0) throw InvalidInput("empirical weights: L must be positive");
  const auto& M = *inst.mechanism;
  const auto& sup = inst.prior[k].support();
  const std::size_t m = sup.size();
  EmpiricalWeights out;
  out.W.assign(m, std::vector<double>(m, 0.0));
  std::vector<char> seen(inst.outcomes.size(), 0);
  std::vector<TypeIndex> b(inst.n());
  for (std::size_t j = 0; j < m; ++j) {
    Stream col = rng.child(j);
    std::vector<double> mean(m, 0.0);
    for (std::uint64_t s = 1; s <= L; ++s) {
      sample_profile(inst.prior, k, b, col);
      b[k] = sup[j];
      const Draw d = M.query(b, col);
      ++out.queries;
      seen[d.outcome] = 1;
      // running mean keeps zero-variance estimates bit-exact
      for (std::size_t i = 0; i < m; ++i)
        mean[i] += (inst.value(k, sup[i], d.outcome) - d.payments[k] - mean[i]) / static_cast<double>(s);
    }
    for (std::size_t i = 0; i < m; ++i) out.W[i][j] = mean[i];
  }
  for (std::size_t o = 0; o < seen.size(); ++o)
    if (seen[o]) out.outcomes.push_back(o);
  return out;
}

// ---------------------------------------------------------------------------
// RRSF mechanism: report t_i -> surrogate t_j with probability q_ij, M is run
// on the surrogate profile, and agent k additionally pays p_hat_k(t_i).
// ---------------------------------------------------------------------------
class RrsfMechanism final : public Mechanism {
 public:
  RrsfMechanism(std::shared_ptr<const Instance> inst, std::vector<AssignmentPlan> plans)
      : inst_(std::move(inst)), plans_(std::move(plans)) {
    if (plans_.size() != inst_->n()) throw InvalidInput("rrsf: one plan per agent");
    for (std::size_t k = 0; k < plans_.size(); ++k)
      if (plans_[k].q.size() != inst_->prior[k].size()) throw InvalidInput("rrsf: plan size must match the prior support");
  }

  const std::vector<AssignmentPlan>& plans() const { return plans_; }
  std::size_t num_agents() const override { return inst_->n(); }

  Draw query(std::span<const TypeIndex> bids, Stream& rng) const override {
    const std::size_t n = inst_->n();
    std::vector<TypeIndex> s(n);
    std::vector<std::size_t> row(n);
    for (std::size_t k = 0; k < n; ++k) {
      row[k] = position(k, bids[k]);
      s[k] = inst_->prior[k].type(sample_index(plans_[k].q[row[k]], rng));
    }
    Draw d = inst_->mechanism->query(s, rng);
    for (std::size_t k = 0; k < n; ++k) d.payments[k] += plans_[k].p_hat[row[k]];
    return d;
  }

  bool has_exact() const override { return inst_->mechanism->has_exact(); }

  Lottery exact(std::span<const TypeIndex> bids) const override {
    const std::size_t n = inst_->n();
    std::vector<std::size_t> row(n);
    for (std::size_t k = 0; k < n; ++k) row[k] = position(k, bids[k]);
    Lottery out;
    std::vector<std::size_t> col(n, 0);
    std::vector<TypeIndex> s(n);
    for (;;) {
      double p = 1.0;
      for (std::size_t k = 0; k < n; ++k) {
        p *= plans_[k].q[row[k]][col[k]];
        s[k] = inst_->prior[k].type(col[k]);
      }
      if (p > 0.0)
        for (auto a : inst_->mechanism->exact(s)) {
          a.prob *= p;
          for (std::size_t k = 0; k < n; ++k) a.payments[k] += plans_[k].p_hat[row[k]];
          out.push_back(std::move(a));
        }
      std::size_t k = n;
      for (;;) {
        if (k == 0) return normalize(std::move(out));
        --k;
        if (++col[k] < inst_->prior[k].size()) break;
        col[k] = 0;
      }
    }
  }

 private:
  std::size_t position(std::size_t k, TypeIndex t) const {
    auto p = inst_->prior[k].position(t);
    if (!p) throw InvalidInput("rrsf: report outside the prior support");
    return *p;
  }
  static Lottery normalize(Lottery l) {
    double tot = 0.0;
    for (auto& a : l) tot += a.prob;
    for (auto& a : l) a.prob /= tot;
    return l;
  }

  std::shared_ptr<const Instance> inst_;
  std::vector<AssignmentPlan> plans_;
};

enum class WeightSource { exact, empirical };

struct RrsfConfig {
  double gamma = 0.05;
  double eps = 0.0;  // BIC level of the input mechanism
  double eta = 0.0;  // estimation slack (empirical source)
  WeightSource source = WeightSource::exact;
  std::uint64_t L = 0;
};

struct RrsfBuild {
  std::shared_ptr<RrsfMechanism> mechanism;
  std::vector<Matrix> weights;
  std::vector<std::vector<OutcomeIndex>> observed;  // empirical source only
  std::uint64_t queries = 0;
};

inline RrsfBuild rrsf_mechanism(std::shared_ptr<const Instance> inst, const RrsfConfig& cfg, Stream rng) {
  if (!inst || !inst->mechanism) throw InvalidInput("rrsf: instance with a mechanism required");
  RrsfBuild b;
  std::vector<AssignmentPlan> plans;
  for (std::size_t k = 0; k < inst->n(); ++k) {
    Matrix W;
    double e1 = cfg.eps, e2 = 0.0;
    if (cfg.source == WeightSource::exact) {
      W = exact_assignment_weights(*inst, k);
    } else {
      auto emp = empirical_assignment_weights(*inst, k, cfg.L, rng.child(k));
      W = std::move(emp.W);
      b.observed.push_back(std::move(emp.outcomes));
      b.queries += emp.queries;
      e1 = cfg.eps + 2.0 * cfg.eta;
      e2 = cfg.eta;
    }
    AssignmentProgram prog{inst->prior[k].masses(), W, cfg.gamma};
    plans.push_back(solve_assignment_clipped(prog, e1, e2));
    b.weights.push_back(std::move(W));
  }
  b.mechanism = std::make_shared<RrsfMechanism>(inst, std::move(plans));
  return b;
}

// ---------------------------------------------------------------------------
// Distinguishability and the strict-IC menu.
// ---------------------------------------------------------------------------
struct Distinguishing {
  double value = 0.0;
  OutcomeIndex o = 0, o2 = 0;
};

// max over ordered (o, o') of v(t,o) - v(t,o') + v(t',o') - v(t',o); first
// maximizer in lexicographic order of (o, o').
inline Distinguishing distinguishability(const AgentTypeSpace& a, TypeIndex t, TypeIndex u, std::span<const OutcomeIndex> O) {
  if (O.empty()) throw InvalidInput("distinguishability: empty outcome set");
  Distinguishing best{-INFINITY, O[0], O[0]};
  for (auto o : O)
    for (auto o2 : O) {
      const double v = a.value(t, o) - a.value(t, o2) + a.value(u, o2) - a.value(u, o);
      if (v > best.value) best = {v, o, o2};
    }
  return best;
}

inline constexpr double kDistinguishTol = 1e-12;

struct SicOffer {
  TypeIndex first = 0, second = 0;
  OutcomeIndex priced = 0, free = 0;  // option 1 at `price`, option 2 at 0
  double price = 0.0;
};

// The menus SIC^k can offer: one per distinguishable unordered pair in supp D_k.
inline std::vector<SicOffer> strict_ic_menus(const AgentTypeSpace& a, const DiscreteDistribution& D, std::span<const OutcomeIndex> O) {
  std::vector<SicOffer> out;
  const auto& sup = D.support();
  for (std::size_t x = 0; x < sup.size(); ++x)
    for (std::size_t y = x + 1; y < sup.size(); ++y) {
      const auto dg = distinguishability(a, sup[x], sup[y], O);
      if (!(dg.value > kDistinguishTol)) continue;
      SicOffer s{sup[x], sup[y], dg.o, dg.o2, 0.0};
      const double v = a.value(sup[x], s.priced) - a.value(sup[x], s.free);
      const double v2 = a.value(sup[y], s.priced) - a.value(sup[y], s.free);
      s.price = 0.5 * (v + v2);
      if (s.price < 0.0) {
        std::swap(s.priced, s.free);
        s.price = -s.price;
      }
      out.push_back(s);
    }
  return out;
}

// Option chosen on behalf of a report: the priced option iff it is strictly
// better for the reported type.
inline bool sic_takes_priced(const AgentTypeSpace& a, TypeIndex report, const SicOffer& s) {
  return a.value(report, s.priced) - s.price > a.value(report, s.free);
}

// ---------------------------------------------------------------------------
// Mixed mechanism: RERSF w.p. 1 - delta, SIC^k for a uniform k w.p. delta,
// and a subsidy C to every agent.
// ---------------------------------------------------------------------------
struct NonIdealConfig {
  double eps = 0.1;
  double gamma = 0.1, delta = 0.1, eta = 0.1, C = 0.4, zeta = 0.0;
  std::uint64_t L = 1;
  bool relaxed = false;  // L below the theorem's value
  std::uint64_t L_theory = 0;

  static std::uint64_t theorem_L(double eps, std::size_t n, std::size_t m) {
    const double N = static_cast<double>(n), Mm = static_cast<double>(m);
    const double a = 2.0 / (eps * eps) * std::log(2.0 * N * Mm * Mm / eps);
    const double b = 8.0 * std::pow(Mm, 6) * N * N / std::pow(eps, 4) * std::log(8.0 * std::pow(Mm, 4) * N / (eps * eps));
    return static_cast<std::uint64_t>(std::ceil(std::max(a, b)));
  }
  static NonIdealConfig from_theorem(double eps, std::size_t n, std::size_t m) {
    if (!(eps > 0.0 && eps < 1.0)) throw InvalidInput("nonideal: eps must lie in (0,1)");
    NonIdealConfig c;
    c.eps = c.gamma = c.delta = c.eta = eps;
    c.C = 4.0 * eps;
    c.zeta = eps * eps / (4.0 * static_cast<double>(n) * std::pow(static_cast<double>(m), 3));
    c.L = c.L_theory = theorem_L(eps, n, m);
    return c;
  }
  NonIdealConfig with_L(std::uint64_t L2) const {
    NonIdealConfig c = *this;
    c.L = L2;
    c.relaxed = L2 < L_theory;
    return c;
  }
};

// One realization of the sampled quantities (weights, observed outcomes);
// everything else is enumerable, so exact() is available when M is tabular.
class NonIdealRealization final : public Mechanism {
 public:
  NonIdealRealization(std::shared_ptr<const Instance> inst, NonIdealConfig cfg, Stream rng)
      : inst_(std::move(inst)), cfg_(cfg) {
    RrsfConfig rc;
    rc.gamma = cfg_.gamma;
    rc.eps = cfg_.eps;
    rc.eta = cfg_.eta;
    if (cfg_.L == 0) {
      rc.source = WeightSource::exact;
    } else {
      rc.source = WeightSource::empirical;
      rc.L = cfg_.L;
    }
    build_ = rrsf_mechanism(inst_, rc, rng);
    for (std::size_t k = 0; k < inst_->n(); ++k) {
      std::vector<OutcomeIndex> O;
      if (cfg_.L == 0) {
        O.resize(inst_->outcomes.size());
        std::iota(O.begin(), O.end(), 0);
      } else {
        O = build_.observed[k];
      }
      menus_.push_back(strict_ic_menus(inst_->agents[k], inst_->prior[k], O));
      fallback_.push_back(O.empty() ? 0 : O.front());
    }
  }

  const RrsfBuild& rrsf() const { return build_; }
  const std::vector<std::vector<SicOffer>>& menus() const { return menus_; }
  std::size_t num_agents() const override { return inst_->n(); }
  bool has_exact() const override { return inst_->mechanism->has_exact(); }

  Draw query(std::span<const TypeIndex> bids, Stream& rng) const override {
    const std::size_t n = inst_->n();
    Draw d;
    if (rng.uniform() >= cfg_.delta) {
      d = build_.mechanism->query(bids, rng);
    } else {
      const std::size_t k = rng.below(n);
      d.payments.assign(n, 0.0);
      if (menus_[k].empty()) {
        d.outcome = fallback_[k];
      } else {
        const auto& s = menus_[k][rng.below(menus_[k].size())];
        const bool priced = sic_takes_priced(inst_->agents[k], bids[k], s);
        d.outcome = priced ? s.priced : s.free;
        d.payments[k] = priced ? s.price : 0.0;
      }
    }
    for (auto& p : d.payments) p -= cfg_.C;
    return d;
  }

  Lottery exact(std::span<const TypeIndex> bids) const override {
    const std::size_t n = inst_->n();
    Lottery out;
    if (cfg_.delta < 1.0)
      for (auto a : build_.mechanism->exact(bids)) {
        a.prob *= 1.0 - cfg_.delta;
        out.push_back(std::move(a));
      }
    if (cfg_.delta > 0.0)
      for (std::size_t k = 0; k < n; ++k) {
        const double pk = cfg_.delta / static_cast<double>(n);
        if (menus_[k].empty()) {
          out.push_back({pk, fallback_[k], std::vector<double>(n, 0.0)});
          continue;
        }
        for (const auto& s : menus_[k]) {
          const bool priced = sic_takes_priced(inst_->agents[k], bids[k], s);
          std::vector<double> pay(n, 0.0);
          pay[k] = priced ? s.price : 0.0;
          out.push_back({pk / static_cast<double>(menus_[k].size()), priced ? s.priced : s.free, pay});
        }
      }
    for (auto& a : out)
      for (auto& p : a.payments) p -= cfg_.C;
    return out;
  }

 private:
  std::shared_ptr<const Instance> inst_;
  NonIdealConfig cfg_;
  RrsfBuild build_;
  std::vector<std::vector<SicOffer>> menus_;
  std::vector<OutcomeIndex> fallback_;
};

// Full mechanism: every execution draws fresh estimates. When each agent's
// weight samples have zero variance (M deterministic given the agent's own
// report) the realization is the same for every stream, so exact() is the
// enumeration of that single realization.
class NonIdealMechanism final : public Mechanism {
 public:
  NonIdealMechanism(std::shared_ptr<const Instance> inst, NonIdealConfig cfg, std::uint64_t seed = 0)
      : inst_(std::move(inst)), cfg_(cfg), seed_(seed) {
    if (!inst_ || !inst_->mechanism) throw InvalidInput("nonideal: instance with a mechanism required");
    if (inst_->outcomes.mode() != OutcomeMode::general && inst_->outcomes.mode() != OutcomeMode::downward_closed)
      throw InvalidInput("nonideal: unknown outcome mode");
    deterministic_ = zero_variance();
  }

  const NonIdealConfig& config() const { return cfg_; }
  std::size_t num_agents() const override { return inst_->n(); }
  bool has_exact() const override { return deterministic_ || cfg_.L == 0; }

  const NonIdealRealization& realization() const {
    if (!cached_) cached_ = std::make_shared<NonIdealRealization>(inst_, cfg_, Stream(seed_).child(0xe57));
    return *cached_;
  }

  Draw query(std::span<const TypeIndex> bids, Stream& rng) const override {
    if (has_exact()) return realization().query(bids, rng);
    NonIdealRealization r(inst_, cfg_, rng.child(rng.next()));
    return r.query(bids, rng);
  }

  Lottery exact(std::span<const TypeIndex> bids) const override {
    if (!has_exact()) throw UnsupportedMode("nonideal: exact form needs zero-variance weight samples");
    return realization().exact(bids);
  }

 private:
  bool zero_variance() const {
    const auto& M = *inst_->mechanism;
    if (!M.has_exact()) return false;
    for (std::size_t k = 0; k < inst_->n(); ++k)
      for (auto t : inst_->prior[k].support()) {
        std::optional<std::pair<OutcomeIndex, double>> first;
        bool ok = true;
        for_each_profile(inst_->prior, k, [&](std::span<const TypeIndex> prof, double) {
          std::vector<TypeIndex> b(prof.begin(), prof.end());
          b[k] = t;
          for (const auto& a : M.exact(b)) {
            std::pair<OutcomeIndex, double> key{a.outcome, a.payments[k]};
            if (!first) first = key;
            else if (*first != key) ok = false;
          }
        });
        if (!ok) return false;
      }
    return true;
  }

  std::shared_ptr<const Instance> inst_;
  NonIdealConfig cfg_;
  std::uint64_t seed_;
  bool deterministic_ = false;
  mutable std::shared_ptr<NonIdealRealization> cached_;
};

}  // namespace mechkit
