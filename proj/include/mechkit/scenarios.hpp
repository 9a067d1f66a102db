#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "mechkit/instances.hpp"
#include "mechkit/matching.hpp"
#include "mechkit/stats.hpp"
#include "mechkit/transform_dc.hpp"
#include "mechkit/transform_general.hpp"
#include "mechkit/verify.hpp"

namespace mechkit::scenarios {

// ---------------------------------------------------------------------------
// Example 1: perfect matchings collapse revenue when sigma is small.
// ---------------------------------------------------------------------------
struct Ex1Config {
  double sigma = 0.01;
  double eps = 0.04;
  std::size_t baseline_ell = 10;
  TransformConfig transform{.eta = 0.2, .eta_prime = 0.2, .delta = 0.001, .ell = 8, .d = 8,
                            .backend = SamplerBackend::exact_mean, .gamma_samples = 4, .strict = false, .force_lambda = std::nullopt};
  std::uint64_t runs = 100'000;
  std::uint64_t seed = 1;
};

struct Ex1Result {
  double rev_input = 0.0;     // exact
  double rev_formula = 0.0;   // 1 - sigma - sigma eps
  double baseline_exact = 0.0;
  Estimate baseline_mc;
  double baseline_bound = 0.0;
  double baseline_subsidy = 0.0;
  double baseline_regret = 0.0;
  Estimate transformed;
};

inline Ex1Result run_ex1(const Ex1Config& c) {
  auto inst = instances::example1(c.sigma, c.eps);
  Ex1Result r;
  r.rev_input = revenue(*inst->mechanism, inst->prior, InterimMode::Exact()).mean;
  r.rev_formula = 1.0 - c.sigma - c.sigma * c.eps;
  const auto base = perfect_matching_baseline(inst, c.baseline_ell);
  r.baseline_exact = base.exact_revenue;
  r.baseline_bound = base.upper_bound;
  r.baseline_subsidy = base.subsidy;
  r.baseline_regret = check_eps_bic_ir(*inst, *base.mechanism, inst->prior, InterimMode::Exact()).max_regret;
  r.baseline_mc = revenue(*base.mechanism, inst->prior, InterimMode::MonteCarlo(c.runs, c.seed));
  DownwardClosedTransform T(inst, c.transform);
  r.transformed = revenue(T, inst->prior, InterimMode::MonteCarlo(c.runs, c.seed));
  return r;
}

// ---------------------------------------------------------------------------
// Example 2: two edge distributions with equal means. The race only sees
// means; estimate-then-drop sees the samples.
// ---------------------------------------------------------------------------
struct Ex2Config {
  double sigma = 0.05;
  std::size_t N = 10;  // samples of the naive estimator
  double delta = 0.5;
  std::uint64_t runs = 100'000;
  std::uint64_t seed = 2;
};

struct Ex2Result {
  std::vector<std::uint64_t> race1, race2;    // {matched, dropped}
  std::vector<std::uint64_t> naive1, naive2;  // {matched, dropped}
  ChiSquareResult race_test, naive_test;
  double match_probability = 0.0;  // closed form under either law
  GibbsTelemetry telemetry;
};

struct CoinGrid {
  std::function<double(Stream&)> coin;
  double sample(std::size_t, std::size_t, Stream& r) const { return coin(r); }
  std::span<const double> means(std::size_t) const { return {}; }
  bool has_means() const { return false; }
};

inline Ex2Result run_ex2(const Ex2Config& c) {
  const double s = c.sigma;
  if (!(s / (1.0 - 2.0 * s) < 1.0 / static_cast<double>(c.N))) throw InvalidInput("ex2: needs sigma/(1-2 sigma) < 1/N");
  const double lo = -s / (1.0 - 2.0 * s);
  auto f1 = [s, lo](Stream& r) { return r.uniform() < 2.0 * s ? 1.0 : lo; };
  auto f2 = [s](Stream&) { return s; };
  MatchParams p{1, 1, c.delta, 1.0, 1.0};
  Ex2Result out;
  out.race1.assign(2, 0);
  out.race2.assign(2, 0);
  out.naive1.assign(2, 0);
  out.naive2.assign(2, 0);
  const Stream base(c.seed);
  auto tally = [&](std::function<double(Stream&)> coin, std::vector<std::uint64_t>& race, std::vector<std::uint64_t>& naive,
                   std::uint64_t tag) {
    CoinGrid g{coin};
    for (std::uint64_t k = 0; k < c.runs; ++k) {
      Stream rng = base.child(tag, k);
      const auto tr = run_online(g, p, MatchVariant::arbitrary, SamplerBackend::race, rng);
      out.telemetry += tr.telemetry;
      ++race[tr.steps[0].zero ? 1 : 0];
      double mean = 0.0;
      for (std::size_t i = 0; i < c.N; ++i) mean += coin(rng);
      ++naive[mean / static_cast<double>(c.N) < 0.0 ? 1 : 0];
    }
  };
  tally(f1, out.race1, out.naive1, 1);
  tally(f2, out.race2, out.naive2, 2);
  out.race_test = chi_square_two_sample(out.race1, out.race2);
  out.naive_test = chi_square_two_sample(out.naive1, out.naive2);
  out.match_probability = std::exp(s / c.delta) / (std::exp(s / c.delta) + 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Example 3: an optimal dual set with very negative payments versus the
// clipped-program duals.
// ---------------------------------------------------------------------------
struct Ex3Result {
  AssignmentPlan plan;
  std::vector<double> payments;  // per type, clipped route
  double floor = 0.0;            // -m(eps' + 2 gamma) - eps'' - gamma
  std::vector<double> pathological;
  double pathological_kkt = 0.0;
  double rev_input = 0.0, rev_clipped = 0.0, rev_pathological = 0.0;
};

// The hand-built duals of the negative-payments construction (types ordered
// tL, tH; masses p, 1 - p).
inline AssignmentPlan pathological_duals(double p, double gamma) {
  AssignmentPlan d;
  d.q = {{1.0, 0.0}, {0.0, 1.0}};
  d.mu = {p * (-1.0 + gamma), 0.0};
  d.pi = {1.5 - 2.0 * gamma, 0.5 - gamma};
  d.lambda = {{0.0, 0.0}, {(1.0 - p) * (-2.0 + 2.0 * gamma), 0.0}};
  return d;
}

inline Ex3Result run_ex3(double p, double gamma) {
  auto inst = instances::example3(p);
  Ex3Result r;
  const Matrix W = exact_assignment_weights(*inst, 0);
  AssignmentProgram prog{inst->prior[0].masses(), W, gamma};
  r.plan = solve_assignment_clipped(prog, 0.0, 0.0);
  r.payments = r.plan.p_hat;
  r.floor = -2.0 * (r.plan.eps1 + 2.0 * gamma) - r.plan.eps2 - gamma;
  AssignmentPlan bad = pathological_duals(p, gamma);
  r.pathological_kkt = kkt_residual(prog, bad);
  r.pathological = payment_offsets(prog, bad.q, bad.mu, bad.pi);
  r.rev_input = 0.5;
  r.rev_clipped = p * r.payments[0] + (1.0 - p) * r.payments[1] + 0.5;
  r.rev_pathological = p * r.pathological[0] + (1.0 - p) * r.pathological[1] + 0.5;
  return r;
}

}  // namespace mechkit::scenarios
