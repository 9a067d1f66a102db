#include <gtest/gtest.h>

#include <cmath>

#include "mechkit/instances.hpp"
#include "mechkit/scenarios.hpp"
#include "mechkit/transform_general.hpp"

using namespace mechkit;

namespace {

AssignmentProgram random_program(std::size_t m, double gamma, Stream& r, double lo = -1.0) {
  AssignmentProgram p;
  double tot = 0.0;
  for (std::size_t i = 0; i < m; ++i) tot += p.masses.emplace_back(0.2 + r.uniform());
  for (auto& f : p.masses) f /= tot;
  p.weights.assign(m, std::vector<double>(m));
  for (auto& row : p.weights)
    for (auto& w : row) w = lo + (1.0 - lo) * r.uniform();
  p.gamma = gamma;
  return p;
}

// m = 2: rows sum to one and the column constraint leaves one free parameter
// a = q00, with q11 = 1 - F0 (1 - a) / F1.
double brute_two_types(const AssignmentProgram& p) {
  const double F0 = p.masses[0], F1 = p.masses[1];
  double best = -INFINITY;
  const int steps = 400000;
  for (int s = 0; s <= steps; ++s) {
    const double a = static_cast<double>(s) / steps;
    const double b = 1.0 - F0 * (1.0 - a) / F1;
    if (b < 0.0 || b > 1.0) continue;
    best = std::max(best, p.objective({{a, 1.0 - a}, {1.0 - b, b}}));
  }
  return best;
}

}  // namespace

TEST(Assignment, TwoTypeGridBruteForce) {
  Stream r(31);
  for (int k = 0; k < 15; ++k) {
    const auto p = random_program(2, 0.02 + 0.3 * r.uniform(), r);
    const auto plan = solve_assignment(p);
    EXPECT_NEAR(plan.objective, brute_two_types(p), 1e-6);
  }
}

TEST(Assignment, KktOnRandomPrograms) {
  Stream r(32);
  for (int k = 0; k < 40; ++k) {
    const std::size_t m = 1 + r.below(6);
    const auto p = random_program(m, 0.01 + 0.5 * r.uniform(), r);
    const auto plan = solve_assignment(p);
    EXPECT_LE(plan.kkt_residual, 1e-9);
    // no feasible perturbation along a 2-cycle improves the objective
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        if (i == j) continue;
        Matrix q = plan.q;
        const double t = 1e-4 * std::min(p.masses[i], p.masses[j]);
        // move mass t/F_i from (i,i) to (i,j) and t/F_j from (j,j) to (j,i)
        if (q[i][i] < t / p.masses[i] || q[j][j] < t / p.masses[j]) continue;
        q[i][i] -= t / p.masses[i];
        q[i][j] += t / p.masses[i];
        q[j][j] -= t / p.masses[j];
        q[j][i] += t / p.masses[j];
        EXPECT_LE(p.objective(q), plan.objective + 1e-12);
      }
  }
}

TEST(Assignment, ClippedAndUnclippedAgree) {
  Stream r(33);
  for (int k = 0; k < 20; ++k) {
    const std::size_t m = 2 + r.below(4);
    auto p = random_program(m, 0.05, r, 0.0);
    // make the identity nearly BIC, then bury some off-diagonal cells
    for (std::size_t i = 0; i < m; ++i) p.weights[i][i] = 0.9 + 0.1 * r.uniform();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j)
        if (i != j && r.uniform() < 0.4) p.weights[i][j] = -5.0 - 20.0 * r.uniform();
    const auto plain = solve_assignment(p);
    const auto clip = solve_assignment_clipped(p, 0.0, 0.0);
    EXPECT_NEAR(plain.objective, clip.objective, 1e-8);
    EXPECT_LE(clip.kkt_residual, 1e-7);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) EXPECT_NEAR(plain.q[i][j], clip.q[i][j], 1e-6);
  }
}

TEST(Assignment, RejectsBadPrograms) {
  AssignmentProgram p{{0.5, 0.5}, {{0.0, 0.0}, {0.0, 0.0}}, 0.0};
  EXPECT_THROW(solve_assignment(p), InvalidInput);
  p.gamma = 0.1;
  p.masses = {0.5, 0.4};
  EXPECT_THROW(solve_assignment(p), InvalidInput);
  p.masses = {0.5, 0.5};
  EXPECT_THROW(solve_assignment_clipped(p, 0.0, 0.1), InvalidInput);
}

TEST(Rrsf, ExactBicIrRevenueFlowAndFloor) {
  Stream r(34);
  for (int k = 0; k < 12; ++k) {
    const std::size_t n = 1 + r.below(2);
    std::vector<std::size_t> types(n);
    for (auto& t : types) t = 2 + r.below(3);
    auto inst = instances::random_tabular(types, 3, 1 + r.below(2), 0.6, r);
    const auto in = check_eps_bic_ir(*inst, *inst->mechanism, inst->prior, InterimMode::Exact());
    ASSERT_GE(in.min_ir_slack, -1e-12);
    const double eps = std::max(0.0, in.max_regret);
    RrsfConfig cfg;
    cfg.gamma = 0.05;
    cfg.eps = eps;
    const auto build = rrsf_mechanism(inst, cfg, Stream(1));
    const auto rep = check_eps_bic_ir(*inst, *build.mechanism, inst->prior, InterimMode::Exact());
    EXPECT_LE(rep.max_regret, 1e-7);
    EXPECT_GE(rep.min_ir_slack, -1e-7);
    const double rev_in = revenue(*inst->mechanism, inst->prior, InterimMode::Exact()).mean;
    const double rev_out = revenue(*build.mechanism, inst->prior, InterimMode::Exact()).mean;
    double loss = 0.0;
    for (std::size_t a = 0; a < n; ++a) loss += static_cast<double>(types[a]) * (eps + 2.0 * cfg.gamma) + cfg.gamma;
    EXPECT_GE(rev_out, rev_in - loss - 1e-6);
    for (std::size_t a = 0; a < n; ++a) {
      const auto& plan = build.mechanism->plans()[a];
      const auto& W = build.weights[a];
      const double m = static_cast<double>(types[a]);
      for (std::size_t i = 0; i < W.size(); ++i) {
        EXPECT_GE(plan.p_hat[i], -m * (plan.eps1 + 2.0 * cfg.gamma) - plan.eps2 - cfg.gamma - 1e-9);
        for (std::size_t j = 0; j < W.size(); ++j)
          if (plan.q[i][j] > 1e-9) {
            EXPECT_GE(W[i][j], W[i][i] - m * plan.eps1 - std::sqrt(2.0) * m * cfg.gamma - 1e-9);
          }
      }
    }
  }
}

TEST(Rrsf, NonBicInputBecomesBic) {
  auto inst = instances::builtin("first_price");
  RrsfConfig cfg;
  cfg.gamma = 0.05;
  const auto build = rrsf_mechanism(inst, cfg, Stream(1));
  const auto before = check_eps_bic_ir(*inst, *inst->mechanism, inst->prior, InterimMode::Exact());
  const auto after = check_eps_bic_ir(*inst, *build.mechanism, inst->prior, InterimMode::Exact());
  EXPECT_GT(before.max_regret, 0.1);
  EXPECT_LE(after.max_regret, 1e-9);
  EXPECT_GE(after.min_ir_slack, -1e-9);
}

TEST(Rrsf, EmpiricalWeightsConvergeAndCountQueries) {
  auto inst = instances::builtin("second_price");
  const Matrix W = exact_assignment_weights(*inst, 0);
  const auto emp = empirical_assignment_weights(*inst, 0, 20000, Stream(5));
  EXPECT_EQ(emp.queries, 20000u * W.size());
  for (std::size_t i = 0; i < W.size(); ++i)
    for (std::size_t j = 0; j < W.size(); ++j) EXPECT_NEAR(emp.W[i][j], W[i][j], 0.02);
  EXPECT_THROW(empirical_assignment_weights(*inst, 0, 0, Stream(5)), InvalidInput);
}

TEST(Example3, ClippedPaymentsVersusPathologicalDuals) {
  const double gamma = 0.05;
  const auto r = scenarios::run_ex3(0.1, gamma);
  for (double p : r.payments) EXPECT_GE(p, -5.0 * gamma - 1e-7);
  EXPECT_LE(r.pathological_kkt, 1e-12);
  // tH pays pi_tH + gamma/2 + min mu/F = 1/2 - gamma + gamma/2 - 1 + gamma
  EXPECT_NEAR(r.pathological[1], -0.5 + 0.5 * gamma, 1e-12);
  EXPECT_LE(r.pathological[1], -0.5 + gamma);
  EXPECT_GT(r.rev_clipped, r.rev_pathological + 0.3);
}

TEST(Distinguishability, ExampleOneIsOneOnOutcomeAndEmpty) {
  auto inst = instances::example1(0.01, 0.04);
  const std::vector<OutcomeIndex> O{0, 1};
  const auto d = distinguishability(inst->agents[0], 0, 1, O);
  EXPECT_DOUBLE_EQ(d.value, 1.0);
  EXPECT_EQ(d.o, 1u);
  EXPECT_EQ(d.o2, 0u);
  EXPECT_THROW(distinguishability(inst->agents[0], 0, 1, std::vector<OutcomeIndex>{}), InvalidInput);
}

TEST(StrictIc, MenusAreTruthful) {
  Stream r(35);
  for (int k = 0; k < 20; ++k) {
    auto inst = instances::random_tabular({2 + r.below(3)}, 3, 1, 0.5, r);
    const auto& a = inst->agents[0];
    const std::vector<OutcomeIndex> O{0, 1, 2};
    for (const auto& s : strict_ic_menus(a, inst->prior[0], O)) {
      EXPECT_GE(s.price, 0.0);
      auto util = [&](TypeIndex t, TypeIndex rep) {
        const bool priced = sic_takes_priced(a, rep, s);
        return a.value(t, priced ? s.priced : s.free) - (priced ? s.price : 0.0);
      };
      for (auto t : inst->prior[0].support())
        for (auto u : inst->prior[0].support()) EXPECT_GE(util(t, t), util(t, u) - 1e-12);
      // the pair is separated strictly
      EXPECT_NE(sic_takes_priced(a, s.first, s), sic_takes_priced(a, s.second, s));
      EXPECT_GT(util(s.first, s.first), util(s.first, s.second));
      EXPECT_GT(util(s.second, s.second), util(s.second, s.first));
    }
  }
}

TEST(NonIdeal, ExactWeightsGiveExactBicAndIr) {
  Stream r(36);
  for (int k = 0; k < 6; ++k) {
    auto inst = instances::random_tabular({2, 2}, 3, 2, 0.6, r);
    NonIdealConfig cfg = NonIdealConfig::from_theorem(0.1, 2, 2).with_L(0);
    NonIdealMechanism mech(inst, cfg);
    ASSERT_TRUE(mech.has_exact());
    const auto rep = check_eps_bic_ir(*inst, mech, inst->prior, InterimMode::Exact());
    EXPECT_LE(rep.max_regret, 1e-9);
    EXPECT_GE(rep.min_ir_slack, -1e-9);
  }
}

TEST(NonIdeal, DeterministicInputReducedLIsExact) {
  Stream r(37);
  for (int k = 0; k < 6; ++k) {
    auto inst = instances::random_tabular({3}, 3, 1, 0.6, r);
    NonIdealConfig cfg = NonIdealConfig::from_theorem(0.1, 1, 3).with_L(50);
    EXPECT_TRUE(cfg.relaxed);
    NonIdealMechanism mech(inst, cfg, 9);
    ASSERT_TRUE(mech.has_exact());
    const auto rep = check_eps_bic_ir(*inst, mech, inst->prior, InterimMode::Exact());
    EXPECT_LE(rep.max_regret, 1e-9);
    EXPECT_GE(rep.min_ir_slack, -1e-9);
    const double rev_in = revenue(*inst->mechanism, inst->prior, InterimMode::Exact()).mean;
    const double rev_out = revenue(mech, inst->prior, InterimMode::Exact()).mean;
    EXPECT_GE(rev_out, rev_in - (12.0 * 3.0 + 1.0) * 0.1 - 1e-6);
  }
}

TEST(NonIdeal, RandomizedInputHasNoExactForm) {
  Stream r(38);
  auto inst = instances::random_tabular({2, 2}, 3, 2, 0.6, r);
  NonIdealMechanism mech(inst, NonIdealConfig::from_theorem(0.1, 2, 2).with_L(10));
  EXPECT_FALSE(mech.has_exact());
  EXPECT_THROW(mech.exact(std::vector<TypeIndex>{0, 0}), UnsupportedMode);
  Stream g(1);
  const auto d = mech.query(std::vector<TypeIndex>{0, 1}, g);
  EXPECT_EQ(d.payments.size(), 2u);
}

TEST(NonIdeal, TheoremParameters) {
  const auto c = NonIdealConfig::from_theorem(0.1, 1, 2);
  EXPECT_DOUBLE_EQ(c.C, 0.4);
  EXPECT_NEAR(c.zeta, 0.01 / 32.0, 1e-15);
  const double a = 200.0 * std::log(2.0 * 4.0 / 0.1);
  const double b = 8.0 * 64.0 / 1e-4 * std::log(8.0 * 16.0 / 0.01);
  EXPECT_EQ(c.L, static_cast<std::uint64_t>(std::ceil(std::max(a, b))));
  EXPECT_FALSE(c.relaxed);
  EXPECT_THROW(NonIdealConfig::from_theorem(1.5, 1, 2), InvalidInput);
}
