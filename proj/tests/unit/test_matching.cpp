#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "mechkit/matching.hpp"
#include "mechkit/stats.hpp"

using namespace mechkit;

namespace {

Matrix random_weights(std::size_t J, std::size_t ell, Stream& r, double lo = -1.0) {
  Matrix w(J, std::vector<double>(ell));
  for (auto& row : w)
    for (auto& x : row) x = lo + (1.0 - lo) * r.uniform();
  return w;
}

// Brute force over all maps rows -> {none, 0..ell-1} with column capacity d.
double brute_matching(const Matrix& w, std::size_t ell, std::size_t d) {
  const std::size_t J = w.size();
  std::vector<std::size_t> load(ell, 0);
  double best = 0.0;
  std::function<void(std::size_t, double)> go = [&](std::size_t j, double acc) {
    if (j == J) {
      best = std::max(best, acc);
      return;
    }
    go(j + 1, acc);
    for (std::size_t k = 0; k < ell; ++k)
      if (load[k] < d) {
        ++load[k];
        go(j + 1, acc + w[j][k]);
        --load[k];
      }
  };
  go(0, 0.0);
  return best;
}

// OPT of the split program through its dual, minimized by projected gradient:
// g(beta) = sum_j delta log sum_k (e^{(w_jk - beta_k)/delta} + e^{-beta_k/delta}) + d sum_k beta_k.
double split_program_by_dual_descent(const Matrix& w, std::size_t ell, std::size_t d, double delta) {
  const std::size_t J = w.size();
  std::vector<double> beta(ell, 0.0);
  auto eval = [&](std::vector<double>* grad) {
    double g = 0.0;
    if (grad) grad->assign(ell, static_cast<double>(d));
    for (std::size_t j = 0; j < J; ++j) {
      double mx = -INFINITY;
      for (std::size_t k = 0; k < ell; ++k) mx = std::max({mx, (w[j][k] - beta[k]) / delta, -beta[k] / delta});
      double z = 0.0;
      std::vector<double> t(ell);
      for (std::size_t k = 0; k < ell; ++k) z += t[k] = std::exp((w[j][k] - beta[k]) / delta - mx) + std::exp(-beta[k] / delta - mx);
      g += delta * (mx + std::log(z));
      if (grad)
        for (std::size_t k = 0; k < ell; ++k) (*grad)[k] -= t[k] / z;
    }
    for (double b : beta) g += static_cast<double>(d) * b;
    return g;
  };
  const double step = delta / static_cast<double>(J);
  std::vector<double> grad;
  for (int it = 0; it < 400000; ++it) {
    eval(&grad);
    double moved = 0.0;
    for (std::size_t k = 0; k < ell; ++k) {
      const double nb = std::max(0.0, beta[k] - step * grad[k]);
      moved = std::max(moved, std::fabs(nb - beta[k]));
      beta[k] = nb;
    }
    if (moved < 1e-14) break;
  }
  return eval(nullptr);
}

}  // namespace

TEST(Softplus, KnownValues) {
  EXPECT_NEAR(softplus(-3.0, 0.5), 0.5 * std::log1p(std::exp(-6.0)), 1e-15);
  EXPECT_NEAR(softplus(-3.0, 0.5), 0.0012378, 1e-6);
  EXPECT_NEAR(softplus(0.0, 1.0), std::log(2.0), 1e-15);
  // asymptotics stay accurate
  EXPECT_NEAR(softplus(50.0, 1.0), 50.0, 1e-12);
  EXPECT_GT(softplus(-50.0, 1.0), 0.0);
}

TEST(OnlineMatching, AlphaIsUniformAtStartAndFavoursLoadedNodes) {
  MatchParams p{3, 2, 0.5, 1.0, 0.0};
  MatchState st(p);
  auto c = st.context();
  for (double a : c.alpha) EXPECT_NEAR(a, 1.0 / 3.0, 1e-15);
  st.commit(1);
  c = st.context();
  EXPECT_GT(c.alpha[1], c.alpha[0]);
  EXPECT_NEAR(c.alpha[1] / c.alpha[0], std::exp(1.0), 1e-12);
  st.commit(1);
  c = st.context();
  EXPECT_EQ(c.available, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(c.alpha[1], 0.0);
}

TEST(OnlineMatching, SingleNodeRoundProbabilities) {
  RoundContext c{{0}, {1.0}};
  const std::vector<double> row{0.5};
  const auto p = round_probabilities(c, row, MatchVariant::arbitrary, 0.0, 0.5);
  EXPECT_NEAR(p[0], 0.7310585786300049, 1e-12);
  EXPECT_NEAR(p[1], 0.2689414213699951, 1e-12);
}

TEST(OnlineMatching, TranscriptRespectsCapacities) {
  Stream r(4);
  for (int inst = 0; inst < 10; ++inst) {
    MatchParams p{3, 2, 0.3, 0.7, 0.5};
    const Matrix w = random_weights(p.lhs(), p.ell, r);
    for (auto backend : {SamplerBackend::exact_mean, SamplerBackend::race}) {
      const auto tr = run_alg2(w, p, backend, r);
      ASSERT_EQ(tr.steps.size(), p.lhs());
      std::vector<std::size_t> load(p.ell, 0);
      for (const auto& s : tr.steps) {
        EXPECT_TRUE(std::find(s.context.available.begin(), s.context.available.end(), s.rhs) != s.context.available.end());
        ++load[s.rhs];
      }
      for (auto l : load) EXPECT_EQ(l, p.d);
      EXPECT_EQ(load, tr.loads);
    }
  }
}

// The nonnegative variant on softplus weights and the arbitrary variant on the
// raw weights induce the same per-round law: z = x + y.
TEST(OnlineMatching, SoftplusCouplingPerRound) {
  Stream r(8);
  for (int inst = 0; inst < 10; ++inst) {
    MatchParams p{3, 2, 0.4, 0.8, 0.3};
    const Matrix w = random_weights(p.lhs(), p.ell, r);
    const auto tr = run_alg2(w, p, SamplerBackend::exact_mean, r);
    for (std::size_t j = 0; j < p.lhs(); ++j) {
      const auto& s = tr.steps[j];
      std::vector<double> zeta(p.ell);
      for (std::size_t k = 0; k < p.ell; ++k) zeta[k] = softplus(w[j][k], p.delta);
      const auto z = round_probabilities(s.context, zeta, MatchVariant::nonnegative, p.gamma, p.delta);
      double xw = 0.0;
      for (std::size_t q = 0; q < s.context.available.size(); ++q) {
        const auto k = s.context.available[q];
        EXPECT_NEAR(z[q], s.x[k] + s.y[k], 1e-12);
        xw += s.x[k] * w[j][k];
      }
      EXPECT_GE(xw, -p.delta * std::log(2.0 * static_cast<double>(p.ell)));
    }
  }
}

TEST(OnlineMatching, FirstRoundFrequenciesMatchClosedForm) {
  MatchParams p{2, 1, 0.5, 1.0, 0.2};
  const Matrix w{{0.6, -0.4}, {0.1, 0.3}};
  std::vector<std::uint64_t> counts(4, 0);
  std::vector<double> probs;
  Stream r(21);
  for (int run = 0; run < 30000; ++run) {
    const auto tr = run_alg2(w, p, SamplerBackend::race, r);
    const auto& s = tr.steps[0];
    if (probs.empty()) probs = {s.x[0], s.x[1], s.y[0], s.y[1]};
    ++counts[(s.zero ? 2 : 0) + s.rhs];
  }
  // oracle: energies (w - gamma/2, -gamma/2) over both nodes
  std::vector<double> e{0.6 - 0.1, -0.4 - 0.1, -0.1, -0.1}, want(4);
  double z = 0.0;
  for (std::size_t k = 0; k < 4; ++k) z += want[k] = std::exp(e[k] / p.delta);
  for (std::size_t k = 0; k < 4; ++k) {
    want[k] /= z;
    EXPECT_NEAR(probs[k], want[k], 1e-12);
  }
  EXPECT_GT(chi_square_gof(counts, want).p_value, 1e-3);
}

TEST(OnlineMatching, NonnegativeVariantRejectsNegativeWeights) {
  MatchParams p{2, 1, 0.5, 1.0, 0.0};
  Stream r(1);
  EXPECT_THROW(run_alg1(Matrix{{0.1, -0.2}, {0.3, 0.4}}, p, SamplerBackend::exact_mean, r), InvalidInput);
  EXPECT_THROW(run_alg2(Matrix{{0.1, 0.2}}, p, SamplerBackend::exact_mean, r), InvalidInput);
  EXPECT_THROW(run_alg2(Matrix{{1.5, 0.2}, {0.1, 0.1}}, p, SamplerBackend::exact_mean, r), InvalidInput);
}

TEST(MaxWeightMatching, AgreesWithBruteForce) {
  Stream r(13);
  for (int inst = 0; inst < 30; ++inst) {
    const std::size_t ell = 2 + inst % 3, d = 1 + inst % 2, J = std::min<std::size_t>(d * ell, 6);
    const Matrix w = random_weights(J, ell, r);
    const auto m = max_weight_matching(w, ell, d);
    EXPECT_NEAR(m.weight, brute_matching(w, ell, d), 1e-12);
    std::vector<std::size_t> load(ell, 0);
    double s = 0.0;
    for (std::size_t j = 0; j < J; ++j)
      if (m.match[j]) {
        ++load[*m.match[j]];
        s += w[j][*m.match[j]];
        EXPECT_GT(w[j][*m.match[j]], 0.0);
      }
    for (auto l : load) EXPECT_LE(l, d);
    EXPECT_NEAR(s, m.weight, 1e-12);
  }
}

TEST(MaxWeightMatching, PerfectModeMatchesEveryRow) {
  const Matrix w{{-0.5, -0.2}, {0.3, -0.9}};
  const auto m = max_weight_matching(w, 2, 1, true);
  ASSERT_TRUE(m.match[0] && m.match[1]);
  EXPECT_NEAR(m.weight, -0.2 + 0.3, 1e-15);
  EXPECT_NEAR(max_weight_matching(w, 2, 1, false).weight, 0.3, 1e-15);
}

TEST(OfflineProgram, SoftplusAndSplitFormsAgreeWithDualOracle) {
  Stream r(17);
  for (int inst = 0; inst < 20; ++inst) {
    const std::size_t ell = 2 + inst % 2, d = 1 + inst % 3;
    const double delta = 0.2 + 0.1 * (inst % 4);
    const Matrix w = random_weights(d * ell, ell, r);
    const auto s = solve_regularized_offline(w, ell, d, delta);
    EXPECT_NEAR(s.value, s.value_softplus, 1e-6);
    EXPECT_NEAR(s.value, split_program_by_dual_descent(w, ell, d, delta), 1e-6);
    EXPECT_GE(s.value, brute_matching(w, ell, d) - 1e-12);
    for (std::size_t j = 0; j < w.size(); ++j) {
      double row = 0.0;
      for (std::size_t k = 0; k < ell; ++k) row += s.x[j][k] + s.y[j][k];
      EXPECT_NEAR(row, 1.0, 1e-12);
    }
    for (std::size_t k = 0; k < ell; ++k) {
      double col = 0.0;
      for (std::size_t j = 0; j < w.size(); ++j) col += s.x[j][k] + s.y[j][k];
      EXPECT_LE(col, static_cast<double>(d) + 1e-9);
    }
  }
}

TEST(OfflineProgram, TwoByTwoGridBruteForce) {
  // ell = 2, d = 1: z = [[a, 1-a], [1-a, a]]; each cell splits freely.
  const Matrix w{{0.7, -0.3}, {0.2, 0.5}};
  const double delta = 0.3;
  auto h = [](double t) { return t > 0.0 ? t * std::log(t) : 0.0; };
  auto cell = [&](double z, double om) {
    double best = -INFINITY;
    for (int i = 0; i <= 1000; ++i) {
      const double s = i / 1000.0;
      best = std::max(best, z * s * om - delta * (h(z * s) + h(z * (1.0 - s))));
    }
    return best;
  };
  double best = -INFINITY;
  for (int i = 0; i <= 1000; ++i) {
    const double a = i / 1000.0;
    best = std::max(best, cell(a, w[0][0]) + cell(1 - a, w[0][1]) + cell(1 - a, w[1][0]) + cell(a, w[1][1]));
  }
  const auto s = solve_regularized_offline(w, 2, 1, delta);
  EXPECT_NEAR(s.value, best, 2e-3);
  EXPECT_GE(s.value, best - 1e-12);
}

TEST(GammaEstimate, ZeroVarianceLandsInConstantFactorWindow) {
  Stream r(23);
  for (int inst = 0; inst < 10; ++inst) {
    const std::size_t ell = 3 + inst % 2, d = 2 + inst % 3;
    const double delta = 0.05 * (1 + inst % 3), etap = 0.5;
    const Matrix w = random_weights(d * ell, ell, r, inst % 2 ? -1.0 : 0.0);
    const auto g = estimate_gamma(
        ell, d, delta, etap, 1, [&](std::size_t j, std::size_t k, Stream&) { return w[j][k]; }, r);
    const double opt = solve_regularized_offline(w, ell, d, delta).value;
    const double dd = static_cast<double>(d);
    EXPECT_FALSE(g.capped);
    EXPECT_GE(g.gamma, 4.0 * opt / dd - 1e-9);
    EXPECT_LE(g.gamma, 12.0 * opt / dd + 1e-9);
  }
}

TEST(GammaEstimate, FloorAppliesWhenAllWeightsAreNegative) {
  Stream r(1);
  const std::size_t ell = 3, d = 2;
  const auto g = estimate_gamma(ell, d, 0.1, 0.5, 2, [](std::size_t, std::size_t, Stream&) { return -0.5; }, r);
  EXPECT_EQ(g.matching_weight, 0.0);
  EXPECT_NEAR(g.gamma, 12.0 * 0.1 * static_cast<double>(d * ell) * std::log(3.0) / static_cast<double>(d), 1e-12);
}
