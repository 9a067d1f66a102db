#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mechkit/bernoulli.hpp"
#include "mechkit/core.hpp"
#include "mechkit/matching.hpp"

namespace mechkit {

struct TransformConfig {
  double eta = 0.1;
  double eta_prime = 0.1;
  double delta = 0.01;
  std::size_t ell = 4;
  std::size_t d = 2;
  SamplerBackend backend = SamplerBackend::exact_mean;
  std::size_t gamma_samples = 16;  // samples per edge for the gamma estimate
  bool strict = false;
  std::optional<double> force_lambda;  // test hook for the payment rerun

  double d_lower_bound() const {
    const double l = static_cast<double>(ell);
    const double ll = std::log(l);
    if (ll <= 0.0) return INFINITY;
    return 32.0 * std::log(8.0 / eta_prime) / (delta * delta * l * ll * ll);
  }
  double subsidy_constant() const { return std::sqrt(delta) * (std::log(2.0 * static_cast<double>(ell)) + 1.0); }

  // Preconditions that hold only asymptotically; returned as notes unless
  // strict is set, in which case the first one throws.
  std::vector<std::string> relaxed_preconditions() const {
    std::vector<std::string> notes;
    if (static_cast<double>(d) < d_lower_bound())
      notes.push_back("d=" + std::to_string(d) + " below the matching lower bound " + std::to_string(d_lower_bound()));
    const double need = gamma_samples_required(ell, d, delta, eta_prime);
    if (static_cast<double>(gamma_samples) < need)
      notes.push_back("gamma uses " + std::to_string(gamma_samples) + " samples per edge, theory asks for " + std::to_string(need));
    return notes;
  }

  void validate() const {
    if (!(eta >= 0.0 && eta <= 1.0)) throw InvalidInput("transform: eta must lie in [0,1]");
    if (!(eta_prime > 0.0)) throw InvalidInput("transform: eta' must be positive");
    if (!(delta > 0.0)) throw InvalidInput("transform: delta must be positive");
    if (ell == 0 || d == 0) throw InvalidInput("transform: ell and d must be positive");
    if (gamma_samples == 0) throw InvalidInput("transform: gamma_samples must be positive");
    if (force_lambda && !(*force_lambda >= 0.0 && *force_lambda <= 1.0)) throw InvalidInput("transform: lambda in [0,1]");
    if (strict) {
      auto notes = relaxed_preconditions();
      if (!notes.empty()) throw InvalidInput("transform (strict): " + notes.front());
    }
  }
};

struct Phase1Result {
  TypeIndex surrogate = 0;  // type of the k-th normal surrogate
  bool zero = false;        // matched to the 0-surrogate copy
  std::size_t rhs = 0;
  std::size_t position = 0;
  double gamma = 0.0;
  double lambda = 0.0;
  double payment = 0.0;  // realized implicit payment
  std::uint64_t queries = 0;
  GibbsTelemetry telemetry;
  std::vector<TypeIndex> surrogates;
  std::vector<TypeIndex> replicas;
};

struct TransformRun {
  OutcomeIndex outcome = 0;
  std::vector<double> payments;
  std::vector<double> phase2;
  std::vector<Phase1Result> phase1;
  std::uint64_t queries = 0;
};

// Replica/surrogate transformation for downward-closed outcome spaces.
class DownwardClosedTransform final : public Mechanism {
 public:
  DownwardClosedTransform(std::shared_ptr<const Instance> inst, TransformConfig cfg) : inst_(std::move(inst)), cfg_(cfg) {
    cfg_.validate();
    if (!inst_ || !inst_->mechanism) throw InvalidInput("transform: instance with a mechanism required");
    inst_->validate();
    if (inst_->outcomes.mode() != OutcomeMode::downward_closed)
      throw InvalidInput("transform: outcome space must be downward-closed");
    const auto& M = *inst_->mechanism;
    if (M.has_exact()) build_exact_weights();
    else if (cfg_.backend == SamplerBackend::exact_mean)
      throw UnsupportedMode("transform: exact_mean backend needs a tabular mechanism");
  }

  const TransformConfig& config() const { return cfg_; }
  const Instance& instance() const { return *inst_; }
  std::size_t num_agents() const override { return inst_->n(); }

  // Exact W_i(r, s) over the type universe (NaN where s is outside supp D_i).
  const Matrix& exact_weights(std::size_t i) const { return weights_.at(i); }

  // One sample of v_i(r, x(s, t_-i)) - (1 - eta) p_i(s, t_-i), t_-i ~ D_-i.
  double weight_sample(std::size_t i, TypeIndex r, TypeIndex s, Stream& rng, std::uint64_t* queries = nullptr) const {
    std::vector<TypeIndex> b(inst_->n());
    sample_profile(inst_->prior, i, b, rng);
    b[i] = s;
    return weight_at(i, r, b, rng, queries);
  }

  Phase1Result phase1_select(std::size_t i, TypeIndex report, Stream rng) const {
    const auto& D = inst_->prior[i];
    const auto& Dp = inst_->report_prior[i];
    if (!Dp.contains(report)) throw InvalidInput("transform: report outside the report distribution's support");
    const std::size_t ell = cfg_.ell, d = cfg_.d, J = d * ell;
    Phase1Result res;

    Stream s_sur = rng.child(1), s_gam = rng.child(2), s_rep = rng.child(3), s_match = rng.child(4), s_pay = rng.child(5);
    res.surrogates.resize(ell);
    for (auto& s : res.surrogates) s = D.sample(s_sur);

    // gamma from fresh replicas, before the report is read
    std::vector<TypeIndex> fresh(J);
    for (auto& r : fresh) r = Dp.sample(s_gam);
    const auto ge = estimate_gamma(
        ell, d, cfg_.delta, cfg_.eta_prime, cfg_.gamma_samples,
        [&](std::size_t j, std::size_t k, Stream& r) { return weight_sample(i, fresh[j], res.surrogates[k], r, &res.queries); },
        s_gam);
    res.gamma = ge.gamma;

    res.replicas.resize(J);
    for (std::size_t j = 0; j + 1 < J; ++j) res.replicas[j] = Dp.sample(s_rep);
    res.position = static_cast<std::size_t>(s_rep.below(J));
    res.replicas.insert(res.replicas.begin() + static_cast<std::ptrdiff_t>(res.position), report);
    res.replicas.pop_back();

    MatchParams mp{ell, d, cfg_.delta, cfg_.eta_prime, res.gamma};
    MatchState st(mp);
    RoundContext at_pi;
    RoundDraw drawn;
    std::vector<double> row(ell);
    for (std::size_t j = 0; j < J; ++j) {
      const RoundContext ctx = st.context();
      const TypeIndex r = res.replicas[j];
      std::span<const double> means;
      if (cfg_.backend == SamplerBackend::exact_mean) {
        for (std::size_t k = 0; k < ell; ++k) row[k] = weights_[i][r][res.surrogates[k]];
        means = row;
      }
      const auto dr = draw_round(
          ctx, MatchVariant::arbitrary, mp, cfg_.backend, means,
          [&](std::size_t k, Stream& g) { return bounded(weight_sample(i, r, res.surrogates[k], g, &res.queries)); }, s_match);
      res.telemetry += dr.telemetry;
      if (j == res.position) {
        at_pi = ctx;
        drawn = dr;
      }
      st.commit(dr.rhs);
    }
    res.rhs = drawn.rhs;
    res.zero = drawn.zero;
    res.surrogate = res.surrogates[drawn.rhs];

    // implicit payment: rerun round pi with the pi-row weights scaled by lambda
    res.lambda = cfg_.force_lambda ? *cfg_.force_lambda : s_pay.uniform();
    std::span<const double> means;
    if (cfg_.backend == SamplerBackend::exact_mean) {
      for (std::size_t k = 0; k < ell; ++k) row[k] = res.lambda * weights_[i][report][res.surrogates[k]];
      means = row;
    }
    const auto rerun = draw_round(
        at_pi, MatchVariant::arbitrary, mp, cfg_.backend, means,
        [&](std::size_t k, Stream& g) {
          return res.lambda * bounded(weight_sample(i, report, res.surrogates[k], g, &res.queries));
        },
        s_pay);
    res.telemetry += rerun.telemetry;
    std::vector<TypeIndex> b(inst_->n());
    sample_profile(inst_->prior, i, b, s_pay);
    auto weight_of = [&](bool zero, std::size_t k) {
      if (zero) return 0.0;
      b[i] = res.surrogates[k];
      return weight_at(i, report, b, s_pay, &res.queries);
    };
    const double w1 = weight_of(drawn.zero, drawn.rhs);
    const double w2 = weight_of(rerun.zero, rerun.rhs);
    res.payment = w1 - w2 - cfg_.subsidy_constant();
    return res;
  }

  TransformRun run(std::span<const TypeIndex> bids, Stream rng) const {
    const std::size_t n = inst_->n();
    if (bids.size() != n) throw InvalidInput("transform: one bid per agent required");
    TransformRun out;
    out.phase1.reserve(n);
    std::vector<TypeIndex> s(n);
    for (std::size_t i = 0; i < n; ++i) {
      out.phase1.push_back(phase1_select(i, bids[i], rng.child(100 + i)));
      s[i] = out.phase1.back().surrogate;
      out.queries += out.phase1.back().queries;
    }
    Stream p2 = rng.child(7);
    const Draw d = inst_->mechanism->query(s, p2);
    ++out.queries;
    out.outcome = d.outcome;
    out.payments.assign(n, 0.0);
    out.phase2.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (out.phase1[i].zero) {
        out.outcome = inst_->outcomes.without(out.outcome, i);
      } else {
        out.phase2[i] = (1.0 - cfg_.eta) * d.payments[i];
      }
      out.payments[i] = out.phase1[i].payment + out.phase2[i];
    }
    return out;
  }

  Draw query(std::span<const TypeIndex> bids, Stream& rng) const override {
    auto r = run(bids, rng.child(rng.next()));
    return {r.outcome, std::move(r.payments)};
  }

 private:
  double weight_at(std::size_t i, TypeIndex r, std::span<const TypeIndex> b, Stream& rng, std::uint64_t* queries) const {
    const Draw d = inst_->mechanism->query(b, rng);
    if (queries) ++*queries;
    return inst_->value(i, r, d.outcome) - (1.0 - cfg_.eta) * d.payments[i];
  }

  // The race needs coins in [-1,1].
  static double bounded(double w) {
    if (!(w >= -1.0 && w <= 1.0)) throw InvalidInput("transform: weight sample outside [-1,1] under the race backend");
    return w;
  }

  void build_exact_weights() {
    const auto& M = *inst_->mechanism;
    const std::size_t n = inst_->n();
    weights_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t U = inst_->agents[i].size();
      weights_[i].assign(U, std::vector<double>(U, NAN));
      for (auto s : inst_->prior[i].support()) {
        std::vector<double> acc(U, 0.0);
        for_each_profile(inst_->prior, i, [&](std::span<const TypeIndex> prof, double p) {
          std::vector<TypeIndex> b(prof.begin(), prof.end());
          b[i] = s;
          for (const auto& a : M.exact(b))
            for (TypeIndex r = 0; r < U; ++r)
              acc[r] += p * a.prob * (inst_->value(i, r, a.outcome) - (1.0 - cfg_.eta) * a.payments[i]);
        });
        for (TypeIndex r = 0; r < U; ++r) {
          if (!(acc[r] >= -1.0 - 1e-12 && acc[r] <= 1.0 + 1e-12)) throw InvalidInput("transform: edge weight outside [-1,1]");
          weights_[i][r][s] = acc[r];
        }
      }
    }
  }

  std::shared_ptr<const Instance> inst_;
  TransformConfig cfg_;
  std::vector<Matrix> weights_;
};

}  // namespace mechkit
