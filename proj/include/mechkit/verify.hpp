#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "mechkit/core.hpp"
#include "mechkit/matching.hpp"
#include "mechkit/stats.hpp"
#include "mechkit/transform_dc.hpp"

namespace mechkit {

inline constexpr const char* kVersion = "1.0.0";

struct Certificate {
  std::string property;
  enum class Mode { exact, statistical } mode = Mode::exact;
  double value = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  double standard_error = 0.0;  // statistical only
  double residual = 0.0;        // exact only
  std::uint64_t samples = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> notes;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["version"] = kVersion;
    j["property"] = property;
    j["mode"] = mode == Mode::exact ? "exact" : "statistical";
    j["value"] = value;
    j["tolerance"] = tolerance;
    j["pass"] = pass;
    if (mode == Mode::statistical) {
      j["standard_error"] = standard_error;
      j["samples"] = samples;
      j["seed"] = seed;
    } else {
      j["residual"] = residual;
    }
    j["notes"] = notes;
    return j;
  }
};

// Certificates for BIC and IR from a report. Exact mode compares against
// the tolerance directly; statistical mode allows z standard errors.
inline Certificate bic_certificate(const BicReport& r, bool exact, double tol, double z, std::uint64_t seed) {
  Certificate c;
  c.property = "bic";
  c.mode = exact ? Certificate::Mode::exact : Certificate::Mode::statistical;
  c.value = r.max_regret;
  c.tolerance = tol;
  c.samples = r.samples;
  c.seed = seed;
  if (exact) {
    c.residual = std::max(0.0, r.max_regret);
    c.pass = r.max_regret <= tol;
  } else {
    const double se = r.regret_se.empty() ? 0.0 : r.regret_se[r.argmax_agent][r.argmax_true][r.argmax_report];
    c.standard_error = std::isnan(se) ? 0.0 : se;
    c.pass = r.max_regret_z <= z || r.max_regret <= tol;
  }
  return c;
}

inline Certificate ir_certificate(const BicReport& r, bool exact, double tol, double z, std::uint64_t seed) {
  Certificate c;
  c.property = "ir";
  c.mode = exact ? Certificate::Mode::exact : Certificate::Mode::statistical;
  c.value = r.min_ir_slack;
  c.tolerance = tol;
  c.samples = r.samples;
  c.seed = seed;
  if (exact) {
    c.residual = std::max(0.0, -r.min_ir_slack);
    c.pass = r.min_ir_slack >= -tol;
  } else {
    c.pass = r.min_ir_z >= -z || r.min_ir_slack >= -tol;
  }
  return c;
}

// W_i(r, s) over the type universe with payments scaled by (1 - eta); NaN
// where s is outside supp dists[i].
inline Matrix interim_weights(const Instance& inst, std::size_t i, double eta, const std::vector<DiscreteDistribution>& dists) {
  const auto& M = *inst.mechanism;
  if (!M.has_exact()) throw UnsupportedMode("interim weights need a tabular mechanism");
  const std::size_t U = inst.agents[i].size();
  Matrix W(U, std::vector<double>(U, NAN));
  for (auto s : dists[i].support()) {
    std::vector<double> acc(U, 0.0);
    for_each_profile(dists, i, [&](std::span<const TypeIndex> prof, double p) {
      std::vector<TypeIndex> b(prof.begin(), prof.end());
      b[i] = s;
      for (const auto& a : M.exact(b))
        for (TypeIndex r = 0; r < U; ++r) acc[r] += p * a.prob * (inst.value(i, r, a.outcome) - (1.0 - eta) * a.payments[i]);
    });
    for (TypeIndex r = 0; r < U; ++r) W[r][s] = acc[r];
  }
  return W;
}

// ---------------------------------------------------------------------------
// Replica-surrogate matching with exact weights and VCG prices.
// ---------------------------------------------------------------------------
struct IdealConfig {
  std::size_t ell = 4;
  double eta = 0.0;
  bool perfect = false;   // restrict to perfect matchings (baseline)
  double subsidy = 0.0;   // constant paid to every agent
  std::uint64_t max_enumeration = 20'000'000;
};

// Phase-1 result for one agent: surrogate, matched flag, VCG price.
struct IdealSelection {
  TypeIndex surrogate = 0;
  bool matched = false;
  double price = 0.0;
};

struct IdealAtom {
  double prob = 0.0;
  IdealSelection sel;
};

class IdealTransform final : public Mechanism {
 public:
  IdealTransform(std::shared_ptr<const Instance> inst, IdealConfig cfg) : inst_(std::move(inst)), cfg_(cfg) {
    if (!inst_ || !inst_->mechanism) throw InvalidInput("ideal: instance with a mechanism required");
    if (!inst_->mechanism->has_exact()) throw UnsupportedMode("ideal: exact weights need a tabular mechanism");
    if (cfg_.ell == 0) throw InvalidInput("ideal: ell must be positive");
    if (!cfg_.perfect && inst_->outcomes.mode() != OutcomeMode::downward_closed)
      throw InvalidInput("ideal: unmatched agents need a downward-closed outcome space");
    for (std::size_t i = 0; i < inst_->n(); ++i) weights_.push_back(interim_weights(*inst_, i, cfg_.eta, inst_->prior));
  }

  const IdealConfig& config() const { return cfg_; }
  // The subsidy does not enter the selection law, so cached laws stay valid.
  void set_subsidy(double c) { cfg_.subsidy = c; }
  const Matrix& weights(std::size_t i) const { return weights_.at(i); }
  std::size_t num_agents() const override { return inst_->n(); }
  bool has_exact() const override { return true; }

  // Replicas: the report at a uniform position among ell - 1 draws; then ell
  // surrogates.
  IdealSelection select(std::size_t i, TypeIndex report, Stream& rng) const {
    check_report(i, report);
    const auto& D = inst_->prior[i];
    const std::size_t ell = cfg_.ell;
    std::vector<TypeIndex> rep(ell), sur(ell);
    const std::size_t pos = static_cast<std::size_t>(rng.below(ell));
    for (std::size_t j = 0; j < ell; ++j) rep[j] = j == pos ? report : D.sample(rng);
    for (auto& s : sur) s = D.sample(rng);
    const auto core = match_core(i, rep, sur, pos);
    IdealSelection out{0, core.matched, core.price};
    if (core.matched) {
      out.surrogate = sur[core.k];
    } else {
      out.surrogate = sur[core.free[rng.below(core.free.size())]];
    }
    return out;
  }

  // Exact phase-1 law by enumeration of the report position and all
  // replica/surrogate tuples.
  std::vector<IdealAtom> selection_law(std::size_t i, TypeIndex report) const {
    check_report(i, report);
    const auto& D = inst_->prior[i];
    const std::size_t ell = cfg_.ell, m = D.size(), slots = 2 * ell - 1;
    const double tuples = static_cast<double>(ell) * std::pow(static_cast<double>(m), static_cast<double>(slots));
    if (tuples > static_cast<double>(cfg_.max_enumeration))
      throw UnsupportedMode("ideal: exact law needs " + std::to_string(tuples) + " tuples, above the enumeration cap");
    std::map<std::tuple<TypeIndex, bool, double>, double> law;
    std::vector<TypeIndex> rep(ell), sur(ell);
    const double pos_mass = 1.0 / static_cast<double>(ell);
    for (std::size_t pos = 0; pos < ell; ++pos) {
      std::vector<std::size_t> idx(slots, 0);
      bool more = true;
      while (more) {
        double p = pos_mass;
        for (std::size_t s = 0; s < slots; ++s) p *= D.mass(idx[s]);
        for (std::size_t j = 0, s = 0; j < ell; ++j) rep[j] = j == pos ? report : D.type(idx[s++]);
        for (std::size_t k = 0; k < ell; ++k) sur[k] = D.type(idx[ell - 1 + k]);
        const auto core = match_core(i, rep, sur, pos);
        if (core.matched) {
          law[{sur[core.k], true, core.price}] += p;
        } else {
          const double share = p / static_cast<double>(core.free.size());
          for (auto k : core.free) law[{sur[k], false, core.price}] += share;
        }
        more = false;
        for (std::size_t s = slots; s-- > 0;) {
          if (++idx[s] < m) {
            more = true;
            break;
          }
          idx[s] = 0;
        }
      }
    }
    std::vector<IdealAtom> out;
    for (auto& [key, pr] : law) out.push_back({pr, {std::get<0>(key), std::get<1>(key), std::get<2>(key)}});
    return out;
  }

  Draw query(std::span<const TypeIndex> bids, Stream& rng) const override {
    const std::size_t n = inst_->n();
    std::vector<IdealSelection> sel(n);
    std::vector<TypeIndex> s(n);
    for (std::size_t i = 0; i < n; ++i) {
      Stream r = rng.child(100 + i);
      sel[i] = select(i, bids[i], r);
      s[i] = sel[i].surrogate;
    }
    Stream p2 = rng.child(7);
    Draw d = inst_->mechanism->query(s, p2);
    finish(sel, d.outcome, d.payments);
    return d;
  }

  Lottery exact(std::span<const TypeIndex> bids) const override {
    const std::size_t n = inst_->n();
    std::vector<std::vector<IdealAtom>> laws(n);
    for (std::size_t i = 0; i < n; ++i) laws[i] = law_cached(i, bids[i]);
    Lottery out;
    std::vector<std::size_t> idx(n, 0);
    std::vector<IdealSelection> sel(n);
    std::vector<TypeIndex> s(n);
    for (;;) {
      double p = 1.0;
      for (std::size_t i = 0; i < n; ++i) {
        p *= laws[i][idx[i]].prob;
        sel[i] = laws[i][idx[i]].sel;
        s[i] = sel[i].surrogate;
      }
      if (p > 0.0)
        for (auto a : inst_->mechanism->exact(s)) {
          a.prob *= p;
          finish(sel, a.outcome, a.payments);
          out.push_back(std::move(a));
        }
      std::size_t i = n;
      for (;;) {
        if (i == 0) return out;
        --i;
        if (++idx[i] < laws[i].size()) break;
        idx[i] = 0;
      }
    }
  }

 private:
  struct Core {
    bool matched = false;
    std::size_t k = 0;
    double price = 0.0;
    std::vector<std::size_t> free;  // unmatched surrogates (for an unmatched agent)
  };

  Core match_core(std::size_t i, const std::vector<TypeIndex>& rep, const std::vector<TypeIndex>& sur, std::size_t pos) const {
    const std::size_t ell = cfg_.ell;
    Matrix w(ell, std::vector<double>(ell));
    for (std::size_t j = 0; j < ell; ++j)
      for (std::size_t k = 0; k < ell; ++k) w[j][k] = weights_[i][rep[j]][sur[k]];
    const auto full = max_weight_matching(w, ell, 1, cfg_.perfect);
    Matrix rest;
    for (std::size_t j = 0; j < ell; ++j)
      if (j != pos) rest.push_back(w[j]);
    const double without = max_weight_matching(rest, ell, 1, cfg_.perfect).weight;
    Core c;
    if (full.match[pos]) {
      c.matched = true;
      c.k = *full.match[pos];
      c.price = without - (full.weight - w[pos][c.k]);
    } else {
      c.price = 0.0;
      std::vector<char> used(ell, 0);
      for (auto& mk : full.match)
        if (mk) used[*mk] = 1;
      for (std::size_t k = 0; k < ell; ++k)
        if (!used[k]) c.free.push_back(k);
    }
    return c;
  }

  void finish(const std::vector<IdealSelection>& sel, OutcomeIndex& outcome, std::vector<double>& pay) const {
    for (std::size_t i = 0; i < sel.size(); ++i) {
      if (sel[i].matched) {
        pay[i] = sel[i].price + (1.0 - cfg_.eta) * pay[i];
      } else {
        outcome = inst_->outcomes.without(outcome, i);
        pay[i] = 0.0;
      }
      pay[i] -= cfg_.subsidy;
    }
  }

  void check_report(std::size_t i, TypeIndex r) const {
    if (!inst_->prior[i].contains(r)) throw InvalidInput("ideal: report outside the prior support");
  }

  const std::vector<IdealAtom>& law_cached(std::size_t i, TypeIndex r) const {
    auto key = std::make_pair(i, r);
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(key, selection_law(i, r)).first;
    return it->second;
  }

  std::shared_ptr<const Instance> inst_;
  IdealConfig cfg_;
  std::vector<Matrix> weights_;
  mutable std::map<std::pair<std::size_t, TypeIndex>, std::vector<IdealAtom>> cache_;
};

// Always-perfect replica-surrogate matching with VCG prices, made IR by the
// smallest constant subsidy (computed from the exact interim utilities).
struct PerfectMatchingBaseline {
  std::shared_ptr<IdealTransform> mechanism;
  double subsidy = 0.0;
  double exact_revenue = 0.0;
  double upper_bound = 0.0;  // single-agent two-type bound (1 - sigma)(1 - (1 - sigma)^ell)
};

inline PerfectMatchingBaseline perfect_matching_baseline(std::shared_ptr<const Instance> inst, std::size_t ell, double eta = 0.0) {
  IdealConfig cfg;
  cfg.ell = ell;
  cfg.eta = eta;
  cfg.perfect = true;
  auto raw = std::make_shared<IdealTransform>(inst, cfg);
  const auto rep = check_eps_bic_ir(*inst, *raw, inst->prior, InterimMode::Exact());
  PerfectMatchingBaseline out;
  out.subsidy = std::max(0.0, -rep.min_ir_slack);
  raw->set_subsidy(out.subsidy);
  out.mechanism = raw;
  out.exact_revenue = revenue(*out.mechanism, inst->prior, InterimMode::Exact()).mean;
  if (inst->n() == 1 && inst->prior[0].size() == 2) {
    const double sigma = std::min(inst->prior[0].mass(0), inst->prior[0].mass(1));
    out.upper_bound = (1.0 - sigma) * (1.0 - std::pow(1.0 - sigma, static_cast<double>(ell)));
  } else {
    out.upper_bound = NAN;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Monte Carlo accounting for the downward-closed transform.
// ---------------------------------------------------------------------------
struct TransformAccounting {
  Estimate revenue;
  std::vector<Estimate> phase1_payment;  // per agent
  std::vector<Estimate> phase2_payment;
  std::vector<double> unmatched_rate;
  double mean_queries = 0.0;
  std::uint64_t samples = 0;
};

inline TransformAccounting transform_accounting(const DownwardClosedTransform& T, const std::vector<DiscreteDistribution>& dists,
                                                std::uint64_t samples, std::uint64_t seed) {
  if (samples == 0) throw InvalidInput("accounting: samples must be positive");
  const std::size_t n = T.num_agents();
  const std::size_t chunks = std::min<std::uint64_t>(kChunks, samples);
  struct Part {
    Moments rev, q;
    std::vector<Moments> p1, p2, zero;
  };
  std::vector<Part> parts(chunks);
  for (auto& p : parts) p.p1.resize(n), p.p2.resize(n), p.zero.resize(n);
  const Stream base = Stream(seed).child(0xacc);
  parallel_chunks(chunks, [&](std::size_t c) {
    const std::uint64_t lo = samples * c / chunks, hi = samples * (c + 1) / chunks;
    std::vector<TypeIndex> b(n);
    for (std::uint64_t s = lo; s < hi; ++s) {
      Stream rng = base.child(s);
      sample_profile(dists, n, b, rng);
      const auto run = T.run(b, rng.child(1));
      double tot = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        tot += run.payments[i];
        parts[c].p1[i].add(run.phase1[i].payment);
        parts[c].p2[i].add(run.phase2[i]);
        parts[c].zero[i].add(run.phase1[i].zero ? 1.0 : 0.0);
      }
      parts[c].rev.add(tot);
      parts[c].q.add(static_cast<double>(run.queries));
    }
  });
  Part all;
  all.p1.resize(n), all.p2.resize(n), all.zero.resize(n);
  for (auto& p : parts) {
    all.rev.merge(p.rev);
    all.q.merge(p.q);
    for (std::size_t i = 0; i < n; ++i) {
      all.p1[i].merge(p.p1[i]);
      all.p2[i].merge(p.p2[i]);
      all.zero[i].merge(p.zero[i]);
    }
  }
  TransformAccounting out;
  out.samples = samples;
  out.revenue = to_estimate(all.rev);
  out.mean_queries = all.q.mean;
  for (std::size_t i = 0; i < n; ++i) {
    out.phase1_payment.push_back(to_estimate(all.p1[i]));
    out.phase2_payment.push_back(to_estimate(all.p2[i]));
    out.unmatched_rate.push_back(all.zero[i].mean);
  }
  return out;
}

}  // namespace mechkit
