#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mechkit/rng.hpp"
#include "mechkit/stats.hpp"

namespace mechkit {

using TypeIndex = std::size_t;
using OutcomeIndex = std::size_t;

struct InvalidInput : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct UnsupportedMode : std::logic_error {
  using std::logic_error::logic_error;
};
struct ConvergenceFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InternalInvariant : std::logic_error {
  using std::logic_error::logic_error;
};

inline constexpr double kMassTolerance = 1e-12;

// ---------------------------------------------------------------------------
// Distributions over an agent's type universe (indices into AgentTypeSpace).
// ---------------------------------------------------------------------------
class DiscreteDistribution {
 public:
  DiscreteDistribution() = default;

  DiscreteDistribution(std::vector<TypeIndex> support, std::vector<double> masses) {
    if (support.empty()) throw InvalidInput("distribution: empty support");
    if (support.size() != masses.size()) throw InvalidInput("distribution: support/mass size mismatch");
    std::vector<std::size_t> order(support.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return support[a] < support[b]; });
    double total = 0.0;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const double m = masses[order[k]];
      if (!(m > 0.0) || !(m <= 1.0)) throw InvalidInput("distribution: masses must lie in (0,1]");
      if (k > 0 && support[order[k]] == support[order[k - 1]]) throw InvalidInput("distribution: duplicate support type");
      support_.push_back(support[order[k]]);
      masses_.push_back(m);
      total += m;
    }
    if (std::fabs(total - 1.0) > kMassTolerance) throw InvalidInput("distribution: masses must sum to 1");
    cdf_.resize(masses_.size());
    double c = 0.0;
    for (std::size_t k = 0; k < masses_.size(); ++k) {
      c += masses_[k];
      cdf_[k] = c;
    }
    cdf_.back() = 1.0;
  }

  static DiscreteDistribution point_mass(TypeIndex t) { return DiscreteDistribution({t}, {1.0}); }

  std::size_t size() const { return support_.size(); }
  const std::vector<TypeIndex>& support() const { return support_; }
  const std::vector<double>& masses() const { return masses_; }
  TypeIndex type(std::size_t k) const { return support_[k]; }
  double mass(std::size_t k) const { return masses_[k]; }

  std::optional<std::size_t> position(TypeIndex t) const {
    auto it = std::lower_bound(support_.begin(), support_.end(), t);
    if (it == support_.end() || *it != t) return std::nullopt;
    return static_cast<std::size_t>(it - support_.begin());
  }
  bool contains(TypeIndex t) const { return position(t).has_value(); }
  double mass_of(TypeIndex t) const {
    auto p = position(t);
    return p ? masses_[*p] : 0.0;
  }

  TypeIndex sample(Stream& rng) const {
    const double u = rng.uniform();
    auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    if (it == cdf_.end()) --it;
    return support_[static_cast<std::size_t>(it - cdf_.begin())];
  }

  bool operator==(const DiscreteDistribution& o) const { return support_ == o.support_ && masses_ == o.masses_; }

 private:
  std::vector<TypeIndex> support_;
  std::vector<double> masses_;
  std::vector<double> cdf_;
};

inline DiscreteDistribution empirical_distribution(std::span<const TypeIndex> samples) {
  if (samples.empty()) throw InvalidInput("empirical_distribution: no samples");
  std::map<TypeIndex, std::size_t> counts;
  for (auto t : samples) ++counts[t];
  std::vector<TypeIndex> support;
  std::vector<double> masses;
  const double n = static_cast<double>(samples.size());
  double used = 0.0;
  for (auto [t, c] : counts) {
    support.push_back(t);
    masses.push_back(static_cast<double>(c) / n);
    used += masses.back();
  }
  // absorb rounding so the sum check is exact
  masses.back() += 1.0 - used;
  return {std::move(support), std::move(masses)};
}

inline double total_variation(const DiscreteDistribution& a, const DiscreteDistribution& b) {
  std::set<TypeIndex> all(a.support().begin(), a.support().end());
  all.insert(b.support().begin(), b.support().end());
  double tv = 0.0;
  for (auto t : all) tv += std::fabs(a.mass_of(t) - b.mass_of(t));
  return 0.5 * tv;
}

// ---------------------------------------------------------------------------
// Outcomes and valuations.
// ---------------------------------------------------------------------------
enum class OutcomeMode { downward_closed, general };

// In downward-closed mode every outcome carries one component label per agent;
// an empty optional is the null component.
class OutcomeSpace {
 public:
  using Components = std::vector<std::optional<std::string>>;

  OutcomeSpace() = default;

  static OutcomeSpace general(std::vector<std::string> ids) {
    OutcomeSpace s;
    s.mode_ = OutcomeMode::general;
    s.ids_ = std::move(ids);
    s.check_ids();
    return s;
  }

  static OutcomeSpace downward_closed(std::vector<std::string> ids, std::vector<Components> components) {
    OutcomeSpace s;
    s.mode_ = OutcomeMode::downward_closed;
    s.ids_ = std::move(ids);
    s.components_ = std::move(components);
    s.check_ids();
    if (s.components_.size() != s.ids_.size()) throw InvalidInput("outcomes: every outcome needs a component vector");
    const std::size_t n = s.components_.empty() ? 0 : s.components_[0].size();
    for (std::size_t o = 0; o < s.ids_.size(); ++o) {
      if (s.components_[o].size() != n) throw InvalidInput("outcomes: component vectors must have one entry per agent");
      if (!s.by_components_.emplace(s.components_[o], o).second)
        throw InvalidInput("outcomes: duplicate component vector at '" + s.ids_[o] + "'");
    }
    s.bot_.assign(s.ids_.size(), std::vector<OutcomeIndex>(n));
    for (std::size_t o = 0; o < s.ids_.size(); ++o) {
      for (std::size_t i = 0; i < n; ++i) {
        Components c = s.components_[o];
        c[i].reset();
        auto it = s.by_components_.find(c);
        if (it == s.by_components_.end())
          throw InvalidInput("outcomes: not downward-closed, '" + s.ids_[o] + "' without agent " + std::to_string(i) +
                             " is missing");
        s.bot_[o][i] = it->second;
      }
    }
    // single-agent substitutions compose, so closure under all subsets follows
    return s;
  }

  OutcomeMode mode() const { return mode_; }
  std::size_t size() const { return ids_.size(); }
  const std::string& id(OutcomeIndex o) const { return ids_.at(o); }
  const std::vector<std::string>& ids() const { return ids_; }
  std::optional<OutcomeIndex> find(const std::string& id) const {
    for (std::size_t o = 0; o < ids_.size(); ++o)
      if (ids_[o] == id) return o;
    return std::nullopt;
  }
  const Components& components(OutcomeIndex o) const { return components_.at(o); }
  bool is_null_for(OutcomeIndex o, std::size_t agent) const {
    return mode_ == OutcomeMode::downward_closed && !components_.at(o).at(agent).has_value();
  }
  // Outcome equal to o with agent's component replaced by the null component.
  OutcomeIndex without(OutcomeIndex o, std::size_t agent) const {
    if (mode_ != OutcomeMode::downward_closed) throw InvalidInput("outcomes: null substitution needs downward-closed mode");
    return bot_.at(o).at(agent);
  }

 private:
  void check_ids() const {
    if (ids_.empty()) throw InvalidInput("outcomes: empty outcome list");
    std::set<std::string> seen(ids_.begin(), ids_.end());
    if (seen.size() != ids_.size()) throw InvalidInput("outcomes: duplicate outcome id");
  }

  OutcomeMode mode_ = OutcomeMode::general;
  std::vector<std::string> ids_;
  std::vector<Components> components_;
  std::map<Components, OutcomeIndex> by_components_;
  std::vector<std::vector<OutcomeIndex>> bot_;
};

class AgentTypeSpace {
 public:
  AgentTypeSpace() = default;
  AgentTypeSpace(std::size_t agent_id, std::vector<std::string> labels, std::vector<std::vector<double>> valuation)
      : agent_id_(agent_id), labels_(std::move(labels)), valuation_(std::move(valuation)) {
    if (labels_.empty()) throw InvalidInput("agent " + std::to_string(agent_id_) + ": no types");
    std::set<std::string> seen(labels_.begin(), labels_.end());
    if (seen.size() != labels_.size()) throw InvalidInput("agent " + std::to_string(agent_id_) + ": duplicate type label");
    if (valuation_.size() != labels_.size())
      throw InvalidInput("agent " + std::to_string(agent_id_) + ": valuation rows must match types");
    for (auto& row : valuation_)
      for (double v : row)
        if (!(v >= 0.0 && v <= 1.0)) throw InvalidInput("agent " + std::to_string(agent_id_) + ": valuations must lie in [0,1]");
  }

  std::size_t agent_id() const { return agent_id_; }
  std::size_t size() const { return labels_.size(); }
  const std::string& label(TypeIndex t) const { return labels_.at(t); }
  const std::vector<std::string>& labels() const { return labels_; }
  std::optional<TypeIndex> find(const std::string& label) const {
    for (std::size_t t = 0; t < labels_.size(); ++t)
      if (labels_[t] == label) return t;
    return std::nullopt;
  }
  double value(TypeIndex t, OutcomeIndex o) const { return valuation_[t][o]; }
  const std::vector<std::vector<double>>& valuation() const { return valuation_; }

  // Downward-closed consistency: zero value on the null component, and the
  // value depends on the agent's own component only.
  void check_against(const OutcomeSpace& outcomes) const {
    for (auto& row : valuation_)
      if (row.size() != outcomes.size())
        throw InvalidInput("agent " + std::to_string(agent_id_) + ": valuation columns must match outcomes");
    if (outcomes.mode() != OutcomeMode::downward_closed) return;
    for (std::size_t t = 0; t < labels_.size(); ++t) {
      std::map<std::optional<std::string>, double> by_component;
      for (std::size_t o = 0; o < outcomes.size(); ++o) {
        const auto& c = outcomes.components(o).at(agent_id_);
        const double v = valuation_[t][o];
        if (!c && v != 0.0)
          throw InvalidInput("agent " + std::to_string(agent_id_) + ", type '" + labels_[t] + "': nonzero value for null outcome '" +
                             outcomes.id(o) + "'");
        auto [it, fresh] = by_component.emplace(c, v);
        if (!fresh && it->second != v)
          throw InvalidInput("agent " + std::to_string(agent_id_) + ", type '" + labels_[t] +
                             "': value must depend on the agent's own component only");
      }
    }
  }

 private:
  std::size_t agent_id_ = 0;
  std::vector<std::string> labels_;
  std::vector<std::vector<double>> valuation_;
};

// ---------------------------------------------------------------------------
// Mechanisms.
// ---------------------------------------------------------------------------
struct Draw {
  OutcomeIndex outcome = 0;
  std::vector<double> payments;
};

struct Atom {
  double prob = 0.0;
  OutcomeIndex outcome = 0;
  std::vector<double> payments;
};
using Lottery = std::vector<Atom>;

inline void validate_lottery(const Lottery& l, std::size_t n, std::size_t outcomes) {
  if (l.empty()) throw InvalidInput("lottery: empty");
  double total = 0.0;
  for (auto& a : l) {
    if (!(a.prob > 0.0)) throw InvalidInput("lottery: probabilities must be positive");
    if (a.outcome >= outcomes) throw InvalidInput("lottery: outcome out of range");
    if (a.payments.size() != n) throw InvalidInput("lottery: payment vector must have one entry per agent");
    for (double p : a.payments)
      if (!std::isfinite(p)) throw InvalidInput("lottery: payments must be finite");
    total += a.prob;
  }
  if (std::fabs(total - 1.0) > 1e-9) throw InvalidInput("lottery: probabilities must sum to 1");
}

inline Draw sample_lottery(const Lottery& l, Stream& rng) {
  if (l.size() == 1) return {l[0].outcome, l[0].payments};
  const double u = rng.uniform();
  double c = 0.0;
  for (auto& a : l) {
    c += a.prob;
    if (u < c) return {a.outcome, a.payments};
  }
  return {l.back().outcome, l.back().payments};
}

class Mechanism {
 public:
  virtual ~Mechanism() = default;
  virtual std::size_t num_agents() const = 0;
  virtual Draw query(std::span<const TypeIndex> bids, Stream& rng) const = 0;
  virtual bool has_exact() const { return false; }
  virtual Lottery exact(std::span<const TypeIndex>) const { throw UnsupportedMode("mechanism has no exact form"); }
};

// Mixed-radix indexing of bid profiles over per-agent type universes.
class ProfileIndexer {
 public:
  ProfileIndexer() = default;
  explicit ProfileIndexer(std::vector<std::size_t> radices) : radices_(std::move(radices)) {
    total_ = 1;
    for (auto r : radices_) {
      if (r == 0) throw InvalidInput("profile: empty type universe");
      total_ *= r;
    }
  }
  std::size_t size() const { return total_; }
  std::size_t agents() const { return radices_.size(); }
  std::size_t index(std::span<const TypeIndex> b) const {
    if (b.size() != radices_.size()) throw InvalidInput("profile: wrong number of bids");
    std::size_t idx = 0;
    for (std::size_t i = 0; i < b.size(); ++i) {
      if (b[i] >= radices_[i]) throw InvalidInput("profile: bid outside type universe");
      idx = idx * radices_[i] + b[i];
    }
    return idx;
  }
  std::vector<TypeIndex> profile(std::size_t idx) const {
    std::vector<TypeIndex> b(radices_.size());
    for (std::size_t i = radices_.size(); i-- > 0;) {
      b[i] = idx % radices_[i];
      idx /= radices_[i];
    }
    return b;
  }

 private:
  std::vector<std::size_t> radices_;
  std::size_t total_ = 0;
};

class TabularMechanism final : public Mechanism {
 public:
  TabularMechanism(std::vector<std::size_t> universe_sizes, std::size_t outcomes)
      : indexer_(std::move(universe_sizes)), outcomes_(outcomes), table_(indexer_.size()) {}

  void set(std::span<const TypeIndex> bids, Lottery lottery) {
    validate_lottery(lottery, indexer_.agents(), outcomes_);
    table_[indexer_.index(bids)] = std::move(lottery);
  }
  bool defined(std::span<const TypeIndex> bids) const { return table_[indexer_.index(bids)].has_value(); }

  std::size_t num_agents() const override { return indexer_.agents(); }
  Draw query(std::span<const TypeIndex> bids, Stream& rng) const override { return sample_lottery(entry(bids), rng); }
  bool has_exact() const override { return true; }
  Lottery exact(std::span<const TypeIndex> bids) const override { return entry(bids); }
  const Lottery& entry(std::span<const TypeIndex> bids) const {
    const auto& e = table_[indexer_.index(bids)];
    if (!e) throw InvalidInput("mechanism: no table entry for bid profile");
    return *e;
  }
  const ProfileIndexer& indexer() const { return indexer_; }

 private:
  ProfileIndexer indexer_;
  std::size_t outcomes_;
  std::vector<std::optional<Lottery>> table_;
};

// ---------------------------------------------------------------------------
// Instance: type spaces, priors, outcomes, and the mechanism under study.
// `prior` is D (what the input mechanism is designed for); `report_prior` is D'.
// ---------------------------------------------------------------------------
struct Instance {
  std::vector<AgentTypeSpace> agents;
  OutcomeSpace outcomes;
  std::vector<DiscreteDistribution> prior;
  std::vector<DiscreteDistribution> report_prior;
  std::shared_ptr<const Mechanism> mechanism;

  std::size_t n() const { return agents.size(); }
  std::vector<std::size_t> universe_sizes() const {
    std::vector<std::size_t> r;
    for (auto& a : agents) r.push_back(a.size());
    return r;
  }
  double value(std::size_t i, TypeIndex t, OutcomeIndex o) const { return agents[i].value(t, o); }

  void validate() const {
    if (agents.empty()) throw InvalidInput("instance: no agents");
    if (prior.size() != agents.size()) throw InvalidInput("instance: one prior per agent required");
    if (report_prior.size() != agents.size()) throw InvalidInput("instance: one report prior per agent required");
    for (std::size_t i = 0; i < agents.size(); ++i) {
      if (agents[i].agent_id() != i) throw InvalidInput("instance: agent ids must be 0..n-1 in order");
      agents[i].check_against(outcomes);
      for (auto t : prior[i].support())
        if (t >= agents[i].size()) throw InvalidInput("instance: prior support outside type universe");
      for (auto t : report_prior[i].support())
        if (t >= agents[i].size()) throw InvalidInput("instance: report prior support outside type universe");
      if (outcomes.mode() == OutcomeMode::downward_closed && outcomes.components(0).size() != agents.size())
        throw InvalidInput("instance: component vectors must have one entry per agent");
    }
    if (mechanism && mechanism->num_agents() != agents.size()) throw InvalidInput("instance: mechanism arity mismatch");
  }
};

// Enumerates profiles of all agents except `skip` (pass n to include all),
// calling fn(profile_with_slot, probability). The skipped slot is left at 0.
template <class Fn>
void for_each_profile(const std::vector<DiscreteDistribution>& dists, std::size_t skip, Fn&& fn) {
  const std::size_t n = dists.size();
  std::vector<std::size_t> pos(n, 0);
  std::vector<TypeIndex> b(n, 0);
  for (;;) {
    double p = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (i == skip) continue;
      b[i] = dists[i].type(pos[i]);
      p *= dists[i].mass(pos[i]);
    }
    fn(std::span<const TypeIndex>(b), p);
    std::size_t i = n;
    for (;;) {
      if (i == 0) return;
      --i;
      if (i == skip) continue;
      if (++pos[i] < dists[i].size()) break;
      pos[i] = 0;
    }
  }
}

inline void sample_profile(const std::vector<DiscreteDistribution>& dists, std::size_t skip, std::vector<TypeIndex>& b,
                           Stream& rng) {
  for (std::size_t i = 0; i < dists.size(); ++i)
    if (i != skip) b[i] = dists[i].sample(rng);
}

struct InterimMode {
  enum Kind { exact, monte_carlo } kind = exact;
  std::uint64_t samples = 0;
  std::uint64_t seed = 0;
  static InterimMode Exact() { return {exact, 0, 0}; }
  static InterimMode MonteCarlo(std::uint64_t n, std::uint64_t seed) { return {monte_carlo, n, seed}; }
};

inline void check_mode(const Mechanism& mech, const InterimMode& mode) {
  if (mode.kind == InterimMode::exact && !mech.has_exact()) throw UnsupportedMode("exact mode requires a tabular mechanism");
  if (mode.kind == InterimMode::monte_carlo && mode.samples == 0) throw InvalidInput("Monte Carlo mode requires N >= 1");
}

inline constexpr std::size_t kChunks = 64;

// Interim utility of agent i with type t reporting r, others drawn from dists.
inline Estimate interim_utility(const Instance& inst, const Mechanism& mech, const std::vector<DiscreteDistribution>& dists,
                                std::size_t i, TypeIndex t, TypeIndex r, const InterimMode& mode) {
  check_mode(mech, mode);
  if (i >= inst.n() || t >= inst.agents[i].size() || r >= inst.agents[i].size())
    throw InvalidInput("interim_utility: agent or type out of range");
  for (auto& d : dists)
    if (d.size() == 0) throw InvalidInput("interim_utility: empty support");
  if (mode.kind == InterimMode::exact) {
    double u = 0.0;
    for_each_profile(dists, i, [&](std::span<const TypeIndex> prof, double p) {
      std::vector<TypeIndex> b(prof.begin(), prof.end());
      b[i] = r;
      for (const auto& a : mech.exact(b)) u += p * a.prob * (inst.value(i, t, a.outcome) - a.payments[i]);
    });
    return {u, 0.0, 0};
  }
  const std::size_t chunks = std::min<std::uint64_t>(kChunks, mode.samples);
  std::vector<Moments> part(chunks);
  const Stream base = Stream(mode.seed).child(i, r);
  parallel_chunks(chunks, [&](std::size_t c) {
    const std::uint64_t lo = mode.samples * c / chunks, hi = mode.samples * (c + 1) / chunks;
    std::vector<TypeIndex> b(inst.n());
    for (std::uint64_t s = lo; s < hi; ++s) {
      Stream rng = base.child(s);
      sample_profile(dists, i, b, rng);
      b[i] = r;
      const Draw d = mech.query(b, rng);
      part[c].add(inst.value(i, t, d.outcome) - d.payments[i]);
    }
  });
  Moments all;
  for (auto& m : part) all.merge(m);
  return to_estimate(all);
}

struct BicReport {
  double max_regret = -std::numeric_limits<double>::infinity();
  double min_ir_slack = std::numeric_limits<double>::infinity();
  // utility[i][t][r]: interim utility of type t reporting r (over the type
  // universe; unused cells are NaN)
  std::vector<std::vector<std::vector<double>>> utility;
  // regret_se[i][t][r]: standard error of the paired regret estimate (MC only)
  std::vector<std::vector<std::vector<double>>> regret_se;
  std::vector<std::vector<double>> ir_se;
  std::size_t argmax_agent = 0;
  TypeIndex argmax_true = 0, argmax_report = 0;
  // For MC: largest regret measured in standard errors, and smallest IR slack
  // in standard errors.
  double max_regret_z = -std::numeric_limits<double>::infinity();
  double min_ir_z = std::numeric_limits<double>::infinity();
  std::uint64_t samples = 0;
};

// Regret of truthful reporting over true types in supp(dists[i]) and reports
// in the same support. In MC mode, all reports share common random numbers
// (run s uses the same stream for every report) and regrets are estimated
// from paired differences.
template <class RunFn>
BicReport bic_report_mc(const Instance& inst, const std::vector<DiscreteDistribution>& dists, std::uint64_t samples,
                        std::uint64_t seed, RunFn&& run_utility_vector) {
  BicReport rep;
  rep.samples = samples;
  const std::size_t n = inst.n();
  rep.utility.resize(n);
  rep.regret_se.resize(n);
  rep.ir_se.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& sup = dists[i].support();
    const std::size_t m = sup.size();
    const std::size_t U = inst.agents[i].size();
    rep.utility[i].assign(U, std::vector<double>(U, NAN));
    rep.regret_se[i].assign(U, std::vector<double>(U, NAN));
    rep.ir_se[i].assign(U, NAN);
    const std::size_t chunks = std::min<std::uint64_t>(kChunks, samples);
    // level[c][a*m+b] = utility of true sup[a] reporting sup[b]
    // diff[c][a*m+b]  = that minus the truthful utility of sup[a]
    std::vector<std::vector<Moments>> level(chunks, std::vector<Moments>(m * m));
    std::vector<std::vector<Moments>> diff(chunks, std::vector<Moments>(m * m));
    const Stream base = Stream(seed).child(0x5eed, i);
    parallel_chunks(chunks, [&](std::size_t c) {
      const std::uint64_t lo = samples * c / chunks, hi = samples * (c + 1) / chunks;
      std::vector<double> u(m * m);
      for (std::uint64_t s = lo; s < hi; ++s) {
        for (std::size_t b = 0; b < m; ++b) {
          Stream rng = base.child(s);
          // util[a] for each true type a given report sup[b]
          const std::vector<double> util = run_utility_vector(i, sup[b], rng);
          for (std::size_t a = 0; a < m; ++a) u[a * m + b] = util[sup[a]];
        }
        for (std::size_t a = 0; a < m; ++a)
          for (std::size_t b = 0; b < m; ++b) {
            level[c][a * m + b].add(u[a * m + b]);
            diff[c][a * m + b].add(u[a * m + b] - u[a * m + a]);
          }
      }
    });
    for (std::size_t a = 0; a < m; ++a)
      for (std::size_t b = 0; b < m; ++b) {
        Moments L, D;
        for (std::size_t c = 0; c < chunks; ++c) {
          L.merge(level[c][a * m + b]);
          D.merge(diff[c][a * m + b]);
        }
        rep.utility[i][sup[a]][sup[b]] = L.mean;
        if (a == b) {
          rep.ir_se[i][sup[a]] = L.stderr_mean();
          if (L.mean < rep.min_ir_slack) rep.min_ir_slack = L.mean;
          const double z = L.stderr_mean() > 0 ? L.mean / L.stderr_mean() : (L.mean >= 0 ? INFINITY : -INFINITY);
          rep.min_ir_z = std::min(rep.min_ir_z, z);
          continue;
        }
        rep.regret_se[i][sup[a]][sup[b]] = D.stderr_mean();
        if (D.mean > rep.max_regret) {
          rep.max_regret = D.mean;
          rep.argmax_agent = i;
          rep.argmax_true = sup[a];
          rep.argmax_report = sup[b];
        }
        const double z = D.stderr_mean() > 0 ? D.mean / D.stderr_mean() : (D.mean <= 0 ? -INFINITY : INFINITY);
        rep.max_regret_z = std::max(rep.max_regret_z, z);
      }
    if (m == 1) rep.max_regret = std::max(rep.max_regret, 0.0);
  }
  return rep;
}

inline BicReport check_eps_bic_ir(const Instance& inst, const Mechanism& mech, const std::vector<DiscreteDistribution>& dists,
                                  const InterimMode& mode) {
  check_mode(mech, mode);
  const std::size_t n = inst.n();
  if (mode.kind == InterimMode::monte_carlo) {
    return bic_report_mc(inst, dists, mode.samples, mode.seed, [&](std::size_t i, TypeIndex r, Stream& rng) {
      std::vector<TypeIndex> b(n);
      sample_profile(dists, i, b, rng);
      b[i] = r;
      const Draw d = mech.query(b, rng);
      std::vector<double> util(inst.agents[i].size());
      for (TypeIndex t = 0; t < util.size(); ++t) util[t] = inst.value(i, t, d.outcome) - d.payments[i];
      return util;
    });
  }
  BicReport rep;
  rep.utility.resize(n);
  rep.regret_se.resize(n);
  rep.ir_se.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t U = inst.agents[i].size();
    rep.utility[i].assign(U, std::vector<double>(U, NAN));
    rep.regret_se[i].assign(U, std::vector<double>(U, 0.0));
    rep.ir_se[i].assign(U, 0.0);
    const auto& sup = dists[i].support();
    // one enumeration per report gives utilities for every true type
    for (auto r : sup) {
      std::vector<double> u(U, 0.0);
      for_each_profile(dists, i, [&](std::span<const TypeIndex> prof, double p) {
        std::vector<TypeIndex> b(prof.begin(), prof.end());
        b[i] = r;
        for (const auto& a : mech.exact(b))
          for (TypeIndex t = 0; t < U; ++t) u[t] += p * a.prob * (inst.value(i, t, a.outcome) - a.payments[i]);
      });
      for (auto t : sup) rep.utility[i][t][r] = u[t];
    }
    for (auto t : sup) {
      rep.min_ir_slack = std::min(rep.min_ir_slack, rep.utility[i][t][t]);
      for (auto r : sup) {
        if (r == t) continue;
        const double g = rep.utility[i][t][r] - rep.utility[i][t][t];
        if (g > rep.max_regret) {
          rep.max_regret = g;
          rep.argmax_agent = i;
          rep.argmax_true = t;
          rep.argmax_report = r;
        }
      }
    }
    if (sup.size() == 1) rep.max_regret = std::max(rep.max_regret, 0.0);
  }
  rep.max_regret_z = rep.max_regret;
  rep.min_ir_z = rep.min_ir_slack;
  return rep;
}

inline Estimate revenue(const Mechanism& mech, const std::vector<DiscreteDistribution>& dists, const InterimMode& mode) {
  check_mode(mech, mode);
  const std::size_t n = dists.size();
  if (mode.kind == InterimMode::exact) {
    double rev = 0.0;
    for_each_profile(dists, n, [&](std::span<const TypeIndex> b, double p) {
      for (const auto& a : mech.exact(b))
        for (double pay : a.payments) rev += p * a.prob * pay;
    });
    return {rev, 0.0, 0};
  }
  const std::size_t chunks = std::min<std::uint64_t>(kChunks, mode.samples);
  std::vector<Moments> part(chunks);
  const Stream base = Stream(mode.seed).child(0x7e7);
  parallel_chunks(chunks, [&](std::size_t c) {
    const std::uint64_t lo = mode.samples * c / chunks, hi = mode.samples * (c + 1) / chunks;
    std::vector<TypeIndex> b(n);
    for (std::uint64_t s = lo; s < hi; ++s) {
      Stream rng = base.child(s);
      sample_profile(dists, n, b, rng);
      const Draw d = mech.query(b, rng);
      double tot = 0.0;
      for (double pay : d.payments) tot += pay;
      part[c].add(tot);
    }
  });
  Moments all;
  for (auto& m : part) all.merge(m);
  return to_estimate(all);
}

// ---------------------------------------------------------------------------
// Couplings and the l-infinity Wasserstein distance.
// ---------------------------------------------------------------------------
inline double type_distance(const AgentTypeSpace& a, TypeIndex t, TypeIndex u) {
  double d = 0.0;
  for (std::size_t o = 0; o < a.valuation()[t].size(); ++o) d = std::max(d, std::fabs(a.value(t, o) - a.value(u, o)));
  return d;
}

// Conditional laws c(t) over T for each t in supp(D'); joint[t'][t] = D'(t') c(t')(t).
struct Coupling {
  std::vector<std::vector<double>> joint;  // universe x universe
  bool monotone = false;

  static Coupling from_joint(const AgentTypeSpace& a, std::vector<std::vector<double>> joint) {
    Coupling c;
    c.joint = std::move(joint);
    c.monotone = true;
    for (std::size_t s = 0; s < c.joint.size(); ++s)
      for (std::size_t t = 0; t < c.joint[s].size(); ++t) {
        if (c.joint[s][t] <= 0.0) continue;
        for (std::size_t o = 0; o < a.valuation()[s].size(); ++o)
          if (a.value(s, o) < a.value(t, o)) c.monotone = false;
      }
    return c;
  }

  // Marginal check within tol by enumeration.
  bool consistent(const DiscreteDistribution& report, const DiscreteDistribution& prior, double tol = 1e-9) const {
    const std::size_t U = joint.size();
    for (std::size_t s = 0; s < U; ++s) {
      double row = 0.0, col = 0.0;
      for (std::size_t t = 0; t < U; ++t) {
        row += joint[s][t];
        col += joint[t][s];
      }
      if (std::fabs(row - report.mass_of(s)) > tol || std::fabs(col - prior.mass_of(s)) > tol) return false;
    }
    return true;
  }

  double expected_distance(const AgentTypeSpace& a) const {
    double e = 0.0;
    for (std::size_t s = 0; s < joint.size(); ++s)
      for (std::size_t t = 0; t < joint.size(); ++t)
        if (joint[s][t] > 0) e += joint[s][t] * type_distance(a, s, t);
    return e;
  }
};

namespace detail {

// Min-cost transport between two finite mass vectors with cost matrix c,
// by successive shortest paths (Bellman-Ford on the residual graph). Returns
// the flow matrix.
inline std::vector<std::vector<double>> transport(const std::vector<double>& supply, const std::vector<double>& demand,
                                                  const std::vector<std::vector<double>>& cost) {
  const std::size_t A = supply.size(), B = demand.size();
  const std::size_t src = A + B, snk = src + 1, V = snk + 1;
  std::vector<std::vector<double>> flow(A, std::vector<double>(B, 0.0));
  std::vector<double> sup = supply, dem = demand;
  const double eps = 1e-15;
  for (std::size_t iter = 0; iter < 1000 * (A + B) + 100; ++iter) {
    double remaining = 0.0;
    for (double s : sup) remaining += s;
    if (remaining <= 1e-13) break;
    std::vector<double> dist(V, INFINITY);
    std::vector<std::ptrdiff_t> prev(V, -1);
    dist[src] = 0.0;
    for (std::size_t round = 0; round < V; ++round) {
      bool changed = false;
      auto relax = [&](std::size_t u, std::size_t v, double w) {
        if (dist[u] + w < dist[v] - 1e-15) {
          dist[v] = dist[u] + w;
          prev[v] = static_cast<std::ptrdiff_t>(u);
          changed = true;
        }
      };
      for (std::size_t a = 0; a < A; ++a)
        if (sup[a] > eps && dist[src] < INFINITY) relax(src, a, 0.0);
      for (std::size_t a = 0; a < A; ++a) {
        if (dist[a] == INFINITY) continue;
        for (std::size_t b = 0; b < B; ++b) relax(a, A + b, cost[a][b]);
      }
      for (std::size_t b = 0; b < B; ++b) {
        if (dist[A + b] == INFINITY) continue;
        for (std::size_t a = 0; a < A; ++a)
          if (flow[a][b] > eps) relax(A + b, a, -cost[a][b]);
        if (dem[b] > eps) relax(A + b, snk, 0.0);
      }
      if (!changed) break;
    }
    if (dist[snk] == INFINITY) break;
    // bottleneck
    double push = INFINITY;
    std::size_t v = snk;
    while (v != src) {
      const auto u = static_cast<std::size_t>(prev[v]);
      if (u == src) push = std::min(push, sup[v]);
      else if (v == snk) push = std::min(push, dem[u - A]);
      else if (u >= A && v < A) push = std::min(push, flow[v][u - A]);
      v = u;
    }
    v = snk;
    while (v != src) {
      const auto u = static_cast<std::size_t>(prev[v]);
      if (u == src) sup[v] -= push;
      else if (v == snk) dem[u - A] -= push;
      else if (u < A) flow[u][v - A] += push;
      else flow[v][u - A] -= push;
      v = u;
    }
  }
  return flow;
}

}  // namespace detail

// Optimal coupling of D' (rows) and D (columns) under dist_i.
inline Coupling optimal_coupling(const AgentTypeSpace& a, const DiscreteDistribution& report, const DiscreteDistribution& prior) {
  std::vector<std::vector<double>> cost(report.size(), std::vector<double>(prior.size()));
  for (std::size_t x = 0; x < report.size(); ++x)
    for (std::size_t y = 0; y < prior.size(); ++y) cost[x][y] = type_distance(a, report.type(x), prior.type(y));
  const auto flow = detail::transport(report.masses(), prior.masses(), cost);
  std::vector<std::vector<double>> joint(a.size(), std::vector<double>(a.size(), 0.0));
  for (std::size_t x = 0; x < report.size(); ++x)
    for (std::size_t y = 0; y < prior.size(); ++y) joint[report.type(x)][prior.type(y)] += flow[x][y];
  return Coupling::from_joint(a, std::move(joint));
}

inline double wasserstein_distance(const AgentTypeSpace& a, const DiscreteDistribution& d1, const DiscreteDistribution& d2) {
  for (auto t : d1.support())
    if (t >= a.size()) throw InvalidInput("wasserstein: type outside universe");
  for (auto t : d2.support())
    if (t >= a.size()) throw InvalidInput("wasserstein: type outside universe");
  return optimal_coupling(a, d1, d2).expected_distance(a);
}

}  // namespace mechkit
