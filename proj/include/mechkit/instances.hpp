#pragma once

#include <algorithm>
#include <memory>
#include <string>
#include <vector>

#include "mechkit/core.hpp"
#include "mechkit/io.hpp"

namespace mechkit::instances {

inline std::shared_ptr<Instance> finish(Instance inst) {
  inst.validate();
  return std::make_shared<Instance>(std::move(inst));
}

// Single agent, outcomes {none, o}. H (mass 1 - sigma) values o at 1, L
// values nothing. M sells o to H at price 1 and pays L a rebate eps.
inline std::shared_ptr<Instance> example1(double sigma, double eps) {
  if (!(sigma > 0.0 && sigma < 1.0)) throw InvalidInput("example1: sigma must lie in (0,1)");
  Instance inst;
  inst.outcomes = OutcomeSpace::downward_closed({"none", "o"}, {{std::nullopt}, {std::string("o")}});
  inst.agents.emplace_back(0, std::vector<std::string>{"H", "L"}, std::vector<std::vector<double>>{{0.0, 1.0}, {0.0, 0.0}});
  inst.prior.emplace_back(std::vector<TypeIndex>{0, 1}, std::vector<double>{1.0 - sigma, sigma});
  inst.report_prior = inst.prior;
  auto m = std::make_shared<TabularMechanism>(inst.universe_sizes(), 2);
  m->set(std::vector<TypeIndex>{0}, {{1.0, 1, {1.0}}});
  m->set(std::vector<TypeIndex>{1}, {{1.0, 0, {-eps}}});
  inst.mechanism = m;
  return finish(std::move(inst));
}

// Single agent, general outcomes {oL, oH}; each type values its own outcome
// at 1. M returns the reported type's outcome and always charges 1/2.
inline std::shared_ptr<Instance> example3(double p) {
  if (!(p > 0.0 && p < 1.0)) throw InvalidInput("example3: p must lie in (0,1)");
  Instance inst;
  inst.outcomes = OutcomeSpace::general({"oL", "oH"});
  inst.agents.emplace_back(0, std::vector<std::string>{"tL", "tH"}, std::vector<std::vector<double>>{{1.0, 0.0}, {0.0, 1.0}});
  inst.prior.emplace_back(std::vector<TypeIndex>{0, 1}, std::vector<double>{p, 1.0 - p});
  inst.report_prior = inst.prior;
  auto m = std::make_shared<TabularMechanism>(inst.universe_sizes(), 2);
  m->set(std::vector<TypeIndex>{0}, {{1.0, 0, {0.5}}});
  m->set(std::vector<TypeIndex>{1}, {{1.0, 1, {0.5}}});
  inst.mechanism = m;
  return finish(std::move(inst));
}

// Single item among n agents: outcome k (k = 0..n-1) gives the item to
// agent k, outcome n keeps it.
inline OutcomeSpace single_item(std::size_t n) {
  std::vector<std::string> ids;
  std::vector<OutcomeSpace::Components> comps;
  for (std::size_t k = 0; k <= n; ++k) {
    ids.push_back(k < n ? "win" + std::to_string(k) : "none");
    OutcomeSpace::Components c(n);
    if (k < n) c[k] = "item";
    comps.push_back(c);
  }
  return OutcomeSpace::downward_closed(ids, comps);
}

inline AgentTypeSpace item_bidder(std::size_t i, std::size_t n, const std::vector<double>& values) {
  std::vector<std::string> labels;
  std::vector<std::vector<double>> v;
  for (double x : values) {
    labels.push_back("v" + std::to_string(static_cast<int>(x * 100 + 0.5)));
    std::vector<double> row(n + 1, 0.0);
    row[i] = x;
    v.push_back(row);
  }
  return AgentTypeSpace(i, labels, v);
}

enum class Auction { second_price, first_price };

// Two-bidder single-item auction with uniform priors; ties go to bidder 0.
inline std::shared_ptr<Instance> two_bidder_auction(const std::vector<double>& values, Auction kind) {
  Instance inst;
  inst.outcomes = single_item(2);
  const std::size_t m = values.size();
  std::vector<TypeIndex> sup(m);
  for (std::size_t t = 0; t < m; ++t) sup[t] = t;
  for (std::size_t i = 0; i < 2; ++i) {
    inst.agents.push_back(item_bidder(i, 2, values));
    inst.prior.emplace_back(sup, std::vector<double>(m, 1.0 / static_cast<double>(m)));
  }
  inst.report_prior = inst.prior;
  auto mech = std::make_shared<TabularMechanism>(inst.universe_sizes(), 3);
  for (TypeIndex a = 0; a < m; ++a)
    for (TypeIndex b = 0; b < m; ++b) {
      const std::size_t w = values[a] >= values[b] ? 0 : 1;
      const double price = kind == Auction::second_price ? std::min(values[a], values[b]) : std::max(values[a], values[b]);
      std::vector<double> pay(2, 0.0);
      pay[w] = price;
      mech->set(std::vector<TypeIndex>{a, b}, {{1.0, w, pay}});
    }
  inst.mechanism = mech;
  return finish(std::move(inst));
}

// One bidder, posted price with a rebate for not buying (rebate-BIC).
inline std::shared_ptr<Instance> posted_price_rebate(const std::vector<double>& values, const std::vector<double>& masses,
                                                     double price, double rebate) {
  Instance inst;
  inst.outcomes = single_item(1);
  inst.agents.push_back(item_bidder(0, 1, values));
  std::vector<TypeIndex> sup(values.size());
  for (std::size_t t = 0; t < sup.size(); ++t) sup[t] = t;
  inst.prior.emplace_back(sup, masses);
  inst.report_prior = inst.prior;
  inst.mechanism = posted_price_plugin(inst, json{{"prices", {price}}, {"rebate", rebate}});
  return finish(std::move(inst));
}

// Two unit-demand agents, items a and b, serial posted prices.
inline std::shared_ptr<Instance> two_items_serial(double price) {
  Instance inst;
  std::vector<std::string> ids;
  std::vector<OutcomeSpace::Components> comps;
  const std::vector<std::optional<std::string>> opts{std::nullopt, std::string("a"), std::string("b")};
  for (auto& c0 : opts)
    for (auto& c1 : opts) {
      if (c0 && c1 && *c0 == *c1) continue;
      ids.push_back(std::string(c0 ? *c0 : "-") + (c1 ? *c1 : "-"));
      comps.push_back({c0, c1});
    }
  inst.outcomes = OutcomeSpace::downward_closed(ids, comps);
  for (std::size_t i = 0; i < 2; ++i) {
    std::vector<std::vector<double>> v;
    const std::vector<std::pair<double, double>> tv{{1.0, 0.4}, {0.3, 0.8}};
    for (auto [va, vb] : tv) {
      std::vector<double> row(ids.size(), 0.0);
      for (std::size_t o = 0; o < ids.size(); ++o) {
        const auto& c = comps[o][i];
        if (c) row[o] = *c == "a" ? va : vb;
      }
      v.push_back(row);
    }
    inst.agents.emplace_back(i, std::vector<std::string>{"likes_a", "likes_b"}, v);
  }
  inst.prior.emplace_back(std::vector<TypeIndex>{0, 1}, std::vector<double>{0.6, 0.4});
  inst.prior.emplace_back(std::vector<TypeIndex>{0, 1}, std::vector<double>{0.3, 0.7});
  inst.report_prior = inst.prior;
  inst.mechanism = posted_price_plugin(inst, json{{"prices", {price, price}}});
  return finish(std::move(inst));
}

// Random tabular instance over general outcomes. Valuations are uniform on
// [0,1]; each profile gets a lottery over `atoms` distinct outcomes, and each
// agent pays a random fraction (at most max_charge) of what its report values
// the outcome, so truthful reports are ex-post IR. atoms = 1 with n = 1 gives
// a deterministic mechanism.
inline std::shared_ptr<Instance> random_tabular(const std::vector<std::size_t>& types, std::size_t outcomes, std::size_t atoms,
                                                double max_charge, Stream& rng) {
  if (types.empty() || outcomes == 0 || atoms == 0 || atoms > outcomes) throw InvalidInput("random_tabular: bad shape");
  const std::size_t n = types.size();
  Instance inst;
  std::vector<std::string> ids;
  for (std::size_t o = 0; o < outcomes; ++o) ids.push_back("o" + std::to_string(o));
  inst.outcomes = OutcomeSpace::general(ids);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::string> labels;
    std::vector<std::vector<double>> v(types[i], std::vector<double>(outcomes));
    for (std::size_t t = 0; t < types[i]; ++t) {
      labels.push_back("t" + std::to_string(t));
      for (auto& x : v[t]) x = rng.uniform();
    }
    inst.agents.emplace_back(i, labels, v);
    std::vector<TypeIndex> sup(types[i]);
    std::vector<double> w(types[i]);
    double tot = 0.0;
    for (std::size_t t = 0; t < types[i]; ++t) {
      sup[t] = t;
      tot += w[t] = 0.2 + rng.uniform();
    }
    for (auto& x : w) x /= tot;
    inst.prior.emplace_back(sup, w);
  }
  inst.report_prior = inst.prior;
  auto mech = std::make_shared<TabularMechanism>(inst.universe_sizes(), outcomes);
  ProfileIndexer idx(inst.universe_sizes());
  for (std::size_t p = 0; p < idx.size(); ++p) {
    const auto b = idx.profile(p);
    std::vector<OutcomeIndex> picks;
    while (picks.size() < atoms) {
      const auto o = static_cast<OutcomeIndex>(rng.below(outcomes));
      if (std::find(picks.begin(), picks.end(), o) == picks.end()) picks.push_back(o);
    }
    Lottery l;
    double tot = 0.0;
    std::vector<double> w(atoms);
    for (auto& x : w) tot += x = 0.2 + rng.uniform();
    for (std::size_t a = 0; a < atoms; ++a) {
      std::vector<double> pay(n);
      for (std::size_t i = 0; i < n; ++i) pay[i] = max_charge * rng.uniform() * inst.value(i, b[i], picks[a]);
      l.push_back({w[a] / tot, picks[a], pay});
    }
    mech->set(b, l);
  }
  inst.mechanism = mech;
  return finish(std::move(inst));
}

struct Named {
  std::string name;
  std::shared_ptr<Instance> instance;
};

// Desk-scale suite (n <= 2, at most 4 types per agent). The first-price
// auction is far from BIC.
inline std::vector<Named> desk_suite() {
  return {
      {"ex1_sigma25", example1(0.25, 0.1)},
      {"second_price", two_bidder_auction({0.2, 0.5, 0.9}, Auction::second_price)},
      {"first_price", two_bidder_auction({0.3, 0.6, 1.0}, Auction::first_price)},
      {"posted_rebate", posted_price_rebate({0.25, 0.5, 0.75, 1.0}, {0.25, 0.25, 0.25, 0.25}, 0.5, 0.05)},
      {"two_items", two_items_serial(0.3)},
  };
}

inline std::shared_ptr<Instance> builtin(const std::string& name) {
  if (name == "ex1") return example1(0.01, 0.04);
  if (name == "ex3") return example3(0.1);
  for (auto& d : desk_suite())
    if (d.name == name) return d.instance;
  throw InvalidInput("unknown builtin instance '" + name + "'");
}

inline std::vector<std::string> builtin_names() {
  std::vector<std::string> out{"ex1", "ex3"};
  for (auto& d : desk_suite()) out.push_back(d.name);
  return out;
}

}  // namespace mechkit::instances
