#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mechkit/core.hpp"

namespace mechkit {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

inline constexpr int kSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Line lookup for JSON pointers: a SAX pass over a counting iterator records
// the line on which each value ends.
// ---------------------------------------------------------------------------
class SourceMap {
 public:
  static SourceMap build(const std::string& text) {
    SourceMap sm;
    std::size_t pos = 0;
    Iter first{text.data(), &pos}, last{text.data() + text.size(), &pos};
    Handler h{&sm, &text, &pos};
    json::sax_parse(first, last, &h, json::input_format_t::json, false);
    return sm;
  }

  // Line of the pointer, or of its nearest recorded ancestor.
  std::size_t line(std::string ptr) const {
    for (;;) {
      auto it = lines_.find(ptr);
      if (it != lines_.end()) return it->second;
      const auto cut = ptr.rfind('/');
      if (cut == std::string::npos || ptr.empty()) return 1;
      ptr = ptr.substr(0, cut);
    }
  }

 private:
  struct Iter {
    using iterator_category = std::input_iterator_tag;
    using value_type = char;
    using difference_type = std::ptrdiff_t;
    using pointer = const char*;
    using reference = const char&;
    const char* p;
    std::size_t* pos;
    reference operator*() const { return *p; }
    Iter& operator++() {
      ++p;
      ++*pos;
      return *this;
    }
    Iter operator++(int) {
      Iter t = *this;
      ++*this;
      return t;
    }
    bool operator==(const Iter& o) const { return p == o.p; }
    bool operator!=(const Iter& o) const { return p != o.p; }
  };

  struct Frame {
    bool array = false;
    std::size_t index = 0;
    std::string key;
  };

  struct Handler : nlohmann::json_sax<json> {
    SourceMap* sm;
    const std::string* text;
    std::size_t* pos;
    std::vector<Frame> stack;
    Handler(SourceMap* s, const std::string* t, std::size_t* p) : sm(s), text(t), pos(p) {}

    std::vector<std::size_t> breaks;  // offsets of newlines

    std::size_t current_line() {
      if (breaks.empty() && !text->empty()) {
        for (std::size_t k = 0; k < text->size(); ++k)
          if ((*text)[k] == '\n') breaks.push_back(k);
        breaks.push_back(std::string::npos);
      }
      // the lexer has consumed one character past the token
      const std::size_t last = *pos >= 2 ? *pos - 2 : 0;
      return 1 + static_cast<std::size_t>(std::lower_bound(breaks.begin(), breaks.end(), last) - breaks.begin());
    }
    std::string child_path() const {
      if (stack.empty()) return "";
      std::string s;
      for (std::size_t k = 0; k < stack.size(); ++k) {
        const auto& f = stack[k];
        s += "/" + (f.array ? std::to_string(f.index) : f.key);
      }
      return s;
    }
    void value() {
      sm->lines_.emplace(child_path(), current_line());
      if (!stack.empty() && stack.back().array) ++stack.back().index;
    }
    bool null() override { return value(), true; }
    bool boolean(bool) override { return value(), true; }
    bool number_integer(number_integer_t) override { return value(), true; }
    bool number_unsigned(number_unsigned_t) override { return value(), true; }
    bool number_float(number_float_t, const string_t&) override { return value(), true; }
    bool string(string_t&) override { return value(), true; }
    bool binary(binary_t&) override { return value(), true; }
    bool start_object(std::size_t) override {
      sm->lines_.emplace(child_path(), current_line());
      stack.push_back({false, 0, ""});
      return true;
    }
    bool key(string_t& k) override {
      stack.back().key = k;
      return true;
    }
    bool end_object() override {
      stack.pop_back();
      if (!stack.empty() && stack.back().array) ++stack.back().index;
      return true;
    }
    bool start_array(std::size_t) override {
      sm->lines_.emplace(child_path(), current_line());
      stack.push_back({true, 0, ""});
      return true;
    }
    bool end_array() override {
      stack.pop_back();
      if (!stack.empty() && stack.back().array) ++stack.back().index;
      return true;
    }
    bool parse_error(std::size_t, const std::string&, const nlohmann::detail::exception&) override { return false; }
  };

  std::map<std::string, std::size_t> lines_;
};

// Schema errors carry the source name, line and JSON pointer.
class SchemaReader {
 public:
  SchemaReader(std::string source, const std::string& text) : source_(std::move(source)) {
    try {
      doc_ = json::parse(text);
    } catch (const json::parse_error& e) {
      throw InvalidInput(source_ + ": JSON syntax error at byte " + std::to_string(e.byte) + ": " + e.what());
    }
    map_ = SourceMap::build(text);
  }
  const json& doc() const { return doc_; }

  [[noreturn]] void fail(const std::string& ptr, const std::string& msg) const {
    throw InvalidInput(source_ + ":" + std::to_string(map_.line(ptr)) + ": " + (ptr.empty() ? "/" : ptr) + ": " + msg);
  }
  const json& at(const json& parent, const std::string& ptr, const std::string& key) const {
    if (!parent.is_object()) fail(ptr, "expected an object");
    auto it = parent.find(key);
    if (it == parent.end()) fail(ptr, "missing required key '" + key + "'");
    return *it;
  }
  const json& array(const json& v, const std::string& ptr) const {
    if (!v.is_array()) fail(ptr, "expected an array");
    return v;
  }
  double number(const json& v, const std::string& ptr) const {
    if (!v.is_number()) fail(ptr, "expected a number");
    return v.get<double>();
  }
  std::string string(const json& v, const std::string& ptr) const {
    if (!v.is_string()) fail(ptr, "expected a string");
    return v.get<std::string>();
  }
  std::uint64_t unsigned_int(const json& v, const std::string& ptr) const {
    if (!v.is_number_unsigned()) fail(ptr, "expected a nonnegative integer");
    return v.get<std::uint64_t>();
  }

 private:
  std::string source_;
  json doc_;
  SourceMap map_;
};

// ---------------------------------------------------------------------------
// Mechanism plugins: name -> factory(instance without mechanism, params).
// ---------------------------------------------------------------------------
using PluginFactory = std::function<std::shared_ptr<const Mechanism>(const Instance&, const json& params)>;

inline std::map<std::string, PluginFactory>& plugin_registry() {
  static std::map<std::string, PluginFactory> reg;
  return reg;
}

inline void register_plugin(const std::string& name, PluginFactory f) { plugin_registry()[name] = std::move(f); }

// Query-only view of a mechanism (hides the exact form).
class BlackBox final : public Mechanism {
 public:
  explicit BlackBox(std::shared_ptr<const Mechanism> m) : m_(std::move(m)) {}
  std::size_t num_agents() const override { return m_->num_agents(); }
  Draw query(std::span<const TypeIndex> bids, Stream& rng) const override { return m_->query(bids, rng); }

 private:
  std::shared_ptr<const Mechanism> m_;
};

// Sequential posted prices on a downward-closed space: agents in index order
// take their best non-null component if its value minus price is >= 0
// (ties resolved towards buying). params: {"prices": [..], "rebate": r,
// "black_box": bool}. The rebate r is paid to an agent who does not buy.
inline std::shared_ptr<const Mechanism> posted_price_plugin(const Instance& inst, const json& params) {
  const std::size_t n = inst.n();
  if (inst.outcomes.mode() != OutcomeMode::downward_closed) throw InvalidInput("posted_price: needs a downward-closed space");
  if (!params.contains("prices") || !params["prices"].is_array() || params["prices"].size() != n)
    throw InvalidInput("posted_price: 'prices' must list one price per agent");
  std::vector<double> price(n);
  for (std::size_t i = 0; i < n; ++i) price[i] = params["prices"][i].get<double>();
  const double rebate = params.value("rebate", 0.0);
  // null outcome: every component null
  OutcomeIndex null_o = 0;
  for (std::size_t i = 0; i < n; ++i) null_o = inst.outcomes.without(null_o, i);
  auto tab = std::make_shared<TabularMechanism>(inst.universe_sizes(), inst.outcomes.size());
  ProfileIndexer idx(inst.universe_sizes());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto b = idx.profile(k);
    OutcomeIndex cur = null_o;
    std::vector<double> pay(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      // outcomes reachable from cur by giving agent i a component
      std::optional<OutcomeIndex> best;
      double bv = -1.0;
      for (OutcomeIndex o = 0; o < inst.outcomes.size(); ++o) {
        if (inst.outcomes.is_null_for(o, i) || inst.outcomes.without(o, i) != cur) continue;
        const double v = inst.value(i, b[i], o);
        if (v > bv) bv = v, best = o;
      }
      if (best && bv - price[i] >= 0.0) {
        cur = *best;
        pay[i] = price[i];
      } else {
        pay[i] = -rebate;
      }
    }
    tab->set(b, {{1.0, cur, pay}});
  }
  if (params.value("black_box", false)) return std::make_shared<BlackBox>(tab);
  return tab;
}

inline void register_builtin_plugins() {
  if (!plugin_registry().count("posted_price")) register_plugin("posted_price", posted_price_plugin);
}

// ---------------------------------------------------------------------------
// Instance format:
// { "version": 1, "name": str,
//   "outcomes": {"mode": "downward_closed"|"general",
//                "list": [ {"id": str, "components": [str|null per agent]} | str ]},
//   "agents": [ {"types": [str], "masses": [num], "report_masses": [num]?} ],
//   "valuations": v[agent][type][outcome],
//   "mechanism": {"table": [ {"bids": [type label per agent],
//                             "lottery": [ {"prob": num, "outcome": id, "payments": [num]} ]} ]}
//              | {"plugin": name, "params": {...}} }
// Masses may be zero (type outside the support); the report distribution
// defaults to the prior.
// ---------------------------------------------------------------------------
inline Instance parse_instance(const std::string& text, const std::string& source = "instance") {
  register_builtin_plugins();
  SchemaReader rd(source, text);
  const json& d = rd.doc();
  if (!d.is_object()) rd.fail("", "expected an object at top level");
  if (d.contains("version")) {
    const auto v = rd.unsigned_int(d["version"], "/version");
    if (v != kSchemaVersion) rd.fail("/version", "unsupported version " + std::to_string(v));
  }
  Instance inst;

  const json& oc = rd.at(d, "", "outcomes");
  const std::string mode = rd.string(rd.at(oc, "/outcomes", "mode"), "/outcomes/mode");
  if (mode != "downward_closed" && mode != "general") rd.fail("/outcomes/mode", "must be 'downward_closed' or 'general'");
  const json& ol = rd.array(rd.at(oc, "/outcomes", "list"), "/outcomes/list");
  if (ol.empty()) rd.fail("/outcomes/list", "needs at least one outcome");
  const json& ag = rd.array(rd.at(d, "", "agents"), "/agents");
  if (ag.empty()) rd.fail("/agents", "needs at least one agent");
  const std::size_t n = ag.size();

  std::vector<std::string> ids;
  std::vector<OutcomeSpace::Components> comps;
  for (std::size_t o = 0; o < ol.size(); ++o) {
    const std::string p = "/outcomes/list/" + std::to_string(o);
    if (ol[o].is_string()) {
      if (mode == "downward_closed") rd.fail(p, "downward-closed outcomes need {id, components}");
      ids.push_back(ol[o].get<std::string>());
      continue;
    }
    ids.push_back(rd.string(rd.at(ol[o], p, "id"), p + "/id"));
    if (mode == "downward_closed") {
      const json& c = rd.array(rd.at(ol[o], p, "components"), p + "/components");
      if (c.size() != n) rd.fail(p + "/components", "needs one component per agent (" + std::to_string(n) + ")");
      OutcomeSpace::Components cc;
      for (std::size_t i = 0; i < n; ++i) {
        if (c[i].is_null()) cc.emplace_back(std::nullopt);
        else cc.emplace_back(rd.string(c[i], p + "/components/" + std::to_string(i)));
      }
      comps.push_back(std::move(cc));
    }
  }
  try {
    inst.outcomes = mode == "general" ? OutcomeSpace::general(ids) : OutcomeSpace::downward_closed(ids, comps);
  } catch (const InvalidInput& e) {
    rd.fail("/outcomes", e.what());
  }

  const json& vals = rd.array(rd.at(d, "", "valuations"), "/valuations");
  if (vals.size() != n) rd.fail("/valuations", "needs one table per agent");
  for (std::size_t i = 0; i < n; ++i) {
    const std::string p = "/agents/" + std::to_string(i);
    const json& types = rd.array(rd.at(ag[i], p, "types"), p + "/types");
    std::vector<std::string> labels;
    for (std::size_t t = 0; t < types.size(); ++t) labels.push_back(rd.string(types[t], p + "/types/" + std::to_string(t)));
    const std::string vp = "/valuations/" + std::to_string(i);
    const json& vt = rd.array(vals[i], vp);
    if (vt.size() != labels.size()) rd.fail(vp, "needs one row per type");
    std::vector<std::vector<double>> v(labels.size());
    for (std::size_t t = 0; t < labels.size(); ++t) {
      const std::string rp = vp + "/" + std::to_string(t);
      const json& row = rd.array(vt[t], rp);
      if (row.size() != ids.size()) rd.fail(rp, "needs one value per outcome (" + std::to_string(ids.size()) + ")");
      for (std::size_t o = 0; o < row.size(); ++o) {
        const double x = rd.number(row[o], rp + "/" + std::to_string(o));
        if (!(x >= 0.0 && x <= 1.0)) rd.fail(rp + "/" + std::to_string(o), "valuation must lie in [0,1]");
        v[t].push_back(x);
      }
    }
    try {
      inst.agents.emplace_back(i, labels, v);
      inst.agents.back().check_against(inst.outcomes);
    } catch (const InvalidInput& e) {
      rd.fail(vp, e.what());
    }
    auto masses = [&](const std::string& key) {
      const json& m = rd.array(rd.at(ag[i], p, key), p + "/" + key);
      if (m.size() != labels.size()) rd.fail(p + "/" + key, "needs one mass per type");
      std::vector<TypeIndex> sup;
      std::vector<double> w;
      double tot = 0.0;
      for (std::size_t t = 0; t < m.size(); ++t) {
        const double x = rd.number(m[t], p + "/" + key + "/" + std::to_string(t));
        if (!(x >= 0.0 && x <= 1.0)) rd.fail(p + "/" + key + "/" + std::to_string(t), "mass must lie in [0,1]");
        tot += x;
        if (x > 0.0) sup.push_back(t), w.push_back(x);
      }
      if (std::fabs(tot - 1.0) > kMassTolerance)
        rd.fail(p + "/" + key, "masses must sum to 1 (sum is " + std::to_string(tot) + ")");
      return DiscreteDistribution(sup, w);
    };
    inst.prior.push_back(masses("masses"));
    inst.report_prior.push_back(ag[i].contains("report_masses") ? masses("report_masses") : inst.prior.back());
  }

  const json& mj = rd.at(d, "", "mechanism");
  if (mj.contains("table")) {
    const json& tab = rd.array(mj["table"], "/mechanism/table");
    auto mech = std::make_shared<TabularMechanism>(inst.universe_sizes(), inst.outcomes.size());
    for (std::size_t r = 0; r < tab.size(); ++r) {
      const std::string p = "/mechanism/table/" + std::to_string(r);
      const json& bids = rd.array(rd.at(tab[r], p, "bids"), p + "/bids");
      if (bids.size() != n) rd.fail(p + "/bids", "needs one bid per agent");
      std::vector<TypeIndex> b(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto t = inst.agents[i].find(rd.string(bids[i], p + "/bids/" + std::to_string(i)));
        if (!t) rd.fail(p + "/bids/" + std::to_string(i), "unknown type label");
        b[i] = *t;
      }
      const json& lot = rd.array(rd.at(tab[r], p, "lottery"), p + "/lottery");
      Lottery l;
      for (std::size_t a = 0; a < lot.size(); ++a) {
        const std::string ap = p + "/lottery/" + std::to_string(a);
        Atom at;
        at.prob = rd.number(rd.at(lot[a], ap, "prob"), ap + "/prob");
        const auto o = inst.outcomes.find(rd.string(rd.at(lot[a], ap, "outcome"), ap + "/outcome"));
        if (!o) rd.fail(ap + "/outcome", "unknown outcome id");
        at.outcome = *o;
        const json& pay = rd.array(rd.at(lot[a], ap, "payments"), ap + "/payments");
        for (std::size_t i = 0; i < pay.size(); ++i) at.payments.push_back(rd.number(pay[i], ap + "/payments/" + std::to_string(i)));
        l.push_back(std::move(at));
      }
      if (mech->defined(b)) rd.fail(p + "/bids", "duplicate bid profile");
      try {
        mech->set(b, std::move(l));
      } catch (const InvalidInput& e) {
        rd.fail(p + "/lottery", e.what());
      }
    }
    // every profile over the report supports must be present
    std::vector<DiscreteDistribution> need = inst.report_prior;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<TypeIndex> u(inst.report_prior[i].support());
      for (auto t : inst.prior[i].support())
        if (!inst.report_prior[i].contains(t)) u.push_back(t);
      std::sort(u.begin(), u.end());
      need[i] = DiscreteDistribution(u, std::vector<double>(u.size(), 1.0 / static_cast<double>(u.size())));
    }
    for_each_profile(need, n, [&](std::span<const TypeIndex> b, double) {
      if (!mech->defined(b)) {
        std::string s;
        for (std::size_t i = 0; i < n; ++i) s += (i ? "," : "") + inst.agents[i].label(b[i]);
        rd.fail("/mechanism/table", "missing entry for bid profile (" + s + ")");
      }
    });
    inst.mechanism = mech;
  } else if (mj.contains("plugin")) {
    const std::string name = rd.string(mj["plugin"], "/mechanism/plugin");
    auto it = plugin_registry().find(name);
    if (it == plugin_registry().end()) rd.fail("/mechanism/plugin", "unknown plugin '" + name + "'");
    try {
      inst.mechanism = it->second(inst, mj.value("params", json::object()));
    } catch (const InvalidInput& e) {
      rd.fail("/mechanism/params", e.what());
    }
  } else {
    rd.fail("/mechanism", "needs 'table' or 'plugin'");
  }
  try {
    inst.validate();
  } catch (const InvalidInput& e) {
    rd.fail("", e.what());
  }
  return inst;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput(path + ": cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Instance load_instance(const std::string& path) { return parse_instance(read_file(path), path); }

// Serializes an instance whose mechanism has an exact form (as a table).
inline ojson instance_to_json(const Instance& inst, const std::string& name) {
  ojson d;
  d["version"] = kSchemaVersion;
  d["name"] = name;
  const bool dc = inst.outcomes.mode() == OutcomeMode::downward_closed;
  d["outcomes"]["mode"] = dc ? "downward_closed" : "general";
  d["outcomes"]["list"] = ojson::array();
  for (OutcomeIndex o = 0; o < inst.outcomes.size(); ++o) {
    ojson e;
    e["id"] = inst.outcomes.id(o);
    if (dc) {
      e["components"] = ojson::array();
      for (auto& c : inst.outcomes.components(o)) e["components"].push_back(c ? ojson(*c) : ojson(nullptr));
    }
    d["outcomes"]["list"].push_back(e);
  }
  d["agents"] = ojson::array();
  d["valuations"] = ojson::array();
  for (std::size_t i = 0; i < inst.n(); ++i) {
    ojson a;
    a["types"] = inst.agents[i].labels();
    std::vector<double> m(inst.agents[i].size(), 0.0), rm(m);
    for (std::size_t k = 0; k < inst.prior[i].size(); ++k) m[inst.prior[i].type(k)] = inst.prior[i].mass(k);
    for (std::size_t k = 0; k < inst.report_prior[i].size(); ++k) rm[inst.report_prior[i].type(k)] = inst.report_prior[i].mass(k);
    a["masses"] = m;
    if (!(inst.report_prior[i] == inst.prior[i])) a["report_masses"] = rm;
    d["agents"].push_back(a);
    d["valuations"].push_back(inst.agents[i].valuation());
  }
  if (!inst.mechanism || !inst.mechanism->has_exact()) throw UnsupportedMode("instance_to_json: needs a tabular mechanism");
  d["mechanism"]["table"] = ojson::array();
  ProfileIndexer idx(inst.universe_sizes());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto b = idx.profile(k);
    Lottery l;
    try {
      l = inst.mechanism->exact(b);
    } catch (const InvalidInput&) {
      continue;
    }
    ojson row;
    row["bids"] = ojson::array();
    for (std::size_t i = 0; i < inst.n(); ++i) row["bids"].push_back(inst.agents[i].label(b[i]));
    row["lottery"] = ojson::array();
    for (auto& a : l) row["lottery"].push_back({{"prob", a.prob}, {"outcome", inst.outcomes.id(a.outcome)}, {"payments", a.payments}});
    d["mechanism"]["table"].push_back(row);
  }
  return d;
}

}  // namespace mechkit
