#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <cstdio>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "mechkit/instances.hpp"
#include "mechkit/io.hpp"
#include "mechkit/transform_dc.hpp"
#include "mechkit/transform_general.hpp"
#include "mechkit/verify.hpp"

namespace mechkit {

// Experiment file:
// { "version": 1,
//   "instance": "path.json" | {"builtin": name, ...builtin params},
//   "pipeline": "dc" | "general" | "nonideal" | "ideal" | "baseline",
//   "grid": [ {param: value, ...}, ... ]        explicit points, or
//   "sweep": {param: [values], ...}             cartesian product,
//   "seeds": [u64, ...],
//   "samples": u64,                             Monte Carlo runs per estimate
//   "z": num }                                  statistical threshold (default 3.09)
// Grid keys "instance.<name>" override builtin instance parameters.
struct ExperimentSpec {
  json instance;
  std::string pipeline;
  std::vector<json> points;
  std::vector<std::uint64_t> seeds;
  std::uint64_t samples = 10'000;
  double z = 3.09;  // one-sided 0.001
  std::string source = "experiment";
};

inline const std::vector<std::string>& pipeline_params(const std::string& pipeline) {
  static const std::map<std::string, std::vector<std::string>> p{
      {"dc", {"eta", "eta_prime", "delta", "ell", "d", "backend", "gamma_samples"}},
      {"general", {"gamma", "eps", "mode", "L"}},
      {"nonideal", {"eps", "L"}},
      {"ideal", {"ell", "eta"}},
      {"baseline", {"ell", "eta"}},
  };
  auto it = p.find(pipeline);
  if (it == p.end()) throw InvalidInput("experiment: unknown pipeline '" + pipeline + "'");
  return it->second;
}

inline json pipeline_defaults(const std::string& pipeline) {
  if (pipeline == "dc")
    return {{"eta", 0.1}, {"eta_prime", 0.5}, {"delta", 0.05}, {"ell", 2}, {"d", 2}, {"backend", "exact_mean"}, {"gamma_samples", 8}};
  if (pipeline == "general") return {{"gamma", 0.05}, {"eps", 0.0}, {"mode", "exact"}, {"L", 0}};
  if (pipeline == "nonideal") return {{"eps", 0.1}, {"L", "theorem"}};
  return {{"ell", 2}, {"eta", 0.0}};
}

inline std::shared_ptr<Instance> resolve_instance(const json& spec, const json& point) {
  if (spec.is_string()) {
    for (auto& [k, v] : point.items())
      if (k.rfind("instance.", 0) == 0) throw InvalidInput("experiment: 'instance.*' overrides need a builtin instance");
    return std::make_shared<Instance>(load_instance(spec.get<std::string>()));
  }
  json p = spec;
  for (auto& [k, v] : point.items())
    if (k.rfind("instance.", 0) == 0) p[k.substr(9)] = v;
  const std::string name = p.at("builtin").get<std::string>();
  if (name == "ex1") return instances::example1(p.value("sigma", 0.01), p.value("eps", 0.04));
  if (name == "ex3") return instances::example3(p.value("p", 0.1));
  return instances::builtin(name);
}

inline TransformConfig dc_config(const json& e) {
  TransformConfig c;
  c.eta = e.at("eta").get<double>();
  c.eta_prime = e.at("eta_prime").get<double>();
  c.delta = e.at("delta").get<double>();
  c.ell = e.at("ell").get<std::size_t>();
  c.d = e.at("d").get<std::size_t>();
  const auto b = e.at("backend").get<std::string>();
  if (b != "race" && b != "exact_mean") throw InvalidInput("experiment: backend must be 'race' or 'exact_mean'");
  c.backend = b == "race" ? SamplerBackend::race : SamplerBackend::exact_mean;
  c.gamma_samples = e.at("gamma_samples").get<std::size_t>();
  c.validate();
  return c;
}

// Fills defaults and checks every parameter; returns the effective point.
inline json effective_point(const ExperimentSpec& s, const json& point) {
  json e = pipeline_defaults(s.pipeline);
  const auto& allowed = pipeline_params(s.pipeline);
  for (auto& [k, v] : point.items()) {
    if (k.rfind("instance.", 0) == 0) {
      e[k] = v;
      continue;
    }
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
      throw InvalidInput("experiment: parameter '" + k + "' does not apply to pipeline '" + s.pipeline + "'");
    e[k] = v;
  }
  auto inst = resolve_instance(s.instance, e);
  if (s.pipeline == "dc") {
    dc_config(e);
  } else if (s.pipeline == "general") {
    const auto mode = e.at("mode").get<std::string>();
    if (mode != "exact" && mode != "empirical") throw InvalidInput("experiment: mode must be 'exact' or 'empirical'");
    if (!(e.at("gamma").get<double>() > 0.0)) throw InvalidInput("experiment: gamma must be positive");
    if (mode == "empirical" && e.at("L").get<std::uint64_t>() == 0) throw InvalidInput("experiment: empirical mode needs L >= 1");
    if (!inst->mechanism->has_exact() && mode == "exact") throw UnsupportedMode("experiment: exact mode needs a tabular mechanism");
  } else if (s.pipeline == "nonideal") {
    const double eps = e.at("eps").get<double>();
    if (!(eps > 0.0 && eps < 1.0)) throw InvalidInput("experiment: eps must lie in (0,1)");
    std::size_t m = 0;
    for (auto& d : inst->prior) m = std::max(m, d.size());
    const auto theory = NonIdealConfig::theorem_L(eps, inst->n(), m);
    if (e.at("L").is_string()) {
      if (e["L"] != "theorem") throw InvalidInput("experiment: L must be an integer or 'theorem'");
      e["L"] = theory;
    }
    e["L_theorem"] = theory;
  } else {
    if (e.at("ell").get<std::size_t>() == 0) throw InvalidInput("experiment: ell must be positive");
  }
  return e;
}

inline ExperimentSpec parse_experiment(const std::string& text, const std::string& source = "experiment") {
  SchemaReader rd(source, text);
  const json& d = rd.doc();
  ExperimentSpec s;
  s.source = source;
  if (!d.is_object()) rd.fail("", "expected an object at top level");
  if (d.contains("version") && rd.unsigned_int(d["version"], "/version") != static_cast<std::uint64_t>(kSchemaVersion))
    rd.fail("/version", "unsupported version");
  s.instance = rd.at(d, "", "instance");
  if (!s.instance.is_string() && !(s.instance.is_object() && s.instance.contains("builtin")))
    rd.fail("/instance", "expected a path or {\"builtin\": name}");
  s.pipeline = rd.string(rd.at(d, "", "pipeline"), "/pipeline");
  try {
    pipeline_params(s.pipeline);
  } catch (const InvalidInput& e) {
    rd.fail("/pipeline", e.what());
  }
  if (d.contains("grid") && d.contains("sweep")) rd.fail("", "use either 'grid' or 'sweep', not both");
  if (d.contains("grid")) {
    const json& g = rd.array(d["grid"], "/grid");
    for (std::size_t k = 0; k < g.size(); ++k) {
      if (!g[k].is_object()) rd.fail("/grid/" + std::to_string(k), "expected an object");
      s.points.push_back(g[k]);
    }
  } else if (d.contains("sweep")) {
    const json& sw = d["sweep"];
    if (!sw.is_object()) rd.fail("/sweep", "expected an object");
    s.points.push_back(json::object());
    for (auto& [k, vals] : sw.items()) {
      rd.array(vals, "/sweep/" + k);
      std::vector<json> next;
      for (auto& p : s.points)
        for (auto& v : vals) {
          json q = p;
          q[k] = v;
          next.push_back(q);
        }
      s.points = std::move(next);
    }
  } else {
    rd.fail("", "missing required key 'grid' or 'sweep'");
  }
  const json& seeds = rd.array(rd.at(d, "", "seeds"), "/seeds");
  for (std::size_t k = 0; k < seeds.size(); ++k) s.seeds.push_back(rd.unsigned_int(seeds[k], "/seeds/" + std::to_string(k)));
  if (d.contains("samples")) {
    s.samples = rd.unsigned_int(d["samples"], "/samples");
    if (s.samples == 0) rd.fail("/samples", "must be at least 1");
  }
  if (d.contains("z")) s.z = rd.number(d["z"], "/z");
  // validate every point before any run
  for (std::size_t k = 0; k < s.points.size(); ++k) {
    try {
      effective_point(s, s.points[k]);
    } catch (const std::exception& e) {
      rd.fail(d.contains("grid") ? "/grid/" + std::to_string(k) : "/sweep", e.what());
    }
  }
  return s;
}

struct ExperimentRow {
  json params;
  double input_revenue = NAN;
  Estimate revenue;
  double max_regret = NAN, regret_z = NAN, min_ir = NAN, ir_z = NAN;
  double queries = NAN;
  bool bic_pass = true, ir_pass = true;
};

struct ExperimentReport {
  std::string csv;
  std::vector<ExperimentRow> rows;
  bool all_pass = true;
};

inline std::string fmt(double x) {
  if (std::isnan(x)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::string fmt_json(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_float()) return fmt(v.get<double>());
  return v.dump();
}

inline ExperimentRow run_point(const ExperimentSpec& s, const json& e, std::uint64_t seed) {
  auto inst = resolve_instance(s.instance, e);
  ExperimentRow row;
  row.params = e;
  const auto& D = inst->report_prior;
  if (inst->mechanism->has_exact()) row.input_revenue = revenue(*inst->mechanism, D, InterimMode::Exact()).mean;
  std::shared_ptr<const Mechanism> mech;
  if (s.pipeline == "dc") {
    auto T = std::make_shared<DownwardClosedTransform>(inst, dc_config(e));
    row.queries = transform_accounting(*T, D, std::min<std::uint64_t>(s.samples, 1000), seed).mean_queries;
    mech = T;
  } else if (s.pipeline == "general") {
    RrsfConfig rc;
    rc.gamma = e["gamma"].get<double>();
    rc.eps = e["eps"].get<double>();
    rc.source = e["mode"] == "exact" ? WeightSource::exact : WeightSource::empirical;
    rc.L = e["L"].get<std::uint64_t>();
    auto b = rrsf_mechanism(inst, rc, Stream(seed).child(0x9e1));
    row.queries = static_cast<double>(b.queries);
    mech = b.mechanism;
  } else if (s.pipeline == "nonideal") {
    std::size_t m = 0;
    for (auto& d : inst->prior) m = std::max(m, d.size());
    auto cfg = NonIdealConfig::from_theorem(e["eps"].get<double>(), inst->n(), m).with_L(e["L"].get<std::uint64_t>());
    mech = std::make_shared<NonIdealMechanism>(inst, cfg, seed);
  } else {
    IdealConfig ic;
    ic.ell = e["ell"].get<std::size_t>();
    ic.eta = e["eta"].get<double>();
    if (s.pipeline == "baseline") mech = perfect_matching_baseline(inst, ic.ell, ic.eta).mechanism;
    else mech = std::make_shared<IdealTransform>(inst, ic);
  }
  const bool exact = mech->has_exact();
  const InterimMode mode = exact ? InterimMode::Exact() : InterimMode::MonteCarlo(s.samples, seed);
  const auto rep = check_eps_bic_ir(*inst, *mech, D, mode);
  row.revenue = revenue(*mech, D, mode);
  row.max_regret = rep.max_regret;
  row.regret_z = rep.max_regret_z;
  row.min_ir = rep.min_ir_slack;
  row.ir_z = rep.min_ir_z;
  const double tol = exact ? 1e-7 : 0.0;
  row.bic_pass = bic_certificate(rep, exact, tol, s.z, seed).pass;
  row.ir_pass = ir_certificate(rep, exact, tol, s.z, seed).pass;
  return row;
}

// One CSV row per (point, seed). Points run in order; Monte Carlo estimates
// inside a point use the worker pool.
inline ExperimentReport run_experiment(const ExperimentSpec& s) {
  ExperimentReport out;
  std::ostringstream csv;
  csv << "# mechkit " << kVersion << " schema " << kSchemaVersion << "\n";
  csv << "# pipeline=" << s.pipeline << " instance=" << (s.instance.is_string() ? s.instance.get<std::string>() : s.instance.dump())
      << " samples=" << s.samples << " z=" << fmt(s.z) << "\n";
  std::vector<json> eff;
  for (auto& p : s.points) eff.push_back(effective_point(s, p));
  std::vector<std::string> cols = pipeline_params(s.pipeline);
  if (s.pipeline == "nonideal") cols.push_back("L_theorem");
  for (auto& e : eff)
    for (auto& [k, v] : e.items())
      if (k.rfind("instance.", 0) == 0 && std::find(cols.begin(), cols.end(), k) == cols.end()) cols.push_back(k);
  csv << "version,pipeline,point,seed";
  for (auto& c : cols) csv << "," << c;
  csv << ",input_revenue,revenue,revenue_se,max_regret,regret_z,min_ir,ir_z,queries,bic_pass,ir_pass\n";
  for (std::size_t k = 0; k < eff.size(); ++k)
    for (auto seed : s.seeds) {
      auto row = run_point(s, eff[k], seed);
      csv << kVersion << "," << s.pipeline << "," << k << "," << seed;
      for (auto& c : cols) csv << "," << (eff[k].contains(c) ? fmt_json(eff[k][c]) : "");
      csv << "," << fmt(row.input_revenue) << "," << fmt(row.revenue.mean) << "," << fmt(row.revenue.stderr_mean) << ","
          << fmt(row.max_regret) << "," << fmt(row.regret_z) << "," << fmt(row.min_ir) << "," << fmt(row.ir_z) << ","
          << fmt(row.queries) << "," << (row.bic_pass ? 1 : 0) << "," << (row.ir_pass ? 1 : 0) << "\n";
      out.all_pass = out.all_pass && row.bic_pass && row.ir_pass;
      out.rows.push_back(std::move(row));
    }
  out.csv = csv.str();
  return out;
}

}  // namespace mechkit
