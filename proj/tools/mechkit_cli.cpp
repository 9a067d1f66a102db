// mechkit command-line front end.
// Exit codes: 0 pass, 1 certificate or regression failure, 2 input error,
// 3 internal error (solver convergence or invariant violation).

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mechkit/mechkit.hpp"

using namespace mechkit;

namespace {

constexpr int kExitPass = 0, kExitFail = 1, kExitInput = 2, kExitInternal = 3;

void write_output(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InvalidInput("cannot open '" + path + "' for writing");
  f << text;
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(tok, &used));
      if (tok.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw InvalidInput("not a number: '" + tok + "'");
    }
  }
  return out;
}

Matrix read_weights_csv(const std::string& path) {
  std::istringstream in(read_file(path));
  Matrix w;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    try {
      w.push_back(parse_list(line));
    } catch (const InvalidInput& e) {
      throw InvalidInput(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return w;
}

struct InstanceArgs {
  std::string config, builtin;
  void add(CLI::App* app) {
    auto* c = app->add_option("--config", config, "instance JSON file");
    auto* b = app->add_option("--builtin", builtin, "builtin instance name");
    c->excludes(b);
  }
  std::shared_ptr<Instance> load() const {
    if (!config.empty()) return std::make_shared<Instance>(load_instance(config));
    if (!builtin.empty()) return instances::builtin(builtin);
    throw InvalidInput("one of --config or --builtin is required");
  }
  std::string label() const { return config.empty() ? "builtin:" + builtin : config; }
};

std::string header_line(const std::vector<std::pair<std::string, std::string>>& kv) {
  std::string s = "# mechkit " + std::string(kVersion);
  for (auto& [k, v] : kv) s += " " + k + "=" + v;
  return s + "\n";
}

ojson plan_to_json(const AssignmentPlan& p, const Instance& inst, std::size_t k) {
  ojson j;
  j["agent"] = k;
  std::vector<std::string> types;
  for (auto t : inst.prior[k].support()) types.push_back(inst.agents[k].label(t));
  j["types"] = types;
  j["q"] = p.q;
  j["lambda"] = p.lambda;
  j["mu"] = p.mu;
  j["pi"] = p.pi;
  j["p_hat"] = p.p_hat;
  j["objective"] = p.objective;
  j["kkt_residual"] = p.kkt_residual;
  j["eps1"] = p.eps1;
  j["eps2"] = p.eps2;
  j["clip_floor"] = p.clip_floor;
  j["clipped_cells"] = p.clipped_cells;
  return j;
}

// ---------------------------------------------------------------------------
int cmd_transform_dc(const InstanceArgs& ia, double eps, TransformConfig cfg, const std::string& backend, std::uint64_t seed,
                     std::uint64_t runs, const std::string& out) {
  if (backend != "race" && backend != "exact_mean") throw InvalidInput("--backend must be race or exact_mean");
  cfg.backend = backend == "race" ? SamplerBackend::race : SamplerBackend::exact_mean;
  auto inst = ia.load();
  DownwardClosedTransform T(inst, cfg);
  const std::size_t n = inst->n();
  std::ostringstream csv;
  csv << header_line({{"command", "transform-dc"},
                      {"instance", ia.label()},
                      {"eps", fmt(eps)},
                      {"eta", fmt(cfg.eta)},
                      {"etap", fmt(cfg.eta_prime)},
                      {"delta", fmt(cfg.delta)},
                      {"ell", std::to_string(cfg.ell)},
                      {"d", std::to_string(cfg.d)},
                      {"backend", backend},
                      {"gamma_samples", std::to_string(cfg.gamma_samples)},
                      {"seed", std::to_string(seed)},
                      {"runs", std::to_string(runs)}});
  for (auto& note : cfg.relaxed_preconditions()) csv << "# relaxed: " << note << "\n";
  csv << "run";
  for (std::size_t i = 0; i < n; ++i) csv << ",report" << i << ",surrogate" << i << ",zero" << i << ",phase1_" << i << ",phase2_" << i;
  csv << ",outcome,revenue,queries\n";
  const Stream base = Stream(seed).child(0xd0);
  std::vector<TypeIndex> b(n);
  for (std::uint64_t r = 0; r < runs; ++r) {
    Stream rng = base.child(r);
    sample_profile(inst->report_prior, n, b, rng);
    const auto run = T.run(b, rng.child(1));
    double rev = 0.0;
    csv << r;
    for (std::size_t i = 0; i < n; ++i) {
      rev += run.payments[i];
      csv << "," << inst->agents[i].label(b[i]) << "," << inst->agents[i].label(run.phase1[i].surrogate) << ","
          << (run.phase1[i].zero ? 1 : 0) << "," << fmt(run.phase1[i].payment) << "," << fmt(run.phase2[i]);
    }
    csv << "," << inst->outcomes.id(run.outcome) << "," << fmt(rev) << "," << run.queries << "\n";
  }
  write_output(out, csv.str());
  return kExitPass;
}

int cmd_transform_general(const InstanceArgs& ia, double eps, double gamma, double eta, std::uint64_t L, const std::string& mode,
                          std::uint64_t seed, const std::string& out, const std::string& plan_out) {
  if (mode != "exact" && mode != "empirical") throw InvalidInput("--mode must be exact or empirical");
  auto inst = ia.load();
  RrsfConfig rc;
  rc.gamma = gamma;
  rc.eps = eps;
  rc.eta = eta;
  rc.L = L;
  rc.source = mode == "exact" ? WeightSource::exact : WeightSource::empirical;
  if (!(gamma > 0.0)) throw InvalidInput("--gamma must be positive");
  if (rc.source == WeightSource::empirical && L == 0) throw InvalidInput("--L must be at least 1 in empirical mode");
  auto build = rrsf_mechanism(inst, rc, Stream(seed).child(0x9e1));
  const auto& mech = *build.mechanism;
  std::ostringstream csv;
  csv << header_line({{"command", "transform-general"},
                      {"instance", ia.label()},
                      {"eps", fmt(eps)},
                      {"gamma", fmt(gamma)},
                      {"eta", fmt(eta)},
                      {"L", std::to_string(L)},
                      {"mode", mode},
                      {"seed", std::to_string(seed)}});
  csv << "agent,type,mass,p_hat,interim_utility\n";
  const bool exact = mech.has_exact();
  const InterimMode im = exact ? InterimMode::Exact() : InterimMode::MonteCarlo(100'000, seed);
  const auto rep = check_eps_bic_ir(*inst, mech, inst->prior, im);
  ojson plans = ojson::array();
  for (std::size_t k = 0; k < inst->n(); ++k) {
    const auto& plan = mech.plans()[k];
    const auto& sup = inst->prior[k].support();
    for (std::size_t a = 0; a < sup.size(); ++a)
      csv << k << "," << inst->agents[k].label(sup[a]) << "," << fmt(inst->prior[k].mass(a)) << "," << fmt(plan.p_hat[a]) << ","
          << fmt(rep.utility[k][sup[a]][sup[a]]) << "\n";
    plans.push_back(plan_to_json(plan, *inst, k));
  }
  const auto rev_in = inst->mechanism->has_exact() ? revenue(*inst->mechanism, inst->prior, InterimMode::Exact()).mean : NAN;
  const auto rev_out = revenue(mech, inst->prior, im).mean;
  csv << "# revenue_input=" << fmt(rev_in) << " revenue_output=" << fmt(rev_out) << " max_regret=" << fmt(rep.max_regret)
      << " min_ir=" << fmt(rep.min_ir_slack) << " queries=" << build.queries << "\n";
  write_output(out, csv.str());
  if (!plan_out.empty()) {
    ojson doc;
    doc["version"] = kVersion;
    doc["gamma"] = gamma;
    doc["mode"] = mode;
    doc["plans"] = plans;
    write_output(plan_out, doc.dump(2) + "\n");
  }
  const double tol = exact ? 1e-7 : 0.0;
  const bool ok = bic_certificate(rep, exact, tol, 3.09, seed).pass && ir_certificate(rep, exact, tol, 3.09, seed).pass;
  return ok ? kExitPass : kExitFail;
}

int cmd_verify(const InstanceArgs& ia, const std::string& which, const std::string& mode, std::uint64_t samples, std::uint64_t seed,
               double tol, double z, double min_revenue, const std::string& out) {
  if (which != "bic" && which != "ir" && which != "revenue") throw InvalidInput("--which must be bic, ir or revenue");
  if (mode != "exact" && mode != "mc") throw InvalidInput("--mode must be exact or mc");
  if (mode == "mc" && samples == 0) throw InvalidInput("--samples must be positive in mc mode");
  auto inst = ia.load();
  const bool exact = mode == "exact";
  const InterimMode im = exact ? InterimMode::Exact() : InterimMode::MonteCarlo(samples, seed);
  Certificate c;
  if (which == "revenue") {
    const auto r = revenue(*inst->mechanism, inst->report_prior, im);
    c.property = "revenue";
    c.mode = exact ? Certificate::Mode::exact : Certificate::Mode::statistical;
    c.value = r.mean;
    c.tolerance = min_revenue;
    c.standard_error = r.stderr_mean;
    c.samples = exact ? 0 : samples;
    c.seed = seed;
    c.pass = std::isnan(min_revenue) || (exact ? r.mean >= min_revenue : r.mean + z * r.stderr_mean >= min_revenue);
    if (std::isnan(min_revenue)) c.notes.push_back("no revenue threshold given");
  } else {
    const auto rep = check_eps_bic_ir(*inst, *inst->mechanism, inst->report_prior, im);
    c = which == "bic" ? bic_certificate(rep, exact, tol, z, seed) : ir_certificate(rep, exact, tol, z, seed);
  }
  c.notes.push_back("instance " + ia.label());
  write_output(out, c.to_json().dump(2) + "\n");
  return c.pass ? kExitPass : kExitFail;
}

int cmd_match_demo(const std::string& weights, MatchParams p, const std::string& variant, const std::string& backend,
                   std::uint64_t seed, std::uint64_t runs, const std::string& out) {
  if (variant != "nonnegative" && variant != "arbitrary") throw InvalidInput("--variant must be nonnegative or arbitrary");
  if (backend != "race" && backend != "exact_mean") throw InvalidInput("--backend must be race or exact_mean");
  if (runs == 0) throw InvalidInput("--runs must be positive");
  const Matrix w = read_weights_csv(weights);
  const auto v = variant == "arbitrary" ? MatchVariant::arbitrary : MatchVariant::nonnegative;
  const auto be = backend == "race" ? SamplerBackend::race : SamplerBackend::exact_mean;
  p.validate();
  check_shape(w, p);
  const std::size_t J = p.lhs();
  std::vector<std::vector<std::uint64_t>> hit(J, std::vector<std::uint64_t>(p.ell, 0)), zero = hit;
  std::ostringstream csv;
  csv << header_line({{"command", "match-demo"},
                      {"weights", weights},
                      {"ell", std::to_string(p.ell)},
                      {"d", std::to_string(p.d)},
                      {"delta", fmt(p.delta)},
                      {"etap", fmt(p.eta_prime)},
                      {"gamma", fmt(p.gamma)},
                      {"variant", variant},
                      {"backend", backend},
                      {"seed", std::to_string(seed)},
                      {"runs", std::to_string(runs)}});
  csv << "# transcript of run 0\nlhs,rhs,zero,weight";
  for (std::size_t k = 0; k < p.ell; ++k) csv << ",x" << k;
  for (std::size_t k = 0; k < p.ell; ++k) csv << ",y" << k;
  csv << "\n";
  const Stream base = Stream(seed).child(0xa1);
  GibbsTelemetry tel;
  double matched = 0.0;
  for (std::uint64_t r = 0; r < runs; ++r) {
    Stream rng = base.child(r);
    const auto tr = run_online(MatrixGrid{&w}, p, v, be, rng);
    tel += tr.telemetry;
    matched += tr.matched_weight(w);
    for (std::size_t j = 0; j < J; ++j) ++(tr.steps[j].zero ? zero : hit)[j][tr.steps[j].rhs];
    if (r == 0)
      for (std::size_t j = 0; j < J; ++j) {
        const auto& s = tr.steps[j];
        csv << j << "," << s.rhs << "," << (s.zero ? 1 : 0) << "," << fmt(w[j][s.rhs]);
        for (double x : s.x) csv << "," << fmt(x);
        for (double y : s.y) csv << "," << fmt(y);
        csv << "\n";
      }
  }
  csv << "# per-node frequencies over all runs\nlhs,rhs,matched,zero\n";
  const double R = static_cast<double>(runs);
  for (std::size_t j = 0; j < J; ++j)
    for (std::size_t k = 0; k < p.ell; ++k)
      csv << j << "," << k << "," << fmt(static_cast<double>(hit[j][k]) / R) << "," << fmt(static_cast<double>(zero[j][k]) / R) << "\n";
  csv << "# mean_matched_weight=" << fmt(matched / R) << " flips_per_run=" << fmt(static_cast<double>(tel.flips) / R)
      << " proposals_per_run=" << fmt(static_cast<double>(tel.proposals) / R) << "\n";
  write_output(out, csv.str());
  return kExitPass;
}

int cmd_race_bench(std::size_t m, double delta, double h, const std::string& means_s, const std::string& offsets_s,
                   const std::string& backend, std::uint64_t samples, std::uint64_t seed, const std::string& out) {
  if (backend != "race" && backend != "exact_mean") throw InvalidInput("--backend must be race or exact_mean");
  if (samples == 0) throw InvalidInput("--samples must be positive");
  GibbsRequest req;
  const auto means = parse_list(means_s);
  if (means.size() != m) throw InvalidInput("--means must list exactly m values");
  const auto offsets = offsets_s.empty() ? std::vector<double>(m, 0.0) : parse_list(offsets_s);
  if (offsets.size() != m) throw InvalidInput("--offsets must list exactly m values");
  for (double mu : means) {
    if (!(mu >= -1.0 && mu <= 1.0)) throw InvalidInput("--means must lie in [-1,1]");
    req.candidates.push_back(CoinSource::two_point(-1.0, 1.0, mu));
  }
  req.offsets = offsets;
  req.h = h;
  req.delta = delta;
  req.validate();
  const auto be = backend == "race" ? SamplerBackend::race : SamplerBackend::exact_mean;
  const auto probs = gibbs_probabilities(req);
  std::vector<std::uint64_t> counts(m, 0);
  GibbsTelemetry tel;
  const Stream base = Stream(seed).child(0xbe);
  for (std::uint64_t s = 0; s < samples; ++s) {
    Stream rng = base.child(s);
    const auto g = gibbs_sample(req, be, rng);
    ++counts[g.index];
    tel += g.telemetry;
  }
  const auto gof = chi_square_gof(counts, probs);
  std::ostringstream csv;
  csv << header_line({{"command", "race-bench"},
                      {"m", std::to_string(m)},
                      {"delta", fmt(delta)},
                      {"h", fmt(h)},
                      {"backend", backend},
                      {"samples", std::to_string(samples)},
                      {"seed", std::to_string(seed)}});
  csv << "index,mean,offset,softmax,frequency,count\n";
  for (std::size_t k = 0; k < m; ++k)
    csv << k << "," << fmt(means[k]) << "," << fmt(offsets[k]) << "," << fmt(probs[k]) << ","
        << fmt(static_cast<double>(counts[k]) / static_cast<double>(samples)) << "," << counts[k] << "\n";
  const double S = static_cast<double>(samples);
  csv << "# flips_per_draw=" << fmt(static_cast<double>(tel.flips) / S) << " proposals_per_draw="
      << fmt(static_cast<double>(tel.proposals) / S) << " uniforms_per_draw=" << fmt(static_cast<double>(tel.uniforms) / S)
      << " expected_proposals=" << fmt(race_expected_proposals(means, offsets, h, delta)) << " chi2=" << fmt(gof.statistic)
      << " p_value=" << fmt(gof.p_value) << "\n";
  write_output(out, csv.str());
  return kExitPass;
}

int cmd_examples(const std::string& which, std::uint64_t runs, std::uint64_t seed, const std::string& out) {
  std::ostringstream s;
  bool ok = true;
  auto line = [&](const std::string& k, double v) { s << k << "=" << fmt(v) << "\n"; };
  s << "# mechkit " << kVersion << " example " << which << " runs=" << runs << " seed=" << seed << "\n";
  if (which == "ex1") {
    scenarios::Ex1Config c;
    c.runs = runs;
    c.seed = seed;
    const auto r = scenarios::run_ex1(c);
    line("rev_input", r.rev_input);
    line("rev_formula", r.rev_formula);
    line("baseline_exact", r.baseline_exact);
    line("baseline_mc", r.baseline_mc.mean);
    line("baseline_mc_se", r.baseline_mc.stderr_mean);
    line("baseline_bound", r.baseline_bound);
    line("baseline_subsidy", r.baseline_subsidy);
    line("transformed", r.transformed.mean);
    line("transformed_se", r.transformed.stderr_mean);
    ok = std::abs(r.rev_input - r.rev_formula) < 1e-12 &&
         r.baseline_mc.mean <= r.baseline_bound + 3.0 * r.baseline_mc.stderr_mean &&
         r.transformed.mean - r.baseline_mc.mean >= 0.5;
  } else if (which == "ex2") {
    scenarios::Ex2Config c;
    c.runs = runs;
    c.seed = seed;
    const auto r = scenarios::run_ex2(c);
    s << "race_F1=" << r.race1[0] << "/" << r.race1[1] << "\nrace_F2=" << r.race2[0] << "/" << r.race2[1] << "\n";
    s << "naive_F1=" << r.naive1[0] << "/" << r.naive1[1] << "\nnaive_F2=" << r.naive2[0] << "/" << r.naive2[1] << "\n";
    line("race_p", r.race_test.p_value);
    line("naive_p", r.naive_test.p_value);
    line("match_probability", r.match_probability);
    ok = r.race_test.p_value > 1e-3 && r.naive_test.p_value < 1e-6;
  } else if (which == "ex3") {
    const double gamma = 0.05;
    const auto r = scenarios::run_ex3(0.1, gamma);
    line("payment_tL", r.payments[0]);
    line("payment_tH", r.payments[1]);
    line("floor", r.floor);
    line("pathological_tL", r.pathological[0]);
    line("pathological_tH", r.pathological[1]);
    line("pathological_kkt", r.pathological_kkt);
    line("rev_input", r.rev_input);
    line("rev_clipped", r.rev_clipped);
    line("rev_pathological", r.rev_pathological);
    ok = r.payments[0] >= -5 * gamma - 1e-7 && r.payments[1] >= -5 * gamma - 1e-7 && r.pathological_kkt < 1e-9;
  } else {
    throw InvalidInput("examples: expected ex1, ex2 or ex3");
  }
  s << "pass=" << (ok ? 1 : 0) << "\n";
  write_output(out, s.str());
  return ok ? kExitPass : kExitFail;
}

int cmd_experiment(const std::string& spec_path, const std::string& out) {
  const auto spec = parse_experiment(read_file(spec_path), spec_path);
  const auto rep = run_experiment(spec);
  write_output(out, rep.csv);
  return rep.all_pass ? kExitPass : kExitFail;
}

int cmd_instance(const std::string& name, bool list, const std::string& out) {
  if (list) {
    for (auto& n : instances::builtin_names()) std::cout << n << "\n";
    return kExitPass;
  }
  if (name.empty()) throw InvalidInput("instance: --builtin or --list required");
  write_output(out, instance_to_json(*instances::builtin(name), name).dump(2) + "\n");
  return kExitPass;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mechkit: BIC transformations of approximately incentive compatible mechanisms"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  register_builtin_plugins();

  // transform
  auto* transform = app.add_subcommand("transform", "transform a mechanism");
  transform->require_subcommand(1);

  InstanceArgs dc_ia;
  TransformConfig dc_cfg;
  double dc_eps = 0.0;
  std::string dc_backend = "exact_mean", dc_out;
  std::uint64_t dc_seed = 0, dc_runs = 1000;
  auto* dc = transform->add_subcommand("dc", "replica-surrogate transform (downward-closed outcomes)");
  dc_ia.add(dc);
  dc->add_option("--eps", dc_eps, "BIC level of the input mechanism (recorded)");
  dc->add_option("--eta", dc_cfg.eta, "payment scaling")->capture_default_str();
  dc->add_option("--etap", dc_cfg.eta_prime, "load-balancing rate")->capture_default_str();
  dc->add_option("--delta", dc_cfg.delta, "temperature")->capture_default_str();
  dc->add_option("--ell", dc_cfg.ell, "RHS nodes")->capture_default_str();
  dc->add_option("--d", dc_cfg.d, "RHS capacity")->capture_default_str();
  dc->add_option("--gamma-samples", dc_cfg.gamma_samples, "samples per edge for gamma")->capture_default_str();
  dc->add_flag("--strict", dc_cfg.strict, "reject relaxed preconditions");
  dc->add_option("--backend", dc_backend, "race | exact_mean")->capture_default_str();
  dc->add_option("--seed", dc_seed)->capture_default_str();
  dc->add_option("--runs", dc_runs)->capture_default_str();
  dc->add_option("--out", dc_out, "CSV output (default stdout)");

  InstanceArgs g_ia;
  double g_eps = 0.0, g_gamma = 0.05, g_eta = 0.0;
  std::uint64_t g_L = 0, g_seed = 0;
  std::string g_mode = "exact", g_out, g_plan;
  auto* gen = transform->add_subcommand("general", "regularized assignment transform (general outcomes)");
  g_ia.add(gen);
  gen->add_option("--eps", g_eps, "BIC level of the input mechanism")->capture_default_str();
  gen->add_option("--gamma", g_gamma, "regularization")->capture_default_str();
  gen->add_option("--eta", g_eta, "estimation slack (empirical mode)")->capture_default_str();
  gen->add_option("--L", g_L, "samples per weight (empirical mode)")->capture_default_str();
  gen->add_option("--mode", g_mode, "exact | empirical")->capture_default_str();
  gen->add_option("--seed", g_seed)->capture_default_str();
  gen->add_option("--out", g_out, "CSV output (default stdout)");
  gen->add_option("--plan", g_plan, "JSON dump of the assignment plans");

  InstanceArgs v_ia;
  std::string v_which = "bic", v_mode = "exact", v_out;
  std::uint64_t v_samples = 100'000, v_seed = 0;
  double v_tol = 1e-7, v_z = 3.09, v_min_rev = NAN;
  auto* verify = app.add_subcommand("verify", "certify BIC, IR or revenue of an instance's mechanism");
  v_ia.add(verify);
  verify->add_option("--which", v_which, "bic | ir | revenue")->capture_default_str();
  verify->add_option("--mode", v_mode, "exact | mc")->capture_default_str();
  verify->add_option("--samples", v_samples)->capture_default_str();
  verify->add_option("--seed", v_seed)->capture_default_str();
  verify->add_option("--tol", v_tol, "exact tolerance")->capture_default_str();
  verify->add_option("--z", v_z, "standard errors allowed in mc mode")->capture_default_str();
  verify->add_option("--min-revenue", v_min_rev, "revenue threshold");
  verify->add_option("--out", v_out, "certificate JSON (default stdout)");

  auto* match = app.add_subcommand("match", "online matching");
  match->require_subcommand(1);
  std::string m_weights, m_variant = "arbitrary", m_backend = "exact_mean", m_out;
  MatchParams m_p;
  std::uint64_t m_seed = 0, m_runs = 1000;
  auto* demo = match->add_subcommand("demo", "run the online matching on a weight matrix");
  demo->add_option("--weights", m_weights, "CSV with d*ell rows and ell columns")->required();
  demo->add_option("--ell", m_p.ell)->capture_default_str();
  demo->add_option("--d", m_p.d)->capture_default_str();
  demo->add_option("--delta", m_p.delta)->capture_default_str();
  demo->add_option("--etap", m_p.eta_prime)->capture_default_str();
  demo->add_option("--gamma", m_p.gamma)->capture_default_str();
  demo->add_option("--variant", m_variant, "nonnegative | arbitrary")->capture_default_str();
  demo->add_option("--backend", m_backend, "race | exact_mean")->capture_default_str();
  demo->add_option("--seed", m_seed)->capture_default_str();
  demo->add_option("--runs", m_runs)->capture_default_str();
  demo->add_option("--out", m_out);

  auto* race = app.add_subcommand("race", "Gibbs sampling from coins");
  race->require_subcommand(1);
  std::size_t r_m = 0;
  double r_delta = 1.0, r_h = 0.0;
  std::string r_means, r_offsets, r_backend = "race", r_out;
  std::uint64_t r_samples = 10'000, r_seed = 0;
  auto* bench = race->add_subcommand("bench", "sample and compare with the closed-form softmax");
  bench->set_help_flag("--help", "print this help message and exit");
  bench->add_option("--m", r_m)->required();
  bench->add_option("--delta", r_delta)->capture_default_str();
  bench->add_option("--h", r_h)->capture_default_str();
  bench->add_option("--means", r_means, "comma-separated means in [-1,1]")->required();
  bench->add_option("--offsets", r_offsets, "comma-separated offsets in [0,h]");
  bench->add_option("--backend", r_backend)->capture_default_str();
  bench->add_option("--samples", r_samples)->capture_default_str();
  bench->add_option("--seed", r_seed)->capture_default_str();
  bench->add_option("--out", r_out);

  auto* examples = app.add_subcommand("examples", "regression scenarios");
  std::string e_which, e_out;
  std::uint64_t e_runs = 100'000, e_seed = 1;
  examples->add_option("which", e_which, "ex1 | ex2 | ex3")->required();
  examples->add_option("--runs", e_runs)->capture_default_str();
  examples->add_option("--seed", e_seed)->capture_default_str();
  examples->add_option("--out", e_out);

  auto* experiment = app.add_subcommand("experiment", "run a parameter sweep");
  std::string x_spec, x_out;
  experiment->add_option("--spec", x_spec, "experiment JSON")->required();
  experiment->add_option("--out", x_out, "CSV output (default stdout)");

  auto* instance = app.add_subcommand("instance", "export builtin instances as JSON");
  std::string i_name, i_out;
  bool i_list = false;
  instance->add_option("--builtin", i_name);
  instance->add_flag("--list", i_list);
  instance->add_option("--out", i_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitPass : kExitInput;
  }

  try {
    if (*dc) return cmd_transform_dc(dc_ia, dc_eps, dc_cfg, dc_backend, dc_seed, dc_runs, dc_out);
    if (*gen) return cmd_transform_general(g_ia, g_eps, g_gamma, g_eta, g_L, g_mode, g_seed, g_out, g_plan);
    if (*verify) return cmd_verify(v_ia, v_which, v_mode, v_samples, v_seed, v_tol, v_z, v_min_rev, v_out);
    if (*demo) return cmd_match_demo(m_weights, m_p, m_variant, m_backend, m_seed, m_runs, m_out);
    if (*bench) return cmd_race_bench(r_m, r_delta, r_h, r_means, r_offsets, r_backend, r_samples, r_seed, r_out);
    if (*examples) return cmd_examples(e_which, e_runs, e_seed, e_out);
    if (*experiment) return cmd_experiment(x_spec, x_out);
    if (*instance) return cmd_instance(i_name, i_list, i_out);
  } catch (const InvalidInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const UnsupportedMode& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitInput;
}
