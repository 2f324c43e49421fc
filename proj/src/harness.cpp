#include "thermoconv/harness.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "thermoconv/criteria.hpp"
#include "thermoconv/errors.hpp"
#include "thermoconv/models.hpp"

namespace thermoconv {

namespace {

[[noreturn]] void bad(const std::string& path, const std::string& what) { throw ConfigError(path + ": " + what); }

double num_at(const json& j, const std::string& path) {
  if (!j.is_number()) bad(path, "expected a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) bad(path, "expected a finite number");
  return v;
}

double get_num(const json& obj, const std::string& key, double def, const std::string& base = "") {
  if (!obj.contains(key)) return def;
  return num_at(obj.at(key), base + key);
}

int get_int(const json& obj, const std::string& key, int def, const std::string& base = "") {
  if (!obj.contains(key)) return def;
  const json& v = obj.at(key);
  if (!v.is_number_integer()) bad(base + key, "expected an integer");
  return v.get<int>();
}

bool get_bool(const json& obj, const std::string& key, bool def) {
  if (!obj.contains(key)) return def;
  if (!obj.at(key).is_boolean()) bad(key, "expected a boolean");
  return obj.at(key).get<bool>();
}

std::string get_str(const json& obj, const std::string& key, const std::string& def, const std::string& base = "") {
  if (!obj.contains(key)) return def;
  if (!obj.at(key).is_string()) bad(base + key, "expected a string");
  return obj.at(key).get<std::string>();
}

std::vector<double> num_list(const json& j, const std::string& path) {
  if (!j.is_array() || j.empty()) bad(path, "expected a nonempty array of numbers");
  std::vector<double> v;
  for (std::size_t i = 0; i < j.size(); ++i) v.push_back(num_at(j[i], path + "[" + std::to_string(i) + "]"));
  return v;
}

std::string fmt(double x) {
  char b[64];
  std::snprintf(b, sizeof b, "%.17g", x);
  return b;
}

json to_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

json to_json(const Estimate& e) { return {{"mean", e.mean}, {"se", e.se}}; }

json to_json(const CdVerdict& v) {
  json j{{"kappa", v.kappa},
         {"satisfied", v.satisfied},
         {"worst_eigenvalue", v.worst_eigenvalue},
         {"grid_size", v.grid_size}};
  j["worst_point"] = v.worst_point ? to_json(*v.worst_point) : json(nullptr);
  return j;
}

std::string model_type(const ExperimentConfig& cfg) {
  if (!cfg.model.is_object()) bad("model", "expected an object");
  return get_str(cfg.model, "type", "", "model.");
}

// OU diffusion built straight from B, so unstable B (allowed in criteria
// audits) can still be simulated; the exact transition handles both cases.
DiffusionModel ou_block_diffusion(const BlockMatrix& b, double eps) {
  const Mat ie = ieps_matrix(b.dx, b.dy, eps);
  LinearOu lo{ie * b.B, ie, Mat(), Mat::Zero(b.dim(), b.dim()), eps};
  DiffusionModel d = linear_diffusion(lo, b.dx, eps, true);
  d.gamma = nullptr;
  return d;
}

DiffusionModel double_well_diffusion() {
  DiffusionModel d;
  d.dim = 1;
  d.noise_dim = 1;
  d.drift = [](const Vec& z, Vec& out) {
    out.resize(1);
    out(0) = -(z(0) * z(0) * z(0) - z(0));
  };
  d.constant_noise = std::sqrt(2.0) * Mat::Identity(1, 1);
  d.A = [](const Vec&, Mat& out) { out.setIdentity(1, 1); };
  return d;
}

std::vector<Vec> grid_from(const json& raw, int dim, double lo_def, double hi_def, int per_dim_def) {
  Vec lo = Vec::Constant(dim, lo_def), hi = Vec::Constant(dim, hi_def);
  int per_dim = per_dim_def;
  if (raw.contains("grid")) {
    const json& g = raw.at("grid");
    if (!g.is_object()) bad("grid", "expected an object {lo, hi, per_dim}");
    if (g.contains("lo")) lo = json_vector(g.at("lo"), "grid.lo");
    if (g.contains("hi")) hi = json_vector(g.at("hi"), "grid.hi");
    per_dim = get_int(g, "per_dim", per_dim, "grid.");
    if (lo.size() != dim || hi.size() != dim) bad("grid", "lo/hi dimension must match the model");
  }
  return box_grid(lo, hi, per_dim);
}

GaussianState rho0_from(const ExperimentConfig& cfg, const BlockMatrix& b, std::vector<std::string>& warnings) {
  GaussianState g = default_rho0(b, cfg.eps_grid, &warnings);
  if (cfg.model.contains("m0")) g.mean = json_vector(cfg.model.at("m0"), "model.m0");
  if (cfg.model.contains("S0")) g.cov = json_matrix(cfg.model.at("S0"), "model.S0");
  if (g.mean.size() != b.dim()) bad("model.m0", "dimension must equal dx+dy");
  if (g.cov.rows() != b.dim() || g.cov.cols() != b.dim()) bad("model.S0", "dimension must equal dx+dy");
  return g;
}

double default_rate(const BlockMatrix& b, std::vector<std::string>& warnings) {
  try {
    return -ou_cd_rho(b);
  } catch (const FastBlockNotPD& e) {
    warnings.push_back(std::string(e.what()) + "; using kappa = 0");
    return 0.0;
  }
}

// ---------------------------------------------------------------------------

RunResult run_ou_sweep(const ExperimentConfig& cfg) {
  const BlockMatrix b = json_block_matrix(cfg.model, "model");
  std::vector<std::string> warnings;
  const GaussianState rho0 = rho0_from(cfg, b, warnings);
  const double kappa = cfg.raw.contains("kappa") ? num_at(cfg.raw.at("kappa"), "kappa") : default_rate(b, warnings);
  SweepTolerances st;
  st.gap_tol = cfg.tol.gap_tol;
  st.slope_lo = cfg.tol.slope_lo;
  st.slope_hi = cfg.tol.slope_hi;
  SweepResult r = ou_sweep(b, rho0, cfg.times, cfg.eps_grid, kappa, st);
  r.warnings.insert(r.warnings.begin(), warnings.begin(), warnings.end());

  RunResult out;
  out.csv = sweep_csv(r);
  json per_t = json::array();
  const auto rate = [&](const RateFit& f) {
    return json{{"slope", f.slope}, {"residual", f.residual}, {"in_band", f.slope >= st.slope_lo && f.slope <= st.slope_hi}};
  };
  for (const auto& s : r.per_t) {
    per_t.push_back({{"t", s.t},
                     {"level1", s.verdicts.level1},
                     {"level2", s.verdicts.level2},
                     {"level3", s.verdicts.level3},
                     {"level4", s.verdicts.level4},
                     {"rates", {{"F", rate(s.rate_F)}, {"I", rate(s.rate_I)}, {"shk", rate(s.rate_hk)}, {"R", rate(s.rate_R)}}},
                     {"raw_final", {{"dF", s.dF_final}, {"dI", s.dI_final}, {"dshk", s.dhk_final}, {"R", s.R_final}}},
                     {"extrapolated",
                      {{"dF", s.dF_limit},
                       {"dI", s.dI_limit},
                       {"dshk", s.dhk_limit},
                       {"dstot", s.dtot_limit},
                       {"R", s.R_limit},
                       {"min_tail_dshk", s.min_tail_dhk},
                       {"min_tail_dstot", s.min_tail_dtot}}}});
  }
  out.verdicts = {{"level1", r.verdicts.level1},
                  {"level2", r.verdicts.level2},
                  {"level3", r.verdicts.level3},
                  {"level4", r.verdicts.level4},
                  {"level3ss", r.level3ss},
                  {"monotone_weight", r.monotone_weight_ok}};
  out.report["per_t"] = per_t;
  out.report["kappa"] = kappa;
  out.report["steady_state"] = {{"shk_ss_eps", r.shk_ss_eps}, {"shk_ss_bar", r.shk_ss_bar}, {"shk_ss_limit", r.shk_ss_limit}};
  out.report["warnings"] = r.warnings;
  out.report["verdict_rule"] =
      "levels use Richardson (eps->0) extrapolation from the two smallest eps against gap_tol; "
      "monotone decrease is checked on the 4 smallest eps; level3 uses the min over tail-pair extrapolations";
  return out;
}

RunResult run_cd_check(const ExperimentConfig& cfg) {
  const std::string type = model_type(cfg);
  RunResult out;
  std::ostringstream csv;
  csv << "label,kappa,satisfied,worst_eigenvalue,worst_point,grid_size\n";
  json results = json::array();
  bool all = true;
  const auto emit = [&](const std::string& label, const CdVerdict& v) {
    std::string pt;
    if (v.worst_point)
      for (Eigen::Index i = 0; i < v.worst_point->size(); ++i) pt += (i ? ";" : "") + fmt((*v.worst_point)(i));
    csv << label << ',' << fmt(v.kappa) << ',' << int(v.satisfied) << ',' << fmt(v.worst_eigenvalue) << ',' << pt << ','
        << v.grid_size << "\n";
    json j = to_json(v);
    j["label"] = label;
    results.push_back(j);
    all = all && v.satisfied;
  };
  if (type == "double-well") {
    const double kappa = get_num(cfg.raw, "kappa", 0.0);
    const auto grid = grid_from(cfg.raw, 1, -2.0, 2.0, 401);
    const CdVerdict v = cd_constant_diffusion([](const Vec& z) { return Mat::Constant(1, 1, 3 * z(0) * z(0) - 1); },
                                              [](const Vec&) { return Mat::Zero(1, 1); }, Mat::Identity(1, 1), grid,
                                              kappa);
    emit("double-well", v);
  } else if (type == "ou") {
    const BlockMatrix b = json_block_matrix(cfg.model, "model");
    std::vector<std::string> warnings;
    const std::string crit = get_str(cfg.raw, "criterion", "constant");
    const auto grid = grid_from(cfg.raw, b.dim(), -1.0, 1.0, 5);
    if (crit == "schur") {
      Mat a1 = Mat::Identity(b.dx, b.dx), a2 = Mat::Identity(b.dy, b.dy);
      if (cfg.model.contains("a1")) a1 = json_matrix(cfg.model.at("a1"), "model.a1");
      if (cfg.model.contains("a2")) a2 = json_matrix(cfg.model.at("a2"), "model.a2");
      const Mat B = b.B;
      const auto r = cd_schur_averaging([B](const Vec&) { return Mat(-B); }, a1, a2, grid);
      emit("schur", r.verdict);
      out.report["schur_min_eigenvalue"] = r.min_schur_eigenvalue;
    } else if (crit == "constant") {
      const double kappa = cfg.raw.contains("kappa") ? num_at(cfg.raw.at("kappa"), "kappa") : default_rate(b, warnings);
      for (double e : cfg.eps_grid) {
        const OuEps o = build_ou(b, e);
        const Mat sinv = o.Sigma.inverse(), k = o.K, ainv = o.Ieps.inverse();
        emit("eps=" + fmt(e), cd_constant_diffusion([sinv](const Vec&) { return sinv; }, [k](const Vec&) { return k; },
                                                    ainv, grid, kappa));
      }
    } else {
      bad("criterion", "expected \"constant\" or \"schur\"");
    }
    out.report["warnings"] = warnings;
  } else {
    bad("model.type", "cd-check supports \"double-well\" and \"ou\"");
  }
  out.csv = csv.str();
  out.report["results"] = results;
  out.report["grid_note"] = "verdicts certify the listed grid only";
  out.verdicts["cd"] = all;
  return out;
}

RunResult run_sync(const ExperimentConfig& cfg) {
  const std::string type = model_type(cfg);
  const double horizon = get_num(cfg.raw, "horizon", 2.0);
  const int n_reps = get_int(cfg.raw, "n_reps", cfg.n_paths);
  const int n_grid = get_int(cfg.raw, "n_grid", 20);
  std::vector<std::string> warnings;
  std::vector<std::pair<std::string, DiffusionModel>> models;
  double rate = 0.0;
  int dim = 0;
  if (type == "ou") {
    const BlockMatrix b = json_block_matrix(cfg.model, "model");
    rate = cfg.raw.contains("rate") ? num_at(cfg.raw.at("rate"), "rate") : default_rate(b, warnings);
    for (double e : cfg.eps_grid) models.emplace_back("eps=" + fmt(e), ou_block_diffusion(b, e));
    dim = b.dim();
  } else if (type == "double-well") {
    rate = get_num(cfg.raw, "rate", 1.0);
    models.emplace_back("double-well", double_well_diffusion());
    dim = 1;
  } else {
    bad("model.type", "sync-couple supports \"ou\" and \"double-well\"");
  }
  std::vector<std::pair<Vec, Vec>> pairs;
  if (cfg.raw.contains("pairs")) {
    const json& p = cfg.raw.at("pairs");
    if (!p.is_array() || p.empty()) bad("pairs", "expected a nonempty array of [z1, z2]");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const std::string path = "pairs[" + std::to_string(i) + "]";
      if (!p[i].is_array() || p[i].size() != 2) bad(path, "expected [z1, z2]");
      Vec a = json_vector(p[i][0], path + "[0]"), c = json_vector(p[i][1], path + "[1]");
      if (a.size() != dim || c.size() != dim) bad(path, "state dimension mismatch");
      pairs.emplace_back(a, c);
    }
  } else {
    for (int i = 0; i < dim; ++i) pairs.emplace_back(Vec::Unit(dim, i), Vec::Zero(dim));
    pairs.emplace_back(Vec::Ones(dim), -Vec::Ones(dim));
  }
  RunResult out;
  std::ostringstream csv;
  csv << "label,pair,t,energy_mean,energy_se,bound\n";
  json res = json::array();
  bool all = true;
  double worst = 0.0;
  for (const auto& [label, m] : models) {
    const SyncReport r = sync_contraction_test(m, pairs, horizon, rate, n_reps, cfg.seed, cfg.dt, n_grid);
    for (std::size_t p = 0; p < r.pairs.size(); ++p) {
      const auto& pr = r.pairs[p];
      for (std::size_t k = 0; k < pr.times.size(); ++k)
        csv << label << ',' << p << ',' << fmt(pr.times[k]) << ',' << fmt(pr.energy[k].mean) << ','
            << fmt(pr.energy[k].se) << ',' << fmt(pr.bound[k]) << "\n";
    }
    res.push_back({{"label", label}, {"max_ratio", r.max_ratio}, {"pass", r.pass}});
    all = all && r.pass;
    worst = std::max(worst, r.max_ratio);
  }
  out.csv = csv.str();
  out.report["results"] = res;
  out.report["rate"] = rate;
  out.report["max_ratio"] = worst;
  out.report["warnings"] = warnings;
  out.report["bound"] = "E[(z1-z2)^T A^{-1} (z1-z2)](t) <= exp(2 rate t) E_0 (1 + 3 SE/mean)";
  out.verdicts["sync"] = all;
  return out;
}

RunResult run_ikb(const ExperimentConfig& cfg) {
  IkbInputs in;
  std::map<std::string, double*> fields = {
      {"lambda1", &in.lambda1},   {"Lambda1", &in.Lambda1},   {"lambda2", &in.lambda2}, {"Lambda2", &in.Lambda2},
      {"L_b1x", &in.L_b1x},       {"L_b1y", &in.L_b1y},       {"L_b2x", &in.L_b2x},     {"L_b2y", &in.L_b2y},
      {"L_eta1x", &in.L_eta1x},   {"L_eta1y", &in.L_eta1y},   {"L_eta2y", &in.L_eta2y}, {"L_B1x", &in.L_B1x},
      {"L_B1y", &in.L_B1y},       {"L_B2y", &in.L_B2y},       {"H1_inf", &in.H1_inf},   {"H2_inf", &in.H2_inf},
      {"sup_LfB1", &in.sup_LfB1}, {"sup_LsB1", &in.sup_LsB1}, {"sup_M2", &in.sup_M2},   {"Kx_W", &in.Kx_W},
      {"Bxy_W", &in.Bxy_W},       {"B2x_W", &in.B2x_W},       {"M2y_W", &in.M2y_W}};
  if (cfg.raw.contains("bounds")) {
    const json& b = cfg.raw.at("bounds");
    if (!b.is_object()) bad("bounds", "expected an object");
    for (auto it = b.begin(); it != b.end(); ++it) {
      if (it.key() == "r1") {
        in.r1 = get_int(b, "r1", 1, "bounds.");
        continue;
      }
      const auto f = fields.find(it.key());
      if (f == fields.end()) bad("bounds." + it.key(), "unknown bound");
      *f->second = num_at(it.value(), "bounds." + it.key());
    }
  }
  const IkbConstants k = ikb_constants(in);
  const std::vector<std::pair<std::string, double>> derived = {
      {"C1h", k.C1h},   {"C1j", k.C1j},       {"C2sigma", k.C2sigma}, {"CtildeLfB1", k.CtildeLfB1},
      {"Ch", k.Ch},     {"Cj0", k.Cj0},       {"Ccross", k.Ccross},   {"c_r1", k.c_r1},
      {"CX1", k.CX1},   {"CY1", k.CY1},       {"alpha0", k.alpha0},   {"beta0", k.beta0},
      {"c", k.c},       {"d", k.d},           {"rho", k.rho}};
  RunResult out;
  std::ostringstream csv;
  csv << "name,value\n";
  json d;
  for (const auto& [n, v] : derived) {
    csv << n << ',' << fmt(v) << "\n";
    d[n] = v;
  }
  csv << "gap_holds," << int(k.gap_holds) << "\n";
  json inputs;
  for (const auto& [n, p] : fields) inputs[n] = *p;
  inputs["r1"] = in.r1;
  out.csv = csv.str();
  out.report["inputs"] = inputs;
  out.report["derived"] = d;
  out.report["gap_holds"] = k.gap_holds;
  out.verdicts["gap"] = k.gap_holds;
  return out;
}

RunResult run_avg_steady(const ExperimentConfig& cfg) {
  const std::string type = model_type(cfg);
  RunResult out;
  std::ostringstream csv;
  csv << "eps,shk_eps,shk_eps_se,shk_bar,shk_bar_se,gap_paired,gap_paired_se\n";
  std::function<SteadyPoint(double)> fam;
  std::map<double, Estimate> paired;
  if (type == "avg-demo") {
    const double alpha = get_num(cfg.model, "alpha", 0.5, "model.");
    const AveragingModel m = make_averaging_demo(alpha);
    require_divergence_free(m, box_grid(Vec::Constant(3, -2.0), Vec::Constant(3, 2.0), 9));
    int idx = 0;
    fam = [&, m](double eps) {
      const std::uint64_t s = cfg.seed + 7919ull * static_cast<std::uint64_t>(idx++);
      const Mat samples = m.sample_pi(cfg.n_paths, s);
      SteadyPoint p;
      p.eps = eps;
      p.shk_eps = sigma_hk_mc(averaging_diffusion(m, eps), samples);
      std::vector<double> bar(samples.rows());
      for (Eigen::Index i = 0; i < samples.rows(); ++i) {
        const Vec y = samples.row(i).tail(m.dy).transpose();
        const Vec f = averaged_force(m, y);
        bar[i] = f.dot(m.a2(y) * f);
      }
      p.shk_bar = mc_expectation(bar);
      paired[eps] = steady_gap_mc(m, samples);
      return p;
    };
    const double q = locking_gap_quadrature(m);
    out.report["locking_gap_quadrature"] = q;
    out.report["expected_gap"] = 2 * alpha * alpha;
    out.verdicts["locking"] = q < cfg.tol.gap_tol;
  } else if (type == "ou") {
    const BlockMatrix b = json_block_matrix(cfg.model, "model");
    const double bar = sigma_hk_stationary(averaged_ou(b).linear());
    fam = [b, bar](double eps) {
      SteadyPoint p;
      p.eps = eps;
      p.shk_eps = {sigma_hk_stationary(build_ou(b, eps).linear()), 0.0};
      p.shk_bar = {bar, 0.0};
      return p;
    };
  } else {
    bad("model.type", "avg-steady supports \"avg-demo\" and \"ou\"");
  }
  const SteadyVerdict v = steady_state_check(fam, cfg.eps_grid, cfg.tol);
  for (const auto& p : v.points) {
    const Estimate g = paired.count(p.eps) ? paired[p.eps] : Estimate{p.shk_eps.mean - p.shk_bar.mean, 0.0};
    csv << fmt(p.eps) << ',' << fmt(p.shk_eps.mean) << ',' << fmt(p.shk_eps.se) << ',' << fmt(p.shk_bar.mean) << ','
        << fmt(p.shk_bar.se) << ',' << fmt(g.mean) << ',' << fmt(g.se) << "\n";
  }
  out.csv = csv.str();
  out.report["min_tail_margin"] = v.min_tail_margin;
  out.verdicts["level3ss"] = v.pass;
  return out;
}

StiffModel stiff_by_name(const std::string& type, double eps) {
  if (type == "stiff-quadratic") return make_stiff_quadratic(eps);
  if (type == "stiff-quartic") return make_stiff_quartic(eps);
  bad("model.type", "stiff-sweep supports \"stiff-quadratic\" and \"stiff-quartic\"");
}

RunResult run_stiff(const ExperimentConfig& cfg) {
  const std::string type = model_type(cfg);
  const int n_samples = get_int(cfg.raw, "n_samples", cfg.n_paths);
  const bool dynamic = get_bool(cfg.raw, "dynamic", true);
  const double t = get_num(cfg.raw, "t", 0.5);
  const StiffModel base = stiff_by_name(type, cfg.eps_grid.front());
  Vec z0 = Vec::Zero(base.dx + base.dy);
  z0(0) = 1.5;
  z0(base.dx) = 0.5;
  if (cfg.raw.contains("z0")) z0 = json_vector(cfg.raw.at("z0"), "z0");
  if (z0.size() != base.dx + base.dy) bad("z0", "dimension must equal dx+dy");

  std::vector<StiffConcentrationReport> conc;
  bool conc_ok = true;
  for (std::size_t i = 0; i < cfg.eps_grid.size(); ++i) {
    conc.push_back(stiff_concentration(stiff_by_name(type, cfg.eps_grid[i]), n_samples, cfg.seed + i));
    conc_ok = conc_ok && conc.back().w1_pushforward <= cfg.tol.se_mult * conc.back().w1_null_rms;
  }
  std::vector<StiffDynamicRow> dyn;
  if (dynamic) {
    const auto f = [](const StiffModel& m, const Vec& z) { return stiff_phase_map(m, z).array().tanh().sum(); };
    dyn = stiff_dynamic_check(base, z0, f, t, cfg.eps_grid, cfg.n_paths, cfg.seed);
  }
  RunResult out;
  std::ostringstream csv;
  csv << "eps,mean_sq_residual,mean_sq_residual_se,w1_pushforward,w1_null_rms,dyn_gap,dyn_gap_se,dyn_micro,dyn_limit\n";
  json rows = json::array();
  for (std::size_t i = 0; i < cfg.eps_grid.size(); ++i) {
    const auto& c = conc[i];
    csv << fmt(cfg.eps_grid[i]) << ',' << fmt(c.mean_sq_residual.mean) << ',' << fmt(c.mean_sq_residual.se) << ','
        << fmt(c.w1_pushforward) << ',' << fmt(c.w1_null_rms);
    json r{{"eps", cfg.eps_grid[i]},
           {"mean_sq_residual", to_json(c.mean_sq_residual)},
           {"w1_pushforward", c.w1_pushforward},
           {"w1_null_rms", c.w1_null_rms},
           {"approximate_sampler", c.approximate}};
    if (dynamic) {
      const auto& d = dyn[i];
      csv << ',' << fmt(d.gap.mean) << ',' << fmt(d.gap.se) << ',' << fmt(d.micro_mean) << ',' << fmt(d.limit_mean);
      r["dynamic"] = {{"gap", to_json(d.gap)}, {"micro", d.micro_mean}, {"limit", d.limit_mean}, {"dt", d.dt}};
    } else {
      csv << ",,,,";
    }
    csv << "\n";
    rows.push_back(r);
  }
  out.csv = csv.str();
  out.report["rows"] = rows;
  out.report["test_function"] = "sum of tanh over the components of Phi(z)";
  out.verdicts["stiff_concentration"] = conc_ok;
  if (dynamic) out.verdicts["stiff_dynamic"] = gaps_decrease_beyond_noise(dyn, 2.0);
  return out;
}

RunResult run_coeff(const ExperimentConfig& cfg) {
  const std::string type = model_type(cfg);
  CoefficientFamily fam;
  if (type == "ou")
    fam = ou_coefficient_family(json_block_matrix(cfg.model, "model"));
  else if (type == "avg-demo")
    fam = demo_coefficient_family(get_num(cfg.model, "alpha", 0.5, "model."));
  else
    bad("model.type", "coeff-check supports \"ou\" and \"avg-demo\"");
  const auto lib = test_function_library(fam.slow_dim);
  const CoeffTable t = coeff_convergence_check(fam, lib, cfg.eps_grid, cfg.n_paths, cfg.seed);
  RunResult out;
  std::ostringstream csv;
  csv << "eps,fn,J_mean,J_se,Q_mean,Q_se\n";
  for (const auto& r : t.rows)
    csv << fmt(r.eps) << ',' << r.fn << ',' << fmt(r.J.mean) << ',' << fmt(r.J.se) << ',' << fmt(r.Q.mean) << ','
        << fmt(r.Q.se) << "\n";
  for (std::size_t i = 0; i < t.eps_grid.size(); ++i)
    csv << fmt(t.eps_grid[i]) << ",hk_proj," << fmt(t.J_hk_proj[i].mean) << ',' << fmt(t.J_hk_proj[i].se) << ",,\n";
  json cj, cq;
  bool cauchy = true;
  for (const auto& [n, v] : t.cauchy_J) {
    cj[n] = {{"max_increment", v.first}, {"se", v.second}};
    cauchy = cauchy && v.first <= cfg.tol.gap_tol + cfg.tol.se_mult * v.second;
  }
  for (const auto& [n, v] : t.cauchy_Q) cq[n] = {{"max_increment", v.first}, {"se", v.second}};
  out.csv = csv.str();
  out.report["library_version"] = kTestLibraryVersion;
  out.report["cauchy_J"] = cj;
  out.report["cauchy_Q"] = cq;
  out.report["sup_J_hk_proj"] = t.sup_J_hk_proj;
  out.verdicts["coeff_bounded"] = std::isfinite(t.sup_J_hk_proj);
  out.verdicts["coeff_cauchy"] = cauchy;
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

Mat json_matrix(const json& j, const std::string& path) {
  if (!j.is_array() || j.empty()) bad(path, "expected a nonempty array of rows");
  const std::size_t rows = j.size();
  if (!j[0].is_array() || j[0].empty()) bad(path + "[0]", "expected a nonempty row");
  const std::size_t cols = j[0].size();
  Mat m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::string rp = path + "[" + std::to_string(r) + "]";
    if (!j[r].is_array() || j[r].size() != cols) bad(rp, "rows must all have " + std::to_string(cols) + " entries");
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = num_at(j[r][c], rp + "[" + std::to_string(c) + "]");
  }
  return m;
}

Vec json_vector(const json& j, const std::string& path) {
  const auto v = num_list(j, path);
  return Eigen::Map<const Vec>(v.data(), v.size());
}

BlockMatrix json_block_matrix(const json& model, const std::string& path) {
  if (!model.contains("B")) bad(path + ".B", "missing");
  const Mat b = json_matrix(model.at("B"), path + ".B");
  const int dx = get_int(model, "dx", -1, path + "."), dy = get_int(model, "dy", -1, path + ".");
  if (dx < 1) bad(path + ".dx", "missing or < 1");
  if (dy < 1) bad(path + ".dy", "missing or < 1");
  try {
    return BlockMatrix(b, dx, dy);
  } catch (const DimensionMismatch& e) {
    bad(path + ".B", e.what());
  }
}

ExperimentConfig parse_config(const json& j) {
  if (!j.is_object()) bad("<root>", "expected a JSON object");
  ExperimentConfig c;
  c.raw = j;
  c.experiment = get_str(j, "experiment", "");
  if (!c.experiment.empty()) {
    const auto& names = experiment_names();
    if (std::find(names.begin(), names.end(), c.experiment) == names.end()) bad("experiment", "unknown experiment");
  }
  if (j.contains("model")) c.model = j.at("model");
  c.eps_grid = j.contains("eps_grid") ? num_list(j.at("eps_grid"), "eps_grid")
                                      : std::vector<double>{0.2, 0.1, 0.05, 0.025, 0.0125};
  for (std::size_t i = 0; i < c.eps_grid.size(); ++i) {
    if (!(c.eps_grid[i] > 0.0)) bad("eps_grid[" + std::to_string(i) + "]", "must be positive");
    if (i > 0 && !(c.eps_grid[i] < c.eps_grid[i - 1]))
      bad("eps_grid[" + std::to_string(i) + "]", "grid must be strictly decreasing");
  }
  c.times = j.contains("times") ? num_list(j.at("times"), "times") : std::vector<double>{0.5};
  for (std::size_t i = 0; i < c.times.size(); ++i)
    if (!(c.times[i] > 0.0)) bad("times[" + std::to_string(i) + "]", "must be positive");
  c.n_paths = get_int(j, "n_paths", c.n_paths);
  if (c.n_paths < 2) bad("n_paths", "must be >= 2");
  if (j.contains("seed")) {
    if (!j.at("seed").is_number_unsigned()) bad("seed", "expected a nonnegative integer");
    c.seed = j.at("seed").get<std::uint64_t>();
  }
  c.dt = get_num(j, "dt", c.dt);
  if (!(c.dt > 0.0)) bad("dt", "must be positive");
  if (j.contains("tolerances")) {
    const json& t = j.at("tolerances");
    if (!t.is_object()) bad("tolerances", "expected an object");
    c.tol.gap_tol = get_num(t, "gap_tol", c.tol.gap_tol, "tolerances.");
    c.tol.se_mult = get_num(t, "se_mult", c.tol.se_mult, "tolerances.");
    if (t.contains("slope_band")) {
      const auto sb = num_list(t.at("slope_band"), "tolerances.slope_band");
      if (sb.size() != 2 || !(sb[0] < sb[1])) bad("tolerances.slope_band", "expected [lo, hi] with lo < hi");
      c.tol.slope_lo = sb[0];
      c.tol.slope_hi = sb[1];
    }
    if (!(c.tol.gap_tol > 0.0)) bad("tolerances.gap_tol", "must be positive");
    if (!(c.tol.se_mult > 0.0)) bad("tolerances.se_mult", "must be positive");
    if (!(c.tol.slope_lo > 0.0)) bad("tolerances.slope_band[0]", "must be positive");
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key().rfind("require_", 0) != 0) continue;
    if (!it.value().is_boolean()) bad(it.key(), "expected a boolean");
    c.require[it.key().substr(8)] = it.value().get<bool>();
  }
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": invalid JSON: " + e.what());
  }
  return parse_config(j);
}

RunResult run(const ExperimentConfig& cfg) {
  RunResult r;
  const std::string& e = cfg.experiment;
  if (e == "ou-sweep")
    r = run_ou_sweep(cfg);
  else if (e == "cd-check")
    r = run_cd_check(cfg);
  else if (e == "sync-couple")
    r = run_sync(cfg);
  else if (e == "ikb")
    r = run_ikb(cfg);
  else if (e == "avg-steady")
    r = run_avg_steady(cfg);
  else if (e == "stiff-sweep")
    r = run_stiff(cfg);
  else if (e == "coeff-check")
    r = run_coeff(cfg);
  else
    bad("experiment", "missing or unknown experiment");

  json required = json::object();
  for (const auto& [name, req] : cfg.require) {
    const auto it = r.verdicts.find(name);
    if (it == r.verdicts.end()) bad("require_" + name, "experiment " + e + " produces no verdict named " + name);
    required[name] = req;
    if (req && !it->second) r.required_ok = false;
  }
  json verdicts = json::object();
  for (const auto& [n, v] : r.verdicts) verdicts[n] = v;
  r.report["experiment"] = e;
  r.report["config"] = cfg.raw;
  r.report["verdicts"] = verdicts;
  r.report["required"] = required;
  r.report["required_ok"] = r.required_ok;
  return r;
}

void write_outputs(const ExperimentConfig& cfg, const RunResult& r, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const std::string base = (std::filesystem::path(out_dir) / cfg.experiment).string();
  std::ofstream csv(base + ".csv");
  if (!csv) throw Error("cannot write " + base + ".csv");
  csv << r.csv;
  std::ofstream js(base + ".json");
  if (!js) throw Error("cannot write " + base + ".json");
  js << r.report.dump(2) << "\n";
}

bool run_to_dir(const ExperimentConfig& cfg, const std::string& out_dir) {
  const RunResult r = run(cfg);
  write_outputs(cfg, r, out_dir);
  return r.required_ok;
}

// ---------------------------------------------------------------------------

std::vector<TestFunction> test_function_library(int n) {
  if (n < 1) throw DimensionMismatch("test_function_library: slow dimension must be >= 1");
  const Vec w = Vec::Ones(n) / std::sqrt(double(n));
  Vec w2(n);
  for (int i = 0; i < n; ++i) w2(i) = (i % 2 == 0 ? 1.0 : -1.0) / std::sqrt(double(n));
  const auto tanh_fn = [](Vec a, double scale, double shift) {
    return [a, scale, shift](const Vec& y) { return std::tanh(scale * a.dot(y) + shift); };
  };
  const auto bump = [](Vec c, double l) {
    return [c, l](const Vec& y) { return std::exp(-(y - c).squaredNorm() / (2.0 * l * l)); };
  };
  std::vector<TestFunction> lib;
  const auto add_tanh = [&](const std::string& name, const std::function<double(const Vec&)>& f) {
    lib.push_back({name, f, [f](const Vec& y) { return 0.5 * (1.0 + f(y)); }, static_cast<int>(lib.size()) % n});
  };
  const auto add_bump = [&](const std::string& name, const std::function<double(const Vec&)>& f) {
    lib.push_back({name, f, f, static_cast<int>(lib.size()) % n});
  };
  add_tanh("tanh(w.y)", tanh_fn(w, 1.0, 0.0));
  add_tanh("tanh(2w.y-0.5)", tanh_fn(w, 2.0, -0.5));
  add_tanh("tanh(w2.y+0.3)", tanh_fn(w2, 1.0, 0.3));
  add_tanh("tanh(0.5w.y+1)", tanh_fn(w, 0.5, 1.0));
  add_bump("bump(0,1)", bump(Vec::Zero(n), 1.0));
  add_bump("bump(0.5w,0.7)", bump(0.5 * w, 0.7));
  add_bump("bump(-w,1.5)", bump(-w, 1.5));
  add_bump("bump(w2,1)", bump(w2, 1.0));
  return lib;
}

namespace {

Mat exact_gaussian_rows(const Mat& cov, int n, std::uint64_t seed) {
  const Mat l = Eigen::LLT<Mat>(cov).matrixL();
  Mat s(n, cov.rows());
  Vec xi(cov.rows());
  for (int i = 0; i < n; ++i) {
    KeyedNormal g = sampler_stream(seed, static_cast<std::uint64_t>(i));
    for (Eigen::Index j = 0; j < xi.size(); ++j) xi(j) = g();
    s.row(i) = (l * xi).transpose();
  }
  return s;
}

Mat slow_projection(int dx, int dy) {
  Mat p = Mat::Zero(dy, dx + dy);
  p.rightCols(dy).setIdentity();
  return p;
}

}  // namespace

CoefficientFamily ou_coefficient_family(const BlockMatrix& b) {
  CoefficientFamily f;
  f.name = "ou";
  f.dim = b.dim();
  f.slow_dim = b.dy;
  f.DPhi = slow_projection(b.dx, b.dy);
  f.phi0 = Vec::Zero(b.dy);
  f.sample_pi = [b](double eps, int n, std::uint64_t seed) { return exact_gaussian_rows(build_ou(b, eps).Sigma, n, seed); };
  f.gamma = [b](double eps, const Vec& z) -> Vec {
    const OuEps o = build_ou(b, eps);
    return o.Ieps * (o.K * z);
  };
  f.A = [b](double eps, const Vec&) { return ieps_matrix(b.dx, b.dy, eps); };
  return f;
}

CoefficientFamily demo_coefficient_family(double alpha) {
  const AveragingModel m = make_averaging_demo(alpha);
  CoefficientFamily f;
  f.name = m.name;
  f.dim = 3;
  f.slow_dim = 2;
  f.DPhi = slow_projection(1, 2);
  f.phi0 = Vec::Zero(2);
  f.sample_pi = [m](double, int n, std::uint64_t seed) { return m.sample_pi(n, seed); };
  f.gamma = [m](double, const Vec& z) -> Vec {
    Vec g = Vec::Zero(3);
    g.tail(2) = m.gamma_y(z.head(1), z.tail(2));
    return g;
  };
  f.A = [](double eps, const Vec&) { return ieps_matrix(1, 2, eps); };
  return f;
}

CoeffTable coeff_convergence_check(const CoefficientFamily& fam, const std::vector<TestFunction>& lib,
                                   const std::vector<double>& eps_grid, int n_samples, std::uint64_t seed) {
  if (eps_grid.empty()) throw EmptyGrid("coeff_convergence_check: empty eps grid");
  if (lib.empty()) throw EmptyGrid("coeff_convergence_check: empty test-function library");
  CoeffTable t;
  t.eps_grid = eps_grid;
  std::map<std::string, std::vector<CoeffRow>> by_fn;
  for (std::size_t i = 0; i < eps_grid.size(); ++i) {
    const double eps = eps_grid[i];
    const Mat s = fam.sample_pi(eps, n_samples, seed + 104729ull * i);
    const std::size_t n = s.rows();
    std::vector<std::vector<double>> jv(lib.size(), std::vector<double>(n)), qv = jv;
    std::vector<double> hk(n);
    for (std::size_t r = 0; r < n; ++r) {
      const Vec z = s.row(r).transpose();
      const Vec y = fam.DPhi * z + fam.phi0;
      const Vec pg = fam.DPhi * fam.gamma(eps, z);
      const Mat pa = fam.DPhi * fam.A(eps, z) * fam.DPhi.transpose();
      const auto llt = pa.llt();
      if (llt.info() != Eigen::Success) throw SingularA("coeff_convergence_check: projected diffusivity singular");
      hk[r] = pg.dot(llt.solve(pg));
      const double tr = pa.trace();
      for (std::size_t k = 0; k < lib.size(); ++k) {
        jv[k][r] = lib[k].phi(y) * pg(lib[k].component);
        qv[k][r] = lib[k].weight(y) * tr;
      }
    }
    for (std::size_t k = 0; k < lib.size(); ++k) {
      CoeffRow row{eps, lib[k].name, mc_expectation(jv[k]), mc_expectation(qv[k])};
      t.rows.push_back(row);
      by_fn[lib[k].name].push_back(row);
    }
    t.J_hk_proj.push_back(mc_expectation(hk));
    t.sup_J_hk_proj = std::max(t.sup_J_hk_proj, t.J_hk_proj.back().mean);
  }
  for (const auto& [name, rows] : by_fn) {
    std::pair<double, double> cj{0.0, 0.0}, cq{0.0, 0.0};
    for (std::size_t k = 1; k < rows.size(); ++k) {
      const double dj = std::abs(rows[k].J.mean - rows[k - 1].J.mean);
      const double dq = std::abs(rows[k].Q.mean - rows[k - 1].Q.mean);
      if (dj >= cj.first) cj = {dj, std::hypot(rows[k].J.se, rows[k - 1].J.se)};
      if (dq >= cq.first) cq = {dq, std::hypot(rows[k].Q.se, rows[k - 1].Q.se)};
    }
    t.cauchy_J[name] = cj;
    t.cauchy_Q[name] = cq;
  }
  return t;
}

SteadyVerdict steady_state_check(const std::function<SteadyPoint(double eps)>& family,
                                 const std::vector<double>& eps_grid, const Tolerances& tol, int tail) {
  if (eps_grid.empty()) throw EmptyGrid("steady_state_check: empty eps grid");
  SteadyVerdict v;
  for (double e : eps_grid) v.points.push_back(family(e));
  const std::size_t n = v.points.size();
  const std::size_t m = std::min<std::size_t>(n, std::max(tail, 1));
  v.pass = true;
  v.min_tail_margin = std::numeric_limits<double>::infinity();
  for (std::size_t k = n - m; k < n; ++k) {
    const auto& p = v.points[k];
    const double margin = p.shk_eps.mean - p.shk_bar.mean;
    const double se = std::hypot(p.shk_eps.se, p.shk_bar.se);
    v.min_tail_margin = std::min(v.min_tail_margin, margin);
    if (margin < -tol.gap_tol - tol.se_mult * se) v.pass = false;
  }
  return v;
}

}  // namespace thermoconv
