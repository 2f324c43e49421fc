#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "thermoconv/matrix_kit.hpp"
#include "thermoconv/ou_lab.hpp"
#include "thermoconv/sde_engine.hpp"

namespace thermoconv {

using json = nlohmann::json;

struct Tolerances {
  double gap_tol = 1e-3;
  double slope_lo = 0.7, slope_hi = 1.3;
  double se_mult = 3.0;
};

struct ExperimentConfig {
  std::string experiment;  // ou-sweep | cd-check | sync-couple | ikb | avg-steady | stiff-sweep | coeff-check
  json model;              // validated lazily by the experiment that consumes it
  std::vector<double> eps_grid;
  std::vector<double> times;
  int n_paths = 10000;
  std::uint64_t seed = 12345;
  double dt = 1e-3;
  Tolerances tol;
  std::map<std::string, bool> require;  // require_<verdict>
  json raw;                             // full config, echoed to the JSON output
};

inline const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> n = {"ou-sweep",   "cd-check",    "sync-couple", "ikb",
                                             "avg-steady", "stiff-sweep", "coeff-check"};
  return n;
}

// Throws ConfigError naming the offending field path.
ExperimentConfig parse_config(const json& j);
ExperimentConfig load_config(const std::string& path);

// Field helpers shared by experiments; errors carry the JSON path.
Mat json_matrix(const json& j, const std::string& path);
Vec json_vector(const json& j, const std::string& path);
BlockMatrix json_block_matrix(const json& model, const std::string& path);

struct RunResult {
  std::string csv;
  json report;
  std::map<std::string, bool> verdicts;
  bool required_ok = true;
};

RunResult run(const ExperimentConfig& cfg);
// Writes <out>/<experiment>.csv and .json, creating the directory.
void write_outputs(const ExperimentConfig& cfg, const RunResult& r, const std::string& out_dir);
// run + write_outputs; returns required_ok.
bool run_to_dir(const ExperimentConfig& cfg, const std::string& out_dir);

// ---------------------------------------------------------------------------
// Coefficient convergence.

// Fixed, versioned library of 8 bounded scalar functions on the slow space:
// four tanh-of-affine and four Gaussian bumps. xi_k = phi_k e_{k mod n};
// eta_k = w_k I with w_k >= 0.
struct TestFunction {
  std::string name;
  std::function<double(const Vec& y)> phi;
  std::function<double(const Vec& y)> weight;  // PSD weight for eta
  int component = 0;
};
std::vector<TestFunction> test_function_library(int slow_dim);
inline constexpr int kTestLibraryVersion = 1;

// Affine coarse-graining Phi(z) = DPhi z + phi0 with an exact or approximate
// sampler of pi^eps.
struct CoefficientFamily {
  std::string name;
  int dim = 0, slow_dim = 0;
  Mat DPhi;
  Vec phi0;
  std::function<Mat(double eps, int n, std::uint64_t seed)> sample_pi;
  std::function<Vec(double eps, const Vec& z)> gamma;
  std::function<Mat(double eps, const Vec& z)> A;
};

CoefficientFamily ou_coefficient_family(const BlockMatrix& b);
CoefficientFamily demo_coefficient_family(double alpha);

struct CoeffRow {
  double eps = 0.0;
  std::string fn;
  Estimate J;  // int <xi(Phi), DPhi gamma> d pi
  Estimate Q;  // int tr(eta DPhi A DPhi^T) d pi
};

struct CoeffTable {
  std::vector<CoeffRow> rows;
  std::vector<double> eps_grid;
  std::vector<Estimate> J_hk_proj;  // per eps
  double sup_J_hk_proj = 0.0;
  // Per function: max over consecutive eps of |J(eps_i) - J(eps_{i+1})| and
  // the combined SE of that increment.
  std::map<std::string, std::pair<double, double>> cauchy_J, cauchy_Q;
};

CoeffTable coeff_convergence_check(const CoefficientFamily& fam, const std::vector<TestFunction>& lib,
                                   const std::vector<double>& eps_grid, int n_samples, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Steady-state Level III_ss.

struct SteadyPoint {
  double eps = 0.0;
  Estimate shk_eps;
  Estimate shk_bar;
};

struct SteadyVerdict {
  std::vector<SteadyPoint> points;
  double min_tail_margin = 0.0;  // min over tail of shk_eps - shk_bar
  bool pass = false;
};

// pass iff min over the eps-tail (3 smallest) of (shk_eps - shk_bar) >=
// -gap_tol - se_mult * SE, SE combining both estimates.
SteadyVerdict steady_state_check(const std::function<SteadyPoint(double eps)>& family,
                                 const std::vector<double>& eps_grid, const Tolerances& tol, int tail = 3);

}  // namespace thermoconv
