#pragma once

#include <optional>
#include <string>
#include <vector>

#include "thermoconv/matrix_kit.hpp"

namespace thermoconv {

// Shape-validated only; build_ou/averaged_ou enforce stability of B11 and C,
// because criteria legitimately consume unstable B (e.g. [[2,2],[2,1]]).
struct BlockMatrix {
  Mat B;
  int dx = 0;
  int dy = 0;

  BlockMatrix() = default;
  BlockMatrix(Mat b, int dx_, int dy_);

  int dim() const { return dx + dy; }
  Mat b11() const { return B.topLeftCorner(dx, dx); }
  Mat b12() const { return B.topRightCorner(dx, dy); }
  Mat b21() const { return B.bottomLeftCorner(dy, dx); }
  Mat b22() const { return B.bottomRightCorner(dy, dy); }
};

// dz = -M z dt + sqrt(2A) dW with invariant N(0, Sigma); thermodynamic force
// A^{-1} gamma = K z, gamma = A K z.
struct LinearOu {
  Mat M;
  Mat A;
  Mat Sigma;
  Mat K;
  std::optional<double> eps;  // absent for the averaged limit
};

struct OuEps {
  BlockMatrix B;
  double eps = 1.0;
  Mat Ieps;
  Mat Meps;
  Mat Sigma;
  Mat K;

  LinearOu linear() const { return {Meps, Ieps, Sigma, K, eps}; }
};

struct OuBar {
  Mat C;
  Mat SigmaY;
  Mat Kbar;

  LinearOu linear() const;
};

struct ThermoReport {
  double t = 0.0;
  std::optional<double> eps;  // absent = limit model
  double F = 0.0;
  double I = 0.0;
  double sigma_hk = 0.0;
  double sigma_ex = 0.0;
  double sigma_total = 0.0;
};

Mat ieps_matrix(int dx, int dy, double eps);

OuEps build_ou(const BlockMatrix& b, double eps);
OuBar averaged_ou(const BlockMatrix& b);

GaussianState forward_state(const LinearOu& model, const GaussianState& rho0, double t);
inline GaussianState forward_state(const OuEps& m, const GaussianState& rho0, double t) {
  return forward_state(m.linear(), rho0, t);
}
inline GaussianState forward_state(const OuBar& m, const GaussianState& rho0, double t) {
  return forward_state(m.linear(), rho0, t);
}

// Five functionals in the forward Gaussian picture; every expectation goes
// through gaussian_quadratic_expectation.
ThermoReport thermo_report(const LinearOu& model, const GaussianState& rho0, double t);
inline ThermoReport thermo_report(const OuEps& m, const GaussianState& rho0, double t) {
  return thermo_report(m.linear(), rho0, t);
}
inline ThermoReport thermo_report(const OuBar& m, const GaussianState& rho0, double t) {
  return thermo_report(m.linear(), rho0, t);
}

// sigma_hk at stationarity: tr(K^T A K Sigma).
double sigma_hk_stationary(const LinearOu& model);

// E_{rho_t} || K z - (0, psi y) ||^2_{I^eps}.
double locking_residual(const OuEps& me, const GaussianState& rho0, double t, const Mat& psi);
inline double locking_residual(const OuEps& me, const OuBar& mb, const GaussianState& rho0, double t) {
  return locking_residual(me, rho0, t, mb.Kbar);
}

// E[2 gamma_y^T psi y - |psi y|^2]: the lower bound whose defect is R.
double completion_of_squares_bound(const OuEps& me, const GaussianState& rho0, double t, const Mat& psi);

GaussianState slow_marginal(const GaussianState& rho0, int dx, int dy);

// Default initial datum: mean of ones, covariance 0.25 * Sigma^eps at the
// largest eps. Warnings for eps where S0 is not <= Sigma^eps are appended.
GaussianState default_rho0(const BlockMatrix& b, const std::vector<double>& eps_grid,
                           std::vector<std::string>* warnings = nullptr);

struct SweepTolerances {
  double gap_tol = 1e-3;
  double slope_lo = 0.7;
  double slope_hi = 1.3;
  int fit_window = 4;
  int tail = 3;
};

struct SweepRow {
  double eps = 0.0;
  double t = 0.0;
  double F_eps = 0.0, F_bar = 0.0;
  double I_eps = 0.0, I_bar = 0.0;
  double shk_eps = 0.0, shk_bar = 0.0;
  double stot_eps = 0.0, stot_bar = 0.0;
  double R_eps = 0.0;
  bool level1 = false, level2 = false, level3 = false, level4 = false;
};

struct RateFit {
  double slope = 0.0;
  double residual = 0.0;  // RMS of log-residuals
};

struct LevelVerdicts {
  bool level1 = false, level2 = false, level3 = false, level4 = false;
};

struct TimeSummary {
  double t = 0.0;
  LevelVerdicts verdicts;
  RateFit rate_F, rate_I, rate_hk, rate_R;
  // Raw gaps at the smallest eps and Richardson (eps -> 0) extrapolations
  // from the two smallest eps.
  double dF_final = 0.0, dI_final = 0.0, dhk_final = 0.0, R_final = 0.0;
  double dF_limit = 0.0, dI_limit = 0.0, dhk_limit = 0.0, dtot_limit = 0.0, R_limit = 0.0;
  double min_tail_dhk = 0.0, min_tail_dtot = 0.0;  // over tail-pair extrapolations
};

struct SweepResult {
  std::vector<SweepRow> rows;  // eps-major, then t
  std::vector<double> eps_grid;
  std::vector<double> times;
  std::vector<TimeSummary> per_t;
  LevelVerdicts verdicts;  // conjunction over t
  bool level3ss = false;
  std::vector<double> shk_ss_eps;
  double shk_ss_bar = 0.0;
  double shk_ss_limit = 0.0;
  bool monotone_weight_ok = true;
  double kappa = 0.0;
  std::vector<std::string> warnings;
};

// Linear extrapolation to eps = 0 through (eps1, g1) and (eps2, g2).
double richardson_limit(double eps1, double g1, double eps2, double g2);

RateFit loglog_fit(const std::vector<double>& x, const std::vector<double>& y);

// Recomputes per-t summaries and verdicts from rows alone; ou_sweep uses this
// so emitted CSV rows reproduce the verdicts exactly.
void derive_verdicts(SweepResult& r, const SweepTolerances& tol);

SweepResult ou_sweep(const BlockMatrix& b, const GaussianState& rho0, const std::vector<double>& times,
                     const std::vector<double>& eps_grid, double kappa, const SweepTolerances& tol = {});

// e^{-2 kappa t} I(t) nonincreasing on the grid (relative slack 1e-10).
bool monotone_weight_holds(const LinearOu& model, const GaussianState& rho0, double kappa,
                           const std::vector<double>& times);

std::string sweep_csv_header();
std::string sweep_csv(const SweepResult& r);
std::vector<SweepRow> parse_sweep_csv(const std::string& text);

}  // namespace thermoconv
