#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "thermoconv/matrix_kit.hpp"
#include "thermoconv/ou_lab.hpp"
#include "thermoconv/sde_engine.hpp"

namespace thermoconv {

// A certificate on the supplied grid only.
struct CdVerdict {
  double kappa = 0.0;
  bool satisfied = false;
  std::optional<Vec> worst_point;
  double worst_eigenvalue = 0.0;
  std::size_t grid_size = 0;
};

using MatField = std::function<Mat(const Vec&)>;

// satisfied iff min_grid lambda_min(hessV - Sym(jacF) + kappa Ainv) >= -1e-9.
CdVerdict cd_constant_diffusion(const MatField& hessV, const MatField& jacF, const Mat& Ainv,
                                const std::vector<Vec>& grid, double kappa, int threads = 0);
CdVerdict cd_constant_diffusion_serial(const MatField& hessV, const MatField& jacF, const Mat& Ainv,
                                       const std::vector<Vec>& grid, double kappa);

// S(z) = D^{1/2} Sym(-jacb(z)) D^{1/2}, D = diag(a1, a2). Throws FastBlockNotPD
// (with the point) unless S11 > 0 everywhere. kappa = max(0, -min lambda_min of
// the Schur complement); the verdict's worst_eigenvalue is the shifted margin
// lambda_min + kappa, so it is >= 0 whenever satisfied.
struct SchurAveragingResult {
  double kappa = 0.0;
  double min_schur_eigenvalue = 0.0;
  CdVerdict verdict;
};
SchurAveragingResult cd_schur_averaging(const MatField& jacb, const Mat& a1, const Mat& a2,
                                        const std::vector<Vec>& grid, int threads = 0);

// min{0, lambda_min(Schur complement of Sym(B) w.r.t. Sym(B11))}.
double ou_cd_rho(const BlockMatrix& b);

struct IkbInputs {
  double lambda1 = 1, Lambda1 = 1, lambda2 = 1, Lambda2 = 1;
  double L_b1x = 0, L_b1y = 0, L_b2x = 0, L_b2y = 0;
  double L_eta1x = 0, L_eta1y = 0, L_eta2y = 0;
  double L_B1x = 0, L_B1y = 0, L_B2y = 0;
  double H1_inf = 0, H2_inf = 0;
  double sup_LfB1 = 0, sup_LsB1 = 0, sup_M2 = 0;
  double Kx_W = 0, Bxy_W = 0, B2x_W = 0, M2y_W = 0;
  int r1 = 1;
};

struct IkbConstants {
  IkbInputs in;
  double C1h = 0, C1j = 0, C2sigma = 0, CtildeLfB1 = 0, Ch = 0, Cj0 = 0, Ccross = 0;
  double c_r1 = 0, CX1 = 0, CY1 = 0;
  double alpha0 = 0, beta0 = 0, c = 0, d = 0, rho = 0;
  bool gap_holds = false;
};

IkbConstants ikb_constants(const IkbInputs& in);

// Max of ||f(z)||_op over a box grid with `per_dim` points per axis. A sampled
// supremum is a lower estimate of the true sup: non-rigorous.
struct SampledSup {
  double value = 0.0;
  bool rigorous = false;
  std::size_t points = 0;
};
SampledSup sampled_sup_opnorm(const MatField& f, const Vec& lo, const Vec& hi, int per_dim);

std::vector<Vec> box_grid(const Vec& lo, const Vec& hi, int per_dim);

struct SyncPairResult {
  Vec z1, z2;
  double initial_energy = 0.0;
  std::vector<double> times;
  std::vector<Estimate> energy;
  std::vector<double> bound;  // e^{2 rate t} * initial
  double max_ratio = 0.0;
  bool pass = true;
};

struct SyncReport {
  double max_ratio = 0.0;
  bool pass = true;
  std::vector<SyncPairResult> pairs;
};

// Energy bound e^{2 rate t} E_0, where rate is a growth rate (for the OU family
// rate = -ou_cd_rho(B) >= 0). Pass iff every mean <= bound * (1 + 3 SE/mean).
SyncReport sync_contraction_test(const DiffusionModel& model, const std::vector<std::pair<Vec, Vec>>& pairs,
                                 double horizon, double rate, int n_reps, std::uint64_t seed, double dt,
                                 int n_grid = 20, int threads = 0);

}  // namespace thermoconv
