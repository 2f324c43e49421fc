#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "thermoconv/matrix_kit.hpp"
#include "thermoconv/sde_engine.hpp"

namespace thermoconv {

// ---------------------------------------------------------------------------
// Slow-fast averaging model: z = (x, y), A = diag(eps^{-1} a1(x,y), a2(y)),
// pi ∝ e^{-V}, drift -A grad V + gamma with gamma = (0, gamma_y).
// Diffusivities are treated as constant in the drift (no div A term).

struct AveragingModel {
  std::string name;
  int dx = 0, dy = 0;
  std::function<Mat(const Vec& x, const Vec& y)> a1;
  std::function<Mat(const Vec& y)> a2;
  std::function<double(const Vec& x, const Vec& y)> V;
  std::function<Vec(const Vec& x, const Vec& y)> gradV;  // full gradient, length dx+dy
  std::function<Vec(const Vec& x, const Vec& y)> gamma_y;
  // Gaussian fibre law mu^y of x given y, when known in closed form.
  std::function<GaussianState(const Vec& y)> fibre;
  // Exact sampler of pi (eps-independent in the divergence-form subclass).
  std::function<Mat(int n, std::uint64_t seed)> sample_pi;
  // Unnormalized density of the slow marginal pi_bar.
  std::function<double(const Vec& y)> pi_bar_density;
};

// V = (x^2 + |y|^2)/2, a1 = a2 = I, gamma_y = (1 + alpha x) J y, dx = 1, dy = 2.
AveragingModel make_averaging_demo(double alpha);

// gamma_y is divergence-free against e^{-V} on the grid:
// max |div_y(e^{-V} gamma_y)| / max(1, |e^{-V} gamma_y|) by central differences.
double averaging_divergence_residual(const AveragingModel& m, const std::vector<Vec>& grid, double h = 1e-4);

// Fails (throws Error) unless the grid residual is <= 1e-6.
void require_divergence_free(const AveragingModel& m, const std::vector<Vec>& grid);

DiffusionModel averaging_diffusion(const AveragingModel& m, double eps);

// Averaged slow force F_bar = a2^{-1} gamma_bar, gamma_bar(y) = E_{mu^y} gamma_y,
// via Gauss-Hermite of the given order on the Gaussian fibre.
Vec averaged_force(const AveragingModel& m, const Vec& y, int order = 20);

// mc_expectation of gamma^T A^{-1} gamma over the rows of `samples`.
Estimate sigma_hk_mc(const DiffusionModel& model, const Mat& samples);

// Paired estimate of E_pi[gamma_y^T a2^{-1} gamma_y - F_bar^T a2 F_bar]
// (microscopic minus macroscopic housekeeping integrand) over stationary
// samples; the expectation is lim sigma_hk,ss^eps - sigma_bar_hk,ss.
Estimate steady_gap_mc(const AveragingModel& m, const Mat& samples, int order = 20);

// Integral of (F_y - F_bar)^T a2 (F_y - F_bar) d mu^y d pi_bar: Gauss-Hermite
// in x, trapezoid grid on [-half_width, half_width]^dy in y. Throws
// QuadratureDivergence if shrinking the box by 20% moves the value by > 1e-4.
double locking_gap_quadrature(const AveragingModel& m, int y_points = 161, double half_width = 8.0,
                              int x_order = 20);

// ---------------------------------------------------------------------------
// Stiff-potential model: V + eps^{-2} U, U = (x - H y - b)^T B (x - H y - b)/2.

struct StiffModel {
  std::string name;
  int dx = 0, dy = 0;
  Mat H;     // dx x dy
  Vec b;     // dx
  Mat Bmat;  // dx x dx SPD
  std::function<double(const Vec& z)> V;
  std::function<Vec(const Vec& z)> gradV;
  double eps = 1.0;
  // V(z) = z^T P z / 2 + q^T z + R(z) with R >= 0 when set: exact sampling
  // by a Gaussian proposal accepted with probability exp(-R). R empty means 0.
  struct Quadratic {
    Mat P;
    Vec q;
    std::function<double(const Vec& z)> remainder;
  };
  std::optional<Quadratic> quadratic;
  double relaxation_time = 1.0;  // slow relaxation scale used for ULA burn-in
};

StiffModel make_stiff_quadratic(double eps);
// Same constraint, V = (x^2 + y^2)/2 + x^4/4: the constraint-normal
// fluctuations feed back into the slow law, so the finite-eps gap is nonzero.
StiffModel make_stiff_quartic(double eps);

Vec stiff_phase_map(const StiffModel& m, const Vec& z);
Vec stiff_embed(const StiffModel& m, const Vec& u);  // iota(u) = (H u + b, u)
Mat stiff_metric(const StiffModel& m);               // G = I + H^T H

DiffusionModel stiff_micro_model(const StiffModel& m);
DiffusionModel stiff_limit_model(const StiffModel& m);

struct StiffConcentrationReport {
  Estimate mean_sq_residual;  // E|x - H y - b|^2
  double w1_pushforward = 0.0;
  double w1_null_rms = 0.0;  // RMS of the same estimator between two pi_bar_0 samples
  bool approximate = false;  // true when the Langevin path was used
  int n_samples = 0;
};

StiffConcentrationReport stiff_concentration(const StiffModel& m, int n_samples, std::uint64_t seed,
                                             int null_replicates = 20);

// 1-D W1 between equal-size samples (sorted L1); sliced W1 with 32 seeded
// directions when dim > 1.
double wasserstein1(const Mat& a, const Mat& b, std::uint64_t seed = 7);

struct StiffDynamicRow {
  double eps = 0.0;
  Estimate gap;  // paired E f(Z_t) - E f(iota(U_t)), signed
  double micro_mean = 0.0, limit_mean = 0.0;
  double dt = 0.0;
};

// Micro and limit paths share noise: the limit is driven by
// G^{-1/2}(dW_y + H^T dW_x), which is a standard Brownian motion, so each
// marginal law is exact and only the paired difference is estimated.
std::vector<StiffDynamicRow> stiff_dynamic_check(const StiffModel& base, const Vec& z0,
                                                 const std::function<double(const StiffModel&, const Vec&)>& f,
                                                 double t, const std::vector<double>& eps_grid, int n_paths,
                                                 std::uint64_t seed, double dt_factor = 0.05, int threads = 0);

// Consecutive |gap| values decrease by more than se_mult combined SEs.
bool gaps_decrease_beyond_noise(const std::vector<StiffDynamicRow>& rows, double se_mult);

// Gauss-Hermite (probabilists') nodes and weights for N(0,1), weights sum to 1.
void gauss_hermite_normal(int order, std::vector<double>& nodes, std::vector<double>& weights);

}  // namespace thermoconv
