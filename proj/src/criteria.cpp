#include "thermoconv/criteria.hpp"

#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <sstream>

#include <omp.h>

#include "thermoconv/errors.hpp"

namespace thermoconv {

namespace {

constexpr double kCdTol = 1e-9;

std::string fmt_point(const Vec& z) {
  std::ostringstream os;
  os << "(";
  for (Eigen::Index i = 0; i < z.size(); ++i) os << (i ? ", " : "") << z(i);
  os << ")";
  return os.str();
}

// Evaluates f at every grid point (in parallel when threads > 1) and returns
// the values in grid order, so reductions are schedule-independent.
std::vector<double> scan(const std::vector<Vec>& grid, const std::function<double(const Vec&)>& f, int threads) {
  std::vector<double> v(grid.size());
  const int n = static_cast<int>(grid.size());
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) v[i] = f(grid[i]);
    return v;
  }
  std::exception_ptr err;
  std::mutex mu;
#pragma omp parallel for schedule(static) num_threads(threads)
  for (int i = 0; i < n; ++i) {
    try {
      v[i] = f(grid[i]);
    } catch (...) {
      std::lock_guard<std::mutex> lock(mu);
      if (!err) err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);
  return v;
}

std::size_t argmin(const std::vector<double>& v) {
  std::size_t k = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] < v[k]) k = i;
  return k;
}

CdVerdict cd_constant_impl(const MatField& hessV, const MatField& jacF, const Mat& Ainv, const std::vector<Vec>& grid,
                           double kappa, int threads) {
  if (grid.empty()) throw EmptyGrid("cd_constant_diffusion: empty grid");
  if (Ainv.rows() != Ainv.cols()) throw DimensionMismatch("cd_constant_diffusion: Ainv not square");
  if (Eigen::LLT<Mat>(sym(Ainv)).info() != Eigen::Success)
    throw SingularA("cd_constant_diffusion: Ainv not positive definite");
  const auto vals = scan(
      grid,
      [&](const Vec& z) {
        const Mat h = hessV(z), j = jacF(z);
        if (h.rows() != Ainv.rows() || j.rows() != Ainv.rows())
          throw DimensionMismatch("cd_constant_diffusion: callback dimension");
        return lambda_min_sym(sym(h) - sym(j) + kappa * Ainv);
      },
      threads);
  const std::size_t k = argmin(vals);
  CdVerdict v;
  v.kappa = kappa;
  v.worst_eigenvalue = vals[k];
  v.worst_point = grid[k];
  v.satisfied = vals[k] >= -kCdTol;
  v.grid_size = grid.size();
  return v;
}

}  // namespace

CdVerdict cd_constant_diffusion(const MatField& hessV, const MatField& jacF, const Mat& Ainv,
                                const std::vector<Vec>& grid, double kappa, int threads) {
  return cd_constant_impl(hessV, jacF, Ainv, grid, kappa, worker_count(threads));
}

CdVerdict cd_constant_diffusion_serial(const MatField& hessV, const MatField& jacF, const Mat& Ainv,
                                       const std::vector<Vec>& grid, double kappa) {
  return cd_constant_impl(hessV, jacF, Ainv, grid, kappa, 1);
}

SchurAveragingResult cd_schur_averaging(const MatField& jacb, const Mat& a1, const Mat& a2,
                                        const std::vector<Vec>& grid, int threads) {
  if (grid.empty()) throw EmptyGrid("cd_schur_averaging: empty grid");
  const auto n1 = a1.rows(), n2 = a2.rows();
  if (a1.cols() != n1 || a2.cols() != n2) throw DimensionMismatch("cd_schur_averaging: a1/a2 not square");
  Mat d = Mat::Zero(n1 + n2, n1 + n2);
  d.topLeftCorner(n1, n1) = spd_sqrt(a1);
  d.bottomRightCorner(n2, n2) = spd_sqrt(a2);
  const int split = static_cast<int>(n1);

  const auto vals = scan(
      grid,
      [&](const Vec& z) {
        const Mat j = jacb(z);
        if (j.rows() != n1 + n2 || j.cols() != n1 + n2) throw DimensionMismatch("cd_schur_averaging: jacobian shape");
        const Mat s = sym(d * sym(-j) * d);
        if (Eigen::LLT<Mat>(s.topLeftCorner(split, split)).info() != Eigen::Success ||
            lambda_min_sym(s.topLeftCorner(split, split)) <= 0.0)
          throw FastBlockNotPD("cd_schur_averaging: S11 not positive definite at z=" + fmt_point(z));
        return lambda_min_sym(schur_complement(s, split));
      },
      worker_count(threads));
  const std::size_t k = argmin(vals);
  SchurAveragingResult r;
  r.min_schur_eigenvalue = vals[k];
  r.kappa = std::max(0.0, -vals[k]);
  r.verdict.kappa = r.kappa;
  r.verdict.satisfied = true;
  r.verdict.worst_point = grid[k];
  r.verdict.worst_eigenvalue = vals[k] + r.kappa;
  r.verdict.grid_size = grid.size();
  return r;
}

double ou_cd_rho(const BlockMatrix& b) {
  const Mat s = sym(b.B);
  const Mat s11 = s.topLeftCorner(b.dx, b.dx);
  if (Eigen::LLT<Mat>(s11).info() != Eigen::Success || lambda_min_sym(s11) <= 0.0)
    throw FastBlockNotPD("ou_cd_rho: Sym(B11) not positive definite");
  return std::min(0.0, lambda_min_sym(schur_complement(s, b.dx)));
}

IkbConstants ikb_constants(const IkbInputs& in) {
  const double nonneg[] = {in.L_b1x, in.L_b1y, in.L_b2x, in.L_b2y, in.L_eta1x, in.L_eta1y, in.L_eta2y,
                           in.L_B1x, in.L_B1y, in.L_B2y,  in.H1_inf,   in.H2_inf,   in.sup_LfB1,
                           in.sup_LsB1, in.sup_M2, in.Bxy_W, in.B2x_W};
  for (double v : nonneg)
    if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidBounds("ikb_constants: primitive bounds must be finite and >= 0");
  if (!(in.lambda1 > 0.0) || !(in.lambda2 > 0.0) || in.lambda1 > in.Lambda1 || in.lambda2 > in.Lambda2)
    throw InvalidBounds("ikb_constants: need 0 < lambda_i <= Lambda_i");
  if (!std::isfinite(in.Kx_W) || !std::isfinite(in.M2y_W) || !std::isfinite(in.Lambda1) || !std::isfinite(in.Lambda2))
    throw InvalidBounds("ikb_constants: non-finite input");
  if (in.r1 < 1) throw InvalidBounds("ikb_constants: r1 must be >= 1");

  IkbConstants k;
  k.in = in;
  k.C1h = 2.0 * in.Lambda1 / in.lambda1 * in.L_eta1x * in.L_eta1x;
  k.C1j = 2.0 * in.Lambda2 / in.lambda1 * in.L_eta1y * in.L_eta1y;
  k.C2sigma = 2.0 * in.Lambda2 / in.lambda2 * in.L_eta2y * in.L_eta2y;
  k.CtildeLfB1 = in.Lambda1 * in.sup_LfB1;
  k.Ch = in.Lambda1 * in.sup_LsB1;
  k.Cj0 = in.Lambda2 * in.sup_M2;
  k.Ccross = 2.0 * in.Lambda2 / in.lambda2 * in.L_B2y * in.L_B2y * in.H2_inf * in.H2_inf;
  k.c_r1 = 2.0 * in.r1;
  k.CX1 = k.c_r1 * in.L_B1x * in.H1_inf * (in.L_eta1x + 0.5 * in.L_eta1y) * in.Lambda1;
  k.CY1 = k.c_r1 * in.L_B1x * in.H1_inf * (0.5 * in.L_eta1y) * in.Lambda2;
  k.alpha0 = 2.0 * in.Kx_W - (in.Lambda1 * in.Bxy_W + k.C1h + k.CtildeLfB1 + k.CX1);
  k.beta0 = in.Lambda2 * in.Bxy_W + k.C1j + k.CY1;
  k.c = in.Lambda1 * in.B2x_W;
  k.d = in.Lambda2 * in.B2x_W + 2.0 * in.M2y_W + k.C2sigma + k.Cj0 + k.Ccross;
  k.rho = (k.beta0 + k.d) / 2.0;
  k.gap_holds = k.alpha0 > k.c;
  return k;
}

std::vector<Vec> box_grid(const Vec& lo, const Vec& hi, int per_dim) {
  if (lo.size() != hi.size() || lo.size() == 0) throw DimensionMismatch("box_grid: bounds dimension");
  if (per_dim < 1) throw EmptyGrid("box_grid: per_dim must be >= 1");
  const auto n = lo.size();
  std::size_t total = 1;
  for (Eigen::Index i = 0; i < n; ++i) total *= per_dim;
  std::vector<Vec> g;
  g.reserve(total);
  for (std::size_t idx = 0; idx < total; ++idx) {
    Vec z(n);
    std::size_t r = idx;
    for (Eigen::Index i = 0; i < n; ++i) {
      const int k = static_cast<int>(r % per_dim);
      r /= per_dim;
      z(i) = per_dim == 1 ? 0.5 * (lo(i) + hi(i)) : lo(i) + (hi(i) - lo(i)) * k / (per_dim - 1);
    }
    g.push_back(z);
  }
  return g;
}

SampledSup sampled_sup_opnorm(const MatField& f, const Vec& lo, const Vec& hi, int per_dim) {
  const auto g = box_grid(lo, hi, per_dim);
  SampledSup s;
  s.points = g.size();
  for (const Vec& z : g) {
    const Mat m = f(z);
    const double op = m.size() == 0 ? 0.0 : Eigen::JacobiSVD<Mat>(m).singularValues()(0);
    s.value = std::max(s.value, op);
  }
  return s;
}

SyncReport sync_contraction_test(const DiffusionModel& model, const std::vector<std::pair<Vec, Vec>>& pairs,
                                 double horizon, double rate, int n_reps, std::uint64_t seed, double dt, int n_grid,
                                 int threads) {
  if (pairs.empty()) throw EmptyGrid("sync_contraction_test: no pairs");
  if (n_grid < 1) throw EmptyGrid("sync_contraction_test: n_grid must be >= 1");
  const int n_steps = static_cast<int>(std::llround(horizon / dt));
  std::vector<double> times;
  for (int k = 0; k <= n_grid; ++k) times.push_back(dt * std::llround(double(k) * n_steps / n_grid));
  SyncReport rep;
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto& [z1, z2] = pairs[p];
    const auto ce = couple_ensemble(model, z1, z2, dt, times, n_reps, seed + 0x9E3779B97F4A7C15ull * p, threads);
    SyncPairResult r;
    r.z1 = z1;
    r.z2 = z2;
    r.times = times;
    r.energy = ce.energy;
    r.initial_energy = ce.energy.front().mean;
    for (std::size_t k = 0; k < times.size(); ++k) {
      const double bound = std::exp(2.0 * rate * times[k]) * r.initial_energy;
      r.bound.push_back(bound);
      const Estimate& e = ce.energy[k];
      if (bound > 0.0) r.max_ratio = std::max(r.max_ratio, e.mean / bound);
      const double allowed = e.mean > 0.0 ? bound * (1.0 + 3.0 * e.se / e.mean) : bound;
      if (e.mean > allowed) r.pass = false;
    }
    rep.max_ratio = std::max(rep.max_ratio, r.max_ratio);
    rep.pass = rep.pass && r.pass;
    rep.pairs.push_back(std::move(r));
  }
  return rep;
}

}  // namespace thermoconv
