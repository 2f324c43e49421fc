#include "thermoconv/ou_lab.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "thermoconv/errors.hpp"

namespace thermoconv {

namespace {

Mat spd_inverse(const Mat& s, const char* what) {
  const Eigen::LLT<Mat> llt(sym(s));
  if (llt.info() != Eigen::Success) throw SingularCovariance(std::string(what) + ": covariance not positive definite");
  return sym(llt.solve(Mat::Identity(s.rows(), s.cols())));
}

void check_relative(double residual, double scale, const char* what) {
  if (!(residual <= 1e-9 * std::max(1.0, scale))) {
    std::ostringstream os;
    os << what << " violated: residual " << residual;
    throw Error(os.str());
  }
}

void require_stable_blocks(const BlockMatrix& b) {
  if (!is_positively_stable(b.b11())) throw NotStable("BlockMatrix: B11 not positively stable");
  if (!is_positively_stable(schur_complement(b.B, b.dx)))
    throw NotStable("BlockMatrix: Schur complement C not positively stable");
}

// Time grid used for the monotone-weight diagnostic: 20 points in [0.1, 2].
std::vector<double> weight_grid() {
  std::vector<double> g(20);
  for (int i = 0; i < 20; ++i) g[i] = 0.1 + (2.0 - 0.1) * i / 19.0;
  return g;
}

bool decreasing(const std::vector<double>& v) {
  for (std::size_t k = 1; k < v.size(); ++k)
    if (!(v[k] < v[k - 1] || v[k] <= 1e-14)) return false;
  return true;
}

}  // namespace

BlockMatrix::BlockMatrix(Mat b, int dx_, int dy_) : B(std::move(b)), dx(dx_), dy(dy_) {
  if (dx < 1 || dy < 1) throw DimensionMismatch("BlockMatrix: dx and dy must be >= 1");
  if (B.rows() != dx + dy || B.cols() != dx + dy) {
    std::ostringstream os;
    os << "BlockMatrix: B is " << B.rows() << "x" << B.cols() << ", expected " << dx + dy << " square";
    throw DimensionMismatch(os.str());
  }
  if (!B.allFinite()) throw DimensionMismatch("BlockMatrix: non-finite entry");
}

Mat ieps_matrix(int dx, int dy, double eps) {
  Vec d(dx + dy);
  d.head(dx).setConstant(1.0 / eps);
  d.tail(dy).setOnes();
  return d.asDiagonal();
}

LinearOu OuBar::linear() const {
  const auto n = C.rows();
  return {C, Mat::Identity(n, n), SigmaY, Kbar, std::nullopt};
}

OuEps build_ou(const BlockMatrix& b, double eps) {
  if (!(eps > 0.0) || !std::isfinite(eps)) throw InvalidBounds("build_ou: eps must be positive and finite");
  require_stable_blocks(b);
  OuEps o;
  o.B = b;
  o.eps = eps;
  o.Ieps = ieps_matrix(b.dx, b.dy, eps);
  o.Meps = o.Ieps * b.B;
  if (!is_positively_stable(o.Meps)) {
    std::ostringstream os;
    os << "build_ou: I^eps B not positively stable at eps=" << eps;
    throw NotStable(os.str());
  }
  o.Sigma = solve_lyapunov(o.Meps, 2.0 * o.Ieps);
  const Mat sinv = spd_inverse(o.Sigma, "build_ou");
  o.K = sinv - b.B;

  const Mat res = o.Meps * o.Sigma + o.Sigma * o.Meps.transpose() - 2.0 * o.Ieps;
  check_relative(res.norm() / (2.0 * o.Ieps.norm()), 0.0, "build_ou: Lyapunov identity");
  const Mat ik = o.Ieps * o.K;
  check_relative(sym(sinv * ik).norm(), sinv.norm() * ik.norm(), "build_ou: divergence-free identity");
  return o;
}

OuBar averaged_ou(const BlockMatrix& b) {
  require_stable_blocks(b);
  OuBar o;
  o.C = schur_complement(b.B, b.dx);
  const auto n = o.C.rows();
  o.SigmaY = solve_lyapunov(o.C, 2.0 * Mat::Identity(n, n));
  o.Kbar = spd_inverse(o.SigmaY, "averaged_ou") - o.C;
  const Mat res = o.C * o.SigmaY + o.SigmaY * o.C.transpose() - 2.0 * Mat::Identity(n, n);
  check_relative(res.norm() / (2.0 * std::sqrt(double(n))), 0.0, "averaged_ou: Lyapunov identity");
  return o;
}

GaussianState forward_state(const LinearOu& model, const GaussianState& rho0, double t) {
  if (rho0.dim() != model.M.rows()) throw DimensionMismatch("forward_state: rho0 dimension");
  if (t < 0.0) throw InvalidBounds("forward_state: t must be >= 0");
  if (t == 0.0) return rho0;
  const Mat e = expm(-model.M, t);
  GaussianState out;
  out.mean = e * rho0.mean;
  out.cov = sym(model.Sigma + e * (rho0.cov - model.Sigma) * e.transpose());
  return out;
}

ThermoReport thermo_report(const LinearOu& model, const GaussianState& rho0, double t) {
  const GaussianState st = forward_state(model, rho0, t);
  const auto n = st.mean.size();
  const Mat sinv = spd_inverse(model.Sigma, "thermo_report(Sigma)");
  const Mat stinv = spd_inverse(st.cov, "thermo_report(S_t)");
  // grad log u = G z + g
  const Mat g_mat = sinv - stinv;
  const Vec g_vec = stinv * st.mean;
  const Vec zero = Vec::Zero(n);

  ThermoReport r;
  r.t = t;
  r.eps = model.eps;
  r.F = gaussian_kl(st, GaussianState{Vec::Zero(n), model.Sigma});
  r.I = gaussian_quadratic_expectation(st, g_mat, g_vec, model.A);
  r.sigma_ex = r.I;
  r.sigma_hk = gaussian_quadratic_expectation(st, model.K, zero, model.A);
  r.sigma_total = gaussian_quadratic_expectation(st, model.K - g_mat, -g_vec, model.A);
  return r;
}

double sigma_hk_stationary(const LinearOu& model) {
  return (model.K.transpose() * model.A * model.K * model.Sigma).trace();
}

double locking_residual(const OuEps& me, const GaussianState& rho0, double t, const Mat& psi) {
  const int dx = me.B.dx, dy = me.B.dy;
  if (psi.rows() != dy || psi.cols() != dy) throw DimensionMismatch("locking_residual: psi must be dy x dy");
  const GaussianState st = forward_state(me, rho0, t);
  Mat d = me.K;
  d.bottomRightCorner(dy, dy) -= psi;
  return gaussian_quadratic_expectation(st, d, Vec::Zero(dx + dy), me.Ieps);
}

double completion_of_squares_bound(const OuEps& me, const GaussianState& rho0, double t, const Mat& psi) {
  const int dx = me.B.dx, dy = me.B.dy, n = dx + dy;
  if (psi.rows() != dy || psi.cols() != dy) throw DimensionMismatch("completion_of_squares_bound: psi shape");
  const GaussianState st = forward_state(me, rho0, t);
  // (a, b) = (gamma_y, psi y); (a, b)^T W (a, b) = 2 a^T b - |b|^2.
  Mat d = Mat::Zero(2 * dy, n);
  d.topRows(dy) = me.K.bottomRows(dy);
  d.bottomRightCorner(dy, dy) = psi;
  Mat w = Mat::Zero(2 * dy, 2 * dy);
  w.topRightCorner(dy, dy).setIdentity();
  w.bottomLeftCorner(dy, dy).setIdentity();
  w.bottomRightCorner(dy, dy) = -Mat::Identity(dy, dy);
  return gaussian_quadratic_expectation(st, d, Vec::Zero(2 * dy), w);
}

GaussianState slow_marginal(const GaussianState& rho0, int dx, int dy) {
  if (rho0.dim() != dx + dy) throw DimensionMismatch("slow_marginal: dimension");
  return {rho0.mean.tail(dy), rho0.cov.bottomRightCorner(dy, dy)};
}

GaussianState default_rho0(const BlockMatrix& b, const std::vector<double>& eps_grid,
                           std::vector<std::string>* warnings) {
  if (eps_grid.empty()) throw EmptyGrid("default_rho0: empty eps grid");
  const double emax = *std::max_element(eps_grid.begin(), eps_grid.end());
  GaussianState g{Vec::Ones(b.dim()), 0.25 * build_ou(b, emax).Sigma};
  if (warnings) {
    for (double e : eps_grid) {
      const double lmin = lambda_min_sym(build_ou(b, e).Sigma - g.cov);
      if (lmin < -1e-12) {
        std::ostringstream os;
        os << "S0 is not <= Sigma^eps at eps=" << e << " (lambda_min=" << lmin
           << "); u0 is unbounded there, functionals stay finite";
        warnings->push_back(os.str());
      }
    }
  }
  return g;
}

double richardson_limit(double eps1, double g1, double eps2, double g2) {
  return g2 - eps2 * (g1 - g2) / (eps1 - eps2);
}

RateFit loglog_fit(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  if (n < 2 || y.size() != n) return {std::numeric_limits<double>::quiet_NaN(), 0.0};
  std::vector<double> lx(n), ly(n);
  for (std::size_t i = 0; i < n; ++i) {
    lx[i] = std::log(x[i]);
    ly[i] = std::log(std::max(std::abs(y[i]), 1e-300));
  }
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) mx += lx[i], my += ly[i];
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) sxx += (lx[i] - mx) * (lx[i] - mx), sxy += (lx[i] - mx) * (ly[i] - my);
  RateFit f;
  f.slope = sxy / sxx;
  double ss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = ly[i] - (my + f.slope * (lx[i] - mx));
    ss += r * r;
  }
  f.residual = std::sqrt(ss / n);
  return f;
}

void derive_verdicts(SweepResult& r, const SweepTolerances& tol) {
  const double gt = tol.gap_tol;
  r.per_t.clear();
  r.verdicts = {true, true, true, true};
  for (double t : r.times) {
    std::vector<SweepRow*> col;
    for (auto& row : r.rows)
      if (row.t == t) col.push_back(&row);
    std::sort(col.begin(), col.end(), [](auto* a, auto* b) { return a->eps > b->eps; });
    const std::size_t n = col.size();
    if (n == 0) continue;

    std::vector<double> eps(n), dF(n), dI(n), dhk(n), dtot(n), R(n);
    for (std::size_t k = 0; k < n; ++k) {
      const SweepRow& w = *col[k];
      eps[k] = w.eps;
      dF[k] = w.F_eps - w.F_bar;
      dI[k] = w.I_eps - w.I_bar;
      dhk[k] = w.shk_eps - w.shk_bar;
      dtot[k] = w.stot_eps - w.stot_bar;
      R[k] = w.R_eps;
    }
    const std::size_t win = std::min<std::size_t>(n, std::max(tol.fit_window, 1));
    const std::size_t tail = std::min<std::size_t>(n, std::max(tol.tail, 1));
    const auto last = [&](const std::vector<double>& v, std::size_t m, bool absval) {
      std::vector<double> out(v.end() - m, v.end());
      if (absval)
        for (double& x : out) x = std::abs(x);
      return out;
    };
    const auto limit = [&](const std::vector<double>& v) {
      return n >= 2 ? richardson_limit(eps[n - 2], v[n - 2], eps[n - 1], v[n - 1]) : v[n - 1];
    };
    const auto min_tail_limit = [&](const std::vector<double>& v) {
      double m = std::numeric_limits<double>::infinity();
      if (tail < 2) return v[n - 1];
      for (std::size_t k = n - tail; k + 1 < n; ++k) m = std::min(m, richardson_limit(eps[k], v[k], eps[k + 1], v[k + 1]));
      return m;
    };

    TimeSummary s;
    s.t = t;
    const auto ew = last(eps, win, false);
    s.rate_F = loglog_fit(ew, last(dF, win, true));
    s.rate_I = loglog_fit(ew, last(dI, win, true));
    s.rate_hk = loglog_fit(ew, last(dhk, win, true));
    s.rate_R = loglog_fit(ew, last(R, win, true));
    s.dF_final = dF[n - 1];
    s.dI_final = dI[n - 1];
    s.dhk_final = dhk[n - 1];
    s.R_final = R[n - 1];
    s.dF_limit = limit(dF);
    s.dI_limit = limit(dI);
    s.dhk_limit = limit(dhk);
    s.dtot_limit = limit(dtot);
    s.R_limit = limit(R);
    s.min_tail_dhk = min_tail_limit(dhk);
    s.min_tail_dtot = min_tail_limit(dtot);

    auto& v = s.verdicts;
    v.level1 = decreasing(last(dF, win, true)) && std::abs(s.dF_limit) < gt;
    v.level2 = v.level1 && decreasing(last(dI, win, true)) && std::abs(s.dI_limit) < gt;
    v.level3 = v.level2 && s.min_tail_dhk > -gt && s.min_tail_dtot > -gt;
    v.level4 = v.level3 && s.R_limit < gt && std::abs(s.dhk_limit) < gt;
    for (auto* row : col) {
      row->level1 = v.level1;
      row->level2 = v.level2;
      row->level3 = v.level3;
      row->level4 = v.level4;
    }
    r.verdicts.level1 = r.verdicts.level1 && v.level1;
    r.verdicts.level2 = r.verdicts.level2 && v.level2;
    r.verdicts.level3 = r.verdicts.level3 && v.level3;
    r.verdicts.level4 = r.verdicts.level4 && v.level4;
    r.per_t.push_back(s);
  }
}

bool monotone_weight_holds(const LinearOu& model, const GaussianState& rho0, double kappa,
                           const std::vector<double>& times) {
  double prev = std::numeric_limits<double>::infinity();
  for (double t : times) {
    const double g = std::exp(-2.0 * kappa * t) * thermo_report(model, rho0, t).I;
    if (g > prev * (1.0 + 1e-10) + 1e-14) return false;
    prev = g;
  }
  return true;
}

SweepResult ou_sweep(const BlockMatrix& b, const GaussianState& rho0, const std::vector<double>& times,
                     const std::vector<double>& eps_grid, double kappa, const SweepTolerances& tol) {
  if (eps_grid.empty()) throw EmptyGrid("ou_sweep: empty eps grid");
  if (times.empty()) throw EmptyGrid("ou_sweep: empty time list");
  for (std::size_t k = 0; k < eps_grid.size(); ++k) {
    if (!(eps_grid[k] > 0.0)) throw InvalidBounds("ou_sweep: eps must be positive");
    if (k > 0 && !(eps_grid[k] < eps_grid[k - 1])) throw InvalidBounds("ou_sweep: eps grid must be strictly decreasing");
  }
  for (double t : times)
    if (!(t > 0.0)) throw InvalidBounds("ou_sweep: times must be positive");
  if (rho0.dim() != b.dim()) throw DimensionMismatch("ou_sweep: rho0 dimension");
  check_gaussian_state(rho0);

  SweepResult r;
  r.eps_grid = eps_grid;
  r.times = times;
  r.kappa = kappa;
  const OuBar bar = averaged_ou(b);
  const GaussianState rho_bar = slow_marginal(rho0, b.dx, b.dy);
  std::vector<ThermoReport> bar_reports;
  for (double t : times) bar_reports.push_back(thermo_report(bar, rho_bar, t));

  const auto wgrid = weight_grid();
  r.monotone_weight_ok = monotone_weight_holds(bar.linear(), rho_bar, kappa, wgrid);
  r.shk_ss_bar = sigma_hk_stationary(bar.linear());
  for (double e : eps_grid) {
    const OuEps me = build_ou(b, e);
    if (lambda_min_sym(me.Sigma - rho0.cov) < -1e-12) {
      std::ostringstream os;
      os << "S0 is not <= Sigma^eps at eps=" << e << "; u0 unbounded, functionals remain finite";
      r.warnings.push_back(os.str());
    }
    r.shk_ss_eps.push_back(sigma_hk_stationary(me.linear()));
    r.monotone_weight_ok = r.monotone_weight_ok && monotone_weight_holds(me.linear(), rho0, kappa, wgrid);
    for (std::size_t i = 0; i < times.size(); ++i) {
      const ThermoReport mr = thermo_report(me, rho0, times[i]);
      const ThermoReport& br = bar_reports[i];
      SweepRow row;
      row.eps = e;
      row.t = times[i];
      row.F_eps = mr.F;
      row.F_bar = br.F;
      row.I_eps = mr.I;
      row.I_bar = br.I;
      row.shk_eps = mr.sigma_hk;
      row.shk_bar = br.sigma_hk;
      row.stot_eps = mr.sigma_total;
      row.stot_bar = br.sigma_total;
      row.R_eps = locking_residual(me, bar, rho0, times[i]);
      r.rows.push_back(row);
    }
  }
  derive_verdicts(r, tol);

  const std::size_t n = eps_grid.size();
  const std::size_t tail = std::min<std::size_t>(n, std::max(tol.tail, 1));
  double m = std::numeric_limits<double>::infinity();
  if (tail < 2) {
    m = r.shk_ss_eps.back() - r.shk_ss_bar;
  } else {
    for (std::size_t k = n - tail; k + 1 < n; ++k)
      m = std::min(m, richardson_limit(eps_grid[k], r.shk_ss_eps[k] - r.shk_ss_bar, eps_grid[k + 1],
                                       r.shk_ss_eps[k + 1] - r.shk_ss_bar));
  }
  r.shk_ss_limit = n >= 2 ? richardson_limit(eps_grid[n - 2], r.shk_ss_eps[n - 2], eps_grid[n - 1], r.shk_ss_eps[n - 1])
                          : r.shk_ss_eps.back();
  r.level3ss = m > -tol.gap_tol;
  return r;
}

std::string sweep_csv_header() {
  return "eps,t,F_eps,F_bar,I_eps,I_bar,shk_eps,shk_bar,stot_eps,stot_bar,R_eps,level1,level2,level3,level4";
}

std::string sweep_csv(const SweepResult& r) {
  std::ostringstream os;
  os << sweep_csv_header() << "\n";
  char buf[64];
  const auto num = [&](double x) {
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return std::string(buf);
  };
  for (const auto& w : r.rows) {
    os << num(w.eps) << ',' << num(w.t) << ',' << num(w.F_eps) << ',' << num(w.F_bar) << ',' << num(w.I_eps) << ','
       << num(w.I_bar) << ',' << num(w.shk_eps) << ',' << num(w.shk_bar) << ',' << num(w.stot_eps) << ','
       << num(w.stot_bar) << ',' << num(w.R_eps) << ',' << int(w.level1) << ',' << int(w.level2) << ','
       << int(w.level3) << ',' << int(w.level4) << "\n";
  }
  return os.str();
}

std::vector<SweepRow> parse_sweep_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != sweep_csv_header()) throw ConfigError("parse_sweep_csv: unexpected header");
  std::vector<SweepRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(std::stod(cell));
    if (f.size() != 15) throw ConfigError("parse_sweep_csv: expected 15 columns");
    SweepRow w;
    w.eps = f[0];
    w.t = f[1];
    w.F_eps = f[2];
    w.F_bar = f[3];
    w.I_eps = f[4];
    w.I_bar = f[5];
    w.shk_eps = f[6];
    w.shk_bar = f[7];
    w.stot_eps = f[8];
    w.stot_bar = f[9];
    w.R_eps = f[10];
    w.level1 = f[11] != 0;
    w.level2 = f[12] != 0;
    w.level3 = f[13] != 0;
    w.level4 = f[14] != 0;
    rows.push_back(w);
  }
  return rows;
}

}  // namespace thermoconv
