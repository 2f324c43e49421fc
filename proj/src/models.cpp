#include "thermoconv/models.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "thermoconv/errors.hpp"
#include "thermoconv/rng.hpp"

namespace thermoconv {

void gauss_hermite_normal(int order, std::vector<double>& nodes, std::vector<double>& weights) {
  if (order < 1) throw InvalidBounds("gauss_hermite_normal: order must be >= 1");
  // Golub-Welsch on the Jacobi matrix of the probabilists' Hermite recurrence.
  Mat j = Mat::Zero(order, order);
  for (int k = 1; k < order; ++k) j(k, k - 1) = j(k - 1, k) = std::sqrt(double(k));
  Eigen::SelfAdjointEigenSolver<Mat> es(j);
  nodes.resize(order);
  weights.resize(order);
  for (int k = 0; k < order; ++k) {
    nodes[k] = es.eigenvalues()(k);
    weights[k] = es.eigenvectors()(0, k) * es.eigenvectors()(0, k);
  }
}

namespace {

// Tensor Gauss-Hermite rule for N(mean, cov) in small dimension.
struct GaussRule {
  std::vector<Vec> points;
  std::vector<double> weights;
};

GaussRule gauss_rule(const GaussianState& g, int order) {
  std::vector<double> x1, w1;
  gauss_hermite_normal(order, x1, w1);
  const int d = g.dim();
  const Mat l = Eigen::LLT<Mat>(g.cov).matrixL();
  GaussRule r;
  std::size_t total = 1;
  for (int i = 0; i < d; ++i) total *= order;
  Vec xi(d);
  for (std::size_t idx = 0; idx < total; ++idx) {
    std::size_t rem = idx;
    double w = 1.0;
    for (int i = 0; i < d; ++i) {
      const int k = static_cast<int>(rem % order);
      rem /= order;
      xi(i) = x1[k];
      w *= w1[k];
    }
    r.points.push_back(g.mean + l * xi);
    r.weights.push_back(w);
  }
  return r;
}

Vec gamma_bar(const AveragingModel& m, const Vec& y, const GaussRule& rule) {
  Vec acc = Vec::Zero(m.dy);
  for (std::size_t k = 0; k < rule.points.size(); ++k) acc += rule.weights[k] * m.gamma_y(rule.points[k], y);
  return acc;
}

}  // namespace

AveragingModel make_averaging_demo(double alpha) {
  AveragingModel m;
  std::ostringstream os;
  os << "avg-demo(alpha=" << alpha << ")";
  m.name = os.str();
  m.dx = 1;
  m.dy = 2;
  m.a1 = [](const Vec&, const Vec&) { return Mat::Identity(1, 1); };
  m.a2 = [](const Vec&) { return Mat::Identity(2, 2); };
  m.V = [](const Vec& x, const Vec& y) { return 0.5 * (x.squaredNorm() + y.squaredNorm()); };
  m.gradV = [](const Vec& x, const Vec& y) {
    Vec g(3);
    g << x(0), y(0), y(1);
    return g;
  };
  m.gamma_y = [alpha](const Vec& x, const Vec& y) {
    Vec g(2);
    const double s = 1.0 + alpha * x(0);
    g << -s * y(1), s * y(0);
    return g;
  };
  m.fibre = [](const Vec&) { return GaussianState{Vec::Zero(1), Mat::Identity(1, 1)}; };
  m.sample_pi = [](int n, std::uint64_t seed) {
    Mat s(n, 3);
    for (int i = 0; i < n; ++i) {
      KeyedNormal g = sampler_stream(seed, static_cast<std::uint64_t>(i));
      for (int j = 0; j < 3; ++j) s(i, j) = g();
    }
    return s;
  };
  m.pi_bar_density = [](const Vec& y) { return std::exp(-0.5 * y.squaredNorm()); };
  return m;
}

double averaging_divergence_residual(const AveragingModel& m, const std::vector<Vec>& grid, double h) {
  if (grid.empty()) throw EmptyGrid("averaging_divergence_residual: empty grid");
  double worst = 0.0;
  for (const Vec& z : grid) {
    if (z.size() != m.dx + m.dy) throw DimensionMismatch("averaging_divergence_residual: grid point dimension");
    const Vec x = z.head(m.dx);
    const auto flux = [&](const Vec& y) -> Vec { return std::exp(-m.V(x, y)) * m.gamma_y(x, y); };
    const Vec y = z.tail(m.dy);
    double div = 0.0;
    for (int i = 0; i < m.dy; ++i) {
      Vec yp = y, ym = y;
      yp(i) += h;
      ym(i) -= h;
      div += (flux(yp)(i) - flux(ym)(i)) / (2.0 * h);
    }
    worst = std::max(worst, std::abs(div) / std::max(1.0, flux(y).norm()));
  }
  return worst;
}

void require_divergence_free(const AveragingModel& m, const std::vector<Vec>& grid) {
  const double r = averaging_divergence_residual(m, grid);
  if (!(r <= 1e-6)) {
    std::ostringstream os;
    os << "model " << m.name << ": gamma_y fails the stationarity (divergence) check, residual " << r << " > 1e-6";
    throw Error(os.str());
  }
}

DiffusionModel averaging_diffusion(const AveragingModel& m, double eps) {
  if (!(eps > 0.0)) throw InvalidBounds("averaging_diffusion: eps must be positive");
  const int dx = m.dx, dy = m.dy, n = dx + dy;
  DiffusionModel d;
  d.dim = n;
  d.noise_dim = n;
  d.fast_dims = dx;
  d.eps = eps;
  const auto A = [m, eps, dx, dy](const Vec& z, Mat& out) {
    out.setZero(dx + dy, dx + dy);
    out.topLeftCorner(dx, dx) = m.a1(z.head(dx), z.tail(dy)) / eps;
    out.bottomRightCorner(dy, dy) = m.a2(z.tail(dy));
  };
  d.A = A;
  d.drift = [m, A, dx, dy, n](const Vec& z, Vec& out) {
    Mat a(n, n);
    A(z, a);
    const Vec x = z.head(dx), y = z.tail(dy);
    out = -a * m.gradV(x, y);
    out.tail(dy) += m.gamma_y(x, y);
  };
  d.noise_factor = [A, n](const Vec& z, Mat& out) {
    Mat a(n, n);
    A(z, a);
    out = std::sqrt(2.0) * spd_sqrt(a);
  };
  d.gamma = [m, dx, dy](const Vec& z, Vec& out) {
    out.setZero(dx + dy);
    out.tail(dy) = m.gamma_y(z.head(dx), z.tail(dy));
  };
  return d;
}

Vec averaged_force(const AveragingModel& m, const Vec& y, int order) {
  if (!m.fibre) throw Error("averaged_force: model has no closed-form fibre law");
  const GaussRule rule = gauss_rule(m.fibre(y), order);
  return m.a2(y).ldlt().solve(gamma_bar(m, y, rule));
}

Estimate sigma_hk_mc(const DiffusionModel& model, const Mat& samples) {
  if (!model.gamma) throw Error("sigma_hk_mc: model has no gamma");
  if (samples.cols() != model.dim) throw DimensionMismatch("sigma_hk_mc: sample dimension");
  std::vector<double> v(samples.rows());
  Vec z(model.dim), g(model.dim);
  Mat a(model.dim, model.dim);
  for (Eigen::Index i = 0; i < samples.rows(); ++i) {
    z = samples.row(i).transpose();
    model.gamma(z, g);
    if (g.isZero(0.0)) {
      v[i] = 0.0;
      continue;
    }
    if (model.linear)
      a = model.linear->A;
    else
      model.A(z, a);
    const Eigen::LLT<Mat> llt(a);
    if (llt.info() != Eigen::Success) throw SingularA("sigma_hk_mc: A(z) not positive definite");
    v[i] = g.dot(llt.solve(g));
  }
  return mc_expectation(v);
}

Estimate steady_gap_mc(const AveragingModel& m, const Mat& samples, int order) {
  if (samples.cols() != m.dx + m.dy) throw DimensionMismatch("steady_gap_mc: sample dimension");
  std::vector<double> v(samples.rows());
  for (Eigen::Index i = 0; i < samples.rows(); ++i) {
    const Vec x = samples.row(i).head(m.dx).transpose();
    const Vec y = samples.row(i).tail(m.dy).transpose();
    const auto a2 = m.a2(y).ldlt();
    const Vec g = m.gamma_y(x, y);
    const Vec gb = gamma_bar(m, y, gauss_rule(m.fibre(y), order));
    v[i] = g.dot(a2.solve(g)) - gb.dot(a2.solve(gb));
  }
  return mc_expectation(v);
}

double locking_gap_quadrature(const AveragingModel& m, int y_points, double half_width, int x_order) {
  if (!m.fibre || !m.pi_bar_density) throw Error("locking_gap_quadrature: needs Gaussian fibres and pi_bar");
  if (y_points < 3) throw EmptyGrid("locking_gap_quadrature: need >= 3 points per axis");
  const auto integrate_box = [&](double hw) {
    const std::vector<Vec> grid = [&] {
      std::vector<Vec> g;
      std::size_t total = 1;
      for (int i = 0; i < m.dy; ++i) total *= y_points;
      for (std::size_t idx = 0; idx < total; ++idx) {
        Vec y(m.dy);
        std::size_t r = idx;
        for (int i = 0; i < m.dy; ++i) {
          y(i) = -hw + 2.0 * hw * double(r % y_points) / (y_points - 1);
          r /= y_points;
        }
        g.push_back(y);
      }
      return g;
    }();
    double num = 0.0, den = 0.0;
    for (const Vec& y : grid) {
      double tw = 1.0;  // trapezoid end weights
      for (int i = 0; i < m.dy; ++i)
        if (std::abs(std::abs(y(i)) - hw) < 1e-12 * hw) tw *= 0.5;
      const double p = tw * m.pi_bar_density(y);
      if (p == 0.0) continue;
      const GaussRule rule = gauss_rule(m.fibre(y), x_order);
      const Mat a2 = m.a2(y);
      const auto a2f = a2.ldlt();
      const Vec fbar = a2f.solve(gamma_bar(m, y, rule));
      double inner = 0.0;
      for (std::size_t k = 0; k < rule.points.size(); ++k) {
        const Vec df = a2f.solve(m.gamma_y(rule.points[k], y)) - fbar;
        inner += rule.weights[k] * df.dot(a2 * df);
      }
      num += p * inner;
      den += p;
    }
    return num / den;
  };
  const double full = integrate_box(half_width);
  const double inner = integrate_box(0.8 * half_width);
  if (std::abs(full - inner) > 1e-4) {
    std::ostringstream os;
    os << "locking_gap_quadrature: tail truncation estimate " << std::abs(full - inner) << " > 1e-4";
    throw QuadratureDivergence(os.str());
  }
  return full;
}

// ---------------------------------------------------------------------------

namespace {

Mat constraint_jacobian(const StiffModel& m) {  // dU-direction: r = [I, -H] z - b
  Mat j(m.dx, m.dx + m.dy);
  j.leftCols(m.dx).setIdentity();
  j.rightCols(m.dy) = -m.H;
  return j;
}

Mat embed_jacobian(const StiffModel& m) {  // d iota / du = [H; I]
  Mat j(m.dx + m.dy, m.dy);
  j.topRows(m.dx) = m.H;
  j.bottomRows(m.dy).setIdentity();
  return j;
}

StiffModel scalar_stiff(double eps) {
  StiffModel m;
  m.dx = m.dy = 1;
  m.H = Mat::Ones(1, 1);
  m.b = Vec::Zero(1);
  m.Bmat = Mat::Ones(1, 1);
  m.eps = eps;
  return m;
}

void check_stiff(const StiffModel& m) {
  if (m.dx < 1 || m.dy < 1 || m.H.rows() != m.dx || m.H.cols() != m.dy || m.b.size() != m.dx ||
      m.Bmat.rows() != m.dx || m.Bmat.cols() != m.dx)
    throw DimensionMismatch("StiffModel: inconsistent shapes");
  if (!(m.eps > 0.0)) throw InvalidBounds("StiffModel: eps must be positive");
  if (Eigen::LLT<Mat>(sym(m.Bmat)).info() != Eigen::Success)
    throw SingularCovariance("StiffModel: constraint Hessian B not positive definite");
}

}  // namespace

StiffModel make_stiff_quadratic(double eps) {
  StiffModel m = scalar_stiff(eps);
  m.name = "stiff-quadratic";
  m.V = [](const Vec& z) { return 0.5 * z.squaredNorm(); };
  m.gradV = [](const Vec& z) { return Vec(z); };
  m.quadratic = StiffModel::Quadratic{Mat::Identity(2, 2), Vec::Zero(2), nullptr};
  return m;
}

StiffModel make_stiff_quartic(double eps) {
  StiffModel m = scalar_stiff(eps);
  m.name = "stiff-quartic";
  m.V = [](const Vec& z) { return 0.5 * z.squaredNorm() + 0.25 * std::pow(z(0), 4); };
  m.gradV = [](const Vec& z) {
    Vec g = z;
    g(0) += z(0) * z(0) * z(0);
    return g;
  };
  m.quadratic = StiffModel::Quadratic{Mat::Identity(2, 2), Vec::Zero(2), [](const Vec& z) {
                                        return 0.25 * std::pow(z(0), 4);
                                      }};
  return m;
}

Mat stiff_metric(const StiffModel& m) { return Mat::Identity(m.dy, m.dy) + m.H.transpose() * m.H; }

Vec stiff_phase_map(const StiffModel& m, const Vec& z) {
  check_stiff(m);
  if (z.size() != m.dx + m.dy) throw DimensionMismatch("stiff_phase_map: state dimension");
  return stiff_metric(m).ldlt().solve(z.tail(m.dy) + m.H.transpose() * (z.head(m.dx) - m.b));
}

Vec stiff_embed(const StiffModel& m, const Vec& u) {
  if (u.size() != m.dy) throw DimensionMismatch("stiff_embed: slow dimension");
  Vec z(m.dx + m.dy);
  z.head(m.dx) = m.H * u + m.b;
  z.tail(m.dy) = u;
  return z;
}

DiffusionModel stiff_micro_model(const StiffModel& m) {
  check_stiff(m);
  const int n = m.dx + m.dy;
  const Mat ju = constraint_jacobian(m);
  const Mat hu = ju.transpose() * m.Bmat * ju;  // Hessian of U
  const Vec gu0 = -ju.transpose() * (m.Bmat * m.b);
  const double k = 1.0 / (m.eps * m.eps);
  DiffusionModel d;
  d.dim = n;
  d.noise_dim = n;
  d.eps = m.eps;
  d.drift = [gv = m.gradV, hu, gu0, k](const Vec& z, Vec& out) {
    out = -gv(z);
    out.noalias() -= k * (hu * z);
    out -= k * gu0;
  };
  d.constant_noise = std::sqrt(2.0) * Mat::Identity(n, n);
  d.A = [n](const Vec&, Mat& out) { out.setIdentity(n, n); };
  return d;
}

DiffusionModel stiff_limit_model(const StiffModel& m) {
  check_stiff(m);
  const Mat g = stiff_metric(m);
  const Mat ginv = g.inverse();
  const Mat je = embed_jacobian(m);
  DiffusionModel d;
  d.dim = m.dy;
  d.noise_dim = m.dy;
  const Mat pull = -ginv * je.transpose();
  d.drift = [m, pull](const Vec& u, Vec& out) {
    thread_local Vec z;
    z.resize(m.dx + m.dy);
    z.head(m.dx).noalias() = m.H * u;
    z.head(m.dx) += m.b;
    z.tail(m.dy) = u;
    out.noalias() = pull * m.gradV(z);
  };
  d.constant_noise = std::sqrt(2.0) * spd_inv_sqrt(g);
  d.A = [ginv](const Vec&, Mat& out) { out = ginv; };
  return d;
}

double wasserstein1(const Mat& a, const Mat& b, std::uint64_t seed) {
  if (a.cols() != b.cols() || a.rows() != b.rows() || a.rows() == 0)
    throw DimensionMismatch("wasserstein1: samples must have equal, nonzero size");
  const auto w1d = [](std::vector<double> p, std::vector<double> q) {
    std::sort(p.begin(), p.end());
    std::sort(q.begin(), q.end());
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
    return s / p.size();
  };
  const auto n = a.rows();
  if (a.cols() == 1) {
    return w1d(std::vector<double>(a.data(), a.data() + n), std::vector<double>(b.data(), b.data() + n));
  }
  constexpr int kDirections = 32;
  double acc = 0.0;
  for (int k = 0; k < kDirections; ++k) {
    KeyedNormal g(seed, Stream::Auxiliary, static_cast<std::uint64_t>(k), 0);
    Vec dir(a.cols());
    for (Eigen::Index i = 0; i < dir.size(); ++i) dir(i) = g();
    dir.normalize();
    const Vec pa = a * dir, pb = b * dir;
    acc += w1d(std::vector<double>(pa.data(), pa.data() + n), std::vector<double>(pb.data(), pb.data() + n));
  }
  return acc / kDirections;
}

namespace {

// Rows of N(mean, precision^{-1}), thinned by acceptance exp(-remainder(lift(row)))
// when a remainder is given. Candidate i uses stream offset + i, so the output
// is a deterministic function of (seed, offset).
Mat gaussian_samples(const Vec& mean, const Mat& precision, int n, std::uint64_t seed, std::uint64_t offset,
                     const std::function<double(const Vec&)>& remainder = nullptr,
                     const std::function<Vec(const Vec&)>& lift = nullptr) {
  const Eigen::LLT<Mat> llt(precision);
  if (llt.info() != Eigen::Success) throw SingularCovariance("gaussian_samples: precision not positive definite");
  const Mat lt = llt.matrixU();  // precision = U^T U; z = mean + U^{-1} xi has cov precision^{-1}
  const auto d = mean.size();
  Mat s(n, d);
  Vec xi(d);
  constexpr std::uint64_t kMaxCandidates = std::uint64_t(1) << 32;
  std::uint64_t cand = 0;
  for (int i = 0; i < n; ++cand) {
    if (cand >= kMaxCandidates) throw SamplerNotConverged("gaussian_samples: rejection sampler acceptance too low");
    KeyedNormal g = sampler_stream(seed, offset + cand);
    for (Eigen::Index j = 0; j < d; ++j) xi(j) = g();
    const Vec z = mean + lt.triangularView<Eigen::Upper>().solve(xi);
    if (remainder) {
      const double r = remainder(lift ? lift(z) : z);
      if (!(r >= 0.0)) throw InvalidBounds("gaussian_samples: remainder must be >= 0");
      if (g.uniform() >= std::exp(-r)) continue;
    }
    s.row(i++) = z.transpose();
  }
  return s;
}

// Independent ULA chains started on the constraint manifold; checks that the
// phase-map mean at half burn-in agrees with the final one within 4 SE.
Mat langevin_samples(const DiffusionModel& d, const Vec& z0, double dt, double burn_in, int n, std::uint64_t seed,
                     const std::function<double(const Vec&)>& stat) {
  const int steps = static_cast<int>(std::ceil(burn_in / dt));
  const int half = steps / 2;
  const PathEnsemble e = ensemble(d, [z0](std::uint64_t, std::uint64_t) { return z0; }, n, dt,
                                  {half * dt, steps * dt}, seed);
  const auto est = [&](int k) {
    std::vector<double> v(n);
    for (int p = 0; p < n; ++p) v[p] = stat(e.state(p, k));
    return mc_expectation(v);
  };
  const Estimate a = est(0), b = est(1);
  if (std::abs(a.mean - b.mean) > 4.0 * std::hypot(a.se, b.se))
    throw SamplerNotConverged("Langevin sampler: burn-in diagnostic failed (half vs full burn-in means differ)");
  return e.slice(1);
}

}  // namespace

StiffConcentrationReport stiff_concentration(const StiffModel& m, int n_samples, std::uint64_t seed,
                                             int null_replicates) {
  check_stiff(m);
  if (n_samples < 100) throw SamplerNotConverged("stiff_concentration: fewer than 100 samples");
  const int dx = m.dx, dy = m.dy, n = dx + dy;
  const Mat ju = constraint_jacobian(m);
  const Mat je = embed_jacobian(m);
  const Mat ginv = stiff_metric(m).inverse();
  StiffConcentrationReport rep;
  rep.n_samples = n_samples;

  Mat micro;
  std::function<Mat(int, std::uint64_t)> pibar;
  if (m.quadratic) {
    const auto& qd = *m.quadratic;
    const double k = 1.0 / (m.eps * m.eps);
    const Mat prec = qd.P + k * ju.transpose() * m.Bmat * ju;
    const Vec mean = prec.ldlt().solve(-qd.q + k * ju.transpose() * (m.Bmat * m.b));
    micro = gaussian_samples(mean, prec, n_samples, seed, 0, qd.remainder);
    Vec c = Vec::Zero(n);
    c.head(dx) = m.b;
    const Mat pbar = je.transpose() * qd.P * je;
    const Vec mbar = pbar.ldlt().solve(-(je.transpose() * (qd.P * c + qd.q)));
    const auto lift = [m](const Vec& u) { return stiff_embed(m, u); };
    pibar = [pbar, mbar, rem = qd.remainder, lift](int cnt, std::uint64_t s) {
      return gaussian_samples(mbar, pbar, cnt, s, std::uint64_t(1) << 40, rem, lift);
    };
  } else {
    rep.approximate = true;
    const double burn = 20.0 * m.relaxation_time;
    const Vec z0 = stiff_embed(m, Vec::Zero(dy));
    const auto phi_first = [&m](const Vec& z) { return stiff_phase_map(m, z)(0); };
    micro = langevin_samples(stiff_micro_model(m), z0, 0.05 * m.eps * m.eps, burn, n_samples, seed, phi_first);
    const DiffusionModel lim = stiff_limit_model(m);
    pibar = [lim, burn, dy](int cnt, std::uint64_t s) {
      return langevin_samples(lim, Vec::Zero(dy), 0.01, burn, cnt, s, [](const Vec& u) { return u(0); });
    };
  }

  std::vector<double> res(n_samples);
  Mat phi(n_samples, dy);
  for (int i = 0; i < n_samples; ++i) {
    const Vec z = micro.row(i).transpose();
    res[i] = (ju * z - m.b).squaredNorm();
    phi.row(i) = (ginv * (z.tail(dy) + m.H.transpose() * (z.head(dx) - m.b))).transpose();
  }
  rep.mean_sq_residual = mc_expectation(res);
  rep.w1_pushforward = wasserstein1(phi, pibar(n_samples, seed ^ 0xA5A5A5A5ull), seed);
  double ss = 0.0;
  for (int r = 0; r < null_replicates; ++r) {
    const std::uint64_t s = seed + 1000003ull * (r + 1);
    const double w = wasserstein1(pibar(n_samples, s), pibar(n_samples, s ^ 0x5A5A5A5Aull), seed);
    ss += w * w;
  }
  rep.w1_null_rms = null_replicates > 0 ? std::sqrt(ss / null_replicates) : 0.0;
  return rep;
}

std::vector<StiffDynamicRow> stiff_dynamic_check(const StiffModel& base, const Vec& z0,
                                                 const std::function<double(const StiffModel&, const Vec&)>& f,
                                                 double t, const std::vector<double>& eps_grid, int n_paths,
                                                 std::uint64_t seed, double dt_factor, int threads) {
  check_stiff(base);
  if (z0.size() != base.dx + base.dy) throw DimensionMismatch("stiff_dynamic_check: z0 dimension");
  if (!(t > 0.0)) throw InvalidBounds("stiff_dynamic_check: t must be positive");
  const int dx = base.dx, dy = base.dy, n = dx + dy;
  std::vector<StiffDynamicRow> rows;
  for (std::size_t i = 0; i < eps_grid.size(); ++i) {
    StiffModel m = base;
    m.eps = eps_grid[i];
    const int steps = static_cast<int>(std::ceil(t / (dt_factor * m.eps * m.eps)));
    const double dt = t / steps;
    const DiffusionModel micro = stiff_micro_model(m);
    const DiffusionModel lim = stiff_limit_model(m);
    const Mat ginv = stiff_metric(m).inverse();

    DiffusionModel aug;
    aug.dim = n + dy;
    aug.noise_dim = n;
    aug.eps = m.eps;
    aug.drift = [micro, lim, n, dy](const Vec& z, Vec& out) {
      // Per-thread scratch: the drift runs once per step on the hot path.
      thread_local Vec zh, zt, a, b;
      zh = z.head(n);
      zt = z.tail(dy);
      micro.drift(zh, a);
      lim.drift(zt, b);
      out.resize(n + dy);
      out.head(n) = a;
      out.tail(dy) = b;
    };
    Mat sig = Mat::Zero(n + dy, n);
    sig.topRows(n) = std::sqrt(2.0) * Mat::Identity(n, n);
    sig.bottomLeftCorner(dy, dx) = std::sqrt(2.0) * ginv * m.H.transpose();
    sig.bottomRightCorner(dy, dy) = std::sqrt(2.0) * ginv;
    aug.constant_noise = sig;

    Vec start(n + dy);
    start.head(n) = z0;
    start.tail(dy) = stiff_phase_map(m, z0);
    const PathEnsemble e = ensemble(aug, [start](std::uint64_t, std::uint64_t) { return start; }, n_paths, dt,
                                    {0.0, t}, seed + i, threads);
    std::vector<double> diff(n_paths);
    double fm = 0.0, fl = 0.0;
    for (int p = 0; p < n_paths; ++p) {
      const Vec s = e.state(p, 1);
      const double a = f(m, s.head(n)), b = f(m, stiff_embed(m, s.tail(dy)));
      diff[p] = a - b;
      fm += a;
      fl += b;
    }
    StiffDynamicRow row;
    row.eps = m.eps;
    row.gap = mc_expectation(diff);
    row.micro_mean = fm / n_paths;
    row.limit_mean = fl / n_paths;
    row.dt = dt;
    rows.push_back(row);
  }
  return rows;
}

bool gaps_decrease_beyond_noise(const std::vector<StiffDynamicRow>& rows, double se_mult) {
  for (std::size_t k = 1; k < rows.size(); ++k) {
    const double drop = std::abs(rows[k - 1].gap.mean) - std::abs(rows[k].gap.mean);
    if (!(drop > se_mult * std::hypot(rows[k - 1].gap.se, rows[k].gap.se))) return false;
  }
  return true;
}

}  // namespace thermoconv
