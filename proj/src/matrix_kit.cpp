#include "thermoconv/matrix_kit.hpp"

#include <cmath>
#include <sstream>

#include "thermoconv/errors.hpp"

namespace thermoconv {

namespace {

void require_square(const Mat& m, const char* what) {
  if (m.rows() != m.cols()) {
    std::ostringstream os;
    os << what << ": expected square matrix, got " << m.rows() << "x" << m.cols();
    throw DimensionMismatch(os.str());
  }
}

double norm1(const Mat& m) { return m.cwiseAbs().colwise().sum().maxCoeff(); }

}  // namespace

void check_gaussian_state(const GaussianState& g) {
  const auto n = g.mean.size();
  if (g.cov.rows() != n || g.cov.cols() != n)
    throw DimensionMismatch("GaussianState: mean and cov sizes differ");
  const double scale = std::max(g.cov.norm(), 1e-300);
  if ((g.cov - g.cov.transpose()).norm() > 1e-12 * scale)
    throw SingularCovariance("GaussianState: covariance not symmetric");
  if (n > 0 && lambda_min_sym(g.cov) < -1e-12 * scale)
    throw SingularCovariance("GaussianState: covariance not positive semidefinite");
}

double lambda_min_sym(const Mat& s) {
  Eigen::SelfAdjointEigenSolver<Mat> es(sym(s), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

Mat spd_sqrt(const Mat& s) {
  Eigen::SelfAdjointEigenSolver<Mat> es(sym(s));
  if (es.eigenvalues().minCoeff() <= 0.0) throw SingularCovariance("spd_sqrt: matrix not positive definite");
  return es.operatorSqrt();
}

Mat spd_inv_sqrt(const Mat& s) {
  Eigen::SelfAdjointEigenSolver<Mat> es(sym(s));
  if (es.eigenvalues().minCoeff() <= 0.0)
    throw SingularCovariance("spd_inv_sqrt: matrix not positive definite");
  return es.operatorInverseSqrt();
}

Mat solve_lyapunov(const Mat& m, const Mat& q) {
  require_square(m, "solve_lyapunov(M)");
  require_square(q, "solve_lyapunov(Q)");
  const Eigen::Index n = m.rows();
  if (q.rows() != n) throw DimensionMismatch("solve_lyapunov: M and Q sizes differ");
  if ((q - q.transpose()).norm() > 1e-12 * std::max(q.norm(), 1e-300))
    throw DimensionMismatch("solve_lyapunov: Q not symmetric");
  if (!is_positively_stable(m)) throw NotStable("solve_lyapunov: M has an eigenvalue with Re <= 0");

  // Column-major vec: vec(MX) = (I (x) M) vec X, vec(X M^T) = (M (x) I) vec X.
  const Eigen::Index nn = n * n;
  Mat k = Mat::Zero(nn, nn);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index l = 0; l < n; ++l) {
        k(j * n + i, j * n + l) += m(i, l);
        k(j * n + i, l * n + i) += m(j, l);
      }
  const Eigen::PartialPivLU<Mat> lu(k);
  const Vec rhs = Eigen::Map<const Vec>(q.data(), nn);
  Vec x = lu.solve(rhs);
  x += lu.solve(rhs - k * x);
  const Mat sol = Eigen::Map<const Mat>(x.data(), n, n);
  return sym(sol);
}

Mat expm(const Mat& m, double t) {
  require_square(m, "expm");
  if (!std::isfinite(t)) throw Overflow("expm: non-finite time");
  const Eigen::Index n = m.rows();
  const Mat a = m * t;
  const double nrm = norm1(a);
  if (!std::isfinite(nrm) || nrm > kExpmMaxNorm) {
    std::ostringstream os;
    os << "expm: ||Mt||_1 = " << nrm << " outside evaluable range " << kExpmMaxNorm;
    throw Overflow(os.str());
  }

  // Pade(13) with scaling and squaring; theta_13 from Higham (2005).
  static constexpr double theta13 = 5.371920351148152;
  static constexpr double b[] = {64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
                                 1187353796428800.0,  129060195264000.0,   10559470521600.0,
                                 670442572800.0,      33522128640.0,       1323241920.0,
                                 40840800.0,          960960.0,            16380.0,
                                 182.0,               1.0};
  int s = 0;
  if (nrm > theta13) s = static_cast<int>(std::ceil(std::log2(nrm / theta13)));
  const Mat as = a / std::ldexp(1.0, s);
  const Mat id = Mat::Identity(n, n);
  const Mat a2 = as * as;
  const Mat a4 = a2 * a2;
  const Mat a6 = a4 * a2;
  const Mat u = as * (a6 * (b[13] * a6 + b[11] * a4 + b[9] * a2) + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * id);
  const Mat v = a6 * (b[12] * a6 + b[10] * a4 + b[8] * a2) + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * id;
  Mat r = (v - u).partialPivLu().solve(v + u);
  for (int i = 0; i < s; ++i) r = r * r;
  if (!r.allFinite()) throw Overflow("expm: non-finite result");
  return r;
}

bool is_positively_stable(const Mat& m) {
  require_square(m, "is_positively_stable");
  if (m.rows() == 0) return true;
  if (!m.allFinite()) return false;
  Eigen::EigenSolver<Mat> es(m, false);
  return es.eigenvalues().real().minCoeff() > kStabilityMargin;
}

Mat schur_complement(const Mat& s, int split) {
  require_square(s, "schur_complement");
  const auto n = static_cast<int>(s.rows());
  if (split <= 0 || split >= n) throw DimensionMismatch("schur_complement: split must lie in (0, n)");
  const int r = n - split;
  const Mat s11 = s.topLeftCorner(split, split);
  Eigen::JacobiSVD<Mat> svd(s11);
  const auto sv = svd.singularValues();
  const double smin = sv(sv.size() - 1);
  if (!(smin > 0.0) || sv(0) / smin >= 1e12)
    throw SingularBlock("schur_complement: leading block singular or condition number >= 1e12");
  return s.bottomRightCorner(r, r) - s.bottomLeftCorner(r, split) * s11.partialPivLu().solve(s.topRightCorner(split, r));
}

double gaussian_kl(const GaussianState& p, const GaussianState& q) {
  check_gaussian_state(p);
  check_gaussian_state(q);
  if (p.dim() != q.dim()) throw DimensionMismatch("gaussian_kl: dimensions differ");
  const Eigen::LLT<Mat> lp(p.cov), lq(q.cov);
  if (lp.info() != Eigen::Success || lq.info() != Eigen::Success)
    throw SingularCovariance("gaussian_kl: covariance not positive definite");
  const auto logdet = [](const Eigen::LLT<Mat>& l) {
    return 2.0 * l.matrixL().toDenseMatrix().diagonal().array().log().sum();
  };
  const Vec dm = q.mean - p.mean;
  const double tr = lq.solve(p.cov).trace();
  const double quad = dm.dot(lq.solve(dm));
  const double kl = 0.5 * (tr + quad - p.dim() + logdet(lq) - logdet(lp));
  return std::max(kl, 0.0);
}

double gaussian_quadratic_expectation(const GaussianState& state, const Mat& d, const Vec& e, const Mat& w) {
  const auto n = state.mean.size();
  if (state.cov.rows() != n || state.cov.cols() != n || d.cols() != n || e.size() != d.rows() ||
      w.rows() != d.rows() || w.cols() != d.rows())
    throw DimensionMismatch("gaussian_quadratic_expectation: inconsistent dimensions");
  const Vec mu = d * state.mean + e;
  return (w * d * state.cov * d.transpose()).trace() + mu.dot(w * mu);
}

}  // namespace thermoconv
