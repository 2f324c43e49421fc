#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>

#include "gen.hpp"
#include "mc.hpp"
#include "thermoconv/errors.hpp"
#include "thermoconv/matrix_kit.hpp"

using namespace thermoconv;

namespace {

// Eigen-decomposition Lyapunov oracle: with M = V D V^{-1},
// X = V [ (V^{-1} Q V^{-H})_ij / (d_i + conj d_j) ] V^H.
Mat lyapunov_by_eigen(const Mat& m, const Mat& q) {
  using C = std::complex<double>;
  const Eigen::EigenSolver<Mat> es(m);
  const Eigen::MatrixXcd v = es.eigenvectors();
  const Eigen::VectorXcd d = es.eigenvalues();
  const Eigen::MatrixXcd vi = v.inverse();
  Eigen::MatrixXcd y = vi * q.cast<C>() * vi.adjoint();
  for (int i = 0; i < y.rows(); ++i)
    for (int j = 0; j < y.cols(); ++j) y(i, j) /= d(i) + std::conj(d(j));
  return (v * y * v.adjoint()).real();
}

// Long-double Taylor series with scaling by 2^s and repeated squaring.
Mat expm_by_taylor(const Mat& m) {
  using LMat = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
  const double nrm = m.cwiseAbs().colwise().sum().maxCoeff();
  const int s = nrm > 0.5 ? static_cast<int>(std::ceil(std::log2(nrm / 0.5))) : 0;
  const LMat a = m.cast<long double>() / std::ldexp(1.0L, s);
  LMat term = LMat::Identity(m.rows(), m.cols()), sum = term;
  for (int k = 1; k < 40; ++k) {
    term = term * a / static_cast<long double>(k);
    sum += term;
  }
  for (int i = 0; i < s; ++i) sum = sum * sum;
  return sum.cast<double>();
}

double rel(const Mat& a, const Mat& b) { return (a - b).norm() / std::max(1.0, b.norm()); }

}  // namespace

TEST_CASE("lyapunov: matches the eigen-decomposition oracle on random stable matrices") {
  for (int c = 0; c < 40; ++c) {
    gen::Source s(11, c);
    const int n = s.integer(1, 6);
    const Mat m = s.stable(n);
    const Mat q = s.spd(n);
    const Mat x = solve_lyapunov(m, q);
    CAPTURE(c);
    CHECK(rel(x, lyapunov_by_eigen(m, q)) < 1e-9);
    CHECK((m * x + x * m.transpose() - q).norm() < 1e-9 * q.norm());
    CHECK((x - x.transpose()).norm() == 0.0);
    CHECK(lambda_min_sym(x) > 0.0);  // Q SPD and M stable => X SPD
  }
}

TEST_CASE("lyapunov: scalar and diagonal closed forms") {
  CHECK(solve_lyapunov(Mat::Constant(1, 1, 2.0), Mat::Constant(1, 1, 2.0))(0, 0) == doctest::Approx(0.5));
  Mat m = Vec(Eigen::Vector3d(1, 2, 4)).asDiagonal();
  const Mat x = solve_lyapunov(m, 2.0 * Mat::Identity(3, 3));
  CHECK(x(0, 0) == doctest::Approx(1.0));
  CHECK(x(1, 1) == doctest::Approx(0.5));
  CHECK(x(2, 2) == doctest::Approx(0.25));
  CHECK(std::abs(x(0, 1)) < 1e-14);
}

TEST_CASE("lyapunov: errors") {
  CHECK_THROWS_AS(solve_lyapunov(Mat::Constant(1, 1, -1.0), Mat::Identity(1, 1)), NotStable);
  CHECK_THROWS_AS(solve_lyapunov(Mat::Identity(2, 2), Mat::Identity(3, 3)), DimensionMismatch);
  Mat q(2, 2);
  q << 1, 2, 0, 1;
  CHECK_THROWS_AS(solve_lyapunov(Mat::Identity(2, 2), q), DimensionMismatch);
}

TEST_CASE("expm: closed forms") {
  const double th = 0.7;
  Mat r(2, 2);
  r << 0, -th, th, 0;
  const Mat e = expm(r, 1.0);
  CHECK(e(0, 0) == doctest::Approx(std::cos(th)).epsilon(1e-14));
  CHECK(e(1, 0) == doctest::Approx(std::sin(th)).epsilon(1e-14));
  Mat j(2, 2);
  j << 2, 1, 0, 2;  // exp(Jt) = e^{2t} [[1, t], [0, 1]]
  const Mat ej = expm(j, 0.3);
  CHECK(ej(0, 0) == doctest::Approx(std::exp(0.6)).epsilon(1e-14));
  CHECK(ej(0, 1) == doctest::Approx(0.3 * std::exp(0.6)).epsilon(1e-14));
  CHECK(ej(1, 0) == 0.0);
  CHECK(expm(Mat::Zero(3, 3), 5.0).isIdentity(1e-15));
}

TEST_CASE("expm: matches the long-double Taylor oracle within the accurate range") {
  for (int c = 0; c < 40; ++c) {
    gen::Source s(12, c);
    const int n = s.integer(1, 6);
    const Mat m = s.matrix(n, n);
    const double t = s.uniform(0.01, 3.0);
    CAPTURE(c);
    CHECK(rel(expm(m, t), expm_by_taylor(m * t)) < 1e-10 * std::max(1.0, (m * t).norm()));
  }
}

TEST_CASE("expm: semigroup and inverse properties") {
  for (int c = 0; c < 20; ++c) {
    gen::Source s(13, c);
    const int n = s.integer(2, 5);
    const Mat m = s.matrix(n, n);
    const double a = s.uniform(0.1, 1.0), b = s.uniform(0.1, 1.0);
    CHECK(rel(expm(m, a) * expm(m, b), expm(m, a + b)) < 1e-11);
    CHECK(rel(expm(m, a) * expm(-m, a), Mat::Identity(n, n)) < 1e-11);
  }
}

TEST_CASE("expm: decaying semigroup beyond the accurate range and overflow") {
  // ||Mt|| of about 160, the size met in eps sweeps: still a contraction.
  Mat m(2, 2);
  m << 80, 40, 0, 2;
  const Mat e = expm(-m, 1.0);
  CHECK(std::isfinite(e.norm()));
  CHECK(e(1, 1) == doctest::Approx(std::exp(-2.0)).epsilon(1e-10));
  CHECK_THROWS_AS(expm(Mat::Constant(1, 1, 1.0), 2e6), Overflow);
  CHECK_THROWS_AS(expm(Mat::Constant(1, 1, 800.0), 1.0), Overflow);
}

TEST_CASE("is_positively_stable") {
  CHECK(is_positively_stable(Mat::Identity(2, 2)));
  CHECK_FALSE(is_positively_stable(Mat::Zero(2, 2)));
  Mat rot(2, 2);
  rot << 0, -1, 1, 0;
  CHECK_FALSE(is_positively_stable(rot));
  CHECK(is_positively_stable(rot + 0.01 * Mat::Identity(2, 2)));
  Mat b(2, 2);
  b << 2, 2, 2, 1;  // eigenvalues 1.5 +- sqrt(4.25): one negative
  CHECK_FALSE(is_positively_stable(b));
}

TEST_CASE("schur complement equals the inverse of the bottom-right block of the inverse") {
  for (int c = 0; c < 30; ++c) {
    gen::Source s(14, c);
    const int n = s.integer(2, 6);
    const int split = s.integer(1, n - 1);
    const Mat a = s.spd(n) + 0.3 * s.matrix(n, n);
    const Mat inv = a.inverse();
    CAPTURE(c);
    CHECK(rel(schur_complement(a, split), inv.bottomRightCorner(n - split, n - split).inverse()) < 1e-9);
  }
  Mat z = Mat::Identity(3, 3);
  z(0, 0) = 0.0;
  CHECK_THROWS_AS(schur_complement(z, 1), SingularBlock);
  CHECK_THROWS_AS(schur_complement(Mat::Identity(3, 3), 0), DimensionMismatch);
  CHECK_THROWS_AS(schur_complement(Mat::Identity(3, 3), 3), DimensionMismatch);
}

TEST_CASE("gaussian_kl: 1-D against trapezoid quadrature of p log(p/q)") {
  const double m1 = 0.3, s1 = 0.8, m2 = -0.5, s2 = 1.4;
  const auto logn = [](double x, double m, double s) {
    return -0.5 * std::log(2 * M_PI * s * s) - 0.5 * (x - m) * (x - m) / (s * s);
  };
  double acc = 0.0;
  const double h = 1e-3;
  for (double x = -12.0; x <= 12.0; x += h) {
    const double lp = logn(x, m1, s1);
    acc += h * std::exp(lp) * (lp - logn(x, m2, s2));
  }
  const GaussianState p{Vec::Constant(1, m1), Mat::Constant(1, 1, s1 * s1)};
  const GaussianState q{Vec::Constant(1, m2), Mat::Constant(1, 1, s2 * s2)};
  CHECK(gaussian_kl(p, q) == doctest::Approx(acc).epsilon(1e-8));
}

TEST_CASE("gaussian_kl: d-dimensional against Monte Carlo of log p - log q") {
  for (int c = 0; c < 4; ++c) {
    gen::Source s(15, c);
    const int n = s.integer(2, 4);
    const GaussianState p = s.gaussian(n), q = s.gaussian(n);
    const auto logpdf = [](const GaussianState& g, const Vec& x) {
      const Eigen::LLT<Mat> l(g.cov);
      const Vec d = x - g.mean;
      return -0.5 * d.dot(l.solve(d)) - l.matrixLLT().diagonal().array().log().sum();
    };
    const auto r = mc::gaussian_expectation(p, [&](const Vec& x) { return logpdf(p, x) - logpdf(q, x); }, 200000, 100 + c);
    CAPTURE(c);
    CHECK(std::abs(gaussian_kl(p, q) - r.mean) < 4.0 * r.se);
  }
}

TEST_CASE("gaussian_kl: properties (zero on the diagonal, nonnegative, affine invariant)") {
  for (int c = 0; c < 30; ++c) {
    gen::Source s(16, c);
    const int n = s.integer(1, 5);
    const GaussianState p = s.gaussian(n), q = s.gaussian(n);
    CHECK(std::abs(gaussian_kl(p, p)) < 1e-12);
    CHECK(gaussian_kl(p, q) >= 0.0);
    Mat a = s.matrix(n, n) + 3.0 * Mat::Identity(n, n);
    const Vec b = s.vector(n);
    const GaussianState pa{a * p.mean + b, a * p.cov * a.transpose()};
    const GaussianState qa{a * q.mean + b, a * q.cov * a.transpose()};
    CAPTURE(c);
    CHECK(gaussian_kl(pa, qa) == doctest::Approx(gaussian_kl(p, q)).epsilon(1e-8));
  }
}

TEST_CASE("gaussian_kl: shape errors") {
  const GaussianState p{Vec::Zero(2), Mat::Identity(2, 2)}, q{Vec::Zero(3), Mat::Identity(3, 3)};
  CHECK_THROWS_AS(gaussian_kl(p, q), DimensionMismatch);
  Mat bad = Mat::Identity(2, 2);
  bad(1, 1) = -1.0;
  CHECK_THROWS_AS(check_gaussian_state({Vec::Zero(2), bad}), SingularCovariance);
}

TEST_CASE("gaussian_quadratic_expectation: closed forms and Monte Carlo") {
  // E|z|^2 for N(m, S) = |m|^2 + tr S.
  const GaussianState g{Vec(Eigen::Vector2d(1, 2)), Vec(Eigen::Vector2d(0.5, 2)).asDiagonal()};
  CHECK(gaussian_quadratic_expectation(g, Mat::Identity(2, 2), Vec::Zero(2), Mat::Identity(2, 2)) ==
        doctest::Approx(7.5));
  for (int c = 0; c < 4; ++c) {
    gen::Source s(17, c);
    const int n = s.integer(2, 4), k = s.integer(1, 3);
    const GaussianState st = s.gaussian(n);
    const Mat d = s.matrix(k, n);
    const Vec e = s.vector(k);
    const Mat w = s.spd(k);
    const auto r = mc::gaussian_expectation(
        st, [&](const Vec& z) { const Vec u = d * z + e; return u.dot(w * u); }, 200000, 200 + c);
    CAPTURE(c);
    CHECK(std::abs(gaussian_quadratic_expectation(st, d, e, w) - r.mean) < 4.0 * r.se);
  }
}

TEST_CASE("spd_sqrt and spd_inv_sqrt") {
  gen::Source s(18, 0);
  const Mat a = s.spd(4);
  const Mat r = spd_sqrt(a), ri = spd_inv_sqrt(a);
  CHECK(rel(r * r, a) < 1e-12);
  CHECK(rel(r * ri, Mat::Identity(4, 4)) < 1e-12);
}

TEST_CASE("lyapunov: identity, decoupled and symmetric-B examples") {
  CHECK(solve_lyapunov(Mat::Identity(2, 2), 2.0 * Mat::Identity(2, 2)).isApprox(Mat::Identity(2, 2), 1e-14));
  const Mat d = Vec(Eigen::Vector2d(2, 5)).asDiagonal();
  CHECK(solve_lyapunov(d, 2.0 * Mat::Identity(2, 2)).isApprox(Mat(Vec(Eigen::Vector2d(0.5, 0.2)).asDiagonal()), 1e-14));

  Mat b(2, 2);
  b << 2, 1, 1, 2;
  const Mat ie = Vec(Eigen::Vector2d(10.0, 1.0)).asDiagonal();
  const Mat m = ie * b, q = 2.0 * ie;
  const Mat x = solve_lyapunov(m, q);
  Mat binv(2, 2);
  binv << 2, -1, -1, 2;
  binv /= 3.0;
  CHECK((m * binv + binv * m.transpose() - q).norm() <= 1e-12 * q.norm());
  CHECK(rel(x, binv) < 1e-12);
}

TEST_CASE("lyapunov: residual bound on random stable matrices up to dimension 12") {
  for (int c = 0; c < 24; ++c) {
    gen::Source s(19, c);
    const int n = 1 + c % 12;
    const Mat m = s.stable(n);
    const Mat q = sym(s.matrix(n, n));
    const Mat x = solve_lyapunov(m, q);
    CAPTURE(n);
    CHECK((m * x + x * m.transpose() - q).norm() <= 1e-10 * q.norm());
  }
}

TEST_CASE("expm: nilpotent and diagonal examples") {
  Mat n(2, 2);
  n << 0, 1, 0, 0;
  for (double t : {0.5, 3.0, -2.0}) {
    Mat want(2, 2);
    want << 1, t, 0, 1;
    CHECK(rel(expm(n, t), want) < 1e-15);
  }
  const Mat d = Vec(Eigen::Vector2d(-1, -3)).asDiagonal();
  const Mat e = expm(d, 1.0);
  CHECK(e(0, 0) == doctest::Approx(std::exp(-1.0)).epsilon(1e-14));
  CHECK(e(1, 1) == doctest::Approx(std::exp(-3.0)).epsilon(1e-14));
  CHECK(e(0, 1) == 0.0);
  CHECK(expm(Mat::Zero(2, 2), 3.0).isIdentity(1e-15));
}

TEST_CASE("expm: semigroup on random M with norm <= 5 and s, t <= 2") {
  for (int c = 0; c < 30; ++c) {
    gen::Source s(20, c);
    const int n = s.integer(1, 5);
    Mat m = s.matrix(n, n);
    m *= s.uniform(0.1, 5.0) / m.norm();
    const double a = s.uniform(0.0, 2.0), b = s.uniform(0.0, 2.0);
    // Relative: entries reach e^{20}, where 1e-8 absolute is below one ulp.
    const Mat whole = expm(m, a + b);
    CHECK((whole - expm(m, a) * expm(m, b)).norm() <= 1e-8 * std::max(1.0, whole.norm()));
  }
}

TEST_CASE("is_positively_stable: upper triangular") {
  Mat u(2, 2);
  u << 2, 1, 0, 1;
  CHECK(is_positively_stable(u));
}

TEST_CASE("schur_complement: examples") {
  Mat bd = Mat::Zero(3, 3);
  bd(0, 0) = 4.0;
  bd.bottomRightCorner(2, 2) << 1, 2, 3, 4;
  CHECK(schur_complement(bd, 1) == bd.bottomRightCorner(2, 2));
  Mat a(2, 2);
  a << 2, 1, 1, 2;
  CHECK(schur_complement(a, 1)(0, 0) == doctest::Approx(1.5).epsilon(1e-15));
  a << 2, 2, 2, 1;
  CHECK(schur_complement(a, 1)(0, 0) == doctest::Approx(-1.0).epsilon(1e-15));
}

namespace {

// Composite Simpson on [lo, hi] with n (even) intervals.
template <class F>
double simpson(F f, double lo, double hi, int n) {
  const double h = (hi - lo) / n;
  double acc = f(lo) + f(hi);
  for (int k = 1; k < n; ++k) acc += (k % 2 ? 4.0 : 2.0) * f(lo + k * h);
  return acc * h / 3.0;
}

double kl_integrand_1d(double x, double m1, double v1, double m2, double v2) {
  const double lp = -0.5 * std::log(2 * M_PI * v1) - 0.5 * (x - m1) * (x - m1) / v1;
  const double lq = -0.5 * std::log(2 * M_PI * v2) - 0.5 * (x - m2) * (x - m2) / v2;
  return std::exp(lp) * (lp - lq);
}

}  // namespace

TEST_CASE("gaussian_kl: examples against Simpson quadrature") {
  const GaussianState std1{Vec::Zero(1), Mat::Identity(1, 1)};
  CHECK(gaussian_kl(std1, std1) == 0.0);
  CHECK(gaussian_kl({Vec::Zero(3), Mat::Identity(3, 3)}, {Vec::Zero(3), Mat::Identity(3, 3)}) == 0.0);

  const double q1 = simpson([](double x) { return kl_integrand_1d(x, 1, 1, 0, 1); }, -15, 15, 6000);
  CHECK(q1 == doctest::Approx(0.5).epsilon(1e-10));
  CHECK(gaussian_kl({Vec::Constant(1, 1.0), Mat::Identity(1, 1)}, std1) == doctest::Approx(q1).epsilon(1e-9));

  const double q2 = simpson([](double x) { return kl_integrand_1d(x, 0, 2, 0, 1); }, -20, 20, 8000);
  CHECK(q2 == doctest::Approx(0.5 * (2.0 - 1.0 - std::log(2.0))).epsilon(1e-10));
  CHECK(gaussian_kl({Vec::Zero(1), Mat::Constant(1, 1, 2.0)}, std1) == doctest::Approx(q2).epsilon(1e-9));
  CHECK(q2 == doctest::Approx(0.15343).epsilon(1e-4));
}

TEST_CASE("gaussian_kl: 2-D against tensor Simpson quadrature within 1e-6") {
  for (int c = 0; c < 3; ++c) {
    gen::Source s(21, c);
    const GaussianState p = s.gaussian(2), q = s.gaussian(2);
    const Eigen::LLT<Mat> lp(p.cov), lq(q.cov);
    const auto logpdf = [](const GaussianState& g, const Eigen::LLT<Mat>& l, const Vec& x) {
      const Vec d = x - g.mean;
      return -0.5 * d.dot(l.solve(d)) - l.matrixLLT().diagonal().array().log().sum() - std::log(2 * M_PI);
    };
    // Integrate in whitened coordinates x = m + L u over u in [-9, 9]^2.
    const Mat L = lp.matrixL();
    const double jac = L.determinant();
    const auto inner = [&](double u1) {
      return simpson(
          [&](double u2) {
            const Vec x = p.mean + L * Vec(Eigen::Vector2d(u1, u2));
            const double a = logpdf(p, lp, x);
            return std::exp(a) * (a - logpdf(q, lq, x)) * jac;
          },
          -9, 9, 600);
    };
    const double quad = simpson(inner, -9, 9, 600);
    CAPTURE(c);
    CHECK(std::abs(gaussian_kl(p, q) - quad) < 1e-6);
  }
}

TEST_CASE("gaussian_quadratic_expectation: examples") {
  const GaussianState s2{Vec::Zero(2), Mat::Identity(2, 2)};
  CHECK(gaussian_quadratic_expectation(s2, Mat::Zero(2, 2), Vec::Zero(2), Mat::Identity(2, 2)) == 0.0);
  CHECK(gaussian_quadratic_expectation(s2, Mat::Identity(2, 2), Vec::Zero(2), Mat::Identity(2, 2)) == 2.0);
  const GaussianState g{Vec(Eigen::Vector2d(1, 0)), Vec(Eigen::Vector2d(2, 3)).asDiagonal()};
  const double v = gaussian_quadratic_expectation(g, Mat::Identity(2, 2), Vec::Zero(2), Mat::Identity(2, 2));
  CHECK(v == doctest::Approx(6.0).epsilon(1e-15));
  const auto r = mc::gaussian_expectation(g, [](const Vec& z) { return z.squaredNorm(); }, 2000000, 777);
  CHECK(std::abs(v - r.mean) < 3.0 * r.se);
  CHECK_THROWS_AS(gaussian_quadratic_expectation(g, Mat::Identity(3, 3), Vec::Zero(3), Mat::Identity(3, 3)),
                  DimensionMismatch);
}
