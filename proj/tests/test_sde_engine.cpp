#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>

#include "gen.hpp"
#include "thermoconv/errors.hpp"
#include "thermoconv/ou_lab.hpp"
#include "thermoconv/rng.hpp"
#include "thermoconv/sde_engine.hpp"

using namespace thermoconv;

namespace {

BlockMatrix locking() {
  Mat b(3, 3);
  b << 2, 1, 0, 1, 2, 1, 0, -1, 2;
  return {b, 1, 2};
}

Sampler fixed(const Vec& z) {
  return [z](std::uint64_t, std::uint64_t) { return z; };
}

// Per-coordinate mean and covariance of a snapshot, with SE of each entry.
struct Moments {
  Vec mean, mean_se;
  Mat cov, cov_se;
};
Moments moments(const Mat& s) {
  const auto n = s.rows(), d = s.cols();
  Moments m;
  m.mean = s.colwise().mean().transpose();
  const Mat c = s.rowwise() - m.mean.transpose();
  m.cov = c.transpose() * c / double(n - 1);
  m.mean_se = (m.cov.diagonal() / double(n)).cwiseSqrt();
  m.cov_se.resize(d, d);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) {
      const Vec p = c.col(i).cwiseProduct(c.col(j));
      const double v = (p.array() - p.mean()).square().sum() / double(n - 1);
      m.cov_se(i, j) = std::sqrt(v / double(n));
    }
  return m;
}

}  // namespace

TEST_CASE("philox4x32-10 known-answer vectors") {
  const PhiloxCounter z = philox4x32_10({0, 0, 0, 0}, {0, 0});
  CHECK(z == PhiloxCounter{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u});
  const PhiloxCounter f = philox4x32_10({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu});
  CHECK(f == PhiloxCounter{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu});
}

TEST_CASE("KeyedNormal: deterministic per key, distinct across keys, standard moments") {
  KeyedNormal a(7, Stream::Increments, 3, 9, 1), b(7, Stream::Increments, 3, 9, 1);
  for (int i = 0; i < 10; ++i) CHECK(a() == b());
  const double base = KeyedNormal(7, Stream::Increments, 3, 9, 1)();
  CHECK(KeyedNormal(8, Stream::Increments, 3, 9, 1)() != base);
  CHECK(KeyedNormal(7, Stream::Initial, 3, 9, 1)() != base);
  CHECK(KeyedNormal(7, Stream::Increments, 4, 9, 1)() != base);
  CHECK(KeyedNormal(7, Stream::Increments, 3, 10, 1)() != base);
  CHECK(KeyedNormal(7, Stream::Increments, 3, 9, 2)() != base);
  CHECK(KeyedNormal(7, Stream::Increments, std::uint64_t(3) << 32, 9, 1)() != base);

  const int n = 1000000;
  double s1 = 0, s2 = 0, s4 = 0;
  for (int p = 0; p < n / 4; ++p) {
    KeyedNormal g(1, Stream::Increments, p, 0);
    for (int k = 0; k < 4; ++k) {
      const double x = g();
      s1 += x;
      s2 += x * x;
      s4 += x * x * x * x;
    }
  }
  CHECK(std::abs(s1 / n) < 5.0 / std::sqrt(n));
  CHECK(std::abs(s2 / n - 1.0) < 5.0 * std::sqrt(2.0 / n));
  CHECK(std::abs(s4 / n - 3.0) < 5.0 * std::sqrt(96.0 / n));
}

TEST_CASE("substep rule") {
  DiffusionModel m = linear_diffusion(build_ou(locking(), 0.05).linear(), 1, 0.05, false);
  CHECK(substeps_for(m, 1e-3) == 1);
  CHECK(substeps_for(m, 0.01) == 2);
  CHECK(substeps_for(m, 0.0101) == 3);
  m.fast_dims = 0;
  CHECK(substeps_for(m, 0.01) == 1);
}

TEST_CASE("exact linear transition: ensemble moments match forward_state") {
  const OuEps o = build_ou(locking(), 0.1);
  const DiffusionModel m = linear_diffusion(o.linear(), 1, 0.1, true);
  const Vec z0 = Vec::Ones(3);
  const PathEnsemble e = ensemble(m, fixed(z0), 40000, 0.05, {0.0, 0.5}, 3);
  const GaussianState st = forward_state(o, {z0, Mat::Zero(3, 3)}, 0.5);
  const Moments mo = moments(e.slice(1));
  for (int i = 0; i < 3; ++i) {
    CHECK(std::abs(mo.mean(i) - st.mean(i)) < 4 * mo.mean_se(i));
    for (int j = 0; j < 3; ++j) CHECK(std::abs(mo.cov(i, j) - st.cov(i, j)) < 4 * mo.cov_se(i, j));
  }
}

TEST_CASE("stationary-start OU ensemble keeps covariance Sigma within 3 SE") {
  const OuEps o = build_ou(locking(), 0.05);
  const DiffusionModel m = linear_diffusion(o.linear(), 1, 0.05, true);
  const Mat l = o.Sigma.llt().matrixL();
  const Sampler stat = [l](std::uint64_t seed, std::uint64_t p) {
    KeyedNormal g = sampler_stream(seed, p);
    Vec xi(3);
    for (int i = 0; i < 3; ++i) xi(i) = g();
    return Vec(l * xi);
  };
  const PathEnsemble e = ensemble(m, stat, 100000, 0.01, {0.0, 1.0}, 4);
  const Moments mo = moments(e.slice(1));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      CAPTURE(i);
      CAPTURE(j);
      CHECK(std::abs(mo.cov(i, j) - o.Sigma(i, j)) < 3 * mo.cov_se(i, j));
    }
}

TEST_CASE("Van Loan transition for an unstable linear drift") {
  // M = -1 (growth), A = 1: Var(t) = (e^{2t} - 1) from z0 = 0.
  LinearOu lo{Mat::Constant(1, 1, -1.0), Mat::Identity(1, 1), Mat(), Mat::Zero(1, 1), std::nullopt};
  const DiffusionModel m = linear_diffusion(lo, 0, 1.0, true);
  const PathEnsemble e = ensemble(m, fixed(Vec::Zero(1)), 40000, 0.1, {0.0, 0.5}, 5);
  const Moments mo = moments(e.slice(1));
  CHECK(std::abs(mo.cov(0, 0) - (std::exp(1.0) - 1.0)) < 4 * mo.cov_se(0, 0));
}

TEST_CASE("Euler-Maruyama: noise-free path is the EM mean recursion and has weak order 1") {
  const OuEps o = build_ou(locking(), 0.5);
  DiffusionModel m = linear_diffusion(o.linear(), 0, 0.5, false);
  m.constant_noise = Mat::Zero(3, 3);
  const Vec z0 = Vec::Ones(3);
  const double t = 1.0;
  const Vec exact = forward_state(o, {z0, Mat::Zero(3, 3)}, t).mean;
  std::vector<double> err;
  for (double dt : {0.02, 0.01, 0.005}) {
    const Path p = integrate(m, z0, dt, t, 1);
    Vec rec = z0;
    const Mat step = Mat::Identity(3, 3) - dt * o.Meps;
    for (int k = 0; k < std::lround(t / dt); ++k) rec = step * rec;
    CHECK((p.states.back() - rec).norm() < 1e-12);
    err.push_back((p.states.back() - exact).norm());
  }
  CHECK(err[0] / err[1] == doctest::Approx(2.0).epsilon(0.05));
  CHECK(err[1] / err[2] == doctest::Approx(2.0).epsilon(0.05));
}

TEST_CASE("Euler-Maruyama: ensemble covariance matches the EM second-moment recursion") {
  const OuEps o = build_ou(locking(), 0.5);
  const DiffusionModel m = linear_diffusion(o.linear(), 0, 0.5, false);
  const double dt = 0.02, t = 0.5;
  const Vec z0 = Vec::Ones(3);
  const PathEnsemble e = ensemble(m, fixed(z0), 40000, dt, {0.0, t}, 6);
  const Mat step = Mat::Identity(3, 3) - dt * o.Meps;
  Mat s = Mat::Zero(3, 3);
  for (int k = 0; k < std::lround(t / dt); ++k) s = step * s * step.transpose() + 2.0 * dt * o.Ieps;
  const Moments mo = moments(e.slice(1));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(std::abs(mo.cov(i, j) - s(i, j)) < 4 * mo.cov_se(i, j));
}

TEST_CASE("fast-block substeps: slow coordinates frozen, fast block relaxes") {
  // Decoupled: fast x with rate 1/eps, slow y with rate 1. With noise off the
  // slow update is one explicit step and the fast block takes n_sub substeps.
  Mat b = Mat::Identity(2, 2);
  const double eps = 0.01, dt = 0.01;
  const Mat ie = ieps_matrix(1, 1, eps);
  LinearOu lo{ie * b, ie, Mat(), Mat::Zero(2, 2), eps};
  DiffusionModel m = linear_diffusion(lo, 1, eps, false);
  m.constant_noise = Mat::Zero(2, 2);
  REQUIRE(substeps_for(m, dt) == 10);
  const Path p = integrate(m, Vec::Ones(2), dt, dt, 1);
  CHECK(p.states.back()(0) == doctest::Approx(std::pow(1.0 - 0.1, 10)));
  CHECK(p.states.back()(1) == doctest::Approx(1.0 - dt));
}

TEST_CASE("parallel kernels are bit-identical to their serial references for any thread count") {
  const DiffusionModel exact = linear_diffusion(build_ou(locking(), 0.05).linear(), 1, 0.05, true);
  const DiffusionModel em = linear_diffusion(build_ou(locking(), 0.05).linear(), 1, 0.05, false);
  const Sampler s = [](std::uint64_t seed, std::uint64_t p) {
    KeyedNormal g = sampler_stream(seed, p);
    Vec z(3);
    for (int i = 0; i < 3; ++i) z(i) = g();
    return z;
  };
  for (const DiffusionModel* m : {&exact, &em}) {
    const PathEnsemble ref = ensemble_serial(*m, s, 257, 0.01, {0.0, 0.1, 0.3}, 9);
    for (int th : {1, 2, 3, 8}) {
      const PathEnsemble par = ensemble(*m, s, 257, 0.01, {0.0, 0.1, 0.3}, 9, th);
      CHECK(par.states == ref.states);
    }
  }
  const auto cref = couple_ensemble_serial(em, Vec::Ones(3), -Vec::Ones(3), 0.01, {0.0, 0.2}, 101, 3);
  for (int th : {2, 5}) {
    const auto cpar = couple_ensemble(em, Vec::Ones(3), -Vec::Ones(3), 0.01, {0.0, 0.2}, 101, 3, th);
    CHECK(cpar.energy.back().mean == cref.energy.back().mean);
    CHECK(cpar.energy.back().se == cref.energy.back().se);
  }
}

TEST_CASE("paths are keyed: ensemble path p equals integrate(path = p), seeds separate") {
  const DiffusionModel m = linear_diffusion(build_ou(locking(), 0.1).linear(), 1, 0.1, false);
  const Vec z0 = Vec::Ones(3);
  const PathEnsemble e = ensemble(m, fixed(z0), 20, 0.01, {0.0, 0.2}, 42);
  for (int p : {0, 7, 19}) {
    const Path q = integrate(m, z0, 0.01, 0.2, 42, p);
    const auto st = e.state(p, 1);
    for (int i = 0; i < 3; ++i) CHECK(st(i) == q.states.back()(i));
  }
  const PathEnsemble other = ensemble(m, fixed(z0), 20, 0.01, {0.0, 0.2}, 43);
  CHECK(other.states != e.states);
  // A longer ensemble keeps the earlier paths unchanged.
  const PathEnsemble longer = ensemble(m, fixed(z0), 40, 0.01, {0.0, 0.2}, 42);
  CHECK(std::equal(e.states.begin(), e.states.end(), longer.states.begin()));
}

TEST_CASE("synchronous coupling of a linear model: exact difference decays deterministically") {
  const OuEps o = build_ou(locking(), 0.2);
  const DiffusionModel m = linear_diffusion(o.linear(), 1, 0.2, true);
  const Vec z1 = Vec::Ones(3), z2 = Vec::Zero(3);
  const CoupledPath c = couple(m, z1, z2, 0.05, 0.5, 11);
  const Vec d = expm(-o.Meps, 0.5) * (z1 - z2);
  CHECK((c.z1.back() - c.z2.back() - d).norm() < 1e-12);
  CHECK(c.energy.back() == doctest::Approx(d.dot(o.Ieps.inverse() * d)).epsilon(1e-10));
}

TEST_CASE("snapshot times must be multiples of dt") {
  const DiffusionModel m = linear_diffusion(build_ou(locking(), 0.1).linear(), 1, 0.1, false);
  CHECK_THROWS_AS(ensemble(m, fixed(Vec::Ones(3)), 4, 0.01, {0.0, 0.105}, 1), InvalidBounds);
  CHECK_THROWS_AS(ensemble(m, fixed(Vec::Ones(3)), 4, 0.01, {0.2, 0.1}, 1), InvalidBounds);
  CHECK_THROWS_AS(ensemble(m, fixed(Vec::Ones(2)), 4, 0.01, {0.0, 0.1}, 1), DimensionMismatch);
}

TEST_CASE("blowup is reported with step and path") {
  DiffusionModel m;
  m.dim = m.noise_dim = 1;
  m.drift = [](const Vec& z, Vec& out) { out = z.array().cube().matrix(); };
  m.constant_noise = Mat::Zero(1, 1);
  m.A = [](const Vec&, Mat& out) { out.setIdentity(1, 1); };
  try {
    integrate(m, Vec::Constant(1, 10.0), 0.1, 10.0, 1, 5);
    FAIL("expected SimulationBlowup");
  } catch (const SimulationBlowup& e) {
    CHECK(std::string(e.what()).find("path 5") != std::string::npos);
  }
}

TEST_CASE("validate rejects sigma sigma^T != 2A") {
  DiffusionModel m = linear_diffusion(build_ou(locking(), 0.1).linear(), 1, 0.1, false);
  CHECK_NOTHROW(m.validate({Vec::Zero(3)}));
  m.constant_noise = Mat::Identity(3, 3);
  CHECK_THROWS_AS(m.validate({Vec::Zero(3)}), DimensionMismatch);
}

TEST_CASE("mc_expectation") {
  const Estimate e = mc_expectation(std::vector<double>{1.0, 2.0, 3.0, 4.0});
  CHECK(e.mean == doctest::Approx(2.5));
  CHECK(e.se == doctest::Approx(std::sqrt(5.0 / 3.0 / 4.0)));
  CHECK_THROWS_AS(mc_expectation(std::vector<double>{1.0}), InvalidBounds);
  Mat s(3, 2);
  s << 1, 0, 2, 0, 3, 0;
  CHECK(mc_expectation(s, [](const Vec& z) { return z(0) * z(0); }).mean == doctest::Approx(14.0 / 3.0));
}

TEST_CASE("ensemble binary round-trip") {
  const DiffusionModel m = linear_diffusion(build_ou(locking(), 0.1).linear(), 1, 0.1, false);
  const PathEnsemble e = ensemble(m, fixed(Vec::Ones(3)), 5, 0.01, {0.0, 0.05, 0.1}, 1);
  const std::string f = (std::filesystem::temp_directory_path() / "thermoconv_roundtrip.bin").string();
  write_ensemble_binary(f, e);
  const PathEnsemble r = read_ensemble_binary(f);
  CHECK(r.n_paths == 5);
  CHECK(r.dim == 3);
  CHECK(r.states == e.states);
  std::filesystem::remove(f);
  CHECK_THROWS(read_ensemble_binary(f));
}

TEST_CASE("THERMOCONV_THREADS caps the worker count") {
  setenv("THERMOCONV_THREADS", "2", 1);
  CHECK(worker_count(8) == 2);
  CHECK(worker_count(1) == 1);
  unsetenv("THERMOCONV_THREADS");
  CHECK(worker_count(8) == 8);
}

namespace {

DiffusionModel scalar_model(double rate, double noise) {
  DiffusionModel m;
  m.dim = m.noise_dim = 1;
  m.drift = [rate](const Vec& z, Vec& out) { out = -rate * z; };
  m.constant_noise = Mat::Constant(1, 1, noise);
  m.A = [noise](const Vec&, Mat& out) { out = Mat::Constant(1, 1, 0.5 * noise * noise); };
  return m;
}

}  // namespace

TEST_CASE("integrate: zero drift and zero noise keep the path constant") {
  DiffusionModel m = scalar_model(0.0, 0.0);
  const Path p = integrate(m, Vec::Constant(1, 0.7), 0.01, 1.0, 3);
  REQUIRE(p.states.size() == 101);
  for (const Vec& z : p.states) CHECK(z(0) == 0.7);
}

TEST_CASE("integrate: noise-free dX = -X dt reaches e^{-1} within 1e-3") {
  const Path p = integrate(scalar_model(1.0, 0.0), Vec::Ones(1), 1e-3, 1.0, 1);
  CHECK(std::abs(p.states.back()(0) - std::exp(-1.0)) < 1e-3);
  CHECK(p.times.back() == doctest::Approx(1.0));
}

TEST_CASE("scalar OU Euler-Maruyama ensemble matches closed-form moments at 1e5 paths") {
  const double z0 = 2.0;
  const PathEnsemble e = ensemble(scalar_model(1.0, std::sqrt(2.0)), fixed(Vec::Constant(1, z0)), 100000, 1e-3,
                                  {0.0, 1.0}, 77);
  const Moments mo = moments(e.slice(1));
  CHECK(std::abs(mo.mean(0) - z0 * std::exp(-1.0)) < 3 * mo.mean_se(0));
  CHECK(std::abs(mo.cov(0, 0) - (1.0 - std::exp(-2.0))) < 3 * mo.cov_se(0, 0));
}

TEST_CASE("ensemble with one path equals integrate") {
  const DiffusionModel m = linear_diffusion(build_ou(locking(), 0.1).linear(), 1, 0.1, false);
  const PathEnsemble e = ensemble(m, fixed(Vec::Ones(3)), 1, 0.01, {0.0, 0.1, 0.2}, 8);
  const Path p = integrate(m, Vec::Ones(3), 0.01, 0.2, 8, 0);
  for (int k : {0, 1, 2}) {
    const auto st = e.state(0, k);
    const Vec& q = p.states[k * 10];
    for (int i = 0; i < 3; ++i) CHECK(st(i) == q(i));
  }
}

TEST_CASE("weak order 1 on dt in {4e-3, 2e-3, 1e-3}: error ratios in [1.5, 3]") {
  const OuEps o = build_ou(locking(), 0.5);
  const LinearOu lin = o.linear();
  DiffusionModel quiet = linear_diffusion(lin, 0, 0.5, false);
  quiet.constant_noise = Mat::Zero(3, 3);
  const Vec z0 = Vec::Ones(3);
  const double t = 1.0;
  const GaussianState exact = forward_state(o, {z0, Mat::Zero(3, 3)}, t);
  std::vector<double> mean_err, cov_err;
  for (double dt : {4e-3, 2e-3, 1e-3}) {
    // Mean: the noise-free EM path is the EM mean for additive noise.
    mean_err.push_back((integrate(quiet, z0, dt, t, 1).states.back() - exact.mean).norm());
    // Covariance: the EM second-moment recursion.
    const Mat step = Mat::Identity(3, 3) - dt * o.Meps;
    Mat s = Mat::Zero(3, 3);
    for (int k = 0; k < std::lround(t / dt); ++k) s = step * s * step.transpose() + 2.0 * dt * o.Ieps;
    cov_err.push_back((s - exact.cov).norm());
  }
  for (int k : {0, 1}) {
    const double rm = mean_err[k] / mean_err[k + 1], rc = cov_err[k] / cov_err[k + 1];
    CHECK(rm >= 1.5);
    CHECK(rm <= 3.0);
    CHECK(rc >= 1.5);
    CHECK(rc <= 3.0);
  }
}

TEST_CASE("couple: equal starts give zero energy, EM separation is noise-free") {
  const OuEps o = build_ou(locking(), 0.5);
  const DiffusionModel m = linear_diffusion(o.linear(), 0, 0.5, false);
  const CoupledPath same = couple(m, Vec::Ones(3), Vec::Ones(3), 0.01, 1.0, 4);
  for (double e : same.energy) CHECK(e == 0.0);

  const double dt = 0.01;
  const Vec z1 = Vec::Ones(3), z2 = -Vec::Ones(3);
  const CoupledPath c = couple(m, z1, z2, dt, 1.0, 4);
  const Mat step = Mat::Identity(3, 3) - dt * o.Meps;
  Vec d = z1 - z2;
  for (std::size_t k = 1; k < c.times.size(); ++k) {
    d = step * d;
    CHECK((c.z1[k] - c.z2[k] - d).norm() <= 1e-10 * std::max(1.0, d.norm()));
  }
}

TEST_CASE("mc_expectation: constant, second moment and indicator") {
  Mat s(1000, 1);
  KeyedNormal g(5, Stream::Auxiliary, 0, 0);
  for (int i = 0; i < 1000; ++i) s(i, 0) = g();
  const Estimate c = mc_expectation(s, [](const Vec&) { return 3.5; });
  CHECK(c.mean == 3.5);
  CHECK(c.se == 0.0);

  Mat big(200000, 1);
  for (int i = 0; i < big.rows(); ++i) big(i, 0) = g();
  const Estimate z2 = mc_expectation(big, [](const Vec& z) { return z(0) * z(0); });
  CHECK(std::abs(z2.mean - 1.0) < 3 * z2.se);

  const Estimate ind = mc_expectation(s, [](const Vec& z) { return z(0) > 0.5 ? 1.0 : 0.0; });
  CHECK(ind.mean >= 0.0);
  CHECK(ind.mean <= 1.0);
}
