#include "thermoconv/sde_engine.hpp"

#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>

#include <omp.h>

#include "thermoconv/errors.hpp"
#include "thermoconv/ou_lab.hpp"

namespace thermoconv {

namespace {

constexpr double kBlowup = 1e8;

int step_count(double span, double dt, const char* what) {
  if (!(dt > 0.0)) throw InvalidBounds(std::string(what) + ": dt must be positive");
  const double q = span / dt;
  const double r = std::round(q);
  if (std::abs(q - r) > 1e-9 * std::max(1.0, q)) {
    std::ostringstream os;
    os << what << ": " << span << " is not an integral multiple of dt=" << dt;
    throw InvalidBounds(os.str());
  }
  return static_cast<int>(r);
}

std::vector<int> snapshot_steps(const std::vector<double>& times, double dt) {
  std::vector<int> s;
  for (double t : times) {
    if (t < 0.0) throw InvalidBounds("snapshot times must be >= 0");
    s.push_back(step_count(t, dt, "snapshot time"));
    if (s.size() > 1 && s.back() < s[s.size() - 2]) throw InvalidBounds("snapshot times must be ascending");
  }
  return s;
}

// Covariance square root tolerant of PSD input.
Mat psd_factor(const Mat& q) {
  Eigen::SelfAdjointEigenSolver<Mat> es(sym(q));
  const Vec d = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * d.asDiagonal();
}

// One model, one dt: precomputed transition data plus scratch buffers. Not
// shared across threads.
class Stepper {
 public:
  Stepper(const DiffusionModel& m, double dt) : m_(m), dt_(dt), n_sub_(substeps_for(m, dt)) {
    const int n = m.dim;
    if (m.linear) {
      const Mat& M = m.linear->M;
      e_ = expm(-M, dt);
      Mat q;
      if (is_positively_stable(M)) {
        const Mat sig = solve_lyapunov(M, 2.0 * sym(m.linear->A));
        q = sig - e_ * sig * e_.transpose();
      } else {
        // Van Loan: expm([[M, 2A], [0, -M^T]] dt) = [[., E^{-1} Q], [0, E^T]].
        Mat c = Mat::Zero(2 * n, 2 * n);
        c.topLeftCorner(n, n) = M;
        c.topRightCorner(n, n) = 2.0 * sym(m.linear->A);
        c.bottomRightCorner(n, n) = -M.transpose();
        const Mat f = expm(c, dt);
        q = f.bottomRightCorner(n, n).transpose() * f.topRightCorner(n, n);
      }
      l_ = psd_factor(q);
      w_.resize(n);
    } else {
      w_.resize(m.noise_dim);
      wsum_.resize(m.noise_dim);
      b_.resize(n);
      sig_.resize(n, m.noise_dim);
      zk_.resize(n);
    }
  }

  void step(Vec& z, std::uint64_t seed, std::uint64_t path, std::uint64_t k) {
    if (m_.linear) {
      KeyedNormal g(seed, Stream::Increments, path, k, 0);
      for (Eigen::Index i = 0; i < w_.size(); ++i) w_(i) = g();
      z = e_ * z + l_ * w_;
    } else if (m_.fast_dims == 0) {
      KeyedNormal g(seed, Stream::Increments, path, k, 0);
      for (Eigen::Index i = 0; i < w_.size(); ++i) w_(i) = g();
      m_.drift(z, b_);
      b_.noalias() += (1.0 / std::sqrt(dt_)) * (noise(z) * w_);
      z.noalias() += dt_ * b_;
    } else {
      const int f = m_.fast_dims, s = m_.dim - f;
      const double h = dt_ / n_sub_, sh = std::sqrt(h);
      m_.drift(z, b_);
      const Vec slow_drift = b_.tail(s);
      const Mat slow_sig = noise(z).bottomRows(s);
      zk_ = z;
      wsum_.setZero();
      for (int j = 0; j < n_sub_; ++j) {
        KeyedNormal g(seed, Stream::Increments, path, k, static_cast<std::uint32_t>(j));
        for (Eigen::Index i = 0; i < w_.size(); ++i) w_(i) = g();
        if (j > 0) m_.drift(zk_, b_);
        const Mat& sig = noise(zk_);
        zk_.head(f) += h * b_.head(f) + sh * (sig.topRows(f) * w_);
        wsum_ += sh * w_;
      }
      z.head(f) = zk_.head(f);
      z.tail(s) += dt_ * slow_drift + slow_sig * wsum_;
    }
    for (Eigen::Index i = 0; i < z.size(); ++i)
      if (!std::isfinite(z(i)) || std::abs(z(i)) > kBlowup) {
        std::ostringstream os;
        os << "simulation blowup at step " << k << " of path " << path << " (|z_" << i << "| > 1e8)";
        throw SimulationBlowup(os.str());
      }
  }

 private:
  const Mat& noise(const Vec& z) {
    if (m_.constant_noise) return *m_.constant_noise;
    m_.noise_factor(z, sig_);
    return sig_;
  }

  const DiffusionModel& m_;
  double dt_;
  int n_sub_;
  Mat e_, l_;
  Vec w_, wsum_, b_, zk_;
  Mat sig_;
};

Mat a_of(const DiffusionModel& m, const Vec& z) {
  if (m.linear) return m.linear->A;
  Mat a(m.dim, m.dim);
  if (m.A) {
    m.A(z, a);
    return a;
  }
  Mat s = m.constant_noise ? *m.constant_noise : Mat(m.dim, m.noise_dim);
  if (!m.constant_noise) m.noise_factor(z, s);
  return 0.5 * s * s.transpose();
}

double weighted_energy(const DiffusionModel& m, const Vec& z1, const Vec& z2) {
  const Vec d = z1 - z2;
  if (d.isZero(0.0)) return 0.0;
  const Eigen::LLT<Mat> llt(a_of(m, z1));
  if (llt.info() != Eigen::Success) throw SingularA("couple: A(z1) not positive definite");
  return d.dot(llt.solve(d));
}

// Runs fn(i) for i in [0, n) on `threads` workers; rethrows the first
// exception after the loop.
template <class Fn>
void parallel_for(int n, int threads, Fn&& fn) {
  std::exception_ptr err;
  std::mutex mu;
#pragma omp parallel for schedule(static) num_threads(threads)
  for (int i = 0; i < n; ++i) {
    try {
      fn(i);
    } catch (...) {
      std::lock_guard<std::mutex> lock(mu);
      if (!err) err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);
}

void simulate_into(const DiffusionModel& model, Stepper& st, Vec z, const std::vector<int>& snaps,
                   std::uint64_t seed, std::uint64_t path, double* out) {
  std::size_t next = 0;
  const int dim = model.dim;
  int k = 0;
  while (next < snaps.size()) {
    while (next < snaps.size() && snaps[next] == k) {
      std::memcpy(out + next * dim, z.data(), sizeof(double) * dim);
      ++next;
    }
    if (next == snaps.size()) break;
    st.step(z, seed, path, static_cast<std::uint64_t>(k));
    ++k;
  }
}

void check_model(const DiffusionModel& m) {
  if (m.dim <= 0) throw DimensionMismatch("DiffusionModel: dim must be positive");
  if (m.fast_dims < 0 || m.fast_dims > m.dim) throw DimensionMismatch("DiffusionModel: fast_dims out of range");
  if (!(m.eps > 0.0)) throw InvalidBounds("DiffusionModel: eps must be positive");
  if (m.linear) {
    if (m.linear->M.rows() != m.dim || m.linear->M.cols() != m.dim || m.linear->A.rows() != m.dim ||
        m.linear->A.cols() != m.dim)
      throw DimensionMismatch("DiffusionModel: linear block shape");
    return;
  }
  if (!m.drift) throw DimensionMismatch("DiffusionModel: drift callback missing");
  if (m.noise_dim <= 0) throw DimensionMismatch("DiffusionModel: noise_dim must be positive");
  if (m.constant_noise) {
    if (m.constant_noise->rows() != m.dim || m.constant_noise->cols() != m.noise_dim)
      throw DimensionMismatch("DiffusionModel: constant_noise shape");
  } else if (!m.noise_factor) {
    throw DimensionMismatch("DiffusionModel: noise_factor callback missing");
  }
}

}  // namespace

void DiffusionModel::validate(const std::vector<Vec>& points) const {
  check_model(*this);
  for (const Vec& z : points) {
    if (z.size() != dim) throw DimensionMismatch("DiffusionModel::validate: point dimension");
    Mat s = constant_noise ? *constant_noise : Mat(dim, noise_dim);
    if (linear) {
      s = psd_factor(2.0 * linear->A);
    } else if (!constant_noise) {
      noise_factor(z, s);
    }
    const Mat a = a_of(*this, z);
    const double scale = std::max(1.0, a.norm());
    if ((a - a.transpose()).norm() > 1e-10 * scale) throw SingularA("DiffusionModel: A not symmetric");
    if ((s * s.transpose() - 2.0 * a).norm() > 1e-10 * scale)
      throw DimensionMismatch("DiffusionModel: sigma sigma^T != 2A");
  }
}

DiffusionModel linear_diffusion(const LinearOu& ou, int fast_dims, double eps, bool exact) {
  DiffusionModel m;
  m.dim = static_cast<int>(ou.M.rows());
  m.noise_dim = m.dim;
  m.fast_dims = fast_dims;
  m.eps = eps;
  const Mat M = ou.M, A = ou.A, AK = ou.A * ou.K;
  m.drift = [M](const Vec& z, Vec& out) { out.noalias() = -M * z; };
  m.constant_noise = psd_factor(2.0 * A);
  m.A = [A](const Vec&, Mat& out) { out = A; };
  m.gamma = [AK](const Vec& z, Vec& out) { out.noalias() = AK * z; };
  if (exact) m.linear = DiffusionModel::Linear{M, A};
  return m;
}

Mat PathEnsemble::slice(int time_index) const {
  Mat s(n_paths, dim);
  for (int p = 0; p < n_paths; ++p) s.row(p) = state(p, time_index).transpose();
  return s;
}

int substeps_for(const DiffusionModel& m, double dt) {
  if (m.linear || m.fast_dims == 0) return 1;
  return std::max(1, static_cast<int>(std::ceil(dt / (0.1 * m.eps) - 1e-12)));
}

Path integrate(const DiffusionModel& model, const Vec& z0, double dt, double horizon, std::uint64_t seed,
               std::uint64_t path) {
  check_model(model);
  if (z0.size() != model.dim) throw DimensionMismatch("integrate: z0 dimension");
  const int n = step_count(horizon, dt, "integrate horizon");
  Stepper st(model, dt);
  Path p;
  Vec z = z0;
  p.times.push_back(0.0);
  p.states.push_back(z);
  for (int k = 0; k < n; ++k) {
    st.step(z, seed, path, static_cast<std::uint64_t>(k));
    p.times.push_back((k + 1) * dt);
    p.states.push_back(z);
  }
  return p;
}

int worker_count(int requested) {
  int n = requested > 0 ? requested : omp_get_max_threads();
  if (const char* env = std::getenv("THERMOCONV_THREADS")) {
    const int cap = std::atoi(env);
    if (cap > 0) n = std::min(n, cap);
  }
  return std::max(1, n);
}

namespace {

PathEnsemble ensemble_impl(const DiffusionModel& model, const Sampler& sampler, int n_paths, double dt,
                           const std::vector<double>& times, std::uint64_t seed, int threads) {
  check_model(model);
  if (n_paths < 1) throw InvalidBounds("ensemble: n_paths must be >= 1");
  const auto snaps = snapshot_steps(times, dt);
  PathEnsemble e;
  e.times = times;
  e.n_paths = n_paths;
  e.dim = model.dim;
  e.seed = seed;
  e.states.assign(std::size_t(n_paths) * times.size() * model.dim, 0.0);
  const std::size_t stride = times.size() * model.dim;
  const auto body = [&](Stepper& st, int p) {
    const Vec z0 = sampler(seed, static_cast<std::uint64_t>(p));
    if (z0.size() != model.dim) throw DimensionMismatch("ensemble: sampler returned wrong dimension");
    simulate_into(model, st, z0, snaps, seed, static_cast<std::uint64_t>(p), e.states.data() + p * stride);
  };
  if (threads == 1) {
    Stepper st(model, dt);
    for (int p = 0; p < n_paths; ++p) body(st, p);
    return e;
  }
  const Stepper proto(model, dt);
  std::vector<std::optional<Stepper>> steppers(threads);
  parallel_for(n_paths, threads, [&](int p) {
    auto& st = steppers[omp_get_thread_num()];
    if (!st) st.emplace(proto);
    body(*st, p);
  });
  return e;
}

CoupledEnsemble couple_impl(const DiffusionModel& model, const Vec& z1, const Vec& z2, double dt,
                            const std::vector<double>& times, int n_reps, std::uint64_t seed, int threads) {
  check_model(model);
  if (n_reps < 2) throw InvalidBounds("couple_ensemble: n_reps must be >= 2");
  if (z1.size() != model.dim || z2.size() != model.dim) throw DimensionMismatch("couple_ensemble: state dimension");
  const auto snaps = snapshot_steps(times, dt);
  const std::size_t nt = times.size();
  std::vector<double> s1(std::size_t(n_reps) * nt * model.dim), s2(s1.size());
  const std::size_t stride = nt * model.dim;
  const auto body = [&](Stepper& st, int r) {
    simulate_into(model, st, z1, snaps, seed, static_cast<std::uint64_t>(r), s1.data() + r * stride);
    simulate_into(model, st, z2, snaps, seed, static_cast<std::uint64_t>(r), s2.data() + r * stride);
  };
  if (threads == 1) {
    Stepper st(model, dt);
    for (int r = 0; r < n_reps; ++r) body(st, r);
  } else {
    const Stepper proto(model, dt);
    std::vector<std::optional<Stepper>> steppers(threads);
    parallel_for(n_reps, threads, [&](int r) {
      auto& st = steppers[omp_get_thread_num()];
      if (!st) st.emplace(proto);
      body(*st, r);
    });
  }
  CoupledEnsemble out;
  out.times = times;
  std::vector<double> vals(n_reps);
  for (std::size_t k = 0; k < nt; ++k) {
    for (int r = 0; r < n_reps; ++r) {
      const Eigen::Map<const Vec> a(s1.data() + r * stride + k * model.dim, model.dim);
      const Eigen::Map<const Vec> b(s2.data() + r * stride + k * model.dim, model.dim);
      vals[r] = weighted_energy(model, a, b);
    }
    out.energy.push_back(mc_expectation(vals));
  }
  return out;
}

}  // namespace

PathEnsemble ensemble(const DiffusionModel& model, const Sampler& sampler, int n_paths, double dt,
                      const std::vector<double>& times, std::uint64_t seed, int threads) {
  return ensemble_impl(model, sampler, n_paths, dt, times, seed, worker_count(threads));
}

PathEnsemble ensemble_serial(const DiffusionModel& model, const Sampler& sampler, int n_paths, double dt,
                             const std::vector<double>& times, std::uint64_t seed) {
  return ensemble_impl(model, sampler, n_paths, dt, times, seed, 1);
}

CoupledPath couple(const DiffusionModel& model, const Vec& z1, const Vec& z2, double dt, double horizon,
                   std::uint64_t seed, std::uint64_t path) {
  const Path p1 = integrate(model, z1, dt, horizon, seed, path);
  const Path p2 = integrate(model, z2, dt, horizon, seed, path);
  CoupledPath c;
  c.times = p1.times;
  c.z1 = p1.states;
  c.z2 = p2.states;
  for (std::size_t k = 0; k < c.times.size(); ++k) c.energy.push_back(weighted_energy(model, c.z1[k], c.z2[k]));
  return c;
}

CoupledEnsemble couple_ensemble(const DiffusionModel& model, const Vec& z1, const Vec& z2, double dt,
                                const std::vector<double>& times, int n_reps, std::uint64_t seed, int threads) {
  return couple_impl(model, z1, z2, dt, times, n_reps, seed, worker_count(threads));
}

CoupledEnsemble couple_ensemble_serial(const DiffusionModel& model, const Vec& z1, const Vec& z2, double dt,
                                       const std::vector<double>& times, int n_reps, std::uint64_t seed) {
  return couple_impl(model, z1, z2, dt, times, n_reps, seed, 1);
}

Estimate mc_expectation(const std::vector<double>& values) {
  const std::size_t n = values.size();
  if (n < 2) throw InvalidBounds("mc_expectation: need at least 2 samples");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1) / n)};
}

Estimate mc_expectation(const Mat& samples, const std::function<double(const Vec&)>& observable) {
  std::vector<double> v(samples.rows());
  Vec z(samples.cols());
  for (Eigen::Index i = 0; i < samples.rows(); ++i) {
    z = samples.row(i).transpose();
    v[i] = observable(z);
  }
  return mc_expectation(v);
}

namespace {

template <class T>
T to_le(T v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  u = __builtin_bswap64(u);
  std::memcpy(&v, &u, 8);
  return v;
}

}  // namespace

void write_ensemble_binary(const std::string& file, const PathEnsemble& e) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw Error("write_ensemble_binary: cannot open " + file);
  const std::uint64_t hdr[3] = {to_le<std::uint64_t>(e.n_paths), to_le<std::uint64_t>(e.times.size()),
                                to_le<std::uint64_t>(e.dim)};
  os.write(reinterpret_cast<const char*>(hdr), sizeof hdr);
  for (double v : e.states) {
    const double le = to_le(v);
    os.write(reinterpret_cast<const char*>(&le), 8);
  }
  if (!os) throw Error("write_ensemble_binary: write failed for " + file);
}

PathEnsemble read_ensemble_binary(const std::string& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw Error("read_ensemble_binary: cannot open " + file);
  std::uint64_t hdr[3];
  is.read(reinterpret_cast<char*>(hdr), sizeof hdr);
  if (!is) throw Error("read_ensemble_binary: truncated header");
  PathEnsemble e;
  e.n_paths = static_cast<int>(to_le(hdr[0]));
  e.times.assign(to_le(hdr[1]), 0.0);
  e.dim = static_cast<int>(to_le(hdr[2]));
  e.states.resize(std::size_t(e.n_paths) * e.times.size() * e.dim);
  for (double& v : e.states) {
    is.read(reinterpret_cast<char*>(&v), 8);
    v = to_le(v);
  }
  if (!is) throw Error("read_ensemble_binary: truncated payload");
  return e;
}

}  // namespace thermoconv
