#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "thermoconv/matrix_kit.hpp"
#include "thermoconv/rng.hpp"

namespace thermoconv {

struct LinearOu;

// dZ = b(Z) dt + sigma(Z) dW, sigma sigma^T = 2A. Callbacks write into
// caller-owned buffers so the inner loop does not allocate.
struct DiffusionModel {
  int dim = 0;
  int noise_dim = 0;  // columns of sigma
  std::function<void(const Vec& z, Vec& out)> drift;
  std::function<void(const Vec& z, Mat& out)> noise_factor;
  std::optional<Mat> constant_noise;  // used instead of noise_factor when set
  std::function<void(const Vec& z, Mat& out)> A;
  std::function<void(const Vec& z, Vec& out)> gamma;  // may be empty
  int fast_dims = 0;  // leading block whose drift carries eps^{-1}
  double eps = 1.0;

  // Drift -M z with constant A: integrate uses the exact Gaussian transition
  // instead of Euler-Maruyama.
  struct Linear {
    Mat M;
    Mat A;
  };
  std::optional<Linear> linear;

  // Throws DimensionMismatch / SingularA when sigma sigma^T != 2A (1e-10) or
  // A is not symmetric at the given points.
  void validate(const std::vector<Vec>& points) const;
};

// Euler-Maruyama model of an OU process; with exact=true the exact transition
// is attached.
DiffusionModel linear_diffusion(const LinearOu& ou, int fast_dims, double eps, bool exact);

struct Path {
  std::vector<double> times;
  std::vector<Vec> states;
};

struct PathEnsemble {
  std::vector<double> times;
  int n_paths = 0;
  int dim = 0;
  std::uint64_t seed = 0;
  std::vector<double> states;  // [path][time][coord]

  Eigen::Map<const Vec> state(int path, int time_index) const {
    return {states.data() + (std::size_t(path) * times.size() + time_index) * dim, dim};
  }
  // n_paths x dim matrix of the snapshot at time_index.
  Mat slice(int time_index) const;
};

// Fast-block substeps per slow step: ceil(dt / (0.1 eps)) when fast_dims > 0.
int substeps_for(const DiffusionModel& m, double dt);

Path integrate(const DiffusionModel& model, const Vec& z0, double dt, double horizon, std::uint64_t seed,
               std::uint64_t path = 0);

using Sampler = std::function<Vec(std::uint64_t seed, std::uint64_t path)>;

// Snapshot times must be multiples of dt (within 1e-9 relative), ascending.
// threads <= 0 uses the OpenMP default (capped by THERMOCONV_THREADS).
PathEnsemble ensemble(const DiffusionModel& model, const Sampler& sampler, int n_paths, double dt,
                      const std::vector<double>& times, std::uint64_t seed, int threads = 0);
PathEnsemble ensemble_serial(const DiffusionModel& model, const Sampler& sampler, int n_paths, double dt,
                             const std::vector<double>& times, std::uint64_t seed);

struct CoupledPath {
  std::vector<double> times;
  std::vector<Vec> z1, z2;
  std::vector<double> energy;  // (z1-z2)^T A(z1)^{-1} (z1-z2)
};

CoupledPath couple(const DiffusionModel& model, const Vec& z1, const Vec& z2, double dt, double horizon,
                   std::uint64_t seed, std::uint64_t path = 0);

struct Estimate {
  double mean = 0.0;
  double se = 0.0;
};

// Replica r of a pair uses noise stream (seed, r); per-time mean energy.
struct CoupledEnsemble {
  std::vector<double> times;
  std::vector<Estimate> energy;
};
CoupledEnsemble couple_ensemble(const DiffusionModel& model, const Vec& z1, const Vec& z2, double dt,
                                const std::vector<double>& times, int n_reps, std::uint64_t seed, int threads = 0);
CoupledEnsemble couple_ensemble_serial(const DiffusionModel& model, const Vec& z1, const Vec& z2, double dt,
                                       const std::vector<double>& times, int n_reps, std::uint64_t seed);

Estimate mc_expectation(const Mat& samples, const std::function<double(const Vec&)>& observable);
Estimate mc_expectation(const std::vector<double>& values);

// Stream for Sampler implementations: normals keyed by (seed, path).
inline KeyedNormal sampler_stream(std::uint64_t seed, std::uint64_t path) {
  return KeyedNormal(seed, Stream::Initial, path, 0);
}

// Little-endian f64 payload after a header of three little-endian u64
// (n_paths, n_times, dim). Times are not stored.
void write_ensemble_binary(const std::string& file, const PathEnsemble& e);
PathEnsemble read_ensemble_binary(const std::string& file);

// Worker count after applying THERMOCONV_THREADS.
int worker_count(int requested);

}  // namespace thermoconv
