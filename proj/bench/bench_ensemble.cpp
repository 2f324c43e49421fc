#include <chrono>
#include <cstdio>
#include <cstdlib>

#include "thermoconv/ou_lab.hpp"
#include "thermoconv/sde_engine.hpp"

using namespace thermoconv;

// Times the parallel ensemble against its serial reference on the locking OU
// family with EM stepping, and checks the two agree bit for bit.
int main(int argc, char** argv) {
  const int n_paths = argc > 1 ? std::atoi(argv[1]) : 4000;
  Mat B(3, 3);
  B << 2, 1, 0, 1, 2, 1, 0, -1, 2;
  const BlockMatrix b(B, 1, 2);
  const double eps = 0.05, dt = 1e-3;
  const DiffusionModel m = linear_diffusion(build_ou(b, eps).linear(), 1, eps, false);
  const Sampler s = [](std::uint64_t, std::uint64_t) { return Vec(Vec::Ones(3)); };
  const std::vector<double> times = {0.0, 0.25, 0.5};

  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  const PathEnsemble ser = ensemble_serial(m, s, n_paths, dt, times, 1);
  const auto t1 = clock::now();
  const PathEnsemble par = ensemble(m, s, n_paths, dt, times, 1);
  const auto t2 = clock::now();
  const double ts = std::chrono::duration<double>(t1 - t0).count();
  const double tp = std::chrono::duration<double>(t2 - t1).count();
  const bool same = ser.states == par.states;
  std::printf("paths=%d workers=%d serial=%.3fs parallel=%.3fs speedup=%.2f identical=%s\n", n_paths,
              worker_count(0), ts, tp, ts / tp, same ? "yes" : "no");
  return same ? 0 : 1;
}
