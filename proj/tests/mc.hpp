#pragma once

// Plain Monte Carlo oracle over N(mean, cov), independent of the library's
// samplers: std::mt19937_64 normals and a Cholesky factor.

#include <functional>
#include <random>

#include "thermoconv/matrix_kit.hpp"

namespace mc {

struct Result {
  double mean, se;
};

inline Result gaussian_expectation(const thermoconv::GaussianState& g,
                                   const std::function<double(const thermoconv::Vec&)>& f, int n,
                                   std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  const thermoconv::Mat l = g.cov.llt().matrixL();
  double s = 0.0, s2 = 0.0;
  thermoconv::Vec xi(g.dim());
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < g.dim(); ++j) xi(j) = nd(rng);
    const double v = f(g.mean + l * xi);
    s += v;
    s2 += v * v;
  }
  const double m = s / n;
  return {m, std::sqrt(std::max(0.0, s2 / n - m * m) / (n - 1))};
}

}  // namespace mc
