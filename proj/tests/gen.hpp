#pragma once

// Hand-rolled generators for property tests. Every draw is keyed by
// (seed, case index) so a failing case can be replayed alone.

#include <cstdint>

#include <Eigen/SVD>

#include "thermoconv/matrix_kit.hpp"
#include "thermoconv/rng.hpp"

namespace gen {

using thermoconv::KeyedNormal;
using thermoconv::Mat;
using thermoconv::Stream;
using thermoconv::Vec;

struct Source {
  KeyedNormal g;
  Source(std::uint64_t seed, std::uint64_t index) : g(seed, Stream::Auxiliary, index, 0xFEED) {}
  double normal() { return g(); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * g.uniform(); }
  int integer(int lo, int hi) {  // inclusive
    return lo + static_cast<int>(g.uniform() * (hi - lo + 1));
  }
  Mat matrix(int r, int c) {
    Mat m(r, c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) m(i, j) = normal();
    return m;
  }
  Vec vector(int n) {
    Vec v(n);
    for (int i = 0; i < n; ++i) v(i) = normal();
    return v;
  }
  // SPD with eigenvalues in [lo, hi].
  Mat spd(int n, double lo = 0.3, double hi = 3.0) {
    const Eigen::HouseholderQR<Mat> qr(matrix(n, n));
    const Mat q = qr.householderQ();
    Vec d(n);
    for (int i = 0; i < n; ++i) d(i) = uniform(lo, hi);
    return q * d.asDiagonal() * q.transpose();
  }
  // Positively stable and typically non-normal: SPD part plus a skew part
  // (Sym(M) > 0), or a similarity transform of a positive diagonal.
  Mat stable(int n) {
    if (g.uniform() < 0.5) {
      const Mat s = matrix(n, n);
      return spd(n, 0.3, 2.0) + 0.7 * (s - s.transpose());
    }
    // cond(T) <= 20 keeps the eigenbasis usable; a determinant floor does not.
    Mat t = matrix(n, n) + 2.0 * Mat::Identity(n, n);
    for (;;) {
      const Vec sv = Eigen::JacobiSVD<Mat>(t).singularValues();
      if (sv(n - 1) > 0.0 && sv(0) / sv(n - 1) <= 20.0) break;
      t += Mat::Identity(n, n);
    }
    Vec d(n);
    for (int i = 0; i < n; ++i) d(i) = uniform(0.3, 2.5);
    return t * d.asDiagonal() * t.inverse();
  }
  thermoconv::GaussianState gaussian(int n) { return {vector(n), spd(n, 0.2, 2.5)}; }
};

}  // namespace gen
