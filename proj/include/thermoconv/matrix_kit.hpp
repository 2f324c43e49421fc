#pragma once

#include <Eigen/Dense>

namespace thermoconv {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

struct GaussianState {
  Vec mean;
  Mat cov;

  int dim() const { return static_cast<int>(mean.size()); }
};

// Throws DimensionMismatch on shape errors and SingularCovariance when cov is
// not symmetric (1e-12 relative) or has an eigenvalue below -1e-12*||cov||.
void check_gaussian_state(const GaussianState& g);

inline Mat sym(const Mat& x) { return 0.5 * (x + x.transpose()); }

double lambda_min_sym(const Mat& s);

// Principal square root and inverse square root of an SPD matrix.
Mat spd_sqrt(const Mat& s);
Mat spd_inv_sqrt(const Mat& s);

// Solves M X + X M^T = Q by the Kronecker system (I (x) M + M (x) I) vec X =
// vec Q with one step of iterative refinement. Result is symmetrized.
Mat solve_lyapunov(const Mat& m, const Mat& q);

// Relative accuracy 1e-10 is documented for ||Mt||_1 <= 50. Larger arguments
// are evaluated (decaying semigroups stay accurate in absolute terms) up to
// ||Mt||_1 = 1e6; beyond that, or on a non-finite result, Overflow.
inline constexpr double kExpmAccurateNorm = 50.0;
inline constexpr double kExpmMaxNorm = 1e6;
Mat expm(const Mat& m, double t);

// Every eigenvalue has real part > 1e-12.
inline constexpr double kStabilityMargin = 1e-12;
bool is_positively_stable(const Mat& m);

// S22 - S21 S11^{-1} S12 with S11 the leading split x split block.
Mat schur_complement(const Mat& s, int split);

double gaussian_kl(const GaussianState& p, const GaussianState& q);

// E[(Dz+e)^T W (Dz+e)] for z ~ state.
double gaussian_quadratic_expectation(const GaussianState& state, const Mat& d,
                                      const Vec& e, const Mat& w);

}  // namespace thermoconv
