#pragma once

// Dense linear algebra primitives: LU log-determinants, 2x2 eigenvalues and
// spectral norms by power iteration. Everything is double precision.

#include <Eigen/Dense>
#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>

#include "impflow/random.hpp"

namespace impflow {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

class SingularMatrixError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline bool all_finite(const Vec& v) { return v.allFinite(); }
inline bool all_finite(const Mat& m) { return m.allFinite(); }

inline void require_finite(const Vec& v, const char* what) {
  if (!v.allFinite()) throw std::invalid_argument(std::string(what) + ": non-finite entries");
}
inline void require_finite(const Mat& m, const char* what) {
  if (!m.allFinite()) throw std::invalid_argument(std::string(what) + ": non-finite entries");
}

struct LogDet {
  int sign = 1;         // +1 or -1
  double logabsdet = 0; // ln|det|
};

/// LU with partial pivoting; throws SingularMatrixError when a pivot
/// magnitude drops below 1e-300.
inline LogDet lu_logdet(Mat m) {
  if (m.rows() != m.cols()) throw std::invalid_argument("lu_logdet: matrix not square");
  require_finite(m, "lu_logdet");
  const Eigen::Index n = m.rows();
  int sign = 1;
  double logabs = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    Eigen::Index piv = k;
    double best = std::abs(m(k, k));
    for (Eigen::Index i = k + 1; i < n; ++i) {
      const double a = std::abs(m(i, k));
      if (a > best) { best = a; piv = i; }
    }
    if (best < 1e-300) throw SingularMatrixError("lu_logdet: pivot below 1e-300");
    if (piv != k) {
      m.row(piv).swap(m.row(k));
      sign = -sign;
    }
    const double pivot = m(k, k);
    if (pivot < 0) sign = -sign;
    logabs += std::log(std::abs(pivot));
    for (Eigen::Index i = k + 1; i < n; ++i) {
      const double f = m(i, k) / pivot;
      m.row(i).tail(n - k - 1) -= f * m.row(k).tail(n - k - 1);
    }
  }
  return {sign, logabs};
}

struct Eig2 {
  std::complex<double> l1, l2;
  bool real() const { return l1.imag() == 0.0 && l2.imag() == 0.0; }
};

/// Eigenvalues of a 2x2 matrix from trace and determinant. A conjugate pair
/// is returned when the discriminant is negative.
inline Eig2 eig_2x2(const Mat& m) {
  if (m.rows() != 2 || m.cols() != 2) throw std::invalid_argument("eig_2x2: need a 2x2 matrix");
  const double tr = m(0, 0) + m(1, 1);
  const double det = m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
  const double half = 0.5 * tr;
  const double disc = half * half - det;
  if (disc >= 0) {
    const double s = std::sqrt(disc);
    // Larger-magnitude root first, the other via det to avoid cancellation.
    double a = half >= 0 ? half + s : half - s;
    double b = (a != 0.0) ? det / a : half - std::copysign(s, half);
    return {{a, 0.0}, {b, 0.0}};
  }
  const double s = std::sqrt(-disc);
  return {{half, s}, {half, -s}};
}

struct SpectralNormEstimate {
  double sigma = 0;
  bool converged = false;
  int n_iter = 0;
};

/// Power iteration on M^T M. The estimate never exceeds the true spectral
/// norm (it is a Rayleigh quotient); stops when successive estimates differ
/// by less than tol, or the budget is exhausted.
inline SpectralNormEstimate power_iteration_norm(const Mat& m, int max_iters, double tol,
                                                 RandomState& rng) {
  if (max_iters < 1) throw std::invalid_argument("power_iteration_norm: max_iters >= 1 required");
  if (m.size() == 0) return {0.0, true, 0};
  Vec v = rng.normal_vec(m.cols());
  double nv = v.norm();
  if (nv == 0) return {0.0, true, 0};
  v /= nv;
  double sigma = 0.0;
  SpectralNormEstimate out;
  for (int it = 0; it < max_iters; ++it) {
    Vec w = m * v;
    const double s = w.norm();
    out.n_iter = it + 1;
    if (s == 0.0) return {0.0, true, out.n_iter};
    Vec u = m.transpose() * w;
    const double nu = u.norm();
    if (nu == 0.0) return {s, true, out.n_iter};
    v = u / nu;
    if (std::abs(s - sigma) < tol) {
      out.sigma = s;
      out.converged = true;
      return out;
    }
    sigma = s;
  }
  out.sigma = sigma;
  out.converged = false;
  return out;
}

}  // namespace impflow
