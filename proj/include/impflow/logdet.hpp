#pragma once

// Exact and unbiased stochastic evaluation of ln det(I+J_g) and its
// gradients. The stochastic estimators randomize the truncation of the
// power series ln det(I+J) = sum_k (-1)^{k+1}/k tr(J^k) and reweight each
// term by 1/P(N >= k) (Russian roulette); Hutchinson probes v ~ N(0,I) turn
// traces into quadratic forms. The first n_exact terms are computed
// deterministically with weight 1 and the roulette law is reindexed to the
// tail, which preserves unbiasedness.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <stdexcept>

#include "impflow/linalg.hpp"
#include "impflow/mlp.hpp"
#include "impflow/random.hpp"

namespace impflow {

enum class TruncationLaw { Geometric, Poisson };
enum class LogDetMode { Exact, Stochastic };

struct EstimatorConfig {
  TruncationLaw law = TruncationLaw::Geometric;
  double geometric_p = 0.5;
  double poisson_lambda = 2.0;
  int n_exact = 2;            // leading terms computed exactly
  int probes_per_sample = 1;
  LogDetMode mode = LogDetMode::Exact;

  void validate() const {
    if (!(geometric_p > 0.0 && geometric_p <= 1.0))
      throw std::invalid_argument("EstimatorConfig: geometric p in (0,1]");
    if (!(poisson_lambda > 0.0)) throw std::invalid_argument("EstimatorConfig: poisson lambda > 0");
    if (n_exact < 0) throw std::invalid_argument("EstimatorConfig: n_exact >= 0");
    if (probes_per_sample < 1) throw std::invalid_argument("EstimatorConfig: probes >= 1");
  }

  /// Draw the tail truncation index (supported on {1,2,...}; Poisson is
  /// shifted by one).
  int draw_tail(RandomState& rng) const {
    return law == TruncationLaw::Geometric ? rng.geometric(geometric_p) : 1 + rng.poisson(poisson_lambda);
  }

  /// P(N >= k) of the tail law, k >= 1.
  double tail_prob(int k) const {
    if (k <= 1) return 1.0;
    if (law == TruncationLaw::Geometric) return std::pow(1.0 - geometric_p, k - 1);
    // Shifted Poisson: P(1+X >= k) = P(X >= k-1) = 1 - sum_{j<k-1} pmf(j).
    double cdf = 0.0, pmf = std::exp(-poisson_lambda);
    for (int j = 0; j < k - 1; ++j) {
      cdf += pmf;
      pmf *= poisson_lambda / (j + 1);
    }
    return std::max(1.0 - cdf, 1e-300);
  }

  /// Roulette weight of global series term k (1-based) given n_exact.
  double term_weight(int k) const {
    return (k <= n_exact) ? 1.0 : 1.0 / tail_prob(k - n_exact);
  }
};

class GuardViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// ln det(I+J) by LU. Guard: spectral norm of J must be < 1, so the
/// determinant is positive and the log finite.
inline double exact_logdet(const Mat& jacobian, bool check_guard = true) {
  if (jacobian.rows() != jacobian.cols()) throw std::invalid_argument("exact_logdet: square matrix required");
  if (check_guard) {
    RandomState rng(0x10fde7);
    const auto est = power_iteration_norm(jacobian, 500, 1e-9, rng);
    if (est.sigma >= 1.0) throw GuardViolation("exact_logdet: ||J||_2 >= 1");
  }
  const LogDet ld = lu_logdet(Mat::Identity(jacobian.rows(), jacobian.cols()) + jacobian);
  if (ld.sign <= 0) throw GuardViolation("exact_logdet: det(I+J) not positive");
  return ld.logabsdet;
}

/// Single-draw unbiased estimate of ln det(I+J) given only u -> u^T J.
/// Uses one (n, v) sample; the k-th term costs exactly k VJP applications
/// in total (the chain v^T J^k is extended one product per term).
inline double series_logdet_estimate(const std::function<Vec(const Vec&)>& vjp, Eigen::Index d,
                                     const EstimatorConfig& cfg, RandomState& rng) {
  cfg.validate();
  const int n_tail = cfg.draw_tail(rng);
  const Vec v = rng.normal_vec(d);
  Vec r = v;
  double acc = 0.0;
  const int n_terms = cfg.n_exact + n_tail;
  for (int k = 1; k <= n_terms; ++k) {
    r = vjp(r);
    const double sign = (k % 2 == 1) ? 1.0 : -1.0;
    acc += sign / k * cfg.term_weight(k) * r.dot(v);
  }
  return acc;
}

/// Same estimator, sharing a caller-supplied (n_tail, v) draw. Used by
/// implicit blocks to apply one roulette sample to both log-det terms.
inline double series_logdet_estimate_with(const std::function<Vec(const Vec&)>& vjp,
                                          const Vec& v, int n_tail, const EstimatorConfig& cfg) {
  Vec r = v;
  double acc = 0.0;
  const int n_terms = cfg.n_exact + n_tail;
  for (int k = 1; k <= n_terms; ++k) {
    r = vjp(r);
    const double sign = (k % 2 == 1) ? 1.0 : -1.0;
    acc += sign / k * cfg.term_weight(k) * r.dot(v);
  }
  return acc;
}

struct LogDetGrad {
  MlpGrads params;
  Vec x_grad;
};

/// Neumann prefix u = sum_{m=0}^{M-1} (-1)^m w_{m+1} v^T J^m for the
/// gradient series. Differentiating term k of the value series gives tail
/// index m = k-1, hence the weight shift.
inline Vec logdet_grad_prefix(const LipschitzMlp& net, const MlpTrace& trace, const Vec& v,
                              int n_tail, const EstimatorConfig& cfg) {
  Vec r = v;  // v^T J^0
  Vec u = Vec::Zero(v.size());
  const int n_terms = cfg.n_exact + n_tail;  // value-series terms 1..n_terms
  for (int m = 0; m < n_terms; ++m) {
    const double sign = (m % 2 == 0) ? 1.0 : -1.0;
    u += sign * cfg.term_weight(m + 1) * r;
    if (m + 1 < n_terms) r = Mat(net.vjp(trace, Mat(r))).col(0);
  }
  return u;
}

/// Unbiased estimate of the gradient of ln det(I+J_g(x)) w.r.t. parameters
/// and input: one (n, v) draw, prefix u held fixed (stop-gradient), then the
/// exact gradient of u^T J v via the second-order contraction pass.
inline LogDetGrad series_logdet_grad_estimate(const LipschitzMlp& net, const Vec& x,
                                              const EstimatorConfig& cfg, RandomState& rng) {
  cfg.validate();
  const int n_tail = cfg.draw_tail(rng);
  const Vec v = rng.normal_vec(x.size());
  const MlpTrace trace = net.forward_trace(Mat(x));
  const Vec u = logdet_grad_prefix(net, trace, v, n_tail, cfg);
  LogDetGrad out{net.zero_grads(), Vec::Zero(x.size())};
  Mat x_cot = Mat::Zero(x.size(), 1);
  net.jacobian_contraction_grads(trace, Mat(u), Mat(v), out.params, &x_cot);
  out.x_grad = x_cot.col(0);
  return out;
}

/// Exact gradient of ln det(I+J_g(x)) via d contraction passes with the rows
/// of (I+J)^{-1}: d lndet = tr((I+J)^{-1} dJ).
inline LogDetGrad exact_logdet_grad(const LipschitzMlp& net, const Vec& x) {
  const Eigen::Index d = x.size();
  const MlpTrace trace = net.forward_trace(Mat(x));
  const Mat J = net.jacobian(x);
  const Mat Minv = (Mat::Identity(d, d) + J).inverse();
  LogDetGrad out{net.zero_grads(), Vec::Zero(d)};
  Mat x_cot = Mat::Zero(d, 1);
  for (Eigen::Index i = 0; i < d; ++i) {
    // term: sum_j Minv(i,j) dJ(j, :) e_i  ==  u^T dJ v with u = Minv.row(i), v = e_i
    net.jacobian_contraction_grads(trace, Mat(Vec(Minv.row(i).transpose())),
                                   Mat(Vec(Vec::Unit(d, i))), out.params, &x_cot);
  }
  out.x_grad = x_cot.col(0);
  return out;
}

/// Test oracle: central finite differences of exact_logdet over every
/// parameter (guards d <= 64, params <= 10000).
inline MlpGrads exact_logdet_grad_oracle(LipschitzMlp net, const Vec& x, double step = 1e-5) {
  if (x.size() > 64 || net.num_params() > 10000)
    throw GuardViolation("exact_logdet_grad_oracle: size guard");
  MlpGrads g = net.zero_grads();
  auto eval = [&]() { return exact_logdet(net.jacobian(x), false); };
  for (int l = 0; l < net.n_layers(); ++l) {
    Mat& W = net.layers[l].W;
    for (Eigen::Index j = 0; j < W.cols(); ++j)
      for (Eigen::Index i = 0; i < W.rows(); ++i) {
        const double w0 = W(i, j);
        W(i, j) = w0 + step;
        const double hi = eval();
        W(i, j) = w0 - step;
        const double lo = eval();
        W(i, j) = w0;
        g.dW[l](i, j) = (hi - lo) / (2 * step);
      }
    Vec& b = net.layers[l].b;
    for (Eigen::Index i = 0; i < b.size(); ++i) {
      const double b0 = b[i];
      b[i] = b0 + step;
      const double hi = eval();
      b[i] = b0 - step;
      const double lo = eval();
      b[i] = b0;
      g.db[l][i] = (hi - lo) / (2 * step);
    }
  }
  return g;
}

}  // namespace impflow
