#pragma once

// Invertible blocks.
//
// Residual block:  z = x + g(x), Lip(g) < 1, so x + g is a bijection and
// ln det(I + J_g(x)) > 0 is the change-of-variables term.
//
// Implicit block:  z defined by the root of
//     F(z, x) = g_x(x) - g_z(z) + x - z = 0,
// with Lip(g_x), Lip(g_z) < 1. This composes the explicit residual map
// x + g_x with the inverse of z + g_z, and its change-of-variables term is
//     ln det(I + J_{g_x}(x)) - ln det(I + J_{g_z}(z)),
// both determinants positive. The backward pass never differentiates
// through the iterative solve: with y the solution of y (I + J_{g_z}) =
// dL/dz, the input cotangent is y (I + J_{g_x}) and the parameter
// cotangents are y dg_x/dtheta and -y dg_z/dtheta.

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

#include "impflow/logdet.hpp"
#include "impflow/mlp.hpp"
#include "impflow/solver.hpp"

namespace impflow {

class SolverFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ResBlock {
  LipschitzMlp g;
};

struct ImpBlock {
  LipschitzMlp gx;
  LipschitzMlp gz;
};

struct BlockResult {
  Vec y;            // block output
  double logdet;    // change-of-variables term for this block
  SolveReport report;
};

/// Shared randomness for the stochastic log-det path: one truncation draw
/// and one probe applied to every log-det term of a block.
struct SeriesDraw {
  int n_tail = 1;
  Vec v;
  static SeriesDraw sample(Eigen::Index d, const EstimatorConfig& cfg, RandomState& rng) {
    return {cfg.draw_tail(rng), rng.normal_vec(d)};
  }
};

namespace detail {

inline double logdet_term(const LipschitzMlp& net, const Vec& x, const EstimatorConfig& cfg,
                          const SeriesDraw* draw) {
  if (cfg.mode == LogDetMode::Exact) return exact_logdet(net.jacobian(x), false);
  if (!draw) throw std::invalid_argument("logdet_term: stochastic mode needs a draw");
  auto vjp = [&, trace = net.forward_trace(Mat(x))](const Vec& u) -> Vec {
    return Mat(net.vjp(trace, Mat(u))).col(0);
  };
  return series_logdet_estimate_with(vjp, draw->v, draw->n_tail, cfg);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Residual block

inline BlockResult res_forward(const ResBlock& blk, const Vec& x, const EstimatorConfig& cfg,
                               const SeriesDraw* draw = nullptr) {
  BlockResult out;
  out.y = x + blk.g.forward(x);
  out.logdet = detail::logdet_term(blk.g, x, cfg, draw);
  out.report.converged = true;
  return out;
}

/// Invert z = x + g(x) by the Banach iteration x <- z - g(x).
inline BlockResult res_inverse(const ResBlock& blk, const Vec& z, const SolverConfig& scfg,
                               double tol, const EstimatorConfig& cfg,
                               const SeriesDraw* draw = nullptr) {
  auto map = [&](const Vec& x) -> Vec { return z - blk.g.forward(x); };
  BlockResult out;
  out.report = fixed_point_solve(map, z, scfg, tol);
  if (!out.report.converged)
    throw SolverFailure("res_inverse: fixed-point iteration did not reach tolerance");
  out.y = out.report.root;
  out.logdet = -detail::logdet_term(blk.g, out.y, cfg, draw);
  return out;
}

// ---------------------------------------------------------------------------
// Implicit block

inline Vec imp_residual(const ImpBlock& blk, const Vec& z, const Vec& x) {
  return blk.gx.forward(x) - blk.gz.forward(z) + x - z;
}

/// Root-find z with F(z,x)=0 by Broyden (B0 = -I: the residual Jacobian in z
/// is -(I+J_{g_z}), near -I), then attach the two log-det terms.
inline BlockResult imp_forward(const ImpBlock& blk, const Vec& x, const SolverConfig& scfg,
                               double tol, const EstimatorConfig& cfg,
                               const SeriesDraw* draw = nullptr) {
  const Vec rhs = blk.gx.forward(x) + x;
  auto h = [&](const Vec& z) -> Vec { return rhs - blk.gz.forward(z) - z; };
  const Vec z0 = (scfg.init_mode == InitMode::Passthrough) ? x : Vec(Vec::Zero(x.size()));
  BlockResult out;
  out.report = broyden_solve(h, z0, scfg, tol, -1.0);
  if (!out.report.converged)
    throw SolverFailure("imp_forward: root solve did not reach tolerance");
  out.y = out.report.root;
  out.logdet = detail::logdet_term(blk.gx, x, cfg, draw) -
               detail::logdet_term(blk.gz, out.y, cfg, draw);
  return out;
}

/// The inverse map swaps the roles of the two networks: x is the root of
/// g_z(z) - g_x(x) + z - x = 0, with the log-det sign flipped.
inline BlockResult imp_inverse(const ImpBlock& blk, const Vec& z, const SolverConfig& scfg,
                               double tol, const EstimatorConfig& cfg,
                               const SeriesDraw* draw = nullptr) {
  return imp_forward(ImpBlock{blk.gz, blk.gx}, z, scfg, tol, cfg, draw);
}

/// Signed change-of-variables contribution of an implicit block at a root
/// pair: lndet(I+J_{g_x}(x)) - lndet(I+J_{g_z}(z)). In stochastic mode the
/// two terms share one (truncation, probe) draw by default; pass
/// shared_draw=false for independent draws per term.
inline double block_logdensity_terms(const ImpBlock& blk, const Vec& x, const Vec& z,
                                     const EstimatorConfig& cfg, RandomState* rng = nullptr,
                                     bool shared_draw = true) {
  if (cfg.mode == LogDetMode::Exact)
    return detail::logdet_term(blk.gx, x, cfg, nullptr) - detail::logdet_term(blk.gz, z, cfg, nullptr);
  if (!rng) throw std::invalid_argument("block_logdensity_terms: stochastic mode needs an rng");
  SeriesDraw dx = SeriesDraw::sample(x.size(), cfg, *rng);
  SeriesDraw dz = shared_draw ? dx : SeriesDraw::sample(z.size(), cfg, *rng);
  return detail::logdet_term(blk.gx, x, cfg, &dx) - detail::logdet_term(blk.gz, z, cfg, &dz);
}

struct ImpBlockGrads {
  MlpGrads gx;
  MlpGrads gz;
  Vec x_cot;
};

/// Cotangent propagation through a solved implicit block, given the root
/// pair (x, z) and dL/dz. Refuses stale roots: the residual at (x, z) must
/// be within 10x the forward tolerance.
inline ImpBlockGrads imp_vjp(const ImpBlock& blk, const Vec& x, const Vec& z, const Vec& z_cot,
                             const SolverConfig& scfg) {
  const double res = imp_residual(blk, z, x).norm();
  if (!(res <= 10.0 * scfg.eps_f))
    throw std::invalid_argument("imp_vjp: (x, z) is not a root of the block residual");

  const MlpTrace tz = blk.gz.forward_trace(Mat(z));
  auto vjp_G = [&](const Vec& y) -> Vec {
    return y + Mat(blk.gz.vjp(tz, Mat(y))).col(0);  // y^T (I + J_{g_z})
  };
  const SolveReport lin = linear_transpose_solve(vjp_G, z_cot, scfg);
  if (!lin.converged) throw SolverFailure("imp_vjp: transpose linear solve did not converge");
  const Vec y = lin.root;

  ImpBlockGrads out{blk.gx.zero_grads(), blk.gz.zero_grads(), Vec::Zero(x.size())};
  const MlpTrace tx = blk.gx.forward_trace(Mat(x));
  Mat x_cot = Mat(y);
  blk.gx.backward_params(tx, Mat(y), out.gx, &x_cot);  // y + y J_{g_x}, y dg_x/dtheta
  out.x_cot = x_cot.col(0);
  blk.gz.backward_params(tz, Mat(Vec(-y)), out.gz);    // -y dg_z/dtheta
  return out;
}

}  // namespace impflow
