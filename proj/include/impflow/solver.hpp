#pragma once

// Root finding: Broyden's quasi-Newton method (good Broyden, inverse
// update, backtracking line search), a contraction fixed-point solver, and
// the transpose linear solve used by the backward pass.

#include <Eigen/Dense>
#include <functional>
#include <stdexcept>

#include "impflow/linalg.hpp"

namespace impflow {

enum class InitMode { Zero, Passthrough };

struct SolverConfig {
  double eps_f = 1e-6;        // forward residual tolerance
  double eps_b = 1e-10;       // backward residual tolerance
  double sample_eps = 1e-5;   // sampling (inverse) tolerance
  int max_iter = 200;
  double ls_shrink = 0.5;
  int ls_max_trials = 20;
  InitMode init_mode = InitMode::Passthrough;

  void validate() const {
    if (!(eps_f > 0) || !(eps_b > 0) || !(sample_eps > 0))
      throw std::invalid_argument("SolverConfig: tolerances must be positive");
    if (max_iter < 1) throw std::invalid_argument("SolverConfig: max_iter >= 1");
  }
};

struct SolveReport {
  Vec root;
  double residual_norm = 0;
  int n_iter = 0;
  int n_evals = 0;
  bool converged = false;
};

using ResidualMap = std::function<Vec(const Vec&)>;

/// Iterate z <- z - alpha*B*h(z) with B maintained by the rank-one good
/// Broyden inverse update; alpha from backtracking, accepting the first step
/// that strictly decreases ||h||. b0_scale sets the initial B = b0_scale*I.
inline SolveReport broyden_solve(const ResidualMap& h, const Vec& z0, const SolverConfig& cfg,
                                 double tol, double b0_scale = -1.0) {
  cfg.validate();
  SolveReport rep;
  Vec z = z0;
  Vec f = h(z);
  rep.n_evals = 1;
  if (!f.allFinite()) throw std::invalid_argument("broyden_solve: non-finite residual at start");
  double fnorm = f.norm();
  const Eigen::Index d = z.size();
  Mat B = b0_scale * Mat::Identity(d, d);

  Vec best_z = z;
  double best_norm = fnorm;

  while (fnorm >= tol && rep.n_iter < cfg.max_iter) {
    const Vec step = B * f;
    double alpha = 1.0;
    Vec z_new, f_new;
    double fnorm_new = fnorm;
    bool accepted = false;
    for (int t = 0; t < cfg.ls_max_trials; ++t) {
      z_new = z - alpha * step;
      f_new = h(z_new);
      ++rep.n_evals;
      fnorm_new = f_new.norm();
      if (std::isfinite(fnorm_new) && fnorm_new < fnorm) { accepted = true; break; }
      alpha *= cfg.ls_shrink;
    }
    ++rep.n_iter;
    if (!accepted) break;  // stalled; best iterate is returned

    const Vec dz = z_new - z;
    const Vec df = f_new - f;
    const Vec Bdf = B * df;
    const double denom = dz.dot(Bdf);
    if (std::abs(denom) >= 1e-30) {
      B += ((dz - Bdf) / denom) * (dz.transpose() * B);
    }
    z = z_new;
    f = f_new;
    fnorm = fnorm_new;
    if (fnorm < best_norm) { best_norm = fnorm; best_z = z; }
  }

  rep.root = (fnorm <= best_norm) ? z : best_z;
  rep.residual_norm = std::min(fnorm, best_norm);
  rep.converged = rep.residual_norm < tol;
  return rep;
}

/// Banach iteration z <- map(z) for a contraction; same stop rule as Broyden
/// (residual ||map(z)-z|| below tol).
inline SolveReport fixed_point_solve(const ResidualMap& map, const Vec& z0, const SolverConfig& cfg,
                                     double tol) {
  cfg.validate();
  SolveReport rep;
  Vec z = z0;
  for (; rep.n_iter < cfg.max_iter; ++rep.n_iter) {
    Vec next = map(z);
    ++rep.n_evals;
    if (!next.allFinite()) throw std::invalid_argument("fixed_point_solve: non-finite iterate");
    const double res = (next - z).norm();
    z = next;
    rep.residual_norm = res;
    if (res < tol) {
      ++rep.n_iter;
      rep.converged = true;
      break;
    }
  }
  rep.root = z;
  return rep;
}

/// Solve y * J_G = rhs given only the map u -> u^T J_G, by Broyden on
/// h(y) = y*J_G - rhs. J_G = I + J_{g_z} is near the identity, so the
/// residual Jacobian is near +I and B starts at +I.
inline SolveReport linear_transpose_solve(const std::function<Vec(const Vec&)>& vjp_of_G,
                                          const Vec& rhs, const SolverConfig& cfg) {
  auto h = [&](const Vec& y) -> Vec { return vjp_of_G(y) - rhs; };
  return broyden_solve(h, Vec::Zero(rhs.size()), cfg, cfg.eps_b, 1.0);
}

/// Neumann-series oracle for the same system: y = rhs * sum_k (-J_{g_z})^k,
/// iterated until the increment norm drops below tol. Cross-validation only.
inline Vec neumann_transpose_solve(const std::function<Vec(const Vec&)>& vjp_of_gz,
                                   const Vec& rhs, double tol = 1e-12, int max_terms = 10000) {
  Vec acc = rhs;
  Vec term = rhs;
  for (int k = 0; k < max_terms; ++k) {
    term = -vjp_of_gz(term);
    acc += term;
    if (term.norm() < tol) break;
  }
  return acc;
}

}  // namespace impflow
