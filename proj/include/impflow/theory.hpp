#pragma once

// Executable witnesses for the structural claims behind the two block
// families: the exact 1-D implicit construction of the steep piecewise
// line, the linear three-block counterexample whose composed Jacobian has
// two negative eigenvalues, bi-Lipschitz ratio intervals, and the depth
// lower bound on approximating steep functions with residual stacks.

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>

#include "impflow/model.hpp"

#include <json.hpp>

namespace impflow {

struct BallSpec {
  Vec center;
  double radius = 0.0;
};

struct BoundReport {
  std::string name;
  double lower = 0.0;       // admissible interval (lower == upper means one-sided)
  double upper = 0.0;
  double measured_min = 0.0;
  double measured_max = 0.0;
  bool pass = false;

  nlohmann::json to_json() const {
    return {{"name", name},        {"lower", lower},
            {"upper", upper},      {"measured_min", measured_min},
            {"measured_max", measured_max}, {"pass", pass}};
  }
};

/// Piecewise-linear target with slope 0.1 on x < 0 and slope 10 on x >= 0.
inline double target_1d(double x) { return x < 0 ? 0.1 * x : 10.0 * x; }

namespace detail {

inline LipschitzMlp scalar_two_layer(double w1, double w2, double c) {
  LipschitzMlp net;
  net.act = ActivationKind::ReLU;
  for (double w : {w1, w2}) {
    LinearLayer l;
    l.W = Mat::Constant(1, 1, w);
    l.b = Vec::Zero(1);
    l.c = c;
    net.layers.push_back(std::move(l));
  }
  return net;
}

}  // namespace detail

/// One implicit block whose induced map is exactly target_1d:
///   g_x(x) = relu(-0.9 x),  g_z(z) = -sqrt(0.9) relu(sqrt(0.9) z).
/// Weights are assigned directly (each factor is 0.9-Lipschitz already);
/// spectral normalization would only perturb the exact values.
inline ImpBlock construct_exact_impflow_1d() {
  const double s = std::sqrt(0.9);
  return ImpBlock{detail::scalar_two_layer(-0.9, 1.0, 0.95),
                  detail::scalar_two_layer(s, -s, 0.95)};
}

struct CounterexampleReport {
  Mat a1, a2, a3;
  Mat product;              // (I+A1)(I+A2)(I+A3)
  Eig2 eigenvalues;
  double norms[3] = {0, 0, 0};
  bool each_contractive = false;

  nlohmann::json to_json() const {
    auto mat = [](const Mat& m) {
      return nlohmann::json{{m(0, 0), m(0, 1)}, {m(1, 0), m(1, 1)}};
    };
    return {{"product", mat(product)},
            {"eig_real", {eigenvalues.l1.real(), eigenvalues.l2.real()}},
            {"eig_imag", {eigenvalues.l1.imag(), eigenvalues.l2.imag()}},
            {"norms", {norms[0], norms[1], norms[2]}},
            {"each_contractive", each_contractive}};
  }
};

/// Three linear residual blocks x + A_i x, each with ||A_i||_2 < 1, whose
/// composed Jacobian nevertheless has two negative real eigenvalues — a map
/// no single residual block (or stack sharing its Jacobian) can represent.
inline CounterexampleReport negative_eigenvalue_counterexample() {
  CounterexampleReport rep;
  rep.a1.resize(2, 2);
  rep.a1 << -0.46, -0.20, 0.85, 0.00;
  rep.a2.resize(2, 2);
  rep.a2 << -0.20, -0.70, 0.30, -0.60;
  rep.a3.resize(2, 2);
  rep.a3 << -0.50, -0.60, -0.20, -0.55;
  const Mat I = Mat::Identity(2, 2);
  rep.product = (I + rep.a1) * (I + rep.a2) * (I + rep.a3);
  rep.eigenvalues = eig_2x2(rep.product);
  RandomState rng(7);
  const Mat* as[3] = {&rep.a1, &rep.a2, &rep.a3};
  rep.each_contractive = true;
  for (int i = 0; i < 3; ++i) {
    rep.norms[i] = power_iteration_norm(*as[i], 500, 1e-12, rng).sigma;
    rep.each_contractive = rep.each_contractive && rep.norms[i] < 1.0;
  }
  return rep;
}

/// Ratio interval for an L-block residual stack with per-block residual
/// Lipschitz bound kappa: each block scales distances within [1-k, 1+k].
inline std::pair<double, double> resflow_ratio_interval(double kappa, int L) {
  return {std::pow(1.0 - kappa, L), std::pow(1.0 + kappa, L)};
}

/// Ratio interval for a single implicit block with both residual nets
/// kappa-Lipschitz: the composition of a [1-k, 1+k] map with the inverse of
/// another gives [(1-k)/(1+k), (1+k)/(1-k)].
inline std::pair<double, double> impflow_ratio_interval(double kappa) {
  return {(1.0 - kappa) / (1.0 + kappa), (1.0 + kappa) / (1.0 - kappa)};
}

/// Sample point pairs, push both through the model, and check every ratio
/// ||f(x1)-f(x2)|| / ||x1-x2|| against [lo, hi].
inline BoundReport lipschitz_ratio_check(const FlowModel& model, double lo, double hi, int n_pairs,
                                         RandomState& rng, const SolverConfig& scfg) {
  if (n_pairs < 1) throw std::invalid_argument("lipschitz_ratio_check: n_pairs >= 1");
  BoundReport rep;
  rep.name = "lipschitz_ratio";
  rep.lower = lo;
  rep.upper = hi;
  double rmin = std::numeric_limits<double>::infinity();
  double rmax = 0.0;
  for (int i = 0; i < n_pairs; ++i) {
    const Vec x1 = 2.0 * rng.normal_vec(model.dim);
    const Vec x2 = 2.0 * rng.normal_vec(model.dim);
    const double dx = (x1 - x2).norm();
    if (dx == 0.0) continue;
    const double ratio = (flow_map(model, x1, scfg) - flow_map(model, x2, scfg)).norm() / dx;
    rmin = std::min(rmin, ratio);
    rmax = std::max(rmax, ratio);
  }
  rep.measured_min = rmin;
  rep.measured_max = rmax;
  rep.pass = rmin >= lo && rmax <= hi;
  return rep;
}

/// Depth lower bound: a stack of ell residual blocks cannot track a slope-L
/// segment closer than (r/2)(L - 2^ell) in sup norm on a radius-r ball.
/// Measures the model's sup error against target_1d on a 2001-point grid.
inline BoundReport depth_lower_bound_check(int ell, const FlowModel& model, const BallSpec& ball,
                                        double slope, const SolverConfig& scfg,
                                        double slack = 0.01) {
  if (model.dim != 1) throw std::invalid_argument("depth_lower_bound_check: 1-D models only");
  if (!(ball.radius > 0)) throw std::invalid_argument("depth_lower_bound_check: radius > 0");
  const double lo = ball.center[0] - ball.radius;
  const double hi = ball.center[0] + ball.radius;
  if (lo < 0.0)
    throw std::invalid_argument("depth_lower_bound_check: ball must stay in the steep region x >= 0");
  BoundReport rep;
  rep.name = "depth_lower_bound_ell" + std::to_string(ell);
  rep.lower = ball.radius / 2.0 * (slope - std::pow(2.0, ell)) - slack;
  rep.upper = std::numeric_limits<double>::infinity();
  double sup = 0.0;
  const int n = 2001;
  for (int i = 0; i < n; ++i) {
    const double x = lo + (hi - lo) * i / (n - 1);
    const double fx = flow_map(model, Vec::Constant(1, x), scfg)[0];
    sup = std::max(sup, std::abs(fx - target_1d(x)));
  }
  rep.measured_min = rep.measured_max = sup;
  rep.pass = sup >= rep.lower;
  return rep;
}

}  // namespace impflow
