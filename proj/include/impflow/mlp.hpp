#pragma once

// Spectrally normalized multi-layer perceptrons with Lipschitz coefficient c
// per linear layer, plus exact-Jacobian, VJP/JVP and second-order
// contraction accessors. All evaluation paths are batched: vectors are the
// columns of d x B matrices, so the heavy lifting is shared-weight GEMMs.

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "impflow/activation.hpp"
#include "impflow/linalg.hpp"
#include "impflow/random.hpp"
#include "impflow/tape.hpp"

#include <json.hpp>

namespace impflow {

struct LinearLayer {
  Mat W;
  Vec b;
  double c = 0.9;        // Lipschitz coefficient in (0,1]
  Vec u_est, v_est;      // persisted singular-vector estimates (warm start)
  int power_iters = 20;
  double power_tol = 1e-3;
};

/// Rescale W to W * min(1, c/sigma_hat) with sigma_hat from warm-started
/// power iteration. Biases are untouched.
inline double spectral_normalize(LinearLayer& layer, RandomState& rng) {
  if (!(layer.c > 0.0 && layer.c <= 1.0)) throw std::invalid_argument("spectral_normalize: c must be in (0,1]");
  if (layer.u_est.size() != layer.W.rows()) {
    layer.u_est = rng.normal_vec(layer.W.rows()).normalized();
    layer.v_est = rng.normal_vec(layer.W.cols()).normalized();
  }
  double sigma = 0.0;
  for (int it = 0; it < layer.power_iters; ++it) {
    Vec v = layer.W.transpose() * layer.u_est;
    double nv = v.norm();
    if (nv == 0.0) { sigma = 0.0; break; }
    layer.v_est = v / nv;
    Vec u = layer.W * layer.v_est;
    double nu = u.norm();
    if (nu == 0.0) { sigma = 0.0; break; }
    layer.u_est = u / nu;
    const double s = layer.u_est.dot(layer.W * layer.v_est);
    if (it > 0 && std::abs(s - sigma) < layer.power_tol) { sigma = s; break; }
    sigma = s;
  }
  if (sigma > layer.c) layer.W *= layer.c / sigma;
  return sigma;
}

/// Batched forward intermediates: pre[l] holds W_l a_{l-1} + b_l, post[l]
/// the activated values (hidden layers only; the output layer is linear).
struct MlpTrace {
  Mat input;
  std::vector<Mat> pre;
  std::vector<Mat> post;
  const Mat& output() const { return pre.back(); }
};

struct MlpGrads {
  std::vector<Mat> dW;
  std::vector<Vec> db;

  void add_scaled(const MlpGrads& o, double s) {
    for (size_t l = 0; l < dW.size(); ++l) { dW[l] += s * o.dW[l]; db[l] += s * o.db[l]; }
  }
  void scale(double s) {
    for (size_t l = 0; l < dW.size(); ++l) { dW[l] *= s; db[l] *= s; }
  }
  double squared_norm() const {
    double t = 0;
    for (size_t l = 0; l < dW.size(); ++l) { t += dW[l].squaredNorm(); t += db[l].squaredNorm(); }
    return t;
  }
  bool all_finite() const {
    for (size_t l = 0; l < dW.size(); ++l)
      if (!dW[l].allFinite() || !db[l].allFinite()) return false;
    return true;
  }
};

struct TapedMlp {
  NodeId input = -1;
  NodeId output = -1;
  std::vector<MatId> W_ids;
  std::vector<NodeId> b_ids;
};

class LipschitzMlp {
 public:
  std::vector<LinearLayer> layers;
  ActivationKind act = ActivationKind::ReLU;

  int dim_in() const { return static_cast<int>(layers.front().W.cols()); }
  int dim_out() const { return static_cast<int>(layers.back().W.rows()); }
  int n_layers() const { return static_cast<int>(layers.size()); }

  int num_params() const {
    int n = 0;
    for (const auto& l : layers) n += static_cast<int>(l.W.size() + l.b.size());
    return n;
  }

  MlpGrads zero_grads() const {
    MlpGrads g;
    for (const auto& l : layers) {
      g.dW.emplace_back(Mat::Zero(l.W.rows(), l.W.cols()));
      g.db.emplace_back(Vec::Zero(l.b.size()));
    }
    return g;
  }

  /// Product of the layer Lipschitz coefficients; an upper bound on Lip(g).
  double kappa() const {
    double k = 1.0;
    for (const auto& l : layers) k *= l.c;
    return k;
  }

  MlpTrace forward_trace(const Mat& X) const {
    check_input(X);
    MlpTrace t;
    t.input = X;
    const int L = n_layers();
    t.pre.reserve(L);
    t.post.reserve(L - 1);
    const Mat* cur = &t.input;
    for (int l = 0; l < L; ++l) {
      t.pre.push_back((layers[l].W * (*cur)).colwise() + layers[l].b);
      if (l + 1 < L) {
        t.post.push_back(apply_act(t.pre.back(), 0));
        cur = &t.post.back();
      }
    }
    return t;
  }

  Mat forward(const Mat& X) const { return forward_trace(X).output(); }
  Vec forward(const Vec& x) const { return Mat(forward(Mat(x))).col(0); }

  /// Exact Jacobian at x: W_L D_{L-1} ... D_1 W_1 (guard d <= 64).
  Mat jacobian(const Vec& x) const {
    if (dim_in() > 64) throw std::invalid_argument("jacobian: dimension guard d <= 64");
    MlpTrace t = forward_trace(Mat(x));
    const int L = n_layers();
    Mat J = layers[0].W;
    for (int l = 1; l < L; ++l) {
      Mat D = apply_act(t.pre[l - 1], 1);
      J = layers[l].W * (D.col(0).asDiagonal() * J);
    }
    return J;
  }

  /// Per-sample exact Jacobians from a batched trace, built column by column
  /// with JVP passes (guard d <= 64).
  std::vector<Mat> jacobians(const MlpTrace& t) const {
    const int d = dim_in();
    if (d > 64) throw std::invalid_argument("jacobians: dimension guard d <= 64");
    const Eigen::Index B = t.input.cols();
    std::vector<Mat> out(static_cast<size_t>(B), Mat(dim_out(), d));
    for (int j = 0; j < d; ++j) {
      Mat tangent = Mat::Zero(d, B);
      tangent.row(j).setOnes();
      Mat col = jvp(t, tangent);
      for (Eigen::Index b = 0; b < B; ++b) out[static_cast<size_t>(b)].col(j) = col.col(b);
    }
    return out;
  }

  /// Forward tangent propagation: columns of T are per-sample tangents.
  Mat jvp(const MlpTrace& t, const Mat& T) const {
    const int L = n_layers();
    Mat cur = layers[0].W * T;
    for (int l = 1; l < L; ++l) {
      cur = apply_act(t.pre[l - 1], 1).cwiseProduct(cur);
      cur = layers[l].W * cur;
    }
    return cur;
  }

  /// u^T J_g(x) per sample: one backward sweep, batched over columns of U.
  Mat vjp(const MlpTrace& t, const Mat& U) const {
    const int L = n_layers();
    Mat r = layers[L - 1].W.transpose() * U;
    for (int l = L - 2; l >= 0; --l) {
      r = apply_act(t.pre[l], 1).cwiseProduct(r);
      r = layers[l].W.transpose() * r;
    }
    return r;
  }

  Vec vjp(const Vec& x, const Vec& u) const {
    if (u.size() != dim_out()) throw std::invalid_argument("vjp: cotangent dimension mismatch");
    return Mat(vjp(forward_trace(Mat(x)), Mat(u))).col(0);
  }

  /// Backprop of sum_b u_b . g(x_b): accumulates parameter gradients and,
  /// optionally, adds the input cotangents J^T u into *x_cot.
  void backward_params(const MlpTrace& t, const Mat& U, MlpGrads& acc, Mat* x_cot = nullptr) const {
    const int L = n_layers();
    Mat m = U;
    for (int l = L - 1; l >= 0; --l) {
      const Mat& a_prev = (l == 0) ? t.input : t.post[l - 1];
      acc.dW[l].noalias() += m * a_prev.transpose();
      acc.db[l] += m.rowwise().sum();
      if (l > 0) {
        Mat r = layers[l].W.transpose() * m;
        m = apply_act(t.pre[l - 1], 1).cwiseProduct(r);
      } else if (x_cot) {
        x_cot->noalias() += layers[0].W.transpose() * m;
      }
    }
  }

  /// Gradients of sum_b u_b^T J_g(x_b) v_b with u, v held fixed: parameter
  /// gradients accumulate into acc, input gradients into *x_cot. This is the
  /// building block behind both the exact log-det gradient (u ranging over
  /// rows of (I+J)^{-1}) and the series gradient estimator (rank-one u v^T).
  void jacobian_contraction_grads(const MlpTrace& t, const Mat& U, const Mat& V,
                                  MlpGrads& acc, Mat* x_cot = nullptr) const {
    const int L = n_layers();
    const Eigen::Index B = t.input.cols();
    if (U.cols() != B || V.cols() != B) throw std::invalid_argument("jacobian_contraction_grads: batch mismatch");

    // Forward tangent chain: q_l = W_l t_{l-1}, t_l = phi'(p_l) . q_l.
    std::vector<Mat> q(static_cast<size_t>(L));
    std::vector<Mat> tv(static_cast<size_t>(L));  // t_l, hidden layers only
    {
      Mat cur = V;
      for (int l = 0; l < L; ++l) {
        q[static_cast<size_t>(l)] = layers[l].W * cur;
        if (l + 1 < L) {
          tv[static_cast<size_t>(l)] = apply_act(t.pre[l], 1).cwiseProduct(q[static_cast<size_t>(l)]);
          cur = tv[static_cast<size_t>(l)];
        }
      }
    }
    // Reverse chain: m_L = u; r_l = W_{l+1}^T m_{l+1}; m_l = phi'(p_l) . r_l.
    std::vector<Mat> r(static_cast<size_t>(L));  // adjoint of t_l, hidden layers only
    std::vector<Mat> mv(static_cast<size_t>(L)); // adjoint of q_l
    mv[static_cast<size_t>(L - 1)] = U;
    for (int l = L - 2; l >= 0; --l) {
      r[static_cast<size_t>(l)] = layers[l + 1].W.transpose() * mv[static_cast<size_t>(l + 1)];
      mv[static_cast<size_t>(l)] = apply_act(t.pre[l], 1).cwiseProduct(r[static_cast<size_t>(l)]);
    }
    // Direct terms: dW_l += m_l t_{l-1}^T.
    for (int l = 0; l < L; ++l) {
      const Mat& t_prev = (l == 0) ? V : tv[static_cast<size_t>(l - 1)];
      acc.dW[l].noalias() += mv[static_cast<size_t>(l)] * t_prev.transpose();
    }
    // Sensitivity through the activation-derivative diagonals:
    // gamma_l = phi''(p_l) . r_l . q_l, then one backprop sweep with the
    // gamma_l injected at each pre-activation.
    Mat beta;
    for (int l = L - 2; l >= 0; --l) {
      Mat gamma = apply_act(t.pre[l], 2).cwiseProduct(r[static_cast<size_t>(l)])
                      .cwiseProduct(q[static_cast<size_t>(l)]);
      if (l == L - 2) beta = std::move(gamma);
      else beta = gamma + apply_act(t.pre[l], 1).cwiseProduct(layers[l + 1].W.transpose() * beta);
      // Layer l+1 in the chain above has already consumed beta from layer l+1;
      // accumulate this level's parameter gradient now.
      const Mat& a_prev = (l == 0) ? t.input : t.post[l - 1];
      acc.dW[l].noalias() += beta * a_prev.transpose();
      acc.db[l] += beta.rowwise().sum();
    }
    if (L >= 2 && x_cot) x_cot->noalias() += layers[0].W.transpose() * beta;
  }

  /// Lower bound on Lip(g) from sampled pairs.
  double empirical_lipschitz(RandomState& rng, int n_pairs) const {
    if (n_pairs < 1) throw std::invalid_argument("empirical_lipschitz: n_pairs >= 1");
    double best = 0.0;
    for (int i = 0; i < n_pairs; ++i) {
      Vec x1 = 3.0 * rng.normal_vec(dim_in());
      Vec x2 = 3.0 * rng.normal_vec(dim_in());
      const double dx = (x1 - x2).norm();
      if (dx == 0.0) continue;
      best = std::max(best, (forward(x1) - forward(x2)).norm() / dx);
    }
    return best;
  }

  /// Record the forward pass on a tape; weights become matrix leaves and
  /// biases vector leaves, so parameter gradients are obtainable.
  TapedMlp record(GradientTape& tape, const Vec& x, bool input_is_leaf = true) const {
    TapedMlp tm;
    tm.input = input_is_leaf ? tape.leaf(x) : tape.constant(x);
    NodeId cur = tm.input;
    const int L = n_layers();
    for (int l = 0; l < L; ++l) {
      tm.W_ids.push_back(tape.mat_leaf(layers[l].W));
      tm.b_ids.push_back(tape.leaf(layers[l].b));
      NodeId h = tape.add(tape.matvec(tm.W_ids[l], cur), tm.b_ids[l]);
      cur = (l + 1 < L) ? tape.act(h, act, 0) : h;
    }
    tm.output = cur;
    return tm;
  }

  /// Collect parameter gradients for this net out of tape adjoints.
  MlpGrads grads_from_tape(const GradientTape::Adjoints& adj, const TapedMlp& tm) const {
    MlpGrads g = zero_grads();
    for (int l = 0; l < n_layers(); ++l) {
      if (tm.W_ids[l] < static_cast<int>(adj.mat.size()) && adj.mat[tm.W_ids[l]].size() != 0)
        g.dW[l] = adj.mat[tm.W_ids[l]];
      if (tm.b_ids[l] < static_cast<int>(adj.vec.size()) && adj.vec[tm.b_ids[l]].size() != 0)
        g.db[l] = adj.vec[tm.b_ids[l]];
    }
    return g;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["activation"] = to_string(act);
    j["layers"] = nlohmann::json::array();
    for (const auto& l : layers) {
      nlohmann::json jl;
      jl["rows"] = l.W.rows();
      jl["cols"] = l.W.cols();
      jl["c"] = l.c;
      std::vector<double> w(static_cast<size_t>(l.W.size()));
      for (Eigen::Index i = 0; i < l.W.rows(); ++i)
        for (Eigen::Index k = 0; k < l.W.cols(); ++k) w[static_cast<size_t>(i * l.W.cols() + k)] = l.W(i, k);
      jl["W"] = w;
      jl["b"] = std::vector<double>(l.b.data(), l.b.data() + l.b.size());
      j["layers"].push_back(std::move(jl));
    }
    return j;
  }

  static LipschitzMlp from_json(const nlohmann::json& j) {
    LipschitzMlp net;
    net.act = activation_from_string(j.at("activation").get<std::string>());
    for (const auto& jl : j.at("layers")) {
      LinearLayer l;
      const Eigen::Index rows = jl.at("rows").get<Eigen::Index>();
      const Eigen::Index cols = jl.at("cols").get<Eigen::Index>();
      l.c = jl.at("c").get<double>();
      const auto w = jl.at("W").get<std::vector<double>>();
      const auto b = jl.at("b").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(w.size()) != rows * cols || static_cast<Eigen::Index>(b.size()) != rows)
        throw std::invalid_argument("mlp checkpoint: size mismatch");
      l.W.resize(rows, cols);
      for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index k = 0; k < cols; ++k) l.W(i, k) = w[static_cast<size_t>(i * cols + k)];
      l.b = Eigen::Map<const Vec>(b.data(), rows);
      net.layers.push_back(std::move(l));
    }
    if (net.layers.empty()) throw std::invalid_argument("mlp checkpoint: no layers");
    return net;
  }

  Mat apply_act(const Mat& x, int order) const {
    Mat out(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      for (Eigen::Index i = 0; i < x.rows(); ++i) out(i, j) = activation_eval(act, x(i, j), order);
    return out;
  }

 private:
  void check_input(const Mat& X) const {
    if (X.rows() != dim_in()) throw std::invalid_argument("mlp: input dimension mismatch");
    if (!X.allFinite()) throw std::invalid_argument("mlp: non-finite input");
  }
};

/// Fresh MLP with dims d -> hidden x (n_linear-1) -> d, weights uniform in
/// [-1/sqrt(fan_in), 1/sqrt(fan_in)], every layer spectrally normalized.
inline LipschitzMlp make_mlp(int d, int hidden, int n_linear, ActivationKind act, double c,
                             RandomState& rng, int norm_iters = 200, double norm_tol = 1e-3) {
  if (n_linear < 1) throw std::invalid_argument("make_mlp: need at least one layer");
  LipschitzMlp net;
  net.act = act;
  for (int l = 0; l < n_linear; ++l) {
    const int in = (l == 0) ? d : hidden;
    const int out = (l == n_linear - 1) ? d : hidden;
    LinearLayer layer;
    layer.c = c;
    layer.power_iters = norm_iters;
    layer.power_tol = norm_tol;
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    layer.W.resize(out, in);
    for (Eigen::Index j = 0; j < in; ++j)
      for (Eigen::Index i = 0; i < out; ++i) layer.W(i, j) = rng.uniform(-bound, bound);
    layer.b = Vec::Zero(out);
    spectral_normalize(layer, rng);
    net.layers.push_back(std::move(layer));
  }
  return net;
}

}  // namespace impflow
