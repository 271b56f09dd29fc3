#include <catch2/catch_amalgamated.hpp>

#include "impflow/mlp.hpp"
#include "impflow/random.hpp"
#include "impflow/tape.hpp"

using namespace impflow;

TEST_CASE("gradient of x^T x", "[tape]") {
  GradientTape tape;
  Vec x(2);
  x << 1, 2;
  const NodeId xn = tape.leaf(x);
  const NodeId s = tape.dot(xn, xn);
  const auto g = tape.gradient(s, {xn});
  CHECK_THAT(g[0][0], Catch::Matchers::WithinAbs(2.0, 1e-14));
  CHECK_THAT(g[0][1], Catch::Matchers::WithinAbs(4.0, 1e-14));
}

TEST_CASE("bilinear form u^T W v", "[tape]") {
  GradientTape tape;
  RandomState rng(1);
  const Mat W = rng.normal_mat(3, 2);
  const Vec u = rng.normal_vec(3);
  const Vec v = rng.normal_vec(2);
  const MatId wid = tape.mat_leaf(W);
  const NodeId vn = tape.leaf(v);
  const NodeId un = tape.constant(u);
  const NodeId s = tape.dot(un, tape.matvec(wid, vn));
  auto adj = tape.backward(s);
  const Mat dW = adj.mat_grad(wid);
  CHECK((dW - u * v.transpose()).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((adj.vec_grad(vn) - W.transpose() * u).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("unrecorded leaf is rejected", "[tape]") {
  GradientTape tape;
  const NodeId c = tape.constant(Vec::Ones(2));
  const NodeId s = tape.dot(c, c);
  CHECK_THROWS_AS(tape.gradient(s, {c}), std::invalid_argument);
}

TEST_CASE("recorded backward gives exact second derivatives of activations", "[tape]") {
  GradientTape tape;
  const double x0 = 0.37;
  const NodeId x = tape.leaf(Vec::Constant(1, x0));
  const NodeId one = tape.constant(Vec::Ones(1));
  const NodeId y = tape.act(x, ActivationKind::LipSwish, 0);
  const NodeId s = tape.dot(y, one);
  auto adj = tape.backward(s, true);
  REQUIRE(adj.node[x] >= 0);
  CHECK_THAT(adj.vec_grad(x)[0],
             Catch::Matchers::WithinAbs(activation_eval(ActivationKind::LipSwish, x0, 1), 1e-14));
  const NodeId s2 = tape.dot(adj.node[x], one);
  auto adj2 = tape.backward(s2, false);
  CHECK_THAT(adj2.vec_grad(x)[0],
             Catch::Matchers::WithinAbs(activation_eval(ActivationKind::LipSwish, x0, 2), 1e-12));
}

namespace {

/// v^T J_g(x) v of a taped net, with gradients w.r.t. weights, via one
/// recorded backward followed by one plain backward.
struct SecondOrder {
  double value;
  std::vector<Mat> dW;
  Vec dx;
};

SecondOrder taped_vjv(const LipschitzMlp& net, const Vec& x, const Vec& v) {
  GradientTape tape;
  TapedMlp tm = net.record(tape, x);
  const NodeId vc = tape.constant(v);
  const NodeId s1 = tape.dot(vc, tm.output);  // v . g(x)
  auto adj = tape.backward(s1, true);
  const NodeId jtv = adj.node[tm.input];      // J^T v as a tape node
  const NodeId s2 = tape.dot(jtv, vc);        // v^T J v
  auto adj2 = tape.backward(s2, false);
  SecondOrder out;
  out.value = tape.value(s2)[0];
  for (MatId w : tm.W_ids) out.dW.push_back(adj2.mat_grad(w));
  out.dx = adj2.vec_grad(tm.input);
  return out;
}

}  // namespace

TEST_CASE("second-order: d(v^T J v)/dW matches finite differences", "[tape]") {
  RandomState rng(11);
  LipschitzMlp net = make_mlp(2, 3, 2, ActivationKind::LipSwish, 0.9, rng, 50);
  const Vec x = rng.normal_vec(2);
  const Vec v = rng.normal_vec(2);
  SecondOrder so = taped_vjv(net, x, v);
  CHECK_THAT(so.value, Catch::Matchers::WithinAbs(v.dot(net.jacobian(x) * v), 1e-12));

  const double step = 1e-5;
  for (int l = 0; l < net.n_layers(); ++l) {
    for (Eigen::Index i = 0; i < net.layers[l].W.rows(); ++i)
      for (Eigen::Index j = 0; j < net.layers[l].W.cols(); ++j) {
        LipschitzMlp hi = net, lo = net;
        hi.layers[l].W(i, j) += step;
        lo.layers[l].W(i, j) -= step;
        const double fd = (v.dot(hi.jacobian(x) * v) - v.dot(lo.jacobian(x) * v)) / (2 * step);
        CHECK_THAT(so.dW[static_cast<size_t>(l)](i, j),
                   Catch::Matchers::WithinAbs(fd, 1e-6 * std::max(1.0, std::abs(fd))));
      }
  }
  // Input gradient too.
  for (Eigen::Index j = 0; j < 2; ++j) {
    Vec hi = x, lo = x;
    hi[j] += step;
    lo[j] -= step;
    const double fd = (v.dot(net.jacobian(hi) * v) - v.dot(net.jacobian(lo) * v)) / (2 * step);
    CHECK_THAT(so.dx[j], Catch::Matchers::WithinAbs(fd, 1e-6 * std::max(1.0, std::abs(fd))));
  }
}

TEST_CASE("random graphs match finite differences", "[tape]") {
  RandomState rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const int d = 2 + static_cast<int>(rng.next_u64() % 3);
    const Mat A = rng.normal_mat(d, d);
    const Mat B = rng.normal_mat(d, d);
    const Vec c = rng.normal_vec(d);
    const Vec w = rng.normal_vec(d);
    const Vec x0 = rng.normal_vec(d);

    auto eval = [&](const Vec& x, GradientTape& tape, NodeId* leaf) {
      const NodeId xn = tape.leaf(x);
      if (leaf) *leaf = xn;
      NodeId h = tape.matvec(tape.mat_leaf(A), xn);
      h = tape.act(h, ActivationKind::LipSwish, 0);
      h = tape.add(tape.mat_tvec(tape.mat_leaf(B), h), tape.constant(c));
      h = tape.hadamard(h, tape.act(xn, ActivationKind::Sine, 0));
      return tape.dot(h, tape.constant(w));
    };

    GradientTape tape;
    NodeId xn;
    const NodeId s = eval(x0, tape, &xn);
    const Vec grad = tape.gradient(s, {xn})[0];

    const double step = 1e-5;
    for (Eigen::Index j = 0; j < d; ++j) {
      Vec hi = x0, lo = x0;
      hi[j] += step;
      lo[j] -= step;
      GradientTape th, tl;
      const double fd = (th.value(eval(hi, th, nullptr))[0] - tl.value(eval(lo, tl, nullptr))[0]) / (2 * step);
      REQUIRE_THAT(grad[j], Catch::Matchers::WithinAbs(fd, 1e-6 * std::max(1.0, std::abs(fd))));
    }
  }
}
