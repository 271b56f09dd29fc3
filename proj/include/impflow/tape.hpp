#pragma once

// Minimal reverse-mode differentiation over a small primitive vocabulary
// (matrix-vector products, elementwise activations, sums, inner products).
// The backward pass can itself be recorded onto the tape, which makes
// gradients of a taped gradient obtainable (one nesting level): the emitted
// backward ops use activation derivatives one order higher, so a second,
// unrecorded backward over them yields exact second-order terms.

#include <Eigen/Dense>
#include <stdexcept>
#include <vector>

#include "impflow/activation.hpp"

namespace impflow {

using NodeId = int;
using MatId = int;

class GradientTape {
 public:
  enum class Op { LeafVec, ConstVec, MatVec, MatTVec, Add, Sub, Neg, ScaleC, SMul, Hadamard, Act, Dot };

  NodeId leaf(const Eigen::VectorXd& v) { return push({Op::LeafVec, -1, -1, -1, 0.0, ActivationKind::ReLU, 0, v}); }
  NodeId constant(const Eigen::VectorXd& v) { return push({Op::ConstVec, -1, -1, -1, 0.0, ActivationKind::ReLU, 0, v}); }
  NodeId constant_scalar(double c) { return constant(Eigen::VectorXd::Constant(1, c)); }

  MatId mat_leaf(const Eigen::MatrixXd& m) {
    mats_.push_back(m);
    return static_cast<MatId>(mats_.size() - 1);
  }

  NodeId matvec(MatId m, NodeId a) {
    check_mat(m); const Eigen::VectorXd v = mats_[m] * val(a);
    return push({Op::MatVec, a, -1, m, 0.0, ActivationKind::ReLU, 0, v});
  }
  NodeId mat_tvec(MatId m, NodeId a) {
    check_mat(m); const Eigen::VectorXd v = mats_[m].transpose() * val(a);
    return push({Op::MatTVec, a, -1, m, 0.0, ActivationKind::ReLU, 0, v});
  }
  NodeId add(NodeId a, NodeId b) { return push({Op::Add, a, b, -1, 0.0, ActivationKind::ReLU, 0, val(a) + val(b)}); }
  NodeId sub(NodeId a, NodeId b) { return push({Op::Sub, a, b, -1, 0.0, ActivationKind::ReLU, 0, val(a) - val(b)}); }
  NodeId neg(NodeId a) { return push({Op::Neg, a, -1, -1, 0.0, ActivationKind::ReLU, 0, -val(a)}); }
  NodeId scale(NodeId a, double c) { return push({Op::ScaleC, a, -1, -1, c, ActivationKind::ReLU, 0, c * val(a)}); }
  /// Elementwise product of a with a scalar (1-dim) node s.
  NodeId smul(NodeId a, NodeId s) {
    if (val(s).size() != 1) throw std::invalid_argument("smul: scalar node required");
    return push({Op::SMul, a, s, -1, 0.0, ActivationKind::ReLU, 0, val(s)[0] * val(a)});
  }
  NodeId hadamard(NodeId a, NodeId b) {
    return push({Op::Hadamard, a, b, -1, 0.0, ActivationKind::ReLU, 0, val(a).cwiseProduct(val(b))});
  }
  /// Elementwise activation derivative of the given order applied to a.
  NodeId act(NodeId a, ActivationKind kind, int order = 0) {
    Eigen::VectorXd v = val(a);
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = activation_eval(kind, v[i], order);
    return push({Op::Act, a, -1, -1, 0.0, kind, order, v});
  }
  NodeId dot(NodeId a, NodeId b) {
    return push({Op::Dot, a, b, -1, 0.0, ActivationKind::ReLU, 0,
                 Eigen::VectorXd::Constant(1, val(a).dot(val(b)))});
  }

  const Eigen::VectorXd& value(NodeId n) const { return val(n); }
  const Eigen::MatrixXd& mat_value(MatId m) const { check_mat(m); return mats_[m]; }
  int size() const { return static_cast<int>(nodes_.size()); }

  struct Adjoints {
    std::vector<Eigen::VectorXd> vec;   // per node; empty when untouched
    std::vector<Eigen::MatrixXd> mat;   // per matrix leaf; empty when untouched
    std::vector<NodeId> node;           // per node, -1 unless recorded backward
    Eigen::VectorXd vec_grad(NodeId n) const {
      if (n < 0 || n >= static_cast<int>(vec.size()) || vec[n].size() == 0)
        throw std::invalid_argument("no gradient for node (not a recorded dependency)");
      return vec[n];
    }
    Eigen::MatrixXd mat_grad(MatId m) const {
      if (m < 0 || m >= static_cast<int>(mat.size()) || mat[m].size() == 0)
        throw std::invalid_argument("no gradient for matrix leaf");
      return mat[m];
    }
  };

  /// Reverse sweep from a scalar node. With record=true the vector adjoints
  /// are emitted as tape nodes (differentiable once more); matrix-leaf
  /// adjoints are always plain values.
  Adjoints backward(NodeId root, bool record = false) {
    if (val(root).size() != 1) throw std::invalid_argument("backward: root must be scalar");
    const int n = root + 1;
    Adjoints out;
    out.vec.resize(nodes_.size());
    out.mat.resize(mats_.size());
    out.node.assign(nodes_.size(), -1);

    auto add_vec = [&](NodeId target, const Eigen::VectorXd& g) {
      if (out.vec[target].size() == 0) out.vec[target] = g;
      else out.vec[target] += g;
    };
    auto add_node = [&](NodeId target, NodeId g) {
      out.node[target] = (out.node[target] < 0) ? g : add(out.node[target], g);
      out.vec[target] = val(out.node[target]);
    };
    auto add_mat = [&](MatId m, const Eigen::MatrixXd& g) {
      if (out.mat[m].size() == 0) out.mat[m] = g;
      else out.mat[m] += g;
    };

    if (record) add_node(root, constant_scalar(1.0));
    else add_vec(root, Eigen::VectorXd::Constant(1, 1.0));

    for (NodeId i = n - 1; i >= 0; --i) {
      const bool touched = record ? (out.node[i] >= 0) : (out.vec[i].size() != 0);
      if (!touched) continue;
      // Copy: push() during recording may reallocate nodes_.
      const Node nd = nodes_[i];
      const NodeId gnode = out.node[i];
      const Eigen::VectorXd g = record ? val(gnode) : out.vec[i];
      switch (nd.op) {
        case Op::LeafVec:
        case Op::ConstVec:
          break;
        case Op::MatVec:
          if (record) add_node(nd.a, mat_tvec(nd.mat, gnode));
          else add_vec(nd.a, mats_[nd.mat].transpose() * g);
          add_mat(nd.mat, g * val(nd.a).transpose());
          break;
        case Op::MatTVec:
          if (record) add_node(nd.a, matvec(nd.mat, gnode));
          else add_vec(nd.a, mats_[nd.mat] * g);
          add_mat(nd.mat, val(nd.a) * g.transpose());
          break;
        case Op::Add:
          if (record) { add_node(nd.a, gnode); add_node(nd.b, gnode); }
          else { add_vec(nd.a, g); add_vec(nd.b, g); }
          break;
        case Op::Sub:
          if (record) { add_node(nd.a, gnode); add_node(nd.b, neg(gnode)); }
          else { add_vec(nd.a, g); add_vec(nd.b, -g); }
          break;
        case Op::Neg:
          if (record) add_node(nd.a, neg(gnode));
          else add_vec(nd.a, -g);
          break;
        case Op::ScaleC:
          if (record) add_node(nd.a, scale(gnode, nd.c));
          else add_vec(nd.a, nd.c * g);
          break;
        case Op::SMul:
          if (record) {
            add_node(nd.a, smul(gnode, nd.b));
            add_node(nd.b, dot(gnode, i_node_input(nd.a)));
          } else {
            add_vec(nd.a, val(nd.b)[0] * g);
            add_vec(nd.b, Eigen::VectorXd::Constant(1, g.dot(val(nd.a))));
          }
          break;
        case Op::Hadamard:
          if (record) {
            add_node(nd.a, hadamard(gnode, nd.b));
            add_node(nd.b, hadamard(gnode, nd.a));
          } else {
            add_vec(nd.a, g.cwiseProduct(val(nd.b)));
            add_vec(nd.b, g.cwiseProduct(val(nd.a)));
          }
          break;
        case Op::Act:
          if (record) add_node(nd.a, hadamard(gnode, act(nd.a, nd.kind, nd.order + 1)));
          else {
            Eigen::VectorXd d = val(nd.a);
            for (Eigen::Index k = 0; k < d.size(); ++k) d[k] = activation_eval(nd.kind, d[k], nd.order + 1);
            add_vec(nd.a, g.cwiseProduct(d));
          }
          break;
        case Op::Dot:
          if (record) {
            add_node(nd.a, smul(i_node_input(nd.b), gnode));
            add_node(nd.b, smul(i_node_input(nd.a), gnode));
          } else {
            add_vec(nd.a, g[0] * val(nd.b));
            add_vec(nd.b, g[0] * val(nd.a));
          }
          break;
      }
    }
    return out;
  }

  /// Gradient of a taped scalar with respect to vector leaves. Requesting a
  /// non-leaf raises the unrecorded-leaf error.
  std::vector<Eigen::VectorXd> gradient(NodeId root, const std::vector<NodeId>& leaves) {
    for (NodeId l : leaves) {
      if (l < 0 || l >= size() || nodes_[l].op != Op::LeafVec)
        throw std::invalid_argument("gradient: node is not a registered leaf");
    }
    Adjoints adj = backward(root, false);
    std::vector<Eigen::VectorXd> out;
    out.reserve(leaves.size());
    for (NodeId l : leaves) {
      if (adj.vec[l].size() == 0) out.push_back(Eigen::VectorXd::Zero(val(l).size()));
      else out.push_back(adj.vec[l]);
    }
    return out;
  }

 private:
  struct Node {
    Op op;
    NodeId a, b;
    MatId mat;
    double c;
    ActivationKind kind;
    int order;
    Eigen::VectorXd value;
  };

  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }
  const Eigen::VectorXd& val(NodeId n) const {
    if (n < 0 || n >= static_cast<int>(nodes_.size())) throw std::invalid_argument("bad node id");
    return nodes_[n].value;
  }
  void check_mat(MatId m) const {
    if (m < 0 || m >= static_cast<int>(mats_.size())) throw std::invalid_argument("bad matrix id");
  }
  // Inputs of already-built nodes are valid node ids themselves.
  NodeId i_node_input(NodeId n) const { return n; }

  std::vector<Node> nodes_;
  std::vector<Eigen::MatrixXd> mats_;
};

}  // namespace impflow
