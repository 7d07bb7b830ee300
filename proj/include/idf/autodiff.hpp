#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// Every op returns a Tensor whose node keeps its parents alive and a closure
// that pushes the output gradient back to them. The graph of one optimization
// iteration is released when the last Tensor handle referring to it goes out
// of scope, which is the per-iteration graph reset. Leaf parameters keep their
// gradients across backward() calls until zero_grad().

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "idf/common.hpp"

namespace idf::ad {

using Eigen::Index;

template <class S>
struct Node {
  Mat<S> value;
  Mat<S> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Mat<S>&)> backward_fn;

  template <class Expr>
  void accumulate(const Expr& g) {
    if (!requires_grad) return;
    if (grad.size() == 0)
      grad = g;
    else
      grad += g;
  }
};

template <class S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<S>> n) : node_(std::move(n)) {}

  static Tensor constant(Mat<S> v) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(v);
    return Tensor(std::move(n));
  }
  static Tensor parameter(Mat<S> v) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(v);
    n->requires_grad = true;
    return Tensor(std::move(n));
  }
  static Tensor scalar(S v) {
    Mat<S> m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
  }

  bool defined() const { return node_ != nullptr; }
  const Mat<S>& value() const { return node_->value; }
  // Direct write access, for optimizers and parameter loading. Never call on a
  // tensor that is part of a live graph.
  Mat<S>& mutable_value() { return node_->value; }
  const Mat<S>& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad.resize(0, 0); }

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  std::vector<Index> shape() const { return {rows(), cols()}; }
  S item() const {
    require(size() == 1, "item() on a non-scalar tensor");
    return node_->value(0, 0);
  }

  Node<S>* raw() const { return node_.get(); }
  const std::shared_ptr<Node<S>>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node<S>> node_;
};

// Builds an op result. `bw` receives the output gradient and is only recorded
// when at least one parent needs a gradient.
template <class S, class Backward>
Tensor<S> make_op(Mat<S> value, std::initializer_list<Tensor<S>> parents,
                  Backward&& bw) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  n->leaf = false;
  for (const auto& p : parents)
    if (p.requires_grad()) n->requires_grad = true;
  if (n->requires_grad) {
    for (const auto& p : parents) n->parents.push_back(p.ptr());
    n->backward_fn = std::forward<Backward>(bw);
  }
  return Tensor<S>(std::move(n));
}

template <class S, class Backward>
Tensor<S> make_op(Mat<S> value, const std::vector<Tensor<S>>& parents,
                  Backward&& bw) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  n->leaf = false;
  for (const auto& p : parents)
    if (p.requires_grad()) n->requires_grad = true;
  if (n->requires_grad) {
    for (const auto& p : parents) n->parents.push_back(p.ptr());
    n->backward_fn = std::forward<Backward>(bw);
  }
  return Tensor<S>(std::move(n));
}

template <class S>
void backward(const Tensor<S>& loss) {
  require(loss.defined() && loss.rows() == 1 && loss.cols() == 1,
          "backward() requires a scalar loss");
  if (!loss.requires_grad()) return;

  // Post-order DFS gives a topological order with the loss last.
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> visited;
  std::vector<std::pair<Node<S>*, std::size_t>> stack;
  stack.emplace_back(loss.raw(), 0);
  visited.insert(loss.raw());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<S>* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node<S>* n : order)
    if (!n->leaf) n->grad.resize(0, 0);
  loss.raw()->accumulate(Mat<S>::Ones(1, 1));

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* n = *it;
    if (n->leaf || n->grad.size() == 0) continue;
    n->backward_fn(n->grad);
    n->grad.resize(0, 0);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Mat<S> out = a.value() * b.value();
  auto* an = a.raw();
  auto* bn = b.raw();
  return make_op<S>(std::move(out), {a, b}, [an, bn](const Mat<S>& g) {
    if (an->requires_grad) an->accumulate(g * bn->value.transpose());
    if (bn->requires_grad) bn->accumulate(an->value.transpose() * g);
  });
}

// x * w + bias, with bias a 1 x out row broadcast over the batch.
template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias) {
  require(x.cols() == w.rows(), "linear: input width does not match weight");
  require(bias.rows() == 1 && bias.cols() == w.cols(), "linear: bias shape");
  Mat<S> out = x.value() * w.value();
  out.rowwise() += bias.value().row(0);
  auto* xn = x.raw();
  auto* wn = w.raw();
  auto* bn = bias.raw();
  return make_op<S>(std::move(out), {x, w, bias}, [xn, wn, bn](const Mat<S>& g) {
    if (xn->requires_grad) xn->accumulate(g * wn->value.transpose());
    if (wn->requires_grad) wn->accumulate(xn->value.transpose() * g);
    if (bn->requires_grad) bn->accumulate(g.colwise().sum());
  });
}

// ---------------------------------------------------------------------------
// Elementwise binary

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  auto* an = a.raw();
  auto* bn = b.raw();
  return make_op<S>(a.value() + b.value(), {a, b}, [an, bn](const Mat<S>& g) {
    an->accumulate(g);
    bn->accumulate(g);
  });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  auto* an = a.raw();
  auto* bn = b.raw();
  return make_op<S>(a.value() - b.value(), {a, b}, [an, bn](const Mat<S>& g) {
    an->accumulate(g);
    bn->accumulate(-g);
  });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  auto* an = a.raw();
  auto* bn = b.raw();
  Mat<S> out = a.value().cwiseProduct(b.value());
  return make_op<S>(std::move(out), {a, b}, [an, bn](const Mat<S>& g) {
    if (an->requires_grad) an->accumulate(g.cwiseProduct(bn->value));
    if (bn->requires_grad) bn->accumulate(g.cwiseProduct(an->value));
  });
}

// a (r x c) + row (1 x c) broadcast over rows.
template <class S>
Tensor<S> add_row(const Tensor<S>& a, const Tensor<S>& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row: shape mismatch");
  Mat<S> out = a.value();
  out.rowwise() += row.value().row(0);
  auto* an = a.raw();
  auto* rn = row.raw();
  return make_op<S>(std::move(out), {a, row}, [an, rn](const Mat<S>& g) {
    an->accumulate(g);
    if (rn->requires_grad) rn->accumulate(g.colwise().sum());
  });
}

// a (r x c) scaled row-wise by col (r x 1).
template <class S>
Tensor<S> mul_col(const Tensor<S>& a, const Tensor<S>& col) {
  require(col.cols() == 1 && col.rows() == a.rows(), "mul_col: shape mismatch");
  Mat<S> out = a.value().array().colwise() * col.value().col(0).array();
  auto* an = a.raw();
  auto* cn = col.raw();
  return make_op<S>(std::move(out), {a, col}, [an, cn](const Mat<S>& g) {
    if (an->requires_grad)
      an->accumulate((g.array().colwise() * cn->value.col(0).array()).matrix());
    if (cn->requires_grad)
      cn->accumulate(g.cwiseProduct(an->value).rowwise().sum());
  });
}

// ---------------------------------------------------------------------------
// Elementwise unary

template <class S>
Tensor<S> scale(const Tensor<S>& a, S s) {
  auto* an = a.raw();
  return make_op<S>(a.value() * s, {a}, [an, s](const Mat<S>& g) { an->accumulate(g * s); });
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& a, S s) {
  Mat<S> out = a.value().array() + s;
  auto* an = a.raw();
  return make_op<S>(std::move(out), {a}, [an](const Mat<S>& g) { an->accumulate(g); });
}

template <class S>
Tensor<S> neg(const Tensor<S>& a) {
  return scale(a, S(-1));
}

template <class S>
Tensor<S> relu(const Tensor<S>& a) {
  Mat<S> out = a.value().cwiseMax(S(0));
  auto* an = a.raw();
  return make_op<S>(std::move(out), {a}, [an](const Mat<S>& g) {
    an->accumulate((an->value.array() > S(0)).select(g, S(0)).matrix());
  });
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  Mat<S> out = (S(1) / (S(1) + (-a.value().array()).exp())).matrix();
  auto* an = a.raw();
  Mat<S> y = out;
  return make_op<S>(std::move(out), {a}, [an, y = std::move(y)](const Mat<S>& g) {
    an->accumulate((g.array() * y.array() * (S(1) - y.array())).matrix());
  });
}

template <class S>
Tensor<S> sin(const Tensor<S>& a) {
  auto* an = a.raw();
  return make_op<S>(a.value().array().sin().matrix(), {a}, [an](const Mat<S>& g) {
    an->accumulate((g.array() * an->value.array().cos()).matrix());
  });
}

template <class S>
Tensor<S> cos(const Tensor<S>& a) {
  auto* an = a.raw();
  return make_op<S>(a.value().array().cos().matrix(), {a}, [an](const Mat<S>& g) {
    an->accumulate((-g.array() * an->value.array().sin()).matrix());
  });
}

template <class S>
Tensor<S> exp(const Tensor<S>& a) {
  Mat<S> out = a.value().array().exp().matrix();
  auto* an = a.raw();
  Mat<S> y = out;
  return make_op<S>(std::move(out), {a}, [an, y = std::move(y)](const Mat<S>& g) {
    an->accumulate(g.cwiseProduct(y));
  });
}

// Subgradient 0 at the kink.
template <class S>
Tensor<S> abs(const Tensor<S>& a) {
  auto* an = a.raw();
  return make_op<S>(a.value().cwiseAbs(), {a}, [an](const Mat<S>& g) {
    an->accumulate((g.array() * an->value.array().sign()).matrix());
  });
}

template <class S>
Tensor<S> square(const Tensor<S>& a) {
  auto* an = a.raw();
  return make_op<S>(a.value().array().square().matrix(), {a}, [an](const Mat<S>& g) {
    an->accumulate((S(2) * g.array() * an->value.array()).matrix());
  });
}

template <class S>
Tensor<S> sqrt(const Tensor<S>& a) {
  Mat<S> out = a.value().array().sqrt().matrix();
  auto* an = a.raw();
  Mat<S> y = out;
  return make_op<S>(std::move(out), {a}, [an, y = std::move(y)](const Mat<S>& g) {
    an->accumulate((g.array() / (S(2) * y.array())).matrix());
  });
}

template <class S>
Tensor<S> reciprocal(const Tensor<S>& a) {
  Mat<S> out = a.value().array().inverse().matrix();
  auto* an = a.raw();
  Mat<S> y = out;
  return make_op<S>(std::move(out), {a}, [an, y = std::move(y)](const Mat<S>& g) {
    an->accumulate((-g.array() * y.array().square()).matrix());
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <class S>
Tensor<S> sum(const Tensor<S>& a) {
  Mat<S> out(1, 1);
  out(0, 0) = a.value().sum();
  auto* an = a.raw();
  return make_op<S>(std::move(out), {a}, [an](const Mat<S>& g) {
    an->accumulate(Mat<S>::Constant(an->value.rows(), an->value.cols(), g(0, 0)));
  });
}

template <class S>
Tensor<S> mean(const Tensor<S>& a) {
  require(a.size() > 0, "mean of an empty tensor");
  return scale(sum(a), S(1) / static_cast<S>(a.size()));
}

// r x c -> r x 1
template <class S>
Tensor<S> row_sum(const Tensor<S>& a) {
  Mat<S> out = a.value().rowwise().sum();
  auto* an = a.raw();
  return make_op<S>(std::move(out), {a}, [an](const Mat<S>& g) {
    an->accumulate(g.col(0).replicate(1, an->value.cols()));
  });
}

// Euclidean norm of each row, r x c -> r x 1. Subgradient 0 at the origin.
template <class S>
Tensor<S> row_norm(const Tensor<S>& a) {
  Mat<S> out = a.value().rowwise().norm();
  auto* an = a.raw();
  Mat<S> y = out;
  return make_op<S>(std::move(out), {a}, [an, y = std::move(y)](const Mat<S>& g) {
    Mat<S> coef(y.rows(), 1);
    for (Index r = 0; r < y.rows(); ++r) coef(r, 0) = y(r, 0) > S(0) ? g(r, 0) / y(r, 0) : S(0);
    an->accumulate((an->value.array().colwise() * coef.col(0).array()).matrix());
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Index rows, Index cols) {
  require(rows * cols == a.size(), "reshape: element count changes");
  Mat<S> out = Eigen::Map<const Mat<S>>(a.value().data(), rows, cols);
  auto* an = a.raw();
  return make_op<S>(std::move(out), {a}, [an](const Mat<S>& g) {
    an->accumulate(Eigen::Map<const Mat<S>>(g.data(), an->value.rows(), an->value.cols()));
  });
}

template <class S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat_cols: row counts differ");
    cols += p.cols();
  }
  Mat<S> out(rows, cols);
  std::vector<Node<S>*> nodes;
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    nodes.push_back(p.raw());
    offsets.push_back(off);
    off += p.cols();
  }
  return make_op<S>(std::move(out), parts, [nodes, offsets](const Mat<S>& g) {
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (nodes[i]->requires_grad)
        nodes[i]->accumulate(g.middleCols(offsets[i], nodes[i]->value.cols()));
  });
}

template <class S>
Tensor<S> slice_cols(const Tensor<S>& a, Index start, Index n) {
  require(start >= 0 && n >= 0 && start + n <= a.cols(), "slice_cols: out of range");
  Mat<S> out = a.value().middleCols(start, n);
  auto* an = a.raw();
  return make_op<S>(std::move(out), {a}, [an, start, n](const Mat<S>& g) {
    Mat<S> full = Mat<S>::Zero(an->value.rows(), an->value.cols());
    full.middleCols(start, n) = g;
    an->accumulate(full);
  });
}

// Selects rows by index; repeated indices accumulate in the backward pass.
template <class S>
Tensor<S> gather_rows(const Tensor<S>& a, const std::vector<Index>& idx) {
  Mat<S> out(static_cast<Index>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < a.rows(), "gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = a.value().row(idx[i]);
  }
  auto* an = a.raw();
  return make_op<S>(std::move(out), {a}, [an, idx](const Mat<S>& g) {
    Mat<S> full = Mat<S>::Zero(an->value.rows(), an->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) full.row(idx[i]) += g.row(static_cast<Index>(i));
    an->accumulate(full);
  });
}

// Each row repeated `times` consecutively: row i lands at rows [i*times, (i+1)*times).
template <class S>
Tensor<S> repeat_rows(const Tensor<S>& a, Index times) {
  require(times >= 1, "repeat_rows: times must be positive");
  Mat<S> out(a.rows() * times, a.cols());
  for (Index r = 0; r < a.rows(); ++r) out.middleRows(r * times, times) = a.value().row(r).replicate(times, 1);
  auto* an = a.raw();
  return make_op<S>(std::move(out), {a}, [an, times](const Mat<S>& g) {
    Mat<S> acc(an->value.rows(), an->value.cols());
    for (Index r = 0; r < acc.rows(); ++r) acc.row(r) = g.middleRows(r * times, times).colwise().sum();
    an->accumulate(acc);
  });
}

// Sums consecutive groups of `group` rows: (N*group) x C -> N x C. Inverse
// layout of repeat_rows.
template <class S>
Tensor<S> segment_sum_rows(const Tensor<S>& a, Index group) {
  require(group >= 1 && a.rows() % group == 0, "segment_sum_rows: rows not divisible by group");
  const Index n = a.rows() / group;
  Mat<S> out(n, a.cols());
  for (Index r = 0; r < n; ++r) out.row(r) = a.value().middleRows(r * group, group).colwise().sum();
  auto* an = a.raw();
  return make_op<S>(std::move(out), {a}, [an, group](const Mat<S>& g) {
    Mat<S> full(an->value.rows(), an->value.cols());
    for (Index r = 0; r < g.rows(); ++r) full.middleRows(r * group, group) = g.row(r).replicate(group, 1);
    an->accumulate(full);
  });
}

// ---------------------------------------------------------------------------
// Operator sugar

template <class S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <class S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <class S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <class S>
Tensor<S> operator*(const Tensor<S>& a, S s) { return scale(a, s); }
template <class S>
Tensor<S> operator*(S s, const Tensor<S>& a) { return scale(a, s); }

template <class S>
void zero_grad(std::vector<Tensor<S>>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace idf::ad
