#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// A Tensor is a shared handle to a graph node. Operations on tensors that
// require gradients record their inputs and a backward closure; backward()
// walks the recorded graph in reverse topological order and accumulates
// d(loss)/d(node) into every node that requires a gradient. Operations whose
// inputs do not require gradients record nothing, so inference builds no
// graph at all.

#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "convtran/types.hpp"

namespace convtran::ad {

template <typename Scalar>
struct Node {
  Matrix<Scalar> value;
  Matrix<Scalar> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  bool freed = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  template <typename Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }

  // Lazily materialise a zero gradient of the value's shape.
  Matrix<Scalar>& grad_buffer() {
    if (grad.size() == 0) grad = Matrix<Scalar>::Zero(value.rows(), value.cols());
    return grad;
  }
};

template <typename Scalar>
class Tensor {
 public:
  using MatrixType = Matrix<Scalar>;

  Tensor() = default;

  explicit Tensor(MatrixType value, bool requires_grad = false)
      : node_(std::make_shared<Node<Scalar>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Tensor constant(MatrixType value) { return Tensor(std::move(value), false); }
  static Tensor parameter(MatrixType value) { return Tensor(std::move(value), true); }

  static Tensor from_node(std::shared_ptr<Node<Scalar>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const MatrixType& value() const { return checked().value; }
  MatrixType& value() { return checked().value; }
  const MatrixType& grad() const { return checked().grad; }
  bool has_grad() const { return defined() && node_->grad.size() != 0; }
  void zero_grad() { checked().grad.resize(0, 0); }
  bool requires_grad() const { return defined() && node_->requires_grad; }

  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Index size() const { return value().size(); }
  Scalar item() const {
    if (size() != 1) throw std::invalid_argument("item() on a non-scalar tensor");
    return value()(0, 0);
  }

  const std::shared_ptr<Node<Scalar>>& node() const { return node_; }

 private:
  Node<Scalar>& checked() const {
    if (!node_) throw std::logic_error("use of an undefined tensor");
    return *node_;
  }

  std::shared_ptr<Node<Scalar>> node_;
};

namespace detail {

template <typename Scalar>
Tensor<Scalar> make_op(Matrix<Scalar> value,
                       std::initializer_list<Tensor<Scalar>> inputs,
                       std::function<void(Node<Scalar>&)> backward_fn) {
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->is_leaf = false;
    for (const auto& t : inputs) node->parents.push_back(t.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<Scalar>::from_node(std::move(node));
}

template <typename Scalar>
Tensor<Scalar> make_op(Matrix<Scalar> value, const std::vector<Tensor<Scalar>>& inputs,
                       std::function<void(Node<Scalar>&)> backward_fn) {
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->is_leaf = false;
    for (const auto& t : inputs) node->parents.push_back(t.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<Scalar>::from_node(std::move(node));
}

inline void require(bool condition, const char* op, const std::string& what) {
  if (!condition) throw std::invalid_argument(std::string(op) + ": " + what);
}

inline std::string shape_str(Index r, Index c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

}  // namespace detail

/// Accumulates d(loss)/d(t) into every tensor reachable from `loss` that
/// requires a gradient, then frees the intermediate graph.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  const auto& root = loss.node();
  if (!root) throw std::logic_error("backward: undefined tensor");
  if (root->value.size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got " +
                                detail::shape_str(root->value.rows(), root->value.cols()));
  }
  if (root->freed) throw std::logic_error("backward: graph was already freed by a previous backward");
  if (!root->requires_grad) throw std::logic_error("backward: loss does not depend on any parameter");

  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> visited;
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<Scalar>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->accumulate(Matrix<Scalar>::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* node = *it;
    if (node->backward_fn && node->grad.size() != 0) node->backward_fn(*node);
  }
  for (Node<Scalar>* node : order) {
    if (node->is_leaf) continue;
    node->backward_fn = nullptr;
    node->parents.clear();
    node->grad.resize(0, 0);
    node->freed = true;
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require(a.cols() == b.rows(), "matmul",
                  detail::shape_str(a.rows(), a.cols()) + " * " + detail::shape_str(b.rows(), b.cols()));
  Matrix<Scalar> out = a.value() * b.value();
  return detail::make_op<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    auto& lhs = *self.parents[0];
    auto& rhs = *self.parents[1];
    if (lhs.requires_grad) lhs.accumulate(self.grad * rhs.value.transpose());
    if (rhs.requires_grad) rhs.accumulate(lhs.value.transpose() * self.grad);
  });
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& a) {
  Matrix<Scalar> out = a.value().transpose();
  return detail::make_op<Scalar>(std::move(out), {a}, [](Node<Scalar>& self) {
    self.parents[0]->accumulate(self.grad.transpose());
  });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add",
                  detail::shape_str(a.rows(), a.cols()) + " vs " + detail::shape_str(b.rows(), b.cols()));
  Matrix<Scalar> out = a.value() + b.value();
  return detail::make_op<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->accumulate(self.grad);
  });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "sub",
                  detail::shape_str(a.rows(), a.cols()) + " vs " + detail::shape_str(b.rows(), b.cols()));
  Matrix<Scalar> out = a.value() - b.value();
  return detail::make_op<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad);
    if (self.parents[1]->requires_grad) self.parents[1]->accumulate(-self.grad);
  });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "mul",
                  detail::shape_str(a.rows(), a.cols()) + " vs " + detail::shape_str(b.rows(), b.cols()));
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  return detail::make_op<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    auto& lhs = *self.parents[0];
    auto& rhs = *self.parents[1];
    if (lhs.requires_grad) lhs.accumulate(self.grad.cwiseProduct(rhs.value));
    if (rhs.requires_grad) rhs.accumulate(self.grad.cwiseProduct(lhs.value));
  });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor) {
  Matrix<Scalar> out = a.value() * factor;
  return detail::make_op<Scalar>(std::move(out), {a}, [factor](Node<Scalar>& self) {
    self.parents[0]->accumulate(self.grad * factor);
  });
}

/// Adds a 1 x C row to every row of `a`.
template <typename Scalar>
Tensor<Scalar> add_row(const Tensor<Scalar>& a, const Tensor<Scalar>& row) {
  detail::require(row.rows() == 1 && row.cols() == a.cols(), "add_row",
                  detail::shape_str(a.rows(), a.cols()) + " + " + detail::shape_str(row.rows(), row.cols()));
  Matrix<Scalar> out = a.value().rowwise() + row.value().row(0);
  return detail::make_op<Scalar>(std::move(out), {a, row}, [](Node<Scalar>& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad);
    if (self.parents[1]->requires_grad) self.parents[1]->accumulate(self.grad.colwise().sum());
  });
}

/// Adds `table` (P x C) to every consecutive block of P rows of `a` (k*P x C).
template <typename Scalar>
Tensor<Scalar> add_tiled(const Tensor<Scalar>& a, const Tensor<Scalar>& table) {
  const Index period = table.rows();
  detail::require(period > 0 && a.rows() % period == 0 && a.cols() == table.cols(), "add_tiled",
                  detail::shape_str(a.rows(), a.cols()) + " + tiled " +
                      detail::shape_str(table.rows(), table.cols()));
  Matrix<Scalar> out = a.value();
  for (Index r0 = 0; r0 < out.rows(); r0 += period) out.middleRows(r0, period) += table.value();
  return detail::make_op<Scalar>(std::move(out), {a, table}, [period](Node<Scalar>& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad);
    auto& tab = *self.parents[1];
    if (tab.requires_grad) {
      auto& g = tab.grad_buffer();
      for (Index r0 = 0; r0 < self.grad.rows(); r0 += period) g += self.grad.middleRows(r0, period);
    }
  });
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return detail::make_op<Scalar>(std::move(out), {a}, [](Node<Scalar>& self) {
    auto& in = *self.parents[0];
    in.accumulate(Matrix<Scalar>::Constant(in.value.rows(), in.value.cols(), self.grad(0, 0)));
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a) {
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.size()));
}

// ---------------------------------------------------------------------------
// Structural

template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& a, Index row0, Index nrows, Index col0, Index ncols) {
  detail::require(row0 >= 0 && col0 >= 0 && nrows >= 0 && ncols >= 0 && row0 + nrows <= a.rows() &&
                      col0 + ncols <= a.cols(),
                  "slice", "block out of range of " + detail::shape_str(a.rows(), a.cols()));
  Matrix<Scalar> out = a.value().block(row0, col0, nrows, ncols);
  return detail::make_op<Scalar>(std::move(out), {a}, [=](Node<Scalar>& self) {
    self.parents[0]->grad_buffer().block(row0, col0, nrows, ncols) += self.grad;
  });
}

template <typename Scalar>
Tensor<Scalar> concat_cols(const std::vector<Tensor<Scalar>>& parts) {
  detail::require(!parts.empty(), "concat_cols", "no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    detail::require(p.rows() == rows, "concat_cols", "row count mismatch");
    cols += p.cols();
  }
  Matrix<Scalar> out(rows, cols);
  Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return detail::make_op<Scalar>(std::move(out), parts, [](Node<Scalar>& self) {
    Index c0 = 0;
    for (auto& p : self.parents) {
      const Index w = p->value.cols();
      if (p->requires_grad) p->accumulate(self.grad.middleCols(c0, w));
      c0 += w;
    }
  });
}

template <typename Scalar>
Tensor<Scalar> concat_rows(const std::vector<Tensor<Scalar>>& parts) {
  detail::require(!parts.empty(), "concat_rows", "no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    detail::require(p.cols() == cols, "concat_rows", "column count mismatch");
    rows += p.rows();
  }
  Matrix<Scalar> out(rows, cols);
  Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return detail::make_op<Scalar>(std::move(out), parts, [](Node<Scalar>& self) {
    Index r0 = 0;
    for (auto& p : self.parents) {
      const Index h = p->value.rows();
      if (p->requires_grad) p->accumulate(self.grad.middleRows(r0, h));
      r0 += h;
    }
  });
}

/// out(i, j) = w(0, index(i, j)); negative indices read zero.
template <typename Scalar>
Tensor<Scalar> gather(const Tensor<Scalar>& weights, const IndexMap& index) {
  detail::require(weights.rows() == 1, "gather", "weights must be a row vector");
  const Index n = weights.cols();
  detail::require(index.size() == 0 || index.maxCoeff() < n, "gather", "index out of range");
  const auto& w = weights.value();
  Matrix<Scalar> out(index.rows(), index.cols());
  for (Index i = 0; i < index.rows(); ++i)
    for (Index j = 0; j < index.cols(); ++j) {
      const auto m = index(i, j);
      out(i, j) = m < 0 ? Scalar(0) : w(0, m);
    }
  return detail::make_op<Scalar>(std::move(out), {weights}, [index](Node<Scalar>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (Index i = 0; i < index.rows(); ++i)
      for (Index j = 0; j < index.cols(); ++j) {
        const auto m = index(i, j);
        if (m >= 0) g(0, m) += self.grad(i, j);
      }
  });
}

/// out(i, j) = a(i, index(i, j)); negative indices read zero.
template <typename Scalar>
Tensor<Scalar> gather_rowwise(const Tensor<Scalar>& a, const IndexMap& index) {
  detail::require(index.rows() == a.rows(), "gather_rowwise", "row count mismatch");
  detail::require(index.size() == 0 || index.maxCoeff() < a.cols(), "gather_rowwise", "index out of range");
  const auto& v = a.value();
  Matrix<Scalar> out(index.rows(), index.cols());
  for (Index i = 0; i < index.rows(); ++i)
    for (Index j = 0; j < index.cols(); ++j) {
      const auto m = index(i, j);
      out(i, j) = m < 0 ? Scalar(0) : v(i, m);
    }
  return detail::make_op<Scalar>(std::move(out), {a}, [index](Node<Scalar>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (Index i = 0; i < index.rows(); ++i)
      for (Index j = 0; j < index.cols(); ++j) {
        const auto m = index(i, j);
        if (m >= 0) g(i, m) += self.grad(i, j);
      }
  });
}

/// Adjoint of gather_rowwise: out(i, index(i, j)) += a(i, j), out has `width` columns.
template <typename Scalar>
Tensor<Scalar> scatter_rowwise(const Tensor<Scalar>& a, const IndexMap& index, Index width) {
  detail::require(index.rows() == a.rows() && index.cols() == a.cols(), "scatter_rowwise", "shape mismatch");
  detail::require(index.size() == 0 || index.maxCoeff() < width, "scatter_rowwise", "index out of range");
  const auto& v = a.value();
  Matrix<Scalar> out = Matrix<Scalar>::Zero(a.rows(), width);
  for (Index i = 0; i < index.rows(); ++i)
    for (Index j = 0; j < index.cols(); ++j) {
      const auto m = index(i, j);
      if (m >= 0) out(i, m) += v(i, j);
    }
  return detail::make_op<Scalar>(std::move(out), {a}, [index](Node<Scalar>& self) {
    Matrix<Scalar> g(index.rows(), index.cols());
    for (Index i = 0; i < index.rows(); ++i)
      for (Index j = 0; j < index.cols(); ++j) {
        const auto m = index(i, j);
        g(i, j) = m < 0 ? Scalar(0) : self.grad(i, m);
      }
    self.parents[0]->accumulate(g);
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities

template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& a) {
  const auto& x = a.value();
  if (x.hasNaN()) throw std::invalid_argument("softmax_rows: NaN input");
  Matrix<Scalar> y(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const Scalar m = x.row(i).maxCoeff();
    y.row(i) = (x.row(i).array() - m).exp().matrix();
    y.row(i) /= y.row(i).sum();
  }
  return detail::make_op<Scalar>(std::move(y), {a}, [](Node<Scalar>& self) {
    const auto& out = self.value;
    Matrix<Scalar> g = self.grad.cwiseProduct(out);
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = g.rowwise().sum();
    g -= out.cwiseProduct(dots.replicate(1, out.cols()));
    self.parents[0]->accumulate(g);
  });
}

/// Exact (erf-based) Gaussian error linear unit.
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& a) {
  const Scalar inv_sqrt2 = Scalar(1) / std::numbers::sqrt2_v<Scalar>;
  Matrix<Scalar> out = a.value().unaryExpr([=](Scalar x) {
    return Scalar(0.5) * x * (Scalar(1) + std::erf(x * inv_sqrt2));
  });
  return detail::make_op<Scalar>(std::move(out), {a}, [=](Node<Scalar>& self) {
    const Scalar inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<Scalar>;
    const auto& x = self.parents[0]->value;
    Matrix<Scalar> d = x.unaryExpr([=](Scalar v) {
      return Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(Scalar(-0.5) * v * v);
    });
    self.parents[0]->accumulate(self.grad.cwiseProduct(d));
  });
}

/// Exponential linear unit with alpha = 1.
template <typename Scalar>
Tensor<Scalar> elu(const Tensor<Scalar>& a) {
  Matrix<Scalar> out = a.value().unaryExpr([](Scalar x) { return x > 0 ? x : std::expm1(x); });
  return detail::make_op<Scalar>(std::move(out), {a}, [](Node<Scalar>& self) {
    const auto& x = self.parents[0]->value;
    Matrix<Scalar> d = x.unaryExpr([](Scalar v) { return v > 0 ? Scalar(1) : std::exp(v); });
    self.parents[0]->accumulate(self.grad.cwiseProduct(d));
  });
}

// ---------------------------------------------------------------------------
// Normalisation

/// Per-row normalisation over columns with a learned 1 x C affine.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& a, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          Scalar eps = Scalar(1e-5)) {
  const Index C = a.cols();
  detail::require(gamma.rows() == 1 && gamma.cols() == C && beta.rows() == 1 && beta.cols() == C, "layer_norm",
                  "affine parameters must be 1x" + std::to_string(C));
  const auto& x = a.value();
  Matrix<Scalar> xhat(x.rows(), C);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(x.rows());
  for (Index i = 0; i < x.rows(); ++i) {
    const Scalar mu = x.row(i).mean();
    const Scalar var = (x.row(i).array() - mu).square().mean();
    inv_std(i) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(i) = (x.row(i).array() - mu) * inv_std(i);
  }
  Matrix<Scalar> out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);
  return detail::make_op<Scalar>(
      std::move(out), {a, gamma, beta}, [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<Scalar>& self) {
        const auto& g = self.grad;
        auto& in = *self.parents[0];
        auto& gam = *self.parents[1];
        auto& bet = *self.parents[2];
        if (gam.requires_grad) gam.accumulate(g.cwiseProduct(xhat).colwise().sum());
        if (bet.requires_grad) bet.accumulate(g.colwise().sum());
        if (in.requires_grad) {
          Matrix<Scalar> dxhat = (g.array().rowwise() * gam.value.row(0).array()).matrix();
          Matrix<Scalar> dx(dxhat.rows(), dxhat.cols());
          for (Index i = 0; i < dx.rows(); ++i) {
            const Scalar m1 = dxhat.row(i).mean();
            const Scalar m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
            dx.row(i) = ((dxhat.row(i).array() - m1 - xhat.row(i).array() * m2) * inv_std(i)).matrix();
          }
          in.accumulate(dx);
        }
      });
}

/// Running statistics owned by a batch-normalisation layer.
template <typename Scalar>
struct BatchNormState {
  RowVector<Scalar> running_mean;
  RowVector<Scalar> running_var;

  explicit BatchNormState(Index channels = 0)
      : running_mean(RowVector<Scalar>::Zero(channels)), running_var(RowVector<Scalar>::Ones(channels)) {}
};

/// Batch normalisation where column c belongs to channel (c % channels);
/// statistics pool every row and every column of a channel. In training mode
/// the batch statistics are used and the running estimates updated.
template <typename Scalar>
Tensor<Scalar> batch_norm(const Tensor<Scalar>& a, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          BatchNormState<Scalar>& state, bool training, Scalar momentum = Scalar(0.1),
                          Scalar eps = Scalar(1e-5)) {
  const Index channels = gamma.cols();
  detail::require(channels > 0 && a.cols() % channels == 0, "batch_norm",
                  std::to_string(a.cols()) + " columns not divisible into " + std::to_string(channels) + " channels");
  detail::require(beta.cols() == channels && state.running_mean.size() == channels, "batch_norm",
                  "parameter/state width mismatch");
  const Index group_rows = a.rows() * (a.cols() / channels);
  using ChannelView = Eigen::Map<const Matrix<Scalar>>;
  ChannelView x(a.value().data(), group_rows, channels);

  RowVector<Scalar> mu, inv_std;
  if (training) {
    detail::require(group_rows > 1, "batch_norm", "training mode needs more than one value per channel");
    mu = x.colwise().mean();
    RowVector<Scalar> var = (x.rowwise() - mu).array().square().colwise().mean().matrix();
    inv_std = (var.array() + eps).rsqrt().matrix();
    const Scalar unbias = static_cast<Scalar>(group_rows) / static_cast<Scalar>(group_rows - 1);
    state.running_mean = (Scalar(1) - momentum) * state.running_mean + momentum * mu;
    state.running_var = (Scalar(1) - momentum) * state.running_var + momentum * unbias * var;
  } else {
    mu = state.running_mean;
    inv_std = (state.running_var.array() + eps).rsqrt().matrix();
  }
  Matrix<Scalar> xhat = ((x.rowwise() - mu).array().rowwise() * inv_std.array()).matrix();
  Matrix<Scalar> y = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  y.rowwise() += beta.value().row(0);
  Matrix<Scalar> out = Eigen::Map<Matrix<Scalar>>(y.data(), a.rows(), a.cols());

  const Index rows = a.rows(), cols = a.cols();
  return detail::make_op<Scalar>(
      std::move(out), {a, gamma, beta},
      [=, xhat = std::move(xhat)](Node<Scalar>& self) {
        Eigen::Map<const Matrix<Scalar>> g(self.grad.data(), group_rows, channels);
        auto& in = *self.parents[0];
        auto& gam = *self.parents[1];
        auto& bet = *self.parents[2];
        if (gam.requires_grad) gam.accumulate(g.cwiseProduct(xhat).colwise().sum());
        if (bet.requires_grad) bet.accumulate(g.colwise().sum());
        if (in.requires_grad) {
          Matrix<Scalar> dxhat = (g.array().rowwise() * gam.value.row(0).array()).matrix();
          Matrix<Scalar> dx;
          if (training) {
            RowVector<Scalar> m1 = dxhat.colwise().mean();
            RowVector<Scalar> m2 = dxhat.cwiseProduct(xhat).colwise().mean();
            dx = (((dxhat.rowwise() - m1).array() - xhat.array().rowwise() * m2.array()).rowwise() *
                  inv_std.array())
                     .matrix();
          } else {
            dx = (dxhat.array().rowwise() * inv_std.array()).matrix();
          }
          in.accumulate(Eigen::Map<const Matrix<Scalar>>(dx.data(), rows, cols));
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

/// Same-length 1-D cross-correlation applied independently to every input
/// channel of every sample. `x` stacks samples as (batch * length) x channels;
/// `kernel` is filters x taps; `bias` is 1 x filters (or undefined). The
/// output column for (channel c, filter m) is c * filters + m. Zero padding
/// puts (taps - 1) / 2 zeros before the series and the rest after it.
template <typename Scalar>
Tensor<Scalar> temporal_conv(const Tensor<Scalar>& x, const Tensor<Scalar>& kernel, const Tensor<Scalar>& bias,
                             Index length) {
  detail::require(length > 0 && x.rows() % length == 0, "temporal_conv", "rows not a multiple of the series length");
  const Index batch = x.rows() / length;
  const Index channels = x.cols();
  const Index filters = kernel.rows();
  const Index taps = kernel.cols();
  const Index pad = (taps - 1) / 2;
  const bool has_bias = bias.defined();
  if (has_bias) detail::require(bias.rows() == 1 && bias.cols() == filters, "temporal_conv", "bias must be 1 x filters");

  const auto& xv = x.value();
  const auto& kv = kernel.value();
  Matrix<Scalar> out(x.rows(), channels * filters);
  Matrix<Scalar> patches(length, taps);
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < channels; ++c) {
      for (Index t = 0; t < length; ++t)
        for (Index k = 0; k < taps; ++k) {
          const Index src = t + k - pad;
          patches(t, k) = (src >= 0 && src < length) ? xv(b * length + src, c) : Scalar(0);
        }
      out.block(b * length, c * filters, length, filters).noalias() = patches * kv.transpose();
    }
  if (has_bias)
    for (Index c = 0; c < channels; ++c)
      out.middleCols(c * filters, filters).rowwise() += bias.value().row(0);

  std::vector<Tensor<Scalar>> inputs{x, kernel};
  if (has_bias) inputs.push_back(bias);
  return detail::make_op<Scalar>(std::move(out), inputs, [=](Node<Scalar>& self) {
    auto& in = *self.parents[0];
    auto& ker = *self.parents[1];
    const auto& g = self.grad;
    Matrix<Scalar> patches(length, taps);
    Matrix<Scalar> dpatches(length, taps);
    Matrix<Scalar> dker = Matrix<Scalar>::Zero(filters, taps);
    if (in.requires_grad) in.grad_buffer();
    for (Index b = 0; b < batch; ++b)
      for (Index c = 0; c < channels; ++c) {
        auto gblock = g.block(b * length, c * filters, length, filters);
        if (ker.requires_grad) {
          for (Index t = 0; t < length; ++t)
            for (Index k = 0; k < taps; ++k) {
              const Index src = t + k - pad;
              patches(t, k) = (src >= 0 && src < length) ? in.value(b * length + src, c) : Scalar(0);
            }
          dker.noalias() += gblock.transpose() * patches;
        }
        if (in.requires_grad) {
          dpatches.noalias() = gblock * ker.value;
          for (Index t = 0; t < length; ++t)
            for (Index k = 0; k < taps; ++k) {
              const Index src = t + k - pad;
              if (src >= 0 && src < length) in.grad(b * length + src, c) += dpatches(t, k);
            }
        }
      }
    if (ker.requires_grad) ker.accumulate(dker);
    if (has_bias && self.parents[2]->requires_grad) {
      RowVector<Scalar> db = RowVector<Scalar>::Zero(filters);
      for (Index c = 0; c < channels; ++c) db += g.middleCols(c * filters, filters).colwise().sum();
      self.parents[2]->accumulate(db);
    }
  });
}

enum class PoolMode { Mean, Max };

/// Pools each consecutive block of `length` rows into one row.
template <typename Scalar>
Tensor<Scalar> pool_rows(const Tensor<Scalar>& a, Index length, PoolMode mode) {
  detail::require(length > 0 && a.rows() % length == 0, "pool_rows", "rows not a multiple of the block length");
  const Index blocks = a.rows() / length;
  const Index C = a.cols();
  const auto& x = a.value();
  Matrix<Scalar> out(blocks, C);
  IndexMap argmax;
  if (mode == PoolMode::Mean) {
    for (Index b = 0; b < blocks; ++b) out.row(b) = x.middleRows(b * length, length).colwise().mean();
  } else {
    argmax.resize(blocks, C);
    for (Index b = 0; b < blocks; ++b)
      for (Index c = 0; c < C; ++c) {
        Index best = 0;
        out(b, c) = x.col(c).segment(b * length, length).maxCoeff(&best);
        argmax(b, c) = static_cast<std::int32_t>(b * length + best);
      }
  }
  return detail::make_op<Scalar>(std::move(out), {a}, [=, argmax = std::move(argmax)](Node<Scalar>& self) {
    auto& in = *self.parents[0];
    if (mode == PoolMode::Mean) {
      auto& g = in.grad_buffer();
      for (Index b = 0; b < blocks; ++b)
        g.middleRows(b * length, length).rowwise() += self.grad.row(b) / static_cast<Scalar>(length);
    } else {
      auto& g = in.grad_buffer();
      for (Index b = 0; b < blocks; ++b)
        for (Index c = 0; c < C; ++c) g(argmax(b, c), c) += self.grad(b, c);
    }
  });
}

/// Inverted dropout; identity when rate is 0.
template <typename Scalar, typename Rng>
Tensor<Scalar> dropout(const Tensor<Scalar>& a, Scalar rate, Rng& rng) {
  if (rate <= Scalar(0)) return a;
  detail::require(rate < Scalar(1), "dropout", "rate must be below 1");
  std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
  const Scalar s = Scalar(1) / (Scalar(1) - rate);
  Matrix<Scalar> mask(a.rows(), a.cols());
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? s : Scalar(0);
  Matrix<Scalar> out = a.value().cwiseProduct(mask);
  return detail::make_op<Scalar>(std::move(out), {a}, [mask = std::move(mask)](Node<Scalar>& self) {
    self.parents[0]->accumulate(self.grad.cwiseProduct(mask));
  });
}

// ---------------------------------------------------------------------------
// Loss

/// Mean softmax cross-entropy of B x c logits against class indices.
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, std::span<const int> labels) {
  detail::require(static_cast<Index>(labels.size()) == logits.rows(), "cross_entropy", "one label per row required");
  const auto& z = logits.value();
  const Index B = z.rows();
  Matrix<Scalar> probs(B, z.cols());
  Scalar total = 0;
  std::vector<int> y(labels.begin(), labels.end());
  for (Index i = 0; i < B; ++i) {
    detail::require(y[i] >= 0 && y[i] < z.cols(), "cross_entropy", "label out of range");
    const Scalar m = z.row(i).maxCoeff();
    probs.row(i) = (z.row(i).array() - m).exp().matrix();
    const Scalar denom = probs.row(i).sum();
    probs.row(i) /= denom;
    total += m + std::log(denom) - z(i, y[i]);
  }
  Matrix<Scalar> out(1, 1);
  out(0, 0) = total / static_cast<Scalar>(B);
  return detail::make_op<Scalar>(std::move(out), {logits}, [probs = std::move(probs), y](Node<Scalar>& self) {
    Matrix<Scalar> g = probs;
    for (Index i = 0; i < g.rows(); ++i) g(i, y[i]) -= Scalar(1);
    g *= self.grad(0, 0) / static_cast<Scalar>(g.rows());
    self.parents[0]->accumulate(g);
  });
}

}  // namespace convtran::ad
