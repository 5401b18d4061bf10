#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "hood/tensor.hpp"

namespace hood {

// Reverse-mode autodiff tape. Nodes are appended in evaluation order, so the
// node vector is already a topological order and backprop walks it in reverse.
//
// Values are immutable once a node exists. Every op checks its output for
// NaN/Inf and throws NumericalError instead of propagating.
template <typename T>
class Graph {
 public:
  class Var {
   public:
    Var() = default;
    Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}
    Graph& graph() const { return *graph_; }
    std::size_t id() const { return id_; }
    const Tensor<T>& value() const { return graph_->value(*this); }
    const Shape& shape() const { return value().shape(); }

   private:
    Graph* graph_ = nullptr;
    std::size_t id_ = 0;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  std::size_t num_nodes() const { return nodes_.size(); }

  Var constant(Tensor<T> value) { return push(std::move(value), false, {}, {}, "constant"); }
  Var parameter(Tensor<T> value) { return push(std::move(value), true, {}, {}, "parameter"); }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id()).value; }

  // Gradient of the last backprop target w.r.t. v. Nodes the loss does not
  // depend on get a zero gradient.
  Tensor<T> grad(Var v) const {
    const Node& n = nodes_.at(v.id());
    if (n.grad.size() == n.value.size() && n.grad_touched) return n.grad;
    return Tensor<T>(n.value.shape());
  }

  void backprop(Var loss) {
    if (loss.id() >= nodes_.size()) throw std::invalid_argument("backprop: unknown node");
    if (value(loss).size() != 1) {
      throw std::invalid_argument("backprop: loss must be scalar, got " +
                                  shape_str(value(loss).shape()));
    }
    for (Node& n : nodes_) {
      n.grad_touched = false;
    }
    Node& root = nodes_[loss.id()];
    root.grad = Tensor<T>(root.value.shape(), T(1));
    root.grad_touched = true;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.grad_touched || !n.backward) continue;
      n.backward(*this, i);
    }
  }

  // ---- primitive ops -------------------------------------------------------

  Var matmul(Var a, Var b) {
    const Tensor<T>& A = value(a);
    const Tensor<T>& B = value(b);
    require(A.rank() == 2 && B.rank() == 2 && A.cols() == B.rows(), "matmul", A, B);
    const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
    Tensor<T> C = Tensor<T>::matrix(n, m);
    gemm(A, B, C);
    return push(std::move(C), any_grad(a, b), {a.id(), b.id()},
                [n, k, m](Graph& g, std::size_t self) {
                  const Tensor<T>& dC = g.nodes_[self].grad;
                  const std::size_t ia = g.nodes_[self].inputs[0];
                  const std::size_t ib = g.nodes_[self].inputs[1];
                  if (g.nodes_[ia].requires_grad) {
                    Tensor<T>& dA = g.grad_ref(ia);
                    const Tensor<T>& B = g.nodes_[ib].value;
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < m; ++j) {
                        const T d = dC(i, j);
                        if (d == T(0)) continue;
                        for (std::size_t p = 0; p < k; ++p) dA(i, p) += d * B(p, j);
                      }
                  }
                  if (g.nodes_[ib].requires_grad) {
                    Tensor<T>& dB = g.grad_ref(ib);
                    const Tensor<T>& A = g.nodes_[ia].value;
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t p = 0; p < k; ++p) {
                        const T a_ip = A(i, p);
                        if (a_ip == T(0)) continue;
                        for (std::size_t j = 0; j < m; ++j) dB(p, j) += a_ip * dC(i, j);
                      }
                  }
                },
                "matmul");
  }

  // X[n,m] + b[m] broadcast over rows.
  Var add_row(Var x, Var b) {
    const Tensor<T>& X = value(x);
    const Tensor<T>& B = value(b);
    require(X.rank() == 2 && B.rank() == 1 && B.size() == X.cols(), "add_row", X, B);
    Tensor<T> out = X;
    for (std::size_t i = 0; i < X.rows(); ++i)
      for (std::size_t j = 0; j < X.cols(); ++j) out(i, j) += B[j];
    return push(std::move(out), any_grad(x, b), {x.id(), b.id()},
                [](Graph& g, std::size_t self) {
                  const Tensor<T>& d = g.nodes_[self].grad;
                  const std::size_t ix = g.nodes_[self].inputs[0];
                  const std::size_t ib = g.nodes_[self].inputs[1];
                  if (g.nodes_[ix].requires_grad) axpy(g.grad_ref(ix), d, T(1));
                  if (g.nodes_[ib].requires_grad) {
                    Tensor<T>& db = g.grad_ref(ib);
                    for (std::size_t i = 0; i < d.rows(); ++i)
                      for (std::size_t j = 0; j < d.cols(); ++j) db[j] += d(i, j);
                  }
                },
                "add_row");
  }

  Var add(Var a, Var b) {
    same_shape(a, b, "add");
    Tensor<T> out = value(a);
    axpy(out, value(b), T(1));
    return push(std::move(out), any_grad(a, b), {a.id(), b.id()},
                [](Graph& g, std::size_t self) {
                  const Tensor<T>& d = g.nodes_[self].grad;
                  for (std::size_t in : g.nodes_[self].inputs)
                    if (g.nodes_[in].requires_grad) axpy(g.grad_ref(in), d, T(1));
                },
                "add");
  }

  Var sub(Var a, Var b) {
    same_shape(a, b, "sub");
    Tensor<T> out = value(a);
    axpy(out, value(b), T(-1));
    return push(std::move(out), any_grad(a, b), {a.id(), b.id()},
                [](Graph& g, std::size_t self) {
                  const Tensor<T>& d = g.nodes_[self].grad;
                  const auto& in = g.nodes_[self].inputs;
                  if (g.nodes_[in[0]].requires_grad) axpy(g.grad_ref(in[0]), d, T(1));
                  if (g.nodes_[in[1]].requires_grad) axpy(g.grad_ref(in[1]), d, T(-1));
                },
                "sub");
  }

  Var mul(Var a, Var b) {
    same_shape(a, b, "mul");
    Tensor<T> out = value(a);
    const Tensor<T>& B = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
    return push(std::move(out), any_grad(a, b), {a.id(), b.id()},
                [](Graph& g, std::size_t self) {
                  const Tensor<T>& d = g.nodes_[self].grad;
                  const auto& in = g.nodes_[self].inputs;
                  for (int side = 0; side < 2; ++side) {
                    if (!g.nodes_[in[side]].requires_grad) continue;
                    const Tensor<T>& other = g.nodes_[in[1 - side]].value;
                    Tensor<T>& dst = g.grad_ref(in[side]);
                    for (std::size_t i = 0; i < d.size(); ++i) dst[i] += d[i] * other[i];
                  }
                },
                "mul");
  }

  Var scale(Var a, T factor) {
    Tensor<T> out = value(a);
    for (T& v : out.storage()) v *= factor;
    return push(std::move(out), any_grad(a), {a.id()},
                [factor](Graph& g, std::size_t self) {
                  axpy(g.grad_ref(g.nodes_[self].inputs[0]), g.nodes_[self].grad, factor);
                },
                "scale");
  }

  Var add_scalar(Var a, T c) {
    Tensor<T> out = value(a);
    for (T& v : out.storage()) v += c;
    return push(std::move(out), any_grad(a), {a.id()},
                [](Graph& g, std::size_t self) {
                  axpy(g.grad_ref(g.nodes_[self].inputs[0]), g.nodes_[self].grad, T(1));
                },
                "add_scalar");
  }

  Var relu(Var a) {
    return unary(a, "relu", [](T x) { return x > T(0) ? x : T(0); },
                 [](T x, T) { return x > T(0) ? T(1) : T(0); });
  }

  // log(1 + e^x), evaluated without overflow for large |x|.
  Var softplus(Var a) {
    return unary(a, "softplus", [](T x) { return softplus_value(x); },
                 [](T x, T) { return sigmoid_value(x); });
  }

  Var exp(Var a) {
    return unary(a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
  }

  Var log(Var a) {
    return unary(a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
  }

  Var square(Var a) {
    return unary(a, "square", [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
  }

  // Row-wise log-softmax of a [n,m] matrix with max subtraction.
  Var log_softmax(Var a) {
    const Tensor<T>& X = value(a);
    require(X.rank() == 2, "log_softmax", X, X);
    Tensor<T> out = X;
    for (std::size_t i = 0; i < X.rows(); ++i) log_softmax_row(out.row(i));
    return push(std::move(out), any_grad(a), {a.id()},
                [](Graph& g, std::size_t self) {
                  const Tensor<T>& d = g.nodes_[self].grad;
                  const Tensor<T>& y = g.nodes_[self].value;
                  Tensor<T>& dx = g.grad_ref(g.nodes_[self].inputs[0]);
                  for (std::size_t i = 0; i < y.rows(); ++i) {
                    T total = T(0);
                    for (std::size_t j = 0; j < y.cols(); ++j) total += d(i, j);
                    for (std::size_t j = 0; j < y.cols(); ++j)
                      dx(i, j) += d(i, j) - std::exp(y(i, j)) * total;
                  }
                },
                "log_softmax");
  }

  // out[i] = X[i, labels[i]]
  Var pick(Var a, std::vector<std::size_t> labels) {
    const Tensor<T>& X = value(a);
    require(X.rank() == 2 && labels.size() == X.rows(), "pick", X, X);
    Tensor<T> out(Shape{X.rows()});
    for (std::size_t i = 0; i < X.rows(); ++i) {
      if (labels[i] >= X.cols()) {
        throw std::out_of_range("pick: label " + std::to_string(labels[i]) +
                                " outside [0," + std::to_string(X.cols()) + ")");
      }
      out[i] = X(i, labels[i]);
    }
    return push(std::move(out), any_grad(a), {a.id()},
                [labels = std::move(labels)](Graph& g, std::size_t self) {
                  const Tensor<T>& d = g.nodes_[self].grad;
                  Tensor<T>& dx = g.grad_ref(g.nodes_[self].inputs[0]);
                  for (std::size_t i = 0; i < labels.size(); ++i) dx(i, labels[i]) += d[i];
                },
                "pick");
  }

  // Per-row sum of a [n,m] matrix -> [n].
  Var sum_cols(Var a) {
    const Tensor<T>& X = value(a);
    require(X.rank() == 2, "sum_cols", X, X);
    Tensor<T> out(Shape{X.rows()});
    for (std::size_t i = 0; i < X.rows(); ++i)
      for (std::size_t j = 0; j < X.cols(); ++j) out[i] += X(i, j);
    return push(std::move(out), any_grad(a), {a.id()},
                [](Graph& g, std::size_t self) {
                  const Tensor<T>& d = g.nodes_[self].grad;
                  Tensor<T>& dx = g.grad_ref(g.nodes_[self].inputs[0]);
                  for (std::size_t i = 0; i < dx.rows(); ++i)
                    for (std::size_t j = 0; j < dx.cols(); ++j) dx(i, j) += d[i];
                },
                "sum_cols");
  }

  Var sum(Var a) {
    T total = T(0);
    for (T v : value(a).storage()) total += v;
    return push(Tensor<T>::scalar(total), any_grad(a), {a.id()},
                [](Graph& g, std::size_t self) {
                  const T d = g.nodes_[self].grad[0];
                  for (T& v : g.grad_ref(g.nodes_[self].inputs[0]).storage()) v += d;
                },
                "sum");
  }

  Var mean(Var a) {
    const std::size_t n = value(a).size();
    if (n == 0) throw std::invalid_argument("mean: empty tensor");
    return scale(sum(a), T(1) / static_cast<T>(n));
  }

  // Sum of w[i] * v[i] with constant weights; used for masked batch averages.
  Var weighted_sum(Var a, std::vector<T> weights) {
    const Tensor<T>& v = value(a);
    if (weights.size() != v.size()) {
      throw std::invalid_argument("weighted_sum: " + std::to_string(weights.size()) +
                                  " weights for " + std::to_string(v.size()) + " values");
    }
    T total = T(0);
    for (std::size_t i = 0; i < v.size(); ++i) total += weights[i] * v[i];
    return push(Tensor<T>::scalar(total), any_grad(a), {a.id()},
                [weights = std::move(weights)](Graph& g, std::size_t self) {
                  const T d = g.nodes_[self].grad[0];
                  Tensor<T>& dx = g.grad_ref(g.nodes_[self].inputs[0]);
                  for (std::size_t i = 0; i < weights.size(); ++i) dx[i] += d * weights[i];
                },
                "weighted_sum");
  }

  Var concat_cols(Var a, Var b) {
    const Tensor<T>& A = value(a);
    const Tensor<T>& B = value(b);
    require(A.rank() == 2 && B.rank() == 2 && A.rows() == B.rows(), "concat_cols", A, B);
    const std::size_t ca = A.cols(), cb = B.cols();
    Tensor<T> out = Tensor<T>::matrix(A.rows(), ca + cb);
    for (std::size_t i = 0; i < A.rows(); ++i) {
      for (std::size_t j = 0; j < ca; ++j) out(i, j) = A(i, j);
      for (std::size_t j = 0; j < cb; ++j) out(i, ca + j) = B(i, j);
    }
    return push(std::move(out), any_grad(a, b), {a.id(), b.id()},
                [ca, cb](Graph& g, std::size_t self) {
                  const Tensor<T>& d = g.nodes_[self].grad;
                  const auto& in = g.nodes_[self].inputs;
                  if (g.nodes_[in[0]].requires_grad) {
                    Tensor<T>& da = g.grad_ref(in[0]);
                    for (std::size_t i = 0; i < d.rows(); ++i)
                      for (std::size_t j = 0; j < ca; ++j) da(i, j) += d(i, j);
                  }
                  if (g.nodes_[in[1]].requires_grad) {
                    Tensor<T>& db = g.grad_ref(in[1]);
                    for (std::size_t i = 0; i < d.rows(); ++i)
                      for (std::size_t j = 0; j < cb; ++j) db(i, j) += d(i, ca + j);
                  }
                },
                "concat_cols");
  }

  // Columns [begin, begin+count) of a [n,m] matrix.
  Var slice_cols(Var a, std::size_t begin, std::size_t count) {
    const Tensor<T>& A = value(a);
    require(A.rank() == 2 && begin + count <= A.cols(), "slice_cols", A, A);
    Tensor<T> out = Tensor<T>::matrix(A.rows(), count);
    for (std::size_t i = 0; i < A.rows(); ++i)
      for (std::size_t j = 0; j < count; ++j) out(i, j) = A(i, begin + j);
    return push(std::move(out), any_grad(a), {a.id()},
                [begin, count](Graph& g, std::size_t self) {
                  const Tensor<T>& d = g.nodes_[self].grad;
                  Tensor<T>& da = g.grad_ref(g.nodes_[self].inputs[0]);
                  for (std::size_t i = 0; i < d.rows(); ++i)
                    for (std::size_t j = 0; j < count; ++j) da(i, begin + j) += d(i, j);
                },
                "slice_cols");
  }

  // ---- scalar helpers shared with non-graph code ---------------------------

  static T softplus_value(T x) {
    return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  }
  static T sigmoid_value(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
  }
  static void log_softmax_row(std::span<T> row) {
    T mx = -std::numeric_limits<T>::infinity();
    for (T v : row) mx = std::max(mx, v);
    T total = T(0);
    for (T v : row) total += std::exp(v - mx);
    const T lse = mx + std::log(total);
    for (T& v : row) v -= lse;
  }

 private:
  using Backward = std::function<void(Graph&, std::size_t)>;

  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool grad_touched = false;
    std::vector<std::size_t> inputs;
    Backward backward;
  };

  Var push(Tensor<T> value, bool requires_grad, std::vector<std::size_t> inputs,
           Backward backward, const char* op) {
    if (!value.all_finite()) {
      throw NumericalError(std::string("non-finite value produced by ") + op);
    }
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.inputs = std::move(inputs);
    if (requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Tensor<T>& grad_ref(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.grad_touched) {
      n.grad = Tensor<T>(n.value.shape());
      n.grad_touched = true;
    }
    return n.grad;
  }

  template <typename F, typename DF>
  Var unary(Var a, const char* op, F f, DF df) {
    Tensor<T> out = value(a);
    for (T& v : out.storage()) v = f(v);
    return push(std::move(out), any_grad(a), {a.id()},
                [df](Graph& g, std::size_t self) {
                  const Node& n = g.nodes_[self];
                  const std::size_t in = n.inputs[0];
                  Tensor<T>& dx = g.grad_ref(in);
                  const Tensor<T>& x = g.nodes_[in].value;
                  for (std::size_t i = 0; i < x.size(); ++i) dx[i] += n.grad[i] * df(x[i], n.value[i]);
                },
                op);
  }

  bool any_grad(Var a) const { return nodes_[a.id()].requires_grad; }
  bool any_grad(Var a, Var b) const { return any_grad(a) || any_grad(b); }

  void same_shape(Var a, Var b, const char* op) const {
    require(value(a).shape() == value(b).shape(), op, value(a), value(b));
  }

  static void require(bool ok, const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (!ok) {
      throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                                  shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
  }

  static void axpy(Tensor<T>& dst, const Tensor<T>& src, T alpha) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += alpha * src[i];
  }

  static void gemm(const Tensor<T>& A, const Tensor<T>& B, Tensor<T>& C) {
    const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
    for (std::size_t i = 0; i < n; ++i) {
      T* c = &C(i, 0);
      for (std::size_t p = 0; p < k; ++p) {
        const T a = A(i, p);
        if (a == T(0)) continue;
        const T* b = &B(p, 0);
        for (std::size_t j = 0; j < m; ++j) c[j] += a * b[j];
      }
    }
  }

  std::deque<Node> nodes_;
};

template <typename T>
using Var = typename Graph<T>::Var;

}  // namespace hood
