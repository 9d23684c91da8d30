#pragma once

// Dense row-major tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared graph node. Operations on tensors
// that track gradients record a node holding the parents and an adjoint
// closure; `backward()` walks the recorded graph once in reverse topological
// order. Leaves (parameters) accumulate gradients across backward calls;
// interior nodes are reset at the start of every pass.
//
// Two precisions are used: float for training, double for verification.
// Under double every primitive checks its output for NaN/Inf and throws
// NonFiniteError naming the primitive.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "nfpo/error.hpp"

namespace nfpo {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

namespace detail {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> adjoint;

  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Disables graph recording for its lifetime (sampling, evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
inline constexpr bool kChecksFinite = std::is_same_v<T, double>;

template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() : Tensor(Shape{}, std::vector<T>{T(0)}) {}

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    if (data.size() != numel_of(shape)) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    for (auto d : shape) {
      if (d == 0) throw ShapeError("zero-sized dimension in " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape) {
    const auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)));
  }
  static Tensor full(Shape shape, T v) {
    const auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v));
  }
  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  static Tensor from_node(NodePtr node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  /// Rows of a rank-2 tensor, or length of a rank-1 tensor.
  std::size_t rows() const { return rank() == 0 ? 1 : node_->shape[0]; }
  /// Last-axis extent (1 for scalars).
  std::size_t cols() const { return rank() == 0 ? 1 : node_->shape.back(); }

  std::span<const T> data() const { return node_->value; }
  /// Direct write access. Only meaningful on leaves (parameters, inputs).
  std::span<T> mutable_data() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  T item() const {
    if (numel() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->value[0];
  }
  T at(std::size_t i) const { return node_->value.at(i); }
  T at(std::size_t i, std::size_t j) const {
    return node_->value.at(i * cols() + j);
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool is_leaf() const { return node_->leaf; }
  const char* op() const { return node_->op; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const {
    if (!has_grad()) node_->grad.assign(node_->value.size(), T(0));
    return node_->grad;
  }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  /// Same values, no graph history, no gradient tracking.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

template <typename T>
void check_finite(const std::vector<T>& v, const char* op) {
  if constexpr (kChecksFinite<T>) {
    for (auto x : v) {
      if (!std::isfinite(x)) {
        throw NonFiniteError(std::string("non-finite output from '") + op +
                             "'");
      }
    }
  }
}

/// Wraps a computed value into a tensor, recording a graph node when any
/// parent tracks gradients and recording is enabled.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, const char* op,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(Node<T>&)> adjoint) {
  check_finite(value, op);
  Tensor<T> out(std::move(shape), std::move(value));
  bool track = false;
  if (grad_mode()) {
    for (const auto& p : parents) track = track || p->requires_grad;
  }
  auto& node = *out.node();
  node.op = op;
  if (track) {
    node.requires_grad = true;
    node.leaf = false;
    node.parents = std::move(parents);
    node.adjoint = std::move(adjoint);
  }
  return out;
}

// Binary broadcasting: identical shapes, one side scalar, or one side a
// rank-1 vector matching the other's last axis (row broadcast).
enum class Bcast { kSame, kScalar, kRow };

struct BinaryPlan {
  Shape out;
  Bcast a_mode = Bcast::kSame;
  Bcast b_mode = Bcast::kSame;
  std::size_t a_n = 1;
  std::size_t b_n = 1;
};

inline std::size_t bidx(Bcast mode, std::size_t i, std::size_t n) {
  switch (mode) {
    case Bcast::kSame:
      return i;
    case Bcast::kScalar:
      return 0;
    case Bcast::kRow:
      return i % n;
  }
  return i;
}

inline BinaryPlan plan_binary(const Shape& a, const Shape& b, const char* op) {
  BinaryPlan plan;
  if (a == b) {
    plan.out = a;
    return plan;
  }
  const auto na = numel_of(a);
  const auto nb = numel_of(b);
  if (nb == 1) {
    plan.out = a;
    plan.b_mode = Bcast::kScalar;
    return plan;
  }
  if (na == 1) {
    plan.out = b;
    plan.a_mode = Bcast::kScalar;
    return plan;
  }
  if (b.size() == 1 && !a.empty() && a.size() > 1 && b[0] == a.back()) {
    plan.out = a;
    plan.b_mode = Bcast::kRow;
    plan.b_n = b[0];
    return plan;
  }
  if (a.size() == 1 && !b.empty() && b.size() > 1 && a[0] == b.back()) {
    plan.out = b;
    plan.a_mode = Bcast::kRow;
    plan.a_n = a[0];
    return plan;
  }
  throw ShapeError(std::string("shape mismatch in '") + op + "': " +
                   shape_str(a) + " vs " + shape_str(b));
}

template <typename T, typename Fwd, typename DA, typename DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* op,
                 Fwd fwd, DA da, DB db) {
  const auto plan = plan_binary(a.shape(), b.shape(), op);
  const auto n = numel_of(plan.out);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = fwd(av[bidx(plan.a_mode, i, plan.a_n)],
                 bv[bidx(plan.b_mode, i, plan.b_n)]);
  }
  return make_result<T>(
      plan.out, std::move(out), op, {a.node(), b.node()},
      [plan, da, db](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const auto& g = self.grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const auto ia = bidx(plan.a_mode, i, plan.a_n);
          const auto ib = bidx(plan.b_mode, i, plan.b_n);
          if (pa.requires_grad) {
            pa.grad_buffer()[ia] += g[i] * da(pa.value[ia], pb.value[ib]);
          }
          if (pb.requires_grad) {
            pb.grad_buffer()[ib] += g[i] * db(pa.value[ia], pb.value[ib]);
          }
        }
      });
}

/// Element-wise map whose derivative is expressed through the input x and
/// the output y.
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& x, const char* op, Fwd fwd, Deriv deriv) {
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return make_result<T>(x.shape(), std::move(out), op, {x.node()},
                        [deriv](Node<T>& self) {
                          auto& p = *self.parents[0];
                          auto& pg = p.grad_buffer();
                          for (std::size_t i = 0; i < self.grad.size(); ++i) {
                            pg[i] += self.grad[i] *
                                     deriv(p.value[i], self.value[i]);
                          }
                        });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Element-wise primitives

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

/// Element-wise minimum; ties route the adjoint to the first argument.
template <typename T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "min", [](T x, T y) { return x <= y ? x : y; },
      [](T x, T y) { return x <= y ? T(1) : T(0); },
      [](T x, T y) { return x <= y ? T(0) : T(1); });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return detail::unary(
      x, "scale", [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> shift(const Tensor<T>& x, T c) {
  return detail::unary(
      x, "shift", [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return scale(x, T(-1));
}

template <typename T>
Tensor<T> operator-(const Tensor<T>& x) {
  return neg(x);
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(
      x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary(
      x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary(
      x, "tanh", [](T v) { return std::tanh(v); },
      [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> elu(const Tensor<T>& x) {
  return detail::unary(
      x, "elu", [](T v) { return v > T(0) ? v : std::expm1(v); },
      [](T v, T y) { return v > T(0) ? T(1) : y + T(1); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary(
      x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

/// clip(x, lo, hi). The adjoint is 1 on the closed interval [lo, hi] and 0
/// strictly outside it.
template <typename T>
Tensor<T> clip(const Tensor<T>& x, T lo, T hi) {
  return detail::unary(
      x, "clip", [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (auto v : x.values()) total += v;
  return detail::make_result<T>(Shape{}, {total}, "sum", {x.node()},
                                [](detail::Node<T>& self) {
                                  auto& p = *self.parents[0];
                                  auto& pg = p.grad_buffer();
                                  for (auto& g : pg) g += self.grad[0];
                                });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  const T inv = T(1) / static_cast<T>(x.numel());
  T total = T(0);
  for (auto v : x.values()) total += v;
  return detail::make_result<T>(Shape{}, {total * inv}, "mean", {x.node()},
                                [inv](detail::Node<T>& self) {
                                  auto& p = *self.parents[0];
                                  auto& pg = p.grad_buffer();
                                  for (auto& g : pg) g += self.grad[0] * inv;
                                });
}

/// Sum over the last axis: [..., k] -> [...]. Rank-1 input gives a scalar.
template <typename T>
Tensor<T> sum_last(const Tensor<T>& x) {
  if (x.rank() == 0) throw ShapeError("sum_last on a scalar");
  const auto k = x.cols();
  const auto rows = x.numel() / k;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  std::vector<T> out(rows, T(0));
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = T(0);
    for (std::size_t c = 0; c < k; ++c) acc += xv[r * k + c];
    out[r] = acc;
  }
  return detail::make_result<T>(std::move(out_shape), std::move(out),
                                "sum_last", {x.node()},
                                [k](detail::Node<T>& self) {
                                  auto& pg = self.parents[0]->grad_buffer();
                                  for (std::size_t r = 0; r < self.grad.size();
                                       ++r) {
                                    for (std::size_t c = 0; c < k; ++c) {
                                      pg[r * k + c] += self.grad[r];
                                    }
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

/// [m, k] x [k, n] -> [m, n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("shape mismatch in 'matmul': " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = av[i * k + p];
      const T* brow = bv + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  return detail::make_result<T>(
      Shape{m, n}, std::move(out), "matmul", {a.node(), b.node()},
      [m, k, n](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const T* g = self.grad.data();
        if (pa.requires_grad) {
          auto& ga = pa.grad_buffer();
          const T* bv = pb.value.data();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              T acc = T(0);
              const T* brow = bv + p * n;
              const T* grow = g + i * n;
              for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              ga[i * k + p] += acc;
            }
          }
        }
        if (pb.requires_grad) {
          auto& gb = pb.grad_buffer();
          const T* av = pa.value.data();
          for (std::size_t i = 0; i < m; ++i) {
            const T* grow = g + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const T aip = av[i * k + p];
              T* gbrow = gb.data() + p * n;
              for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
            }
          }
        }
      });
}

/// Concatenate rank-2 tensors with equal row counts along the last axis.
template <typename T>
Tensor<T> concat_last(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_last of zero tensors");
  const auto rows = parts[0].rows();
  std::size_t width = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.rows() != rows) {
      throw ShapeError("shape mismatch in 'concat_last': " +
                       shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    width += p.cols();
  }
  std::vector<T> out(rows * width);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  std::vector<std::shared_ptr<detail::Node<T>>> nodes;
  for (const auto& p : parts) {
    const auto k = p.cols();
    const auto& pv = p.values();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(pv.data() + r * k, k, out.data() + r * width + off);
    }
    offsets.push_back(off);
    off += k;
    nodes.push_back(p.node());
  }
  return detail::make_result<T>(
      Shape{rows, width}, std::move(out), "concat_last", std::move(nodes),
      [rows, width, offsets](detail::Node<T>& self) {
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
          auto& p = *self.parents[i];
          if (!p.requires_grad) continue;
          auto& pg = p.grad_buffer();
          const auto k = p.shape.back();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < k; ++c) {
              pg[r * k + c] += self.grad[r * width + offsets[i] + c];
            }
          }
        }
      });
}

/// Gather columns `index` of a rank-2 tensor: [B, D] -> [B, |index|].
template <typename T>
Tensor<T> select_cols(const Tensor<T>& x, const std::vector<std::size_t>& index) {
  if (x.rank() != 2) {
    throw ShapeError("select_cols expects rank 2, got " + shape_str(x.shape()));
  }
  const auto rows = x.rows(), d = x.cols(), k = index.size();
  for (auto i : index) {
    if (i >= d) {
      throw ShapeError("select_cols index " + std::to_string(i) +
                       " out of range for " + shape_str(x.shape()));
    }
  }
  std::vector<T> out(rows * k);
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < k; ++c) out[r * k + c] = xv[r * d + index[c]];
  }
  return detail::make_result<T>(
      Shape{rows, k}, std::move(out), "select_cols", {x.node()},
      [rows, d, k, index](detail::Node<T>& self) {
        auto& pg = self.parents[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < k; ++c) {
            pg[r * d + index[c]] += self.grad[r * k + c];
          }
        }
      });
}

/// Inverse of select_cols over a partition: column index[i][c] of the result
/// is column c of parts[i]. The index sets must partition [0, width).
template <typename T>
Tensor<T> scatter_cols(const std::vector<Tensor<T>>& parts,
                       const std::vector<std::vector<std::size_t>>& index,
                       std::size_t width) {
  if (parts.size() != index.size() || parts.empty()) {
    throw ShapeError("scatter_cols: parts and index sets differ in count");
  }
  std::vector<int> seen(width, 0);
  const auto rows = parts[0].rows();
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].rank() != 2 || parts[i].rows() != rows ||
        parts[i].cols() != index[i].size()) {
      throw ShapeError("shape mismatch in 'scatter_cols': " +
                       shape_str(parts[i].shape()) + " vs index set of size " +
                       std::to_string(index[i].size()));
    }
    for (auto c : index[i]) {
      if (c >= width || seen[c]++) {
        throw ShapeError("scatter_cols: index sets do not partition width " +
                         std::to_string(width));
      }
    }
  }
  for (auto s : seen) {
    if (!s) throw ShapeError("scatter_cols: index sets do not cover width");
  }
  std::vector<T> out(rows * width);
  std::vector<std::shared_ptr<detail::Node<T>>> nodes;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& pv = parts[i].values();
    const auto k = index[i].size();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < k; ++c) {
        out[r * width + index[i][c]] = pv[r * k + c];
      }
    }
    nodes.push_back(parts[i].node());
  }
  return detail::make_result<T>(
      Shape{rows, width}, std::move(out), "scatter_cols", std::move(nodes),
      [rows, width, index](detail::Node<T>& self) {
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
          auto& p = *self.parents[i];
          if (!p.requires_grad) continue;
          auto& pg = p.grad_buffer();
          const auto k = index[i].size();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < k; ++c) {
              pg[r * k + c] += self.grad[r * width + index[i][c]];
            }
          }
        }
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("shape mismatch in 'reshape': " + shape_str(x.shape()) +
                     " vs " + shape_str(shape));
  }
  return detail::make_result<T>(std::move(shape), x.values(), "reshape",
                                {x.node()}, [](detail::Node<T>& self) {
                                  auto& pg = self.parents[0]->grad_buffer();
                                  for (std::size_t i = 0; i < pg.size(); ++i) {
                                    pg[i] += self.grad[i];
                                  }
                                });
}

/// Gather rows of a rank-1 or rank-2 tensor (minibatch slicing). The result
/// is a fresh untracked tensor.
template <typename T>
Tensor<T> take_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  const auto k = x.rank() <= 1 ? std::size_t{1} : x.cols();
  std::vector<T> out(rows.size() * k);
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy_n(xv.data() + rows[r] * k, k, out.data() + r * k);
  }
  Shape shape = x.shape();
  shape[0] = rows.size();
  return Tensor<T>(std::move(shape), std::move(out));
}

// ---------------------------------------------------------------------------
// Backward pass

/// Accumulates d(root)/d(leaf) into every tracked leaf reachable from root.
template <typename T>
void backward(const Tensor<T>& root) {
  if (root.numel() != 1) {
    throw ShapeError("backward requires a scalar root, got shape " +
                shape_str(root.shape()));
  }
  if (!root.requires_grad()) {
    throw Error("backward called on a tensor that does not track gradients");
  }
  using NodeT = detail::Node<T>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, std::size_t>> stack{{root.node().get(), 0}};
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto* node : order) {
    if (!node->leaf) node->grad.assign(node->value.size(), T(0));
  }
  root.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* node = *it;
    if (!node->leaf && node->adjoint) node->adjoint(*node);
  }
}

}  // namespace nfpo
