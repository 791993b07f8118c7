#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// A Var is a shared handle to a graph Node. Operations on Vars record their
// parents and a backward closure whenever gradient recording is enabled and
// at least one input requires a gradient. backward() walks the recorded graph
// in reverse topological order and accumulates gradients additively.

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "tinyhd/tensor.hpp"

namespace tinyhd {

namespace detail {
inline thread_local bool grad_recording = true;
}

inline bool grad_enabled() { return detail::grad_recording; }

/// Disables graph recording for its lifetime (inference, teachers, metrics).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_recording) {
    detail::grad_recording = false;
  }
  ~NoGradGuard() { detail::grad_recording = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Tensor<T> value;
  std::optional<Tensor<T>> grad;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;

  Tensor<T>& grad_buffer() {
    if (!grad) grad.emplace(value.shape());
    return *grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var parameter(Tensor<T> value) { return Var(std::move(value), true); }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t numel() const { return node_->value.numel(); }
  const char* op() const { return node_->op; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_->grad.has_value(); }
  const Tensor<T>& grad() const {
    if (!node_->grad) throw ContractError("gradient is absent");
    return *node_->grad;
  }
  /// Gradient, or zeros when no backward pass reached this node.
  Tensor<T> grad_or_zero() const {
    return node_->grad ? *node_->grad : Tensor<T>(shape());
  }
  void zero_grad() {
    if (node_->grad) node_->grad->fill(T{0});
  }
  void clear_grad() { node_->grad.reset(); }

  /// Same value, cut from the graph.
  Var detach() const { return Var(node_->value, false); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds a result Var; records the backward closure only when needed.
template <typename T>
Var<T> make_result(Tensor<T> value, const char* op,
                   std::vector<Var<T>> parents,
                   std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node_ptr());
    node->backward_fn = std::move(backward_fn);
  }
  return Var<T>(std::move(node));
}

/// Populates gradients of every requires_grad node reachable from `loss`.
template <typename T>
void backward(const Var<T>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order) {
    if (n->grad) n->grad->fill(T{0});
  }
  loss.node()->grad_buffer().fill(T{1});
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->grad) n->backward_fn(*n);
  }
}

namespace detail {

template <typename T>
Tensor<T>* parent_grad(Node<T>& self, std::size_t i) {
  auto& p = *self.parents[i];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}

template <typename T, typename F, typename DF>
Var<T> unary(const Var<T>& x, const char* op, F f, DF df) {
  Tensor<T> out(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(xv[i]);
  return make_result<T>(std::move(out), op, {x}, [df](Node<T>& self) {
    auto* gx = parent_grad(self, 0);
    if (!gx) return;
    const auto& xv = self.parents[0]->value;
    const auto& g = *self.grad;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      (*gx)[i] += g[i] * df(xv[i], self.value[i]);
    }
  });
}

// dfa/dfb return partial derivatives given (a, b).
template <typename T, typename F, typename DA, typename DB>
Var<T> binary(const Var<T>& a, const Var<T>& b, const char* op, F f, DA da,
              DB db) {
  require_same_shape(a.shape(), b.shape(), op);
  Tensor<T> out(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(av[i], bv[i]);
  return make_result<T>(std::move(out), op, {a, b}, [da, db](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const auto& g = *self.grad;
    if (auto* ga = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g.numel(); ++i)
        (*ga)[i] += g[i] * da(av[i], bv[i]);
    }
    if (auto* gb = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < g.numel(); ++i)
        (*gb)[i] += g[i] * db(av[i], bv[i]);
    }
  });
}

}  // namespace detail

// ---- elementwise ----------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T{1}; },
      [](T, T) { return T{1}; });
}
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T{1}; },
      [](T, T) { return T{-1}; });
}
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}
template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      a, b, "div", [](T x, T y) { return x / y; },
      [](T, T y) { return T{1} / y; }, [](T x, T y) { return -x / (y * y); });
}
// Ties route the gradient to the first operand.
template <typename T>
Var<T> maximum(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      a, b, "max", [](T x, T y) { return x >= y ? x : y; },
      [](T x, T y) { return x >= y ? T{1} : T{0}; },
      [](T x, T y) { return x >= y ? T{0} : T{1}; });
}
template <typename T>
Var<T> minimum(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      a, b, "min", [](T x, T y) { return x <= y ? x : y; },
      [](T x, T y) { return x <= y ? T{1} : T{0}; },
      [](T x, T y) { return x <= y ? T{0} : T{1}; });
}

template <typename T>
Var<T> add(const Var<T>& a, T s) {
  return detail::unary<T>(
      a, "add_scalar", [s](T x) { return x + s; }, [](T, T) { return T{1}; });
}
template <typename T>
Var<T> sub(const Var<T>& a, T s) {
  return add(a, -s);
}
template <typename T>
Var<T> mul(const Var<T>& a, T s) {
  return detail::unary<T>(
      a, "mul_scalar", [s](T x) { return x * s; }, [s](T, T) { return s; });
}
template <typename T>
Var<T> div(const Var<T>& a, T s) {
  return mul(a, T{1} / s);
}
template <typename T>
Var<T> maximum(const Var<T>& a, T s) {
  return detail::unary<T>(
      a, "max_scalar", [s](T x) { return x >= s ? x : s; },
      [s](T x, T) { return x >= s ? T{1} : T{0}; });
}
template <typename T>
Var<T> minimum(const Var<T>& a, T s) {
  return detail::unary<T>(
      a, "min_scalar", [s](T x) { return x <= s ? x : s; },
      [s](T x, T) { return x <= s ? T{1} : T{0}; });
}

template <typename T>
Var<T> neg(const Var<T>& x) {
  return mul(x, T{-1});
}
template <typename T>
Var<T> log(const Var<T>& x) {
  return detail::unary<T>(
      x, "log", [](T v) { return std::log(v); },
      [](T v, T) { return T{1} / v; });
}
template <typename T>
Var<T> exp(const Var<T>& x) {
  return detail::unary<T>(
      x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}
template <typename T>
Var<T> relu6(const Var<T>& x) {
  return detail::unary<T>(
      x, "relu6", [](T v) { return std::min(std::max(v, T{0}), T{6}); },
      [](T v, T) { return (v > T{0} && v < T{6}) ? T{1} : T{0}; });
}
template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary<T>(
      x, "sigmoid", [](T v) { return T{1} / (T{1} + std::exp(-v)); },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <typename T>
Var<T> operator/(const Var<T>& a, const Var<T>& b) { return div(a, b); }

// ---- reductions and structure ---------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& x) {
  double acc = 0.0;
  for (auto v : x.value().data()) acc += v;
  return make_result<T>(Tensor<T>::scalar(static_cast<T>(acc)), "sum", {x},
                        [](Node<T>& self) {
                          auto* gx = detail::parent_grad(self, 0);
                          if (!gx) return;
                          const T g = self.grad->item();
                          for (auto& v : gx->data()) v += g;
                        });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return mul(sum(x), T{1} / static_cast<T>(x.numel()));
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  return make_result<T>(x.value().reshaped(std::move(shape)), "reshape", {x},
                        [](Node<T>& self) {
                          auto* gx = detail::parent_grad(self, 0);
                          if (!gx) return;
                          const auto& g = *self.grad;
                          for (std::size_t i = 0; i < g.numel(); ++i)
                            (*gx)[i] += g[i];
                        });
}

/// Concatenation along `axis`; all other extents must agree.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  Shape out_shape = xs[0].shape();
  if (axis >= out_shape.size()) throw ShapeError("concat axis out of range");
  std::size_t total = 0;
  for (const auto& x : xs) {
    Shape s = x.shape();
    if (s.size() != out_shape.size()) {
      throw ShapeError("concat rank mismatch " + shape_str(s) + " vs " +
                       shape_str(out_shape));
    }
    total += s[axis];
    s[axis] = out_shape[axis];
    if (s != out_shape) {
      throw ShapeError("concat shape mismatch " + shape_str(x.shape()) +
                       " vs " + shape_str(xs[0].shape()));
    }
  }
  out_shape[axis] = total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= out_shape[i];
  for (std::size_t i = axis + 1; i < out_shape.size(); ++i) inner *= out_shape[i];

  Tensor<T> out(out_shape);
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& x : xs) {
    const std::size_t w = x.shape()[axis] * inner;
    widths.push_back(w);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(x.value().ptr() + o * w, w,
                  out.ptr() + o * total * inner + offset);
    }
    offset += w;
  }
  return make_result<T>(
      std::move(out), "concat", xs,
      [widths, outer, row = total * inner](Node<T>& self) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          if (auto* gx = detail::parent_grad(self, k)) {
            for (std::size_t o = 0; o < outer; ++o) {
              const T* src = self.grad->ptr() + o * row + offset;
              T* dst = gx->ptr() + o * widths[k];
              for (std::size_t i = 0; i < widths[k]; ++i) dst[i] += src[i];
            }
          }
          offset += widths[k];
        }
      });
}

/// Contracts the last `k` axes of `a` with the first `k` axes of `b`.
template <typename T>
Var<T> tensordot(const Var<T>& a, const Var<T>& b, std::size_t k) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (k > sa.size() || k > sb.size()) {
    throw ShapeError("tensordot: cannot contract " + std::to_string(k) +
                     " axes of " + shape_str(sa) + " and " + shape_str(sb));
  }
  for (std::size_t i = 0; i < k; ++i) {
    if (sa[sa.size() - k + i] != sb[i]) {
      throw ShapeError("tensordot: contracted axis mismatch " + shape_str(sa) +
                       " vs " + shape_str(sb));
    }
  }
  Shape out_shape(sa.begin(), sa.end() - static_cast<std::ptrdiff_t>(k));
  out_shape.insert(out_shape.end(), sb.begin() + static_cast<std::ptrdiff_t>(k),
                   sb.end());
  std::size_t m = 1, inner = 1, n = 1;
  for (std::size_t i = 0; i + k < sa.size(); ++i) m *= sa[i];
  for (std::size_t i = 0; i < k; ++i) inner *= sb[i];
  for (std::size_t i = k; i < sb.size(); ++i) n *= sb[i];

  Tensor<T> out(out_shape);
  const T* A = a.value().ptr();
  const T* B = b.value().ptr();
  T* C = out.ptr();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < inner; ++p) {
      const T av = A[i * inner + p];
      for (std::size_t j = 0; j < n; ++j) C[i * n + j] += av * B[p * n + j];
    }
  }
  return make_result<T>(
      std::move(out), "tensordot", {a, b}, [m, inner, n](Node<T>& self) {
        const T* G = self.grad->ptr();
        const T* A = self.parents[0]->value.ptr();
        const T* B = self.parents[1]->value.ptr();
        if (auto* ga = detail::parent_grad(self, 0)) {
          T* GA = ga->ptr();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < inner; ++p) {
              T acc{0};
              for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
              GA[i * inner + p] += acc;
            }
        }
        if (auto* gb = detail::parent_grad(self, 1)) {
          T* GB = gb->ptr();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < inner; ++p) {
              const T av = A[i * inner + p];
              for (std::size_t j = 0; j < n; ++j) GB[p * n + j] += av * G[i * n + j];
            }
        }
      });
}

/// Softmax over contiguous blocks of `inner` elements.
template <typename T>
Var<T> softmax_blocks(const Var<T>& x, std::size_t inner) {
  if (inner == 0 || x.numel() % inner != 0) {
    throw ShapeError("softmax block size " + std::to_string(inner) +
                     " does not divide shape " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / inner;
  Tensor<T> out(x.shape());
  const T* X = x.value().ptr();
  T* Y = out.ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = X + r * inner;
    T* yr = Y + r * inner;
    const T mx = *std::max_element(xr, xr + inner);
    double z = 0.0;
    for (std::size_t i = 0; i < inner; ++i) {
      yr[i] = std::exp(xr[i] - mx);
      z += yr[i];
    }
    const T inv = static_cast<T>(1.0 / z);
    for (std::size_t i = 0; i < inner; ++i) yr[i] *= inv;
  }
  return make_result<T>(std::move(out), "softmax", {x},
                        [rows, inner](Node<T>& self) {
                          auto* gx = detail::parent_grad(self, 0);
                          if (!gx) return;
                          const T* Y = self.value.ptr();
                          const T* G = self.grad->ptr();
                          T* GX = gx->ptr();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const std::size_t o = r * inner;
                            double dot = 0.0;
                            for (std::size_t i = 0; i < inner; ++i)
                              dot += static_cast<double>(G[o + i]) * Y[o + i];
                            const T d = static_cast<T>(dot);
                            for (std::size_t i = 0; i < inner; ++i)
                              GX[o + i] += Y[o + i] * (G[o + i] - d);
                          }
                        });
}

/// Mean over one axis, keeping it with extent 1.
template <typename T>
Var<T> mean_axis(const Var<T>& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw ShapeError("mean_axis: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Shape out_shape = s;
  out_shape[axis] = 1;
  Tensor<T> out(out_shape);
  const T scale = T{1} / static_cast<T>(len);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l) {
      const T* src = x.value().ptr() + (o * len + l) * inner;
      T* dst = out.ptr() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i] * scale;
    }
  return make_result<T>(std::move(out), "mean_axis", {x},
                        [outer, inner, len, scale](Node<T>& self) {
                          auto* gx = detail::parent_grad(self, 0);
                          if (!gx) return;
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t l = 0; l < len; ++l) {
                              const T* g = self.grad->ptr() + o * inner;
                              T* dst = gx->ptr() + (o * len + l) * inner;
                              for (std::size_t i = 0; i < inner; ++i)
                                dst[i] += g[i] * scale;
                            }
                        });
}

}  // namespace tinyhd
