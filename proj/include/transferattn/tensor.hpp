#pragma once

// Dense float64 tensors with a tape-free reverse-mode autodiff graph.
//
// Every op returns a new Tensor whose node keeps shared ownership of its
// inputs and a closure that pushes the output gradient back into them.
// Graphs are owned by the tensors that reference them, so independent
// threads can build and differentiate independent graphs concurrently.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace transferattn {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

inline thread_local bool grad_enabled = true;

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    if (shape.empty()) shape = {1};
    if (shape_numel(shape) != data.size())
      throw ShapeError("shape " + shape_str(shape) + " does not match data length " +
                       std::to_string(data.size()));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t dim(int axis) const {
    int r = static_cast<int>(rank());
    int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    return node_->shape[static_cast<std::size_t>(a)];
  }

  std::span<const double> data() const { return node_->data; }
  /// Direct write access for optimizers and initializers; bypasses the graph.
  std::span<double> mutable_data() { return node_->data; }
  double item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
  }
  double operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Copy of the values as a fresh leaf with no history.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  /// Reverse-mode sweep from this scalar. Leaf gradients accumulate.
  void backward() const {
    if (size() != 1) throw ShapeError("backward() requires a scalar, got " + shape_str(shape()));
    if (!node_->requires_grad) return;
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    // Iterative post-order DFS; graphs can be deep after many blocks.
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        detail::Node* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->ensure_grad();
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> ins) {
  if (!grad_enabled) return false;
  for (auto* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

// Builds the output tensor and, when needed, wires its backward closure.
inline Tensor make_result(Shape shape, std::vector<double> data,
                          std::initializer_list<const Tensor*> ins,
                          std::function<void(Node&)> bw) {
  Tensor out(std::move(shape), std::move(data));
  if (any_requires_grad(ins)) {
    Node* n = out.node();
    n->requires_grad = true;
    for (auto* t : ins) n->parents.push_back(t->node_ptr());
    n->backward = std::move(bw);
  }
  return out;
}

inline Tensor make_result_n(Shape shape, std::vector<double> data, const std::vector<Tensor>& ins,
                            std::function<void(Node&)> bw) {
  Tensor out(std::move(shape), std::move(data));
  bool need = false;
  if (grad_enabled)
    for (auto& t : ins) need = need || t.requires_grad();
  if (need) {
    Node* n = out.node();
    n->requires_grad = true;
    for (auto& t : ins) n->parents.push_back(t.node_ptr());
    n->backward = std::move(bw);
  }
  return out;
}

// Returns a grad buffer to accumulate into, or nullptr when p needs none.
inline double* grad_sink(Node* p) {
  if (!p->requires_grad) return nullptr;
  p->ensure_grad();
  return p->grad.data();
}

// b broadcasts against a when shapes match, b is a trailing suffix of a, or b is a scalar.
inline void check_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa == sb || b.size() == 1) return;
  if (sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin())) return;
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(sb) + " onto " + shape_str(sa));
}

template <class Fwd, class DA, class DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, DA da, DB db) {
  check_broadcast(a, b, name);
  const std::size_t n = a.size(), nb = b.size();
  std::vector<double> out(n);
  auto pa = a.data();
  auto pb = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[i % nb]);
  Node* an = a.node();
  Node* bn = b.node();
  return make_result(a.shape(), std::move(out), {&a, &b}, [an, bn, n, nb, da, db](Node& o) {
    double* ga = grad_sink(an);
    double* gb = grad_sink(bn);
    const double* x = an->data.data();
    const double* y = bn->data.data();
    for (std::size_t i = 0; i < n; ++i) {
      const double g = o.grad[i];
      if (ga) ga[i] += g * da(x[i], y[i % nb]);
      if (gb) gb[i % nb] += g * db(x[i], y[i % nb]);
    }
  });
}

// Elementwise unary op whose derivative is expressed through input x and output y.
template <class Fwd, class Deriv>
Tensor unary_op(const Tensor& a, Fwd fwd, Deriv deriv) {
  const std::size_t n = a.size();
  std::vector<double> out(n);
  auto pa = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(pa[i]);
  Node* an = a.node();
  Tensor res = make_result(a.shape(), std::move(out), {&a}, {});
  if (res.requires_grad()) {
    Node* self = res.node();
    self->backward = [an, n, deriv](Node& o) {
      double* ga = grad_sink(an);
      for (std::size_t i = 0; i < n; ++i) ga[i] += o.grad[i] * deriv(an->data[i], o.data[i]);
    };
  }
  return res;
}

inline std::size_t norm_axis(const Tensor& x, int axis) {
  int r = static_cast<int>(x.rank());
  int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  return static_cast<std::size_t>(a);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary_op(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary_op(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

inline constexpr double kLogFloor = 1e-12;

/// Natural log with inputs clamped at 1e-12; clamped entries get zero gradient.
inline Tensor log(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::log(std::max(x, kLogFloor)); },
      [](double x, double) { return x >= kLogFloor ? 1.0 / x : 0.0; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor sqrt(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

inline Tensor square(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return detail::unary_op(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

/// Clamp to [lo, hi]; gradient passes only inside the interval.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::unary_op(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  detail::Node* an = a.node();
  return detail::make_result({1}, {s}, {&a}, [an](detail::Node& o) {
    double* ga = detail::grad_sink(an);
    for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += o.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

/// Sums out one axis (the axis is removed from the shape).
inline Tensor sum_axis(const Tensor& a, int axis) {
  const std::size_t ax = detail::norm_axis(a, axis);
  const auto& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[ax];
  Shape os;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != ax) os.push_back(s[i]);
  if (os.empty()) os = {1};
  std::vector<double> out(outer * inner, 0.0);
  auto pa = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += pa[(o * len + l) * inner + i];
  detail::Node* an = a.node();
  return detail::make_result(os, std::move(out), {&a}, [an, outer, inner, len](detail::Node& g) {
    double* ga = detail::grad_sink(an);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t i = 0; i < inner; ++i) ga[(o * len + l) * inner + i] += g.grad[o * inner + i];
  });
}

inline Tensor mean_axis(const Tensor& a, int axis) {
  const double len = static_cast<double>(a.dim(axis));
  return scale(sum_axis(a, axis), 1.0 / len);
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");
  std::vector<double> out(a.data().begin(), a.data().end());
  detail::Node* an = a.node();
  return detail::make_result(std::move(shape), std::move(out), {&a}, [an](detail::Node& o) {
    double* ga = detail::grad_sink(an);
    for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
  });
}

/// Swaps the last two axes.
inline Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(a.shape()));
  Shape s = a.shape();
  const std::size_t m = s[s.size() - 2], n = s[s.size() - 1];
  const std::size_t batch = a.size() / (m * n);
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  std::vector<double> out(a.size());
  auto pa = a.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[b * m * n + j * m + i] = pa[b * m * n + i * n + j];
  detail::Node* an = a.node();
  return detail::make_result(s, std::move(out), {&a}, [an, batch, m, n](detail::Node& o) {
    double* ga = detail::grad_sink(an);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[b * m * n + i * n + j] += o.grad[b * m * n + j * m + i];
  });
}

/// [..., n, d] -> [..., h, n, d/h]
inline Tensor split_heads(const Tensor& a, std::size_t heads) {
  if (a.rank() < 2) throw ShapeError("split_heads needs rank >= 2, got " + shape_str(a.shape()));
  const std::size_t d = a.dim(-1), n = a.dim(-2);
  if (heads == 0 || d % heads != 0)
    throw ConfigError("d_model " + std::to_string(d) + " is not divisible by heads " + std::to_string(heads));
  const std::size_t dh = d / heads;
  const std::size_t batch = a.size() / (n * d);
  Shape s(a.shape().begin(), a.shape().end() - 2);
  s.insert(s.end(), {heads, n, dh});
  std::vector<double> out(a.size());
  auto pa = a.data();
  auto idx = [=](std::size_t b, std::size_t h, std::size_t t, std::size_t c) {
    return ((b * heads + h) * n + t) * dh + c;
  };
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t c = 0; c < dh; ++c) out[idx(b, h, t, c)] = pa[(b * n + t) * d + h * dh + c];
  detail::Node* an = a.node();
  return detail::make_result(s, std::move(out), {&a}, [an, batch, n, d, heads, dh, idx](detail::Node& o) {
    double* ga = detail::grad_sink(an);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t c = 0; c < dh; ++c) ga[(b * n + t) * d + h * dh + c] += o.grad[idx(b, h, t, c)];
  });
}

/// [..., h, n, d_h] -> [..., n, h*d_h]
inline Tensor merge_heads(const Tensor& a) {
  if (a.rank() < 3) throw ShapeError("merge_heads needs rank >= 3, got " + shape_str(a.shape()));
  const std::size_t dh = a.dim(-1), n = a.dim(-2), heads = a.dim(-3);
  const std::size_t d = heads * dh;
  const std::size_t batch = a.size() / (heads * n * dh);
  Shape s(a.shape().begin(), a.shape().end() - 3);
  s.insert(s.end(), {n, d});
  std::vector<double> out(a.size());
  auto pa = a.data();
  auto idx = [=](std::size_t b, std::size_t h, std::size_t t, std::size_t c) {
    return ((b * heads + h) * n + t) * dh + c;
  };
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t c = 0; c < dh; ++c) out[(b * n + t) * d + h * dh + c] = pa[idx(b, h, t, c)];
  detail::Node* an = a.node();
  return detail::make_result(s, std::move(out), {&a}, [an, batch, n, d, heads, dh, idx](detail::Node& o) {
    double* ga = detail::grad_sink(an);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t t = 0; t < n; ++t)
          for (std::size_t c = 0; c < dh; ++c) ga[idx(b, h, t, c)] += o.grad[(b * n + t) * d + h * dh + c];
  });
}

inline Tensor concat_last_axis(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_last_axis of nothing");
  const Shape& s0 = parts[0].shape();
  const std::size_t rows = parts[0].size() / s0.back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (auto& p : parts) {
    if (p.rank() != s0.size() || !std::equal(s0.begin(), s0.end() - 1, p.shape().begin()))
      throw ShapeError("concat_last_axis: " + shape_str(p.shape()) + " incompatible with " + shape_str(s0));
    widths.push_back(p.dim(-1));
    total += p.dim(-1);
  }
  Shape s = s0;
  s.back() = total;
  std::vector<double> out(rows * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pk = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pk.begin() + r * widths[k], widths[k], out.begin() + r * total + off);
    off += widths[k];
  }
  std::vector<detail::Node*> nodes;
  for (auto& p : parts) nodes.push_back(p.node());
  return detail::make_result_n(s, std::move(out), parts, [nodes, widths, rows, total](detail::Node& o) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (double* g = detail::grad_sink(nodes[k]))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < widths[k]; ++c) g[r * widths[k] + c] += o.grad[r * total + off + c];
      off += widths[k];
    }
  });
}

/// Gathers slices along axis 0. Repeated indices accumulate gradient.
inline Tensor take_rows(const Tensor& a, const std::vector<std::size_t>& rows) {
  if (rows.empty()) throw ShapeError("take_rows with no indices");
  const std::size_t stride = a.size() / a.dim(0);
  Shape s = a.shape();
  s[0] = rows.size();
  std::vector<double> out(rows.size() * stride);
  auto pa = a.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= a.dim(0))
      throw ShapeError("take_rows: index " + std::to_string(rows[r]) + " out of range for " + shape_str(a.shape()));
    std::copy_n(pa.begin() + rows[r] * stride, stride, out.begin() + r * stride);
  }
  detail::Node* an = a.node();
  return detail::make_result(s, std::move(out), {&a}, [an, rows, stride](detail::Node& o) {
    double* ga = detail::grad_sink(an);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t c = 0; c < stride; ++c) ga[rows[r] * stride + c] += o.grad[r * stride + c];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a[..., m, k] x b[k, n] (shared right operand) or a[B..., m, k] x b[B..., k, n] (batched).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t k = a.dim(-1);
  const std::size_t n = b.dim(-1);
  const bool shared = b.rank() == 2;
  if (b.dim(-2) != k || (!shared && (a.rank() != b.rank() ||
                                     !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))))
    throw ShapeError("matmul dimension mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  // Shared weights fold all leading axes into rows.
  const std::size_t m = shared ? a.size() / k : a.dim(-2);
  const std::size_t batch = shared ? 1 : a.size() / (m * k);
  Shape s = a.shape();
  s.back() = n;
  std::vector<double> out(batch * m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t bt = 0; bt < batch; ++bt) {
    const double* A = pa + bt * m * k;
    const double* B = pb + bt * k * n;
    double* C = out.data() + bt * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double av = A[i * k + p];
        const double* Brow = B + p * n;
        double* Crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) Crow[j] += av * Brow[j];
      }
  }
  detail::Node* an = a.node();
  detail::Node* bn = b.node();
  return detail::make_result(s, std::move(out), {&a, &b}, [an, bn, batch, m, k, n](detail::Node& o) {
    double* ga = detail::grad_sink(an);
    double* gb = detail::grad_sink(bn);
    for (std::size_t bt = 0; bt < batch; ++bt) {
      const double* G = o.grad.data() + bt * m * n;
      const double* A = an->data.data() + bt * m * k;
      const double* B = bn->data.data() + bt * k * n;
      if (ga) {
        double* GA = ga + bt * m * k;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
            GA[i * k + p] += acc;
          }
      }
      if (gb) {
        double* GB = gb + bt * k * n;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            for (std::size_t j = 0; j < n; ++j) GB[p * n + j] += av * G[i * n + j];
          }
      }
    }
  });
}

/// Softmax over the last axis with per-row max subtraction.
inline Tensor softmax_rows(const Tensor& x) {
  const std::size_t n = x.dim(-1);
  const std::size_t rows = x.size() / n;
  std::vector<double> out(x.size());
  auto px = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = px.data() + r * n;
    double* y = out.data() + r * n;
    double mx = in[0];
    for (std::size_t j = 0; j < n; ++j) {
      if (std::isnan(in[j])) throw NumericError("softmax_rows: NaN input in row " + std::to_string(r));
      mx = std::max(mx, in[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (y[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  detail::Node* xn = x.node();
  Tensor res = detail::make_result(x.shape(), std::move(out), {&x}, {});
  if (res.requires_grad()) {
    res.node()->backward = [xn, rows, n](detail::Node& o) {
      double* gx = detail::grad_sink(xn);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = o.data.data() + r * n;
        const double* g = o.grad.data() + r * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[j] * (g[j] - dot);
      }
    };
  }
  return res;
}

/// log(softmax) over the last axis, computed as x - max - log(sum exp).
inline Tensor log_softmax_rows(const Tensor& x) {
  const std::size_t n = x.dim(-1);
  const std::size_t rows = x.size() / n;
  std::vector<double> out(x.size());
  auto px = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = px.data() + r * n;
    double mx = in[0];
    for (std::size_t j = 0; j < n; ++j) {
      if (std::isnan(in[j])) throw NumericError("log_softmax_rows: NaN input in row " + std::to_string(r));
      mx = std::max(mx, in[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(in[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = in[j] - lz;
  }
  detail::Node* xn = x.node();
  Tensor res = detail::make_result(x.shape(), std::move(out), {&x}, {});
  if (res.requires_grad()) {
    res.node()->backward = [xn, rows, n](detail::Node& o) {
      double* gx = detail::grad_sink(xn);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = o.data.data() + r * n;
        const double* g = o.grad.data() + r * n;
        double gs = 0.0;
        for (std::size_t j = 0; j < n; ++j) gs += g[j];
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += g[j] - std::exp(y[j]) * gs;
      }
    };
  }
  return res;
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes the last axis to zero mean / unit variance, then applies gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const std::size_t d = x.dim(-1);
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
    throw ShapeError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()) +
                     " do not match last axis of " + shape_str(x.shape()));
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  auto px = x.data();
  auto pg = gain.data();
  auto pb = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = px.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (in[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * pg[j] + pb[j];
    }
  }
  detail::Node* xn = x.node();
  detail::Node* gn = gain.node();
  detail::Node* bn = bias.node();
  return detail::make_result(x.shape(), std::move(out), {&x, &gain, &bias},
                             [xn, gn, bn, xhat, rstd, rows, d](detail::Node& o) {
                               double* gx = detail::grad_sink(xn);
                               double* gg = detail::grad_sink(gn);
                               double* gb = detail::grad_sink(bn);
                               const double* gain_v = gn->data.data();
                               const double inv_d = 1.0 / static_cast<double>(d);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const double* g = o.grad.data() + r * d;
                                 const double* h = xhat->data() + r * d;
                                 double s1 = 0.0, s2 = 0.0;
                                 for (std::size_t j = 0; j < d; ++j) {
                                   const double gh = g[j] * gain_v[j];
                                   s1 += gh;
                                   s2 += gh * h[j];
                                   if (gg) gg[j] += g[j] * h[j];
                                   if (gb) gb[j] += g[j];
                                 }
                                 if (gx)
                                   for (std::size_t j = 0; j < d; ++j)
                                     gx[r * d + j] += (*rstd)[r] * (g[j] * gain_v[j] - inv_d * s1 - h[j] * inv_d * s2);
                               }
                             });
}

/// Gradient reversal: identity forward, upstream gradient times -lambda backward.
inline Tensor grl(const Tensor& x, double lambda) {
  if (!(lambda >= 0.0)) throw ConfigError("grl: lambda must be non-negative, got " + std::to_string(lambda));
  std::vector<double> out(x.data().begin(), x.data().end());
  detail::Node* xn = x.node();
  const double factor = -lambda;
  return detail::make_result(x.shape(), std::move(out), {&x}, [xn, factor](detail::Node& o) {
    double* gx = detail::grad_sink(xn);
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += factor * o.grad[i];
  });
}

}  // namespace transferattn
