#pragma once

// Tape-based reverse-mode automatic differentiation over emcomm::Tensor.
//
// A Tape owns every intermediate value produced during one forward pass. Ops
// are appended in execution order, so the tape is topologically sorted by
// construction and backward() is a single reverse sweep.

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "emcomm/tensor.hpp"

namespace emcomm::ad {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t size() const { return value().size(); }
  std::size_t rank() const { return value().rank(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  bool needs_grad() const;
};

class Tape {
 public:
  using Backward = std::function<void(const std::vector<double>& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) {
    value.set_requires_grad(false);
    return push(std::move(value), false, nullptr, nullptr);
  }
  Var constant(double v) { return constant(Tensor::scalar(v)); }

  /// Leaf bound to a persistent tensor; backward() accumulates into
  /// `param.grad` when `param.requires_grad` is set.
  Var param(Tensor& param) {
    Tensor copy(param.shape, param.data);
    return push(std::move(copy), param.requires_grad, nullptr,
                param.requires_grad ? &param : nullptr);
  }

  /// Free-standing differentiable leaf; read its gradient with grad().
  Var leaf(Tensor value) {
    value.set_requires_grad(false);
    return push(std::move(value), true, nullptr, nullptr);
  }

  /// Appends the result of a primitive op. `fn` is dropped when no input
  /// needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward fn) {
    bool needs = false;
    for (const Var& v : inputs) needs = needs || v.needs_grad();
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr, nullptr);
  }
  Var record(Tensor value, std::span<const Var> inputs, Backward fn) {
    bool needs = false;
    for (const Var& v : inputs) needs = needs || v.needs_grad();
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr, nullptr);
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  /// Gradient accumulator for node `id`, zero-initialized on first use.
  std::vector<double>& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }

  /// Gradient of `v` after backward(); all zeros when nothing reached it.
  std::vector<double> grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.empty()) return std::vector<double>(n.value.size(), 0.0);
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }
  std::size_t visited_ops() const { return visited_; }

  void backward(Var loss) {
    if (loss.tape != this) throw ContractError("backward: loss recorded on another tape");
    if (loss.size() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " +
                          shape_str(loss.shape()));
    }
    if (done_) throw ContractError("backward: tape already consumed");
    done_ = true;
    if (!nodes_[loss.id].needs_grad) return;
    grad_buffer(loss.id)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.fn) {
        n.fn(n.grad);
        ++visited_;
      }
      if (n.sink != nullptr) {
        for (std::size_t j = 0; j < n.grad.size(); ++j) n.sink->grad[j] += n.grad[j];
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    Backward fn;
    Tensor* sink = nullptr;
    bool needs_grad = false;
  };

  Var push(Tensor value, bool needs, Backward fn, Tensor* sink) {
    if (!value.all_finite()) {
      throw NumericError("non-finite value produced at tape node " +
                         std::to_string(nodes_.size()) + " with shape " +
                         shape_str(value.shape));
    }
    nodes_.push_back(Node{std::move(value), {}, std::move(fn), sink, needs});
    return Var{this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;
  std::size_t visited_ = 0;
  bool done_ = false;
};

inline const Tensor& Var::value() const { return tape->value(id); }
inline bool Var::needs_grad() const { return tape->needs_grad(id); }

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) {
    throw ContractError("operands recorded on different tapes");
  }
  return *a.tape;
}

inline std::size_t check_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(s));
  }
  return axis;
}

// Splits a shape around `axis` into (outer, n, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};
inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - small.size());
}

template <typename F, typename DF>
Var unary(Var x, F f, DF df) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  Tensor out(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const std::size_t xid = x.id;
  Var y{&t, 0};
  y = t.record(std::move(out), {x}, [&t, xid, df, yid = t.size()](const std::vector<double>& g) {
    const Tensor& xv = t.value(xid);
    const Tensor& yv = t.value(yid);
    auto& gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
  });
  return y;
}

enum class BinaryKind { add, sub, mul };

inline Var binary(Var a, Var b, BinaryKind kind) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool b_small = is_suffix(bv.shape, av.shape);
  const bool a_small = !b_small && is_suffix(av.shape, bv.shape);
  if (!b_small && !a_small) {
    throw DimensionError("incompatible shapes " + shape_str(av.shape) + " and " +
                         shape_str(bv.shape));
  }
  const Shape out_shape = b_small ? av.shape : bv.shape;
  const std::size_t na = av.size(), nb = bv.size();
  const std::size_t n = std::max(na, nb);
  Tensor out(out_shape);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[i % na], y = bv[i % nb];
    out[i] = kind == BinaryKind::add ? x + y : kind == BinaryKind::sub ? x - y : x * y;
  }
  return t.record(std::move(out), {a, b},
                  [&t, aid = a.id, bid = b.id, na, nb, kind](const std::vector<double>& g) {
                    const std::size_t n = g.size();
                    if (t.needs_grad(aid)) {
                      auto& ga = t.grad_buffer(aid);
                      const Tensor& bv = t.value(bid);
                      for (std::size_t i = 0; i < n; ++i) {
                        ga[i % na] += kind == BinaryKind::mul ? g[i] * bv[i % nb] : g[i];
                      }
                    }
                    if (t.needs_grad(bid)) {
                      auto& gb = t.grad_buffer(bid);
                      const Tensor& av = t.value(aid);
                      for (std::size_t i = 0; i < n; ++i) {
                        gb[i % nb] += kind == BinaryKind::add   ? g[i]
                                      : kind == BinaryKind::sub ? -g[i]
                                                                : g[i] * av[i % na];
                      }
                    }
                  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// [m x k] * [k x n] -> [m x n].
inline Var matmul(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(av.shape) + " by " +
                         shape_str(bv.shape));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out(Shape{m, n});
  detail::MutMap(out.data.data(), m, n).noalias() =
      detail::ConstMap(av.data.data(), m, k) * detail::ConstMap(bv.data.data(), k, n);
  return t.record(std::move(out), {a, b},
                  [&t, aid = a.id, bid = b.id, m, k, n](const std::vector<double>& g) {
                    detail::ConstMap G(g.data(), m, n);
                    if (t.needs_grad(aid)) {
                      detail::MutMap(t.grad_buffer(aid).data(), m, k).noalias() +=
                          G * detail::ConstMap(t.value(bid).data.data(), k, n).transpose();
                    }
                    if (t.needs_grad(bid)) {
                      detail::MutMap(t.grad_buffer(bid).data(), k, n).noalias() +=
                          detail::ConstMap(t.value(aid).data.data(), m, k).transpose() * G;
                    }
                  });
}

/// Batched product: [B x m x k] * [B x k x n], or [B x n x k] when
/// `transpose_b` is set.
inline Var bmm(Var a, Var b, bool transpose_b = false) {
  Tape& t = detail::tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool ok = av.rank() == 3 && bv.rank() == 3 && av.dim(0) == bv.dim(0) &&
                  av.dim(2) == bv.dim(transpose_b ? 2 : 1);
  if (!ok) {
    throw DimensionError("bmm: cannot multiply " + shape_str(av.shape) + " by " +
                         shape_str(bv.shape) + (transpose_b ? " (transposed)" : ""));
  }
  const std::size_t batch = av.dim(0), m = av.dim(1), k = av.dim(2);
  const std::size_t n = bv.dim(transpose_b ? 1 : 2);
  Tensor out(Shape{batch, m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    detail::ConstMap A(av.data.data() + i * m * k, m, k);
    detail::MutMap C(out.data.data() + i * m * n, m, n);
    if (transpose_b) {
      C.noalias() = A * detail::ConstMap(bv.data.data() + i * n * k, n, k).transpose();
    } else {
      C.noalias() = A * detail::ConstMap(bv.data.data() + i * k * n, k, n);
    }
  }
  return t.record(
      std::move(out), {a, b},
      [&t, aid = a.id, bid = b.id, batch, m, k, n, transpose_b](const std::vector<double>& g) {
        const bool ga_on = t.needs_grad(aid), gb_on = t.needs_grad(bid);
        const double* ad = t.value(aid).data.data();
        const double* bd = t.value(bid).data.data();
        double* ga = ga_on ? t.grad_buffer(aid).data() : nullptr;
        double* gb = gb_on ? t.grad_buffer(bid).data() : nullptr;
        for (std::size_t i = 0; i < batch; ++i) {
          detail::ConstMap G(g.data() + i * m * n, m, n);
          detail::ConstMap A(ad + i * m * k, m, k);
          if (transpose_b) {
            detail::ConstMap B(bd + i * n * k, n, k);
            if (ga_on) detail::MutMap(ga + i * m * k, m, k).noalias() += G * B;
            if (gb_on) detail::MutMap(gb + i * n * k, n, k).noalias() += G.transpose() * A;
          } else {
            detail::ConstMap B(bd + i * k * n, k, n);
            if (ga_on) detail::MutMap(ga + i * m * k, m, k).noalias() += G * B.transpose();
            if (gb_on) detail::MutMap(gb + i * k * n, k, n).noalias() += A.transpose() * G;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise

/// Elementwise sum; one operand may broadcast over the other's leading dims.
inline Var add(Var a, Var b) { return detail::binary(a, b, detail::BinaryKind::add); }
inline Var sub(Var a, Var b) { return detail::binary(a, b, detail::BinaryKind::sub); }
inline Var mul(Var a, Var b) { return detail::binary(a, b, detail::BinaryKind::mul); }

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

inline Var scale(Var x, double c) {
  return detail::unary(x, [c](double v) { return c * v; },
                       [c](double, double) { return c; });
}
inline Var operator-(Var x) { return scale(x, -1.0); }

inline Var tanh(Var x) {
  return detail::unary(x, [](double v) { return std::tanh(v); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(Var x) {
  return detail::unary(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                       [](double, double y) { return y * (1.0 - y); });
}

inline Var exp(Var x) {
  return detail::unary(x, [](double v) { return std::exp(v); },
                       [](double, double y) { return y; });
}

inline Var log(Var x) {
  return detail::unary(x, [](double v) { return std::log(v); },
                       [](double v, double) { return 1.0 / v; });
}

/// log(max(x, floor)); the gradient is zero where the floor is active.
inline Var log_floored(Var x, double floor) {
  return detail::unary(x, [floor](double v) { return std::log(std::max(v, floor)); },
                       [floor](double v, double) { return v > floor ? 1.0 / v : 0.0; });
}

namespace detail {
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;
}  // namespace detail

/// gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::tanh(detail::kGeluC * (x + detail::kGeluA * x * x * x)));
}

inline Var gelu(Var x) {
  return detail::unary(x, gelu_value, [](double v, double) {
    const double u = detail::kGeluC * (v + detail::kGeluA * v * v * v);
    const double th = std::tanh(u);
    const double du = detail::kGeluC * (1.0 + 3.0 * detail::kGeluA * v * v);
    return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
  });
}

// ---------------------------------------------------------------------------
// Normalizations and reductions

inline Var softmax(Var x, std::size_t axis) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  detail::check_axis(xv.shape, axis, "softmax");
  const auto s = detail::split_at(xv.shape, axis);
  Tensor out(xv.shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < s.n; ++j) mx = std::max(mx, xv[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) {
        const double e = std::exp(xv[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] /= total;
    }
  }
  const std::size_t yid = t.size();
  return t.record(std::move(out), {x}, [&t, xid = x.id, yid, s](const std::vector<double>& g) {
    const Tensor& y = t.value(yid);
    auto& gx = t.grad_buffer(xid);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.n; ++j) dot += g[base + j * s.inner] * y[base + j * s.inner];
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t i = base + j * s.inner;
          gx[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

/// Numerically stable log(softmax(x)) along `axis`.
inline Var log_softmax(Var x, std::size_t axis) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  detail::check_axis(xv.shape, axis, "log_softmax");
  const auto s = detail::split_at(xv.shape, axis);
  Tensor out(xv.shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < s.n; ++j) mx = std::max(mx, xv[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.n; ++j) total += std::exp(xv[base + j * s.inner] - mx);
      const double lse = mx + std::log(total);
      for (std::size_t j = 0; j < s.n; ++j) out[base + j * s.inner] = xv[base + j * s.inner] - lse;
    }
  }
  const std::size_t yid = t.size();
  return t.record(std::move(out), {x}, [&t, xid = x.id, yid, s](const std::vector<double>& g) {
    const Tensor& y = t.value(yid);
    auto& gx = t.grad_buffer(xid);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.n * s.inner + in;
        double gsum = 0.0;
        for (std::size_t j = 0; j < s.n; ++j) gsum += g[base + j * s.inner];
        for (std::size_t j = 0; j < s.n; ++j) {
          const std::size_t i = base + j * s.inner;
          gx[i] += g[i] - std::exp(y[i]) * gsum;
        }
      }
    }
  });
}

/// Normalizes each row of the last axis to zero mean and unit variance.
inline Var layer_norm(Var x, double eps = 1e-5) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t n = xv.shape.back();
  const std::size_t rows = xv.size() / n;
  Tensor out(xv.shape);
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (row[j] - mu) * inv_std[r];
  }
  const std::size_t yid = t.size();
  return t.record(std::move(out), {x},
                  [&t, xid = x.id, yid, n, rows, inv = std::move(inv_std)](const std::vector<double>& g) {
                    const Tensor& y = t.value(yid);
                    auto& gx = t.grad_buffer(xid);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double gm = 0.0, gy = 0.0;
                      for (std::size_t j = 0; j < n; ++j) {
                        gm += g[r * n + j];
                        gy += g[r * n + j] * y[r * n + j];
                      }
                      gm /= static_cast<double>(n);
                      gy /= static_cast<double>(n);
                      for (std::size_t j = 0; j < n; ++j) {
                        const std::size_t i = r * n + j;
                        gx[i] += inv[r] * (g[i] - gm - y[i] * gy);
                      }
                    }
                  });
}

inline Var sum(Var x) {
  Tape& t = *x.tape;
  double total = 0.0;
  for (double v : x.value().data) total += v;
  return t.record(Tensor::scalar(total), {x}, [&t, xid = x.id](const std::vector<double>& g) {
    auto& gx = t.grad_buffer(xid);
    for (double& v : gx) v += g[0];
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

/// Sums out `axis`, removing it from the shape.
inline Var sum(Var x, std::size_t axis) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  detail::check_axis(xv.shape, axis, "sum");
  const auto s = detail::split_at(xv.shape, axis);
  Shape out_shape = xv.shape;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(out_shape);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.n; ++j)
      for (std::size_t in = 0; in < s.inner; ++in)
        out[o * s.inner + in] += xv[(o * s.n + j) * s.inner + in];
  return t.record(std::move(out), {x}, [&t, xid = x.id, s](const std::vector<double>& g) {
    auto& gx = t.grad_buffer(xid);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t j = 0; j < s.n; ++j)
        for (std::size_t in = 0; in < s.inner; ++in)
          gx[(o * s.n + j) * s.inner + in] += g[o * s.inner + in];
  });
}

inline Var mean(Var x, std::size_t axis) {
  const double n = static_cast<double>(x.value().shape.at(axis));
  return scale(sum(x, axis), 1.0 / n);
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var reshape(Var x, Shape shape) {
  Tape& t = *x.tape;
  if (shape_size(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  Tensor out(std::move(shape), x.value().data);
  return t.record(std::move(out), {x}, [&t, xid = x.id](const std::vector<double>& g) {
    auto& gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

inline Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  Tape& t = *parts[0].tape;
  const Shape& first = parts[0].shape();
  detail::check_axis(first, axis, "concat");
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    Shape s = p.shape();
    if (p.tape != &t || s.size() != first.size()) {
      throw DimensionError("concat: incompatible input " + shape_str(s));
    }
    widths.push_back(s[axis]);
    out_shape[axis] += s[axis];
    s[axis] = first[axis];
    if (s != first) {
      throw DimensionError("concat: shapes " + shape_str(first) + " and " +
                           shape_str(p.shape()) + " differ off axis " + std::to_string(axis));
    }
  }
  const auto s = detail::split_at(out_shape, axis);
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    const std::size_t w = widths[k];
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(pv.data.data() + o * w * s.inner, w * s.inner,
                  out.data.data() + (o * s.n + offset) * s.inner);
    offset += w;
  }
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id);
  return t.record(std::move(out), parts,
                  [&t, ids, widths, s](const std::vector<double>& g) {
                    std::size_t offset = 0;
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      const std::size_t w = widths[k];
                      if (t.needs_grad(ids[k])) {
                        auto& gp = t.grad_buffer(ids[k]);
                        for (std::size_t o = 0; o < s.outer; ++o)
                          for (std::size_t i = 0; i < w * s.inner; ++i)
                            gp[o * w * s.inner + i] += g[(o * s.n + offset) * s.inner + i];
                      }
                      offset += w;
                    }
                  });
}

inline Var concat(std::initializer_list<Var> parts, std::size_t axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

/// Elements [start, start + len) along `axis`.
inline Var slice(Var x, std::size_t axis, std::size_t start, std::size_t len) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  detail::check_axis(xv.shape, axis, "slice");
  if (start + len > xv.shape[axis]) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") exceeds axis of " +
                         shape_str(xv.shape));
  }
  const auto s = detail::split_at(xv.shape, axis);
  Shape out_shape = xv.shape;
  out_shape[axis] = len;
  Tensor out(out_shape);
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xv.data.data() + (o * s.n + start) * s.inner, len * s.inner,
                out.data.data() + o * len * s.inner);
  return t.record(std::move(out), {x}, [&t, xid = x.id, s, start, len](const std::vector<double>& g) {
    auto& gx = t.grad_buffer(xid);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < len * s.inner; ++i)
        gx[(o * s.n + start) * s.inner + i] += g[o * len * s.inner + i];
  });
}

/// Reorders axes: output axis i is input axis perm[i].
inline Var permute(Var x, std::vector<std::size_t> perm) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  const std::size_t r = xv.rank();
  {
    std::vector<std::size_t> sorted = perm;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      if (sorted.size() != r || sorted[i] != i) {
        throw DimensionError("permute: invalid permutation for shape " + shape_str(xv.shape));
      }
    }
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * xv.shape[i];
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = xv.shape[perm[i]];
  // Source offset of every output element.
  std::vector<std::size_t> src(xv.size());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < src.size(); ++flat) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_strides[perm[i]];
    src[flat] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  Tensor out(out_shape);
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = xv[src[i]];
  return t.record(std::move(out), {x}, [&t, xid = x.id, src = std::move(src)](const std::vector<double>& g) {
    auto& gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < g.size(); ++i) gx[src[i]] += g[i];
  });
}

/// Inserts a new axis of extent `n` at `axis`, repeating the input along it.
inline Var expand(Var x, std::size_t axis, std::size_t n) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  if (axis > xv.rank()) throw DimensionError("expand: axis out of range for " + shape_str(xv.shape));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= xv.shape[i];
  for (std::size_t i = axis; i < xv.rank(); ++i) inner *= xv.shape[i];
  Shape out_shape = xv.shape;
  out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis), n);
  Tensor out(out_shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n; ++j)
      std::copy_n(xv.data.data() + o * inner, inner, out.data.data() + (o * n + j) * inner);
  return t.record(std::move(out), {x}, [&t, xid = x.id, outer, inner, n](const std::vector<double>& g) {
    auto& gx = t.grad_buffer(xid);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < inner; ++i) gx[o * inner + i] += g[(o * n + j) * inner + i];
  });
}

// ---------------------------------------------------------------------------
// Indexing

/// Row lookup: table [V x H], ids of length n -> [n x H].
inline Var embedding(Var table, std::span<const std::size_t> ids) {
  Tape& t = *table.tape;
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw DimensionError("embedding: table must be 2-D, got " + shape_str(tv.shape));
  const std::size_t rows = tv.dim(0), h = tv.dim(1);
  Tensor out(Shape{ids.size(), h});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows) {
      throw DimensionError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                           std::to_string(rows) + " rows");
    }
    std::copy_n(tv.data.data() + ids[i] * h, h, out.data.data() + i * h);
  }
  std::vector<std::size_t> keep(ids.begin(), ids.end());
  return t.record(std::move(out), {table}, [&t, tid = table.id, keep, h](const std::vector<double>& g) {
    auto& gt = t.grad_buffer(tid);
    for (std::size_t i = 0; i < keep.size(); ++i)
      for (std::size_t j = 0; j < h; ++j) gt[keep[i] * h + j] += g[i * h + j];
  });
}

/// Selects one entry of the last axis per row: out[r] = x[r, ids[r]].
inline Var pick(Var x, std::span<const std::size_t> ids) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw DimensionError("pick: scalar input");
  const std::size_t n = xv.shape.back();
  const std::size_t rows = xv.size() / n;
  if (ids.size() != rows) {
    throw DimensionError("pick: " + std::to_string(ids.size()) + " indices for " +
                         std::to_string(rows) + " rows of " + shape_str(xv.shape));
  }
  Shape out_shape(xv.shape.begin(), xv.shape.end() - 1);
  Tensor out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    if (ids[r] >= n) throw DimensionError("pick: index out of range");
    out[r] = xv[r * n + ids[r]];
  }
  std::vector<std::size_t> keep(ids.begin(), ids.end());
  return t.record(std::move(out), {x}, [&t, xid = x.id, keep, n](const std::vector<double>& g) {
    auto& gx = t.grad_buffer(xid);
    for (std::size_t r = 0; r < keep.size(); ++r) gx[r * n + keep[r]] += g[r];
  });
}

/// Copy of `x` as a constant; gradients do not flow through it.
inline Var detach(Var x) { return x.tape->constant(Tensor(x.shape(), x.value().data)); }

// ---------------------------------------------------------------------------
// Composites

/// x [..., k] * w [k x n] + b [n] -> [..., n].
inline Var linear(Var x, Var w, Var b) {
  const Shape in = x.shape();
  const std::size_t k = in.back();
  Shape out = in;
  out.back() = w.dim(1);
  Var flat = reshape(x, Shape{x.size() / k, k});
  return reshape(add(matmul(flat, w), b), out);
}

inline Var linear(Var x, Var w) {
  const Shape in = x.shape();
  const std::size_t k = in.back();
  Shape out = in;
  out.back() = w.dim(1);
  return reshape(matmul(reshape(x, Shape{x.size() / k, k}), w), out);
}

}  // namespace emcomm::ad
