#pragma once

// Dense f64 tensors and a reverse-mode tape.
//
// A Tape owns every value produced during one forward pass. Var is a cheap
// handle (tape pointer + node id). Operations whose inputs are all untracked
// store their value but record no adjoint, so evaluation-only passes never
// pay for the backward closures.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#ifdef LVAE_USE_BLAS
#include <cblas.h>
#endif

namespace lvae {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class Tensor {
 public:
  Tensor() : shape_{1}, data_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(numel_of(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (numel_of(shape_) != data_.size())
      throw ShapeError("tensor: shape " + to_string(shape_) + " does not match " +
                       std::to_string(data_.size()) + " values");
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  static Tensor vector(std::initializer_list<double> v) {
    return Tensor({v.size()}, std::vector<double>(v));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const noexcept { return data_.size(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item: tensor " + to_string(shape_) + " is not a scalar");
    return data_[0];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const { return Tensor(std::move(s), data_); }

  bool operator==(const Tensor&) const = default;

 private:
  void check_shape() const {
    if (shape_.empty()) throw ShapeError("tensor: empty shape");
    for (auto d : shape_)
      if (d == 0) throw ShapeError("tensor: zero extent in shape " + to_string(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
};

enum class OpKind {
  add, sub, mul, matmul, conv2d, conv_transpose2d, relu, sigmoid, exp, log,
  square, sum, mean, reshape, slice, concat, clamp
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::matmul: return "matmul";
    case OpKind::conv2d: return "conv2d";
    case OpKind::conv_transpose2d: return "conv_transpose2d";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::square: return "square";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::reshape: return "reshape";
    case OpKind::slice: return "slice";
    case OpKind::concat: return "concat";
    case OpKind::clamp: return "clamp";
  }
  return "?";
}

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool tracked() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Accumulates adjoints during a backward sweep; indexed by node id.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(const Tape* tape, std::size_t n) : tape_(tape), grads_(n), present_(n, false) {}

  // Zero tensor for tracked leaves that the loss does not reach.
  Tensor grad(const Var& v) const;
  bool has(std::size_t id) const { return id < present_.size() && present_[id]; }

  Tensor& slot(std::size_t id, const Shape& shape) {
    if (!present_[id]) {
      grads_[id] = Tensor(shape, 0.0);
      present_[id] = true;
    }
    return grads_[id];
  }

  const Tensor* find(std::size_t id) const { return has(id) ? &grads_[id] : nullptr; }

 private:
  const Tape* tape_ = nullptr;
  std::vector<Tensor> grads_;
  std::vector<bool> present_;
};

class Tape {
 public:
  // Backward rule: receives d(loss)/d(output) and accumulates into the sink.
  using Adjoint = std::function<void(const Tensor& gout, Gradients& sink)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), false, {}, {}); }
  Var leaf(Tensor value) { return push(std::move(value), true, {}, {}); }

  // Records an op output. The adjoint is dropped when no input is tracked.
  Var record(Tensor value, std::vector<std::size_t> inputs, Adjoint adjoint) {
    bool any = false;
    for (auto i : inputs) {
      if (i >= nodes_.size()) throw std::logic_error("tape: input node does not precede output");
      any = any || nodes_[i].tracked;
    }
    if (!any) return push(std::move(value), false, {}, {});
    return push(std::move(value), true, std::move(inputs), std::move(adjoint));
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool tracked(std::size_t id) const { return nodes_.at(id).tracked; }
  bool is_leaf(std::size_t id) const { return nodes_.at(id).inputs.empty(); }
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }

  Gradients backward(const Var& loss) const {
    if (&loss.tape() != this) throw std::invalid_argument("backward: loss belongs to another tape");
    const Tensor& lv = value(loss.id());
    if (lv.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + to_string(lv.shape()));
    if (!tracked(loss.id())) throw std::invalid_argument("backward: loss is not tracked");
    Gradients g(this, nodes_.size());
    g.slot(loss.id(), lv.shape())[0] = 1.0;
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      const Node& n = nodes_[id];
      if (!n.adjoint) continue;
      const Tensor* gout = g.find(id);
      if (!gout) continue;
      n.adjoint(*gout, g);
    }
    return g;
  }

 private:
  struct Node {
    Tensor value;
    bool tracked = false;
    std::vector<std::size_t> inputs;
    Adjoint adjoint;
  };

  Var push(Tensor v, bool tracked, std::vector<std::size_t> inputs, Adjoint adj) {
    nodes_.push_back(Node{std::move(v), tracked, std::move(inputs), std::move(adj)});
    return Var(this, nodes_.size() - 1);
  }

  // deque keeps references returned by value() stable across push_back.
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::tracked() const { return tape_->tracked(id_); }

inline Tensor Gradients::grad(const Var& v) const {
  if (has(v.id())) return grads_[v.id()];
  return Tensor(v.value().shape(), 0.0);
}

namespace detail {

inline void same_tape(const Var& a, const Var& b, const char* op) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Shape of a binary elementwise result. The smaller operand must be a
// scalar or match the trailing dimensions of the larger one.
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return a;
  std::size_t na = numel_of(a), nb = numel_of(b);
  if (nb == 1 && na >= 1) return a;
  if (na == 1) return b;
  if (na >= nb && is_suffix(b, a)) return a;
  if (nb > na && is_suffix(a, b)) return b;
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

inline void accumulate(Gradients& g, const Var& v, const Tensor& delta) {
  if (!v.tracked()) return;
  Tensor& s = g.slot(v.id(), v.value().shape());
  auto sd = s.data();
  auto dd = delta.data();
  for (std::size_t i = 0; i < sd.size(); ++i) sd[i] += dd[i];
}

// C[m,n] (+)= op(A) * op(B); A is m x k (or k x m when transposed), etc.
inline void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k,
                 const double* a, const double* b, double* c, bool accumulate_into) {
#ifdef LVAE_USE_BLAS
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), 1.0, a, static_cast<int>(ta ? m : k), b,
              static_cast<int>(tb ? k : n), accumulate_into ? 1.0 : 0.0, c, static_cast<int>(n));
  return;
#endif
  if (!accumulate_into) std::fill(c, c + m * n, 0.0);
  if (!ta && !tb) {
    for (std::size_t i = 0; i < m; ++i) {
      double* ci = c + i * n;
      const double* ai = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ai[p];
        const double* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else if (ta && !tb) {
    // A stored k x m
    for (std::size_t p = 0; p < k; ++p) {
      const double* ap = a + p * m;
      const double* bp = b + p * n;
      for (std::size_t i = 0; i < m; ++i) {
        const double av = ap[i];
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  } else if (!ta && tb) {
    // B stored n x k
    for (std::size_t i = 0; i < m; ++i) {
      const double* ai = a + i * k;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double* bj = b + j * k;
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
        ci[j] += s;
      }
    }
  } else {
    throw std::logic_error("gemm: double transpose unsupported");
  }
}

inline std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                            const char* op) {
  if (in + 2 * pad < k)
    throw ShapeError(std::string(op) + ": kernel " + std::to_string(k) + " larger than padded input " +
                     std::to_string(in + 2 * pad));
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with trailing-dimension broadcasting.

template <class Fwd, class DA, class DB>
Var binary_op(const Var& a, const Var& b, const char* name, Fwd fwd, DA da, DB db) {
  detail::same_tape(a, b, name);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Shape out_shape = detail::broadcast_shape(av.shape(), bv.shape(), name);
  Tensor out(out_shape);
  const std::size_t na = av.numel(), nb = bv.numel();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(av[i % na], bv[i % nb]);
  Tape& t = a.tape();
  return t.record(std::move(out), {a.id(), b.id()}, [a, b, da, db](const Tensor& g, Gradients& sink) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const std::size_t na = av.numel(), nb = bv.numel();
    if (a.tracked()) {
      Tensor ga(av.shape());
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i % na] += g[i] * da(av[i % na], bv[i % nb]);
      detail::accumulate(sink, a, ga);
    }
    if (b.tracked()) {
      Tensor gb(bv.shape());
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i % nb] += g[i] * db(av[i % na], bv[i % nb]);
      detail::accumulate(sink, b, gb);
    }
  });
}

inline Var add(const Var& a, const Var& b) {
  return binary_op(a, b, "add", [](double x, double y) { return x + y; },
                   [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Var sub(const Var& a, const Var& b) {
  return binary_op(a, b, "sub", [](double x, double y) { return x - y; },
                   [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Var mul(const Var& a, const Var& b) {
  return binary_op(a, b, "mul", [](double x, double y) { return x * y; },
                   [](double, double y) { return y; }, [](double x, double) { return x; });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops.

template <class Fwd, class Deriv>
Var unary_op(const Var& a, Fwd fwd, Deriv deriv) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = fwd(av[i]);
  Tape& t = a.tape();
  const std::size_t self = t.size();
  return t.record(std::move(out), {a.id()}, [a, deriv, self](const Tensor& g, Gradients& sink) {
    const Tensor& x = a.value();
    const Tensor& y = a.tape().value(self);
    Tensor ga(x.shape());
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] = g[i] * deriv(x[i], y[i]);
    detail::accumulate(sink, a, ga);
  });
}

inline Var relu(const Var& a) {
  return unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var sigmoid(const Var& a) {
  return unary_op(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var exp(const Var& a) {
  return unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  for (double x : a.value().data())
    if (!(x > 0.0)) throw DomainError("log: non-positive input " + std::to_string(x));
  return unary_op(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var square(const Var& a) {
  return unary_op(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// Gradient passes only where lo < x < hi.
inline Var clamp(const Var& a, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  return unary_op(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                  [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions.

inline Var sum(const Var& a) {
  const Tensor& av = a.value();
  double s = 0.0;
  for (double x : av.data()) s += x;
  return a.tape().record(Tensor::scalar(s), {a.id()}, [a](const Tensor& g, Gradients& sink) {
    detail::accumulate(sink, a, Tensor(a.value().shape(), g[0]));
  });
}

inline Var mean(const Var& a) {
  const Tensor& av = a.value();
  const double n = static_cast<double>(av.numel());
  double s = 0.0;
  for (double x : av.data()) s += x;
  return a.tape().record(Tensor::scalar(s / n), {a.id()}, [a, n](const Tensor& g, Gradients& sink) {
    detail::accumulate(sink, a, Tensor(a.value().shape(), g[0] / n));
  });
}

// ---------------------------------------------------------------------------
// Shape ops.

inline Var reshape(const Var& a, Shape shape) {
  const Tensor& av = a.value();
  if (numel_of(shape) != av.numel())
    throw ShapeError("reshape: cannot view " + to_string(av.shape()) + " as " + to_string(shape));
  return a.tape().record(Tensor(std::move(shape), av.storage()), {a.id()}, [a](const Tensor& g, Gradients& sink) {
    detail::accumulate(sink, a, g.reshaped(a.value().shape()));
  });
}

// Half-open range [begin, end) along `axis`.
inline Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  if (axis >= av.rank() || begin >= end || end > av.dim(axis))
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " invalid for " + to_string(av.shape()));
  const Shape& s = av.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = end - begin, full = s[axis];
  Shape os = s;
  os[axis] = len;
  Tensor out(os);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(av.data().begin() + static_cast<std::ptrdiff_t>((o * full + begin) * inner), len * inner,
                out.data().begin() + static_cast<std::ptrdiff_t>(o * len * inner));
  return a.tape().record(std::move(out), {a.id()},
                         [a, outer, inner, len, full, begin](const Tensor& g, Gradients& sink) {
                           Tensor ga(a.value().shape());
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t i = 0; i < len * inner; ++i)
                               ga[(o * full + begin) * inner + i] = g[o * len * inner + i];
                           detail::accumulate(sink, a, ga);
                         });
}

inline Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + to_string(s0));
  std::size_t total = 0;
  for (const Var& p : parts) {
    detail::same_tape(parts[0], p, "concat");
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == s0[i];
    if (!ok) throw ShapeError("concat: shape " + to_string(s) + " incompatible with " + to_string(s0));
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  Shape os = s0;
  os[axis] = total;
  Tensor out(os);
  std::vector<std::size_t> ids;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const std::size_t len = p.shape()[axis];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < len * inner; ++i) out[(o * total + off) * inner + i] = p.value()[o * len * inner + i];
    off += len;
    ids.push_back(p.id());
  }
  std::vector<Var> keep(parts.begin(), parts.end());
  return parts[0].tape().record(std::move(out), std::move(ids),
                                [keep, axis, outer, inner, total](const Tensor& g, Gradients& sink) {
                                  std::size_t off = 0;
                                  for (const Var& p : keep) {
                                    const std::size_t len = p.shape()[axis];
                                    if (p.tracked()) {
                                      Tensor gp(p.shape());
                                      for (std::size_t o = 0; o < outer; ++o)
                                        for (std::size_t i = 0; i < len * inner; ++i)
                                          gp[o * len * inner + i] = g[(o * total + off) * inner + i];
                                      detail::accumulate(sink, p, gp);
                                    }
                                    off += len;
                                  }
                                });
}

inline Var concat(std::initializer_list<Var> parts, std::size_t axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

// ---------------------------------------------------------------------------
// Linear algebra.

inline Var matmul(const Var& a, const Var& b) {
  detail::same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw ShapeError("matmul: incompatible shapes " + to_string(av.shape()) + " and " + to_string(bv.shape()));
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  detail::gemm(false, false, m, n, k, av.data().data(), bv.data().data(), out.data().data(), false);
  return a.tape().record(std::move(out), {a.id(), b.id()}, [a, b, m, k, n](const Tensor& g, Gradients& sink) {
    if (a.tracked()) {
      Tensor& ga = sink.slot(a.id(), a.value().shape());
      detail::gemm(false, true, m, k, n, g.data().data(), b.value().data().data(), ga.data().data(), true);
    }
    if (b.tracked()) {
      Tensor& gb = sink.slot(b.id(), b.value().shape());
      detail::gemm(true, false, k, n, m, a.value().data().data(), g.data().data(), gb.data().data(), true);
    }
  });
}

struct ConvAttrs {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// x: [N, C, H, W], w: [O, C, kh, kw], optional bias: [O] -> [N, O, Ho, Wo]
inline Var conv2d(const Var& x, const Var& w, const Var* bias, ConvAttrs attrs) {
  detail::same_tape(x, w, "conv2d");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (attrs.stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (xv.rank() != 4 || wv.rank() != 4 || xv.dim(1) != wv.dim(1))
    throw ShapeError("conv2d: incompatible input " + to_string(xv.shape()) + " and kernel " + to_string(wv.shape()));
  if (bias && (bias->value().numel() != wv.dim(0)))
    throw ShapeError("conv2d: bias " + to_string(bias->shape()) + " does not match " + std::to_string(wv.dim(0)) +
                     " output channels");
  const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t O = wv.dim(0), KH = wv.dim(2), KW = wv.dim(3);
  const std::size_t S = attrs.stride, P = attrs.padding;
  const std::size_t Ho = detail::conv_out(H, KH, S, P, "conv2d"), Wo = detail::conv_out(W, KW, S, P, "conv2d");
  Tensor out({N, O, Ho, Wo});
  const double* xp = xv.data().data();
  const double* wp = wv.data().data();
  double* op = out.data().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      double* plane = op + (n * O + o) * Ho * Wo;
      if (bias) std::fill(plane, plane + Ho * Wo, bias->value()[o]);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < KH; ++ky)
          for (std::size_t kx = 0; kx < KW; ++kx) {
            const double wk = wp[((o * C + c) * KH + ky) * KW + kx];
            for (std::size_t y = 0; y < Ho; ++y) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * S + ky) - static_cast<std::ptrdiff_t>(P);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              const double* row = xp + ((n * C + c) * H + static_cast<std::size_t>(iy)) * W;
              for (std::size_t xo = 0; xo < Wo; ++xo) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xo * S + kx) - static_cast<std::ptrdiff_t>(P);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                plane[y * Wo + xo] += wk * row[ix];
              }
            }
          }
    }
  std::vector<std::size_t> ids{x.id(), w.id()};
  Var b = bias ? *bias : Var();
  if (bias) ids.push_back(bias->id());
  return x.tape().record(
      std::move(out), std::move(ids),
      [x, w, b, N, C, H, W, O, KH, KW, S, P, Ho, Wo](const Tensor& g, Gradients& sink) {
        const double* xp = x.value().data().data();
        const double* wp = w.value().data().data();
        Tensor gx(x.value().shape()), gw(w.value().shape());
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t o = 0; o < O; ++o) {
            const double* gplane = g.data().data() + (n * O + o) * Ho * Wo;
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t ky = 0; ky < KH; ++ky)
                for (std::size_t kx = 0; kx < KW; ++kx) {
                  const std::size_t widx = ((o * C + c) * KH + ky) * KW + kx;
                  const double wk = wp[widx];
                  double acc = 0.0;
                  for (std::size_t y = 0; y < Ho; ++y) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * S + ky) - static_cast<std::ptrdiff_t>(P);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                    const std::size_t rowoff = ((n * C + c) * H + static_cast<std::size_t>(iy)) * W;
                    for (std::size_t xo = 0; xo < Wo; ++xo) {
                      const std::ptrdiff_t ix =
                          static_cast<std::ptrdiff_t>(xo * S + kx) - static_cast<std::ptrdiff_t>(P);
                      if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                      const double gv = gplane[y * Wo + xo];
                      acc += gv * xp[rowoff + static_cast<std::size_t>(ix)];
                      gx[rowoff + static_cast<std::size_t>(ix)] += gv * wk;
                    }
                  }
                  gw[widx] += acc;
                }
          }
        detail::accumulate(sink, x, gx);
        detail::accumulate(sink, w, gw);
        if (b.valid() && b.tracked()) {
          Tensor gb(b.value().shape());
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < O; ++o)
              for (std::size_t i = 0; i < Ho * Wo; ++i) gb[o] += g[(n * O + o) * Ho * Wo + i];
          detail::accumulate(sink, b, gb);
        }
      });
}

// x: [N, C, H, W], w: [C, O, kh, kw], optional bias: [O]
// Output extent: (H - 1) * stride - 2 * padding + kh.
inline Var conv_transpose2d(const Var& x, const Var& w, const Var* bias, ConvAttrs attrs) {
  detail::same_tape(x, w, "conv_transpose2d");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (attrs.stride < 1) throw ShapeError("conv_transpose2d: stride must be >= 1");
  if (xv.rank() != 4 || wv.rank() != 4 || xv.dim(1) != wv.dim(0))
    throw ShapeError("conv_transpose2d: incompatible input " + to_string(xv.shape()) + " and kernel " +
                     to_string(wv.shape()));
  if (bias && bias->value().numel() != wv.dim(1))
    throw ShapeError("conv_transpose2d: bias " + to_string(bias->shape()) + " does not match " +
                     std::to_string(wv.dim(1)) + " output channels");
  const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t O = wv.dim(1), KH = wv.dim(2), KW = wv.dim(3);
  const std::size_t S = attrs.stride, P = attrs.padding;
  if ((H - 1) * S + KH <= 2 * P || (W - 1) * S + KW <= 2 * P)
    throw ShapeError("conv_transpose2d: padding " + std::to_string(P) + " leaves empty output for " +
                     to_string(xv.shape()));
  const std::size_t Ho = (H - 1) * S + KH - 2 * P, Wo = (W - 1) * S + KW - 2 * P;
  Tensor out({N, O, Ho, Wo});
  const double* xp = xv.data().data();
  const double* wp = wv.data().data();
  double* op = out.data().data();
  if (bias)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o)
        std::fill(op + (n * O + o) * Ho * Wo, op + (n * O + o + 1) * Ho * Wo, bias->value()[o]);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t ky = 0; ky < KH; ++ky)
          for (std::size_t kx = 0; kx < KW; ++kx) {
            const double wk = wp[((c * O + o) * KH + ky) * KW + kx];
            for (std::size_t y = 0; y < H; ++y) {
              const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(y * S + ky) - static_cast<std::ptrdiff_t>(P);
              if (oy < 0 || oy >= static_cast<std::ptrdiff_t>(Ho)) continue;
              double* orow = op + ((n * O + o) * Ho + static_cast<std::size_t>(oy)) * Wo;
              const double* xrow = xp + ((n * C + c) * H + y) * W;
              for (std::size_t xi = 0; xi < W; ++xi) {
                const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(xi * S + kx) - static_cast<std::ptrdiff_t>(P);
                if (ox < 0 || ox >= static_cast<std::ptrdiff_t>(Wo)) continue;
                orow[ox] += wk * xrow[xi];
              }
            }
          }
  std::vector<std::size_t> ids{x.id(), w.id()};
  Var b = bias ? *bias : Var();
  if (bias) ids.push_back(bias->id());
  return x.tape().record(
      std::move(out), std::move(ids),
      [x, w, b, N, C, H, W, O, KH, KW, S, P, Ho, Wo](const Tensor& g, Gradients& sink) {
        const double* xp = x.value().data().data();
        const double* wp = w.value().data().data();
        const double* gp = g.data().data();
        Tensor gx(x.value().shape()), gw(w.value().shape());
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t o = 0; o < O; ++o)
              for (std::size_t ky = 0; ky < KH; ++ky)
                for (std::size_t kx = 0; kx < KW; ++kx) {
                  const std::size_t widx = ((c * O + o) * KH + ky) * KW + kx;
                  const double wk = wp[widx];
                  double acc = 0.0;
                  for (std::size_t y = 0; y < H; ++y) {
                    const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(y * S + ky) - static_cast<std::ptrdiff_t>(P);
                    if (oy < 0 || oy >= static_cast<std::ptrdiff_t>(Ho)) continue;
                    const double* grow = gp + ((n * O + o) * Ho + static_cast<std::size_t>(oy)) * Wo;
                    const std::size_t xoff = ((n * C + c) * H + y) * W;
                    for (std::size_t xi = 0; xi < W; ++xi) {
                      const std::ptrdiff_t ox =
                          static_cast<std::ptrdiff_t>(xi * S + kx) - static_cast<std::ptrdiff_t>(P);
                      if (ox < 0 || ox >= static_cast<std::ptrdiff_t>(Wo)) continue;
                      acc += grow[ox] * xp[xoff + xi];
                      gx[xoff + xi] += grow[ox] * wk;
                    }
                  }
                  gw[widx] += acc;
                }
        detail::accumulate(sink, x, gx);
        detail::accumulate(sink, w, gw);
        if (b.valid() && b.tracked()) {
          Tensor gb(b.value().shape());
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < O; ++o)
              for (std::size_t i = 0; i < Ho * Wo; ++i) gb[o] += g[(n * O + o) * Ho * Wo + i];
          detail::accumulate(sink, b, gb);
        }
      });
}

// ---------------------------------------------------------------------------
// Generic dispatch by kind, used where ops are enumerated (gradient sweeps).

struct OpAttrs {
  ConvAttrs conv;
  std::size_t axis = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
  Shape shape;
  double lo = 0.0;
  double hi = 0.0;
};

inline Var apply(OpKind kind, std::span<const Var> in, const OpAttrs& attrs = {}) {
  auto need = [&](std::size_t n) {
    if (in.size() < n)
      throw std::invalid_argument(std::string(op_name(kind)) + ": expected " + std::to_string(n) + " inputs");
  };
  switch (kind) {
    case OpKind::add: need(2); return add(in[0], in[1]);
    case OpKind::sub: need(2); return sub(in[0], in[1]);
    case OpKind::mul: need(2); return mul(in[0], in[1]);
    case OpKind::matmul: need(2); return matmul(in[0], in[1]);
    case OpKind::conv2d: need(2); return conv2d(in[0], in[1], in.size() > 2 ? &in[2] : nullptr, attrs.conv);
    case OpKind::conv_transpose2d:
      need(2);
      return conv_transpose2d(in[0], in[1], in.size() > 2 ? &in[2] : nullptr, attrs.conv);
    case OpKind::relu: need(1); return relu(in[0]);
    case OpKind::sigmoid: need(1); return sigmoid(in[0]);
    case OpKind::exp: need(1); return exp(in[0]);
    case OpKind::log: need(1); return log(in[0]);
    case OpKind::square: need(1); return square(in[0]);
    case OpKind::sum: need(1); return sum(in[0]);
    case OpKind::mean: need(1); return mean(in[0]);
    case OpKind::reshape: need(1); return reshape(in[0], attrs.shape);
    case OpKind::slice: need(1); return slice(in[0], attrs.axis, attrs.begin, attrs.end);
    case OpKind::concat: need(1); return concat(in, attrs.axis);
    case OpKind::clamp: need(1); return clamp(in[0], attrs.lo, attrs.hi);
  }
  throw std::invalid_argument("apply: unknown op kind");
}

// Convenience helpers built from the primitives above.
inline Var scale(const Var& a, double k) { return mul(a, a.tape().constant(Tensor::scalar(k))); }
inline Var add_scalar(const Var& a, double k) { return add(a, a.tape().constant(Tensor::scalar(k))); }

// ---------------------------------------------------------------------------
// Central finite-difference gradient check.

using MultiFunction = std::function<Var(Tape&, std::span<const Var>)>;
using ScalarFunction = std::function<Var(Tape&, const Var&)>;

// Max over all coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
inline double finite_difference_check(const MultiFunction& f, std::vector<Tensor> points, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_difference_check: step must be positive");
  auto eval = [&](const std::vector<Tensor>& pts) {
    Tape t;
    std::vector<Var> vs;
    vs.reserve(pts.size());
    for (const auto& p : pts) vs.push_back(t.constant(p));
    return f(t, vs).value().item();
  };
  std::vector<Tensor> analytic;
  {
    Tape t;
    std::vector<Var> vs;
    for (const auto& p : points) vs.push_back(t.leaf(p));
    Var loss = f(t, vs);
    Gradients g = t.backward(loss);
    for (const auto& v : vs) analytic.push_back(g.grad(v));
  }
  double worst = 0.0;
  for (std::size_t k = 0; k < points.size(); ++k) {
    for (std::size_t i = 0; i < points[k].numel(); ++i) {
      const double orig = points[k][i];
      points[k][i] = orig + step;
      const double fp = eval(points);
      points[k][i] = orig - step;
      const double fm = eval(points);
      points[k][i] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[k][i];
      const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

inline double finite_difference_check(const ScalarFunction& f, const Tensor& point, double step) {
  return finite_difference_check(
      [&f](Tape& t, std::span<const Var> v) { return f(t, v[0]); }, std::vector<Tensor>{point}, step);
}

}  // namespace lvae
