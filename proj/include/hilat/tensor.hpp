#pragma once

// Dense 2-D tensors with a define-by-run reverse-mode tape.
//
// A Tape owns every node created during one forward pass. Leaves are either
// constants or Parameters; every op records its parents and a closure that
// pushes the incoming gradient back to them. Tape::backward walks nodes in
// reverse creation order (a valid reverse topological order) and finally adds
// leaf gradients into the Parameters they came from.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <unordered_map>
#include <vector>

#include "hilat/error.hpp"
#include "hilat/rng.hpp"

namespace hilat {

// Row-major dense matrix of doubles. Vectors are n x 1 (column) or 1 x n.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), data_(std::move(values)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix value count does not match " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged initializer");
      std::size_t j = 0;
      for (double v : row) m(i, j++) = v;
      ++i;
    }
    return m;
  }

  static Matrix column(std::span<const double> values) {
    return Matrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }

  std::vector<double> col(std::size_t c) const {
    std::vector<double> out(rows_);
    for (std::size_t i = 0; i < rows_; ++i) out[i] = (*this)(i, c);
    return out;
  }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Matrix& operator+=(const Matrix& o) {
    if (!same_shape(o)) throw ShapeError("matrix += shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  std::string shape_str() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// A trainable (or frozen) tensor with its gradient accumulator.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}

  void zero_grad() {
    if (!grad.same_shape(value)) grad = Matrix(value.rows(), value.cols());
    grad.fill(0.0);
  }
};

inline std::atomic<bool>& finite_checks_flag() {
  static std::atomic<bool> flag{true};
  return flag;
}

// NaN/Inf detection at op boundaries; on by default.
inline void set_finite_checks(bool on) { finite_checks_flag().store(on); }
inline bool finite_checks() { return finite_checks_flag().load(); }

namespace testing {
// Fault injection for the gradient-check harness: replaces the tanh local
// derivative 1 - y^2 with 1 - y.
inline std::atomic<bool>& tanh_backward_fault() {
  static std::atomic<bool> flag{false};
  return flag;
}
}  // namespace testing

class Tape;

// Per-tape destination for leaf gradients, used when several tapes run
// concurrently against the same Parameters.
using GradSink = std::unordered_map<const Parameter*, Matrix>;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives and
// has not been reset.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self, const Matrix& grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var constant(Matrix m) { return push_leaf(std::move(m), nullptr, nullptr); }

  // Leaf referencing caller-owned storage; the matrix must outlive the tape.
  Var constant_ref(const Matrix& m) { return push_leaf({}, &m, nullptr); }

  // Leaf bound to a Parameter. Requires grad unless the parameter is frozen.
  Var param(Parameter& p) { return push_leaf({}, &p.value, p.frozen ? nullptr : &p); }

  // Leaf bound to a Parameter but never differentiated (read-only sharing).
  Var param_const(const Parameter& p) { return push_leaf({}, &p.value, nullptr); }

  Var record(const char* op, Matrix value, std::vector<std::size_t> parents, BackwardFn fn) {
    if (finite_checks() && !value.all_finite()) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
    bool needs = false;
    for (std::size_t p : parents) needs = needs || nodes_[p].requires_grad;
    Node n;
    n.owned = std::move(value);
    n.parents = std::move(parents);
    n.requires_grad = needs;
    if (needs) n.backward = std::move(fn);
    n.op = op;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  const Matrix& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.ref ? *n.ref : n.owned;
  }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_[id].parents; }

  std::size_t size() const { return nodes_.size(); }

  // Gradient buffer of a node, allocated on first use; nullptr when the node
  // does not require grad.
  Matrix* grad_target(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty() && !value(id).empty()) {
      const Matrix& v = value(id);
      n.grad = Matrix(v.rows(), v.cols());
    }
    return &n.grad;
  }

  // Reverse sweep from a scalar loss. Leaf gradients are added into their
  // Parameters (or into `sink` when given) and the tape is reset.
  void backward(Var loss, GradSink* sink = nullptr) {
    if (loss.tape != this) throw UsageError("backward: loss belongs to another tape");
    const Matrix& lv = value(loss.id);
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw UsageError("backward: loss must be a 1x1 scalar, got " + lv.shape_str());
    }
    if (Matrix* g = grad_target(loss.id)) (*g)(0, 0) = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (finite_checks() && !n.grad.all_finite()) {
        throw NumericError(std::string("non-finite gradient at ") + n.op);
      }
      if (n.backward) {
        n.backward(*this, i, n.grad);
      } else if (n.param != nullptr) {
        Parameter& p = *n.param;
        if (sink) {
          auto [it, fresh] = sink->try_emplace(&p, n.grad);
          if (!fresh) it->second += n.grad;
        } else {
          if (!p.grad.same_shape(p.value)) p.zero_grad();
          p.grad += n.grad;
        }
      }
    }
    reset();
  }

  void reset() { nodes_.clear(); }

 private:
  struct Node {
    Matrix owned;
    const Matrix* ref = nullptr;
    Matrix grad;
    std::vector<std::size_t> parents;
    Parameter* param = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
    const char* op = "leaf";
  };

  Var push_leaf(Matrix owned, const Matrix* ref, Parameter* p) {
    Node n;
    n.owned = std::move(owned);
    n.ref = ref;
    n.param = p;
    n.requires_grad = p != nullptr;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  // deque keeps references to existing nodes stable while new ones are pushed.
  std::deque<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(id); }
inline bool Var::requires_grad() const { return tape->requires_grad(id); }

namespace detail {

inline void same_tape(Var a, Var b, const char* op) {
  if (a.tape != b.tape) throw UsageError(std::string(op) + ": operands live on different tapes");
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  }
}

// out += a * b (or with transposes), plain loops ordered for contiguous access.
inline void gemm_nn(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out.row(i).data();
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a(i, p);
      if (av == 0.0) continue;
      const double* br = b.row(p).data();
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
}

// out += a * b^T
inline void gemm_nt(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = a.row(i).data();
    for (std::size_t j = 0; j < n; ++j) {
      const double* br = b.row(j).data();
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      out(i, j) += s;
    }
  }
}

// out += a^T * b
inline void gemm_tn(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  for (std::size_t p = 0; p < k; ++p) {
    const double* ar = a.row(p).data();
    const double* br = b.row(p).data();
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ar[i];
      if (av == 0.0) continue;
      double* o = out.row(i).data();
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
}

template <typename F>
Matrix map(const Matrix& x, F f) {
  Matrix y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return y;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ (" + a.shape_str() + " * " + b.shape_str() + ")");
  }
  Matrix out(a.rows(), b.cols());
  detail::gemm_nn(a, b, out);
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b, "matmul");
  Matrix out = matmul(a.value(), b.value());
  return a.tape->record("matmul", std::move(out), {a.id, b.id},
                        [a = a.id, b = b.id](Tape& t, std::size_t, const Matrix& g) {
                          if (Matrix* ga = t.grad_target(a)) detail::gemm_nt(g, t.value(b), *ga);
                          if (Matrix* gb = t.grad_target(b)) detail::gemm_tn(t.value(a), g, *gb);
                        });
}

inline Var transpose(Var a) {
  return a.tape->record("transpose", transpose(a.value()), {a.id},
                        [a = a.id](Tape& t, std::size_t, const Matrix& g) {
                          if (Matrix* ga = t.grad_target(a)) *ga += transpose(g);
                        });
}

inline Var add(Var a, Var b) {
  detail::same_tape(a, b, "add");
  detail::require_same_shape(a.value(), b.value(), "add");
  Matrix out = a.value();
  out += b.value();
  return a.tape->record("add", std::move(out), {a.id, b.id},
                        [a = a.id, b = b.id](Tape& t, std::size_t, const Matrix& g) {
                          if (Matrix* ga = t.grad_target(a)) *ga += g;
                          if (Matrix* gb = t.grad_target(b)) *gb += g;
                        });
}

// x (r x c) plus a column vector b (r x 1) broadcast over columns.
inline Var add_col_broadcast(Var x, Var b) {
  detail::same_tape(x, b, "add_col_broadcast");
  const Matrix& xv = x.value();
  const Matrix& bv = b.value();
  if (bv.rows() != xv.rows() || bv.cols() != 1) {
    throw ShapeError("add_col_broadcast: bias " + bv.shape_str() + " for " + xv.shape_str());
  }
  Matrix out = xv;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += bv(i, 0);
  return x.tape->record("add_col_broadcast", std::move(out), {x.id, b.id},
                        [x = x.id, b = b.id](Tape& t, std::size_t, const Matrix& g) {
                          if (Matrix* gx = t.grad_target(x)) *gx += g;
                          if (Matrix* gb = t.grad_target(b)) {
                            for (std::size_t i = 0; i < g.rows(); ++i)
                              for (std::size_t j = 0; j < g.cols(); ++j) (*gb)(i, 0) += g(i, j);
                          }
                        });
}

inline Var mul(Var a, Var b) {
  detail::same_tape(a, b, "mul");
  detail::require_same_shape(a.value(), b.value(), "mul");
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  Matrix out(av.rows(), av.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape->record("mul", std::move(out), {a.id, b.id},
                        [a = a.id, b = b.id](Tape& t, std::size_t, const Matrix& g) {
                          if (Matrix* ga = t.grad_target(a)) {
                            const Matrix& bv = t.value(b);
                            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
                          }
                          if (Matrix* gb = t.grad_target(b)) {
                            const Matrix& av = t.value(a);
                            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
                          }
                        });
}

inline Var scale(Var a, double s) {
  return a.tape->record("scale", detail::map(a.value(), [s](double v) { return s * v; }), {a.id},
                        [a = a.id, s](Tape& t, std::size_t, const Matrix& g) {
                          if (Matrix* ga = t.grad_target(a))
                            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += s * g[i];
                        });
}

inline Var add_scalar(Var a, double s) {
  return a.tape->record("add_scalar", detail::map(a.value(), [s](double v) { return v + s; }), {a.id},
                        [a = a.id](Tape& t, std::size_t, const Matrix& g) {
                          if (Matrix* ga = t.grad_target(a)) *ga += g;
                        });
}

inline Var tanh(Var a) {
  return a.tape->record("tanh", detail::map(a.value(), [](double v) { return std::tanh(v); }), {a.id},
                        [a = a.id](Tape& t, std::size_t self, const Matrix& g) {
                          Matrix* ga = t.grad_target(a);
                          if (!ga) return;
                          const Matrix& y = t.value(self);
                          const bool fault = testing::tanh_backward_fault().load();
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            const double d = fault ? 1.0 - y[i] : 1.0 - y[i] * y[i];
                            (*ga)[i] += g[i] * d;
                          }
                        });
}

inline double sigmoid(double v) {
  return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

inline Var sigmoid(Var a) {
  return a.tape->record("sigmoid", detail::map(a.value(), [](double v) { return sigmoid(v); }), {a.id},
                        [a = a.id](Tape& t, std::size_t self, const Matrix& g) {
                          Matrix* ga = t.grad_target(a);
                          if (!ga) return;
                          const Matrix& y = t.value(self);
                          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * y[i] * (1.0 - y[i]);
                        });
}

inline Var log(Var a) {
  const Matrix& av = a.value();
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (!(av[i] > 0.0)) throw DomainError("log: non-positive argument " + std::to_string(av[i]));
  }
  return a.tape->record("log", detail::map(av, [](double v) { return std::log(v); }), {a.id},
                        [a = a.id](Tape& t, std::size_t, const Matrix& g) {
                          Matrix* ga = t.grad_target(a);
                          if (!ga) return;
                          const Matrix& x = t.value(a);
                          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / x[i];
                        });
}

// Elementwise clamp into [lo, hi]; gradient passes only where unclamped.
inline Var clamp(Var a, double lo, double hi) {
  return a.tape->record("clamp", detail::map(a.value(), [lo, hi](double v) { return std::clamp(v, lo, hi); }),
                        {a.id}, [a = a.id, lo, hi](Tape& t, std::size_t, const Matrix& g) {
                          Matrix* ga = t.grad_target(a);
                          if (!ga) return;
                          const Matrix& x = t.value(a);
                          for (std::size_t i = 0; i < g.size(); ++i)
                            if (x[i] > lo && x[i] < hi) (*ga)[i] += g[i];
                        });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape->record("sum", Matrix(1, 1, s), {a.id}, [a = a.id](Tape& t, std::size_t, const Matrix& g) {
    if (Matrix* ga = t.grad_target(a))
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g[0];
  });
}

// Column sums: r x c -> 1 x c.
inline Var col_sums(Var a) {
  const Matrix& av = a.value();
  Matrix out(1, av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < av.cols(); ++j) out(0, j) += av(i, j);
  return a.tape->record("col_sums", std::move(out), {a.id}, [a = a.id](Tape& t, std::size_t, const Matrix& g) {
    Matrix* ga = t.grad_target(a);
    if (!ga) return;
    for (std::size_t i = 0; i < ga->rows(); ++i)
      for (std::size_t j = 0; j < ga->cols(); ++j) (*ga)(i, j) += g(0, j);
  });
}

// Column-wise mean: r x c -> r x 1.
inline Var mean_cols(Var a) {
  const Matrix& av = a.value();
  if (av.cols() == 0) throw ShapeError("mean_cols: no columns");
  Matrix out(av.rows(), 1);
  const double inv = 1.0 / static_cast<double>(av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < av.cols(); ++j) s += av(i, j);
    out(i, 0) = s * inv;
  }
  return a.tape->record("mean_cols", std::move(out), {a.id},
                        [a = a.id, inv](Tape& t, std::size_t, const Matrix& g) {
                          Matrix* ga = t.grad_target(a);
                          if (!ga) return;
                          for (std::size_t i = 0; i < ga->rows(); ++i)
                            for (std::size_t j = 0; j < ga->cols(); ++j) (*ga)(i, j) += g(i, 0) * inv;
                        });
}

// Row-wise max over columns: r x c -> r x 1. Gradient goes to the first
// maximal entry of each row.
inline Var max_cols(Var a) {
  const Matrix& av = a.value();
  if (av.cols() == 0) throw ShapeError("max_cols: no columns");
  Matrix out(av.rows(), 1);
  std::vector<std::size_t> arg(av.rows(), 0);
  for (std::size_t i = 0; i < av.rows(); ++i) {
    double best = av(i, 0);
    for (std::size_t j = 1; j < av.cols(); ++j) {
      if (av(i, j) > best) {
        best = av(i, j);
        arg[i] = j;
      }
    }
    out(i, 0) = best;
  }
  return a.tape->record("max_cols", std::move(out), {a.id},
                        [a = a.id, arg = std::move(arg)](Tape& t, std::size_t, const Matrix& g) {
                          Matrix* ga = t.grad_target(a);
                          if (!ga) return;
                          for (std::size_t i = 0; i < arg.size(); ++i) (*ga)(i, arg[i]) += g(i, 0);
                        });
}

// Selects columns by index: r x c -> r x |idx|.
inline Var gather_cols(Var a, std::vector<std::size_t> idx) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] >= av.cols()) throw IndexError("gather_cols: column " + std::to_string(idx[j]) + " out of range");
    for (std::size_t i = 0; i < av.rows(); ++i) out(i, j) = av(i, idx[j]);
  }
  return a.tape->record("gather_cols", std::move(out), {a.id},
                        [a = a.id, idx = std::move(idx)](Tape& t, std::size_t, const Matrix& g) {
                          Matrix* ga = t.grad_target(a);
                          if (!ga) return;
                          for (std::size_t j = 0; j < idx.size(); ++j)
                            for (std::size_t i = 0; i < g.rows(); ++i) (*ga)(i, idx[j]) += g(i, j);
                        });
}

inline Var col(Var a, std::size_t j) { return gather_cols(a, {j}); }

// Looks up rows of a table and lays them out as columns: table (V x d),
// ids (n) -> d x n with column j = table row ids[j].
inline Var lookup_cols(Var table, std::vector<std::size_t> ids) {
  const Matrix& tv = table.value();
  Matrix out(tv.cols(), ids.size());
  for (std::size_t j = 0; j < ids.size(); ++j) {
    if (ids[j] >= tv.rows()) {
      throw IndexError("lookup: id " + std::to_string(ids[j]) + " >= table size " + std::to_string(tv.rows()));
    }
    for (std::size_t i = 0; i < tv.cols(); ++i) out(i, j) = tv(ids[j], i);
  }
  return table.tape->record("lookup_cols", std::move(out), {table.id},
                            [tb = table.id, ids = std::move(ids)](Tape& t, std::size_t, const Matrix& g) {
                              Matrix* gt = t.grad_target(tb);
                              if (!gt) return;
                              for (std::size_t j = 0; j < ids.size(); ++j)
                                for (std::size_t i = 0; i < g.rows(); ++i) (*gt)(ids[j], i) += g(i, j);
                            });
}

// Horizontal concatenation of equally tall operands.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  Tape* tape = parts.front().tape;
  const std::size_t r = parts.front().rows();
  std::size_t c = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    if (p.tape != tape) throw UsageError("concat_cols: operands live on different tapes");
    if (p.rows() != r) throw ShapeError("concat_cols: row count mismatch");
    ids.push_back(p.id);
    offsets.push_back(c);
    c += p.cols();
  }
  Matrix out(r, c);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Matrix& pv = parts[k].value();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < pv.cols(); ++j) out(i, offsets[k] + j) = pv(i, j);
  }
  return tape->record("concat_cols", std::move(out), ids,
                      [ids, offsets](Tape& t, std::size_t, const Matrix& g) {
                        for (std::size_t k = 0; k < ids.size(); ++k) {
                          Matrix* gp = t.grad_target(ids[k]);
                          if (!gp) continue;
                          for (std::size_t i = 0; i < gp->rows(); ++i)
                            for (std::size_t j = 0; j < gp->cols(); ++j) (*gp)(i, j) += g(i, offsets[k] + j);
                        }
                      });
}

// Stacks the columns of a (r x c) into one (r*c) x 1 vector, column 0 first.
inline Var flatten_cols(Var a) {
  const Matrix& av = a.value();
  const std::size_t r = av.rows(), c = av.cols();
  Matrix out(r * c, 1);
  for (std::size_t j = 0; j < c; ++j)
    for (std::size_t i = 0; i < r; ++i) out(j * r + i, 0) = av(i, j);
  return a.tape->record("flatten_cols", std::move(out), {a.id}, [a = a.id, r, c](Tape& t, std::size_t, const Matrix& g) {
    Matrix* ga = t.grad_target(a);
    if (!ga) return;
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t i = 0; i < r; ++i) (*ga)(i, j) += g(j * r + i, 0);
  });
}

// Row-wise softmax with max subtraction. `mask` is empty or holds rows*cols
// flags (nonzero = keep); masked entries come out exactly 0.
inline Var softmax_rows(Var a, std::span<const std::uint8_t> mask = {}) {
  const Matrix& av = a.value();
  const std::size_t r = av.rows(), c = av.cols();
  if (!mask.empty() && mask.size() != r * c) {
    throw ShapeError("softmax_rows: mask has " + std::to_string(mask.size()) + " entries for " + av.shape_str());
  }
  Matrix out(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (mask.empty() || mask[i * c + j]) mx = std::max(mx, av(i, j));
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw DegenerateError("softmax_rows: row " + std::to_string(i) + " is fully masked");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (mask.empty() || mask[i * c + j]) {
        out(i, j) = std::exp(av(i, j) - mx);
        z += out(i, j);
      }
    }
    for (std::size_t j = 0; j < c; ++j) out(i, j) /= z;
  }
  return a.tape->record("softmax_rows", std::move(out), {a.id}, [a = a.id](Tape& t, std::size_t self, const Matrix& g) {
    Matrix* ga = t.grad_target(a);
    if (!ga) return;
    const Matrix& y = t.value(self);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) (*ga)(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

// Builds a rows*cols mask from a per-column flag vector.
inline std::vector<std::uint8_t> column_mask(std::size_t rows, const std::vector<bool>& keep_col) {
  std::vector<std::uint8_t> m(rows * keep_col.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < keep_col.size(); ++j) m[i * keep_col.size() + j] = keep_col[j] ? 1 : 0;
  return m;
}

// Inverted dropout with keep-probability 1 - p.
inline Var dropout(Var a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  if (p >= 1.0) throw ConfigError("dropout: probability must be < 1");
  Matrix mask(a.rows(), a.cols());
  const double keep = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = rng.bernoulli(p) ? 0.0 : keep;
  return mul(a, a.tape->constant(std::move(mask)));
}

}  // namespace hilat
