#pragma once

// Dense 64-bit matrices and a reverse-mode tape over them.
//
// Every differentiable value is a `Var`: a handle into the `Tape` that
// recorded it. Operations append nodes in execution order, so node ids are
// already a topological order and `Tape::backward` is a single reverse
// sweep. Trainable weights live in `Parameter`s outside the tape; the tape
// maps each parameter to one leaf node and accumulates into
// `Parameter::grad` when the sweep reaches it.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vigor/error.hpp"
#include "vigor/rng.hpp"

namespace vigor {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_) {
      throw DimensionError("Matrix: " + std::to_string(values_.size()) +
                           " values do not fill a " + std::to_string(rows_) + "x" +
                           std::to_string(cols_) + " shape");
    }
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> values;
    values.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("Matrix::from_rows: ragged rows");
      values.insert(values.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(values));
  }

  static Matrix row_vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Matrix(1, n, std::move(values));
  }

  static Matrix column_vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Matrix(n, 1, std::move(values));
  }

  static Matrix scalar(double v) { return Matrix(1, 1, v); }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {values_.data() + r * cols_, cols_};
  }

  std::vector<double>& values() noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }
  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  std::string shape_string() const {
    return "[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
  }

  Matrix& operator+=(const Matrix& other) {
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
    return *this;
  }

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

namespace kernels {

// out += a * b
inline void gemm_nn(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// out += a * b^T
inline void gemm_nt(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = pa + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = pb + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      pc[i * n + j] += acc;
    }
  }
}

// out += a^T * b
inline void gemm_tn(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = out.data();
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = pa + p * m;
    const double* brow = pb + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace kernels

// A trainable weight. `grad` is accumulated by `Tape::backward` and reset by
// the owner before each step.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}

  void zero_grad() { grad.fill(0.0); }
};

// Owns parameters with stable addresses, in registration order.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  Parameter& add(std::string name, Matrix init) {
    if (find(name) != nullptr) throw ContractError("ParamStore: duplicate parameter " + name);
    params_.push_back(std::make_unique<Parameter>(std::move(name), std::move(init)));
    return *params_.back();
  }

  // Glorot-uniform weight of shape rows x cols.
  Parameter& add_weight(std::string name, std::size_t rows, std::size_t cols, Rng& rng) {
    Matrix w(rows, cols);
    const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
    for (double& v : w.values()) v = rng.uniform(-a, a);
    return add(std::move(name), std::move(w));
  }

  Parameter& add_constant(std::string name, std::size_t rows, std::size_t cols, double fill) {
    return add(std::move(name), Matrix(rows, cols, fill));
  }

  Parameter* find(const std::string& name) const {
    for (const auto& p : params_) {
      if (p->name == name) return p.get();
    }
    return nullptr;
  }

  std::vector<Parameter*> all() const {
    std::vector<Parameter*> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }

  std::size_t size() const noexcept { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

class Tape;

// Handle to a tape node. Cheap to copy; only valid while its tape lives
// and has not been cleared.
class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Propagates gradient from node `self` to its parents.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) {
    nodes_.push_back(Node{std::move(value), {}, nullptr, nullptr, false});
    return Var(this, nodes_.size() - 1);
  }

  // Leaf for a parameter; repeated calls return the same node.
  Var param(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) {
      return Var(this, it->second);
    }
    nodes_.push_back(Node{p.value, {}, nullptr, &p, grad_enabled_});
    param_nodes_.emplace(&p, nodes_.size() - 1);
    return Var(this, nodes_.size() - 1);
  }

  Var record(Matrix value, std::initializer_list<Var> parents, BackwardFn fn) {
    bool needs = false;
    for (const Var& v : parents) {
      if (v.tape_ != this) throw ContractError("Tape: operands recorded on different tapes");
      needs = needs || nodes_[v.id_].needs_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : nullptr, nullptr, needs});
    return Var(this, nodes_.size() - 1);
  }

  const Matrix& value(std::size_t id) const { return nodes_.at(id).value; }

  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  // Gradient buffer of node `id`, allocated as zeros on first access.
  Matrix& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad = Matrix(n.value.rows(), n.value.cols());
    return n.grad;
  }

  bool has_grad(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.grad.size() == n.value.size() && !n.value.empty();
  }

  // Reverse sweep from a scalar loss; parameter gradients are accumulated
  // into their `Parameter::grad`.
  void backward(Var loss) {
    if (loss.tape_ != this) throw ContractError("Tape::backward: loss belongs to another tape");
    const Matrix& lv = nodes_[loss.id_].value;
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw ContractError("Tape::backward: loss must be scalar, got " + lv.shape_string());
    }
    grad(loss.id_)(0, 0) += 1.0;
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || !has_grad(i)) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param != nullptr) n.param->grad += n.grad;
    }
  }

  void clear() {
    nodes_.clear();
    param_nodes_.clear();
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  // With gradients disabled, parameter leaves are treated as constants and
  // no backward closures are kept.
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const noexcept { return grad_enabled_; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool needs_grad = false;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  bool grad_enabled_ = true;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

inline double Var::item() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ContractError("Var::item on non-scalar " + v.shape_string());
  return v[0];
}

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands recorded on different tapes");
  return a.tape();
}

[[noreturn]] inline void shape_mismatch(const char* op, const Matrix& a, const Matrix& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + a.shape_string() +
                       " and " + b.shape_string());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) detail::shape_mismatch("matmul", av, bv);
  Matrix out(av.rows(), bv.cols());
  kernels::gemm_nn(av, bv, out);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    if (tp.needs_grad(ia)) kernels::gemm_nt(g, tp.value(ib), tp.grad(ia));
    if (tp.needs_grad(ib)) kernels::gemm_tn(tp.value(ia), g, tp.grad(ib));
  });
}

// a * b^T
inline Var matmul_nt(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.cols()) detail::shape_mismatch("matmul_nt", av, bv);
  Matrix out(av.rows(), bv.rows());
  kernels::gemm_nt(av, bv, out);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    if (tp.needs_grad(ia)) kernels::gemm_nn(g, tp.value(ib), tp.grad(ia));
    if (tp.needs_grad(ib)) kernels::gemm_tn(g, tp.value(ia), tp.grad(ib));
  });
}

inline Var transpose(Var x) {
  const Matrix& xv = x.value();
  Matrix out(xv.cols(), xv.rows());
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < xv.cols(); ++c) out(c, r) = xv(r, c);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    Matrix& gx = tp.grad(ix);
    for (std::size_t r = 0; r < gx.rows(); ++r)
      for (std::size_t c = 0; c < gx.cols(); ++c) gx(r, c) += g(c, r);
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (!av.same_shape(bv)) detail::shape_mismatch("add", av, bv);
  Matrix out = av;
  out += bv;
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.grad(ia) += g;
    if (tp.needs_grad(ib)) tp.grad(ib) += g;
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (!av.same_shape(bv)) detail::shape_mismatch("sub", av, bv);
  Matrix out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.grad(ia) += g;
    if (tp.needs_grad(ib)) {
      Matrix& gb = tp.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var hadamard(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (!av.same_shape(bv)) detail::shape_mismatch("hadamard", av, bv);
  Matrix out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    if (tp.needs_grad(ia)) {
      Matrix& ga = tp.grad(ia);
      const Matrix& bv2 = tp.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (tp.needs_grad(ib)) {
      Matrix& gb = tp.grad(ib);
      const Matrix& av2 = tp.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
    }
  });
}

// x (m x n) + bias (1 x n) broadcast over rows.
inline Var add_row(Var x, Var bias) {
  Tape& t = detail::same_tape(x, bias);
  const Matrix& xv = x.value();
  const Matrix& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != xv.cols()) detail::shape_mismatch("add_row", xv, bv);
  Matrix out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
  }
  const std::size_t ix = x.id(), ib = bias.id();
  return t.record(std::move(out), {x, bias}, [ix, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    if (tp.needs_grad(ix)) tp.grad(ix) += g;
    if (tp.needs_grad(ib)) {
      Matrix& gb = tp.grad(ib);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto row = g.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) gb[c] += row[c];
      }
    }
  });
}

// Row r of x multiplied by scale[r]; scale is m x 1.
inline Var scale_rows(Var x, Var scale) {
  Tape& t = detail::same_tape(x, scale);
  const Matrix& xv = x.value();
  const Matrix& sv = scale.value();
  if (sv.cols() != 1 || sv.rows() != xv.rows()) detail::shape_mismatch("scale_rows", xv, sv);
  Matrix out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (double& v : out.row(r)) v *= sv[r];
  const std::size_t ix = x.id(), is = scale.id();
  return t.record(std::move(out), {x, scale}, [ix, is](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    const Matrix& s = tp.value(is);
    if (tp.needs_grad(ix)) {
      Matrix& gx = tp.grad(ix);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto gr = g.row(r);
        auto xr = gx.row(r);
        for (std::size_t c = 0; c < gr.size(); ++c) xr[c] += gr[c] * s[r];
      }
    }
    if (tp.needs_grad(is)) {
      Matrix& gs = tp.grad(is);
      const Matrix& xv2 = tp.value(ix);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto gr = g.row(r);
        auto xr = xv2.row(r);
        double acc = 0.0;
        for (std::size_t c = 0; c < gr.size(); ++c) acc += gr[c] * xr[c];
        gs[r] += acc;
      }
    }
  });
}

inline Var scale(Var x, double c) {
  Matrix out = x.value();
  for (double& v : out.values()) v *= c;
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, c](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    Matrix& gx = tp.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
  });
}

inline Var relu(Var x) {
  Matrix out = x.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    const Matrix& xv = tp.value(ix);
    Matrix& gx = tp.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) gx[i] += g[i];
  });
}

// log(1 + exp(x)), evaluated without overflow.
inline Var softplus(Var x) {
  Matrix out = x.value();
  for (double& v : out.values()) v = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    const Matrix& xv = tp.value(ix);
    Matrix& gx = tp.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = xv[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-xv[i]))
                                    : std::exp(xv[i]) / (1.0 + std::exp(xv[i]));
      gx[i] += g[i] * s;
    }
  });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

namespace detail {

inline void require_finite(const Matrix& m, const char* op) {
  if (!m.all_finite()) throw NumericError(std::string(op) + ": non-finite input");
}

}  // namespace detail

inline Var row_softmax(Var x) {
  const Matrix& xv = x.value();
  detail::require_finite(xv, "row_softmax");
  Matrix out(xv.rows(), xv.cols());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto in = xv.row(r);
    auto o = out.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      o[c] = std::exp(in[c] - mx);
      z += o[c];
    }
    for (double& v : o) v /= z;
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    const Matrix& y = tp.value(self);
    Matrix& gx = tp.grad(ix);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto yr = y.row(r);
      auto gr = g.row(r);
      double dot = 0.0;
      for (std::size_t c = 0; c < yr.size(); ++c) dot += gr[c] * yr[c];
      auto xr = gx.row(r);
      for (std::size_t c = 0; c < yr.size(); ++c) xr[c] += yr[c] * (gr[c] - dot);
    }
  });
}

inline Var log_softmax_rows(Var x) {
  const Matrix& xv = x.value();
  detail::require_finite(xv, "log_softmax_rows");
  Matrix out(xv.rows(), xv.cols());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto in = xv.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (double v : in) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    auto o = out.row(r);
    for (std::size_t c = 0; c < in.size(); ++c) o[c] = in[c] - lse;
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    const Matrix& y = tp.value(self);
    Matrix& gx = tp.grad(ix);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto yr = y.row(r);
      auto gr = g.row(r);
      double gsum = 0.0;
      for (double v : gr) gsum += v;
      auto xr = gx.row(r);
      for (std::size_t c = 0; c < yr.size(); ++c) xr[c] += gr[c] - std::exp(yr[c]) * gsum;
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

// Per-row standardization followed by an affine map; gain and bias are 1 x n.
inline Var layer_norm(Var x, Var gain, Var bias) {
  Tape& t = detail::same_tape(x, gain);
  detail::same_tape(x, bias);
  const Matrix& xv = x.value();
  const Matrix& gv = gain.value();
  const Matrix& bv = bias.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  if (n == 0) throw ContractError("layer_norm: zero-width input");
  if (gv.rows() != 1 || gv.cols() != n) detail::shape_mismatch("layer_norm", xv, gv);
  if (bv.rows() != 1 || bv.cols() != n) detail::shape_mismatch("layer_norm", xv, bv);

  auto normalized = std::make_shared<Matrix>(m, n);
  auto inv_std = std::make_shared<std::vector<double>>(m);
  Matrix out(m, n);
  for (std::size_t r = 0; r < m; ++r) {
    auto in = xv.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    (*inv_std)[r] = is;
    auto xh = normalized->row(r);
    auto o = out.row(r);
    for (std::size_t c = 0; c < n; ++c) {
      xh[c] = (in[c] - mean) * is;
      o[c] = gv[c] * xh[c] + bv[c];
    }
  }
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return t.record(std::move(out), {x, gain, bias},
                  [ix, ig, ib, normalized, inv_std](Tape& tp, std::size_t self) {
                    const Matrix& g = tp.grad(self);
                    const Matrix& gv2 = tp.value(ig);
                    const std::size_t rows = g.rows(), cols = g.cols();
                    if (tp.needs_grad(ig) || tp.needs_grad(ib)) {
                      Matrix& gg = tp.grad(ig);
                      Matrix& gb = tp.grad(ib);
                      for (std::size_t r = 0; r < rows; ++r) {
                        auto gr = g.row(r);
                        auto xh = normalized->row(r);
                        for (std::size_t c = 0; c < cols; ++c) {
                          gg[c] += gr[c] * xh[c];
                          gb[c] += gr[c];
                        }
                      }
                    }
                    if (!tp.needs_grad(ix)) return;
                    Matrix& gx = tp.grad(ix);
                    std::vector<double> dxh(cols);
                    for (std::size_t r = 0; r < rows; ++r) {
                      auto gr = g.row(r);
                      auto xh = normalized->row(r);
                      double mean_d = 0.0, mean_dx = 0.0;
                      for (std::size_t c = 0; c < cols; ++c) {
                        dxh[c] = gr[c] * gv2[c];
                        mean_d += dxh[c];
                        mean_dx += dxh[c] * xh[c];
                      }
                      mean_d /= static_cast<double>(cols);
                      mean_dx /= static_cast<double>(cols);
                      auto xr = gx.row(r);
                      for (std::size_t c = 0; c < cols; ++c) {
                        xr[c] += (*inv_std)[r] * (dxh[c] - mean_d - xh[c] * mean_dx);
                      }
                    }
                  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var concat_rows(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.cols()) detail::shape_mismatch("concat_rows", av, bv);
  std::vector<double> values = av.values();
  values.insert(values.end(), bv.values().begin(), bv.values().end());
  Matrix out(av.rows() + bv.rows(), av.cols(), std::move(values));
  const std::size_t ia = a.id(), ib = b.id();
  const std::size_t split = av.size();
  return t.record(std::move(out), {a, b}, [ia, ib, split](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    if (tp.needs_grad(ia)) {
      Matrix& ga = tp.grad(ia);
      for (std::size_t i = 0; i < split; ++i) ga[i] += g[i];
    }
    if (tp.needs_grad(ib)) {
      Matrix& gb = tp.grad(ib);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[split + i];
    }
  });
}

inline Var concat_cols(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows()) detail::shape_mismatch("concat_cols", av, bv);
  const std::size_t ca = av.cols(), cb = bv.cols();
  Matrix out(av.rows(), ca + cb);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    std::copy(av.row(r).begin(), av.row(r).end(), out.row(r).begin());
    std::copy(bv.row(r).begin(), bv.row(r).end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(ca));
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib, ca, cb](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    const bool need_a = tp.needs_grad(ia), need_b = tp.needs_grad(ib);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      auto gr = g.row(r);
      if (need_a) {
        auto ar = tp.grad(ia).row(r);
        for (std::size_t c = 0; c < ca; ++c) ar[c] += gr[c];
      }
      if (need_b) {
        auto br = tp.grad(ib).row(r);
        for (std::size_t c = 0; c < cb; ++c) br[c] += gr[ca + c];
      }
    }
  });
}

inline Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  const Matrix& xv = x.value();
  if (begin + count > xv.rows()) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of " + xv.shape_string());
  }
  const std::size_t n = xv.cols();
  std::vector<double> values(xv.values().begin() + static_cast<std::ptrdiff_t>(begin * n),
                             xv.values().begin() + static_cast<std::ptrdiff_t>((begin + count) * n));
  const std::size_t ix = x.id();
  return x.tape().record(Matrix(count, n, std::move(values)), {x},
                         [ix, begin, n](Tape& tp, std::size_t self) {
                           const Matrix& g = tp.grad(self);
                           Matrix& gx = tp.grad(ix);
                           for (std::size_t i = 0; i < g.size(); ++i) gx[begin * n + i] += g[i];
                         });
}

inline Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  const Matrix& xv = x.value();
  if (begin + count > xv.cols()) {
    throw DimensionError("slice_cols: cols [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of " + xv.shape_string());
  }
  Matrix out(xv.rows(), count);
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = xv(r, begin + c);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, begin](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    Matrix& gx = tp.grad(ix);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) gx(r, begin + c) += g(r, c);
  });
}

// Rows of `table` selected by index (embedding lookup).
inline Var gather_rows(Var table, std::vector<std::size_t> indices) {
  const Matrix& tv = table.value();
  const std::size_t n = tv.cols();
  Matrix out(indices.size(), n);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= tv.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(indices[i]) + " out of " +
                           tv.shape_string());
    }
    std::copy(tv.row(indices[i]).begin(), tv.row(indices[i]).end(), out.row(i).begin());
  }
  const std::size_t it = table.id();
  return table.tape().record(std::move(out), {table},
                             [it, idx = std::move(indices)](Tape& tp, std::size_t self) {
                               const Matrix& g = tp.grad(self);
                               Matrix& gt = tp.grad(it);
                               for (std::size_t i = 0; i < idx.size(); ++i) {
                                 auto src = g.row(i);
                                 auto dst = gt.row(idx[i]);
                                 for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
                               }
                             });
}

// Column-wise max over consecutive row segments. `offsets` has one entry
// per segment plus a final end offset; every segment must be nonempty.
inline Var segment_max_rows(Var x, std::vector<std::size_t> offsets) {
  const Matrix& xv = x.value();
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != xv.rows()) {
    throw DimensionError("segment_max_rows: offsets do not cover " + xv.shape_string());
  }
  const std::size_t segments = offsets.size() - 1, n = xv.cols();
  Matrix out(segments, n);
  std::vector<std::size_t> argmax(segments * n);
  for (std::size_t s = 0; s < segments; ++s) {
    if (offsets[s + 1] <= offsets[s]) throw ContractError("segment_max_rows: empty segment");
    for (std::size_t c = 0; c < n; ++c) {
      std::size_t best = offsets[s];
      for (std::size_t r = offsets[s] + 1; r < offsets[s + 1]; ++r)
        if (xv(r, c) > xv(best, c)) best = r;
      argmax[s * n + c] = best;
      out(s, c) = xv(best, c);
    }
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x},
                         [ix, n, arg = std::move(argmax)](Tape& tp, std::size_t self) {
                           const Matrix& g = tp.grad(self);
                           Matrix& gx = tp.grad(ix);
                           for (std::size_t i = 0; i < arg.size(); ++i) gx(arg[i], i % n) += g[i];
                         });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var mean_rows(Var x) {
  const Matrix& xv = x.value();
  if (xv.rows() == 0) throw ContractError("mean_rows: no rows");
  const double inv = 1.0 / static_cast<double>(xv.rows());
  Matrix out(1, xv.cols());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto row = xv.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) out[c] += row[c];
  }
  for (double& v : out.values()) v *= inv;
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [ix, inv](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad(self);
    Matrix& gx = tp.grad(ix);
    for (std::size_t r = 0; r < gx.rows(); ++r) {
      auto row = gx.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] += g[c] * inv;
    }
  });
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  const std::size_t ix = x.id();
  return x.tape().record(Matrix::scalar(s), {x}, [ix](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    for (double& v : tp.grad(ix).values()) v += g;
  });
}

inline Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ContractError("mean: empty input");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

// Single element as a scalar.
inline Var pick(Var x, std::size_t r, std::size_t c) {
  const Matrix& xv = x.value();
  if (r >= xv.rows() || c >= xv.cols()) {
    throw DimensionError("pick: (" + std::to_string(r) + ", " + std::to_string(c) +
                         ") out of " + xv.shape_string());
  }
  const std::size_t ix = x.id();
  return x.tape().record(Matrix::scalar(xv(r, c)), {x}, [ix, r, c](Tape& tp, std::size_t self) {
    tp.grad(ix)(r, c) += tp.grad(self)[0];
  });
}

}  // namespace vigor
