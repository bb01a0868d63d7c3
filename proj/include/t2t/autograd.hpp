#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major Eigen
// matrices. A Tape records one forward pass; backward() walks it in reverse
// and accumulates gradients into the bound Parameters.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "t2t/error.hpp"

namespace t2t::ag {

using Index = Eigen::Index;

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Index rows, Index cols, bool train = true)
      : name(std::move(n)), value(Matrix<T>::Zero(rows, cols)), grad(Matrix<T>::Zero(rows, cols)),
        trainable(train) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <class T>
class Tape;

template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  const Matrix<T>& value() const { return tape_->value(id_); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  T scalar() const { return value()(0, 0); }
  Tape<T>* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  explicit Tape(bool record = true) : record_(record) { nodes_.reserve(512); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Matrix<T> v) {
    Node n;
    n.own = std::move(v);
    nodes_.push_back(std::move(n));
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  /// Leaf bound to a Parameter; repeated calls return the same node.
  Var<T> param(Parameter<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var<T>(this, it->second);
    Node n;
    n.ref = &p.value;
    n.needs_grad = record_ && p.trainable;
    nodes_.push_back(std::move(n));
    int id = static_cast<int>(nodes_.size()) - 1;
    param_nodes_.emplace(&p, id);
    if (nodes_[id].needs_grad) bindings_.emplace_back(id, &p);
    return Var<T>(this, id);
  }

  Var<T> make(Matrix<T> v, std::initializer_list<Var<T>> parents, Backward fn) {
    Node n;
    n.own = std::move(v);
    if (record_) {
      for (const auto& p : parents) {
        if (nodes_[p.id()].needs_grad) {
          n.needs_grad = true;
          break;
        }
      }
      if (n.needs_grad) n.backward = std::move(fn);
    }
    nodes_.push_back(std::move(n));
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  Var<T> make(Matrix<T> v, const std::vector<Var<T>>& parents, Backward fn) {
    Node n;
    n.own = std::move(v);
    if (record_) {
      for (const auto& p : parents) {
        if (nodes_[p.id()].needs_grad) {
          n.needs_grad = true;
          break;
        }
      }
      if (n.needs_grad) n.backward = std::move(fn);
    }
    nodes_.push_back(std::move(n));
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Matrix<T>& value(int id) const {
    const Node& n = nodes_[id];
    return n.ref ? *n.ref : n.own;
  }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }

  const Matrix<T>& grad(int id) const { return nodes_[id].grad; }
  bool has_grad(int id) const { return nodes_[id].grad.size() > 0; }

  /// Adds `g` into the gradient of node `id` if that node participates.
  template <class Expr>
  void accumulate(int id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Seeds d(loss)/d(loss) = scale, runs the reverse sweep, and adds the
  /// result into each bound Parameter's grad.
  void backward(const Var<T>& loss, T scale = T(1)) {
    require(record_, ErrorKind::InvalidConfig, "backward() on a non-recording tape");
    require(loss.rows() == 1 && loss.cols() == 1, ErrorKind::ShapeMismatch,
            "backward() expects a scalar loss");
    if (!nodes_[loss.id()].needs_grad) return;
    accumulate(loss.id(), Matrix<T>::Constant(1, 1, scale));
    for (int id = loss.id(); id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.backward && n.grad.size() > 0) n.backward(*this, id);
    }
    for (auto& [id, p] : bindings_) {
      const Node& n = nodes_[id];
      if (n.grad.size() == 0) continue;
      if (p->grad.rows() != p->value.rows() || p->grad.cols() != p->value.cols()) p->zero_grad();
      p->grad += n.grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<T> own;
    const Matrix<T>* ref = nullptr;
    Matrix<T> grad;
    bool needs_grad = false;
    Backward backward;
  };

  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, int> param_nodes_;
  std::vector<std::pair<int, Parameter<T>*>> bindings_;
};

namespace detail {

template <class T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    fail(ErrorKind::ShapeMismatch, std::string(op) + ": " + std::to_string(a.rows()) + "x" +
                                       std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                                       "x" + std::to_string(b.cols()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.cols() != b.rows()) {
    fail(ErrorKind::ShapeMismatch, "matmul: inner dimensions " + std::to_string(a.cols()) + " vs " +
                                       std::to_string(b.rows()));
  }
  Matrix<T> out = a.value() * b.value();
  const int ia = a.id(), ib = b.id();
  return a.tape()->make(std::move(out), {a, b}, [ia, ib](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

/// a * b^T
template <class T>
Var<T> matmul_bt(const Var<T>& a, const Var<T>& b) {
  if (a.cols() != b.cols()) fail(ErrorKind::ShapeMismatch, "matmul_bt: column mismatch");
  Matrix<T> out = a.value() * b.value().transpose();
  const int ia = a.id(), ib = b.id();
  return a.tape()->make(std::move(out), {a, b}, [ia, ib](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib));
    if (t.needs_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
  });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  Matrix<T> out = a.value().transpose();
  const int ia = a.id();
  return a.tape()->make(std::move(out), {a}, [ia](Tape<T>& t, int self) {
    t.accumulate(ia, t.grad(self).transpose());
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a, b, "add");
  Matrix<T> out = a.value() + b.value();
  const int ia = a.id(), ib = b.id();
  return a.tape()->make(std::move(out), {a, b}, [ia, ib](Tape<T>& t, int self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, t.grad(self));
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a, b, "sub");
  Matrix<T> out = a.value() - b.value();
  const int ia = a.id(), ib = b.id();
  return a.tape()->make(std::move(out), {a, b}, [ia, ib](Tape<T>& t, int self) {
    t.accumulate(ia, t.grad(self));
    if (t.needs_grad(ib)) t.accumulate(ib, -t.grad(self));
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check_same_shape(a, b, "mul");
  Matrix<T> out = a.value().cwiseProduct(b.value());
  const int ia = a.id(), ib = b.id();
  return a.tape()->make(std::move(out), {a, b}, [ia, ib](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.needs_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

/// Adds the 1xC row `r` to every row of `a`.
template <class T>
Var<T> add_row(const Var<T>& a, const Var<T>& r) {
  if (r.rows() != 1 || r.cols() != a.cols()) fail(ErrorKind::ShapeMismatch, "add_row: bad row shape");
  Matrix<T> out = a.value().rowwise() + r.value().row(0);
  const int ia = a.id(), ir = r.id();
  return a.tape()->make(std::move(out), {a, r}, [ia, ir](Tape<T>& t, int self) {
    t.accumulate(ia, t.grad(self));
    if (t.needs_grad(ir)) t.accumulate(ir, t.grad(self).colwise().sum());
  });
}

/// Multiplies every row of `a` elementwise by the 1xC row `r`.
template <class T>
Var<T> mul_row(const Var<T>& a, const Var<T>& r) {
  if (r.rows() != 1 || r.cols() != a.cols()) fail(ErrorKind::ShapeMismatch, "mul_row: bad row shape");
  Matrix<T> out = a.value().array().rowwise() * r.value().row(0).array();
  const int ia = a.id(), ir = r.id();
  return a.tape()->make(std::move(out), {a, r}, [ia, ir](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ia)) {
      Matrix<T> ga = g.array().rowwise() * t.value(ir).row(0).array();
      t.accumulate(ia, ga);
    }
    if (t.needs_grad(ir)) t.accumulate(ir, g.cwiseProduct(t.value(ia)).colwise().sum());
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Matrix<T> out = a.value() * s;
  const int ia = a.id();
  return a.tape()->make(std::move(out), {a}, [ia, s](Tape<T>& t, int self) {
    t.accumulate(ia, t.grad(self) * s);
  });
}

/// s * a where s is a 1x1 Var.
template <class T>
Var<T> scale_by(const Var<T>& a, const Var<T>& s) {
  if (s.rows() != 1 || s.cols() != 1) fail(ErrorKind::ShapeMismatch, "scale_by: scalar expected");
  Matrix<T> out = a.value() * s.scalar();
  const int ia = a.id(), is = s.id();
  return a.tape()->make(std::move(out), {a, s}, [ia, is](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(is)(0, 0));
    if (t.needs_grad(is)) t.accumulate(is, Matrix<T>::Constant(1, 1, g.cwiseProduct(t.value(ia)).sum()));
  });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Matrix<T> out = a.value().array() + s;
  const int ia = a.id();
  return a.tape()->make(std::move(out), {a}, [ia](Tape<T>& t, int self) { t.accumulate(ia, t.grad(self)); });
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  Matrix<T> out = a.value().array().tanh();
  const int ia = a.id();
  return a.tape()->make(std::move(out), {a}, [ia](Tape<T>& t, int self) {
    const auto& y = t.value(self);
    Matrix<T> g = t.grad(self).array() * (T(1) - y.array().square());
    t.accumulate(ia, g);
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  Matrix<T> out = (T(1) + (-a.value().array()).exp()).inverse();
  const int ia = a.id();
  return a.tape()->make(std::move(out), {a}, [ia](Tape<T>& t, int self) {
    const auto& y = t.value(self);
    Matrix<T> g = t.grad(self).array() * y.array() * (T(1) - y.array());
    t.accumulate(ia, g);
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  Matrix<T> out = a.value().cwiseMax(T(0));
  const int ia = a.id();
  return a.tape()->make(std::move(out), {a}, [ia](Tape<T>& t, int self) {
    Matrix<T> g = (t.value(ia).array() > T(0)).select(t.grad(self), T(0));
    t.accumulate(ia, g);
  });
}

/// log(max(a, floor)); entries at the floor receive no gradient.
template <class T>
Var<T> log_clamped(const Var<T>& a, T floor) {
  Matrix<T> out = a.value().cwiseMax(floor).array().log();
  const int ia = a.id();
  return a.tape()->make(std::move(out), {a}, [ia, floor](Tape<T>& t, int self) {
    const auto& x = t.value(ia);
    Matrix<T> g = (x.array() > floor).select(t.grad(self).array() / x.array(), T(0));
    t.accumulate(ia, g);
  });
}

/// Inverted dropout. Identity when `rate` is 0 or `rng` is null.
template <class T>
Var<T> dropout(const Var<T>& a, T rate, std::mt19937_64* rng) {
  if (rng == nullptr || rate <= T(0)) return a;
  Matrix<T> keep(a.rows(), a.cols());
  std::bernoulli_distribution coin(1.0 - static_cast<double>(rate));
  const T inv = T(1) / (T(1) - rate);
  for (Index i = 0; i < keep.size(); ++i) keep.data()[i] = coin(*rng) ? inv : T(0);
  Matrix<T> out = a.value().cwiseProduct(keep);
  const int ia = a.id();
  return a.tape()->make(std::move(out), {a}, [ia, keep = std::move(keep)](Tape<T>& t, int self) {
    t.accumulate(ia, t.grad(self).cwiseProduct(keep));
  });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

template <class T>
Var<T> sum_all(const Var<T>& a) {
  Matrix<T> out = Matrix<T>::Constant(1, 1, a.value().sum());
  const int ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return a.tape()->make(std::move(out), {a}, [ia, r, c](Tape<T>& t, int self) {
    t.accumulate(ia, Matrix<T>::Constant(r, c, t.grad(self)(0, 0)));
  });
}

/// Mean over rows whose mask entry is true; returns 1xC.
template <class T>
Var<T> masked_mean_rows(const Var<T>& a, const std::vector<bool>& mask) {
  if (static_cast<Index>(mask.size()) != a.rows()) fail(ErrorKind::ShapeMismatch, "masked_mean_rows: mask length");
  Index n = 0;
  Matrix<T> out = Matrix<T>::Zero(1, a.cols());
  for (Index r = 0; r < a.rows(); ++r) {
    if (mask[r]) {
      out += a.value().row(r);
      ++n;
    }
  }
  if (n == 0) fail(ErrorKind::AllMasked, "masked_mean_rows: no unmasked rows");
  out /= static_cast<T>(n);
  const int ia = a.id();
  const Index rows = a.rows();
  return a.tape()->make(std::move(out), {a}, [ia, mask, n, rows](Tape<T>& t, int self) {
    Matrix<T> g = Matrix<T>::Zero(rows, t.grad(self).cols());
    const T inv = T(1) / static_cast<T>(n);
    for (Index r = 0; r < rows; ++r) {
      if (mask[r]) g.row(r) = t.grad(self).row(0) * inv;
    }
    t.accumulate(ia, g);
  });
}

/// Zeros every row whose mask entry is false.
template <class T>
Var<T> mask_rows(const Var<T>& a, const std::vector<bool>& mask) {
  if (static_cast<Index>(mask.size()) != a.rows()) fail(ErrorKind::ShapeMismatch, "mask_rows: mask length");
  Matrix<T> out = a.value();
  for (Index r = 0; r < out.rows(); ++r) {
    if (!mask[r]) out.row(r).setZero();
  }
  const int ia = a.id();
  return a.tape()->make(std::move(out), {a}, [ia, mask](Tape<T>& t, int self) {
    Matrix<T> g = t.grad(self);
    for (Index r = 0; r < g.rows(); ++r) {
      if (!mask[r]) g.row(r).setZero();
    }
    t.accumulate(ia, g);
  });
}

template <class T>
Var<T> slice_cols(const Var<T>& a, Index start, Index count) {
  if (start < 0 || start + count > a.cols()) fail(ErrorKind::ShapeMismatch, "slice_cols: out of range");
  Matrix<T> out = a.value().middleCols(start, count);
  const int ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return a.tape()->make(std::move(out), {a}, [ia, start, count, r, c](Tape<T>& t, int self) {
    Matrix<T> g = Matrix<T>::Zero(r, c);
    g.middleCols(start, count) = t.grad(self);
    t.accumulate(ia, g);
  });
}

template <class T>
Var<T> slice_rows(const Var<T>& a, Index start, Index count) {
  if (start < 0 || start + count > a.rows()) fail(ErrorKind::ShapeMismatch, "slice_rows: out of range");
  Matrix<T> out = a.value().middleRows(start, count);
  const int ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return a.tape()->make(std::move(out), {a}, [ia, start, count, r, c](Tape<T>& t, int self) {
    Matrix<T> g = Matrix<T>::Zero(r, c);
    g.middleRows(start, count) = t.grad(self);
    t.accumulate(ia, g);
  });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) fail(ErrorKind::ShapeMismatch, "concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) fail(ErrorKind::ShapeMismatch, "concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix<T> out(rows, cols);
  std::vector<std::pair<int, Index>> spans;
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    spans.emplace_back(p.id(), p.cols());
    at += p.cols();
  }
  return parts.front().tape()->make(std::move(out), parts, [spans](Tape<T>& t, int self) {
    Index off = 0;
    for (const auto& [id, n] : spans) {
      if (t.needs_grad(id)) t.accumulate(id, t.grad(self).middleCols(off, n));
      off += n;
    }
  });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) fail(ErrorKind::ShapeMismatch, "concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) fail(ErrorKind::ShapeMismatch, "concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix<T> out(rows, cols);
  std::vector<std::pair<int, Index>> spans;
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    spans.emplace_back(p.id(), p.rows());
    at += p.rows();
  }
  return parts.front().tape()->make(std::move(out), parts, [spans](Tape<T>& t, int self) {
    Index off = 0;
    for (const auto& [id, n] : spans) {
      if (t.needs_grad(id)) t.accumulate(id, t.grad(self).middleRows(off, n));
      off += n;
    }
  });
}

// ---------------------------------------------------------------------------
// Fused normalizations

/// Row-wise softmax. Columns with allowed[c] == false get probability 0.
/// An empty `allowed` permits every column.
template <class T>
Var<T> softmax_rows(const Var<T>& a, const std::vector<bool>& allowed = {}) {
  const auto& x = a.value();
  if (!allowed.empty() && static_cast<Index>(allowed.size()) != x.cols()) {
    fail(ErrorKind::ShapeMismatch, "softmax_rows: mask length");
  }
  bool any = allowed.empty();
  for (bool b : allowed) any = any || b;
  if (!any) fail(ErrorKind::AllMasked, "softmax_rows: every column masked");
  Matrix<T> out = Matrix<T>::Zero(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    for (Index c = 0; c < x.cols(); ++c) {
      if (allowed.empty() || allowed[c]) mx = std::max(mx, x(r, c));
    }
    T total = 0;
    for (Index c = 0; c < x.cols(); ++c) {
      if (allowed.empty() || allowed[c]) {
        out(r, c) = std::exp(x(r, c) - mx);
        total += out(r, c);
      }
    }
    out.row(r) /= total;
  }
  const int ia = a.id();
  return a.tape()->make(std::move(out), {a}, [ia](Tape<T>& t, int self) {
    const auto& y = t.value(self);
    const auto& g = t.grad(self);
    Matrix<T> dx = y.cwiseProduct(g);
    Eigen::Matrix<T, Eigen::Dynamic, 1> dot = dx.rowwise().sum();
    dx -= y.cwiseProduct(dot.replicate(1, y.cols()));
    t.accumulate(ia, dx);
  });
}

template <class T>
Var<T> log_softmax_rows(const Var<T>& a) {
  const auto& x = a.value();
  Matrix<T> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const T mx = x.row(r).maxCoeff();
    const T lse = mx + std::log((x.row(r).array() - mx).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  const int ia = a.id();
  return a.tape()->make(std::move(out), {a}, [ia](Tape<T>& t, int self) {
    const auto& y = t.value(self);
    const auto& g = t.grad(self);
    Matrix<T> dx = g;
    Eigen::Matrix<T, Eigen::Dynamic, 1> gs = g.rowwise().sum();
    dx -= y.array().exp().matrix().cwiseProduct(gs.replicate(1, y.cols()));
    t.accumulate(ia, dx);
  });
}

template <class T>
Var<T> layer_norm_rows(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const auto& xv = x.value();
  const Index n = xv.cols();
  if (gamma.cols() != n || beta.cols() != n) fail(ErrorKind::ShapeMismatch, "layer_norm_rows: affine width");
  Matrix<T> xhat(xv.rows(), n);
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const T mu = xv.row(r).mean();
    const T var = (xv.row(r).array() - mu).square().mean();
    rstd(r) = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * rstd(r);
  }
  Matrix<T> out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape()->make(std::move(out), {x, gamma, beta},
                        [ix, ig, ib, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, int self) {
                          const auto& g = t.grad(self);
                          if (t.needs_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
                          if (t.needs_grad(ib)) t.accumulate(ib, g.colwise().sum());
                          if (t.needs_grad(ix)) {
                            Matrix<T> dxhat = g.array().rowwise() * t.value(ig).row(0).array();
                            const T inv_n = T(1) / static_cast<T>(dxhat.cols());
                            Matrix<T> dx(dxhat.rows(), dxhat.cols());
                            for (Index r = 0; r < dxhat.rows(); ++r) {
                              const T m1 = dxhat.row(r).sum() * inv_n;
                              const T m2 = dxhat.row(r).dot(xhat.row(r)) * inv_n;
                              dx.row(r) = rstd(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                            }
                            t.accumulate(ix, dx);
                          }
                        });
}

// ---------------------------------------------------------------------------
// Loss-shaped fused ops

/// Picks a[r, cols[r]] for each row and returns their sum as 1x1.
template <class T>
Var<T> pick_sum(const Var<T>& a, const std::vector<int>& cols) {
  if (static_cast<Index>(cols.size()) != a.rows()) fail(ErrorKind::LengthMismatch, "pick_sum: index count");
  T total = 0;
  for (Index r = 0; r < a.rows(); ++r) {
    if (cols[r] < 0 || cols[r] >= a.cols()) fail(ErrorKind::IndexOutOfRange, "pick_sum: column index");
    total += a.value()(r, cols[r]);
  }
  const int ia = a.id();
  const Index rows = a.rows(), ncols = a.cols();
  return a.tape()->make(Matrix<T>::Constant(1, 1, total), {a}, [ia, cols, rows, ncols](Tape<T>& t, int self) {
    Matrix<T> g = Matrix<T>::Zero(rows, ncols);
    for (Index r = 0; r < rows; ++r) g(r, cols[r]) = t.grad(self)(0, 0);
    t.accumulate(ia, g);
  });
}

/// Row-wise cosine similarity with epsilon-guarded norms; returns Bx1.
template <class T>
Var<T> cosine_rows(const Var<T>& a, const Var<T>& b, T eps = T(1e-8)) {
  detail::check_same_shape(a, b, "cosine_rows");
  const auto& av = a.value();
  const auto& bv = b.value();
  const Index rows = av.rows();
  Eigen::Matrix<T, Eigen::Dynamic, 1> na(rows), nb(rows), dots(rows);
  Matrix<T> out(rows, 1);
  for (Index r = 0; r < rows; ++r) {
    na(r) = av.row(r).norm() + eps;
    nb(r) = bv.row(r).norm() + eps;
    dots(r) = av.row(r).dot(bv.row(r));
    out(r, 0) = dots(r) / (na(r) * nb(r));
  }
  const int ia = a.id(), ib = b.id();
  return a.tape()->make(std::move(out), {a, b}, [ia, ib, na, nb, dots, eps](Tape<T>& t, int self) {
    const auto& av = t.value(ia);
    const auto& bv = t.value(ib);
    const auto& g = t.grad(self);
    Matrix<T> ga(av.rows(), av.cols()), gb(bv.rows(), bv.cols());
    for (Index r = 0; r < av.rows(); ++r) {
      const T d = na(r) * nb(r);
      // d/da (a.b / ((|a|+e)(|b|+e))) = b/d - (a.b) a / (|a| (|a|+e)^2 (|b|+e))
      const T raw_a = na(r) - eps, raw_b = nb(r) - eps;
      ga.row(r) = g(r, 0) * (bv.row(r) / d -
                             (raw_a > T(0) ? dots(r) / (raw_a * na(r) * d) : T(0)) * av.row(r));
      gb.row(r) = g(r, 0) * (av.row(r) / d -
                             (raw_b > T(0) ? dots(r) / (raw_b * nb(r) * d) : T(0)) * bv.row(r));
    }
    if (t.needs_grad(ia)) t.accumulate(ia, ga);
    if (t.needs_grad(ib)) t.accumulate(ib, gb);
  });
}

}  // namespace t2t::ag
