#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// A Tape records every operation applied to Vars; Tape::backward walks the
// records in reverse and accumulates gradients. Leaves created with
// Tape::leaf() are bound to a Parameter and push their gradient into
// Parameter::grad at the end of a backward pass. Nodes whose inputs do not
// require gradients get no backward closure at all, so feeding a frozen
// module through the tape as constants costs nothing extra.

#include "anon/errors.hpp"
#include "anon/tensor.hpp"

#include <cmath>
#include <functional>
#include <initializer_list>
#include <type_traits>
#include <string>
#include <utility>
#include <vector>

namespace anon {

template <typename Scalar>
struct Parameter {
  std::string name;
  Mat<Scalar> value;
  Mat<Scalar> grad;

  Parameter() = default;
  Parameter(std::string n, Mat<Scalar> v)
      : name(std::move(n)), value(std::move(v)), grad(Mat<Scalar>::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Eigen::Index size() const { return value.size(); }
};

template <typename Scalar>
class Tape;

template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  const Mat<Scalar>& value() const { return tape->value(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Scalar scalar() const { return value()(0, 0); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

template <typename Scalar>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Mat<Scalar> value) { return push(std::move(value), false, nullptr, {}); }

  Var<Scalar> leaf(Parameter<Scalar>& p) {
    Var<Scalar> v = push(p.value, true, &p, {});
    return v;
  }

  // Records an op. `fn` is dropped when no input requires a gradient.
  Var<Scalar> record(Mat<Scalar> value, std::initializer_list<Var<Scalar>> inputs, Backward fn) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || requires_grad(in.id);
    return push(std::move(value), needs, nullptr, needs ? std::move(fn) : Backward{});
  }
  Var<Scalar> record(Mat<Scalar> value, const std::vector<Var<Scalar>>& inputs, Backward fn) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || requires_grad(in.id);
    return push(std::move(value), needs, nullptr, needs ? std::move(fn) : Backward{});
  }

  const Mat<Scalar>& value(int id) const { return nodes_[id].value; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  bool has_grad(int id) const { return nodes_[id].grad.size() > 0; }

  // Upstream gradient of node `id`; only valid inside a backward closure.
  const Mat<Scalar>& grad(int id) const { return nodes_[id].grad; }

  template <typename Derived>
  void accumulate(Var<Scalar> v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  // Gradient of the scalar `out` w.r.t. every leaf; leaves forward into
  // their Parameter::grad (accumulating). Node gradients from a previous
  // backward call are discarded first, so a tape may be reused to take
  // gradients of several different outputs.
  void backward(Var<Scalar> out, Scalar seed = Scalar(1)) {
    if (out.value().size() != 1) throw ShapeError("backward() needs a scalar output");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    if (!nodes_[out.id].requires_grad) return;
    nodes_[out.id].grad = Mat<Scalar>::Constant(1, 1, seed);
    for (int id = out.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, id);
      if (n.param != nullptr) n.param->grad += n.grad;
    }
  }

  // Gradient of the last backward() w.r.t. an arbitrary node (zeros if the
  // node was not reached).
  Mat<Scalar> grad_of(Var<Scalar> v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.size() == 0) return Mat<Scalar>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<Scalar> value;
    Mat<Scalar> grad;
    bool requires_grad = false;
    Parameter<Scalar>* param = nullptr;
    Backward backward;
  };

  Var<Scalar> push(Mat<Scalar> value, bool needs, Parameter<Scalar>* p, Backward fn) {
    nodes_.push_back(Node{std::move(value), Mat<Scalar>(), needs, p, std::move(fn)});
    return Var<Scalar>{this, static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
};

namespace ad {

namespace detail {
template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
}
}  // namespace detail

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  Mat<Scalar> out = a.value() * b.value();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    if (a.requires_grad()) t.accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) t.accumulate(b, a.value().transpose() * g);
  });
}

// a * b^T, the natural form for y = x W^T with W stored [out x in].
template <typename Scalar>
Var<Scalar> matmul_nt(Var<Scalar> a, Var<Scalar> b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimensions differ");
  Mat<Scalar> out = a.value() * b.value().transpose();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    if (a.requires_grad()) t.accumulate(a, g * b.value());
    if (b.requires_grad()) t.accumulate(b, g.transpose() * a.value());
  });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_shape(a, b, "add");
  Mat<Scalar> out = a.value() + b.value();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, int self) {
    t.accumulate(a, t.grad(self));
    t.accumulate(b, t.grad(self));
  });
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_shape(a, b, "sub");
  Mat<Scalar> out = a.value() - b.value();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, int self) {
    t.accumulate(a, t.grad(self));
    if (b.requires_grad()) t.accumulate(b, -t.grad(self));
  });
}

template <typename Scalar>
Var<Scalar> cwise_mul(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_shape(a, b, "cwise_mul");
  Mat<Scalar> out = a.value().cwiseProduct(b.value());
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    if (a.requires_grad()) t.accumulate(a, g.cwiseProduct(b.value()));
    if (b.requires_grad()) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, std::type_identity_t<Scalar> s) {
  Mat<Scalar> out = a.value() * s;
  return a.tape->record(std::move(out), {a}, [a, s](Tape<Scalar>& t, int self) {
    t.accumulate(a, t.grad(self) * s);
  });
}

// Adds a [1 x n] row to every row of a.
template <typename Scalar>
Var<Scalar> add_row(Var<Scalar> a, Var<Scalar> row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bias must be [1 x cols]");
  Mat<Scalar> out = a.value().rowwise() + row.value().row(0);
  return a.tape->record(std::move(out), {a, row}, [a, row](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    t.accumulate(a, g);
    if (row.requires_grad()) t.accumulate(row, g.colwise().sum());
  });
}

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> a) {
  Mat<Scalar> out = a.value().cwiseMax(Scalar(0));
  return a.tape->record(std::move(out), {a}, [a](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    Mat<Scalar> da = (a.value().array() > Scalar(0)).select(g.array(), Scalar(0)).matrix();
    t.accumulate(a, da);
  });
}

template <typename Scalar>
Var<Scalar> tanh(Var<Scalar> a) {
  Mat<Scalar> out = a.value().array().tanh().matrix();
  return a.tape->record(std::move(out), {a}, [a](Tape<Scalar>& t, int self) {
    const auto& y = t.value(self);
    t.accumulate(a, (t.grad(self).array() * (Scalar(1) - y.array().square())).matrix());
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> a) {
  Mat<Scalar> out = (Scalar(1) / (Scalar(1) + (-a.value().array()).exp())).matrix();
  return a.tape->record(std::move(out), {a}, [a](Tape<Scalar>& t, int self) {
    const auto& y = t.value(self);
    t.accumulate(a, (t.grad(self).array() * y.array() * (Scalar(1) - y.array())).matrix());
  });
}

// Elementwise clamp to [lo, hi]; the gradient passes only where x is inside.
template <typename Scalar>
Var<Scalar> clamp(Var<Scalar> a, std::type_identity_t<Scalar> lo, std::type_identity_t<Scalar> hi) {
  Mat<Scalar> out = a.value().cwiseMax(lo).cwiseMin(hi);
  return a.tape->record(std::move(out), {a}, [a, lo, hi](Tape<Scalar>& t, int self) {
    Mat<Scalar> inside = a.value().unaryExpr([lo, hi](Scalar v) { return v >= lo && v <= hi ? Scalar(1) : Scalar(0); });
    t.accumulate(a, t.grad(self).cwiseProduct(inside));
  });
}

// log(1 + exp(x)), evaluated without overflow.
template <typename Scalar>
Var<Scalar> softplus(Var<Scalar> a) {
  const auto& x = a.value();
  Mat<Scalar> out = x.unaryExpr([](Scalar v) {
    return v > Scalar(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  });
  return a.tape->record(std::move(out), {a}, [a](Tape<Scalar>& t, int self) {
    Mat<Scalar> s = a.value().unaryExpr([](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); });
    t.accumulate(a, t.grad(self).cwiseProduct(s));
  });
}

template <typename Scalar>
Var<Scalar> square(Var<Scalar> a) {
  Mat<Scalar> out = a.value().array().square().matrix();
  return a.tape->record(std::move(out), {a}, [a](Tape<Scalar>& t, int self) {
    t.accumulate(a, (Scalar(2) * t.grad(self).array() * a.value().array()).matrix());
  });
}

template <typename Scalar>
Var<Scalar> abs(Var<Scalar> a) {
  Mat<Scalar> out = a.value().cwiseAbs();
  return a.tape->record(std::move(out), {a}, [a](Tape<Scalar>& t, int self) {
    Mat<Scalar> sgn = a.value().unaryExpr(
        [](Scalar v) { return v > Scalar(0) ? Scalar(1) : (v < Scalar(0) ? Scalar(-1) : Scalar(0)); });
    t.accumulate(a, t.grad(self).cwiseProduct(sgn));
  });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  Mat<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape->record(std::move(out), {a}, [a](Tape<Scalar>& t, int self) {
    t.accumulate(a, Mat<Scalar>::Constant(a.rows(), a.cols(), t.grad(self)(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> mean(Var<Scalar> a) {
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.value().size()));
}

// Weighted sum of 1x1 vars: sum_i w_i * x_i.
template <typename Scalar>
Var<Scalar> weighted_sum(const std::vector<Var<Scalar>>& xs, const std::vector<Scalar>& ws) {
  if (xs.empty() || xs.size() != ws.size()) throw ShapeError("weighted_sum: size mismatch");
  Mat<Scalar> out = Mat<Scalar>::Zero(1, 1);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].value().size() != 1) throw ShapeError("weighted_sum: inputs must be scalars");
    out(0, 0) += ws[i] * xs[i].scalar();
  }
  return xs.front().tape->record(std::move(out), xs, [xs, ws](Tape<Scalar>& t, int self) {
    const Scalar g = t.grad(self)(0, 0);
    for (std::size_t i = 0; i < xs.size(); ++i)
      t.accumulate(xs[i], Mat<Scalar>::Constant(1, 1, g * ws[i]));
  });
}

// Mean over consecutive groups of `group` rows: [B*group x d] -> [B x d].
// This is the token pooling used everywhere a clip is reduced to a vector.
template <typename Scalar>
Var<Scalar> mean_pool_rows(Var<Scalar> a, Eigen::Index group) {
  if (group <= 0 || a.rows() % group != 0) throw ShapeError("mean_pool_rows: rows not divisible by group");
  const Eigen::Index batch = a.rows() / group;
  Mat<Scalar> out(batch, a.cols());
  for (Eigen::Index b = 0; b < batch; ++b)
    out.row(b) = a.value().middleRows(b * group, group).colwise().mean();
  return a.tape->record(std::move(out), {a}, [a, group, batch](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    Mat<Scalar> da(a.rows(), a.cols());
    const Scalar inv = Scalar(1) / static_cast<Scalar>(group);
    for (Eigen::Index b = 0; b < batch; ++b)
      da.middleRows(b * group, group) = (g.row(b) * inv).replicate(group, 1);
    t.accumulate(a, da);
  });
}

template <typename Scalar>
Var<Scalar> max_pool_rows(Var<Scalar> a, Eigen::Index group) {
  if (group <= 0 || a.rows() % group != 0) throw ShapeError("max_pool_rows: rows not divisible by group");
  const Eigen::Index batch = a.rows() / group;
  Mat<Scalar> out(batch, a.cols());
  Eigen::Matrix<Eigen::Index, Eigen::Dynamic, Eigen::Dynamic> arg(batch, a.cols());
  for (Eigen::Index b = 0; b < batch; ++b)
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
      Eigen::Index r;
      out(b, c) = a.value().col(c).segment(b * group, group).maxCoeff(&r);
      arg(b, c) = b * group + r;
    }
  return a.tape->record(std::move(out), {a}, [a, arg](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    Mat<Scalar> da = Mat<Scalar>::Zero(a.rows(), a.cols());
    for (Eigen::Index b = 0; b < g.rows(); ++b)
      for (Eigen::Index c = 0; c < g.cols(); ++c) da(arg(b, c), c) += g(b, c);
    t.accumulate(a, da);
  });
}

template <typename Scalar>
Var<Scalar> slice_rows(Var<Scalar> a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows: out of range");
  Mat<Scalar> out = a.value().middleRows(start, count);
  return a.tape->record(std::move(out), {a}, [a, start, count](Tape<Scalar>& t, int self) {
    Mat<Scalar> da = Mat<Scalar>::Zero(a.rows(), a.cols());
    da.middleRows(start, count) = t.grad(self);
    t.accumulate(a, da);
  });
}

template <typename Scalar>
Var<Scalar> concat_rows(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Mat<Scalar> out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return parts.front().tape->record(std::move(out), parts, [parts](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    Eigen::Index r0 = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) t.accumulate(p, g.middleRows(r0, p.rows()));
      r0 += p.rows();
    }
  });
}

// Row-major reshape (same element order).
template <typename Scalar>
Var<Scalar> reshape(Var<Scalar> a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) throw ShapeError("reshape: element count differs");
  Mat<Scalar> out = Eigen::Map<const Mat<Scalar>>(a.value().data(), rows, cols);
  return a.tape->record(std::move(out), {a}, [a](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    t.accumulate(a, Eigen::Map<const Mat<Scalar>>(g.data(), a.rows(), a.cols()));
  });
}

// Per-row Euclidean norm sqrt(|x|^2 + eps): [n x d] -> [n x 1]. The eps keeps
// the gradient finite at the origin.
template <typename Scalar>
Var<Scalar> row_norm(Var<Scalar> a, std::type_identity_t<Scalar> eps) {
  ColVec<Scalar> n = (a.value().rowwise().squaredNorm().array() + eps).sqrt().matrix();
  Mat<Scalar> out = n;
  return a.tape->record(std::move(out), {a}, [a, n](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    Mat<Scalar> da = a.value();
    for (Eigen::Index r = 0; r < da.rows(); ++r) da.row(r) *= g(r, 0) / n(r);
    t.accumulate(a, da);
  });
}

// Row-wise layer normalization with affine gamma/beta ([1 x d] each).
template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, std::type_identity_t<Scalar> eps = Scalar(1e-5)) {
  const Eigen::Index n = x.rows(), d = x.cols();
  Mat<Scalar> xhat(n, d);
  ColVec<Scalar> inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const Scalar mu = x.value().row(r).mean();
    const Scalar var = (x.value().row(r).array() - mu).square().mean();
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (x.value().row(r).array() - mu) * inv_std(r);
  }
  Mat<Scalar> out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return x.tape->record(std::move(out), {x, gamma, beta},
                        [x, gamma, beta, xhat, inv_std](Tape<Scalar>& t, int self) {
                          const auto& g = t.grad(self);
                          if (gamma.requires_grad())
                            t.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
                          if (beta.requires_grad()) t.accumulate(beta, g.colwise().sum());
                          if (x.requires_grad()) {
                            Mat<Scalar> gx = g.array().rowwise() * gamma.value().row(0).array();
                            Mat<Scalar> dx(gx.rows(), gx.cols());
                            for (Eigen::Index r = 0; r < gx.rows(); ++r) {
                              const Scalar m1 = gx.row(r).mean();
                              const Scalar m2 = gx.row(r).cwiseProduct(xhat.row(r)).mean();
                              dx.row(r) = (gx.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r);
                            }
                            t.accumulate(x, dx);
                          }
                        });
}

// Batch normalization in training mode: statistics over rows, one per
// column (BatchNorm1d over a [N x d] matrix). The batch mean and biased
// variance are written to *batch_mean / *batch_var for running averages.
template <typename Scalar>
Var<Scalar> batch_norm_train(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, std::type_identity_t<Scalar> eps,
                             std::type_identity_t<RowVec<Scalar>>* batch_mean,
                             std::type_identity_t<RowVec<Scalar>>* batch_var) {
  const Eigen::Index n = x.rows();
  if (n < 2) throw ShapeError("batch_norm_train: need at least 2 rows");
  RowVec<Scalar> mu = x.value().colwise().mean();
  Mat<Scalar> centered = x.value().rowwise() - mu;
  RowVec<Scalar> var = centered.array().square().colwise().mean();
  RowVec<Scalar> inv_std = (var.array() + eps).rsqrt();
  Mat<Scalar> xhat = centered.array().rowwise() * inv_std.array();
  if (batch_mean) *batch_mean = mu;
  if (batch_var) *batch_var = var;
  Mat<Scalar> out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return x.tape->record(std::move(out), {x, gamma, beta},
                        [x, gamma, beta, xhat, inv_std](Tape<Scalar>& t, int self) {
                          const auto& g = t.grad(self);
                          if (gamma.requires_grad())
                            t.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
                          if (beta.requires_grad()) t.accumulate(beta, g.colwise().sum());
                          if (x.requires_grad()) {
                            Mat<Scalar> gx = g.array().rowwise() * gamma.value().row(0).array();
                            RowVec<Scalar> m1 = gx.colwise().mean();
                            RowVec<Scalar> m2 = gx.cwiseProduct(xhat).colwise().mean();
                            Mat<Scalar> dx = ((gx.rowwise() - m1).array() - xhat.array().rowwise() * m2.array())
                                                 .rowwise() *
                                             inv_std.array();
                            t.accumulate(x, dx);
                          }
                        });
}

// Scaled dot-product multi-head attention over independent sequences.
// q, k, v are [B*T x d]; each block of T rows is one sequence; the model
// dimension is split into `heads` contiguous column groups.
template <typename Scalar>
Var<Scalar> multi_head_attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v, Eigen::Index seq_len,
                                 Eigen::Index heads) {
  detail::require_same_shape(q, k, "attention");
  detail::require_same_shape(q, v, "attention");
  const Eigen::Index d = q.cols();
  if (heads <= 0 || d % heads != 0) throw ShapeError("attention: dim not divisible by heads");
  if (seq_len <= 0 || q.rows() % seq_len != 0) throw ShapeError("attention: rows not divisible by seq_len");
  const Eigen::Index batch = q.rows() / seq_len, dh = d / heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  // probs[b * heads + h] is the [T x T] attention matrix.
  std::vector<Mat<Scalar>> probs(static_cast<std::size_t>(batch * heads));
  Mat<Scalar> out(q.rows(), d);
  for (Eigen::Index b = 0; b < batch; ++b)
    for (Eigen::Index h = 0; h < heads; ++h) {
      auto qb = q.value().block(b * seq_len, h * dh, seq_len, dh);
      auto kb = k.value().block(b * seq_len, h * dh, seq_len, dh);
      auto vb = v.value().block(b * seq_len, h * dh, seq_len, dh);
      Mat<Scalar> s = (qb * kb.transpose()) * inv_sqrt;
      for (Eigen::Index r = 0; r < seq_len; ++r) {
        const Scalar m = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - m).exp();
        s.row(r) /= s.row(r).sum();
      }
      out.block(b * seq_len, h * dh, seq_len, dh) = s * vb;
      probs[static_cast<std::size_t>(b * heads + h)] = std::move(s);
    }

  return q.tape->record(
      std::move(out), {q, k, v}, [q, k, v, probs, seq_len, heads, dh, batch, inv_sqrt](Tape<Scalar>& t, int self) {
        const auto& g = t.grad(self);
        Mat<Scalar> dq = Mat<Scalar>::Zero(q.rows(), q.cols());
        Mat<Scalar> dk = Mat<Scalar>::Zero(q.rows(), q.cols());
        Mat<Scalar> dv = Mat<Scalar>::Zero(q.rows(), q.cols());
        for (Eigen::Index b = 0; b < batch; ++b)
          for (Eigen::Index h = 0; h < heads; ++h) {
            const Mat<Scalar>& p = probs[static_cast<std::size_t>(b * heads + h)];
            auto go = g.block(b * seq_len, h * dh, seq_len, dh);
            auto qb = q.value().block(b * seq_len, h * dh, seq_len, dh);
            auto kb = k.value().block(b * seq_len, h * dh, seq_len, dh);
            auto vb = v.value().block(b * seq_len, h * dh, seq_len, dh);
            dv.block(b * seq_len, h * dh, seq_len, dh) = p.transpose() * go;
            Mat<Scalar> dp = go * vb.transpose();
            ColVec<Scalar> rowdot = dp.cwiseProduct(p).rowwise().sum();
            Mat<Scalar> ds = (p.array() * (dp.colwise() - rowdot).array()).matrix() * inv_sqrt;
            dq.block(b * seq_len, h * dh, seq_len, dh) = ds * kb;
            dk.block(b * seq_len, h * dh, seq_len, dh) = ds.transpose() * qb;
          }
        if (q.requires_grad()) t.accumulate(q, dq);
        if (k.requires_grad()) t.accumulate(k, dk);
        if (v.requires_grad()) t.accumulate(v, dv);
      });
}

// Unfolds independent sequences for a 1-D convolution with zero padding:
// [B*T x C] -> [B*T x kernel*C], row t holding inputs t-kernel/2 .. t+kernel/2.
template <typename Scalar>
Var<Scalar> temporal_im2col(Var<Scalar> x, Eigen::Index seq_len, Eigen::Index kernel) {
  if (kernel <= 0 || kernel % 2 == 0) throw ShapeError("temporal_im2col: kernel must be odd");
  if (seq_len <= 0 || x.rows() % seq_len != 0) throw ShapeError("temporal_im2col: rows not divisible by seq_len");
  const Eigen::Index c = x.cols(), batch = x.rows() / seq_len, half = kernel / 2;
  Mat<Scalar> out = Mat<Scalar>::Zero(x.rows(), kernel * c);
  for (Eigen::Index b = 0; b < batch; ++b)
    for (Eigen::Index tt = 0; tt < seq_len; ++tt)
      for (Eigen::Index j = 0; j < kernel; ++j) {
        const Eigen::Index src = tt + j - half;
        if (src < 0 || src >= seq_len) continue;
        out.block(b * seq_len + tt, j * c, 1, c) = x.value().row(b * seq_len + src);
      }
  return x.tape->record(std::move(out), {x}, [x, seq_len, kernel, c, batch, half](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    Mat<Scalar> dx = Mat<Scalar>::Zero(x.rows(), c);
    for (Eigen::Index b = 0; b < batch; ++b)
      for (Eigen::Index tt = 0; tt < seq_len; ++tt)
        for (Eigen::Index j = 0; j < kernel; ++j) {
          const Eigen::Index src = tt + j - half;
          if (src < 0 || src >= seq_len) continue;
          dx.row(b * seq_len + src) += g.block(b * seq_len + tt, j * c, 1, c);
        }
    t.accumulate(x, dx);
  });
}

// Attaches a fused scalar function whose value and input gradients were
// computed together (the loss layers use this).
template <typename Scalar>
Var<Scalar> fused_scalar(Scalar value, const std::vector<Var<Scalar>>& inputs, std::vector<Mat<Scalar>> grads) {
  if (inputs.empty() || inputs.size() != grads.size()) throw ShapeError("fused_scalar: size mismatch");
  Mat<Scalar> out(1, 1);
  out(0, 0) = value;
  return inputs.front().tape->record(std::move(out), inputs,
                                     [inputs, grads = std::move(grads)](Tape<Scalar>& t, int self) {
                                       const Scalar g = t.grad(self)(0, 0);
                                       for (std::size_t i = 0; i < inputs.size(); ++i)
                                         if (inputs[i].requires_grad()) t.accumulate(inputs[i], grads[i] * g);
                                     });
}

}  // namespace ad
}  // namespace anon
