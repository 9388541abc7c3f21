/*
 * Copyright 2026 The icm Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "icm/autodiff.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>

#include "icm/errors.hpp"

namespace icm::ad {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

void same_tape(Var a, Var b, std::string_view op) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw ContractError(std::string(op) + ": operands live on different tapes");
  }
}

void same_shape(Var a, Var b, std::string_view op) {
  same_tape(a, b, op);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": lhs is " + shape_str(a.value()) +
                     ", rhs is " + shape_str(b.value()));
  }
}

void accumulate(Tape& t, std::size_t id, const Matrix& g) {
  if (t.requires_grad(id)) t.grad_ref(id) += g;
}

template <typename Fn>
Var unary(Var a, OpTag tag, Matrix value, Fn local_grad) {
  const std::size_t pa = a.id();
  return a.tape()->push(
      std::move(value), tag, {pa},
      [pa, local_grad](Tape& t, std::size_t self) {
        accumulate(t, pa, local_grad(t.value(pa), t.value(self), t.grad_of(self)));
      });
}

}  // namespace

std::string_view op_name(OpTag tag) {
  switch (tag) {
    case OpTag::kConstant: return "constant";
    case OpTag::kLeaf: return "leaf";
    case OpTag::kParam: return "param";
    case OpTag::kAdd: return "add";
    case OpTag::kSub: return "sub";
    case OpTag::kMul: return "mul";
    case OpTag::kDiv: return "div";
    case OpTag::kMatmul: return "matmul";
    case OpTag::kExp: return "exp";
    case OpTag::kLog: return "log";
    case OpTag::kTanh: return "tanh";
    case OpTag::kRelu: return "relu";
    case OpTag::kSoftplus: return "softplus";
    case OpTag::kSum: return "sum";
    case OpTag::kSquare: return "square";
    case OpTag::kClip: return "clip";
    case OpTag::kAddRow: return "add_row";
    case OpTag::kScale: return "scale";
    case OpTag::kAddScalar: return "add_scalar";
    case OpTag::kSliceCols: return "slice_cols";
    case OpTag::kConcatCols: return "concat_cols";
    case OpTag::kBroadcastCols: return "broadcast_cols";
    case OpTag::kRowSum: return "row_sum";
  }
  return "unknown";
}

const Matrix& Var::value() const {
  if (tape_ == nullptr) throw ContractError("use of an unbound Var");
  return tape_->value(id_);
}

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) {
    throw ContractError("scalar() on a " + shape_str(v) + " node");
  }
  return v(0, 0);
}

Var Tape::push(Matrix value, OpTag op, std::vector<std::size_t> parents,
               BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.op = op;
  for (std::size_t p : parents) n.requires_grad |= nodes_[p].requires_grad;
  n.parents = std::move(parents);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
  return push(std::move(value), OpTag::kConstant, {}, nullptr);
}

Var Tape::constant(double value) {
  return constant(Matrix::Constant(1, 1, value));
}

Var Tape::leaf(Matrix value) {
  Var v = push(std::move(value), OpTag::kLeaf, {}, nullptr);
  nodes_.back().requires_grad = true;
  return v;
}

Var Tape::param(const ParamStore& store, std::size_t idx) {
  if (store_ == nullptr) {
    store_ = &store;
  } else if (store_ != &store) {
    throw ContractError("a tape can bind parameters from one store only");
  }
  if (param_nodes_.size() < store.segments().size()) {
    param_nodes_.resize(store.segments().size(), -1);
  }
  if (param_nodes_[idx] >= 0) {
    return Var(this, static_cast<std::size_t>(param_nodes_[idx]));
  }
  Var v = push(Matrix(store.view(idx)), OpTag::kParam, {}, nullptr);
  nodes_.back().requires_grad = true;
  param_nodes_[idx] = static_cast<std::ptrdiff_t>(v.id());
  return v;
}

Var Tape::param(const ParamStore& store, std::string_view name) {
  return param(store, store.index(name));
}

void Tape::backward(Var root) {
  if (root.tape() != this) throw ContractError("backward: root from another tape");
  const Matrix& rv = nodes_[root.id()].value;
  if (rv.rows() != 1 || rv.cols() != 1) {
    throw ContractError("backward: root must be scalar, got " + shape_str(rv));
  }
  for (Node& n : nodes_) {
    if (n.requires_grad) {
      n.grad.setZero(n.value.rows(), n.value.cols());
    } else {
      n.grad.resize(0, 0);
    }
  }
  if (!nodes_[root.id()].requires_grad) return;

  std::vector<char> reached(root.id() + 1, 0);
  reached[root.id()] = 1;
  nodes_[root.id()].grad(0, 0) = 1.0;
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    if (!reached[id]) continue;
    Node& n = nodes_[id];
    if (!n.requires_grad) continue;
    for (std::size_t p : n.parents) reached[p] = 1;
    if (n.backward) n.backward(*this, id);
  }
}

const Matrix& Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.size() == 0 && n.value.size() != 0) {
    // Constants and never-differentiated tapes report a zero gradient.
    static thread_local Matrix zero;
    zero.setZero(n.value.rows(), n.value.cols());
    return zero;
  }
  return n.grad;
}

Vector Tape::param_gradient(const ParamStore& store) const {
  Vector g = Vector::Zero(static_cast<Eigen::Index>(store.size()));
  if (store_ != nullptr && store_ != &store) {
    throw ContractError("param_gradient: tape is bound to a different store");
  }
  for (std::size_t i = 0; i < param_nodes_.size(); ++i) {
    if (param_nodes_[i] < 0) continue;
    const Node& n = nodes_[static_cast<std::size_t>(param_nodes_[i])];
    if (n.grad.size() == 0) continue;
    const ParamSegment& s = store.segment(i);
    g.segment(static_cast<Eigen::Index>(s.offset),
              static_cast<Eigen::Index>(s.size())) =
        Eigen::Map<const Vector>(n.grad.data(), n.grad.size());
  }
  return g;
}

Var add(Var a, Var b) {
  same_shape(a, b, "add");
  const std::size_t pa = a.id(), pb = b.id();
  return a.tape()->push(a.value() + b.value(), OpTag::kAdd, {pa, pb},
                        [pa, pb](Tape& t, std::size_t self) {
                          accumulate(t, pa, t.grad_of(self));
                          accumulate(t, pb, t.grad_of(self));
                        });
}

Var sub(Var a, Var b) {
  same_shape(a, b, "sub");
  const std::size_t pa = a.id(), pb = b.id();
  return a.tape()->push(a.value() - b.value(), OpTag::kSub, {pa, pb},
                        [pa, pb](Tape& t, std::size_t self) {
                          accumulate(t, pa, t.grad_of(self));
                          accumulate(t, pb, -t.grad_of(self));
                        });
}

Var mul(Var a, Var b) {
  same_shape(a, b, "mul");
  const std::size_t pa = a.id(), pb = b.id();
  return a.tape()->push(
      a.value().cwiseProduct(b.value()), OpTag::kMul, {pa, pb},
      [pa, pb](Tape& t, std::size_t self) {
        const Matrix& g = t.grad_of(self);
        accumulate(t, pa, g.cwiseProduct(t.value(pb)));
        accumulate(t, pb, g.cwiseProduct(t.value(pa)));
      });
}

Var div(Var a, Var b) {
  same_shape(a, b, "div");
  const std::size_t pa = a.id(), pb = b.id();
  return a.tape()->push(
      a.value().cwiseQuotient(b.value()), OpTag::kDiv, {pa, pb},
      [pa, pb](Tape& t, std::size_t self) {
        const Matrix& g = t.grad_of(self);
        const Matrix& bv = t.value(pb);
        accumulate(t, pa, g.cwiseQuotient(bv));
        accumulate(t, pb,
                   -g.cwiseProduct(t.value(self)).cwiseQuotient(bv));
      });
}

Var matmul(Var a, Var b) {
  same_tape(a, b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: lhs is " + shape_str(a.value()) + ", rhs is " +
                     shape_str(b.value()));
  }
  const std::size_t pa = a.id(), pb = b.id();
  return a.tape()->push(
      a.value() * b.value(), OpTag::kMatmul, {pa, pb},
      [pa, pb](Tape& t, std::size_t self) {
        const Matrix& g = t.grad_of(self);
        if (t.requires_grad(pa)) t.grad_ref(pa).noalias() += g * t.value(pb).transpose();
        if (t.requires_grad(pb)) t.grad_ref(pb).noalias() += t.value(pa).transpose() * g;
      });
}

Var exp(Var a) {
  return unary(a, OpTag::kExp, a.value().array().exp().matrix(),
               [](const Matrix&, const Matrix& y, const Matrix& g) -> Matrix {
                 return g.cwiseProduct(y);
               });
}

Var log(Var a) {
  return unary(a, OpTag::kLog, a.value().array().log().matrix(),
               [](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
                 return g.cwiseQuotient(x);
               });
}

Var tanh(Var a) {
  return unary(a, OpTag::kTanh, a.value().array().tanh().matrix(),
               [](const Matrix&, const Matrix& y, const Matrix& g) -> Matrix {
                 return (g.array() * (1.0 - y.array().square())).matrix();
               });
}

Var relu(Var a) {
  return unary(a, OpTag::kRelu, a.value().cwiseMax(0.0),
               [](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
                 return (x.array() > 0.0).select(g, 0.0);
               });
}

Var softplus(Var a) {
  // log(1 + e^x) evaluated without overflow.
  Matrix y = a.value().unaryExpr([](double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  });
  return unary(a, OpTag::kSoftplus, std::move(y),
               [](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
                 Matrix s = x.unaryExpr([](double v) {
                   return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                   : std::exp(v) / (1.0 + std::exp(v));
                 });
                 return g.cwiseProduct(s);
               });
}

Var sum(Var a) {
  return unary(a, OpTag::kSum, Matrix::Constant(1, 1, a.value().sum()),
               [](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
                 return Matrix::Constant(x.rows(), x.cols(), g(0, 0));
               });
}

Var square(Var a) {
  return unary(a, OpTag::kSquare, a.value().array().square().matrix(),
               [](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
                 return 2.0 * g.cwiseProduct(x);
               });
}

Var clip(Var a, double lo, double hi) {
  if (!(lo <= hi)) throw ContractError("clip: lo must not exceed hi");
  return unary(a, OpTag::kClip, a.value().cwiseMax(lo).cwiseMin(hi),
               [lo, hi](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
                 return (x.array() >= lo && x.array() <= hi).select(g, 0.0);
               });
}

Var broadcast_rows(Var row, Eigen::Index b) {
  if (row.rows() == b) return row;
  if (row.rows() != 1) {
    throw ShapeError("broadcast_rows: expected one row, got " + shape_str(row.value()));
  }
  return add_row(row.tape()->constant(Matrix::Zero(b, row.cols())), row);
}

Var add_row(Var a, Var row) {
  same_tape(a, row, "add_row");
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row: lhs is " + shape_str(a.value()) + ", row is " +
                     shape_str(row.value()));
  }
  const std::size_t pa = a.id(), pr = row.id();
  Matrix v = a.value();
  v.rowwise() += row.value().row(0);
  return a.tape()->push(std::move(v), OpTag::kAddRow, {pa, pr},
                        [pa, pr](Tape& t, std::size_t self) {
                          const Matrix& g = t.grad_of(self);
                          accumulate(t, pa, g);
                          if (t.requires_grad(pr)) t.grad_ref(pr) += g.colwise().sum();
                        });
}

Var scale(Var a, double c) {
  return unary(a, OpTag::kScale, a.value() * c,
               [c](const Matrix&, const Matrix&, const Matrix& g) -> Matrix {
                 return g * c;
               });
}

Var add_scalar(Var a, double c) {
  return unary(a, OpTag::kAddScalar, (a.value().array() + c).matrix(),
               [](const Matrix&, const Matrix&, const Matrix& g) -> Matrix {
                 return g;
               });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw ShapeError("slice_cols: columns [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") of a " +
                     shape_str(a.value()) + " operand");
  }
  const std::size_t pa = a.id();
  return a.tape()->push(
      a.value().middleCols(start, count), OpTag::kSliceCols, {pa},
      [pa, start, count](Tape& t, std::size_t self) {
        if (t.requires_grad(pa)) t.grad_ref(pa).middleCols(start, count) += t.grad_of(self);
      });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no operands");
  Tape* tape = parts.front().tape();
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    same_tape(parts.front(), p, "concat_cols");
    if (p.rows() != rows) {
      throw ShapeError("concat_cols: lhs is " + shape_str(parts.front().value()) +
                       ", rhs is " + shape_str(p.value()));
    }
    cols += p.cols();
    ids.push_back(p.id());
  }
  Matrix v(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    offsets.push_back(at);
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  std::vector<std::size_t> parents = ids;
  return tape->push(std::move(v), OpTag::kConcatCols, std::move(parents),
                    [ids, offsets](Tape& t, std::size_t self) {
                      const Matrix& g = t.grad_of(self);
                      for (std::size_t i = 0; i < ids.size(); ++i) {
                        if (!t.requires_grad(ids[i])) continue;
                        Matrix& gi = t.grad_ref(ids[i]);
                        gi += g.middleCols(offsets[i], gi.cols());
                      }
                    });
}

Var broadcast_cols(Var column, Eigen::Index k) {
  if (column.cols() != 1) {
    throw ShapeError("broadcast_cols: operand is " + shape_str(column.value()) +
                     ", expected a single column");
  }
  return unary(column, OpTag::kBroadcastCols,
               column.value().replicate(1, k),
               [](const Matrix&, const Matrix&, const Matrix& g) -> Matrix {
                 return g.rowwise().sum();
               });
}

Var row_sum(Var a) {
  return unary(a, OpTag::kRowSum, a.value().rowwise().sum(),
               [](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
                 return g.replicate(1, x.cols());
               });
}

Var gaussian_logpdf(Var x, Var mean, Var logvar) {
  const double log2pi = std::log(2.0 * std::numbers::pi);
  Var quad = square(x - mean) / exp(logvar);
  return -0.5 * row_sum((quad + logvar) + log2pi);
}

Var std_normal_logpdf(Var x) {
  const double log2pi = std::log(2.0 * std::numbers::pi);
  return -0.5 * row_sum(square(x) + log2pi);
}

}  // namespace icm::ad
