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

// Reverse-mode automatic differentiation over small dense matrices.
//
// A Tape records every operation as a node holding its value. Nodes are
// appended in evaluation order, so node ids form a topological order of the
// (acyclic) graph. Tape::backward() zeroes all gradients, seeds the scalar
// root with 1 and walks the ancestors of the root in decreasing id order,
// which makes gradient accumulation deterministic.
//
// Batches are laid out row-wise: a B x k matrix holds B examples of a
// k-vector. Elementwise ops require identical shapes; the only broadcasts are
// the explicit add_row() and broadcast_cols().

#ifndef ICM_AUTODIFF_HPP_
#define ICM_AUTODIFF_HPP_

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "icm/param_store.hpp"

namespace icm::ad {

enum class OpTag {
  kConstant,
  kLeaf,
  kParam,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kMatmul,
  kExp,
  kLog,
  kTanh,
  kRelu,
  kSoftplus,
  kSum,
  kSquare,
  kClip,
  // Structural ops: indexing and explicit broadcasts, no arithmetic.
  kAddRow,
  kScale,
  kAddScalar,
  kSliceCols,
  kConcatCols,
  kBroadcastCols,
  kRowSum,
};

std::string_view op_name(OpTag tag);

class Tape;

// Lightweight handle to a node on a Tape. Valid as long as the tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  // Value of a 1x1 node. Throws ContractError otherwise.
  double scalar() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Propagates the node's accumulated gradient into its parents.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // A value that never receives a gradient.
  Var constant(Matrix value);
  Var constant(double value);
  // A differentiable input whose gradient can be read after backward().
  Var leaf(Matrix value);
  // The named segment of `store`, bound once per tape. Repeated calls return
  // the same node. All params on one tape must come from the same store.
  Var param(const ParamStore& store, std::size_t idx);
  Var param(const ParamStore& store, std::string_view name);

  // Accumulates d(root)/d(node) for every ancestor of `root`. The root must
  // be 1x1 (ContractError otherwise). Gradients are zeroed first.
  void backward(Var root);

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  // Gradient after backward(); all-zero for nodes not reached from the root.
  const Matrix& grad(Var v) const;
  OpTag op(Var v) const { return nodes_[v.id()].op; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient laid out like store.values(); unused segments are zero.
  Vector param_gradient(const ParamStore& store) const;

  // Used by op implementations.
  Var push(Matrix value, OpTag op, std::vector<std::size_t> parents,
           BackwardFn backward);
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  Matrix& grad_ref(std::size_t id) { return nodes_[id].grad; }
  const Matrix& grad_of(std::size_t id) const { return nodes_[id].grad; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    OpTag op = OpTag::kConstant;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;
  const ParamStore* store_ = nullptr;
  std::vector<std::ptrdiff_t> param_nodes_;
};

// Arithmetic primitives.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var matmul(Var a, Var b);
Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var relu(Var a);
Var softplus(Var a);
Var sum(Var a);
Var square(Var a);
// Clamps to [lo, hi]; the gradient is zero where the input lies outside.
Var clip(Var a, double lo, double hi);

// Structural helpers.
Var add_row(Var a, Var row);           // a (B x k) + row (1 x k) on every row
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var concat_cols(std::span<const Var> parts);
Var broadcast_cols(Var column, Eigen::Index k);  // B x 1 -> B x k
Var row_sum(Var a);                              // B x k -> B x 1
// 1 x k -> B x k via add_row on a zero constant; identity when B == 1.
Var broadcast_rows(Var row, Eigen::Index b);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator+(Var a, double c) { return add_scalar(a, c); }
inline Var operator-(Var a, double c) { return add_scalar(a, -c); }
inline Var operator-(Var a) { return scale(a, -1.0); }

// Row-wise log-density of N(mean, exp(logvar)) summed over columns: B x 1.
Var gaussian_logpdf(Var x, Var mean, Var logvar);
// Row-wise standard-normal log-density summed over columns: B x 1.
Var std_normal_logpdf(Var x);

}  // namespace icm::ad

#endif  // ICM_AUTODIFF_HPP_
