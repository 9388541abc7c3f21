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

#include "icm/scf.hpp"

#include <cmath>
#include <utility>

#include "icm/errors.hpp"

namespace icm {

namespace {

// Builds the B x nm network input for variable i: parent blocks copied from
// `blocks`, every other block zero.
ad::Var masked_from_blocks(ad::Tape& tape, const CausalGraph& g, std::size_t i,
                           const std::vector<ad::Var>& blocks,
                           Eigen::Index rows) {
  const auto m = static_cast<Eigen::Index>(g.block_dim());
  const auto& pa = g.parents(i);
  if (pa.empty()) {
    return tape.constant(Matrix::Zero(1, m * static_cast<Eigen::Index>(g.size())));
  }
  ad::Var zero = tape.constant(Matrix::Zero(rows, m));
  std::vector<ad::Var> parts(g.size(), zero);
  for (std::size_t j : pa) parts[j] = blocks[j];
  return ad::concat_cols(parts);
}

void check_finite(const Matrix& v, const char* what, std::size_t i) {
  if (!v.allFinite()) {
    throw NumericError(std::string("flow: non-finite ") + what +
                       " for variable " + std::to_string(i));
  }
}

}  // namespace

ad::Var masked_parents(ad::Tape& tape, const CausalGraph& g, std::size_t i,
                       ad::Var z) {
  const auto m = static_cast<Eigen::Index>(g.block_dim());
  if (static_cast<std::size_t>(z.cols()) != g.latent_dim()) {
    throw ShapeError("mask: latent has " + std::to_string(z.cols()) +
                     " columns, graph expects " + std::to_string(g.latent_dim()));
  }
  std::vector<ad::Var> blocks(g.size());
  for (std::size_t j : g.parents(i)) {
    blocks[j] = ad::slice_cols(z, static_cast<Eigen::Index>(j) * m, m);
  }
  return masked_from_blocks(tape, g, i, blocks, z.rows());
}

StructuralCausalFlow::StructuralCausalFlow(CausalGraph graph, ScfConfig config,
                                           std::string prefix)
    : graph_(std::move(graph)), config_(config), prefix_(std::move(prefix)) {}

MlpShape StructuralCausalFlow::head_shape() const {
  MlpShape s;
  s.in = graph_.latent_dim();
  s.hidden = config_.hidden;
  s.hidden_layers = config_.hidden_layers;
  s.out = graph_.block_dim();
  s.activation = config_.activation;
  return s;
}

std::string StructuralCausalFlow::head_prefix(std::size_t i, int head) const {
  return prefix_ + "/" + (head == 1 ? "r1" : "r2") + "/" + std::to_string(i);
}

void StructuralCausalFlow::register_params(ParamStore& store) const {
  for (std::size_t i = 0; i < graph_.size(); ++i) {
    register_mlp(store, head_prefix(i, 1), head_shape());
    register_mlp(store, head_prefix(i, 2), head_shape());
  }
}

void StructuralCausalFlow::init_params(ParamStore& store,
                                       std::mt19937_64& rng) const {
  for (std::size_t i = 0; i < graph_.size(); ++i) {
    init_mlp(store, head_prefix(i, 1), head_shape(), rng, /*zero_output=*/true);
    init_mlp(store, head_prefix(i, 2), head_shape(), rng, /*zero_output=*/true);
  }
}

std::pair<ad::Var, ad::Var> StructuralCausalFlow::slope_offset(
    ad::Tape& tape, const ParamStore& store, std::size_t i, ad::Var z) const {
  ad::Var in = masked_parents(tape, graph_, i, z);
  ad::Var a = mlp_forward(tape, store, head_prefix(i, 1), head_shape(), in);
  ad::Var b = mlp_forward(tape, store, head_prefix(i, 2), head_shape(), in);
  return {ad::broadcast_rows(ad::clip(a, -config_.slope_clamp, config_.slope_clamp),
                             z.rows()),
          ad::broadcast_rows(b, z.rows())};
}

StructuralCausalFlow::TapeFlow StructuralCausalFlow::forward(
    ad::Tape& tape, const ParamStore& store, ad::Var eps) const {
  const auto m = static_cast<Eigen::Index>(graph_.block_dim());
  if (static_cast<std::size_t>(eps.cols()) != graph_.latent_dim()) {
    throw ShapeError("flow_forward: noise has " + std::to_string(eps.cols()) +
                     " columns, graph expects " +
                     std::to_string(graph_.latent_dim()));
  }
  const Eigen::Index rows = eps.rows();
  std::vector<ad::Var> blocks(graph_.size());
  TapeFlow out;
  out.slopes.resize(graph_.size());
  ad::Var log_det;
  for (std::size_t i : graph_.topo_order()) {
    ad::Var in = masked_from_blocks(tape, graph_, i, blocks, rows);
    ad::Var a = ad::broadcast_rows(
        ad::clip(mlp_forward(tape, store, head_prefix(i, 1), head_shape(), in),
                 -config_.slope_clamp, config_.slope_clamp),
        rows);
    ad::Var b = ad::broadcast_rows(
        mlp_forward(tape, store, head_prefix(i, 2), head_shape(), in), rows);
    ad::Var e = ad::slice_cols(eps, static_cast<Eigen::Index>(i) * m, m);
    blocks[i] = ad::exp(a) * e + b;
    check_finite(blocks[i].value(), "output", i);
    out.slopes[i] = a;
    ad::Var term = ad::row_sum(a);
    log_det = log_det.valid() ? log_det + term : term;
  }
  out.z = ad::concat_cols(blocks);
  out.log_det = log_det.valid() ? log_det : tape.constant(Matrix::Zero(rows, 1));
  return out;
}

FlowResult StructuralCausalFlow::flow_forward(const ParamStore& store,
                                              const Vector& eps) const {
  ad::Tape tape;
  ad::Var e = tape.constant(Matrix(eps.transpose()));
  TapeFlow f = forward(tape, store, e);
  FlowResult r;
  r.z = f.z.value().row(0).transpose();
  r.log_det = f.log_det.value()(0, 0);
  for (const ad::Var& a : f.slopes) r.slopes.emplace_back(a.value().row(0).transpose());
  return r;
}

Matrix StructuralCausalFlow::flow_forward_batch(const ParamStore& store,
                                                const Matrix& eps,
                                                Vector* log_det) const {
  ad::Tape tape;
  TapeFlow f = forward(tape, store, tape.constant(eps));
  if (log_det != nullptr) *log_det = f.log_det.value().col(0);
  return f.z.value();
}

Matrix StructuralCausalFlow::flow_inverse_batch(const ParamStore& store,
                                                const Matrix& z) const {
  const auto m = static_cast<Eigen::Index>(graph_.block_dim());
  ad::Tape tape;
  ad::Var zv = tape.constant(z);
  Matrix eps(z.rows(), z.cols());
  for (std::size_t i = 0; i < graph_.size(); ++i) {
    auto [a, b] = slope_offset(tape, store, i, zv);
    const auto col = static_cast<Eigen::Index>(i) * m;
    eps.middleCols(col, m) =
        ((z.middleCols(col, m) - b.value()).array() * (-a.value().array()).exp())
            .matrix();
    check_finite(eps.middleCols(col, m), "noise", i);
  }
  return eps;
}

Vector StructuralCausalFlow::flow_inverse(const ParamStore& store,
                                          const Vector& z) const {
  return flow_inverse_batch(store, Matrix(z.transpose())).row(0).transpose();
}

std::pair<Vector, Vector> StructuralCausalFlow::slope_offset_value(
    const ParamStore& store, std::size_t i, const Vector& z) const {
  ad::Tape tape;
  auto [a, b] = slope_offset(tape, store, i, tape.constant(Matrix(z.transpose())));
  return {a.value().row(0).transpose(), b.value().row(0).transpose()};
}

Vector StructuralCausalFlow::intervene(const ParamStore& store,
                                       const Vector& z_factual,
                                       std::size_t target,
                                       const Vector& value) const {
  const std::size_t n = graph_.size();
  const auto m = static_cast<Eigen::Index>(graph_.block_dim());
  if (target >= n) {
    throw ContractError("intervene: target " + std::to_string(target) +
                        " out of range");
  }
  if (static_cast<std::size_t>(z_factual.size()) != graph_.latent_dim() ||
      value.size() != m) {
    throw ShapeError("intervene: latent of length " +
                     std::to_string(z_factual.size()) + " and value of length " +
                     std::to_string(value.size()) + " do not match the graph");
  }
  Vector z_cf = z_factual;
  std::vector<char> changed(n, 0);
  for (std::size_t i : graph_.topo_order()) {
    const auto col = static_cast<Eigen::Index>(i) * m;
    if (i == target) {
      z_cf.segment(col, m) = value;
      changed[i] = (value.array() != z_factual.segment(col, m).array()).any();
      continue;
    }
    bool parent_changed = false;
    for (std::size_t j : graph_.parents(i)) parent_changed |= changed[j] != 0;
    if (!parent_changed) continue;
    // Abduct eps_i under the factual parents, then re-apply the mechanism
    // under the counterfactual parents.
    auto [a_f, b_f] = slope_offset_value(store, i, z_factual);
    const Vector eps_i = ((z_factual.segment(col, m) - b_f).array() *
                          (-a_f.array()).exp())
                             .matrix();
    auto [a_cf, b_cf] = slope_offset_value(store, i, z_cf);
    z_cf.segment(col, m) = (a_cf.array().exp() * eps_i.array()).matrix() + b_cf;
    check_finite(z_cf.segment(col, m), "counterfactual", i);
    changed[i] = (z_cf.segment(col, m).array() != z_factual.segment(col, m).array()).any();
  }
  return z_cf;
}

}  // namespace icm
