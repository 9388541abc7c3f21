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

// Structural causal flow: an affine autoregressive map from exogenous noise
// to causal variables that follows the topological order of a CausalGraph.
//
// For every variable i with block z_i (m coordinates)
//
//   z_i = exp(a_i) * eps_i + b_i,   a_i = r1_i(pa),  b_i = r2_i(pa)
//
// where pa = mask_parents(i, z). The Jacobian dz/deps is block triangular in
// topological order with diagonal exp(a_i), so log|det dz/deps| = sum a_i.
// Slopes are clamped to [-slope_clamp, slope_clamp] before exponentiation.

#ifndef ICM_SCF_HPP_
#define ICM_SCF_HPP_

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "icm/autodiff.hpp"
#include "icm/graph.hpp"
#include "icm/mlp.hpp"
#include "icm/param_store.hpp"

namespace icm {

// B x nm copy of z with every block that is not a parent of i set to zero.
// For a root the input is the same for every row and a single zero row is
// returned; callers broadcast the network output with ad::broadcast_rows.
ad::Var masked_parents(ad::Tape& tape, const CausalGraph& g, std::size_t i,
                       ad::Var z);

struct ScfConfig {
  std::size_t hidden = 100;
  std::size_t hidden_layers = 2;
  Activation activation = Activation::kRelu;
  double slope_clamp = 8.0;
};

struct FlowResult {
  Vector z;
  double log_det = 0.0;
  std::vector<Vector> slopes;  // a_i per variable
};

class StructuralCausalFlow {
 public:
  StructuralCausalFlow(CausalGraph graph, ScfConfig config,
                       std::string prefix = "scf");

  const CausalGraph& graph() const { return graph_; }
  const ScfConfig& config() const { return config_; }

  void register_params(ParamStore& store) const;
  // Hidden layers random, output layers zero: the flow starts at identity.
  void init_params(ParamStore& store, std::mt19937_64& rng) const;

  struct TapeFlow {
    ad::Var z;        // B x nm
    ad::Var log_det;  // B x 1
    std::vector<ad::Var> slopes;
  };
  TapeFlow forward(ad::Tape& tape, const ParamStore& store, ad::Var eps) const;

  // (a_i, b_i) for variable i given the full latent matrix (B x nm); only
  // parent blocks of `z` are read.
  std::pair<ad::Var, ad::Var> slope_offset(ad::Tape& tape,
                                           const ParamStore& store,
                                           std::size_t i, ad::Var z) const;

  // Row-wise value-level evaluation (rows are samples). Throws NumericError
  // naming the variable when an intermediate is not finite.
  FlowResult flow_forward(const ParamStore& store, const Vector& eps) const;
  Matrix flow_forward_batch(const ParamStore& store, const Matrix& eps,
                            Vector* log_det = nullptr) const;
  Vector flow_inverse(const ParamStore& store, const Vector& z) const;
  Matrix flow_inverse_batch(const ParamStore& store, const Matrix& z) const;

  // do(z_target := value). Non-descendants of the target are copied from
  // z_factual bit for bit; descendants are recomputed in topological order
  // from their abducted noise. A descendant whose parents all kept their
  // factual values keeps its factual block.
  Vector intervene(const ParamStore& store, const Vector& z_factual,
                   std::size_t target, const Vector& value) const;

 private:
  MlpShape head_shape() const;
  std::string head_prefix(std::size_t i, int head) const;
  std::pair<Vector, Vector> slope_offset_value(const ParamStore& store,
                                               std::size_t i,
                                               const Vector& z) const;

  CausalGraph graph_;
  ScfConfig config_;
  std::string prefix_;
};

}  // namespace icm

#endif  // ICM_SCF_HPP_
