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


// Counterfactual queries over a trained model: abduct the exogenous noise
// from an observation, intervene on one causal block, decode the result.

#ifndef ICM_CF_HPP_
#define ICM_CF_HPP_

#include <cstddef>

#include "icm/param_store.hpp"
#include "icm/vae.hpp"

namespace icm {

struct CounterfactualQuery {
  Vector x;  // factual observation (d)
  Vector u;  // its labels (n); ignored by the beta-VAE ablation
  std::size_t target = 0;
  Vector value;  // new latent block (m)
};

struct CounterfactualResult {
  Vector eps;  // abducted noise: encoder posterior mean
  Vector z_factual;
  Vector z_cf;
  Vector x_factual;  // decode(z_factual)
  Vector x_cf;       // decode(z_cf)
};

CounterfactualResult counterfactual(const Model& model, const ParamStore& store,
                                    const CounterfactualQuery& q);

// Action and prediction only, starting from an already abducted latent.
CounterfactualResult counterfactual_from_latent(const Model& model, const ParamStore& store,
                                                const Vector& z_factual, std::size_t target,
                                                const Vector& value);

// Latent block that the prior's mechanism assigns to `label` for variable
// `target`, holding the factual parents and the other labels fixed.
Vector label_to_block(const Model& model, const ParamStore& store, const Vector& z_factual,
                      const Vector& u, std::size_t target, double label);

}  // namespace icm

#endif  // ICM_CF_HPP_
