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


#include "icm/cf.hpp"

#include <string>

#include "icm/errors.hpp"

namespace icm {

CounterfactualResult counterfactual_from_latent(const Model& model, const ParamStore& store,
                                                const Vector& z_factual, std::size_t target,
                                                const Vector& value) {
  CounterfactualResult r;
  r.z_factual = z_factual;
  r.z_cf = model.intervene(store, z_factual, target, value);
  Matrix both(2, z_factual.size());
  both.row(0) = r.z_factual.transpose();
  both.row(1) = r.z_cf.transpose();
  const Matrix x = model.decode(store, both);
  r.x_factual = x.row(0).transpose();
  r.x_cf = x.row(1).transpose();
  return r;
}

CounterfactualResult counterfactual(const Model& model, const ParamStore& store,
                                    const CounterfactualQuery& q) {
  const auto& cfg = model.config();
  if (static_cast<std::size_t>(q.x.size()) != cfg.obs_dim) {
    throw ShapeError("counterfactual: observation of length " + std::to_string(q.x.size()) +
                     ", model expects " + std::to_string(cfg.obs_dim));
  }
  if (!q.x.allFinite()) throw NumericError("counterfactual: observation is not finite");
  Vector u = q.u;
  if (cfg.variant == Variant::kBetaVaeAblation && u.size() == 0) {
    u = Vector::Zero(static_cast<Eigen::Index>(cfg.graph.size()));
  }
  if (static_cast<std::size_t>(u.size()) != cfg.graph.size()) {
    throw ShapeError("counterfactual: " + std::to_string(u.size()) + " labels for " +
                     std::to_string(cfg.graph.size()) + " variables");
  }
  const Vector eps = model.encode_mean(store, q.x.transpose(), u.transpose()).row(0).transpose();
  const Vector z = model.flow_forward(store, eps.transpose()).row(0).transpose();
  CounterfactualResult r = counterfactual_from_latent(model, store, z, q.target, q.value);
  r.eps = eps;
  return r;
}

Vector label_to_block(const Model& model, const ParamStore& store, const Vector& z_factual,
                      const Vector& u, std::size_t target, double label) {
  if (model.config().variant == Variant::kBetaVaeAblation) {
    throw ContractError("label interventions need a label-conditioned prior; the "
                        "beta-vae ablation has none");
  }
  if (target >= model.graph().size() || static_cast<std::size_t>(u.size()) != model.graph().size()) {
    throw ContractError("label_to_block: target or label vector out of range");
  }
  Vector u_new = u;
  u_new(static_cast<Eigen::Index>(target)) = label;
  return model.prior().lam_mechanism(store, z_factual, u_new, target);
}

}  // namespace icm
