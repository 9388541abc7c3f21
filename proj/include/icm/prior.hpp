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


// Causally factorized conditional prior p(z | u).
//
// Each variable i owns an m-block z_i and a scalar standardized label u_i.
// Its mechanism
//
//   lambda_i = exp(c_i) * u_i + d_i,   c_i = s1_i(pa),  d_i = s2_i(pa)
//
// is affine and increasing in u_i for every parent configuration. The density
// is the pushforward of a location-scale Gaussian base N(u_i, base_var)
// through that affine map, evaluated per coordinate:
//
//   log p(z_i | z_pa, u_i) = log N(w_i; u_i, base_var) - sum(c_i),
//   w_i = (z_i - d_i) * exp(-c_i)
//
// which makes z_i ~ N(lambda_i, exp(2 c_i) base_var) per coordinate. The
// same density in natural parameters with T(z) = (z, z^2) is available via
// expfam_stats() and expfam_logdensity().

#ifndef ICM_PRIOR_HPP_
#define ICM_PRIOR_HPP_

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "icm/autodiff.hpp"
#include "icm/graph.hpp"
#include "icm/mlp.hpp"
#include "icm/param_store.hpp"

namespace icm {

struct PriorConfig {
  std::size_t hidden = 100;
  std::size_t hidden_layers = 2;
  Activation activation = Activation::kRelu;
  double slope_clamp = 8.0;
  double base_var = 1.0;
  // What the mechanism heads s1, s2 read.
  //   kParents: masked parent blocks; base distribution centred on u_i.
  //   kNone:    nothing (constant input); base centred on u_i.
  //   kLabels:  the whole label vector u; base centred on 0, so the mean is
  //             d_i(u) and the scale exp(c_i(u)), as in a conditionally
  //             factorial label prior.
  enum class Inputs { kParents, kNone, kLabels };
  Inputs inputs = Inputs::kParents;
};

PriorConfig::Inputs parse_prior_inputs(const std::string& name);
std::string prior_inputs_name(PriorConfig::Inputs inputs);

// Natural parameters of the per-coordinate Gaussians, one row per latent
// coordinate: eta1 = mean / var, eta2 = -1 / (2 var).
struct ExpFamilyStats {
  Vector eta1;
  Vector eta2;
  static constexpr std::size_t k = 2;  // T(z) = (z, z^2)
};

// Sum over coordinates of log h(z) + eta1 z + eta2 z^2 - psi(eta), with the
// Gaussian carrier h = (2 pi)^(-1/2) and psi = -eta1^2 / (4 eta2)
// - log(-2 eta2) / 2. Throws NumericError when some eta2 >= 0.
double expfam_logdensity(const ExpFamilyStats& stats, const Vector& z);

class CausalPrior {
 public:
  CausalPrior(CausalGraph graph, PriorConfig config, std::string prefix = "prior");

  const CausalGraph& graph() const { return graph_; }
  const PriorConfig& config() const { return config_; }

  void register_params(ParamStore& store) const;
  // Output layers zero: lambda_i = u_i at initialisation.
  void init_params(ParamStore& store, std::mt19937_64& rng) const;

  struct TapeMechanism {
    ad::Var lam;  // B x m
    ad::Var c;    // B x m, clamped slope
    ad::Var d;    // B x m
  };
  // z: B x nm, u: B x n.
  TapeMechanism mechanism(ad::Tape& tape, const ParamStore& store, ad::Var z,
                          ad::Var u, std::size_t i) const;
  // Per-variable terms, each B x 1.
  std::vector<ad::Var> log_terms(ad::Tape& tape, const ParamStore& store,
                                 ad::Var z, ad::Var u) const;
  // B x 1
  ad::Var logdensity(ad::Tape& tape, const ParamStore& store, ad::Var z,
                     ad::Var u) const;

  // Single-point value-level API. Throw NumericError naming the variable on
  // a non-finite result.
  Vector lam_mechanism(const ParamStore& store, const Vector& z,
                       const Vector& u, std::size_t i) const;
  double prior_logdensity(const ParamStore& store, const Vector& z,
                          const Vector& u) const;
  Vector prior_log_terms(const ParamStore& store, const Vector& z,
                         const Vector& u) const;
  ExpFamilyStats expfam_stats(const ParamStore& store, const Vector& z,
                              const Vector& u) const;

 private:
  MlpShape head_shape() const;
  std::string head_prefix(std::size_t i, int head) const;
  void check_inputs(const Vector& z, const Vector& u) const;
  ad::Var base_centre(ad::Tape& tape, ad::Var u, std::size_t i) const;

  CausalGraph graph_;
  PriorConfig config_;
  std::string prefix_;
};

}  // namespace icm

#endif  // ICM_PRIOR_HPP_
