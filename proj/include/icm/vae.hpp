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


// Variational model over (x, u): Gaussian encoder q(eps | x, u), structural
// causal flow z = f(eps), causal prior p(z | u) and Gaussian decoder
// p(x | z) = N(g(z), obs_var I).
//
// Single-sample ELBO per datum, averaged over the batch:
//
//   recon  = recon_weight * log N(x; g(z), obs_var)
//   kl_eps = log q(eps | x, u) - log N(eps; 0, I)
//   kl_z   = log q(z | x, u) - log p(z | u),  log q(z) = log q(eps) - log_det
//   total  = recon - beta * (kl_eps + kl_z)

#ifndef ICM_VAE_HPP_
#define ICM_VAE_HPP_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "icm/autodiff.hpp"
#include "icm/graph.hpp"
#include "icm/mlp.hpp"
#include "icm/param_store.hpp"
#include "icm/prior.hpp"
#include "icm/scf.hpp"

namespace icm {

enum class Variant {
  kIcmVae,
  // Identity flow and a prior whose mechanisms never see parent blocks.
  kIvaeAblation,
  // Flow kept; labels hidden from the encoder and an N(0, I) prior on z.
  kBetaVaeAblation,
};

Variant parse_variant(std::string_view name);
std::string_view variant_name(Variant v);

struct ModelConfig {
  CausalGraph graph;
  std::size_t obs_dim = 10;
  Variant variant = Variant::kIcmVae;
  std::size_t hidden = 100;
  std::size_t encoder_layers = 3;
  std::size_t decoder_layers = 3;
  std::size_t mechanism_layers = 2;  // flow and prior heads
  Activation activation = Activation::kRelu;
  double obs_var = 0.01;
  double recon_weight = 1.0;
  double logvar_clamp = 10.0;
  double slope_clamp = 8.0;
  double prior_var = 1.0;
  // Prior heads of the iVAE ablation: the full label vector, or nothing
  // (each block then sees only its own label through the base centre).
  PriorConfig::Inputs ivae_prior_inputs = PriorConfig::Inputs::kLabels;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct ElboTerms {
  double recon = 0.0;
  double kl_eps = 0.0;
  double kl_z = 0.0;
  double beta = 0.0;
  double total = 0.0;
};

class Model {
 public:
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const CausalGraph& graph() const { return config_.graph; }
  const CausalPrior& prior() const { return prior_; }
  // Absent for the iVAE ablation (identity flow).
  const StructuralCausalFlow* flow() const { return flow_ ? &*flow_ : nullptr; }
  std::size_t latent_dim() const { return config_.graph.latent_dim(); }

  // Fresh store with every parameter registered and initialised from rng.
  ParamStore make_params(std::mt19937_64& rng) const;
  void register_params(ParamStore& store) const;

  struct Posterior {
    ad::Var mean;    // B x nm
    ad::Var logvar;  // B x nm, clamped
  };
  Posterior encode_dist(ad::Tape& tape, const ParamStore& store, ad::Var x,
                        ad::Var u) const;

  struct Sample {
    ad::Var eps;    // B x nm
    ad::Var log_q;  // B x 1
  };
  // eps = mean + exp(logvar / 2) * noise with caller-supplied standard
  // normal noise (B x nm).
  Sample encode(ad::Tape& tape, const ParamStore& store, ad::Var x, ad::Var u,
                const Matrix& noise) const;

  struct Latent {
    ad::Var z;
    ad::Var log_det;  // B x 1
  };
  Latent to_latent(ad::Tape& tape, const ParamStore& store, ad::Var eps) const;

  ad::Var decode(ad::Tape& tape, const ParamStore& store, ad::Var z) const;
  // B x 1 log p(z | u) under the variant's prior.
  ad::Var prior_logdensity(ad::Tape& tape, const ParamStore& store, ad::Var z,
                           ad::Var u) const;

  struct TapeElbo {
    ad::Var recon, kl_eps, kl_z, total;  // 1 x 1 batch means
  };
  TapeElbo elbo(ad::Tape& tape, const ParamStore& store, const Matrix& x,
                const Matrix& u, const Matrix& noise, double beta) const;

  // Value-level helpers; rows are samples.
  ElboTerms elbo_value(const ParamStore& store, const Matrix& x,
                       const Matrix& u, const Matrix& noise, double beta) const;
  Matrix encode_mean(const ParamStore& store, const Matrix& x,
                     const Matrix& u) const;
  // z = f(encoder mean): the point estimate used for metrics and abduction.
  Matrix latents(const ParamStore& store, const Matrix& x, const Matrix& u) const;
  Matrix flow_forward(const ParamStore& store, const Matrix& eps) const;
  Matrix decode(const ParamStore& store, const Matrix& z) const;
  Vector intervene(const ParamStore& store, const Vector& z,
                   std::size_t target, const Vector& value) const;

 private:
  ad::Var encoder_input(ad::Tape& tape, ad::Var x, ad::Var u) const;
  MlpShape encoder_shape() const;
  MlpShape decoder_shape() const;

  ModelConfig config_;
  std::optional<StructuralCausalFlow> flow_;
  CausalPrior prior_;
};

class Adam {
 public:
  Adam(std::size_t size, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);
  // params -= step computed from grad (a descent direction for a loss).
  void step(Vector& params, const Vector& grad);
  std::size_t steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  Vector m_, v_;
  std::size_t t_ = 0;
};

struct TrainConfig {
  std::size_t steps = 8000;
  std::size_t batch = 64;
  double lr = 1e-3;
  double beta_start = 0.0;
  double beta_end = 1.0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Linear from beta_start at step 0 to beta_end at the last step.
double beta_at(const TrainConfig& cfg, std::size_t step);

struct TrainResult {
  ParamStore params;
  std::vector<ElboTerms> log;  // one row per completed step
  bool diverged = false;
  std::size_t diverged_step = 0;
  std::string message;
};

// Adam on -ELBO over shuffled minibatches. Initial parameters come from
// Model::make_params seeded by cfg.seed unless `init` is given. On a
// non-finite loss or gradient training stops and the result holds the last
// parameters whose step was finite.
TrainResult train(const Model& model, const Matrix& x, const Matrix& u,
                  const TrainConfig& cfg,
                  const ParamStore* init = nullptr,
                  const std::function<void(std::size_t, const ElboTerms&)>& on_step = {});

// Checkpoint: model config, named parameter arrays and caller metadata.
// Written to a temporary file and renamed into place.
void save_checkpoint(const std::string& path, const Model& model,
                     const ParamStore& params, const nlohmann::json& meta);

struct Checkpoint {
  ModelConfig config;
  ParamStore params;
  nlohmann::json meta;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace icm

#endif  // ICM_VAE_HPP_
