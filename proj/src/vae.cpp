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


#include "icm/vae.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <utility>

#include <unistd.h>

#include "icm/errors.hpp"
#include "icm/json_util.hpp"

namespace icm {

namespace {

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

ScfConfig flow_config(const ModelConfig& c) {
  ScfConfig s;
  s.hidden = c.hidden;
  s.hidden_layers = c.mechanism_layers;
  s.activation = c.activation;
  s.slope_clamp = c.slope_clamp;
  return s;
}

PriorConfig prior_config(const ModelConfig& c) {
  PriorConfig p;
  p.hidden = c.hidden;
  p.hidden_layers = c.mechanism_layers;
  p.activation = c.activation;
  p.slope_clamp = c.slope_clamp;
  p.base_var = c.prior_var;
  if (c.variant == Variant::kIvaeAblation) p.inputs = c.ivae_prior_inputs;
  return p;
}

ad::Var batch_mean(ad::Var col) {
  return ad::sum(col) * (1.0 / static_cast<double>(col.rows()));
}

void require_finite(ad::Var v, const char* term) {
  if (!std::isfinite(v.scalar())) {
    throw NumericError(std::string("elbo: non-finite ") + term);
  }
}

}  // namespace

Variant parse_variant(std::string_view name) {
  if (name == "icm-vae") return Variant::kIcmVae;
  if (name == "ivae-ablation") return Variant::kIvaeAblation;
  if (name == "beta-vae-ablation") return Variant::kBetaVaeAblation;
  throw ConfigError("unknown model variant '" + std::string(name) + "'");
}

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::kIcmVae: return "icm-vae";
    case Variant::kIvaeAblation: return "ivae-ablation";
    case Variant::kBetaVaeAblation: return "beta-vae-ablation";
  }
  return "icm-vae";
}

nlohmann::json ModelConfig::to_json() const {
  return {{"graph", graph.to_json()},
          {"obs_dim", obs_dim},
          {"variant", variant_name(variant)},
          {"hidden", hidden},
          {"encoder_layers", encoder_layers},
          {"decoder_layers", decoder_layers},
          {"mechanism_layers", mechanism_layers},
          {"activation", activation_name(activation)},
          {"obs_var", obs_var},
          {"recon_weight", recon_weight},
          {"logvar_clamp", logvar_clamp},
          {"slope_clamp", slope_clamp},
          {"prior_var", prior_var},
          {"ivae_prior_inputs", prior_inputs_name(ivae_prior_inputs)}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  constexpr std::string_view ctx = "model";
  check_keys(j, {"graph", "obs_dim", "variant", "hidden", "encoder_layers",
                 "decoder_layers", "mechanism_layers", "activation", "obs_var",
                 "recon_weight", "logvar_clamp", "slope_clamp", "prior_var",
                 "ivae_prior_inputs"},
             ctx);
  ModelConfig c;
  if (!j.contains("graph")) throw ConfigError("model: missing field 'graph'");
  c.graph = CausalGraph::from_json(j.at("graph"));
  c.obs_dim = get_or(j, "obs_dim", c.obs_dim, ctx);
  c.variant = parse_variant(get_or<std::string>(j, "variant", "icm-vae", ctx));
  c.hidden = get_or(j, "hidden", c.hidden, ctx);
  c.encoder_layers = get_or(j, "encoder_layers", c.encoder_layers, ctx);
  c.decoder_layers = get_or(j, "decoder_layers", c.decoder_layers, ctx);
  c.mechanism_layers = get_or(j, "mechanism_layers", c.mechanism_layers, ctx);
  c.activation = parse_activation(get_or<std::string>(j, "activation", "relu", ctx));
  c.obs_var = get_or(j, "obs_var", c.obs_var, ctx);
  c.recon_weight = get_or(j, "recon_weight", c.recon_weight, ctx);
  c.logvar_clamp = get_or(j, "logvar_clamp", c.logvar_clamp, ctx);
  c.slope_clamp = get_or(j, "slope_clamp", c.slope_clamp, ctx);
  c.prior_var = get_or(j, "prior_var", c.prior_var, ctx);
  c.ivae_prior_inputs = parse_prior_inputs(
      get_or<std::string>(j, "ivae_prior_inputs", prior_inputs_name(c.ivae_prior_inputs), ctx));
  if (c.ivae_prior_inputs == PriorConfig::Inputs::kParents) {
    throw ConfigError("model: ivae_prior_inputs must be 'labels' or 'none'");
  }
  if (!(c.obs_var > 0.0)) throw ConfigError("model: obs_var must be positive");
  if (!(c.prior_var > 0.0)) throw ConfigError("model: prior_var must be positive");
  if (c.obs_dim == 0 || c.hidden == 0) {
    throw ConfigError("model: obs_dim and hidden must be positive");
  }
  return c;
}

Model::Model(ModelConfig config)
    : config_(std::move(config)),
      prior_(config_.graph, prior_config(config_)) {
  if (!(config_.obs_var > 0.0)) throw ConfigError("model: obs_var must be positive");
  if (config_.variant != Variant::kIvaeAblation) {
    flow_.emplace(config_.graph, flow_config(config_));
  }
}

MlpShape Model::encoder_shape() const {
  return {config_.obs_dim + config_.graph.size(), config_.hidden,
          config_.encoder_layers, 2 * latent_dim(), config_.activation};
}

MlpShape Model::decoder_shape() const {
  return {latent_dim(), config_.hidden, config_.decoder_layers, config_.obs_dim,
          config_.activation};
}

void Model::register_params(ParamStore& store) const {
  register_mlp(store, "enc", encoder_shape());
  register_mlp(store, "dec", decoder_shape());
  if (flow_) flow_->register_params(store);
  if (config_.variant != Variant::kBetaVaeAblation) prior_.register_params(store);
}

ParamStore Model::make_params(std::mt19937_64& rng) const {
  ParamStore store;
  register_params(store);
  init_mlp(store, "enc", encoder_shape(), rng, false);
  init_mlp(store, "dec", decoder_shape(), rng, false);
  if (flow_) flow_->init_params(store, rng);
  if (config_.variant != Variant::kBetaVaeAblation) prior_.init_params(store, rng);
  return store;
}

ad::Var Model::encoder_input(ad::Tape& tape, ad::Var x, ad::Var u) const {
  if (static_cast<std::size_t>(x.cols()) != config_.obs_dim ||
      static_cast<std::size_t>(u.cols()) != config_.graph.size() ||
      x.rows() != u.rows()) {
    throw ShapeError("encoder: observations " + std::to_string(x.rows()) + "x" +
                     std::to_string(x.cols()) + " vs labels " +
                     std::to_string(u.rows()) + "x" + std::to_string(u.cols()));
  }
  if (config_.variant == Variant::kBetaVaeAblation) {
    u = tape.constant(Matrix::Zero(u.rows(), u.cols()));
  }
  const ad::Var parts[] = {x, u};
  return ad::concat_cols(parts);
}

Model::Posterior Model::encode_dist(ad::Tape& tape, const ParamStore& store,
                                    ad::Var x, ad::Var u) const {
  ad::Var h = mlp_forward(tape, store, "enc", encoder_shape(), encoder_input(tape, x, u));
  const auto k = static_cast<Eigen::Index>(latent_dim());
  return {ad::slice_cols(h, 0, k),
          ad::clip(ad::slice_cols(h, k, k), -config_.logvar_clamp, config_.logvar_clamp)};
}

Model::Sample Model::encode(ad::Tape& tape, const ParamStore& store, ad::Var x,
                            ad::Var u, const Matrix& noise) const {
  Posterior post = encode_dist(tape, store, x, u);
  if (noise.rows() != post.mean.rows() || noise.cols() != post.mean.cols()) {
    throw ShapeError("encode: noise is " + std::to_string(noise.rows()) + "x" +
                     std::to_string(noise.cols()) + ", posterior is " +
                     std::to_string(post.mean.rows()) + "x" +
                     std::to_string(post.mean.cols()));
  }
  ad::Var n = tape.constant(noise);
  ad::Var eps = post.mean + ad::exp(0.5 * post.logvar) * n;
  const double k = static_cast<double>(latent_dim());
  ad::Var quad = tape.constant(Matrix(-0.5 * noise.array().square().rowwise().sum()));
  ad::Var log_q = ad::add_scalar(-0.5 * ad::row_sum(post.logvar) + quad, -k * kHalfLog2Pi);
  return {eps, log_q};
}

Model::Latent Model::to_latent(ad::Tape& tape, const ParamStore& store,
                               ad::Var eps) const {
  if (!flow_) return {eps, tape.constant(Matrix::Zero(eps.rows(), 1))};
  auto f = flow_->forward(tape, store, eps);
  return {f.z, f.log_det};
}

ad::Var Model::decode(ad::Tape& tape, const ParamStore& store, ad::Var z) const {
  return mlp_forward(tape, store, "dec", decoder_shape(), z);
}

ad::Var Model::prior_logdensity(ad::Tape& tape, const ParamStore& store,
                                ad::Var z, ad::Var u) const {
  if (config_.variant == Variant::kBetaVaeAblation) return ad::std_normal_logpdf(z);
  return prior_.logdensity(tape, store, z, u);
}

Model::TapeElbo Model::elbo(ad::Tape& tape, const ParamStore& store,
                            const Matrix& x, const Matrix& u,
                            const Matrix& noise, double beta) const {
  if (!(beta >= 0.0)) throw ContractError("elbo: beta must be non-negative");
  ad::Var xv = tape.constant(x);
  ad::Var uv = tape.constant(u);
  Sample s = encode(tape, store, xv, uv, noise);
  Latent lat = to_latent(tape, store, s.eps);
  ad::Var mean = decode(tape, store, lat.z);
  ad::Var obs_logvar =
      tape.constant(Matrix::Constant(x.rows(), x.cols(), std::log(config_.obs_var)));
  ad::Var recon =
      batch_mean(ad::gaussian_logpdf(xv, mean, obs_logvar)) * config_.recon_weight;
  ad::Var kl_eps = batch_mean(s.log_q - ad::std_normal_logpdf(s.eps));
  ad::Var kl_z = batch_mean(s.log_q - lat.log_det -
                            prior_logdensity(tape, store, lat.z, uv));
  require_finite(recon, "recon");
  require_finite(kl_eps, "kl_eps");
  require_finite(kl_z, "kl_z");
  ad::Var total = beta == 0.0 ? recon : recon - beta * (kl_eps + kl_z);
  return {recon, kl_eps, kl_z, total};
}

ElboTerms Model::elbo_value(const ParamStore& store, const Matrix& x,
                            const Matrix& u, const Matrix& noise,
                            double beta) const {
  ad::Tape tape;
  TapeElbo e = elbo(tape, store, x, u, noise, beta);
  return {e.recon.scalar(), e.kl_eps.scalar(), e.kl_z.scalar(), beta, e.total.scalar()};
}

Matrix Model::encode_mean(const ParamStore& store, const Matrix& x,
                          const Matrix& u) const {
  ad::Tape tape;
  return encode_dist(tape, store, tape.constant(x), tape.constant(u)).mean.value();
}

Matrix Model::flow_forward(const ParamStore& store, const Matrix& eps) const {
  if (!flow_) return eps;
  return flow_->flow_forward_batch(store, eps);
}

Matrix Model::latents(const ParamStore& store, const Matrix& x,
                      const Matrix& u) const {
  return flow_forward(store, encode_mean(store, x, u));
}

Matrix Model::decode(const ParamStore& store, const Matrix& z) const {
  ad::Tape tape;
  return decode(tape, store, tape.constant(z)).value();
}

Vector Model::intervene(const ParamStore& store, const Vector& z,
                        std::size_t target, const Vector& value) const {
  if (flow_) return flow_->intervene(store, z, target, value);
  // Identity flow: no mechanism links the blocks.
  const auto m = static_cast<Eigen::Index>(config_.graph.block_dim());
  if (target >= config_.graph.size()) {
    throw ContractError("intervene: target " + std::to_string(target) + " out of range");
  }
  if (value.size() != m || static_cast<std::size_t>(z.size()) != latent_dim()) {
    throw ShapeError("intervene: value of length " + std::to_string(value.size()) +
                     " for block size " + std::to_string(m));
  }
  Vector out = z;
  out.segment(static_cast<Eigen::Index>(target) * m, m) = value;
  return out;
}

Adam::Adam(std::size_t size, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps),
      m_(Vector::Zero(static_cast<Eigen::Index>(size))),
      v_(Vector::Zero(static_cast<Eigen::Index>(size))) {}

void Adam::step(Vector& params, const Vector& grad) {
  if (grad.size() != params.size() || grad.size() != m_.size()) {
    throw ShapeError("adam: gradient of length " + std::to_string(grad.size()) +
                     " for " + std::to_string(params.size()) + " parameters");
  }
  ++t_;
  m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
  v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

nlohmann::json TrainConfig::to_json() const {
  return {{"steps", steps},           {"batch", batch},
          {"lr", lr},                 {"beta_start", beta_start},
          {"beta_end", beta_end},     {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  constexpr std::string_view ctx = "train";
  check_keys(j, {"steps", "batch", "lr", "beta_start", "beta_end", "seed"}, ctx);
  TrainConfig c;
  c.steps = get_or(j, "steps", c.steps, ctx);
  c.batch = get_or(j, "batch", c.batch, ctx);
  c.lr = get_or(j, "lr", c.lr, ctx);
  c.beta_start = get_or(j, "beta_start", c.beta_start, ctx);
  c.beta_end = get_or(j, "beta_end", c.beta_end, ctx);
  c.seed = get_or(j, "seed", c.seed, ctx);
  if (c.batch == 0) throw ConfigError("train: batch must be positive");
  if (!(c.lr > 0.0)) throw ConfigError("train: lr must be positive");
  if (c.beta_start < 0.0 || c.beta_end < 0.0) {
    throw ConfigError("train: beta endpoints must be non-negative");
  }
  return c;
}

double beta_at(const TrainConfig& cfg, std::size_t step) {
  if (cfg.steps <= 1) return cfg.beta_end;
  const double t = static_cast<double>(std::min(step, cfg.steps - 1)) /
                   static_cast<double>(cfg.steps - 1);
  return cfg.beta_start + (cfg.beta_end - cfg.beta_start) * t;
}

TrainResult train(const Model& model, const Matrix& x, const Matrix& u,
                  const TrainConfig& cfg, const ParamStore* init,
                  const std::function<void(std::size_t, const ElboTerms&)>& on_step) {
  if (x.rows() != u.rows() || x.rows() == 0) {
    throw ShapeError("train: " + std::to_string(x.rows()) + " observations vs " +
                     std::to_string(u.rows()) + " label rows");
  }
  std::seed_seq init_seq{cfg.seed, std::uint64_t{0x1a17}};
  std::seed_seq data_seq{cfg.seed, std::uint64_t{0xba7c}};
  std::seed_seq noise_seq{cfg.seed, std::uint64_t{0x401e}};
  std::mt19937_64 init_rng(init_seq), data_rng(data_seq), noise_rng(noise_seq);

  TrainResult result;
  result.params = init ? *init : model.make_params(init_rng);
  ParamStore& params = result.params;
  Adam adam(params.size(), cfg.lr);

  const auto n = static_cast<std::size_t>(x.rows());
  const std::size_t batch = std::min(cfg.batch, n);
  const auto k = static_cast<Eigen::Index>(model.latent_dim());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = n;
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix xb(static_cast<Eigen::Index>(batch), x.cols());
  Matrix ub(static_cast<Eigen::Index>(batch), u.cols());
  Matrix noise(static_cast<Eigen::Index>(batch), k);
  Vector last_good;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (std::size_t r = 0; r < batch; ++r) {
      if (cursor == n) {
        std::shuffle(order.begin(), order.end(), data_rng);
        cursor = 0;
      }
      const auto src = static_cast<Eigen::Index>(order[cursor++]);
      xb.row(static_cast<Eigen::Index>(r)) = x.row(src);
      ub.row(static_cast<Eigen::Index>(r)) = u.row(src);
    }
    for (Eigen::Index c = 0; c < k; ++c) {
      for (Eigen::Index r = 0; r < noise.rows(); ++r) noise(r, c) = normal(noise_rng);
    }
    const double beta = beta_at(cfg, step);
    ElboTerms terms;
    Vector grad;
    try {
      ad::Tape tape;
      Model::TapeElbo e = model.elbo(tape, params, xb, ub, noise, beta);
      ad::Var loss = -e.total;
      tape.backward(loss);
      grad = tape.param_gradient(params);
      terms = {e.recon.scalar(), e.kl_eps.scalar(), e.kl_z.scalar(), beta,
               e.total.scalar()};
    } catch (const NumericError& err) {
      result.diverged = true;
      result.diverged_step = step;
      result.message = err.what();
      return result;
    }
    if (!std::isfinite(terms.total) || !grad.allFinite()) {
      result.diverged = true;
      result.diverged_step = step;
      result.message = "non-finite loss or gradient";
      return result;
    }
    last_good = params.values();
    adam.step(params.values(), grad);
    if (!params.values().allFinite()) {
      params.values() = last_good;
      result.diverged = true;
      result.diverged_step = step;
      result.message = "non-finite parameters after update";
      return result;
    }
    result.log.push_back(terms);
    if (on_step) on_step(step, terms);
  }
  return result;
}

void save_checkpoint(const std::string& path, const Model& model,
                     const ParamStore& params, const nlohmann::json& meta) {
  nlohmann::json j;
  j["format"] = "icm-checkpoint";
  j["version"] = 1;
  j["model"] = model.config().to_json();
  j["meta"] = meta;
  auto arr = nlohmann::json::array();
  for (std::size_t s = 0; s < params.segments().size(); ++s) {
    const ParamSegment& seg = params.segment(s);
    auto view = params.view(s);
    std::vector<double> vals(view.data(), view.data() + view.size());
    arr.push_back({{"name", seg.name},
                   {"rows", seg.rows},
                   {"cols", seg.cols},
                   {"values", vals}});
  }
  j["params"] = std::move(arr);
  const std::string tmp = path + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write checkpoint '" + tmp + "'");
    out << j.dump(1) << '\n';
    if (!out) throw ConfigError("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("checkpoint '" + path + "' not found");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("checkpoint '" + path + "': " + e.what());
  }
  check_keys(j, {"format", "version", "model", "meta", "params"}, "checkpoint");
  if (j.value("format", "") != "icm-checkpoint") {
    throw ConfigError("'" + path + "' is not a checkpoint");
  }
  Checkpoint ck;
  ck.config = ModelConfig::from_json(j.at("model"));
  ck.meta = j.value("meta", nlohmann::json::object());
  Model model(ck.config);
  model.register_params(ck.params);
  const auto& arr = j.at("params");
  if (arr.size() != ck.params.segments().size()) {
    throw ConfigError("checkpoint '" + path + "': parameter count mismatch");
  }
  for (const auto& p : arr) {
    const auto name = p.at("name").get<std::string>();
    const auto idx = ck.params.find(name);
    if (!idx) throw ConfigError("checkpoint: unexpected parameter '" + name + "'");
    auto view = ck.params.view(*idx);
    const auto vals = p.at("values").get<std::vector<double>>();
    if (p.at("rows").get<std::size_t>() != static_cast<std::size_t>(view.rows()) ||
        p.at("cols").get<std::size_t>() != static_cast<std::size_t>(view.cols()) ||
        vals.size() != static_cast<std::size_t>(view.size())) {
      throw ConfigError("checkpoint: shape mismatch for '" + name + "'");
    }
    std::copy(vals.begin(), vals.end(), view.data());
  }
  return ck;
}

}  // namespace icm
