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


#include "icm/prior.hpp"

#include <cmath>
#include <numbers>
#include <utility>

#include "icm/errors.hpp"
#include "icm/scf.hpp"

namespace icm {

namespace {

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

}  // namespace

double expfam_logdensity(const ExpFamilyStats& stats, const Vector& z) {
  if (stats.eta1.size() != z.size() || stats.eta2.size() != z.size()) {
    throw ShapeError("expfam_logdensity: parameters of length " +
                     std::to_string(stats.eta1.size()) + "/" +
                     std::to_string(stats.eta2.size()) + " vs point of length " +
                     std::to_string(z.size()));
  }
  double total = 0.0;
  for (Eigen::Index k = 0; k < z.size(); ++k) {
    const double e1 = stats.eta1(k);
    const double e2 = stats.eta2(k);
    if (!(e2 < 0.0)) {
      throw NumericError("expfam_logdensity: second natural parameter " +
                         std::to_string(e2) + " at coordinate " +
                         std::to_string(k) + " is not negative");
    }
    const double psi = -e1 * e1 / (4.0 * e2) - 0.5 * std::log(-2.0 * e2);
    total += -kHalfLog2Pi + e1 * z(k) + e2 * z(k) * z(k) - psi;
  }
  return total;
}

CausalPrior::CausalPrior(CausalGraph graph, PriorConfig config, std::string prefix)
    : graph_(std::move(graph)), config_(config), prefix_(std::move(prefix)) {
  if (!(config_.base_var > 0.0)) {
    throw ConfigError("prior: base variance must be positive");
  }
}

PriorConfig::Inputs parse_prior_inputs(const std::string& name) {
  if (name == "parents") return PriorConfig::Inputs::kParents;
  if (name == "none") return PriorConfig::Inputs::kNone;
  if (name == "labels") return PriorConfig::Inputs::kLabels;
  throw ConfigError("unknown prior inputs '" + name + "' (expected parents, none or labels)");
}

std::string prior_inputs_name(PriorConfig::Inputs inputs) {
  switch (inputs) {
    case PriorConfig::Inputs::kParents: return "parents";
    case PriorConfig::Inputs::kNone: return "none";
    case PriorConfig::Inputs::kLabels: return "labels";
  }
  return "parents";
}

MlpShape CausalPrior::head_shape() const {
  MlpShape s;
  s.in = config_.inputs == PriorConfig::Inputs::kLabels ? graph_.size() : graph_.latent_dim();
  s.hidden = config_.hidden;
  s.hidden_layers = config_.hidden_layers;
  s.out = graph_.block_dim();
  s.activation = config_.activation;
  return s;
}

std::string CausalPrior::head_prefix(std::size_t i, int head) const {
  return prefix_ + "/" + (head == 1 ? "s1" : "s2") + "/" + std::to_string(i);
}

void CausalPrior::register_params(ParamStore& store) const {
  for (std::size_t i = 0; i < graph_.size(); ++i) {
    register_mlp(store, head_prefix(i, 1), head_shape());
    register_mlp(store, head_prefix(i, 2), head_shape());
  }
}

void CausalPrior::init_params(ParamStore& store, std::mt19937_64& rng) const {
  for (std::size_t i = 0; i < graph_.size(); ++i) {
    init_mlp(store, head_prefix(i, 1), head_shape(), rng, /*zero_output=*/true);
    init_mlp(store, head_prefix(i, 2), head_shape(), rng, /*zero_output=*/true);
  }
}

CausalPrior::TapeMechanism CausalPrior::mechanism(ad::Tape& tape,
                                                  const ParamStore& store,
                                                  ad::Var z, ad::Var u,
                                                  std::size_t i) const {
  if (static_cast<std::size_t>(u.cols()) != graph_.size() || u.rows() != z.rows()) {
    throw ShapeError("prior: labels " + std::to_string(u.rows()) + "x" +
                     std::to_string(u.cols()) + " vs latents " +
                     std::to_string(z.rows()) + "x" + std::to_string(z.cols()));
  }
  ad::Var in;
  switch (config_.inputs) {
    case PriorConfig::Inputs::kParents: in = masked_parents(tape, graph_, i, z); break;
    case PriorConfig::Inputs::kNone: in = tape.constant(Matrix::Zero(1, z.cols())); break;
    case PriorConfig::Inputs::kLabels: in = u; break;
  }
  ad::Var c = ad::broadcast_rows(
      ad::clip(mlp_forward(tape, store, head_prefix(i, 1), head_shape(), in),
               -config_.slope_clamp, config_.slope_clamp),
      z.rows());
  ad::Var d = ad::broadcast_rows(
      mlp_forward(tape, store, head_prefix(i, 2), head_shape(), in), z.rows());
  return {ad::exp(c) * base_centre(tape, u, i) + d, c, d};
}

ad::Var CausalPrior::base_centre(ad::Tape& tape, ad::Var u, std::size_t i) const {
  const auto m = static_cast<Eigen::Index>(graph_.block_dim());
  if (config_.inputs == PriorConfig::Inputs::kLabels) {
    return tape.constant(Matrix::Zero(u.rows(), m));
  }
  return ad::broadcast_cols(ad::slice_cols(u, static_cast<Eigen::Index>(i), 1), m);
}

std::vector<ad::Var> CausalPrior::log_terms(ad::Tape& tape, const ParamStore& store,
                                            ad::Var z, ad::Var u) const {
  const auto m = static_cast<Eigen::Index>(graph_.block_dim());
  const double bv = config_.base_var;
  const double norm = -kHalfLog2Pi - 0.5 * std::log(bv);
  std::vector<ad::Var> terms;
  terms.reserve(graph_.size());
  for (std::size_t i = 0; i < graph_.size(); ++i) {
    TapeMechanism mech = mechanism(tape, store, z, u, i);
    ad::Var zi = ad::slice_cols(z, static_cast<Eigen::Index>(i) * m, m);
    ad::Var ui = base_centre(tape, u, i);
    ad::Var w = (zi - mech.d) * ad::exp(-mech.c);
    ad::Var base = ad::add_scalar(ad::square(w - ui) * (-0.5 / bv), norm);
    terms.push_back(ad::row_sum(base - mech.c));
  }
  return terms;
}

ad::Var CausalPrior::logdensity(ad::Tape& tape, const ParamStore& store,
                                ad::Var z, ad::Var u) const {
  std::vector<ad::Var> terms = log_terms(tape, store, z, u);
  ad::Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = total + terms[i];
  return total;
}

void CausalPrior::check_inputs(const Vector& z, const Vector& u) const {
  if (static_cast<std::size_t>(z.size()) != graph_.latent_dim() ||
      static_cast<std::size_t>(u.size()) != graph_.size()) {
    throw ShapeError("prior: latent of length " + std::to_string(z.size()) +
                     " and labels of length " + std::to_string(u.size()) +
                     " do not match the graph");
  }
}

Vector CausalPrior::lam_mechanism(const ParamStore& store, const Vector& z,
                                  const Vector& u, std::size_t i) const {
  check_inputs(z, u);
  if (i >= graph_.size()) {
    throw ContractError("prior: variable " + std::to_string(i) + " out of range");
  }
  ad::Tape tape;
  TapeMechanism mech = mechanism(tape, store, tape.constant(Matrix(z.transpose())),
                                 tape.constant(Matrix(u.transpose())), i);
  Vector out = mech.lam.value().row(0).transpose();
  if (!out.allFinite()) {
    throw NumericError("prior: non-finite mechanism output for variable " +
                       std::to_string(i));
  }
  return out;
}

Vector CausalPrior::prior_log_terms(const ParamStore& store, const Vector& z,
                                    const Vector& u) const {
  check_inputs(z, u);
  ad::Tape tape;
  std::vector<ad::Var> terms = log_terms(tape, store, tape.constant(Matrix(z.transpose())),
                                         tape.constant(Matrix(u.transpose())));
  Vector out(static_cast<Eigen::Index>(terms.size()));
  for (std::size_t i = 0; i < terms.size(); ++i) {
    out(static_cast<Eigen::Index>(i)) = terms[i].scalar();
    if (!std::isfinite(out(static_cast<Eigen::Index>(i)))) {
      throw NumericError("prior: non-finite log-density for variable " +
                         std::to_string(i));
    }
  }
  return out;
}

double CausalPrior::prior_logdensity(const ParamStore& store, const Vector& z,
                                     const Vector& u) const {
  return prior_log_terms(store, z, u).sum();
}

ExpFamilyStats CausalPrior::expfam_stats(const ParamStore& store, const Vector& z,
                                         const Vector& u) const {
  check_inputs(z, u);
  const auto m = static_cast<Eigen::Index>(graph_.block_dim());
  ad::Tape tape;
  ad::Var zv = tape.constant(Matrix(z.transpose()));
  ad::Var uv = tape.constant(Matrix(u.transpose()));
  ExpFamilyStats stats;
  stats.eta1.resize(z.size());
  stats.eta2.resize(z.size());
  for (std::size_t i = 0; i < graph_.size(); ++i) {
    TapeMechanism mech = mechanism(tape, store, zv, uv, i);
    for (Eigen::Index k = 0; k < m; ++k) {
      const double mean = mech.lam.value()(0, k);
      const double var = std::exp(2.0 * mech.c.value()(0, k)) * config_.base_var;
      const Eigen::Index row = static_cast<Eigen::Index>(i) * m + k;
      stats.eta1(row) = mean / var;
      stats.eta2(row) = -0.5 / var;
    }
  }
  return stats;
}

}  // namespace icm
