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

#include "icm/mlp.hpp"

#include <cmath>

#include "icm/errors.hpp"

namespace icm {

namespace {

std::string layer_name(const std::string& prefix, std::size_t k,
                       const char* what) {
  return prefix + "/l" + std::to_string(k) + "/" + what;
}

std::size_t fan_in(const MlpShape& s, std::size_t layer) {
  return layer == 0 ? s.in : s.hidden;
}

std::size_t fan_out(const MlpShape& s, std::size_t layer) {
  return layer == s.hidden_layers ? s.out : s.hidden;
}

}  // namespace

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "softplus") return Activation::kSoftplus;
  if (name == "tanh") return Activation::kTanh;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::kRelu: return "relu";
    case Activation::kSoftplus: return "softplus";
    case Activation::kTanh: return "tanh";
  }
  return "relu";
}

void register_mlp(ParamStore& store, const std::string& prefix,
                  const MlpShape& shape) {
  for (std::size_t k = 0; k <= shape.hidden_layers; ++k) {
    store.add(layer_name(prefix, k, "W"), fan_in(shape, k), fan_out(shape, k));
    store.add(layer_name(prefix, k, "b"), 1, fan_out(shape, k));
  }
}

void init_mlp(ParamStore& store, const std::string& prefix,
              const MlpShape& shape, std::mt19937_64& rng, bool zero_output) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t k = 0; k <= shape.hidden_layers; ++k) {
    auto w = store.view(layer_name(prefix, k, "W"));
    store.view(layer_name(prefix, k, "b")).setZero();
    const bool output = k == shape.hidden_layers;
    if (output && zero_output) {
      w.setZero();
      continue;
    }
    const double fin = std::max<double>(1.0, static_cast<double>(fan_in(shape, k)));
    const double sd = output ? std::sqrt(1.0 / fin) : std::sqrt(2.0 / fin);
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = sd * normal(rng);
    }
  }
}

ad::Var mlp_forward(ad::Tape& tape, const ParamStore& store,
                    const std::string& prefix, const MlpShape& shape,
                    ad::Var input) {
  if (static_cast<std::size_t>(input.cols()) != shape.in) {
    throw ShapeError(prefix + ": input has " + std::to_string(input.cols()) +
                     " columns, network expects " + std::to_string(shape.in));
  }
  ad::Var h = input;
  for (std::size_t k = 0; k <= shape.hidden_layers; ++k) {
    ad::Var w = tape.param(store, layer_name(prefix, k, "W"));
    ad::Var b = tape.param(store, layer_name(prefix, k, "b"));
    h = ad::add_row(ad::matmul(h, w), b);
    if (k == shape.hidden_layers) break;
    switch (shape.activation) {
      case Activation::kRelu: h = ad::relu(h); break;
      case Activation::kSoftplus: h = ad::softplus(h); break;
      case Activation::kTanh: h = ad::tanh(h); break;
    }
  }
  return h;
}

}  // namespace icm
