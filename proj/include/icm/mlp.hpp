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

#ifndef ICM_MLP_HPP_
#define ICM_MLP_HPP_

#include <cstddef>
#include <random>
#include <string>
#include <string_view>

#include "icm/autodiff.hpp"
#include "icm/param_store.hpp"

namespace icm {

enum class Activation { kRelu, kSoftplus, kTanh };

Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation a);

// Fully connected network: `hidden_layers` layers of width `hidden`, then a
// linear output layer. Parameters live under "<prefix>/l<k>/W" (fan_in x
// fan_out) and "<prefix>/l<k>/b" (1 x fan_out).
struct MlpShape {
  std::size_t in = 0;
  std::size_t hidden = 100;
  std::size_t hidden_layers = 2;
  std::size_t out = 0;
  Activation activation = Activation::kRelu;
};

void register_mlp(ParamStore& store, const std::string& prefix,
                  const MlpShape& shape);

// He-normal hidden weights, zero biases. The output layer is zero when
// `zero_output` is set, otherwise drawn with variance 1/fan_in.
void init_mlp(ParamStore& store, const std::string& prefix,
              const MlpShape& shape, std::mt19937_64& rng, bool zero_output);

// input: B x in  ->  B x out
ad::Var mlp_forward(ad::Tape& tape, const ParamStore& store,
                    const std::string& prefix, const MlpShape& shape,
                    ad::Var input);

}  // namespace icm

#endif  // ICM_MLP_HPP_
