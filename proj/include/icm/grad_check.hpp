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

#ifndef ICM_GRAD_CHECK_HPP_
#define ICM_GRAD_CHECK_HPP_

#include <cstddef>
#include <functional>
#include <vector>

#include "icm/autodiff.hpp"
#include "icm/param_store.hpp"

namespace icm {

// Builds a scalar loss on `tape` from the current values in `params`.
// The builder must be a pure function of the parameter values (any
// randomness has to be re-seeded identically on each call).
using LossBuilder = std::function<ad::Var(ad::Tape&, const ParamStore&)>;

struct GradCheckReport {
  Vector analytic;
  Vector numeric;
  // |analytic - numeric| / max(|analytic|, |numeric|, denominator_floor).
  Vector rel_error;
  double max_rel_error = 0.0;
  double mean_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::vector<std::size_t> flagged;     // rel_error > tol
  std::vector<std::size_t> non_finite;  // loss not finite at +/- step
  double denominator_floor = 0.0;

  bool passed() const { return flagged.empty() && non_finite.empty(); }
};

struct GradCheckOptions {
  double step = 1e-5;
  double tol = 1e-4;
  // Keeps the relative error meaningful where both gradients vanish.
  double denominator_floor = 1e-6;
  // Check only these coordinates (all when empty).
  std::vector<std::size_t> coordinates;
};

// Compares the tape gradient of `build` against central finite differences.
// Throws ContractError when step <= 0. Non-finite perturbed losses are
// recorded per coordinate.
GradCheckReport grad_check(const LossBuilder& build, ParamStore& params,
                           const GradCheckOptions& options);

// Loss value and tape gradient at the current parameters.
std::pair<double, Vector> value_and_gradient(const LossBuilder& build,
                                             const ParamStore& params);

}  // namespace icm

#endif  // ICM_GRAD_CHECK_HPP_
