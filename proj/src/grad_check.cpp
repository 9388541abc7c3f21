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

#include "icm/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "icm/errors.hpp"

namespace icm {

std::pair<double, Vector> value_and_gradient(const LossBuilder& build,
                                             const ParamStore& params) {
  ad::Tape tape;
  ad::Var root = build(tape, params);
  tape.backward(root);
  return {root.scalar(), tape.param_gradient(params)};
}

namespace {

double loss_at(const LossBuilder& build, const ParamStore& params) {
  ad::Tape tape;
  return build(tape, params).scalar();
}

}  // namespace

GradCheckReport grad_check(const LossBuilder& build, ParamStore& params,
                           const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw ContractError("grad_check: step must be > 0");

  GradCheckReport report;
  report.denominator_floor = options.denominator_floor;
  report.analytic = value_and_gradient(build, params).second;
  const auto n = static_cast<Eigen::Index>(params.size());
  report.numeric = Vector::Zero(n);
  report.rel_error = Vector::Zero(n);

  std::vector<std::size_t> coords = options.coordinates;
  if (coords.empty()) {
    coords.resize(params.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
  }

  Vector& theta = params.values();
  double total = 0.0;
  for (std::size_t c : coords) {
    const auto i = static_cast<Eigen::Index>(c);
    const double saved = theta(i);
    theta(i) = saved + options.step;
    const double plus = loss_at(build, params);
    theta(i) = saved - options.step;
    const double minus = loss_at(build, params);
    theta(i) = saved;

    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      report.non_finite.push_back(c);
      report.numeric(i) = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    const double num = (plus - minus) / (2.0 * options.step);
    const double ana = report.analytic(i);
    const double denom =
        std::max({std::abs(ana), std::abs(num), options.denominator_floor});
    const double rel = std::abs(ana - num) / denom;
    report.numeric(i) = num;
    report.rel_error(i) = rel;
    total += rel;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = c;
    }
    if (rel > options.tol) report.flagged.push_back(c);
  }
  if (!coords.empty()) {
    report.mean_rel_error = total / static_cast<double>(coords.size());
  }
  return report;
}

}  // namespace icm
