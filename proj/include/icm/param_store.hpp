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

#ifndef ICM_PARAM_STORE_HPP_
#define ICM_PARAM_STORE_HPP_

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace icm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct ParamSegment {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
};

// A flat parameter vector partitioned into named matrix segments.
//
// Segments are laid out contiguously in registration order, so they are
// disjoint and cover [0, size()) exactly. Each segment is stored column-major
// and can be viewed as a rows x cols matrix without copying.
class ParamStore {
 public:
  // Registers a zero-filled segment. Throws ContractError on a duplicate name.
  std::size_t add(std::string name, std::size_t rows, std::size_t cols);

  std::optional<std::size_t> find(std::string_view name) const;
  // Throws ContractError when the name is unknown.
  std::size_t index(std::string_view name) const;

  const ParamSegment& segment(std::size_t idx) const { return segments_[idx]; }
  std::span<const ParamSegment> segments() const { return segments_; }

  Eigen::Map<Matrix> view(std::size_t idx);
  Eigen::Map<const Matrix> view(std::size_t idx) const;
  Eigen::Map<Matrix> view(std::string_view name) { return view(index(name)); }
  Eigen::Map<const Matrix> view(std::string_view name) const {
    return view(index(name));
  }

  Vector& values() { return values_; }
  const Vector& values() const { return values_; }
  std::size_t size() const { return static_cast<std::size_t>(values_.size()); }

  // True when both stores have identical segment names and shapes.
  bool same_layout(const ParamStore& other) const;

 private:
  std::vector<ParamSegment> segments_;
  std::unordered_map<std::string, std::size_t> by_name_;
  Vector values_;
};

}  // namespace icm

#endif  // ICM_PARAM_STORE_HPP_
