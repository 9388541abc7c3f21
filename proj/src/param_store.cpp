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

#include "icm/param_store.hpp"

#include <utility>

#include "icm/errors.hpp"

namespace icm {

std::size_t ParamStore::add(std::string name, std::size_t rows,
                            std::size_t cols) {
  if (by_name_.contains(name)) {
    throw ContractError("duplicate parameter name '" + name + "'");
  }
  ParamSegment seg;
  seg.name = std::move(name);
  seg.offset = size();
  seg.rows = rows;
  seg.cols = cols;

  Vector grown = Vector::Zero(static_cast<Eigen::Index>(seg.offset + seg.size()));
  grown.head(values_.size()) = values_;
  values_ = std::move(grown);

  const std::size_t idx = segments_.size();
  by_name_.emplace(seg.name, idx);
  segments_.push_back(std::move(seg));
  return idx;
}

std::optional<std::size_t> ParamStore::find(std::string_view name) const {
  auto it = by_name_.find(std::string(name));
  if (it == by_name_.end()) return std::nullopt;
  return it->second;
}

std::size_t ParamStore::index(std::string_view name) const {
  auto idx = find(name);
  if (!idx) {
    throw ContractError("unknown parameter '" + std::string(name) + "'");
  }
  return *idx;
}

Eigen::Map<Matrix> ParamStore::view(std::size_t idx) {
  const ParamSegment& s = segments_.at(idx);
  return {values_.data() + s.offset, static_cast<Eigen::Index>(s.rows),
          static_cast<Eigen::Index>(s.cols)};
}

Eigen::Map<const Matrix> ParamStore::view(std::size_t idx) const {
  const ParamSegment& s = segments_.at(idx);
  return {values_.data() + s.offset, static_cast<Eigen::Index>(s.rows),
          static_cast<Eigen::Index>(s.cols)};
}

bool ParamStore::same_layout(const ParamStore& other) const {
  if (segments_.size() != other.segments_.size()) return false;
  for (std::size_t i = 0; i < segments_.size(); ++i) {
    const auto& a = segments_[i];
    const auto& b = other.segments_[i];
    if (a.name != b.name || a.rows != b.rows || a.cols != b.cols) return false;
  }
  return true;
}

}  // namespace icm
