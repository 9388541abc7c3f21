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

#ifndef ICM_GRAPH_HPP_
#define ICM_GRAPH_HPP_

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "icm/param_store.hpp"

namespace icm {

using Edge = std::pair<std::size_t, std::size_t>;  // (parent, child), 0-based

// Immutable causal DAG over n variables, each owning a block of m latent
// coordinates. adjacency(j, i) is true iff j -> i.
class CausalGraph {
 public:
  CausalGraph() = default;

  // Duplicate edges are merged. Throws GraphError on an out-of-range index,
  // a self loop or a directed cycle (the message lists one cycle).
  static CausalGraph from_edges(std::size_t n, std::span<const Edge> edges,
                                std::size_t block_dim = 1,
                                std::vector<std::string> names = {});

  std::size_t size() const { return n_; }
  std::size_t block_dim() const { return m_; }
  std::size_t latent_dim() const { return n_ * m_; }

  bool adjacency(std::size_t parent, std::size_t child) const {
    return adj_[parent * n_ + child] != 0;
  }
  const std::vector<std::size_t>& topo_order() const { return topo_; }
  const std::vector<std::size_t>& parents(std::size_t i) const;
  std::vector<std::size_t> children(std::size_t i) const;
  // Variables reachable from i by a directed path, excluding i itself.
  std::vector<std::size_t> descendants(std::size_t i) const;
  bool is_descendant(std::size_t of, std::size_t candidate) const;
  std::vector<Edge> edges() const;
  const std::vector<std::string>& names() const { return names_; }

  // z has length n (scalar variables) or n*k (blocks of k). Returns z with
  // every block that is not a parent of i zeroed. Throws ShapeError otherwise.
  Vector mask_parents(std::size_t i, const Vector& z) const;

  // Same graph with a different block dimension.
  CausalGraph with_block_dim(std::size_t m) const;

  nlohmann::json to_json() const;
  static CausalGraph from_json(const nlohmann::json& j);

  bool operator==(const CausalGraph& other) const;

 private:
  std::size_t n_ = 0;
  std::size_t m_ = 1;
  std::vector<unsigned char> adj_;
  std::vector<std::vector<std::size_t>> parents_;
  std::vector<std::size_t> topo_;
  std::vector<std::string> names_;
};

// Angle, light -> shadow length, shadow position.
CausalGraph pendulum_graph(std::size_t m = 1);
// Ball size -> water height -> water flow <- hole position.
CausalGraph flow_graph(std::size_t m = 1);
// Arm -> blue, green, red; blue -> red; green -> red.
CausalGraph causal_circuit_graph(std::size_t m = 1);

}  // namespace icm

#endif  // ICM_GRAPH_HPP_
