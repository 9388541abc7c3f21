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

#include "icm/graph.hpp"

#include <algorithm>
#include <functional>
#include <queue>

#include "icm/errors.hpp"

namespace icm {

namespace {

// Returns one directed cycle as a vertex list, or empty if acyclic.
std::vector<std::size_t> find_cycle(std::size_t n,
                                    const std::vector<unsigned char>& adj) {
  std::vector<int> state(n, 0);  // 0 new, 1 on stack, 2 done
  std::vector<std::size_t> stack;
  std::vector<std::size_t> cycle;
  std::function<bool(std::size_t)> dfs = [&](std::size_t v) {
    state[v] = 1;
    stack.push_back(v);
    for (std::size_t w = 0; w < n; ++w) {
      if (!adj[v * n + w]) continue;
      if (state[w] == 1) {
        auto it = std::find(stack.begin(), stack.end(), w);
        cycle.assign(it, stack.end());
        cycle.push_back(w);
        return true;
      }
      if (state[w] == 0 && dfs(w)) return true;
    }
    stack.pop_back();
    state[v] = 2;
    return false;
  };
  for (std::size_t v = 0; v < n; ++v) {
    if (state[v] == 0 && dfs(v)) return cycle;
  }
  return {};
}

}  // namespace

CausalGraph CausalGraph::from_edges(std::size_t n, std::span<const Edge> edges,
                                    std::size_t block_dim,
                                    std::vector<std::string> names) {
  if (block_dim == 0) throw GraphError("block dimension must be positive");
  if (!names.empty() && names.size() != n) {
    throw GraphError("expected " + std::to_string(n) + " names, got " +
                     std::to_string(names.size()));
  }
  CausalGraph g;
  g.n_ = n;
  g.m_ = block_dim;
  g.adj_.assign(n * n, 0);
  g.names_ = std::move(names);
  for (const auto& [from, to] : edges) {
    if (from >= n || to >= n) {
      throw GraphError("edge (" + std::to_string(from) + ", " +
                       std::to_string(to) + ") out of range for n = " +
                       std::to_string(n));
    }
    if (from == to) {
      throw GraphError("self loop on variable " + std::to_string(from));
    }
    g.adj_[from * n + to] = 1;
  }

  auto cycle = find_cycle(n, g.adj_);
  if (!cycle.empty()) {
    std::string msg = "graph has a cycle: ";
    for (std::size_t k = 0; k < cycle.size(); ++k) {
      if (k) msg += " -> ";
      msg += std::to_string(cycle[k]);
    }
    throw GraphError(msg);
  }

  g.parents_.assign(n, {});
  std::vector<std::size_t> indegree(n, 0);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      if (g.adj_[j * n + i]) {
        g.parents_[i].push_back(j);
        ++indegree[i];
      }
    }
  }
  // Kahn's algorithm; the smallest ready index goes first.
  std::priority_queue<std::size_t, std::vector<std::size_t>, std::greater<>> ready;
  for (std::size_t i = 0; i < n; ++i) {
    if (indegree[i] == 0) ready.push(i);
  }
  while (!ready.empty()) {
    const std::size_t v = ready.top();
    ready.pop();
    g.topo_.push_back(v);
    for (std::size_t w = 0; w < n; ++w) {
      if (g.adj_[v * n + w] && --indegree[w] == 0) ready.push(w);
    }
  }
  return g;
}

const std::vector<std::size_t>& CausalGraph::parents(std::size_t i) const {
  if (i >= n_) throw GraphError("variable " + std::to_string(i) + " out of range");
  return parents_[i];
}

std::vector<std::size_t> CausalGraph::children(std::size_t i) const {
  std::vector<std::size_t> out;
  for (std::size_t w = 0; w < n_; ++w) {
    if (adjacency(i, w)) out.push_back(w);
  }
  return out;
}

std::vector<std::size_t> CausalGraph::descendants(std::size_t i) const {
  if (i >= n_) throw GraphError("variable " + std::to_string(i) + " out of range");
  std::vector<char> seen(n_, 0);
  std::vector<std::size_t> frontier{i};
  while (!frontier.empty()) {
    const std::size_t v = frontier.back();
    frontier.pop_back();
    for (std::size_t w = 0; w < n_; ++w) {
      if (adjacency(v, w) && !seen[w]) {
        seen[w] = 1;
        frontier.push_back(w);
      }
    }
  }
  std::vector<std::size_t> out;
  for (std::size_t w = 0; w < n_; ++w) {
    if (seen[w]) out.push_back(w);
  }
  return out;
}

bool CausalGraph::is_descendant(std::size_t of, std::size_t candidate) const {
  const auto d = descendants(of);
  return std::find(d.begin(), d.end(), candidate) != d.end();
}

std::vector<Edge> CausalGraph::edges() const {
  std::vector<Edge> out;
  for (std::size_t j = 0; j < n_; ++j) {
    for (std::size_t i = 0; i < n_; ++i) {
      if (adjacency(j, i)) out.emplace_back(j, i);
    }
  }
  return out;
}

Vector CausalGraph::mask_parents(std::size_t i, const Vector& z) const {
  if (i >= n_) throw GraphError("variable " + std::to_string(i) + " out of range");
  const auto len = static_cast<std::size_t>(z.size());
  if (n_ == 0 || len % n_ != 0 || len == 0) {
    throw ShapeError("mask_parents: vector of length " + std::to_string(len) +
                     " does not split into " + std::to_string(n_) + " blocks");
  }
  const std::size_t k = len / n_;
  Vector out = Vector::Zero(z.size());
  for (std::size_t j : parents_[i]) {
    out.segment(static_cast<Eigen::Index>(j * k), static_cast<Eigen::Index>(k)) =
        z.segment(static_cast<Eigen::Index>(j * k), static_cast<Eigen::Index>(k));
  }
  return out;
}

CausalGraph CausalGraph::with_block_dim(std::size_t m) const {
  if (m == 0) throw GraphError("block dimension must be positive");
  CausalGraph g = *this;
  g.m_ = m;
  return g;
}

nlohmann::json CausalGraph::to_json() const {
  nlohmann::json j;
  j["n"] = n_;
  j["m"] = m_;
  auto e = nlohmann::json::array();
  for (const auto& [a, b] : edges()) e.push_back({a, b});
  j["edges"] = e;
  if (!names_.empty()) j["names"] = names_;
  return j;
}

CausalGraph CausalGraph::from_json(const nlohmann::json& j) {
  for (const auto& [key, _] : j.items()) {
    if (key != "n" && key != "m" && key != "edges" && key != "names") {
      throw ConfigError("graph: unknown field '" + key + "'");
    }
  }
  if (!j.contains("n") || !j.contains("edges")) {
    throw ConfigError("graph: 'n' and 'edges' are required");
  }
  std::vector<Edge> edges;
  for (const auto& e : j.at("edges")) {
    if (!e.is_array() || e.size() != 2) {
      throw ConfigError("graph: each edge must be a [parent, child] pair");
    }
    edges.emplace_back(e[0].get<std::size_t>(), e[1].get<std::size_t>());
  }
  std::vector<std::string> names;
  if (j.contains("names")) names = j.at("names").get<std::vector<std::string>>();
  return from_edges(j.at("n").get<std::size_t>(), edges,
                    j.value("m", std::size_t{1}), std::move(names));
}

bool CausalGraph::operator==(const CausalGraph& other) const {
  return n_ == other.n_ && m_ == other.m_ && adj_ == other.adj_ &&
         names_ == other.names_;
}

CausalGraph pendulum_graph(std::size_t m) {
  const std::vector<Edge> e{{0, 2}, {0, 3}, {1, 2}, {1, 3}};
  return CausalGraph::from_edges(
      4, e, m, {"pendulum_angle", "light_position", "shadow_length", "shadow_position"});
}

CausalGraph flow_graph(std::size_t m) {
  const std::vector<Edge> e{{0, 1}, {2, 3}, {1, 3}};
  return CausalGraph::from_edges(
      4, e, m, {"ball_size", "water_height", "hole_position", "water_flow"});
}

CausalGraph causal_circuit_graph(std::size_t m) {
  const std::vector<Edge> e{{0, 1}, {0, 2}, {0, 3}, {1, 3}, {2, 3}};
  return CausalGraph::from_edges(
      4, e, m, {"arm_position", "blue_light", "green_light", "red_light"});
}

}  // namespace icm
