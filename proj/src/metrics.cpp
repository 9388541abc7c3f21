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


#include "icm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "icm/errors.hpp"

namespace icm {

namespace {

nlohmann::json matrix_json(const Matrix& m) {
  auto rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    rows.push_back(row);
  }
  return rows;
}

std::vector<double> vector_list(const Vector& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

// Mean that is exact when all entries are equal.
double stable_mean(const double* v, std::size_t n, std::size_t stride) {
  const double v0 = v[0];
  double s = 0.0;
  for (std::size_t k = 0; k < n; ++k) s += v[k * stride] - v0;
  return v0 + s / static_cast<double>(n);
}

// Linear-interpolation percentile of an unsorted sample, q in [0, 1].
double percentile(std::vector<double> a, double q) {
  std::sort(a.begin(), a.end());
  const double pos = q * static_cast<double>(a.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, a.size() - 1);
  return a[lo] + (pos - static_cast<double>(lo)) * (a[hi] - a[lo]);
}

// ---- tree growing ----------------------------------------------------------

using Node = TreeEnsemble::Node;
using Order = std::vector<std::vector<Eigen::Index>>;

Order presort(const Matrix& x) {
  Order order(static_cast<std::size_t>(x.cols()));
  for (Eigen::Index f = 0; f < x.cols(); ++f) {
    auto& o = order[static_cast<std::size_t>(f)];
    o.resize(static_cast<std::size_t>(x.rows()));
    std::iota(o.begin(), o.end(), Eigen::Index{0});
    std::stable_sort(o.begin(), o.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return x(a, f) < x(b, f); });
  }
  return order;
}

struct NodeStats {
  double s = 0.0;  // sum w r
  double w = 0.0;  // sum w
  double q = 0.0;  // sum w r^2
};

std::vector<Node> grow_tree(const Matrix& x, const Order& order, const Vector& r,
                            const Vector& w, const TreeConfig& cfg, double leaf_scale,
                            Vector& importance) {
  const Eigen::Index n = x.rows();
  std::vector<Node> nodes(1);
  std::vector<NodeStats> stats(1);
  std::vector<int> node_of(static_cast<std::size_t>(n), -1);
  for (Eigen::Index k = 0; k < n; ++k) {
    if (w(k) <= 0.0) continue;
    node_of[static_cast<std::size_t>(k)] = 0;
    stats[0].s += w(k) * r(k);
    stats[0].w += w(k);
    stats[0].q += w(k) * r(k) * r(k);
  }
  std::vector<int> frontier{0};
  for (std::size_t level = 0; level < cfg.depth && !frontier.empty(); ++level) {
    const std::size_t slots = frontier.size();
    std::vector<int> slot_of(nodes.size(), -1);
    for (std::size_t s = 0; s < slots; ++s) slot_of[static_cast<std::size_t>(frontier[s])] = static_cast<int>(s);
    std::vector<double> best_gain(slots, 0.0), best_thr(slots, 0.0);
    std::vector<int> best_f(slots, -1);
    std::vector<double> sl(slots), wl(slots), last(slots);
    std::vector<char> seen(slots);
    for (Eigen::Index f = 0; f < x.cols(); ++f) {
      std::fill(sl.begin(), sl.end(), 0.0);
      std::fill(wl.begin(), wl.end(), 0.0);
      std::fill(seen.begin(), seen.end(), 0);
      for (Eigen::Index row : order[static_cast<std::size_t>(f)]) {
        const int nd = node_of[static_cast<std::size_t>(row)];
        if (nd < 0) continue;
        const int s = slot_of[static_cast<std::size_t>(nd)];
        if (s < 0) continue;
        const auto su = static_cast<std::size_t>(s);
        const double v = x(row, f);
        if (seen[su] && v > last[su]) {
          const NodeStats& ns = stats[static_cast<std::size_t>(nd)];
          const double wr = ns.w - wl[su];
          if (wl[su] >= cfg.min_leaf && wr >= cfg.min_leaf) {
            const double sr = ns.s - sl[su];
            const double gain =
                sl[su] * sl[su] / wl[su] + sr * sr / wr - ns.s * ns.s / ns.w;
            if (gain > best_gain[su]) {
              best_gain[su] = gain;
              best_f[su] = static_cast<int>(f);
              double mid = 0.5 * (last[su] + v);
              if (!(mid < v)) mid = last[su];
              best_thr[su] = mid;
            }
          }
        }
        sl[su] += w(row) * r(row);
        wl[su] += w(row);
        last[su] = v;
        seen[su] = 1;
      }
    }
    std::vector<int> next;
    for (std::size_t s = 0; s < slots; ++s) {
      const int nd = frontier[s];
      const NodeStats ns = stats[static_cast<std::size_t>(nd)];
      const double sse = ns.q - ns.s * ns.s / ns.w;
      if (best_f[s] < 0 || !(best_gain[s] > 1e-12 * std::max(ns.q, 1e-300)) ||
          !(sse > 0.0)) {
        continue;
      }
      importance(best_f[s]) += best_gain[s];
      const int left = static_cast<int>(nodes.size());
      nodes.emplace_back();
      nodes.emplace_back();
      stats.emplace_back();
      stats.emplace_back();
      Node& p = nodes[static_cast<std::size_t>(nd)];
      p.feature = best_f[s];
      p.threshold = best_thr[s];
      p.left = left;
      p.right = left + 1;
      next.push_back(left);
      next.push_back(left + 1);
    }
    if (next.empty()) break;
    for (Eigen::Index k = 0; k < n; ++k) {
      const int nd = node_of[static_cast<std::size_t>(k)];
      if (nd < 0) continue;
      const Node& p = nodes[static_cast<std::size_t>(nd)];
      if (p.feature < 0) continue;
      const int child = x(k, p.feature) <= p.threshold ? p.left : p.right;
      node_of[static_cast<std::size_t>(k)] = child;
      NodeStats& cs = stats[static_cast<std::size_t>(child)];
      cs.s += w(k) * r(k);
      cs.w += w(k);
      cs.q += w(k) * r(k) * r(k);
    }
    frontier = std::move(next);
  }
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    if (nodes[k].feature < 0 && stats[k].w > 0.0) {
      nodes[k].value = leaf_scale * stats[k].s / stats[k].w;
    }
  }
  return nodes;
}

double tree_predict(const std::vector<Node>& nodes, const Matrix& x, Eigen::Index row) {
  int k = 0;
  while (nodes[static_cast<std::size_t>(k)].feature >= 0) {
    const Node& p = nodes[static_cast<std::size_t>(k)];
    k = x(row, p.feature) <= p.threshold ? p.left : p.right;
  }
  return nodes[static_cast<std::size_t>(k)].value;
}

}  // namespace

Regressor parse_regressor(const std::string& name) {
  if (name == "gbt") return Regressor::kGbt;
  if (name == "forest") return Regressor::kForest;
  throw ConfigError("unknown regressor '" + name + "' (expected gbt or forest)");
}

std::string regressor_name(Regressor r) {
  return r == Regressor::kGbt ? "gbt" : "forest";
}

TreeEnsemble TreeEnsemble::fit(const Matrix& x, const Vector& y, const TreeConfig& cfg) {
  if (x.rows() != y.size() || x.rows() == 0) {
    throw ShapeError("tree ensemble: " + std::to_string(x.rows()) + " rows but " +
                     std::to_string(y.size()) + " targets");
  }
  if (cfg.trees == 0) throw ConfigError("tree ensemble: trees must be positive");
  TreeEnsemble model;
  model.importance_ = Vector::Zero(x.cols());
  const Order order = presort(x);
  const Eigen::Index n = x.rows();
  if (cfg.kind == Regressor::kGbt) {
    model.base_ = y.mean();
    Vector pred = Vector::Constant(n, model.base_);
    const Vector w = Vector::Ones(n);
    for (std::size_t t = 0; t < cfg.trees; ++t) {
      const Vector r = y - pred;
      model.trees_.push_back(
          grow_tree(x, order, r, w, cfg, cfg.learning_rate, model.importance_));
      for (Eigen::Index k = 0; k < n; ++k) pred(k) += tree_predict(model.trees_.back(), x, k);
    }
  } else {
    std::mt19937_64 rng(cfg.seed);
    std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
    model.scale_ = 1.0 / static_cast<double>(cfg.trees);
    for (std::size_t t = 0; t < cfg.trees; ++t) {
      Vector w = Vector::Zero(n);
      for (Eigen::Index k = 0; k < n; ++k) w(pick(rng)) += 1.0;
      model.trees_.push_back(grow_tree(x, order, y, w, cfg, 1.0, model.importance_));
    }
  }
  return model;
}

Vector TreeEnsemble::predict(const Matrix& x) const {
  Vector out = Vector::Constant(x.rows(), base_);
  for (const auto& t : trees_) {
    for (Eigen::Index k = 0; k < x.rows(); ++k) out(k) += scale_ * tree_predict(t, x, k);
  }
  return out;
}

// ---- DCI -------------------------------------------------------------------

std::pair<double, double> dci_from_importance(const Matrix& r) {
  const Eigen::Index codes = r.rows(), factors = r.cols();
  const double total = r.sum();
  if (!(total > 0.0)) return {0.0, 0.0};
  auto entropy = [](const auto& p, double base) {
    const double s = p.sum();
    double h = 0.0;
    for (Eigen::Index k = 0; k < p.size(); ++k) {
      const double q = p(k) / s;
      if (q > 0.0) h -= q * std::log(q);
    }
    return base > 1.0 ? h / std::log(base) : 0.0;
  };
  double d = 0.0;
  for (Eigen::Index i = 0; i < codes; ++i) {
    const double rs = r.row(i).sum();
    if (rs > 0.0) d += rs / total * (1.0 - entropy(r.row(i), static_cast<double>(factors)));
  }
  double c = 0.0;
  for (Eigen::Index j = 0; j < factors; ++j) {
    const double cs = r.col(j).sum();
    if (cs > 0.0) c += cs / total * (1.0 - entropy(r.col(j), static_cast<double>(codes)));
  }
  return {d, c};
}

DciScores dci(const Matrix& latents, const Matrix& factors, const DciConfig& cfg) {
  if (latents.rows() != factors.rows()) {
    throw ShapeError("dci: " + std::to_string(latents.rows()) + " latent rows vs " +
                     std::to_string(factors.rows()) + " factor rows");
  }
  if (factors.cols() < 2) throw ContractError("dci: need at least 2 factors");
  if (cfg.block_dim == 0 || latents.cols() % static_cast<Eigen::Index>(cfg.block_dim) != 0) {
    throw ShapeError("dci: latent width " + std::to_string(latents.cols()) +
                     " is not a multiple of the block size");
  }
  const Eigen::Index n = latents.rows();
  const auto n_train = static_cast<Eigen::Index>(std::floor(cfg.train_fraction * static_cast<double>(n)));
  if (n_train < 2 || n_train >= n) throw ContractError("dci: train/test split leaves an empty side");
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::mt19937_64 rng(cfg.seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  Matrix xtr(n_train, latents.cols()), xte(n - n_train, latents.cols());
  Matrix ytr(n_train, factors.cols()), yte(n - n_train, factors.cols());
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Index src = idx[static_cast<std::size_t>(k)];
    if (k < n_train) {
      xtr.row(k) = latents.row(src);
      ytr.row(k) = factors.row(src);
    } else {
      xte.row(k - n_train) = latents.row(src);
      yte.row(k - n_train) = factors.row(src);
    }
  }
  DciScores out;
  out.method = regressor_name(cfg.trees.kind);
  out.importance = Matrix::Zero(latents.cols(), factors.cols());
  out.factor_errors = Vector::Zero(factors.cols());
  for (Eigen::Index j = 0; j < factors.cols(); ++j) {
    const double mu = ytr.col(j).mean();
    double sd = std::sqrt((ytr.col(j).array() - mu).square().mean());
    if (!(sd > 0.0)) sd = 1.0;
    const Vector y = (ytr.col(j).array() - mu) / sd;
    const Vector yt = (yte.col(j).array() - mu) / sd;
    TreeConfig tc = cfg.trees;
    tc.seed = cfg.trees.seed + static_cast<std::uint64_t>(j);
    const TreeEnsemble model = TreeEnsemble::fit(xtr, y, tc);
    const double s = model.importance().sum();
    if (s > 0.0) out.importance.col(j) = model.importance() / s;
    out.factor_errors(j) = (model.predict(xte) - yt).squaredNorm() / static_cast<double>(yt.size());
  }
  const auto m = static_cast<Eigen::Index>(cfg.block_dim);
  const Eigen::Index blocks = latents.cols() / m;
  out.block_importance = Matrix::Zero(blocks, factors.cols());
  for (Eigen::Index b = 0; b < blocks; ++b) {
    out.block_importance.row(b) = out.importance.middleRows(b * m, m).colwise().sum();
  }
  std::tie(out.d, out.c) = dci_from_importance(out.block_importance);
  out.i = out.factor_errors.mean();
  return out;
}

nlohmann::json DciScores::to_json() const {
  return {{"D", d}, {"C", c}, {"I", i}, {"method", method},
          {"importance", matrix_json(block_importance)},
          {"factor_errors", vector_list(factor_errors)}};
}

// ---- IRS -------------------------------------------------------------------

Matrix discretize_factors(const Matrix& factors, std::size_t bins) {
  if (bins == 0) throw ConfigError("irs: bins must be positive");
  Matrix out = factors;
  for (Eigen::Index j = 0; j < factors.cols(); ++j) {
    std::vector<double> v(factors.col(j).data(), factors.col(j).data() + factors.rows());
    std::sort(v.begin(), v.end());
    const auto distinct = static_cast<std::size_t>(std::unique(v.begin(), v.end()) - v.begin());
    if (distinct <= bins) continue;
    const double lo = v.front(), hi = v[distinct - 1];
    const double width = (hi - lo) / static_cast<double>(bins);
    for (Eigen::Index r = 0; r < factors.rows(); ++r) {
      auto b = static_cast<std::size_t>(std::floor((factors(r, j) - lo) / width));
      b = std::min(b, bins - 1);
      out(r, j) = lo + (static_cast<double>(b) + 0.5) * width;
    }
  }
  return out;
}

IrsReport irs(const Matrix& latents, const Matrix& factors, const IrsConfig& cfg) {
  if (latents.rows() != factors.rows() || latents.rows() < 2) {
    throw ShapeError("irs: latent and factor row counts differ or are too small");
  }
  if (cfg.block_dim == 0 || latents.cols() % static_cast<Eigen::Index>(cfg.block_dim) != 0) {
    throw ShapeError("irs: latent width is not a multiple of the block size");
  }
  if (!(cfg.quantile >= 0.0 && cfg.quantile <= 1.0)) throw ConfigError("irs: quantile must lie in [0, 1]");
  const Matrix g = discretize_factors(factors, cfg.bins);
  const Eigen::Index n = latents.rows(), nl = latents.cols(), nf = factors.cols();
  const std::size_t rows = static_cast<std::size_t>(n);

  Vector max_dev(nl);
  for (Eigen::Index l = 0; l < nl; ++l) {
    const double mu = stable_mean(latents.col(l).data(), rows, 1);
    max_dev(l) = (latents.col(l).array() - mu).abs().maxCoeff();
  }

  Matrix cum = Matrix::Zero(nl, nf);
  std::vector<double> buf;
  for (Eigen::Index j = 0; j < nf; ++j) {
    std::vector<double> values(g.col(j).data(), g.col(j).data() + n);
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    for (double value : values) {
      std::vector<Eigen::Index> members;
      for (Eigen::Index r = 0; r < n; ++r) {
        if (g(r, j) == value) members.push_back(r);
      }
      for (Eigen::Index l = 0; l < nl; ++l) {
        buf.clear();
        for (Eigen::Index r : members) buf.push_back(latents(r, l));
        const double e = stable_mean(buf.data(), buf.size(), 1);
        for (double& v : buf) v = std::abs(v - e);
        cum(l, j) += percentile(buf, cfg.quantile);
      }
    }
    cum.col(j) /= static_cast<double>(values.size());
  }

  IrsReport rep;
  rep.irs_matrix = Matrix::Zero(nl, nf);
  rep.per_dim = Vector::Zero(nl);
  rep.parent.assign(static_cast<std::size_t>(nl), 0);
  double num = 0.0, den = 0.0;
  for (Eigen::Index l = 0; l < nl; ++l) {
    if (!(max_dev(l) > 0.0)) {
      rep.excluded.push_back(static_cast<std::size_t>(l));
      rep.warnings.push_back("latent column " + std::to_string(l) +
                             " has zero variance and is excluded");
      continue;
    }
    Eigen::Index arg = 0;
    for (Eigen::Index j = 0; j < nf; ++j) {
      rep.irs_matrix(l, j) = 1.0 - cum(l, j) / max_dev(l);
      if (rep.irs_matrix(l, j) > rep.irs_matrix(l, arg)) arg = j;
    }
    rep.per_dim(l) = rep.irs_matrix(l, arg);
    rep.parent[static_cast<std::size_t>(l)] = static_cast<std::size_t>(arg);
    num += max_dev(l) * rep.per_dim(l);
    den += max_dev(l);
  }
  if (den > 0.0) {
    rep.score = num / den;
  } else {
    rep.warnings.push_back("every latent column is constant; IRS undefined, reported as 0");
  }
  const auto m = static_cast<Eigen::Index>(cfg.block_dim);
  rep.per_block = Vector::Zero(nl / m);
  for (Eigen::Index b = 0; b < nl / m; ++b) {
    double bn = 0.0, bd = 0.0;
    for (Eigen::Index l = b * m; l < (b + 1) * m; ++l) {
      bn += max_dev(l) * rep.per_dim(l);
      bd += max_dev(l);
    }
    rep.per_block(b) = bd > 0.0 ? bn / bd : 0.0;
  }
  return rep;
}

nlohmann::json IrsReport::to_json() const {
  return {{"IRS", score}, {"per_block", vector_list(per_block)},
          {"excluded", excluded}, {"warnings", warnings}};
}

// ---- correspondence --------------------------------------------------------

Vector ranks(const Vector& v) {
  const Eigen::Index n = v.size();
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::stable_sort(idx.begin(), idx.end(), [&](Eigen::Index a, Eigen::Index b) { return v(a) < v(b); });
  Vector r(n);
  Eigen::Index k = 0;
  while (k < n) {
    Eigen::Index e = k;
    while (e + 1 < n && v(idx[static_cast<std::size_t>(e + 1)]) == v(idx[static_cast<std::size_t>(k)])) ++e;
    const double avg = 0.5 * static_cast<double>(k + e) + 1.0;
    for (Eigen::Index t = k; t <= e; ++t) r(idx[static_cast<std::size_t>(t)]) = avg;
    k = e + 1;
  }
  return r;
}

namespace {

double pearson(const Vector& a, const Vector& b) {
  const Vector ca = a.array() - a.mean();
  const Vector cb = b.array() - b.mean();
  const double den = std::sqrt(ca.squaredNorm() * cb.squaredNorm());
  return den > 0.0 ? ca.dot(cb) / den : 0.0;
}

}  // namespace

double spearman(const Vector& a, const Vector& b) {
  if (a.size() != b.size() || a.size() < 2) throw ShapeError("spearman: length mismatch");
  return pearson(ranks(a), ranks(b));
}

std::vector<std::size_t> hungarian(const Matrix& cost) {
  if (cost.rows() != cost.cols()) throw ShapeError("hungarian: cost matrix must be square");
  const auto n = static_cast<std::size_t>(cost.rows());
  const double inf = std::numeric_limits<double>::infinity();
  // Shortest augmenting paths with row/column potentials (1-based arrays).
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(static_cast<Eigen::Index>(i0 - 1), static_cast<Eigen::Index>(j - 1)) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> result(n);
  for (std::size_t j = 1; j <= n; ++j) result[p[j] - 1] = j - 1;
  return result;
}

Correspondence permutation_correspondence(const Matrix& latents, const Matrix& factors,
                                          std::size_t block_dim) {
  if (latents.rows() != factors.rows()) throw ShapeError("correspondence: row counts differ");
  const auto m = static_cast<Eigen::Index>(block_dim);
  if (m == 0 || latents.cols() % m != 0 || latents.cols() / m != factors.cols()) {
    throw ShapeError("correspondence: " + std::to_string(latents.cols()) +
                     " latent columns do not pool into " + std::to_string(factors.cols()) +
                     " blocks");
  }
  const Eigen::Index k = factors.cols();
  std::vector<Vector> fr, lr;
  for (Eigen::Index j = 0; j < k; ++j) fr.push_back(ranks(factors.col(j)));
  for (Eigen::Index l = 0; l < latents.cols(); ++l) lr.push_back(ranks(latents.col(l)));
  Correspondence out;
  out.abs_rho = Matrix::Zero(k, k);
  for (Eigen::Index b = 0; b < k; ++b) {
    for (Eigen::Index j = 0; j < k; ++j) {
      double best = 0.0;
      for (Eigen::Index l = b * m; l < (b + 1) * m; ++l) {
        best = std::max(best, std::abs(pearson(lr[static_cast<std::size_t>(l)], fr[static_cast<std::size_t>(j)])));
      }
      out.abs_rho(b, j) = best;
    }
  }
  out.assignment = hungarian(-Matrix(out.abs_rho.transpose()));
  out.matched.resize(k);
  for (Eigen::Index j = 0; j < k; ++j) {
    out.matched(j) = out.abs_rho(static_cast<Eigen::Index>(out.assignment[static_cast<std::size_t>(j)]), j);
  }
  out.mean = out.matched.mean();
  return out;
}

nlohmann::json Correspondence::to_json() const {
  return {{"assignment", assignment}, {"abs_rho", vector_list(matched)}, {"mean", mean}};
}

// ---- identifiability checks -----------------------------------------------

LamFn prior_lam_fn(const CausalPrior& prior, const ParamStore& store) {
  return [&prior, &store](const Vector& z, const Vector& u) {
    const std::size_t n = prior.graph().size();
    const auto m = static_cast<Eigen::Index>(prior.graph().block_dim());
    Vector out(static_cast<Eigen::Index>(n) * m);
    for (std::size_t i = 0; i < n; ++i) {
      out.segment(static_cast<Eigen::Index>(i) * m, m) = prior.lam_mechanism(store, z, u, i);
    }
    return out;
  };
}

std::size_t numeric_rank(const Vector& sv, std::size_t rows, std::size_t cols) {
  if (sv.size() == 0) return 0;
  const double smax = sv.maxCoeff();
  if (!(smax > 0.0)) return 0;
  const double tol = static_cast<double>(std::max(rows, cols)) *
                     std::numeric_limits<double>::epsilon() * smax;
  return static_cast<std::size_t>((sv.array() > tol).count());
}

SuffVarReport sufficient_variability(const LamFn& lam, const CausalGraph& g,
                                     const std::vector<std::pair<Vector, Vector>>& points,
                                     std::size_t k) {
  const std::size_t n = g.size();
  if (k == 0) throw ContractError("sufficient_variability: k must be positive");
  if (points.size() != n * k + 1) {
    throw ContractError("sufficient_variability: need exactly " + std::to_string(n * k + 1) +
                        " points, got " + std::to_string(points.size()));
  }
  auto select = [&](const Vector& full) {
    if (full.size() % static_cast<Eigen::Index>(n) != 0 ||
        static_cast<std::size_t>(full.size()) / n < k) {
      throw ShapeError("sufficient_variability: lambda of length " +
                       std::to_string(full.size()) + " has fewer than k coordinates per variable");
    }
    const Eigen::Index block = full.size() / static_cast<Eigen::Index>(n);
    Vector s(static_cast<Eigen::Index>(n * k));
    for (std::size_t i = 0; i < n; ++i) {
      s.segment(static_cast<Eigen::Index>(i * k), static_cast<Eigen::Index>(k)) =
          full.segment(static_cast<Eigen::Index>(i) * block, static_cast<Eigen::Index>(k));
    }
    return s;
  };
  const auto nk = static_cast<Eigen::Index>(n * k);
  const Vector pivot = select(lam(points[0].first, points[0].second));
  SuffVarReport rep;
  rep.l.resize(nk, nk);
  for (Eigen::Index c = 0; c < nk; ++c) {
    const auto& pt = points[static_cast<std::size_t>(c) + 1];
    rep.l.col(c) = select(lam(pt.first, pt.second)) - pivot;
  }
  Eigen::JacobiSVD<Matrix> svd(rep.l);
  rep.singular_values = svd.singularValues();
  rep.min_singular = rep.singular_values.minCoeff();
  rep.rank = numeric_rank(rep.singular_values, static_cast<std::size_t>(nk), static_cast<std::size_t>(nk));
  return rep;
}

nlohmann::json SuffVarReport::to_json() const {
  return {{"rank", rank}, {"size", l.rows()}, {"min_singular_value", min_singular},
          {"singular_values", vector_list(singular_values)}};
}

EquivalenceReport mechanism_equivalence(const LamFn& a, const LamFn& b, const CausalGraph& g,
                                        const std::vector<std::pair<Vector, Vector>>& probes,
                                        double tolerance) {
  const std::size_t n = g.size();
  if (probes.empty()) throw ContractError("mechanism_equivalence: no probe points");
  std::vector<Vector> la, lb;
  for (const auto& [z, u] : probes) {
    la.push_back(a(z, u));
    lb.push_back(b(z, u));
    if (la.back().size() != lb.back().size() ||
        la.back().size() % static_cast<Eigen::Index>(n) != 0) {
      throw ShapeError("mechanism_equivalence: models disagree on lambda size");
    }
  }
  const Eigen::Index block = la[0].size() / static_cast<Eigen::Index>(n);
  EquivalenceReport rep;
  rep.scale = Vector::Zero(static_cast<Eigen::Index>(n));
  rep.residual = Vector::Zero(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    double aa = 0.0, ab = 0.0, bb = 0.0;
    for (std::size_t p = 0; p < probes.size(); ++p) {
      const auto sa = la[p].segment(static_cast<Eigen::Index>(i) * block, block);
      const auto sb = lb[p].segment(static_cast<Eigen::Index>(i) * block, block);
      aa += sa.squaredNorm();
      ab += sa.dot(sb);
      bb += sb.squaredNorm();
    }
    const double floor = 1e-24 * static_cast<double>(probes.size() * static_cast<std::size_t>(block));
    if (aa <= floor || bb <= floor) {
      rep.inconclusive.push_back(i);
      rep.scale(static_cast<Eigen::Index>(i)) = std::numeric_limits<double>::quiet_NaN();
      rep.residual(static_cast<Eigen::Index>(i)) = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    // lambda_b ~ D * lambda_a; the relative residual is the sine of the angle
    // between the stacked vectors, so it does not depend on the direction.
    const double d = ab / aa;
    double res2 = 0.0;
    for (std::size_t p = 0; p < probes.size(); ++p) {
      res2 += (lb[p].segment(static_cast<Eigen::Index>(i) * block, block) -
               d * la[p].segment(static_cast<Eigen::Index>(i) * block, block))
                  .squaredNorm();
    }
    rep.scale(static_cast<Eigen::Index>(i)) = d;
    rep.residual(static_cast<Eigen::Index>(i)) = std::sqrt(res2 / bb);
    rep.max_residual = std::max(rep.max_residual, rep.residual(static_cast<Eigen::Index>(i)));
  }
  rep.equivalent = rep.inconclusive.empty() && rep.max_residual < tolerance;
  return rep;
}

nlohmann::json EquivalenceReport::to_json() const {
  auto nan_safe = [](const Vector& v) {
    auto out = nlohmann::json::array();
    for (Eigen::Index k = 0; k < v.size(); ++k) {
      if (std::isfinite(v(k))) out.push_back(v(k)); else out.push_back(nullptr);
    }
    return out;
  };
  return {{"scale", nan_safe(scale)}, {"residual", nan_safe(residual)},
          {"max_residual", max_residual}, {"inconclusive", inconclusive},
          {"equivalent", equivalent}};
}

namespace {

Matrix a4_covariance(double a, double b, double c, double d) {
  // z = B z + eps with unit noise: Cov = (I - B)^-1 (I - B)^-T.
  Matrix bm = Matrix::Zero(4, 4);
  bm(2, 0) = a;
  bm(2, 1) = b;
  bm(3, 0) = c;
  bm(3, 1) = d;
  const Matrix inv = (Matrix::Identity(4, 4) - bm).inverse();
  return inv * inv.transpose();
}

LamFn a4_lam(double a, double b, double c, double d) {
  // Natural parameters (mu / sigma^2, -1 / (2 sigma^2)) of each conditional.
  return [=](const Vector& z, const Vector&) {
    Vector out(8);
    out << 0.0, -0.5, 0.0, -0.5, a * z(0) + b * z(1), -0.5, c * z(0) + d * z(1), -0.5;
    return out;
  };
}

}  // namespace

A4Report a4_counterexample(double a, double b, double c, double d, std::size_t mc_samples,
                           std::uint64_t seed) {
  A4Report rep;
  rep.a = a;
  rep.b = b;
  rep.c = c;
  rep.d = d;
  rep.cov_original = a4_covariance(a, b, c, d);
  rep.cov_swapped = a4_covariance(b, a, d, c);
  rep.var_original = Vector(2);
  rep.var_original << a * a + b * b + 1.0, c * c + d * d + 1.0;
  rep.var_swapped = Vector(2);
  rep.var_swapped << b * b + a * a + 1.0, d * d + c * c + 1.0;
  rep.mech_original = {a, b, c, d};
  rep.mech_swapped = {b, a, d, c};
  // Equal up to rounding of the two evaluation orders.
  auto close = [](const Matrix& x, const Matrix& y) {
    return (x - y).cwiseAbs().maxCoeff() <= 1e-12 * std::max(1.0, x.cwiseAbs().maxCoeff());
  };
  rep.marginals_equal = close(rep.var_original, rep.var_swapped) &&
                        close(rep.cov_original.diagonal(), rep.cov_swapped.diagonal());
  rep.covariance_equal = close(rep.cov_original, rep.cov_swapped);

  const std::vector<Edge> edges{{0, 2}, {1, 2}, {0, 3}, {1, 3}};
  const CausalGraph g = CausalGraph::from_edges(4, edges, 1);
  std::vector<std::pair<Vector, Vector>> probes;
  for (double z1 : {-1.0, -0.5, 0.5, 1.0}) {
    for (double z2 : {-1.0, -0.5, 0.5, 1.0}) {
      Vector z(4);
      z << z1, z2, 0.0, 0.0;
      probes.emplace_back(z, Vector());
    }
  }
  rep.equivalence = mechanism_equivalence(a4_lam(a, b, c, d), a4_lam(b, a, d, c), g, probes);
  if (rep.equivalence.equivalent) {
    rep.verdict = "fully equivalent";
  } else if (rep.marginals_equal) {
    rep.verdict = "marginally equivalent, mechanisms inequivalent";
  } else {
    rep.verdict = "not equivalent";
  }

  if (mc_samples > 1) {
    rep.samples = mc_samples;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    Vector s = Vector::Zero(4);
    Matrix ss = Matrix::Zero(4, 4);
    Vector z(4);
    for (std::size_t t = 0; t < mc_samples; ++t) {
      z(0) = nd(rng);
      z(1) = nd(rng);
      z(2) = a * z(0) + b * z(1) + nd(rng);
      z(3) = c * z(0) + d * z(1) + nd(rng);
      s += z;
      ss.noalias() += z * z.transpose();
    }
    const double nn = static_cast<double>(mc_samples);
    const Vector mean = s / nn;
    rep.cov_mc = (ss - nn * mean * mean.transpose()) / (nn - 1.0);
    rep.cov_se.resize(4, 4);
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 4; ++j) {
        const double cij = rep.cov_original(i, j);
        rep.cov_se(i, j) = std::sqrt((rep.cov_original(i, i) * rep.cov_original(j, j) + cij * cij) / nn);
        rep.max_z = std::max(rep.max_z, std::abs(rep.cov_mc(i, j) - cij) / rep.cov_se(i, j));
      }
    }
  }
  return rep;
}

nlohmann::json A4Report::to_json() const {
  nlohmann::json j = {{"coefficients", {a, b, c, d}},
                      {"marginal_variances_original", vector_list(var_original)},
                      {"marginal_variances_swapped", vector_list(var_swapped)},
                      {"covariance_original", matrix_json(cov_original)},
                      {"covariance_swapped", matrix_json(cov_swapped)},
                      {"mechanisms_original", mech_original},
                      {"mechanisms_swapped", mech_swapped},
                      {"marginals_equal", marginals_equal},
                      {"covariance_equal", covariance_equal},
                      {"equivalence", equivalence.to_json()},
                      {"verdict", verdict}};
  if (samples > 0) {
    j["monte_carlo"] = {{"samples", samples}, {"covariance", matrix_json(cov_mc)},
                        {"standard_errors", matrix_json(cov_se)}, {"max_z", max_z}};
  }
  return j;
}

double median(std::vector<double> v) {
  if (v.empty()) throw ContractError("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

}  // namespace icm
