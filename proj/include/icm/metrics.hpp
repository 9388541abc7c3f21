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


// Evaluation of learned representations against ground-truth factors.
//
// Latent matrices are N x (n_blocks * block_dim); factor matrices are N x K.
// Wherever latents are grouped, block b owns columns [b*m, (b+1)*m).

#ifndef ICM_METRICS_HPP_
#define ICM_METRICS_HPP_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "icm/graph.hpp"
#include "icm/param_store.hpp"
#include "icm/prior.hpp"

namespace icm {

// ---- tree ensembles --------------------------------------------------------

enum class Regressor { kGbt, kForest };
Regressor parse_regressor(const std::string& name);
std::string regressor_name(Regressor r);

struct TreeConfig {
  Regressor kind = Regressor::kGbt;
  std::size_t trees = 100;
  std::size_t depth = 4;
  double learning_rate = 0.1;  // ignored by the forest
  double min_leaf = 1.0;
  std::uint64_t seed = 0;      // forest bootstrap only
};

// Squared-loss regression trees grown level by level with exact greedy
// splits. Importance of a feature is the total squared-error reduction of
// the splits that use it.
class TreeEnsemble {
 public:
  static TreeEnsemble fit(const Matrix& x, const Vector& y, const TreeConfig& cfg);
  Vector predict(const Matrix& x) const;
  const Vector& importance() const { return importance_; }

  struct Node {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;
  };

 private:
  double base_ = 0.0;
  double scale_ = 1.0;  // 1 for boosting, 1/trees for the forest
  std::vector<std::vector<Node>> trees_;
  Vector importance_;
};

// ---- DCI -------------------------------------------------------------------

struct DciConfig {
  std::size_t block_dim = 1;
  double train_fraction = 0.8;
  TreeConfig trees;
  std::uint64_t seed = 0;  // train/test split
};

struct DciScores {
  double d = 0.0;  // disentanglement
  double c = 0.0;  // completeness
  double i = 0.0;  // mean held-out MSE of the standardised factors
  Matrix importance;         // raw, n_latent_columns x K
  Matrix block_importance;   // pooled, n_blocks x K
  Vector factor_errors;      // K
  std::string method;
  nlohmann::json to_json() const;
};

DciScores dci(const Matrix& latents, const Matrix& factors, const DciConfig& cfg = {});
// D and C from a (pooled) importance matrix with rows = codes, cols = factors.
std::pair<double, double> dci_from_importance(const Matrix& r);

// ---- IRS -------------------------------------------------------------------

struct IrsConfig {
  std::size_t bins = 10;       // grid used when a factor has more values
  double quantile = 0.99;
  std::size_t block_dim = 1;
};

struct IrsReport {
  double score = 0.0;
  Vector per_dim;                   // max_j (1 - normalised deviation)
  Vector per_block;                 // deviation-weighted mean of per_dim
  std::vector<std::size_t> parent;  // arg max factor per latent column
  Matrix irs_matrix;                // latent columns x factors
  std::vector<std::size_t> excluded;  // zero-variance latent columns
  std::vector<std::string> warnings;
  nlohmann::json to_json() const;
};

// Factors with at most `bins` distinct values are used as they are; other
// columns are replaced by the centre of their equal-width bin.
Matrix discretize_factors(const Matrix& factors, std::size_t bins);
IrsReport irs(const Matrix& latents, const Matrix& factors, const IrsConfig& cfg = {});

// ---- correspondence --------------------------------------------------------

Vector ranks(const Vector& v);  // average ranks, 1-based
double spearman(const Vector& a, const Vector& b);
// Minimum-cost perfect assignment on a square matrix: result[row] = column.
std::vector<std::size_t> hungarian(const Matrix& cost);

struct Correspondence {
  std::vector<std::size_t> assignment;  // factor j -> latent block
  Matrix abs_rho;                        // blocks x factors, max |rho| in block
  Vector matched;                        // |rho| of each assigned pair
  double mean = 0.0;
  nlohmann::json to_json() const;
};
Correspondence permutation_correspondence(const Matrix& latents, const Matrix& factors,
                                          std::size_t block_dim = 1);

// ---- identifiability checks -----------------------------------------------

// Natural parameters of every conditional, concatenated over variables.
using LamFn = std::function<Vector(const Vector& z, const Vector& u)>;
LamFn prior_lam_fn(const CausalPrior& prior, const ParamStore& store);

struct SuffVarReport {
  Matrix l;  // nk x nk
  std::size_t rank = 0;
  double min_singular = 0.0;
  Vector singular_values;
  nlohmann::json to_json() const;
};

// points must hold exactly n*k + 1 (z, u) pairs; the first is the pivot. The
// first k coordinates of each variable's lambda block enter L.
SuffVarReport sufficient_variability(const LamFn& lam, const CausalGraph& g,
                                     const std::vector<std::pair<Vector, Vector>>& points,
                                     std::size_t k);
std::size_t numeric_rank(const Vector& singular_values, std::size_t rows, std::size_t cols);

struct EquivalenceReport {
  Vector scale;     // least-squares D_ii per variable
  Vector residual;  // |a - D b| / |a| per variable
  double max_residual = 0.0;
  std::vector<std::size_t> inconclusive;
  bool equivalent = false;
  nlohmann::json to_json() const;
};

EquivalenceReport mechanism_equivalence(const LamFn& a, const LamFn& b,
                                        const CausalGraph& g,
                                        const std::vector<std::pair<Vector, Vector>>& probes,
                                        double tolerance = 1e-6);

// Two linear Gaussian SCMs over z1, z2 -> z3, z4 with swapped coefficients.
struct A4Report {
  double a = 0, b = 0, c = 0, d = 0;
  Matrix cov_original;  // 4 x 4 analytic
  Matrix cov_swapped;
  Vector var_original;  // (Var z3, Var z4)
  Vector var_swapped;
  std::vector<double> mech_original;  // (a, b, c, d)
  std::vector<double> mech_swapped;   // (b, a, d, c)
  EquivalenceReport equivalence;
  bool marginals_equal = false;
  bool covariance_equal = false;
  std::string verdict;
  // Monte Carlo check of cov_original (empty when samples == 0).
  std::size_t samples = 0;
  Matrix cov_mc;
  Matrix cov_se;
  double max_z = 0.0;  // max |mc - analytic| / se
  nlohmann::json to_json() const;
};

A4Report a4_counterexample(double a, double b, double c, double d,
                           std::size_t mc_samples = 0, std::uint64_t seed = 0);

double median(std::vector<double> v);

}  // namespace icm

#endif  // ICM_METRICS_HPP_
