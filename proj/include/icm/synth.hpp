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


// Ground-truth factor generators and the observation model x = mix(z) + noise.

#ifndef ICM_SYNTH_HPP_
#define ICM_SYNTH_HPP_

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <utility>

#include <nlohmann/json.hpp>

#include "icm/graph.hpp"
#include "icm/param_store.hpp"

namespace icm {

// ---- Pendulum ----------------------------------------------------------

// Shadow length and position for angle u1 (degrees-like, in [-45, 45]) and
// light position u2 (in [60, 145]).
std::pair<double, double> pendulum_shadow(double u1, double u2);

// count x 4 raw factors (angle, light, shadow length, shadow position).
// Light positions within 1e-6 of 100 are redrawn.
Matrix gen_pendulum(std::size_t count, std::uint64_t seed);
// Centre of the pendulum bob for angle u1 (degrees-like units, as above).
std::pair<double, double> pendulum_bob(double u1);

// ---- CausalCircuit -----------------------------------------------------

// Pressed state (blue, green, red) of the three buttons for arm position a:
// triangular bumps of half-width 0.1 centred at 0.2, 0.5 and 0.8.
std::array<double, 3> circuit_buttons(double arm);
// Beta mean parameter for a light, clipped to [0.05, 0.95].
double circuit_intensity(double pressed);
double circuit_red_intensity(double blue, double green, double pressed_red);
// Beta(a, b) from two gamma draws.
double sample_beta(double a, double b, std::mt19937_64& rng);
// Draw from Beta(5 v, 5 (1 - v)).
double sample_light(double v, std::mt19937_64& rng);
// True when every light brighter than 0.5 has an active cause: its own
// button for blue and green; the red button or a lit blue/green for red.
bool circuit_consistent(double arm, double blue, double green, double red);

// count x 4 raw factors (arm, blue, green, red), graph-consistent only.
Matrix gen_causalcircuit(std::size_t count, std::uint64_t seed);

// ---- Flow graph --------------------------------------------------------

// z_i = sum_j w(j, i) tanh(z_j) + noise_sd * N(0, 1) in topological order.
struct FlowMechanisms {
  Matrix weights;  // n x n, nonzero only on graph edges
  double noise_sd = 1.0;

  static FlowMechanisms defaults();
  nlohmann::json to_json() const;
  static FlowMechanisms from_json(const nlohmann::json& j);
};

// Throws GraphError when a nonzero weight is not an edge of flow_graph().
// Factors for one exogenous noise draw (length 4, unit scale).
Vector flow_factors(const Vector& eps, const FlowMechanisms& mech);
Matrix gen_flow_graph(std::size_t count, std::uint64_t seed,
                      const FlowMechanisms& mech = FlowMechanisms::defaults());

// ---- Mixing ------------------------------------------------------------

// x = tanh(W2 tanh(W1 s + b1) + b2) with s = (z - shift) / scale, W1 (d x n)
// with orthonormal columns and W2 (d x d) orthogonal. The "identity" kind
// (d = n) returns z unchanged.
struct MixingFunction {
  std::string kind = "mlp";
  std::uint64_t seed = 0;
  Vector shift;
  Vector scale;
  Matrix w1;
  Vector b1;
  Matrix w2;
  Vector b2;

  static MixingFunction random(std::size_t n, std::size_t d, std::uint64_t seed,
                               const Vector& shift, const Vector& scale);
  static MixingFunction identity(std::size_t n);

  std::size_t in_dim() const { return static_cast<std::size_t>(shift.size()); }
  std::size_t out_dim() const;
  Vector apply(const Vector& z) const;
  Matrix apply_rows(const Matrix& z) const;

  nlohmann::json to_json() const;
  static MixingFunction from_json(const nlohmann::json& j);
};

Vector mix(const MixingFunction& f, const Vector& z, double noise_sigma,
           std::mt19937_64& rng);

// ---- Datasets ----------------------------------------------------------

struct DataConfig {
  std::string generator = "pendulum";  // pendulum | causalcircuit | flow
  std::size_t count = 6000;
  std::size_t obs_dim = 10;
  std::size_t block_dim = 4;
  double noise_sigma = 0.01;
  std::string mixing = "mlp";  // mlp | identity
  std::uint64_t seed = 0;
  FlowMechanisms flow = FlowMechanisms::defaults();

  nlohmann::json to_json() const;
  static DataConfig from_json(const nlohmann::json& j);
};

struct Dataset {
  DataConfig config;
  MixingFunction mixing;
  Vector u_mean;  // label standardisation: u = (z - u_mean) / u_std
  Vector u_std;
  Matrix x;  // count x d
  Matrix u;  // count x n, standardised
  Matrix z;  // count x n, raw factors

  std::size_t size() const { return static_cast<std::size_t>(x.rows()); }
  Matrix standardize(const Matrix& raw) const;
  Matrix unstandardize(const Matrix& labels) const;
};

CausalGraph generator_graph(const std::string& generator, std::size_t block_dim);
Matrix generate_factors(const DataConfig& cfg);
Dataset make_dataset(const DataConfig& cfg);

// Delimited text: "#"-prefixed JSON header line, a column header, then rows
// of x, u, z with shortest round-trip float formatting.
void write_dataset(std::ostream& out, const Dataset& ds,
                   const nlohmann::json& extra = nlohmann::json::object());
Dataset read_dataset(std::istream& in);
void save_dataset(const std::string& path, const Dataset& ds,
                  const nlohmann::json& extra = nlohmann::json::object());
Dataset load_dataset(const std::string& path);

// Shortest decimal text that parses back to exactly `v`.
std::string format_double(double v);

}  // namespace icm

#endif  // ICM_SYNTH_HPP_
