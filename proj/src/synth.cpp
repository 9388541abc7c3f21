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


#include "icm/synth.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>

#include <unistd.h>

#include "icm/errors.hpp"
#include "icm/json_util.hpp"

namespace icm {

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t salt) {
  std::seed_seq seq{seed, salt};
  return std::mt19937_64(seq);
}

// Haar-distributed orthogonal d x d matrix (QR with a sign-fixed R).
Matrix random_orthogonal(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  const auto k = static_cast<Eigen::Index>(d);
  Matrix g(k, k);
  for (Eigen::Index c = 0; c < k; ++c) {
    for (Eigen::Index r = 0; r < k; ++r) g(r, c) = n(rng);
  }
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(k, k);
  Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index c = 0; c < k; ++c) {
    if (r(c, c) < 0) q.col(c) *= -1.0;
  }
  return q;
}

}  // namespace

std::pair<double, double> pendulum_shadow(double u1, double u2) {
  const double theta = u1 * std::numbers::pi / 200.0;
  const double phi = u2 * std::numbers::pi / 200.0;
  const double t = std::tan(phi);
  const double length =
      std::max(3.0, std::abs(9.5 * std::cos(theta) / t + 9.5 * std::sin(theta)));
  const double position =
      (-11.0 + 4.75 * std::cos(theta)) / t + (10.0 + 4.75 * std::sin(theta));
  return {length, position};
}

std::pair<double, double> pendulum_bob(double u1) {
  const double theta = u1 * std::numbers::pi / 200.0;
  return {10.0 + 9.5 * std::sin(theta), 10.0 - 9.5 * std::cos(theta)};
}

Matrix gen_pendulum(std::size_t count, std::uint64_t seed) {
  if (count == 0) throw ContractError("gen_pendulum: count must be positive");
  std::mt19937_64 rng = stream(seed, 0x9e1d);
  std::uniform_real_distribution<double> angle(-45.0, 45.0), light(60.0, 145.0);
  Matrix out(static_cast<Eigen::Index>(count), 4);
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double u1 = angle(rng);
    double u2 = light(rng);
    while (std::abs(u2 - 100.0) < 1e-6) u2 = light(rng);  // tan(phi) singular
    const auto [u3, u4] = pendulum_shadow(u1, u2);
    out.row(r) << u1, u2, u3, u4;
  }
  return out;
}

std::array<double, 3> circuit_buttons(double arm) {
  const double centres[3] = {0.2, 0.5, 0.8};
  std::array<double, 3> b{};
  for (int k = 0; k < 3; ++k) {
    b[k] = std::max(0.0, 1.0 - std::abs(arm - centres[k]) / 0.1);
  }
  return b;
}

double circuit_intensity(double pressed) {
  return std::clamp(0.2 + 0.6 * pressed, 0.05, 0.95);
}

double circuit_red_intensity(double blue, double green, double pressed_red) {
  return circuit_intensity(std::clamp(blue + green + pressed_red, 0.0, 1.0));
}

double sample_beta(double a, double b, std::mt19937_64& rng) {
  if (!(a > 0.0) || !(b > 0.0)) {
    throw ContractError("sample_beta: parameters must be positive");
  }
  std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  return x / (x + y);
}

double sample_light(double v, std::mt19937_64& rng) {
  return sample_beta(5.0 * v, 5.0 * (1.0 - v), rng);
}

bool circuit_consistent(double arm, double blue, double green, double red) {
  const auto b = circuit_buttons(arm);
  if (blue > 0.5 && b[0] <= 0.0) return false;
  if (green > 0.5 && b[1] <= 0.0) return false;
  if (red > 0.5 && b[2] <= 0.0 && blue <= 0.5 && green <= 0.5) return false;
  return true;
}

Matrix gen_causalcircuit(std::size_t count, std::uint64_t seed) {
  if (count == 0) throw ContractError("gen_causalcircuit: count must be positive");
  std::mt19937_64 rng = stream(seed, 0xc1c7);
  std::uniform_real_distribution<double> arm_d(0.0, 1.0);
  Matrix out(static_cast<Eigen::Index>(count), 4);
  Eigen::Index r = 0;
  while (r < out.rows()) {
    const double arm = arm_d(rng);
    const auto b = circuit_buttons(arm);
    const double blue = sample_light(circuit_intensity(b[0]), rng);
    const double green = sample_light(circuit_intensity(b[1]), rng);
    const double red = sample_light(circuit_red_intensity(blue, green, b[2]), rng);
    if (!circuit_consistent(arm, blue, green, red)) continue;
    out.row(r++) << arm, blue, green, red;
  }
  return out;
}

FlowMechanisms FlowMechanisms::defaults() {
  FlowMechanisms m;
  m.weights = Matrix::Zero(4, 4);
  m.weights(0, 1) = 1.5;  // ball size -> water height
  m.weights(2, 3) = 1.0;  // hole position -> water flow
  m.weights(1, 3) = 1.2;  // water height -> water flow
  return m;
}

nlohmann::json FlowMechanisms::to_json() const {
  auto w = nlohmann::json::array();
  for (Eigen::Index j = 0; j < weights.rows(); ++j) {
    for (Eigen::Index i = 0; i < weights.cols(); ++i) {
      if (weights(j, i) != 0.0) w.push_back({j, i, weights(j, i)});
    }
  }
  return {{"weights", w}, {"noise_sd", noise_sd}};
}

FlowMechanisms FlowMechanisms::from_json(const nlohmann::json& j) {
  check_keys(j, {"weights", "noise_sd"}, "flow mechanisms");
  FlowMechanisms m;
  m.weights = Matrix::Zero(4, 4);
  m.noise_sd = get_or(j, "noise_sd", 1.0, "flow mechanisms");
  if (j.contains("weights")) {
    for (const auto& e : j.at("weights")) {
      if (!e.is_array() || e.size() != 3) {
        throw ConfigError("flow mechanisms: weights are [parent, child, value]");
      }
      const auto p = e[0].get<std::size_t>(), c = e[1].get<std::size_t>();
      if (p >= 4 || c >= 4) throw ConfigError("flow mechanisms: index out of range");
      m.weights(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(c)) =
          e[2].get<double>();
    }
  } else {
    m.weights = defaults().weights;
  }
  return m;
}

namespace {

void check_mechanisms(const CausalGraph& g, const FlowMechanisms& mech) {
  if (mech.weights.rows() != 4 || mech.weights.cols() != 4) {
    throw ShapeError("flow mechanisms: weights must be 4x4");
  }
  for (std::size_t j = 0; j < 4; ++j) {
    for (std::size_t i = 0; i < 4; ++i) {
      if (mech.weights(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) != 0.0 &&
          !g.adjacency(j, i)) {
        throw GraphError("flow mechanisms: weight on " + std::to_string(j) + " -> " +
                         std::to_string(i) + ", which is not an edge of the graph");
      }
    }
  }
}

}  // namespace

Vector flow_factors(const Vector& eps, const FlowMechanisms& mech) {
  const CausalGraph g = flow_graph();
  check_mechanisms(g, mech);
  if (eps.size() != 4) throw ShapeError("flow_factors: noise must have length 4");
  Vector z(4);
  for (std::size_t i : g.topo_order()) {
    const auto ii = static_cast<Eigen::Index>(i);
    double v = mech.noise_sd * eps(ii);
    for (std::size_t j : g.parents(i)) {
      const auto jj = static_cast<Eigen::Index>(j);
      v += mech.weights(jj, ii) * std::tanh(z(jj));
    }
    z(ii) = v;
  }
  return z;
}

Matrix gen_flow_graph(std::size_t count, std::uint64_t seed,
                      const FlowMechanisms& mech) {
  if (count == 0) throw ContractError("gen_flow_graph: count must be positive");
  check_mechanisms(flow_graph(), mech);
  std::mt19937_64 rng = stream(seed, 0xf10e);
  std::normal_distribution<double> noise(0.0, 1.0);
  Matrix out(static_cast<Eigen::Index>(count), 4);
  Vector eps(4);
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    for (Eigen::Index k = 0; k < 4; ++k) eps(k) = noise(rng);
    out.row(r) = flow_factors(eps, mech).transpose();
  }
  return out;
}

MixingFunction MixingFunction::random(std::size_t n, std::size_t d,
                                      std::uint64_t seed, const Vector& shift,
                                      const Vector& scale) {
  if (d < n) throw ContractError("mixing: output dimension must be >= input");
  if (static_cast<std::size_t>(shift.size()) != n ||
      static_cast<std::size_t>(scale.size()) != n) {
    throw ShapeError("mixing: standardisation vectors must have length n");
  }
  MixingFunction f;
  f.kind = "mlp";
  f.seed = seed;
  f.shift = shift;
  f.scale = scale;
  std::mt19937_64 rng = stream(seed, 0x313);
  const auto nn = static_cast<Eigen::Index>(n);
  const auto dd = static_cast<Eigen::Index>(d);
  f.w1 = random_orthogonal(d, rng).leftCols(nn);
  f.w2 = random_orthogonal(d, rng);
  std::normal_distribution<double> bias(0.0, 0.1);
  f.b1.resize(dd);
  f.b2.resize(dd);
  for (Eigen::Index k = 0; k < dd; ++k) f.b1(k) = bias(rng);
  for (Eigen::Index k = 0; k < dd; ++k) f.b2(k) = bias(rng);
  return f;
}

MixingFunction MixingFunction::identity(std::size_t n) {
  MixingFunction f;
  f.kind = "identity";
  f.shift = Vector::Zero(static_cast<Eigen::Index>(n));
  f.scale = Vector::Ones(static_cast<Eigen::Index>(n));
  return f;
}

std::size_t MixingFunction::out_dim() const {
  return kind == "identity" ? in_dim() : static_cast<std::size_t>(w2.rows());
}

Vector MixingFunction::apply(const Vector& z) const {
  if (z.size() != shift.size()) {
    throw ShapeError("mixing: factor vector of length " + std::to_string(z.size()) +
                     ", expected " + std::to_string(shift.size()));
  }
  if (kind == "identity") return z;
  Vector s = (z - shift).cwiseQuotient(scale);
  Vector h = (w1 * s + b1).array().tanh().matrix();
  return (w2 * h + b2).array().tanh().matrix();
}

Matrix MixingFunction::apply_rows(const Matrix& z) const {
  Matrix out(z.rows(), static_cast<Eigen::Index>(out_dim()));
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    out.row(r) = apply(z.row(r).transpose()).transpose();
  }
  return out;
}

nlohmann::json MixingFunction::to_json() const {
  return {{"kind", kind},
          {"seed", seed},
          {"shift", std::vector<double>(shift.data(), shift.data() + shift.size())},
          {"scale", std::vector<double>(scale.data(), scale.data() + scale.size())},
          {"out_dim", out_dim()}};
}

MixingFunction MixingFunction::from_json(const nlohmann::json& j) {
  check_keys(j, {"kind", "seed", "shift", "scale", "out_dim"}, "mixing");
  const auto kind = get_required<std::string>(j, "kind", "mixing");
  const auto shift = get_required<std::vector<double>>(j, "shift", "mixing");
  const auto scale = get_required<std::vector<double>>(j, "scale", "mixing");
  Vector sh = Eigen::Map<const Vector>(shift.data(), static_cast<Eigen::Index>(shift.size()));
  Vector sc = Eigen::Map<const Vector>(scale.data(), static_cast<Eigen::Index>(scale.size()));
  if (kind == "identity") return identity(shift.size());
  if (kind != "mlp") throw ConfigError("mixing: unknown kind '" + kind + "'");
  return random(shift.size(), get_required<std::size_t>(j, "out_dim", "mixing"),
                get_required<std::uint64_t>(j, "seed", "mixing"), sh, sc);
}

Vector mix(const MixingFunction& f, const Vector& z, double noise_sigma,
           std::mt19937_64& rng) {
  Vector x = f.apply(z);
  if (noise_sigma > 0.0) {
    std::normal_distribution<double> n(0.0, noise_sigma);
    for (Eigen::Index k = 0; k < x.size(); ++k) x(k) += n(rng);
  }
  return x;
}

nlohmann::json DataConfig::to_json() const {
  nlohmann::json j = {{"generator", generator}, {"count", count},
                      {"obs_dim", obs_dim},     {"block_dim", block_dim},
                      {"noise_sigma", noise_sigma}, {"mixing", mixing},
                      {"seed", seed}};
  if (generator == "flow") j["flow"] = flow.to_json();
  return j;
}

DataConfig DataConfig::from_json(const nlohmann::json& j) {
  constexpr std::string_view ctx = "data";
  check_keys(j, {"generator", "count", "obs_dim", "block_dim", "noise_sigma",
                 "mixing", "seed", "flow"},
             ctx);
  DataConfig c;
  c.generator = get_or<std::string>(j, "generator", c.generator, ctx);
  c.count = get_or(j, "count", c.count, ctx);
  c.obs_dim = get_or(j, "obs_dim", c.obs_dim, ctx);
  c.block_dim = get_or(j, "block_dim", c.block_dim, ctx);
  c.noise_sigma = get_or(j, "noise_sigma", c.noise_sigma, ctx);
  c.mixing = get_or<std::string>(j, "mixing", c.mixing, ctx);
  c.seed = get_or(j, "seed", c.seed, ctx);
  if (j.contains("flow")) {
    if (c.generator != "flow") {
      throw ConfigError("data: 'flow' mechanisms given for generator '" + c.generator + "'");
    }
    c.flow = FlowMechanisms::from_json(j.at("flow"));
  }
  if (c.generator != "pendulum" && c.generator != "causalcircuit" && c.generator != "flow") {
    throw ConfigError("data: unknown generator '" + c.generator + "'");
  }
  if (c.mixing != "mlp" && c.mixing != "identity") {
    throw ConfigError("data: unknown mixing '" + c.mixing + "'");
  }
  if (c.count == 0 || c.block_dim == 0) {
    throw ConfigError("data: count and block_dim must be positive");
  }
  if (c.noise_sigma < 0.0) throw ConfigError("data: noise_sigma must be >= 0");
  return c;
}

Matrix Dataset::standardize(const Matrix& raw) const {
  return (raw.rowwise() - u_mean.transpose()).array().rowwise() /
         u_std.transpose().array();
}

Matrix Dataset::unstandardize(const Matrix& labels) const {
  return (labels.array().rowwise() * u_std.transpose().array()).matrix().rowwise() +
         u_mean.transpose();
}

CausalGraph generator_graph(const std::string& generator, std::size_t block_dim) {
  if (generator == "pendulum") return pendulum_graph(block_dim);
  if (generator == "causalcircuit") return causal_circuit_graph(block_dim);
  if (generator == "flow") return flow_graph(block_dim);
  throw ConfigError("unknown generator '" + generator + "'");
}

Matrix generate_factors(const DataConfig& cfg) {
  if (cfg.generator == "pendulum") return gen_pendulum(cfg.count, cfg.seed);
  if (cfg.generator == "causalcircuit") return gen_causalcircuit(cfg.count, cfg.seed);
  if (cfg.generator == "flow") return gen_flow_graph(cfg.count, cfg.seed, cfg.flow);
  throw ConfigError("unknown generator '" + cfg.generator + "'");
}

Dataset make_dataset(const DataConfig& cfg) {
  Dataset ds;
  ds.config = cfg;
  ds.z = generate_factors(cfg);
  const auto rows = static_cast<double>(ds.z.rows());
  ds.u_mean = ds.z.colwise().mean().transpose();
  ds.u_std = ((ds.z.rowwise() - ds.u_mean.transpose()).array().square().colwise().sum() /
              rows)
                 .sqrt()
                 .transpose();
  for (Eigen::Index k = 0; k < ds.u_std.size(); ++k) {
    if (!(ds.u_std(k) > 0.0)) ds.u_std(k) = 1.0;
  }
  ds.u = ds.standardize(ds.z);
  const auto n = static_cast<std::size_t>(ds.z.cols());
  if (cfg.mixing == "identity") {
    if (cfg.obs_dim != n) {
      throw ConfigError("data: identity mixing needs obs_dim == " + std::to_string(n));
    }
    ds.mixing = MixingFunction::identity(n);
  } else {
    std::mt19937_64 srng = stream(cfg.seed, 0x5eed);
    ds.mixing = MixingFunction::random(n, cfg.obs_dim, srng(), ds.u_mean, ds.u_std);
  }
  std::mt19937_64 noise = stream(cfg.seed, 0x0b5e);
  ds.x.resize(ds.z.rows(), static_cast<Eigen::Index>(cfg.obs_dim));
  for (Eigen::Index r = 0; r < ds.z.rows(); ++r) {
    ds.x.row(r) = mix(ds.mixing, ds.z.row(r).transpose(), cfg.noise_sigma, noise).transpose();
  }
  return ds;
}

std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace {

double parse_double(std::string_view s, std::size_t line) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    // from_chars rejects "inf"/"nan" spellings of other writers; accept ours.
    throw ConfigError("dataset line " + std::to_string(line) + ": bad number '" +
                      std::string(s) + "'");
  }
  return v;
}

}  // namespace

void write_dataset(std::ostream& out, const Dataset& ds, const nlohmann::json& extra) {
  nlohmann::json h;
  h["data"] = ds.config.to_json();
  h["n"] = ds.z.cols();
  h["m"] = ds.config.block_dim;
  h["d"] = ds.x.cols();
  h["mixing"] = ds.mixing.to_json();
  h["u_mean"] = std::vector<double>(ds.u_mean.data(), ds.u_mean.data() + ds.u_mean.size());
  h["u_std"] = std::vector<double>(ds.u_std.data(), ds.u_std.data() + ds.u_std.size());
  h["extra"] = extra;
  out << "# " << h.dump() << '\n';
  std::string header;
  for (Eigen::Index k = 0; k < ds.x.cols(); ++k) header += "x" + std::to_string(k) + ",";
  for (Eigen::Index k = 0; k < ds.u.cols(); ++k) header += "u" + std::to_string(k) + ",";
  for (Eigen::Index k = 0; k < ds.z.cols(); ++k) {
    header += "z" + std::to_string(k) + (k + 1 < ds.z.cols() ? "," : "");
  }
  out << header << '\n';
  std::string line;
  for (Eigen::Index r = 0; r < ds.x.rows(); ++r) {
    line.clear();
    for (Eigen::Index k = 0; k < ds.x.cols(); ++k) line += format_double(ds.x(r, k)) + ",";
    for (Eigen::Index k = 0; k < ds.u.cols(); ++k) line += format_double(ds.u(r, k)) + ",";
    for (Eigen::Index k = 0; k < ds.z.cols(); ++k) {
      line += format_double(ds.z(r, k));
      if (k + 1 < ds.z.cols()) line += ',';
    }
    out << line << '\n';
  }
}

Dataset read_dataset(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("# ", 0) != 0) {
    throw ConfigError("dataset: missing header line");
  }
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(line.substr(2));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("dataset header: ") + e.what());
  }
  check_keys(h, {"data", "n", "m", "d", "mixing", "u_mean", "u_std", "extra"}, "dataset header");
  Dataset ds;
  ds.config = DataConfig::from_json(h.at("data"));
  ds.mixing = MixingFunction::from_json(h.at("mixing"));
  const auto um = h.at("u_mean").get<std::vector<double>>();
  const auto us = h.at("u_std").get<std::vector<double>>();
  ds.u_mean = Eigen::Map<const Vector>(um.data(), static_cast<Eigen::Index>(um.size()));
  ds.u_std = Eigen::Map<const Vector>(us.data(), static_cast<Eigen::Index>(us.size()));
  const auto n = h.at("n").get<Eigen::Index>();
  const auto d = h.at("d").get<Eigen::Index>();
  if (!std::getline(in, line)) throw ConfigError("dataset: missing column header");
  std::vector<double> vals;
  std::size_t lineno = 2;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::size_t start = 0;
    Eigen::Index fields = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      const std::size_t end = comma == std::string::npos ? line.size() : comma;
      vals.push_back(parse_double(std::string_view(line).substr(start, end - start), lineno));
      ++fields;
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (fields != d + 2 * n) {
      throw ConfigError("dataset line " + std::to_string(lineno) + ": expected " +
                        std::to_string(d + 2 * n) + " fields, got " + std::to_string(fields));
    }
  }
  const Eigen::Index rows = static_cast<Eigen::Index>(vals.size()) / (d + 2 * n);
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
      all(vals.data(), rows, d + 2 * n);
  ds.x = all.leftCols(d);
  ds.u = all.middleCols(d, n);
  ds.z = all.rightCols(n);
  return ds;
}

void save_dataset(const std::string& path, const Dataset& ds, const nlohmann::json& extra) {
  const std::string tmp = path + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write '" + tmp + "'");
    write_dataset(out, ds, extra);
    if (!out) throw ConfigError("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("dataset '" + path + "' not found");
  return read_dataset(in);
}

}  // namespace icm
