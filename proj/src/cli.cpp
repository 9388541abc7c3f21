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


#include "icm/cli.hpp"

#include <algorithm>
#include <cmath>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <thread>
#include <unistd.h>

#include <CLI11.hpp>

#include "icm/cf.hpp"
#include "icm/errors.hpp"
#include "icm/json_util.hpp"

namespace icm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class MissingCheckpoint : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

const char* const kSubcommands[] = {"gen-data", "train", "eval", "counterfact",
                                    "check-identifiability", "table"};

json eval_to_json(const EvalConfig& e) {
  return {{"regressor", regressor_name(e.regressor)},
          {"trees", e.trees},
          {"depth", e.depth},
          {"learning_rate", e.learning_rate},
          {"train_fraction", e.train_fraction},
          {"irs_bins", e.irs_bins},
          {"irs_quantile", e.irs_quantile},
          {"seed", e.seed},
          {"metrics", e.metrics}};
}

EvalConfig eval_from_json(const json& j) {
  constexpr std::string_view ctx = "eval";
  check_keys(j, {"regressor", "trees", "depth", "learning_rate", "train_fraction",
                 "irs_bins", "irs_quantile", "seed", "metrics"},
             ctx);
  EvalConfig e;
  e.regressor = parse_regressor(get_or<std::string>(j, "regressor", "gbt", ctx));
  e.trees = get_or(j, "trees", e.trees, ctx);
  e.depth = get_or(j, "depth", e.depth, ctx);
  e.learning_rate = get_or(j, "learning_rate", e.learning_rate, ctx);
  e.train_fraction = get_or(j, "train_fraction", e.train_fraction, ctx);
  e.irs_bins = get_or(j, "irs_bins", e.irs_bins, ctx);
  e.irs_quantile = get_or(j, "irs_quantile", e.irs_quantile, ctx);
  e.seed = get_or(j, "seed", e.seed, ctx);
  e.metrics = get_or(j, "metrics", e.metrics, ctx);
  if (e.metrics.empty()) throw ConfigError("eval: metrics must not be empty");
  std::set<std::string> seen;
  for (const auto& name : e.metrics) {
    if (name != "dci" && name != "irs" && name != "correspondence") {
      throw ConfigError("eval: unknown metric '" + name + "' (dci, irs, correspondence)");
    }
    if (!seen.insert(name).second) throw ConfigError("eval: duplicate metric '" + name + "'");
  }
  if (e.trees == 0 || e.depth == 0) throw ConfigError("eval: trees and depth must be positive");
  if (!(e.train_fraction > 0.0 && e.train_fraction < 1.0)) {
    throw ConfigError("eval: train_fraction must lie in (0, 1)");
  }
  if (e.irs_bins < 2) throw ConfigError("eval: irs_bins must be at least 2");
  if (!(e.irs_quantile > 0.0 && e.irs_quantile <= 1.0)) {
    throw ConfigError("eval: irs_quantile must lie in (0, 1]");
  }
  return e;
}

json cf_to_json(const CounterfactualConfig& c) {
  json j{{"rows", c.rows}, {"target", c.target}};
  if (c.label) j["label"] = *c.label;
  if (c.value) j["value"] = *c.value;
  return j;
}

CounterfactualConfig cf_from_json(const json& j) {
  constexpr std::string_view ctx = "counterfactual";
  check_keys(j, {"rows", "target", "label", "value"}, ctx);
  CounterfactualConfig c;
  c.rows = get_or(j, "rows", c.rows, ctx);
  c.target = get_or(j, "target", c.target, ctx);
  if (j.contains("label")) c.label = get_or(j, "label", 0.0, ctx);
  if (j.contains("value")) c.value = get_or(j, "value", std::vector<double>{}, ctx);
  if (c.label && c.value) throw ConfigError("counterfactual: give 'label' or 'value', not both");
  if (!c.label && !c.value) c.label = 1.0;
  return c;
}

json ident_to_json(const IdentifiabilityConfig& c) {
  return {{"point_sets", c.point_sets}, {"k", c.k}, {"probes", c.probes}};
}

IdentifiabilityConfig ident_from_json(const json& j) {
  constexpr std::string_view ctx = "identifiability";
  check_keys(j, {"point_sets", "k", "probes"}, ctx);
  IdentifiabilityConfig c;
  c.point_sets = get_or(j, "point_sets", c.point_sets, ctx);
  c.k = get_or(j, "k", c.k, ctx);
  c.probes = get_or(j, "probes", c.probes, ctx);
  if (c.point_sets == 0 || c.probes == 0) {
    throw ConfigError("identifiability: point_sets and probes must be positive");
  }
  return c;
}

bool has_variant(const ExperimentConfig& c, Variant v) {
  return std::find(c.variants.begin(), c.variants.end(), v) != c.variants.end();
}

void validate(const ExperimentConfig& c, const json& model_json) {
  const std::size_t n = c.model.graph.size();
  const std::size_t m = c.model.graph.block_dim();
  if (c.train_count == 0 || c.train_count >= c.data.count) {
    throw ConfigError("train_count must lie in [1, data.count)");
  }
  const std::size_t test = c.data.count - c.train_count;
  if (c.variants.empty()) throw ConfigError("variants: at least one variant is required");
  if (c.seeds.empty()) throw ConfigError("seeds: at least one seed is required");
  if (std::set<Variant>(c.variants.begin(), c.variants.end()).size() != c.variants.size()) {
    throw ConfigError("variants: duplicate entry");
  }
  if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size()) {
    throw ConfigError("seeds: duplicate entry");
  }
  if (c.workers == 0) throw ConfigError("workers must be positive");
  if (c.log_every == 0) throw ConfigError("log_every must be positive");
  if (c.train.steps == 0) throw ConfigError("train: steps must be positive");

  if (model_json.contains("ivae_prior_inputs") && !has_variant(c, Variant::kIvaeAblation)) {
    throw ConfigError("model: 'ivae_prior_inputs' applies only to ivae-ablation");
  }

  const auto& q = c.counterfactual;
  if (q.target >= n) {
    throw ConfigError("counterfactual: target " + std::to_string(q.target) +
                      " out of range for " + std::to_string(n) + " variables");
  }
  if (q.rows == 0 || q.rows > test) {
    throw ConfigError("counterfactual: rows must lie in [1, " + std::to_string(test) + "]");
  }
  if (q.value && q.value->size() != m) {
    throw ConfigError("counterfactual: value needs " + std::to_string(m) + " entries");
  }
  if (q.label && has_variant(c, Variant::kBetaVaeAblation)) {
    throw ConfigError(
        "counterfactual: beta-vae-ablation has no label mechanism; give 'value' instead "
        "of 'label'");
  }

  const auto& id = c.identifiability;
  if (id.k == 0 || id.k > m) {
    throw ConfigError("identifiability: k must lie in [1, " + std::to_string(m) + "]");
  }
  if (n * id.k + 1 > test || id.probes > test) {
    throw ConfigError("identifiability: point sets and probes need at most " +
                      std::to_string(test) + " distinct test rows");
  }
}

std::string hex64(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return s;
}

std::mt19937_64 rng_for(std::uint64_t seed, std::uint64_t salt) {
  std::seed_seq seq{seed, salt};
  return std::mt19937_64(seq);
}

// ---- files -----------------------------------------------------------------

void write_file(const std::string& path, const std::string& content) {
  fs::create_directories(fs::path(path).parent_path());
  const std::string tmp = path + ".tmp." + std::to_string(::getpid()) + "." +
                          std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write '" + tmp + "'");
    out << content;
    if (!out) throw ConfigError("write failed for '" + tmp + "'");
  }
  fs::rename(tmp, path);
}

std::string csv_row(const std::vector<std::string>& cells) {
  std::string s;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) s += ',';
    s += cells[i];
  }
  return s + '\n';
}

void append_values(std::vector<std::string>& cells, const Vector& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) cells.push_back(format_double(v(i)));
}

void append_names(std::vector<std::string>& cells, const std::string& prefix,
                  Eigen::Index count) {
  for (Eigen::Index i = 0; i < count; ++i) cells.push_back(prefix + std::to_string(i));
}

// ---- run context -----------------------------------------------------------

struct Context {
  const ExperimentConfig& cfg;
  std::string out;
  std::string hash;
  std::string train_hash;
  std::ostream& log;
  std::mutex log_mutex;

  void say(const std::string& line) {
    std::lock_guard<std::mutex> lock(log_mutex);
    log << line << '\n';
    log.flush();
  }
};

struct Split {
  Matrix x_train, u_train;
  Matrix x_test, u_test, z_test;
};

Split split_dataset(const ExperimentConfig& cfg) {
  const Dataset ds = make_dataset(cfg.data);
  const auto tr = static_cast<Eigen::Index>(cfg.train_count);
  const auto te = static_cast<Eigen::Index>(ds.size()) - tr;
  return {ds.x.topRows(tr), ds.u.topRows(tr), ds.x.bottomRows(te), ds.u.bottomRows(te),
          ds.z.bottomRows(te)};
}

std::string tag(Variant v, std::uint64_t seed) {
  return std::string(variant_name(v)) + "/seed-" + std::to_string(seed);
}

std::string header_comment(const Context& ctx, Variant v, std::uint64_t seed) {
  return "# " + json{{"config_hash", ctx.hash},
                     {"variant", variant_name(v)},
                     {"seed", seed}}.dump() + "\n";
}

struct Loaded {
  Model model;
  ParamStore params;
  json meta;
};

Loaded load_run(const Context& ctx, Variant v, std::uint64_t seed) {
  const std::string path = run_dir(ctx.out, v, seed) + "/model.json";
  if (!fs::exists(path)) {
    throw MissingCheckpoint("missing checkpoint '" + path + "' for " + tag(v, seed) +
                            "; run `icm train` with this config first");
  }
  Checkpoint ck = load_checkpoint(path);
  const std::string th = ck.meta.value("training_hash", "");
  if (th != ctx.train_hash) {
    throw MissingCheckpoint("checkpoint '" + path + "' was trained under training hash " +
                            th + " but the config now gives " + ctx.train_hash +
                            "; retrain with `icm train`");
  }
  Model model(ck.config);
  return {std::move(model), std::move(ck.params), std::move(ck.meta)};
}

bool checkpoint_current(const Context& ctx, Variant v, std::uint64_t seed) {
  const std::string path = run_dir(ctx.out, v, seed) + "/model.json";
  if (!fs::exists(path)) return false;
  try {
    return load_checkpoint(path).meta.value("training_hash", "") == ctx.train_hash;
  } catch (const ConfigError&) {
    return false;
  }
}

// ---- jobs ------------------------------------------------------------------

// Returns false when training diverged; the checkpoint is written either way.
bool train_job(Context& ctx, const Split& data, Variant v, std::uint64_t seed) {
  const ExperimentConfig& cfg = ctx.cfg;
  const Model model(cfg.model_for(v));
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  ctx.say("train " + tag(v, seed) + ": " + std::to_string(tc.steps) + " steps");
  const std::size_t every = std::max<std::size_t>(tc.steps / 10, 1);
  TrainResult r = train(model, data.x_train, data.u_train, tc, nullptr,
                        [&](std::size_t step, const ElboTerms& e) {
                          if ((step + 1) % every == 0) {
                            ctx.say("  " + tag(v, seed) + " step " + std::to_string(step + 1) +
                                    " elbo " + format_double(e.total));
                          }
                        });
  const std::string dir = run_dir(ctx.out, v, seed);
  fs::create_directories(dir);

  std::string logcsv = header_comment(ctx, v, seed);
  logcsv += csv_row({"step", "recon", "kl_eps", "kl_z", "beta", "total"});
  for (std::size_t s = 0; s < r.log.size(); ++s) {
    const std::size_t step = s + 1;
    if (step % cfg.log_every != 0 && step != 1 && step != r.log.size()) continue;
    const ElboTerms& e = r.log[s];
    logcsv += csv_row({std::to_string(step), format_double(e.recon), format_double(e.kl_eps),
                       format_double(e.kl_z), format_double(e.beta), format_double(e.total)});
  }
  write_file(dir + "/train_log.csv", logcsv);

  json meta{{"config_hash", ctx.hash},
            {"training_hash", ctx.train_hash},
            {"variant", variant_name(v)},
            {"seed", seed},
            {"steps_completed", r.log.size()},
            {"diverged", r.diverged}};
  if (r.diverged) {
    meta["diverged_step"] = r.diverged_step;
    meta["message"] = r.message;
  }
  save_checkpoint(dir + "/model.json", model, r.params, meta);
  if (r.diverged) {
    ctx.say("train " + tag(v, seed) + ": diverged at step " + std::to_string(r.diverged_step) +
            ": " + r.message);
  }
  return !r.diverged;
}

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

struct RunMetrics {
  Variant variant;
  std::uint64_t seed;
  double d = kNan, c = kNan, i = kNan, irs = kNan, rho = kNan;
  bool diverged = false;
};

bool wants(const EvalConfig& e, const char* metric) {
  return std::find(e.metrics.begin(), e.metrics.end(), metric) != e.metrics.end();
}

// Skipped metrics are NaN in memory, empty cells in CSV and null in JSON.
std::string cell(double v) { return std::isnan(v) ? "" : format_double(v); }
json number(double v) { return std::isnan(v) ? json(nullptr) : json(v); }

RunMetrics eval_job(Context& ctx, const Split& data, Variant v, std::uint64_t seed) {
  const ExperimentConfig& cfg = ctx.cfg;
  Loaded run = load_run(ctx, v, seed);
  const std::size_t m = run.model.graph().block_dim();
  const Matrix lat = run.model.latents(run.params, data.x_test, data.u_test);
  if (!lat.allFinite()) {
    throw NumericError("eval " + tag(v, seed) + ": non-finite latents");
  }

  RunMetrics rm{v, seed};
  rm.diverged = run.meta.value("diverged", false);
  json j{{"config_hash", ctx.hash},
         {"variant", variant_name(v)},
         {"seed", seed},
         {"test_rows", data.x_test.rows()},
         {"diverged", rm.diverged}};
  if (wants(cfg.eval, "dci")) {
    DciConfig dc;
    dc.block_dim = m;
    dc.train_fraction = cfg.eval.train_fraction;
    dc.seed = cfg.eval.seed;
    dc.trees.kind = cfg.eval.regressor;
    dc.trees.trees = cfg.eval.trees;
    dc.trees.depth = cfg.eval.depth;
    dc.trees.learning_rate = cfg.eval.learning_rate;
    dc.trees.seed = cfg.eval.seed;
    const DciScores d = dci(lat, data.z_test, dc);
    rm.d = d.d;
    rm.c = d.c;
    rm.i = d.i;
    j["dci"] = d.to_json();
  }
  if (wants(cfg.eval, "irs")) {
    IrsConfig ic;
    ic.bins = cfg.eval.irs_bins;
    ic.quantile = cfg.eval.irs_quantile;
    ic.block_dim = m;
    const IrsReport ir = irs(lat, data.z_test, ic);
    rm.irs = ir.score;
    j["irs"] = ir.to_json();
  }
  if (wants(cfg.eval, "correspondence")) {
    const Correspondence corr = permutation_correspondence(lat, data.z_test, m);
    rm.rho = corr.mean;
    j["correspondence"] = corr.to_json();
  }
  const std::string dir = run_dir(ctx.out, v, seed);
  write_file(dir + "/metrics.json", j.dump(1) + "\n");
  std::string csv = header_comment(ctx, v, seed);
  csv += csv_row({"variant", "seed", "dci_d", "dci_c", "dci_i", "irs", "spearman_mean",
                  "diverged"});
  csv += csv_row({std::string(variant_name(v)), std::to_string(seed), cell(rm.d), cell(rm.c),
                  cell(rm.i), cell(rm.irs), cell(rm.rho), rm.diverged ? "1" : "0"});
  write_file(dir + "/metrics.csv", csv);
  ctx.say("eval " + tag(v, seed) + ": D " + cell(rm.d) + " C " + cell(rm.c) + " IRS " +
          cell(rm.irs));
  return rm;
}

void counterfact_job(Context& ctx, const Split& data, Variant v, std::uint64_t seed) {
  const CounterfactualConfig& q = ctx.cfg.counterfactual;
  Loaded run = load_run(ctx, v, seed);
  const auto nm = static_cast<Eigen::Index>(run.model.latent_dim());
  const auto m = static_cast<Eigen::Index>(run.model.graph().block_dim());
  const auto d = static_cast<Eigen::Index>(run.model.config().obs_dim);

  std::string csv = header_comment(ctx, v, seed);
  csv += "# " + json{{"target", q.target}, {"intervention", cf_to_json(q)}}.dump() + "\n";
  std::vector<std::string> head{"row"};
  append_names(head, "z_f", nm);
  append_names(head, "z_cf", nm);
  append_names(head, "x_obs", d);
  append_names(head, "x_f", d);
  append_names(head, "x_cf", d);
  csv += csv_row(head);
  for (std::size_t r = 0; r < q.rows; ++r) {
    const auto row = static_cast<Eigen::Index>(r);
    CounterfactualQuery query;
    query.x = data.x_test.row(row).transpose();
    query.u = data.u_test.row(row).transpose();
    query.target = q.target;
    if (q.value) {
      query.value = Eigen::Map<const Vector>(q.value->data(), m);
    } else {
      query.value = Vector::Zero(m);
    }
    CounterfactualResult res = counterfactual(run.model, run.params, query);
    if (q.label) {
      const Vector block = label_to_block(run.model, run.params, res.z_factual, query.u,
                                          q.target, *q.label);
      res = counterfactual_from_latent(run.model, run.params, res.z_factual, q.target, block);
    }
    std::vector<std::string> cells{std::to_string(r)};
    append_values(cells, res.z_factual);
    append_values(cells, res.z_cf);
    append_values(cells, query.x);
    append_values(cells, res.x_factual);
    append_values(cells, res.x_cf);
    csv += csv_row(cells);
  }
  write_file(run_dir(ctx.out, v, seed) + "/counterfactuals.csv", csv);
  ctx.say("counterfact " + tag(v, seed) + ": " + std::to_string(q.rows) + " rows");
}

using Points = std::vector<std::pair<Vector, Vector>>;

// (latent, label) pairs from `count` distinct random test rows.
Points draw_points(const Matrix& lat, const Matrix& u, std::size_t count,
                   std::mt19937_64& rng) {
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(lat.rows()));
  std::iota(rows.begin(), rows.end(), Eigen::Index{0});
  Points p;
  p.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, rows.size() - 1);
    std::swap(rows[i], rows[pick(rng)]);
    p.emplace_back(lat.row(rows[i]).transpose(), u.row(rows[i]).transpose());
  }
  return p;
}

void identifiability_job(Context& ctx, const Split& data, Variant v, std::uint64_t seed) {
  const ExperimentConfig& cfg = ctx.cfg;
  const IdentifiabilityConfig& ic = cfg.identifiability;
  const std::string dir = run_dir(ctx.out, v, seed);
  Loaded run = load_run(ctx, v, seed);
  json j{{"config_hash", ctx.hash}, {"variant", variant_name(v)}, {"seed", seed},
         {"k", ic.k}};
  std::string csv = header_comment(ctx, v, seed);
  csv += csv_row({"check", "index", "labels", "rank", "size", "min_singular", "max_residual",
                  "equivalent"});
  if (v == Variant::kBetaVaeAblation) {
    j["applicable"] = false;
    j["reason"] = "the beta-VAE prior is a fixed standard normal with no natural parameters";
    write_file(dir + "/identifiability.json", j.dump(1) + "\n");
    write_file(dir + "/identifiability.csv", csv);
    ctx.say("check-identifiability " + tag(v, seed) + ": not applicable");
    return;
  }
  j["applicable"] = true;
  const CausalGraph& g = run.model.graph();
  const Matrix lat = run.model.latents(run.params, data.x_test, data.u_test);
  const LamFn lam = prior_lam_fn(run.model.prior(), run.params);
  const std::size_t size = g.size() * ic.k;

  std::mt19937_64 rng = rng_for(seed, 0x1d3f);
  json varying = json::array(), constant = json::array();
  std::size_t full_varying = 0, full_constant = 0;
  for (std::size_t s = 0; s < ic.point_sets; ++s) {
    Points pts = draw_points(lat, data.u_test, size + 1, rng);
    const SuffVarReport a = sufficient_variability(lam, g, pts, ic.k);
    for (auto& p : pts) p.second = pts.front().second;
    const SuffVarReport b = sufficient_variability(lam, g, pts, ic.k);
    full_varying += a.rank == size;
    full_constant += b.rank == size;
    varying.push_back(a.to_json());
    constant.push_back(b.to_json());
    csv += csv_row({"sufficient_variability", std::to_string(s), "random", std::to_string(a.rank),
                    std::to_string(size), format_double(a.min_singular), "", ""});
    csv += csv_row({"sufficient_variability", std::to_string(s), "constant",
                    std::to_string(b.rank), std::to_string(size), format_double(b.min_singular),
                    "", ""});
  }
  j["size"] = size;
  j["random_labels"] = {{"full_rank_sets", full_varying}, {"reports", varying}};
  j["constant_labels"] = {{"full_rank_sets", full_constant}, {"reports", constant}};

  // Mechanisms against the same variant trained under the other seeds.
  std::mt19937_64 prng = rng_for(seed, 0x9e0b);
  const Points probes = draw_points(lat, data.u_test, ic.probes, prng);
  json mech = json::array(), skipped = json::array();
  for (std::uint64_t other : cfg.seeds) {
    if (other == seed) continue;
    if (!checkpoint_current(ctx, v, other)) {
      skipped.push_back(other);
      continue;
    }
    Loaded o = load_run(ctx, v, other);
    const LamFn lam_o = prior_lam_fn(o.model.prior(), o.params);
    const EquivalenceReport e = mechanism_equivalence(lam, lam_o, g, probes);
    json ej = e.to_json();
    ej["other_seed"] = other;
    mech.push_back(ej);
    csv += csv_row({"mechanism_residual", std::to_string(other), "", "", "", "",
                    format_double(e.max_residual), e.equivalent ? "1" : "0"});
  }
  j["mechanism_residuals"] = mech;
  j["missing_seeds"] = skipped;
  write_file(dir + "/identifiability.json", j.dump(1) + "\n");
  write_file(dir + "/identifiability.csv", csv);
  ctx.say("check-identifiability " + tag(v, seed) + ": full rank in " +
          std::to_string(full_varying) + "/" + std::to_string(ic.point_sets) +
          " random-label sets, " + std::to_string(full_constant) + "/" +
          std::to_string(ic.point_sets) + " constant-label sets");
}

// Runs `jobs` on at most `workers` threads. The first failure in job order is
// rethrown after every job has finished.
void run_pool(std::size_t workers, const std::vector<std::function<void()>>& jobs) {
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        jobs[i]();
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t count = std::min(workers, jobs.size());
  if (count <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < count; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct RunKey {
  Variant variant;
  std::uint64_t seed;
};

std::vector<RunKey> run_keys(const ExperimentConfig& cfg, std::optional<std::uint64_t> seed) {
  std::vector<RunKey> keys;
  for (Variant v : cfg.variants) {
    if (seed) {
      keys.push_back({v, *seed});
    } else {
      for (std::uint64_t s : cfg.seeds) keys.push_back({v, s});
    }
  }
  return keys;
}

void write_table(Context& ctx, std::vector<RunMetrics> rows) {
  std::sort(rows.begin(), rows.end(), [](const RunMetrics& a, const RunMetrics& b) {
    const auto an = variant_name(a.variant), bn = variant_name(b.variant);
    return an != bn ? an < bn : a.seed < b.seed;
  });
  std::map<std::string, std::vector<RunMetrics>> by_variant;
  for (const auto& r : rows) by_variant[std::string(variant_name(r.variant))].push_back(r);

  json seeds = json::array();
  for (std::uint64_t s : ctx.cfg.seeds) seeds.push_back(s);
  std::sort(seeds.begin(), seeds.end());
  std::string csv = "# " + json{{"config_hash", ctx.hash}, {"seeds", seeds}}.dump() + "\n";
  csv += csv_row({"variant", "runs", "median_d", "median_c", "median_irs", "median_i",
                  "median_spearman", "diverged"});
  json tj{{"config_hash", ctx.hash}, {"seeds", seeds}, {"rows", json::array()}};
  for (const auto& [name, runs] : by_variant) {
    std::vector<double> d, c, i, s, r;
    std::size_t diverged = 0;
    json per = json::array();
    for (const auto& m : runs) {
      d.push_back(m.d);
      c.push_back(m.c);
      i.push_back(m.i);
      s.push_back(m.irs);
      r.push_back(m.rho);
      diverged += m.diverged;
      per.push_back({{"seed", m.seed}, {"d", number(m.d)}, {"c", number(m.c)},
                     {"i", number(m.i)}, {"irs", number(m.irs)}, {"spearman", number(m.rho)},
                     {"diverged", m.diverged}});
    }
    auto med = [](const std::vector<double>& v) {
      return std::any_of(v.begin(), v.end(), [](double x) { return std::isnan(x); })
                 ? kNan
                 : median(v);
    };
    const double md = med(d), mc = med(c), ms = med(s), mi = med(i), mr = med(r);
    csv += csv_row({name, std::to_string(runs.size()), cell(md), cell(mc), cell(ms), cell(mi),
                    cell(mr), std::to_string(diverged)});
    tj["rows"].push_back({{"variant", name},
                          {"median_d", number(md)},
                          {"median_c", number(mc)},
                          {"median_irs", number(ms)},
                          {"median_i", number(mi)},
                          {"median_spearman", number(mr)},
                          {"diverged", diverged},
                          {"runs", per}});
  }
  write_file(ctx.out + "/table.csv", csv);
  write_file(ctx.out + "/table.json", tj.dump(1) + "\n");
  ctx.say("table written to " + ctx.out + "/table.csv");
}

int dispatch(Context& ctx, const std::string& sub, std::optional<std::uint64_t> seed) {
  const ExperimentConfig& cfg = ctx.cfg;
  if (sub == "gen-data") {
    DataConfig dc = cfg.data;
    if (seed) dc.seed = *seed;
    const Dataset ds = make_dataset(dc);
    fs::create_directories(ctx.out);
    save_dataset(ctx.out + "/data.csv", ds, {{"config_hash", ctx.hash}, {"seed", dc.seed}});
    ctx.say("wrote " + std::to_string(ds.size()) + " rows to " + ctx.out + "/data.csv");
    return kExitOk;
  }

  const Split data = split_dataset(cfg);
  const std::vector<RunKey> keys = run_keys(cfg, seed);
  std::vector<std::function<void()>> jobs;

  if (sub == "train") {
    std::vector<char> ok(keys.size(), 1);
    for (std::size_t k = 0; k < keys.size(); ++k) {
      jobs.emplace_back([&, k] { ok[k] = train_job(ctx, data, keys[k].variant, keys[k].seed); });
    }
    run_pool(cfg.workers, jobs);
    return std::all_of(ok.begin(), ok.end(), [](char c) { return c != 0; }) ? kExitOk
                                                                            : kExitFailure;
  }
  if (sub == "eval" || sub == "table") {
    std::vector<RunMetrics> results(keys.size());
    for (std::size_t k = 0; k < keys.size(); ++k) {
      jobs.emplace_back([&, k] {
        const RunKey& key = keys[k];
        if (sub == "table" && !checkpoint_current(ctx, key.variant, key.seed)) {
          train_job(ctx, data, key.variant, key.seed);
        }
        results[k] = eval_job(ctx, data, key.variant, key.seed);
      });
    }
    run_pool(cfg.workers, jobs);
    if (sub == "table") write_table(ctx, results);
    const bool diverged = std::any_of(results.begin(), results.end(),
                                      [](const RunMetrics& r) { return r.diverged; });
    return diverged ? kExitFailure : kExitOk;
  }
  if (sub == "counterfact" || sub == "check-identifiability") {
    for (const RunKey& key : keys) {
      jobs.emplace_back([&, key] {
        if (sub == "counterfact") {
          counterfact_job(ctx, data, key.variant, key.seed);
        } else {
          identifiability_job(ctx, data, key.variant, key.seed);
        }
      });
    }
    run_pool(cfg.workers, jobs);
    return kExitOk;
  }
  throw ConfigError("unknown subcommand '" + sub + "'");
}

}  // namespace

// ---- config ----------------------------------------------------------------

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  constexpr std::string_view ctx = "config";
  check_keys(j, {"name", "data", "train_count", "model", "train", "eval", "variants", "seeds",
                 "workers", "log_every", "counterfactual", "identifiability"},
             ctx);
  ExperimentConfig c;
  c.name = get_or(j, "name", c.name, ctx);
  if (c.name.empty() || c.name.find('/') != std::string::npos) {
    throw ConfigError("config: name must be a non-empty string without '/'");
  }
  json dj = j.value("data", json::object());
  if (dj.is_object() && !dj.contains("count")) dj["count"] = c.data.count;
  c.data = DataConfig::from_json(dj);
  c.train_count = get_or(j, "train_count", c.train_count, ctx);

  json mj = j.value("model", json::object());
  if (!mj.is_object()) throw ConfigError("model: expected an object");
  for (const char* derived : {"graph", "obs_dim", "variant"}) {
    if (mj.contains(derived)) {
      throw ConfigError(std::string("model: field '") + derived +
                        "' is set by the harness (data generator or 'variants')");
    }
  }
  json full = mj;
  full["graph"] = generator_graph(c.data.generator, c.data.block_dim).to_json();
  full["obs_dim"] = c.data.obs_dim;
  c.model = ModelConfig::from_json(full);

  if (j.contains("train")) {
    if (j.at("train").is_object() && j.at("train").contains("seed")) {
      throw ConfigError("train: field 'seed' is set by the top-level 'seeds' list");
    }
    c.train = TrainConfig::from_json(j.at("train"));
  }
  if (j.contains("eval")) c.eval = eval_from_json(j.at("eval"));
  if (j.contains("variants")) {
    c.variants.clear();
    for (const auto& s : get_or(j, "variants", std::vector<std::string>{}, ctx)) {
      c.variants.push_back(parse_variant(s));
    }
  }
  c.seeds = get_or(j, "seeds", c.seeds, ctx);
  c.workers = get_or(j, "workers", c.workers, ctx);
  c.log_every = get_or(j, "log_every", c.log_every, ctx);
  if (j.contains("counterfactual")) c.counterfactual = cf_from_json(j.at("counterfactual"));
  if (!c.counterfactual.label && !c.counterfactual.value) c.counterfactual.label = 1.0;
  if (j.contains("identifiability")) c.identifiability = ident_from_json(j.at("identifiability"));
  validate(c, mj);
  return c;
}

json ExperimentConfig::to_json() const {
  json mj = model.to_json();
  mj.erase("graph");
  mj.erase("obs_dim");
  mj.erase("variant");
  if (!has_variant(*this, Variant::kIvaeAblation)) mj.erase("ivae_prior_inputs");
  json tj = train.to_json();
  tj.erase("seed");
  json vars = json::array();
  for (Variant v : variants) vars.push_back(variant_name(v));
  return {{"name", name},
          {"data", data.to_json()},
          {"train_count", train_count},
          {"model", mj},
          {"train", tj},
          {"eval", eval_to_json(eval)},
          {"variants", vars},
          {"seeds", seeds},
          {"workers", workers},
          {"log_every", log_every},
          {"counterfactual", cf_to_json(counterfactual)},
          {"identifiability", ident_to_json(identifiability)}};
}

ModelConfig ExperimentConfig::model_for(Variant v) const {
  ModelConfig m = model;
  m.variant = v;
  return m;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  return ExperimentConfig::from_json(j);
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const ExperimentConfig& cfg) {
  json j = cfg.to_json();
  j.erase("workers");
  return hex64(fnv1a64(j.dump()));
}

std::string training_hash(const ExperimentConfig& cfg) {
  json full = cfg.to_json();
  json j{{"data", full["data"]},
         {"train_count", full["train_count"]},
         {"model", full["model"]},
         {"train", full["train"]},
         {"log_every", full["log_every"]}};
  return hex64(fnv1a64(j.dump()));
}

std::string resolve_out_dir(const std::optional<std::string>& flag, const std::string& name) {
  if (flag && !flag->empty()) return *flag;
  if (const char* env = std::getenv("ICM_OUT_DIR"); env != nullptr && *env != '\0') return env;
  return "icm-out/" + name;
}

std::string run_dir(const std::string& out, Variant v, std::uint64_t seed) {
  return out + "/runs/" + std::string(variant_name(v)) + "/seed-" + std::to_string(seed);
}

int run_subcommand(const std::string& subcommand, const ExperimentConfig& cfg,
                   std::optional<std::uint64_t> seed, const std::string& out,
                   std::ostream& log) {
  Context ctx{cfg, out, config_hash(cfg), training_hash(cfg), log, {}};
  try {
    return dispatch(ctx, subcommand, seed);
  } catch (const MissingCheckpoint& e) {
    log << "error: " << e.what() << '\n';
    return kExitMissing;
  } catch (const ConfigError& e) {
    log << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    log << "numeric error: " << e.what() << '\n';
    return kExitFailure;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

int cli_main(int argc, char** argv) {
  CLI::App app{"icm: causal representation learning experiments"};
  std::string sub;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  app.add_option("subcommand", sub, "gen-data | train | eval | counterfact | "
                                    "check-identifiability | table")
      ->required()
      ->check(CLI::IsMember(std::vector<std::string>(std::begin(kSubcommands),
                                                     std::end(kSubcommands))));
  app.add_option("--config", config, "experiment configuration (JSON)")->required();
  app.add_option("--seed", seed, "training seed; for gen-data, the data seed");
  app.add_option("--out", out, "output directory (default: $ICM_OUT_DIR or icm-out/<name>)");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }
  ExperimentConfig cfg;
  try {
    cfg = load_experiment_config(config);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return run_subcommand(sub, cfg, seed, resolve_out_dir(out, cfg.name), std::cerr);
}

}  // namespace icm
