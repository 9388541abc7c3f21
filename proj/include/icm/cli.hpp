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


// Experiment harness behind the `icm` command: configuration, per-run
// artifacts and the subcommands that produce them.
//
// Layout under the output directory:
//   data.csv
//   runs/<variant>/seed-<N>/model.json, train_log.csv, metrics.{json,csv},
//                           counterfactuals.csv, identifiability.{json,csv}
//   table.{csv,json}

#ifndef ICM_CLI_HPP_
#define ICM_CLI_HPP_

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icm/metrics.hpp"
#include "icm/synth.hpp"
#include "icm/vae.hpp"

namespace icm {

struct EvalConfig {
  Regressor regressor = Regressor::kGbt;
  std::size_t trees = 100;
  std::size_t depth = 4;
  double learning_rate = 0.1;
  double train_fraction = 0.8;
  std::size_t irs_bins = 10;
  double irs_quantile = 0.99;
  std::uint64_t seed = 0;  // DCI split and forest bootstrap
  std::vector<std::string> metrics{"dci", "irs", "correspondence"};
};

// Either `label` (a standardised label value mapped through the learned
// mechanism) or `value` (a raw latent block) sets the intervention.
struct CounterfactualConfig {
  std::size_t rows = 8;  // first test rows used as factual observations
  std::size_t target = 0;
  std::optional<double> label;
  std::optional<std::vector<double>> value;
};

struct IdentifiabilityConfig {
  std::size_t point_sets = 10;
  std::size_t k = 1;
  std::size_t probes = 64;
};

struct ExperimentConfig {
  std::string name = "experiment";
  DataConfig data = with_count(7000);
  std::size_t train_count = 6000;  // remaining rows form the test split
  ModelConfig model;               // graph and obs_dim derived from data
  TrainConfig train;
  EvalConfig eval;
  std::vector<Variant> variants{Variant::kIcmVae, Variant::kIvaeAblation};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t workers = 1;
  std::size_t log_every = 100;
  CounterfactualConfig counterfactual;
  IdentifiabilityConfig identifiability;

  // Unknown fields anywhere are a ConfigError, as are settings that a listed
  // variant cannot honour.
  static ExperimentConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  ModelConfig model_for(Variant v) const;

 private:
  static DataConfig with_count(std::size_t count) {
    DataConfig d;
    d.count = count;
    return d;
  }
};

ExperimentConfig load_experiment_config(const std::string& path);

// 16 hex digits of FNV-1a over the canonical JSON of the normalised config
// (worker count excluded: it never changes results).
std::string config_hash(const ExperimentConfig& cfg);
// Same, restricted to the fields that determine a trained checkpoint.
std::string training_hash(const ExperimentConfig& cfg);

std::uint64_t fnv1a64(const std::string& bytes);

// --out, else $ICM_OUT_DIR, else icm-out/<name>.
std::string resolve_out_dir(const std::optional<std::string>& flag,
                            const std::string& name);

std::string run_dir(const std::string& out, Variant v, std::uint64_t seed);

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,  // numeric or runtime failure
  kExitUsage = 2,    // bad arguments or configuration
  kExitMissing = 3,  // required checkpoint absent
};

// Runs one subcommand: gen-data, train, eval, counterfact,
// check-identifiability or table. `seed` restricts training-side commands to
// one seed (for gen-data it replaces the data seed). Progress goes to `log`.
int run_subcommand(const std::string& subcommand, const ExperimentConfig& cfg,
                   std::optional<std::uint64_t> seed, const std::string& out,
                   std::ostream& log);

// Command-line entry point.
int cli_main(int argc, char** argv);

}  // namespace icm

#endif  // ICM_CLI_HPP_
