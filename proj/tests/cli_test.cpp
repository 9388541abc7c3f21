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

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "icm/errors.hpp"

namespace icm {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

json tiny() {
  return json::parse(R"({
    "name": "tiny",
    "data": {"generator": "pendulum", "count": 260, "seed": 5},
    "train_count": 200,
    "model": {"hidden": 8, "encoder_layers": 2, "decoder_layers": 2,
              "mechanism_layers": 1, "prior_var": 0.01},
    "train": {"steps": 6, "batch": 16},
    "eval": {"trees": 5, "depth": 2},
    "variants": ["icm-vae", "ivae-ablation"],
    "seeds": [0, 1],
    "log_every": 2,
    "counterfactual": {"rows": 4, "target": 1, "label": 0.5},
    "identifiability": {"point_sets": 3, "probes": 8}
  })");
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("icm_cli_test_" + name);
  fs::remove_all(p);
  return p;
}

// Every regular file below `root`, relative path -> bytes.
std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return out;
}

int run(const std::string& sub, const json& j, const fs::path& out,
        std::optional<std::uint64_t> seed = std::nullopt, std::string* log = nullptr) {
  std::ostringstream os;
  const int rc = run_subcommand(sub, ExperimentConfig::from_json(j), seed, out.string(), os);
  if (log) *log = os.str();
  return rc;
}

TEST(Fnv, KnownVectors) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ULL);
}

TEST(ExperimentConfig, DefaultsRoundTrip) {
  const ExperimentConfig a = ExperimentConfig::from_json(json::object());
  EXPECT_EQ(a.train_count, 6000u);
  EXPECT_EQ(a.data.count, 7000u);
  EXPECT_EQ(a.model.graph, pendulum_graph(4));
  EXPECT_EQ(a.model.obs_dim, 10u);
  ASSERT_TRUE(a.counterfactual.label.has_value());
  const ExperimentConfig b = ExperimentConfig::from_json(a.to_json());
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
}

TEST(ExperimentConfig, UnknownFieldsAreErrors) {
  json j = tiny();
  j["lerning_rate"] = 1;
  EXPECT_THROW(ExperimentConfig::from_json(j), ConfigError);
  for (const char* block : {"data", "model", "train", "eval", "counterfactual",
                            "identifiability"}) {
    j = tiny();
    j[block]["typo_field"] = 1;
    EXPECT_THROW(ExperimentConfig::from_json(j), ConfigError) << block;
  }
}

TEST(ExperimentConfig, DerivedAndVariantSpecificFields) {
  json j = tiny();
  j["model"]["graph"] = pendulum_graph(4).to_json();
  EXPECT_THROW(ExperimentConfig::from_json(j), ConfigError);
  j = tiny();
  j["train"]["seed"] = 3;
  EXPECT_THROW(ExperimentConfig::from_json(j), ConfigError);
  j = tiny();
  j["variants"] = {"icm-vae"};
  j["model"]["ivae_prior_inputs"] = "none";
  EXPECT_THROW(ExperimentConfig::from_json(j), ConfigError);
  j["variants"] = {"icm-vae", "ivae-ablation"};
  EXPECT_EQ(ExperimentConfig::from_json(j).model.ivae_prior_inputs, PriorConfig::Inputs::kNone);
  j = tiny();
  j["variants"] = {"beta-vae-ablation"};
  EXPECT_THROW(ExperimentConfig::from_json(j), ConfigError);  // label path needs a prior
  j["counterfactual"] = {{"value", {0.1, 0.2, 0.3, 0.4}}};
  EXPECT_NO_THROW(ExperimentConfig::from_json(j));
  j["counterfactual"] = {{"value", {0.1}}};
  EXPECT_THROW(ExperimentConfig::from_json(j), ConfigError);
}

TEST(ExperimentConfig, RangeChecks) {
  auto bad = [](auto edit) {
    json j = tiny();
    edit(j);
    EXPECT_THROW(ExperimentConfig::from_json(j), ConfigError) << j.dump();
  };
  bad([](json& j) { j["train_count"] = 260; });
  bad([](json& j) { j["variants"] = json::array(); });
  bad([](json& j) { j["variants"] = {"icm-vae", "icm-vae"}; });
  bad([](json& j) { j["variants"] = {"causal-vae"}; });
  bad([](json& j) { j["seeds"] = {1, 1}; });
  bad([](json& j) { j["workers"] = 0; });
  bad([](json& j) { j["counterfactual"]["target"] = 4; });
  bad([](json& j) { j["counterfactual"]["value"] = {1, 2, 3, 4}; });  // with label
  bad([](json& j) { j["identifiability"]["k"] = 5; });
  bad([](json& j) { j["eval"]["train_fraction"] = 1.0; });
  bad([](json& j) { j["name"] = "a/b"; });
  bad([](json& j) { j["eval"]["metrics"] = {"dci", "mig"}; });
  bad([](json& j) { j["eval"]["metrics"] = json::array(); });
}

TEST(ExperimentConfig, HashTracksResultFieldsOnly) {
  json j = tiny();
  const std::string h = config_hash(ExperimentConfig::from_json(j));
  const std::string th = training_hash(ExperimentConfig::from_json(j));
  j["workers"] = 4;
  EXPECT_EQ(config_hash(ExperimentConfig::from_json(j)), h);
  j["eval"]["trees"] = 6;
  EXPECT_NE(config_hash(ExperimentConfig::from_json(j)), h);
  EXPECT_EQ(training_hash(ExperimentConfig::from_json(j)), th);
  j["train"]["steps"] = 7;
  EXPECT_NE(training_hash(ExperimentConfig::from_json(j)), th);
}

TEST(Cli, OutputDirectoryPrecedence) {
  ::unsetenv("ICM_OUT_DIR");
  EXPECT_EQ(resolve_out_dir(std::nullopt, "exp"), "icm-out/exp");
  ::setenv("ICM_OUT_DIR", "/tmp/from-env", 1);
  EXPECT_EQ(resolve_out_dir(std::nullopt, "exp"), "/tmp/from-env");
  EXPECT_EQ(resolve_out_dir(std::string("/tmp/flag"), "exp"), "/tmp/flag");
  ::unsetenv("ICM_OUT_DIR");
}

TEST(Cli, GenDataIsByteIdentical) {
  const fs::path a = scratch("gen_a"), b = scratch("gen_b"), c = scratch("gen_c");
  ASSERT_EQ(run("gen-data", tiny(), a), kExitOk);
  ASSERT_EQ(run("gen-data", tiny(), b), kExitOk);
  ASSERT_EQ(run("gen-data", tiny(), c, 6), kExitOk);
  const std::string bytes = slurp(a / "data.csv");
  EXPECT_EQ(bytes, slurp(b / "data.csv"));
  EXPECT_NE(bytes, slurp(c / "data.csv"));
  const std::string hash = config_hash(ExperimentConfig::from_json(tiny()));
  EXPECT_NE(bytes.find(hash), std::string::npos);
  const Dataset ds = load_dataset((a / "data.csv").string());
  EXPECT_EQ(ds.size(), 260u);
  EXPECT_EQ(ds.config.seed, 5u);
  EXPECT_EQ(load_dataset((c / "data.csv").string()).config.seed, 6u);
}

TEST(Cli, MissingCheckpointIsReported) {
  const fs::path out = scratch("missing");
  std::string log;
  for (const char* sub : {"eval", "counterfact", "check-identifiability"}) {
    EXPECT_EQ(run(sub, tiny(), out, std::nullopt, &log), kExitMissing) << sub;
    EXPECT_NE(log.find("missing checkpoint"), std::string::npos) << log;
  }
}

TEST(Cli, FullPipelineIsDeterministic) {
  const fs::path a = scratch("pipe_a"), b = scratch("pipe_b");
  json parallel = tiny();
  parallel["workers"] = 3;
  for (const auto& [dir, cfg] : {std::pair{a, tiny()}, std::pair{b, parallel}}) {
    for (const char* sub : {"gen-data", "train", "eval", "counterfact",
                            "check-identifiability", "table"}) {
      std::string log;
      ASSERT_EQ(run(sub, cfg, dir, std::nullopt, &log), kExitOk) << sub << ": " << log;
    }
  }
  const auto sa = snapshot(a), sb = snapshot(b);
  EXPECT_EQ(sa.size(), 3 + 2 * 2 * 7u);
  ASSERT_EQ(sa.size(), sb.size());
  const std::string hash = config_hash(ExperimentConfig::from_json(tiny()));
  for (const auto& [name, bytes] : sa) {
    ASSERT_TRUE(sb.count(name)) << name;
    EXPECT_EQ(bytes, sb.at(name)) << name;
    EXPECT_NE(bytes.find(hash), std::string::npos) << name;
  }

  const std::string table = sa.at("table.csv");
  EXPECT_LT(table.find("\nicm-vae,2,"), table.find("\nivae-ablation,2,"));

  const json id = json::parse(sa.at("runs/icm-vae/seed-0/identifiability.json"));
  EXPECT_EQ(id.at("size"), 4);
  EXPECT_EQ(id.at("random_labels").at("reports").size(), 3u);
  ASSERT_EQ(id.at("mechanism_residuals").size(), 1u);
  EXPECT_EQ(id.at("mechanism_residuals")[0].at("other_seed"), 1);

  // One seed only: same bytes as the matching run of the full pipeline.
  const fs::path c = scratch("pipe_c");
  ASSERT_EQ(run("train", tiny(), c, 1), kExitOk);
  EXPECT_EQ(slurp(c / "runs/icm-vae/seed-1/model.json"), sa.at("runs/icm-vae/seed-1/model.json"));
  EXPECT_FALSE(fs::exists(c / "runs/icm-vae/seed-0"));
}

TEST(Cli, StaleCheckpointIsRejected) {
  const fs::path out = scratch("stale");
  json j = tiny();
  j["variants"] = {"ivae-ablation"};
  j["seeds"] = {0};
  ASSERT_EQ(run("train", j, out), kExitOk);
  ASSERT_EQ(run("eval", j, out), kExitOk);
  j["train"]["steps"] = 7;
  std::string log;
  EXPECT_EQ(run("eval", j, out, std::nullopt, &log), kExitMissing);
  EXPECT_NE(log.find("retrain"), std::string::npos) << log;
  // An evaluation-only change keeps the checkpoint usable.
  j["train"]["steps"] = 6;
  j["eval"]["depth"] = 3;
  EXPECT_EQ(run("eval", j, out), kExitOk);
}

TEST(Cli, MetricSubset) {
  const fs::path out = scratch("subset");
  json j = tiny();
  j["variants"] = {"icm-vae"};
  j["seeds"] = {0};
  j["eval"]["metrics"] = {"irs"};
  ASSERT_EQ(run("table", j, out), kExitOk);
  const json m = json::parse(slurp(out / "runs/icm-vae/seed-0/metrics.json"));
  EXPECT_TRUE(m.contains("irs"));
  EXPECT_FALSE(m.contains("dci"));
  const json t = json::parse(slurp(out / "table.json"));
  EXPECT_TRUE(t["rows"][0]["median_d"].is_null());
  EXPECT_TRUE(t["rows"][0]["median_irs"].is_number());
  EXPECT_NE(slurp(out / "table.csv").find("\nicm-vae,1,,,"), std::string::npos);
  const std::string log = slurp(out / "runs/icm-vae/seed-0/train_log.csv");
  EXPECT_NE(log.find("step,recon,kl_eps,kl_z,beta,total\n1,"), std::string::npos);
}

TEST(Cli, BetaVaeIdentifiabilityNotApplicable) {
  const fs::path out = scratch("beta");
  json j = tiny();
  j["variants"] = {"beta-vae-ablation"};
  j["seeds"] = {0};
  j["counterfactual"] = {{"rows", 2}, {"value", {0.0, 0.0, 0.0, 0.0}}};
  ASSERT_EQ(run("train", j, out), kExitOk);
  ASSERT_EQ(run("counterfact", j, out), kExitOk);
  ASSERT_EQ(run("check-identifiability", j, out), kExitOk);
  const json id = json::parse(slurp(out / "runs/beta-vae-ablation/seed-0/identifiability.json"));
  EXPECT_FALSE(id.at("applicable").get<bool>());
}

TEST(Cli, CommandLineErrors) {
  const fs::path dir = scratch("argv");
  fs::create_directories(dir);
  const std::string cfg = (dir / "c.json").string();
  {
    json j = tiny();
    j["extra"] = true;
    std::ofstream(cfg) << j.dump();
  }
  auto call = [](std::vector<std::string> args) {
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    return cli_main(static_cast<int>(argv.size()), argv.data());
  };
  EXPECT_EQ(call({"icm", "frobnicate", "--config", cfg}), kExitUsage);
  EXPECT_EQ(call({"icm", "train"}), kExitUsage);
  EXPECT_EQ(call({"icm", "train", "--config", cfg}), kExitUsage);  // unknown field
  EXPECT_EQ(call({"icm", "train", "--config", (dir / "absent.json").string()}), kExitUsage);
  std::ofstream(cfg) << tiny().dump();
  EXPECT_EQ(call({"icm", "gen-data", "--config", cfg, "--out", (dir / "o").string(), "--seed",
                  "9"}),
            kExitOk);
  EXPECT_EQ(load_dataset((dir / "o" / "data.csv").string()).config.seed, 9u);
}

}  // namespace
}  // namespace icm
