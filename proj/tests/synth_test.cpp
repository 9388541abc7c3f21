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

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "icm/errors.hpp"

namespace icm {
namespace {

// Reference values computed with an independent double-precision evaluation
// of the shadow formulas.
TEST(Pendulum, ShadowOracleValues) {
  auto [u3, u4] = pendulum_shadow(0.0, 80.0);
  EXPECT_NEAR(u3, 3.0867371142126103, 1e-12);
  EXPECT_NEAR(u4, 7.969251898544336, 1e-12);
  std::tie(u3, u4) = pendulum_shadow(30.0, 120.0);
  EXPECT_EQ(u3, 3.0);
  EXPECT_NEAR(u4, 14.355420078715909, 1e-12);
}

TEST(Pendulum, BobAtZeroAngle) {
  auto [x, y] = pendulum_bob(0.0);
  EXPECT_EQ(x, 10.0);
  EXPECT_EQ(y, 0.5);
}

TEST(Pendulum, RangesAndClamp) {
  Matrix f = gen_pendulum(5000, 3);
  ASSERT_EQ(f.rows(), 5000);
  ASSERT_EQ(f.cols(), 4);
  EXPECT_GE(f.col(0).minCoeff(), -45.0);
  EXPECT_LT(f.col(0).maxCoeff(), 45.0);
  EXPECT_GE(f.col(1).minCoeff(), 60.0);
  EXPECT_LT(f.col(1).maxCoeff(), 145.0);
  EXPECT_GE(f.col(2).minCoeff(), 3.0);
  EXPECT_TRUE(f.allFinite());
}

TEST(Pendulum, ShadowsRegenerateBitwise) {
  Matrix f = gen_pendulum(1000, 11);
  for (Eigen::Index r = 0; r < f.rows(); ++r) {
    auto [u3, u4] = pendulum_shadow(f(r, 0), f(r, 1));
    ASSERT_EQ(u3, f(r, 2));
    ASSERT_EQ(u4, f(r, 3));
  }
}

TEST(Generators, DeterministicGivenSeed) {
  EXPECT_EQ(gen_pendulum(200, 5), gen_pendulum(200, 5));
  EXPECT_NE(gen_pendulum(200, 5), gen_pendulum(200, 6));
  EXPECT_EQ(gen_causalcircuit(200, 5), gen_causalcircuit(200, 5));
  EXPECT_EQ(gen_flow_graph(200, 5), gen_flow_graph(200, 5));
  EXPECT_THROW(gen_pendulum(0, 1), ContractError);
  EXPECT_THROW(gen_causalcircuit(0, 1), ContractError);
  EXPECT_THROW(gen_flow_graph(0, 1), ContractError);
}

TEST(Circuit, ButtonBumps) {
  auto b = circuit_buttons(0.2);
  EXPECT_DOUBLE_EQ(b[0], 1.0);
  EXPECT_EQ(b[1], 0.0);
  EXPECT_EQ(b[2], 0.0);
  b = circuit_buttons(0.55);
  EXPECT_NEAR(b[1], 0.5, 1e-12);
  b = circuit_buttons(0.0);
  EXPECT_EQ(b[0] + b[1] + b[2], 0.0);
  for (double a = 0.0; a <= 1.0; a += 0.01) {
    b = circuit_buttons(a);
    int active = (b[0] > 0) + (b[1] > 0) + (b[2] > 0);
    EXPECT_LE(active, 1) << a;
  }
}

TEST(Circuit, IntensityRules) {
  EXPECT_DOUBLE_EQ(circuit_red_intensity(0.0, 0.0, 0.0), 0.2);
  EXPECT_DOUBLE_EQ(circuit_intensity(1.0), 0.8);
  EXPECT_DOUBLE_EQ(circuit_red_intensity(0.7, 0.6, 0.0), 0.8);
}

double sample_mean(double v, int draws, std::uint64_t seed, double* se) {
  std::mt19937_64 rng(seed);
  double s = 0.0, s2 = 0.0;
  for (int k = 0; k < draws; ++k) {
    const double y = sample_light(v, rng);
    s += y;
    s2 += y * y;
  }
  const double mean = s / draws;
  *se = std::sqrt((s2 / draws - mean * mean) / draws);
  return mean;
}

// Beta(a, b) has mean a / (a + b); with a = 5v, b = 5(1 - v) that is v.
TEST(Circuit, BetaMeanMonteCarlo) {
  double se = 0.0;
  for (double v : {0.2, 0.5, 0.8}) {
    const double mean = sample_mean(v, 100000, 17, &se);
    EXPECT_LT(std::abs(mean - v), 3.0 * se) << v;
  }
}

TEST(Circuit, SymmetricAtHalf) {
  std::mt19937_64 rng(4);
  int below = 0;
  const int draws = 100000;
  for (int k = 0; k < draws; ++k) below += sample_beta(2.5, 2.5, rng) < 0.5;
  // Binomial(draws, 1/2): sd = sqrt(draws) / 2.
  EXPECT_LT(std::abs(below - draws / 2), 3.0 * std::sqrt(draws) / 2.0);
  EXPECT_THROW(sample_beta(0.0, 1.0, rng), ContractError);
}

TEST(Circuit, SamplesAreGraphConsistent) {
  Matrix f = gen_causalcircuit(3000, 8);
  for (Eigen::Index r = 0; r < f.rows(); ++r) {
    ASSERT_TRUE(circuit_consistent(f(r, 0), f(r, 1), f(r, 2), f(r, 3)));
    for (int c = 1; c < 4; ++c) {
      ASSERT_GT(f(r, c), 0.0);
      ASSERT_LT(f(r, c), 1.0);
    }
  }
  EXPECT_GE(f.col(0).minCoeff(), 0.0);
  EXPECT_LT(f.col(0).maxCoeff(), 1.0);
}

TEST(Flow, RootPerturbationFollowsReachability) {
  const FlowMechanisms mech = FlowMechanisms::defaults();
  Vector eps(4);
  eps << 0.3, -0.2, 0.5, 0.1;
  const Vector base = flow_factors(eps, mech);
  eps(0) += 0.7;
  const Vector moved = flow_factors(eps, mech);
  EXPECT_NE(moved(1), base(1));
  EXPECT_NE(moved(3), base(3));
  EXPECT_EQ(moved(2), base(2));
}

TEST(Flow, ZeroWeightsGiveIndependentGaussians) {
  FlowMechanisms mech = FlowMechanisms::defaults();
  mech.weights.setZero();
  Vector eps(4);
  eps << 0.3, -0.2, 0.5, 0.1;
  EXPECT_EQ(flow_factors(eps, mech), eps);
}

TEST(Flow, DSeparatedPairsUncorrelated) {
  Matrix f = gen_flow_graph(10000, 21);
  Matrix c = f.rowwise() - f.colwise().mean();
  Matrix cov = c.transpose() * c / static_cast<double>(f.rows() - 1);
  auto corr = [&](int a, int b) { return cov(a, b) / std::sqrt(cov(a, a) * cov(b, b)); };
  EXPECT_LT(std::abs(corr(0, 2)), 0.05);
  EXPECT_LT(std::abs(corr(1, 2)), 0.05);
  EXPECT_GT(std::abs(corr(0, 1)), 0.3);
  EXPECT_GT(std::abs(corr(1, 3)), 0.1);
}

TEST(Flow, WeightOffGraphRejected) {
  FlowMechanisms mech = FlowMechanisms::defaults();
  mech.weights(3, 0) = 1.0;
  EXPECT_THROW(gen_flow_graph(10, 1, mech), GraphError);
  nlohmann::json j = {{"weights", {{0, 2, 1.0}}}};
  EXPECT_THROW(gen_flow_graph(10, 1, FlowMechanisms::from_json(j)), GraphError);
}

MixingFunction test_mixing(std::size_t n, std::size_t d) {
  return MixingFunction::random(n, d, 99, Vector::Zero(static_cast<Eigen::Index>(n)),
                                Vector::Ones(static_cast<Eigen::Index>(n)));
}

TEST(Mixing, IdentityWithoutNoise) {
  MixingFunction f = MixingFunction::identity(4);
  std::mt19937_64 rng(1);
  Vector z(4);
  z << 1.5, -2.0, 0.25, 7.0;
  EXPECT_EQ(mix(f, z, 0.0, rng), z);
}

TEST(Mixing, JacobianFullColumnRank) {
  MixingFunction f = test_mixing(4, 10);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd(0.0, 1.5);
  for (int p = 0; p < 100; ++p) {
    Vector z(4);
    for (int k = 0; k < 4; ++k) z(k) = nd(rng);
    Matrix jac(10, 4);
    const double h = 1e-6;
    for (int k = 0; k < 4; ++k) {
      Vector zp = z, zm = z;
      zp(k) += h;
      zm(k) -= h;
      jac.col(k) = (f.apply(zp) - f.apply(zm)) / (2 * h);
    }
    Eigen::JacobiSVD<Matrix> svd(jac);
    const Vector s = svd.singularValues();
    ASSERT_GT(s(3), 1e-6 * s(0)) << "point " << p;
  }
}

TEST(Mixing, InjectivityProbe) {
  MixingFunction f = test_mixing(4, 10);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(0.0, 1.5);
  int checked = 0;
  while (checked < 10000) {
    Vector a(4), b(4);
    for (int k = 0; k < 4; ++k) a(k) = nd(rng), b(k) = nd(rng);
    if ((a - b).norm() < 0.1) continue;
    ASSERT_GE((f.apply(a) - f.apply(b)).norm(), 1e-4);
    ++checked;
  }
}

TEST(Mixing, NoiseIsIsotropicWithConfiguredSigma) {
  MixingFunction f = test_mixing(2, 5);
  std::mt19937_64 rng(4);
  Vector z = Vector::Zero(2);
  const Vector clean = f.apply(z);
  double ss = 0.0;
  const int draws = 20000;
  for (int k = 0; k < draws; ++k) ss += (mix(f, z, 0.1, rng) - clean).squaredNorm();
  EXPECT_NEAR(ss / (5.0 * draws), 0.01, 0.0005);
}

TEST(Mixing, RejectsBadShapes) {
  EXPECT_THROW(test_mixing(4, 3), ContractError);
  MixingFunction f = test_mixing(4, 10);
  EXPECT_THROW(f.apply(Vector::Zero(3)), ShapeError);
}

TEST(Mixing, JsonRebuildsSameMap) {
  Vector shift(3), scale(3);
  shift << 1, 2, 3;
  scale << 0.5, 2, 4;
  MixingFunction f = MixingFunction::random(3, 6, 1234, shift, scale);
  MixingFunction g = MixingFunction::from_json(f.to_json());
  Vector z(3);
  z << 0.1, 2.2, -3.0;
  EXPECT_EQ(f.apply(z), g.apply(z));
}

DataConfig small_config(const std::string& gen) {
  DataConfig c;
  c.generator = gen;
  c.count = 300;
  c.seed = 5;
  return c;
}

TEST(Dataset, StandardizationInvertible) {
  Dataset ds = make_dataset(small_config("pendulum"));
  EXPECT_NEAR(ds.u.colwise().mean().cwiseAbs().maxCoeff(), 0.0, 1e-10);
  Matrix back = ds.unstandardize(ds.u);
  EXPECT_LT((back - ds.z).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_EQ(ds.standardize(ds.z), ds.u);
}

TEST(Dataset, ObservationsAreMixedFactorsPlusNoise) {
  DataConfig c = small_config("flow");
  c.noise_sigma = 0.0;
  Dataset ds = make_dataset(c);
  EXPECT_EQ(ds.x, ds.mixing.apply_rows(ds.z));
  c.noise_sigma = 0.01;
  Dataset noisy = make_dataset(c);
  const double rms = std::sqrt((noisy.x - ds.x).squaredNorm() / noisy.x.size());
  EXPECT_NEAR(rms, 0.01, 0.001);
}

TEST(Dataset, IdentityMixingNeedsMatchingDimension) {
  DataConfig c = small_config("pendulum");
  c.mixing = "identity";
  EXPECT_THROW(make_dataset(c), ConfigError);
  c.obs_dim = 4;
  c.noise_sigma = 0.0;
  Dataset ds = make_dataset(c);
  EXPECT_EQ(ds.x, ds.z);
}

TEST(Dataset, CsvRoundTripBitwise) {
  for (const char* gen : {"pendulum", "causalcircuit", "flow"}) {
    Dataset ds = make_dataset(small_config(gen));
    std::stringstream ss;
    write_dataset(ss, ds, {{"note", "x"}});
    Dataset back = read_dataset(ss);
    EXPECT_EQ(back.x, ds.x) << gen;
    EXPECT_EQ(back.u, ds.u) << gen;
    EXPECT_EQ(back.z, ds.z) << gen;
    EXPECT_EQ(back.u_mean, ds.u_mean) << gen;
    EXPECT_EQ(back.u_std, ds.u_std) << gen;
    EXPECT_EQ(back.config.to_json(), ds.config.to_json()) << gen;
    Vector z = ds.z.row(0).transpose();
    EXPECT_EQ(back.mixing.apply(z), ds.mixing.apply(z)) << gen;
  }
}

TEST(Dataset, FormatDoubleRoundTrips) {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23}) {
    EXPECT_EQ(std::stod(format_double(v)), v);
  }
}

TEST(Dataset, MalformedInputRejected) {
  std::stringstream a("no header\n");
  EXPECT_THROW(read_dataset(a), ConfigError);
  Dataset ds = make_dataset(small_config("pendulum"));
  std::stringstream ss;
  write_dataset(ss, ds);
  std::string text = ss.str();
  text += "1,2,3\n";
  std::stringstream bad(text);
  EXPECT_THROW(read_dataset(bad), ConfigError);
}

TEST(DataConfig, UnknownFieldsAndValues) {
  EXPECT_THROW(DataConfig::from_json({{"genrator", "flow"}}), ConfigError);
  EXPECT_THROW(DataConfig::from_json({{"generator", "dsprites"}}), ConfigError);
  EXPECT_THROW(DataConfig::from_json({{"generator", "pendulum"}, {"flow", nlohmann::json::object()}}),
               ConfigError);
  DataConfig c = small_config("flow");
  EXPECT_EQ(DataConfig::from_json(c.to_json()).to_json(), c.to_json());
}

}  // namespace
}  // namespace icm
