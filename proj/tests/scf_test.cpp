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


#include "icm/scf.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include <gtest/gtest.h>

#include "icm/errors.hpp"
#include "icm/grad_check.hpp"
#include "test_util.hpp"

namespace icm {
namespace {

struct Flow {
  StructuralCausalFlow flow;
  ParamStore store;
};

Flow make_flow(const CausalGraph& g, ScfConfig cfg, std::mt19937_64& rng,
               double scale) {
  Flow f{StructuralCausalFlow(g, cfg), {}};
  f.flow.register_params(f.store);
  if (scale > 0) {
    testing::randomize(f.store, rng, scale);
  } else {
    f.flow.init_params(f.store, rng);
  }
  return f;
}

// Central-difference Jacobian dz/deps.
Matrix numeric_jacobian(const Flow& f, const Vector& eps, double h) {
  const Eigen::Index d = eps.size();
  Matrix j(d, d);
  for (Eigen::Index c = 0; c < d; ++c) {
    Vector p = eps, m = eps;
    p(c) += h;
    m(c) -= h;
    j.col(c) = (f.flow.flow_forward(f.store, p).z - f.flow.flow_forward(f.store, m).z) /
               (2 * h);
  }
  return j;
}

Matrix numeric_inverse_jacobian(const Flow& f, const Vector& z, double h) {
  const Eigen::Index d = z.size();
  Matrix j(d, d);
  for (Eigen::Index c = 0; c < d; ++c) {
    Vector p = z, m = z;
    p(c) += h;
    m(c) -= h;
    j.col(c) = (f.flow.flow_inverse(f.store, p) - f.flow.flow_inverse(f.store, m)) /
               (2 * h);
  }
  return j;
}

TEST(Scf, ZeroHeadsGiveIdentity) {
  std::mt19937_64 rng(1);
  Flow f = make_flow(pendulum_graph(2), {}, rng, 0.0);
  Vector eps = testing::random_vector(rng, 8);
  FlowResult r = f.flow.flow_forward(f.store, eps);
  EXPECT_EQ(r.z, eps);
  EXPECT_EQ(r.log_det, 0.0);
  EXPECT_EQ(f.flow.flow_inverse(f.store, eps), eps);
}

// Chain 0 -> 1 with a1 = z0 realised exactly by a ReLU net:
// z0 = relu(relu(z0)) - relu(relu(-z0)).
Flow chain_flow() {
  const std::vector<Edge> e{{0, 1}};
  ScfConfig cfg;
  cfg.hidden = 2;
  std::mt19937_64 rng(0);
  Flow f = make_flow(CausalGraph::from_edges(2, e), cfg, rng, 0.0);
  f.store.values().setZero();
  auto w0 = f.store.view("scf/r1/1/l0/W");
  w0(0, 0) = 1.0;
  w0(0, 1) = -1.0;
  f.store.view("scf/r1/1/l1/W") = Matrix::Identity(2, 2);
  auto w2 = f.store.view("scf/r1/1/l2/W");
  w2(0, 0) = 1.0;
  w2(1, 0) = -1.0;
  return f;
}

TEST(Scf, ChainHandExample) {
  Flow f = chain_flow();
  FlowResult r = f.flow.flow_forward(f.store, Vector::Ones(2));
  EXPECT_DOUBLE_EQ(r.z(0), 1.0);
  EXPECT_DOUBLE_EQ(r.z(1), std::numbers::e);
  EXPECT_DOUBLE_EQ(r.log_det, 1.0);
  Vector z(2);
  z << 1.0, std::numbers::e;
  Vector eps = f.flow.flow_inverse(f.store, z);
  EXPECT_DOUBLE_EQ(eps(0), 1.0);
  EXPECT_NEAR(eps(1), 1.0, 1e-15);
}

TEST(Scf, LogDetMatchesNumericJacobian) {
  std::mt19937_64 rng(2);
  ScfConfig cfg;
  cfg.hidden = 16;
  for (int trial = 0; trial < 20; ++trial) {
    Flow f = make_flow(testing::random_dag(4, 2, 0.6, rng), cfg, rng, 0.4);
    Vector eps = testing::random_vector(rng, 8);
    FlowResult r = f.flow.flow_forward(f.store, eps);
    Matrix j = numeric_jacobian(f, eps, 1e-6);
    const double ref = std::log(std::abs(j.fullPivLu().determinant()));
    EXPECT_NEAR(r.log_det, ref, 1e-6) << "trial " << trial;
  }
}

TEST(Scf, JacobianIsTriangularInTopoOrder) {
  std::mt19937_64 rng(3);
  ScfConfig cfg;
  cfg.hidden = 16;
  for (int trial = 0; trial < 20; ++trial) {
    CausalGraph g = testing::random_dag(5, 2, 0.5, rng);
    Flow f = make_flow(g, cfg, rng, 0.4);
    Matrix j = numeric_jacobian(f, testing::random_vector(rng, 10), 1e-6);
    std::vector<std::size_t> pos(5);
    for (std::size_t k = 0; k < 5; ++k) pos[g.topo_order()[k]] = k;
    for (std::size_t i = 0; i < 5; ++i) {
      for (std::size_t jv = 0; jv < 5; ++jv) {
        if (pos[jv] <= pos[i]) continue;
        EXPECT_EQ(j.block(2 * i, 2 * jv, 2, 2), Matrix::Zero(2, 2));
      }
    }
  }
}

TEST(Scf, InverseRoundTrip) {
  std::mt19937_64 rng(4);
  ScfConfig cfg;
  cfg.hidden = 32;
  Flow f = make_flow(pendulum_graph(2), cfg, rng, 0.3);
  Matrix eps = testing::random_gaussian(rng, 1000, 8);
  Matrix z = f.flow.flow_forward_batch(f.store, eps);
  Matrix back = f.flow.flow_inverse_batch(f.store, z);
  EXPECT_LT((back - eps).cwiseAbs().maxCoeff(), 1e-9);
  Matrix again = f.flow.flow_forward_batch(f.store, back);
  EXPECT_LT((again - z).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Scf, BatchAndSingleAgree) {
  std::mt19937_64 rng(5);
  ScfConfig cfg;
  cfg.hidden = 8;
  Flow f = make_flow(flow_graph(2), cfg, rng, 0.5);
  Matrix eps = testing::random_gaussian(rng, 7, 8);
  Vector ld;
  Matrix z = f.flow.flow_forward_batch(f.store, eps, &ld);
  for (Eigen::Index r = 0; r < 7; ++r) {
    FlowResult one = f.flow.flow_forward(f.store, eps.row(r).transpose());
    EXPECT_LT((one.z - z.row(r).transpose()).cwiseAbs().maxCoeff(), 1e-13);
    EXPECT_NEAR(one.log_det, ld(r), 1e-13);
  }
}

TEST(Scf, InverseLogDetIsNegated) {
  std::mt19937_64 rng(6);
  ScfConfig cfg;
  cfg.hidden = 16;
  for (int trial = 0; trial < 10; ++trial) {
    Flow f = make_flow(testing::random_dag(4, 2, 0.6, rng), cfg, rng, 0.4);
    FlowResult r = f.flow.flow_forward(f.store, testing::random_vector(rng, 8));
    Matrix j = numeric_inverse_jacobian(f, r.z, 1e-6);
    EXPECT_NEAR(std::log(std::abs(j.fullPivLu().determinant())), -r.log_det, 1e-6);
  }
}

TEST(Scf, SlopeIsClamped) {
  std::mt19937_64 rng(7);
  ScfConfig cfg;
  cfg.hidden = 4;
  Flow f = make_flow(CausalGraph::from_edges(1, {}), cfg, rng, 0.0);
  f.store.view("scf/r1/0/l2/b")(0, 0) = 50.0;
  FlowResult r = f.flow.flow_forward(f.store, Vector::Ones(1));
  EXPECT_DOUBLE_EQ(r.log_det, 8.0);
  EXPECT_DOUBLE_EQ(r.z(0), std::exp(8.0));
}

TEST(Scf, NonFiniteNamesTheVariable) {
  std::mt19937_64 rng(8);
  ScfConfig cfg;
  cfg.hidden = 4;
  Flow f = make_flow(pendulum_graph(1), cfg, rng, 0.0);
  f.store.view("scf/r2/2/l2/b")(0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    f.flow.flow_forward(f.store, Vector::Ones(4));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("variable 2"), std::string::npos) << e.what();
  }
}

TEST(Scf, LogDetGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  ScfConfig cfg;
  cfg.hidden = 6;
  Flow f = make_flow(pendulum_graph(2), cfg, rng, 0.5);
  Matrix eps = testing::random_gaussian(rng, 3, 8);
  auto build = [&](ad::Tape& t, const ParamStore& s) {
    auto out = f.flow.forward(t, s, t.constant(eps));
    return ad::sum(out.log_det) + 0.1 * ad::sum(ad::square(out.z));
  };
  GradCheckReport r = grad_check(build, f.store, {});
  EXPECT_TRUE(r.passed()) << "max rel " << r.max_rel_error << " at " << r.worst_index;
}

TEST(Scf, InterveneOnSinkChangesOnlySink) {
  std::mt19937_64 rng(10);
  ScfConfig cfg;
  cfg.hidden = 8;
  Flow f = make_flow(pendulum_graph(2), cfg, rng, 0.5);
  Vector z = f.flow.flow_forward(f.store, testing::random_vector(rng, 8)).z;
  Vector v(2);
  v << 3.0, -1.0;
  Vector cf = f.flow.intervene(f.store, z, 3, v);
  EXPECT_EQ(cf.head(6), z.head(6));
  EXPECT_EQ(cf.tail(2), v);
}

TEST(Scf, NullInterventionIsExact) {
  std::mt19937_64 rng(11);
  ScfConfig cfg;
  cfg.hidden = 8;
  Flow f = make_flow(pendulum_graph(2), cfg, rng, 0.5);
  Vector z = f.flow.flow_forward(f.store, testing::random_vector(rng, 8)).z;
  for (std::size_t t = 0; t < 4; ++t) {
    EXPECT_EQ(f.flow.intervene(f.store, z, t, z.segment(2 * t, 2)), z);
  }
}

TEST(Scf, PendulumInterventionOnAngle) {
  std::mt19937_64 rng(12);
  ScfConfig cfg;
  cfg.hidden = 8;
  Flow f = make_flow(pendulum_graph(2), cfg, rng, 0.5);
  Vector z = f.flow.flow_forward(f.store, testing::random_vector(rng, 8)).z;
  Vector v = z.segment(0, 2).array() + 1.0;
  Vector cf = f.flow.intervene(f.store, z, 0, v);
  EXPECT_EQ(cf.segment(2, 2), z.segment(2, 2));
  EXPECT_NE(cf.segment(0, 2), z.segment(0, 2));
  EXPECT_NE(cf.segment(4, 2), z.segment(4, 2));
  EXPECT_NE(cf.segment(6, 2), z.segment(6, 2));
}

TEST(Scf, InterventionMatchesForwardWithFixedNoise) {
  // Recomputing descendants from abducted noise equals a forward pass where
  // the target's mechanism is replaced by the constant value.
  std::mt19937_64 rng(13);
  ScfConfig cfg;
  cfg.hidden = 8;
  const std::vector<Edge> e{{0, 1}, {1, 2}};
  Flow f = make_flow(CausalGraph::from_edges(3, e), cfg, rng, 0.5);
  Vector eps = testing::random_vector(rng, 3);
  Vector z = f.flow.flow_forward(f.store, eps).z;
  Vector v = Vector::Constant(1, 0.75);
  Vector cf = f.flow.intervene(f.store, z, 1, v);
  Vector probe = z;
  probe(1) = 0.75;
  ParamStore s = f.store;
  // z2 = exp(a2(z1)) eps2 + b2(z1) evaluated through the inverse of the flow.
  Vector eps_cf = f.flow.flow_inverse(s, probe);
  EXPECT_NEAR(eps_cf(0), eps(0), 1e-12);
  Vector full = probe;
  full(2) = cf(2);
  EXPECT_NEAR(f.flow.flow_inverse(s, full)(2), eps(2), 1e-12);
}

TEST(Scf, InterventionNeverTouchesNonDescendants) {
  std::mt19937_64 rng(14);
  ScfConfig cfg;
  cfg.hidden = 8;
  for (std::size_t n = 1; n <= 5; ++n) {
    for (int seed = 0; seed < 10; ++seed) {
      CausalGraph g = testing::random_dag(n, 2, 0.5, rng);
      Flow f = make_flow(g, cfg, rng, 0.5);
      Vector z = f.flow.flow_forward(f.store, testing::random_vector(rng, 2 * n)).z;
      for (std::size_t t = 0; t < n; ++t) {
        Vector cf = f.flow.intervene(f.store, z, t, testing::random_vector(rng, 2));
        for (std::size_t i = 0; i < n; ++i) {
          if (i == t || g.is_descendant(t, i)) continue;
          EXPECT_EQ(cf.segment(2 * i, 2), z.segment(2 * i, 2));
        }
      }
    }
  }
}

TEST(Scf, InterveneRejectsBadArguments) {
  std::mt19937_64 rng(15);
  Flow f = make_flow(pendulum_graph(2), {}, rng, 0.0);
  EXPECT_THROW(f.flow.intervene(f.store, Vector::Zero(8), 4, Vector::Zero(2)),
               ContractError);
  EXPECT_THROW(f.flow.intervene(f.store, Vector::Zero(8), 0, Vector::Zero(3)),
               ShapeError);
}

}  // namespace
}  // namespace icm
