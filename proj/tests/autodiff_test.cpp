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


#include "icm/autodiff.hpp"

#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <string>

#include <gtest/gtest.h>

#include "icm/errors.hpp"
#include "icm/grad_check.hpp"
#include "icm/mlp.hpp"

namespace icm {
namespace {

using ad::Tape;
using ad::Var;

Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c,
                     double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (Eigen::Index j = 0; j < c; ++j) {
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = u(rng);
  }
  return m;
}

TEST(Autodiff, DotPlusBias) {
  Tape t;
  Var x = t.constant(Matrix{{1.0, 2.0}});
  Var w = t.leaf(Matrix{{3.0}, {4.0}});
  Var b = t.leaf(Matrix::Constant(1, 1, 1.0));
  Var y = ad::matmul(x, w) + b;
  EXPECT_DOUBLE_EQ(y.scalar(), 12.0);
  t.backward(y);
  EXPECT_DOUBLE_EQ(t.grad(w)(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(t.grad(w)(1, 0), 2.0);
  EXPECT_DOUBLE_EQ(t.grad(b)(0, 0), 1.0);
}

TEST(Autodiff, ExpAtZero) {
  Tape t;
  Var x = t.leaf(Matrix::Zero(1, 1));
  Var y = ad::exp(x);
  EXPECT_DOUBLE_EQ(y.scalar(), 1.0);
  t.backward(y);
  EXPECT_DOUBLE_EQ(t.grad(x)(0, 0), 1.0);
}

TEST(Autodiff, StandardNormalLogDensityAtZero) {
  Tape t;
  Var y = ad::std_normal_logpdf(t.constant(Matrix::Zero(1, 1)));
  EXPECT_NEAR(y.scalar(), -0.5 * std::log(2.0 * std::numbers::pi), 1e-15);
  EXPECT_NEAR(y.scalar(), -0.9189, 1e-4);
}

TEST(Autodiff, ProductGradient) {
  Tape t;
  Var w = t.leaf(Matrix::Constant(1, 1, 0.7));
  Var y = w * t.constant(3.0);
  t.backward(y);
  EXPECT_DOUBLE_EQ(t.grad(w)(0, 0), 3.0);
}

TEST(Autodiff, SumOfSquaresGradientIsTwiceInput) {
  Tape t;
  Matrix v{{1.5, -2.0, 0.25, 4.0, -0.5}};
  Var x = t.leaf(v);
  t.backward(ad::sum(ad::square(x)));
  for (Eigen::Index i = 0; i < v.cols(); ++i) {
    EXPECT_DOUBLE_EQ(t.grad(x)(0, i), 2.0 * v(0, i));
  }
}

TEST(Autodiff, ShapeMismatchNamesBothOperands) {
  Tape t;
  Var a = t.constant(Matrix::Zero(2, 3));
  Var b = t.constant(Matrix::Zero(3, 2));
  try {
    ad::add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("3x2"), std::string::npos) << msg;
  }
  EXPECT_THROW(ad::matmul(a, a), ShapeError);
}

TEST(Autodiff, NonScalarRootIsContractError) {
  Tape t;
  Var a = t.leaf(Matrix::Zero(2, 2));
  EXPECT_THROW(t.backward(a), ContractError);
}

TEST(Autodiff, UnreachableParamsGetZeroGradient) {
  ParamStore store;
  store.add("used", 1, 2);
  store.add("unused", 3, 1);
  store.values().setConstant(0.5);
  Tape t;
  Var u = t.param(store, "used");
  t.backward(ad::sum(ad::square(u)));
  Vector g = t.param_gradient(store);
  EXPECT_DOUBLE_EQ(g(0), 1.0);
  EXPECT_DOUBLE_EQ(g(1), 1.0);
  EXPECT_EQ(g.tail(3), Vector::Zero(3));
}

TEST(Autodiff, ClipHasZeroGradientOutsideBounds) {
  Tape t;
  Var x = t.leaf(Matrix{{-2.0, 0.5, 3.0}});
  t.backward(ad::sum(ad::clip(x, -1.0, 1.0)));
  EXPECT_EQ(t.grad(x)(0, 0), 0.0);
  EXPECT_EQ(t.grad(x)(0, 1), 1.0);
  EXPECT_EQ(t.grad(x)(0, 2), 0.0);
}

TEST(Autodiff, SoftplusIsStableForLargeInputs) {
  Tape t;
  Var x = t.leaf(Matrix{{-800.0, 800.0}});
  Var y = ad::softplus(x);
  EXPECT_EQ(y.value()(0, 0), 0.0);
  EXPECT_EQ(y.value()(0, 1), 800.0);
  t.backward(ad::sum(y));
  EXPECT_TRUE(t.grad(x).allFinite());
}

// Central finite differences of sum(w .* f(x)) with respect to x, compared
// to the tape gradient; w makes every output coordinate matter.
struct UnaryCase {
  const char* name;
  std::function<Var(Var)> op;
  double lo;
  double hi;
};

double rel_err(double a, double b) {
  const double den = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / den;
}

TEST(Autodiff, PrimitiveDerivativesMatchFiniteDifferences) {
  std::mt19937_64 rng(7);
  const std::vector<UnaryCase> unary = {
      {"exp", [](Var a) { return ad::exp(a); }, -2.0, 2.0},
      {"log", [](Var a) { return ad::log(a); }, 0.2, 3.0},
      {"tanh", [](Var a) { return ad::tanh(a); }, -2.0, 2.0},
      {"softplus", [](Var a) { return ad::softplus(a); }, -3.0, 3.0},
      {"square", [](Var a) { return ad::square(a); }, -2.0, 2.0},
      {"relu+", [](Var a) { return ad::relu(a); }, 0.1, 2.0},
      {"relu-", [](Var a) { return ad::relu(a); }, -2.0, -0.1},
      {"clip", [](Var a) { return ad::clip(a, -0.5, 0.5); }, -0.45, 0.45},
      {"clip-out", [](Var a) { return ad::clip(a, -0.5, 0.5); }, 0.6, 2.0},
      {"row_sum", [](Var a) { return ad::row_sum(ad::square(a)); }, -1.0, 1.0},
      {"slice", [](Var a) { return ad::slice_cols(a, 1, 2); }, -1.0, 1.0},
      {"bcast", [](Var a) { return ad::broadcast_cols(ad::slice_cols(a, 0, 1), 4); },
       -1.0, 1.0},
  };
  const double h = 1e-6;
  for (const auto& c : unary) {
    for (int trial = 0; trial < 100; ++trial) {
      Matrix x0 = random_matrix(rng, 2, 3, c.lo, c.hi);
      Matrix w;
      auto f = [&](const Matrix& x) {
        Tape t;
        Var y = c.op(t.constant(x));
        if (w.size() == 0) w = random_matrix(rng, y.rows(), y.cols(), 0.5, 1.5);
        return (y.value().array() * w.array()).sum();
      };
      f(x0);
      Tape t;
      Var x = t.leaf(x0);
      Var y = c.op(x);
      t.backward(ad::sum(y * t.constant(w)));
      for (Eigen::Index k = 0; k < x0.size(); ++k) {
        Matrix xp = x0, xm = x0;
        xp(k) += h;
        xm(k) -= h;
        const double num = (f(xp) - f(xm)) / (2 * h);
        ASSERT_LE(rel_err(t.grad(x)(k), num), 1e-6)
            << c.name << " trial " << trial << " coord " << k;
      }
    }
  }
}

TEST(Autodiff, BinaryPrimitiveDerivativesMatchFiniteDifferences) {
  std::mt19937_64 rng(11);
  using Bin = std::function<Var(Var, Var)>;
  struct Case {
    const char* name;
    Bin op;
    Eigen::Index br;
    Eigen::Index bc;
    double blo = -1.0;
    double bhi = 1.0;
  };
  const std::vector<Case> cases = {
      {"add", [](Var a, Var b) { return a + b; }, 3, 4},
      {"sub", [](Var a, Var b) { return a - b; }, 3, 4},
      {"mul", [](Var a, Var b) { return a * b; }, 3, 4},
      {"div", [](Var a, Var b) { return a / b; }, 3, 4, 0.5, 2.0},
      {"matmul", [](Var a, Var b) { return ad::matmul(a, b); }, 4, 2},
      {"add_row", [](Var a, Var b) { return ad::add_row(a, b); }, 1, 4},
      {"concat", [](Var a, Var b) {
         const Var parts[] = {a, b, a};
         return ad::concat_cols(parts);
       }, 3, 2},
  };
  const double h = 1e-6;
  for (const auto& c : cases) {
    for (int trial = 0; trial < 100; ++trial) {
      Matrix a0 = random_matrix(rng, 3, 4);
      Matrix b0 = random_matrix(rng, c.br, c.bc, c.blo, c.bhi);
      Matrix w;
      auto f = [&](const Matrix& a, const Matrix& b) {
        Tape t;
        Var y = c.op(t.constant(a), t.constant(b));
        return (y.value().array() * w.array()).sum();
      };
      Tape t;
      Var a = t.leaf(a0);
      Var b = t.leaf(b0);
      Var y = c.op(a, b);
      w = random_matrix(rng, y.rows(), y.cols(), 0.5, 1.5);
      t.backward(ad::sum(y * t.constant(w)));
      for (int which = 0; which < 2; ++which) {
        const Matrix& base = which == 0 ? a0 : b0;
        for (Eigen::Index k = 0; k < base.size(); ++k) {
          Matrix ap = a0, am = a0, bp = b0, bm = b0;
          (which == 0 ? ap : bp)(k) += h;
          (which == 0 ? am : bm)(k) -= h;
          const double num = (f(ap, bp) - f(am, bm)) / (2 * h);
          const double ana = t.grad(which == 0 ? a : b)(k);
          ASSERT_LE(rel_err(ana, num), 1e-6)
              << c.name << " operand " << which << " coord " << k;
        }
      }
    }
  }
}

// A random 2-layer MLP with a squared loss; tanh keeps it smooth.
LossBuilder mlp_loss(const MlpShape& shape, const Matrix& x, const Matrix& y) {
  return [=](Tape& t, const ParamStore& s) {
    Var out = mlp_forward(t, s, "net", shape, t.constant(x));
    return ad::sum(ad::square(out - t.constant(y)));
  };
}

TEST(Autodiff, MlpGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  for (Activation act : {Activation::kTanh, Activation::kSoftplus, Activation::kRelu}) {
    MlpShape shape{3, 8, 2, 2, act};
    ParamStore store;
    register_mlp(store, "net", shape);
    init_mlp(store, "net", shape, rng, false);
    for (Eigen::Index i = 0; i < store.values().size(); ++i) {
      if (store.values()(i) == 0.0) store.values()(i) = 0.1;  // biases
    }
    Matrix x = random_matrix(rng, 5, 3);
    Matrix y = random_matrix(rng, 5, 2);
    GradCheckReport r = grad_check(mlp_loss(shape, x, y), store, {});
    EXPECT_TRUE(r.passed()) << activation_name(act) << " max rel "
                            << r.max_rel_error << " at " << r.worst_index;
    EXPECT_LE(r.max_rel_error, 1e-4);
  }
}

TEST(GradCheck, QuadraticIsExactUpToRoundoff) {
  ParamStore store;
  store.add("w", 4, 1);
  store.values() << 0.3, -1.2, 2.5, 0.7;
  auto build = [](Tape& t, const ParamStore& s) {
    Var w = t.param(s, "w");
    return ad::sum(ad::square(w - t.constant(Matrix::Constant(4, 1, 0.5)))) +
           3.0 * ad::sum(w);
  };
  GradCheckReport r = grad_check(build, store, {.step = 1e-3});
  EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(GradCheck, ConstantLossHasExactlyZeroGradient) {
  ParamStore store;
  store.add("w", 2, 3);
  store.values().setConstant(1.25);
  auto build = [](Tape& t, const ParamStore& s) {
    t.param(s, "w");
    return t.constant(4.0);
  };
  GradCheckReport r = grad_check(build, store, {});
  EXPECT_EQ(r.analytic, Vector::Zero(6));
  EXPECT_TRUE(r.passed());
}

TEST(GradCheck, NonPositiveStepIsContractError) {
  ParamStore store;
  store.add("w", 1, 1);
  auto build = [](Tape& t, const ParamStore& s) { return ad::sum(t.param(s, "w")); };
  EXPECT_THROW(grad_check(build, store, {.step = 0.0}), ContractError);
}

TEST(GradCheck, NonFiniteLossIsReportedPerCoordinate) {
  ParamStore store;
  store.add("w", 2, 1);
  store.values() << 0.0, 1.0;
  // log(w) is -inf at w - step < 0 for the first coordinate only.
  auto build = [](Tape& t, const ParamStore& s) {
    return ad::sum(ad::log(ad::add_scalar(t.param(s, "w"), 5e-6)));
  };
  GradCheckReport r = grad_check(build, store, {});
  ASSERT_EQ(r.non_finite.size(), 1u);
  EXPECT_EQ(r.non_finite[0], 0u);
}

TEST(Autodiff, BackwardIsBitwiseDeterministic) {
  std::mt19937_64 rng(5);
  MlpShape shape{4, 16, 2, 3, Activation::kRelu};
  ParamStore store;
  register_mlp(store, "net", shape);
  init_mlp(store, "net", shape, rng, false);
  Matrix x = random_matrix(rng, 32, 4);
  Matrix y = random_matrix(rng, 32, 3);
  auto build = mlp_loss(shape, x, y);
  auto [v1, g1] = value_and_gradient(build, store);
  auto [v2, g2] = value_and_gradient(build, store);
  EXPECT_EQ(v1, v2);
  for (Eigen::Index i = 0; i < g1.size(); ++i) ASSERT_EQ(g1(i), g2(i));
}

TEST(Autodiff, GradientOfSumIsSumOfGradients) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    ParamStore store;
    store.add("a", 3, 3);
    store.add("b", 3, 1);
    std::normal_distribution<double> n(0.0, 1.0);
    for (Eigen::Index i = 0; i < store.values().size(); ++i) store.values()(i) = n(rng);
    Matrix x = random_matrix(rng, 4, 3);
    auto f1 = [&](Tape& t, const ParamStore& s) {
      return ad::sum(ad::tanh(ad::matmul(t.constant(x), t.param(s, "a"))));
    };
    auto f2 = [&](Tape& t, const ParamStore& s) {
      return ad::sum(ad::square(ad::matmul(t.constant(x), t.param(s, "b"))));
    };
    auto both = [&](Tape& t, const ParamStore& s) { return f1(t, s) + f2(t, s); };
    Vector g1 = value_and_gradient(f1, store).second;
    Vector g2 = value_and_gradient(f2, store).second;
    Vector g = value_and_gradient(both, store).second;
    EXPECT_LE((g - (g1 + g2)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

}  // namespace
}  // namespace icm
