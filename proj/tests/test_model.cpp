#include "cflag/model.hpp"

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace cflag;
using testutil::finite_diff_component;
using testutil::finite_diff_grad;
using testutil::random_dataset;
using testutil::random_params;

namespace {

LossModel mse_model(int p, double l2 = 0.0) {
  return {ModelKind::LinearMse, p, 1, 0, l2};
}

LossModel logistic_model(int p, int k, double l2 = 0.0) {
  return {ModelKind::MultinomialLogistic, p, k, 0, l2};
}

LossModel mlp_model(int p, int k, int h, double l2 = 0.0) {
  return {ModelKind::MlpOneHidden, p, k, h, l2};
}

void expect_grad_matches_fd(const LossModel& m, const Vec& w, const Dataset& ds) {
  Vec g = grad(m, w, ds);
  Vec fd = finite_diff_grad(m, w, ds);
  for (std::size_t i = 0; i < g.size(); ++i) {
    double tol = 1e-5 * std::max(std::abs(fd[i]), 1e-3);
    EXPECT_NEAR(g[i], fd[i], tol) << "coordinate " << i;
  }
}

}  // namespace

TEST(LossModel, ZeroParamsZeroTargetsGiveZeroMseLoss) {
  Dataset ds(3);
  ds.append_row({1.0, -2.0, 0.5}, 0);
  ds.append_row({0.0, 4.0, 1.0}, 0);
  EXPECT_EQ(loss(mse_model(3), zeros(3), ds), 0.0);
}

TEST(LossModel, UniformSoftmaxLossIsLogK) {
  Dataset ds(2);
  ds.append_row({0.3, -1.0}, 0);
  ds.append_row({2.0, 0.7}, 1);
  EXPECT_NEAR(loss(logistic_model(2, 2), zeros(4), ds), std::log(2.0), 1e-15);
  EXPECT_NEAR(loss(logistic_model(2, 2), zeros(4), ds), 0.6931, 1e-4);
}

TEST(LossModel, ScalarMseBySubstitution) {
  Dataset ds(1);
  ds.append_row({2.0}, 1);
  EXPECT_DOUBLE_EQ(loss(mse_model(1), Vec{1.0}, ds), 0.5);
}

TEST(LossModel, L2TermAddsHalfSquaredNorm) {
  Dataset ds(1);
  ds.append_row({2.0}, 1);
  EXPECT_DOUBLE_EQ(loss(mse_model(1, 0.1), Vec{1.0}, ds), 0.5 + 0.05 * 1.0);
}

TEST(LossModel, DimensionMismatchIsConfigError) {
  Dataset ds(2);
  ds.append_row({1.0, 2.0}, 0);
  EXPECT_THROW(loss(mse_model(2), zeros(3), ds), ConfigError);
  EXPECT_THROW(grad(logistic_model(3, 2), zeros(6), ds), ConfigError);
}

TEST(Grad, VanishesAtQuadraticMinimizer) {
  Dataset ds(1);
  ds.append_row({1.0}, 2);
  ds.append_row({3.0}, 1);
  const double l2 = 0.25;
  // d/dw of (1/2n) sum (w x - y)^2 + l2/2 w^2
  double num = (1.0 * 2 + 3.0 * 1) / 2.0;
  double den = (1.0 + 9.0) / 2.0 + l2;
  Vec w{num / den};
  EXPECT_LE(norm(grad(mse_model(1, l2), w, ds)), 1e-10);
}

TEST(Grad, MatchesFiniteDifferencesOnRandomDraws) {
  Rng rng({2024, 1});
  for (int trial = 0; trial < 36; ++trial) {
    auto ds = random_dataset(rng, 4 + trial % 5, 3, 3);
    {
      LossModel m = mse_model(3, 0.05);
      expect_grad_matches_fd(m, random_params(rng, m.param_dim()), ds);
    }
    {
      LossModel m = logistic_model(3, 3, 0.01);
      expect_grad_matches_fd(m, random_params(rng, m.param_dim()), ds);
    }
    {
      LossModel m = mlp_model(3, 3, 4, 0.01);
      expect_grad_matches_fd(m, random_params(rng, m.param_dim()), ds);
    }
  }
}

TEST(Grad, IsWeightedMeanOverASplit) {
  Rng rng({7, 7});
  auto ds = random_dataset(rng, 10, 4, 2);
  LossModel m = logistic_model(4, 2, 0.02);
  Vec w = random_params(rng, m.param_dim());
  Dataset first(4), second(4);
  for (int r = 0; r < 6; ++r) first.append_row(ds.row(r), ds.labels[r]);
  for (int r = 6; r < 10; ++r) second.append_row(ds.row(r), ds.labels[r]);
  Vec g = grad(m, w, ds);
  Vec ga = grad(m, w, first);
  Vec gb = grad(m, w, second);
  for (std::size_t i = 0; i < g.size(); ++i)
    EXPECT_NEAR(g[i], 0.6 * ga[i] + 0.4 * gb[i], 1e-12);
}

TEST(GradComponent, SingletonEqualsFullGradient) {
  Rng rng({3, 1});
  auto ds = random_dataset(rng, 1, 3, 2);
  LossModel m = logistic_model(3, 2, 0.1);
  Vec w = random_params(rng, m.param_dim());
  Vec g = grad(m, w, ds);
  Vec c = grad_component(m, w, ds, 0);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], c[i], 1e-15);
}

TEST(GradComponent, MeanOverComponentsReproducesGrad) {
  Rng rng({3, 2});
  auto ds = random_dataset(rng, 7, 3, 3);
  LossModel m = mlp_model(3, 3, 2, 0.05);
  Vec w = random_params(rng, m.param_dim());
  Vec mean = zeros(w.size());
  for (int j = 0; j < ds.rows(); ++j) axpy(1.0 / ds.rows(), grad_component(m, w, ds, j), mean);
  Vec g = grad(m, w, ds);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(mean[i], g[i], 1e-12);
}

TEST(GradComponent, MatchesSingleSampleFiniteDifferences) {
  Rng rng({3, 3});
  auto ds = random_dataset(rng, 5, 2, 2);
  LossModel m = logistic_model(2, 2, 0.03);
  Vec w = random_params(rng, m.param_dim());
  for (int j = 0; j < ds.rows(); ++j) {
    Vec c = grad_component(m, w, ds, j);
    Vec fd = finite_diff_component(m, w, ds, j);
    for (std::size_t i = 0; i < c.size(); ++i)
      EXPECT_NEAR(c[i], fd[i], 1e-5 * std::max(std::abs(fd[i]), 1e-3));
  }
}

TEST(GradComponent, IndexOutOfRangeThrows) {
  Rng rng({3, 4});
  auto ds = random_dataset(rng, 4, 2, 2);
  LossModel m = logistic_model(2, 2);
  EXPECT_THROW(grad_component(m, zeros(m.param_dim()), ds, 4), DataError);
  EXPECT_THROW(grad_component(m, zeros(m.param_dim()), ds, -1), DataError);
}

TEST(Accuracy, ZeroParamsBalancedBinaryIsHalf) {
  Dataset ds(2);
  ds.append_row({1.0, 0.0}, 0);
  ds.append_row({0.0, 1.0}, 1);
  ds.append_row({-1.0, 2.0}, 0);
  ds.append_row({2.0, -1.0}, 1);
  // all logits tie; the tie-break picks class 0 everywhere
  EXPECT_DOUBLE_EQ(accuracy(logistic_model(2, 2), zeros(4), ds), 0.5);
}

TEST(Accuracy, FittedSeparatorIsPerfect) {
  Dataset ds(2);
  for (int r = 0; r < 5; ++r) {
    ds.append_row({5.0 + 0.1 * r, 1.0}, 0);
    ds.append_row({-5.0 - 0.1 * r, -1.0}, 1);
  }
  Vec w{3.0, 0.0, -3.0, 0.0};  // class 0 scores +3x0, class 1 scores -3x0
  EXPECT_DOUBLE_EQ(accuracy(logistic_model(2, 2), w, ds), 1.0);
}

TEST(Accuracy, MatchesRowByRowOracle) {
  Rng rng({5, 5});
  auto ds = random_dataset(rng, 10, 3, 4);
  LossModel m = logistic_model(3, 4);
  Vec w = random_params(rng, m.param_dim(), 1.0);
  int correct = 0;
  for (int r = 0; r < ds.rows(); ++r) {
    auto x = ds.row(r);
    int best = 0;
    double best_score = -1e300;
    for (int k = 0; k < 4; ++k) {
      double s = 0.0;
      for (int i = 0; i < 3; ++i) s += w[k * 3 + i] * x[i];
      if (s > best_score) {
        best_score = s;
        best = k;
      }
    }
    if (best == ds.labels[r]) ++correct;
  }
  EXPECT_DOUBLE_EQ(accuracy(m, w, ds), correct / 10.0);
}

TEST(Accuracy, RegressionModelRejected) {
  Dataset ds(1);
  ds.append_row({1.0}, 0);
  EXPECT_THROW(accuracy(mse_model(1), zeros(1), ds), ConfigError);
}

TEST(EstimateL, IdentityDesignGivesOneOverN) {
  const int n = 4;
  Dataset ds(n);
  for (int r = 0; r < n; ++r) {
    Vec row(n, 0.0);
    row[r] = 1.0;
    ds.append_row(row, 0);
  }
  EXPECT_NEAR(estimate_L(mse_model(n), ds), 1.0 / n, 1e-9);
}

TEST(EstimateL, SingleScalarSample) {
  Dataset ds(1);
  ds.append_row({2.0}, 0);
  EXPECT_NEAR(estimate_L(mse_model(1), ds), 4.0, 1e-9);
}

TEST(EstimateL, MatchesDenseEigensolverOracle) {
  Rng rng({6, 6});
  auto ds = random_dataset(rng, 20, 5, 2, 1.3);
  Eigen::MatrixXd x(20, 5);
  for (int r = 0; r < 20; ++r)
    for (int c = 0; c < 5; ++c) x(r, c) = ds.row(r)[c];
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(x.transpose() * x);
  double lam = eig.eigenvalues().maxCoeff();
  {
    double want = lam / 20.0 + 0.07;
    double got = estimate_L(mse_model(5, 0.07), ds);
    EXPECT_NEAR(got, want, 1e-6 * want);
  }
  {
    double want = 0.5 * lam / 20.0 + 0.07;
    double got = estimate_L(logistic_model(5, 2, 0.07), ds);
    EXPECT_NEAR(got, want, 1e-6 * want);
  }
}

TEST(EstimateL, MlpRequiresConfiguredConstant) {
  Rng rng({6, 7});
  auto ds = random_dataset(rng, 5, 2, 2);
  EXPECT_THROW(estimate_L(mlp_model(2, 2, 3), ds), ConfigError);
}

TEST(EstimateL, DescentLemmaHoldsEmpirically) {
  Rng rng({8, 8});
  for (int trial = 0; trial < 20; ++trial) {
    auto ds = random_dataset(rng, 12, 4, 2, 1.5);
    LossModel m = mse_model(4, 0.02);
    double l = estimate_L(m, ds);
    Vec w = random_params(rng, 4, 1.0);
    Vec g = grad(m, w, ds);
    double base = loss(m, w, ds);
    for (double eta : {1.0 / l, 0.5 / l}) {
      Vec stepped = w;
      axpy(-eta, g, stepped);
      double bound = base - eta * (1.0 - l * eta / 2.0) * norm_sq(g);
      EXPECT_LE(loss(m, stepped, ds), bound + 1e-12 * std::abs(bound) + 1e-15);
    }
  }
}

TEST(LossModel, LabelOutsideClassRangeRejected) {
  Dataset ds(2);
  ds.append_row({1.0, 2.0}, 5);
  LossModel m = logistic_model(2, 2);
  EXPECT_THROW(loss(m, zeros(4), ds), DataError);
}

TEST(LossModel, OverflowingLossSurfacesAsDataError) {
  Dataset ds(1);
  ds.append_row({1e200}, 3);
  LossModel m = mse_model(1);
  EXPECT_THROW(loss(m, Vec{1e200}, ds), DataError);
  EXPECT_THROW(grad(m, Vec{1e200}, ds), DataError);
}
