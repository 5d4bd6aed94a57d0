#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ifdenoise/model.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace ifdenoise {
namespace {

using oracle_ref::relative_error;
using testing::clean_synthetic;
using testing::make_example;
using testing::random_params;
using testing::random_vector;

const double kLn2 = std::log(2.0);

Example random_example(std::mt19937_64& rng, Eigen::Index dim) {
  return make_example("r", random_vector(dim, rng, 1.5), static_cast<int>(rng() % 2));
}

TEST(Loss, SymmetricWeightsGiveLn2) {
  std::mt19937_64 rng(1);
  ModelParams p(Backend::Linear, 4);
  p.flat().segment(0, 5) = random_vector(5, rng);
  p.flat().segment(5, 5) = p.flat().segment(0, 5);
  for (int label : {0, 1}) {
    EXPECT_NEAR(loss(p, make_example("a", random_vector(4, rng), label)), kLn2, 1e-15);
  }
}

TEST(Loss, ZeroLogitDifferenceGivesLn2) {
  ModelParams p(Backend::Linear, 2);
  // w1 - w0 orthogonal to h = [1, -1, 1]
  p.flat() << 0, 0, 0, 1, 2, 1;
  EXPECT_NEAR(loss(p, make_example("a", Eigen::Vector2d(1, -1), 1)), kLn2, 1e-15);
}

TEST(Loss, MatchesFirstPrinciplesRecomputation) {
  std::mt19937_64 rng(2);
  for (Backend b : {Backend::Linear, Backend::Mlp1}) {
    for (int t = 0; t < 100; ++t) {
      ModelParams p = random_params(b, 6, 5, rng);
      Example z = random_example(rng, 6);
      const double ref = oracle_ref::loss_reference(p, z);
      EXPECT_NEAR(loss(p, z), ref, 1e-12 * std::max(1.0, ref));
      EXPECT_GT(loss(p, z), 0.0);
    }
  }
}

TEST(Loss, DimensionMismatch) {
  ModelParams p(Backend::Linear, 3);
  EXPECT_THROW(loss(p, make_example("a", Eigen::Vector2d(1, 2), 1)), DimensionError);
  EXPECT_THROW(grad(p, make_example("a", Eigen::Vector2d(1, 2), 1)), DimensionError);
  EXPECT_THROW(predict_proba(p, Eigen::Vector2d(1, 2)), DimensionError);
}

TEST(Grad, LinearClosedForm) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 20; ++t) {
    ModelParams p = random_params(Backend::Linear, 5, 0, rng);
    Example z = random_example(rng, 5);
    const Eigen::VectorXd g = grad(p, z);
    const auto [p0, p1] = predict_proba(p, z.features);
    Eigen::VectorXd h(6);
    h << z.features, 1.0;
    const double py = z.label == 1 ? p1 : p0;
    const Eigen::Index off = z.label == 1 ? 6 : 0;
    // py - 1 cancels when py is near 1, hence the looser bound.
    EXPECT_LT(relative_error(g.segment(off, 6), (py - 1.0) * h), 1e-9);
  }
}

TEST(Grad, PropertyMatchesCentralDifferences) {
  std::mt19937_64 rng(4);
  for (Backend b : {Backend::Linear, Backend::Mlp1}) {
    for (int t = 0; t < 100; ++t) {
      ModelParams p = random_params(b, 10, 6, rng, 0.3);
      Example z = random_example(rng, 10);
      const double err = relative_error(oracle_ref::fd_gradient(p, z, 1e-5), grad(p, z));
      EXPECT_LE(err, 1e-6) << to_string(b) << " trial " << t;
    }
  }
}

TEST(Grad, PureInExample) {
  std::mt19937_64 rng(5);
  ModelParams p = random_params(Backend::Mlp1, 4, 3, rng);
  Example z = random_example(rng, 4);
  Example copy = z;
  copy.id = "copy";
  EXPECT_EQ(grad(p, z), grad(p, copy));
}

TEST(Hvp, ZeroVector) {
  Dataset train = clean_synthetic(40, 1);
  std::mt19937_64 rng(6);
  ModelParams p = random_params(Backend::Linear, 10, 0, rng, 0.2);
  EXPECT_EQ(hvp(p, train, Eigen::VectorXd::Zero(p.size()), 0.01).norm(), 0.0);
}

TEST(Hvp, MatchesFiniteDifferenceOfGradient) {
  std::mt19937_64 rng(7);
  Dataset train = clean_synthetic(60, 2);
  for (Backend b : {Backend::Linear, Backend::Mlp1}) {
    for (int t = 0; t < 20; ++t) {
      ModelParams p = random_params(b, 10, 6, rng, 0.3);
      Eigen::VectorXd v = random_vector(p.size(), rng);
      const double err =
          relative_error(hvp(p, train, v, 0.01), oracle_ref::fd_hvp(p, train, v, 0.01, 1e-4));
      EXPECT_LE(err, 1e-4) << to_string(b);
    }
  }
}

TEST(Hvp, LinearMatchesDenseHessian) {
  std::mt19937_64 rng(8);
  Dataset train = clean_synthetic(80, 3);
  for (int t = 0; t < 10; ++t) {
    ModelParams p = random_params(Backend::Linear, 10, 0, rng, 0.3);
    Eigen::VectorXd v = random_vector(p.size(), rng);
    const Eigen::MatrixXd H = oracle_ref::dense_damped_hessian_linear(p, train, 0.05);
    EXPECT_LE(relative_error(hvp(p, train, v, 0.05), H * v), 1e-10);
  }
}

TEST(Hvp, PropertyDampedHessianIsPositiveDefinite) {
  std::mt19937_64 rng(9);
  Dataset train = clean_synthetic(50, 4);
  for (int t = 0; t < 50; ++t) {
    ModelParams p = random_params(Backend::Linear, 10, 0, rng, 0.5);
    Eigen::VectorXd v = random_vector(p.size(), rng);
    const double lambda = 0.01;
    EXPECT_GE(v.dot(hvp(p, train, v, lambda)), lambda * v.squaredNorm() * (1.0 - 1e-12));
  }
}

TEST(Hvp, DimensionMismatch) {
  Dataset train = clean_synthetic(10, 1);
  ModelParams p(Backend::Linear, 10);
  EXPECT_THROW(hvp(p, train, Eigen::VectorXd::Zero(3), 0.01), DimensionError);
}

TEST(PredictProba, SymmetricAndExtremeLogits) {
  ModelParams p(Backend::Linear, 1);
  auto [a0, a1] = predict_proba(p, Eigen::VectorXd::Constant(1, 3.0));
  EXPECT_DOUBLE_EQ(a0, 0.5);
  EXPECT_DOUBLE_EQ(a1, 0.5);

  p.flat() << 0, 0, 20, 0;  // logit difference +20 at x = 1
  EXPECT_GT(predict_proba(p, Eigen::VectorXd::Ones(1)).second, 0.999999);

  for (double big : {1e4, -1e4}) {
    p.flat() << 0, 0, big, 0;
    auto [q0, q1] = predict_proba(p, Eigen::VectorXd::Ones(1));
    EXPECT_TRUE(std::isfinite(q0) && std::isfinite(q1));
    EXPECT_NEAR(q0 + q1, 1.0, 1e-12);
    EXPECT_TRUE(std::isfinite(loss(p, make_example("a", Eigen::VectorXd::Ones(1), 1))));
  }
}

TEST(PredictProba, PropertySumsToOne) {
  std::mt19937_64 rng(10);
  for (int t = 0; t < 500; ++t) {
    const double scale = std::pow(10.0, static_cast<double>(rng() % 6) - 1.0);
    ModelParams p = random_params(t % 2 ? Backend::Mlp1 : Backend::Linear, 3, 4, rng, scale);
    auto [q0, q1] = predict_proba(p, random_vector(3, rng, scale));
    ASSERT_NEAR(q0 + q1, 1.0, 1e-12);
  }
}

TEST(Fit, SeparableOneFeature) {
  Dataset train(1);
  train.add(make_example("n", Eigen::VectorXd::Constant(1, -2.0), 0));
  train.add(make_example("p", Eigen::VectorXd::Constant(1, 2.0), 1));
  FitResult r = fit(train, {});
  EXPECT_TRUE(r.converged);
  EXPECT_GT(predict_proba(r.params, train[0].features).first, 0.9);
  EXPECT_GT(predict_proba(r.params, train[1].features).second, 0.9);
}

TEST(Fit, SinglePositiveExample) {
  Dataset train(3);
  train.add(make_example("p", Eigen::Vector3d(0.5, 1.0, -0.2), 1));
  TrainConfig cfg;
  cfg.lambda = 0.01;
  FitResult r = fit(train, cfg);
  EXPECT_TRUE(r.single_label);
  EXPECT_GT(predict_proba(r.params, train[0].features).second, 0.9);
}

TEST(Fit, LinearReachesGradientTolerance) {
  Dataset train = clean_synthetic(300, 5);
  TrainConfig cfg;
  FitResult r = fit(train, cfg);
  ASSERT_TRUE(r.converged);
  EXPECT_LE(objective_gradient(r.params, train, cfg.lambda).norm(), cfg.grad_tol);
  EXPECT_FALSE(r.single_label);
}

TEST(Fit, LinearSeedIndependentAndIdempotent) {
  Dataset train = clean_synthetic(200, 6);
  TrainConfig a, b;
  a.seed = 1;
  b.seed = 99;
  FitResult ra = fit(train, a);
  FitResult rb = fit(train, b);
  EXPECT_NEAR(ra.objective, rb.objective, 1e-8);

  FitResult again = fit(train, a, &ra.params);
  EXPECT_NEAR(objective(again.params, train, a.lambda), objective(ra.params, train, a.lambda),
              1e-10);
}

TEST(Fit, NonConvergenceIsFlagged) {
  Dataset train = clean_synthetic(100, 7);
  TrainConfig cfg;
  cfg.max_iters = 2;
  FitResult r = fit(train, cfg);
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.iterations, 2);
  EXPECT_LT(r.objective, objective(ModelParams(Backend::Linear, 10), train, cfg.lambda));
}

TEST(Fit, RejectsEmptyTrainAndBadConfig) {
  EXPECT_THROW(fit(Dataset(2), {}), ConfigError);
  TrainConfig bad;
  bad.lambda = 0.0;
  EXPECT_THROW(fit(clean_synthetic(10, 1), bad), ConfigError);
}

TEST(Fit, Mlp1Smoke) {
  Dataset train = clean_synthetic(200, 8);
  TrainConfig cfg;
  cfg.backend = Backend::Mlp1;
  cfg.hidden_dim = 6;
  cfg.max_iters = 3000;
  cfg.seed = 3;
  FitResult r = fit(train, cfg);
  const double start = objective(detail::initial_params(train, cfg), train, cfg.lambda);
  EXPECT_LT(r.objective, 0.5 * start);
  int correct = 0;
  for (const auto& z : train) correct += (predict_proba(r.params, z.features).second > 0.5) == z.label;
  EXPECT_GT(correct, 180);
  // Same seed, same result.
  EXPECT_EQ(fit(train, cfg).params.flat(), r.params.flat());
}

TEST(FitConsistency, ZeroAlphaMatchesPlainFit) {
  Dataset train = clean_synthetic(150, 9);
  std::mt19937_64 rng(11);
  ModelParams teacher = random_params(Backend::Linear, 10, 0, rng);
  TrainConfig cfg;
  FitResult plain = fit(train, cfg);
  FitResult cons = fit_consistency(train, teacher, 0.0, cfg);
  EXPECT_NEAR(plain.objective, cons.objective, 1e-8);
  EXPECT_EQ(plain.params.flat(), cons.params.flat());
}

TEST(FitConsistency, LargeAlphaTracksTeacher) {
  Dataset train = clean_synthetic(100, 10);
  Dataset other = clean_synthetic(100, 11);
  // A teacher that disagrees with the plain fit: trained on flipped labels.
  Dataset flipped(10);
  for (auto z : other) {
    z.label = 1 - z.label;
    flipped.add(z);
  }
  TrainConfig cfg;
  ModelParams teacher = fit(flipped, cfg).params;
  cfg.max_iters = 50000;
  FitResult r = fit_consistency(train, teacher, 1e6, cfg);
  double worst = 0.0;
  for (const auto& z : train) {
    worst = std::max(worst, std::abs(predict_proba(r.params, z.features).second -
                                     predict_proba(teacher, z.features).second));
  }
  EXPECT_LE(worst, 0.01);
}

TEST(FitConsistency, UnitAlphaIsNoWorseThanPlainSolution) {
  Dataset train = clean_synthetic(120, 12);
  TrainConfig cfg;
  ModelParams teacher = fit(clean_synthetic(40, 13), cfg).params;
  FitResult plain = fit(train, cfg);
  FitResult cons = fit_consistency(train, teacher, 1.0, cfg);
  EXPECT_LE(consistency_objective(cons.params, train, teacher, 1.0, cfg.lambda),
            consistency_objective(plain.params, train, teacher, 1.0, cfg.lambda));
  EXPECT_NEAR(cons.objective, consistency_objective(cons.params, train, teacher, 1.0, cfg.lambda),
              1e-12);
}

TEST(EmaUpdate, Arithmetic) {
  ModelParams teacher(Backend::Linear, 3);
  ModelParams student(Backend::Linear, 3);
  student.flat().setOnes();
  ModelParams out = ema_update(teacher, student, 0.9);
  for (Eigen::Index i = 0; i < out.size(); ++i) EXPECT_NEAR(out.flat()[i], 0.1, 1e-15);
  EXPECT_EQ(ema_update(teacher, student, 1.0).flat(), teacher.flat());
  EXPECT_EQ(ema_update(teacher, student, 0.0).flat(), student.flat());
  EXPECT_THROW(ema_update(teacher, ModelParams(Backend::Linear, 4), 0.5), DimensionError);
}

TEST(ModelParamsJson, RoundTrip) {
  std::mt19937_64 rng(12);
  for (Backend b : {Backend::Linear, Backend::Mlp1}) {
    ModelParams p = random_params(b, 4, 3, rng);
    ModelParams back = model_params_from_json(nlohmann::json::parse(to_json(p).dump()));
    EXPECT_TRUE(back.same_shape(p));
    EXPECT_EQ(back.flat(), p.flat());
  }
  EXPECT_THROW(model_params_from_json(nlohmann::json::parse(R"({"backend":"linear"})")),
               FormatError);
}

}  // namespace
}  // namespace ifdenoise
