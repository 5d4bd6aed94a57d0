#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <random>
#include <sstream>

#include "ifdenoise/influence.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace ifdenoise {
namespace {

using oracle_ref::relative_error;
using testing::clean_synthetic;
using testing::make_example;
using testing::random_params;
using testing::random_vector;

struct Fitted {
  Dataset train;
  ModelParams params;
  TrainConfig cfg;
};

// Removal from the data term: weight zero, normalizer unchanged.
Dataset zero_weighted(const Dataset& ds, const std::string& id) {
  Dataset out(ds.feature_dim(), ds.name());
  for (Example e : ds) {
    if (e.id == id) e.weight = 0.0;
    out.add(std::move(e));
  }
  return out;
}

Fitted fitted_synthetic(std::size_t n, std::uint64_t seed) {
  Fitted f{clean_synthetic(n, seed), {}, {}};
  f.params = fit(f.train, f.cfg).params;
  return f;
}

TEST(ConjugateGradient, IdentityOperatorReturnsRhs) {
  std::mt19937_64 rng(1);
  const Eigen::VectorXd v = random_vector(17, rng);
  auto identity = [](const Eigen::VectorXd& x) { return x; };
  EXPECT_LE(relative_error(conjugate_gradient(identity, v, 1e-12, Eigen::VectorXd::Zero(17), 10), v),
            1e-15);
}

TEST(InverseHvpExact, ZeroRhs) {
  Fitted f = fitted_synthetic(60, 1);
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(f.params.size());
  EXPECT_EQ(inverse_hvp_exact(f.params, f.train, zero, 0.01).norm(), 0.0);
  EXPECT_EQ(inverse_hvp_exact(f.params, f.train, zero, 0.01, SolverKind::Dense).norm(), 0.0);
}

TEST(InverseHvpExact, ResidualBelowTolerance) {
  Fitted f = fitted_synthetic(500, 2);
  std::mt19937_64 rng(2);
  for (SolverKind kind : {SolverKind::Cg, SolverKind::Dense}) {
    for (int t = 0; t < 10; ++t) {
      const Eigen::VectorXd v = random_vector(f.params.size(), rng);
      const Eigen::VectorXd u = inverse_hvp_exact(f.params, f.train, v, f.cfg.lambda, kind);
      const double res = (hvp(f.params, f.train, u, f.cfg.lambda) - v).norm() / v.norm();
      EXPECT_LE(res, 1e-8) << to_string(kind);
    }
  }
}

TEST(InverseHvpExact, CgAndDenseAgree) {
  Fitted f = fitted_synthetic(200, 3);
  std::mt19937_64 rng(3);
  const Eigen::VectorXd v = random_vector(f.params.size(), rng);
  EXPECT_LE(relative_error(inverse_hvp_exact(f.params, f.train, v, 0.01, SolverKind::Cg),
                           inverse_hvp_exact(f.params, f.train, v, 0.01, SolverKind::Dense)),
            1e-7);
}

TEST(InverseHvpExact, DetectsIndefiniteHessian) {
  // An unconverged MLP1 point with almost no damping has negative curvature
  // along some direction; aim the right-hand side at it.
  Dataset train = clean_synthetic(40, 4, 3);
  std::mt19937_64 rng(4);
  const double lambda = 1e-9;
  for (int attempt = 0; attempt < 50; ++attempt) {
    ModelParams p = random_params(Backend::Mlp1, 3, 4, rng, 2.0);
    const Eigen::Index n = p.size();
    Eigen::MatrixXd A(n, n);
    for (Eigen::Index i = 0; i < n; ++i) A.col(i) = hvp(p, train, Eigen::VectorXd::Unit(n, i), lambda);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (A + A.transpose()));
    if (eig.eigenvalues()[0] > -1e-3) continue;
    const Eigen::VectorXd v = eig.eigenvectors().col(0);
    EXPECT_THROW(inverse_hvp_exact(p, train, v, lambda, SolverKind::Dense), IndefiniteHessianError);
    EXPECT_THROW(inverse_hvp_exact(p, train, v, lambda, SolverKind::Cg), IndefiniteHessianError);
    return;
  }
  FAIL() << "no indefinite point found";
}

TEST(InverseHvpLissa, OneStepUnrolling) {
  Fitted f = fitted_synthetic(30, 5);
  std::mt19937_64 rng(5);
  const Eigen::VectorXd v = random_vector(f.params.size(), rng);
  LissaConfig cfg;
  cfg.depth = 1;
  cfg.repeats = 3;
  cfg.batch_size = 30;  // full set: deterministic
  cfg.scale = 7.0;
  const Eigen::VectorXd expected =
      (v + v - hvp(f.params, f.train, v, f.cfg.lambda) / cfg.scale) / cfg.scale;
  EXPECT_LE(relative_error(inverse_hvp_lissa(f.params, f.train, v, f.cfg.lambda, cfg), expected),
            1e-14);
}

TEST(InverseHvpLissa, AgreesWithExactSolver) {
  Fitted f = fitted_synthetic(500, 6);
  std::mt19937_64 rng(6);
  for (int t = 0; t < 5; ++t) {
    const Eigen::VectorXd v = grad(f.params, f.train[rng() % f.train.size()]);
    LissaConfig cfg;  // depth 1000, repeats 4
    cfg.seed = static_cast<std::uint64_t>(t);
    const Eigen::VectorXd exact = inverse_hvp_exact(f.params, f.train, v, f.cfg.lambda);
    EXPECT_LE(relative_error(inverse_hvp_lissa(f.params, f.train, v, f.cfg.lambda, cfg), exact),
              0.05);
  }
}

TEST(InverseHvpLissa, ZeroRhsDeterminismAndDivergence) {
  Fitted f = fitted_synthetic(100, 7);
  LissaConfig cfg;
  cfg.depth = 50;
  EXPECT_EQ(inverse_hvp_lissa(f.params, f.train, Eigen::VectorXd::Zero(f.params.size()), 0.01, cfg)
                .norm(),
            0.0);
  const Eigen::VectorXd v = grad(f.params, f.train[0]);
  EXPECT_EQ(inverse_hvp_lissa(f.params, f.train, v, 0.01, cfg),
            inverse_hvp_lissa(f.params, f.train, v, 0.01, cfg));

  cfg.scale = 0.01;  // far below the spectrum: the recursion blows up
  cfg.depth = 1000;
  EXPECT_THROW(inverse_hvp_lissa(f.params, f.train, v, 0.01, cfg), SolverError);
}

TEST(InverseHvpLissa, PropertyMarginalScoresTrackExactSolver) {
  Fitted f = fitted_synthetic(200, 17);
  SyntheticSpec spec;
  spec.n_pos = 250;
  spec.n_neg = 250;
  spec.noise_ratio = 0.3;
  spec.seed = 117;
  Dataset dirty = generate_synthetic(spec);
  SolverConfig lissa;
  lissa.kind = SolverKind::Lissa;
  InfluenceContext exact_ctx(f.params, f.train, f.cfg.lambda);
  InfluenceContext lissa_ctx(f.params, f.train, f.cfg.lambda, lissa);
  PooledScorer exact(exact_ctx, f.train, 200), approx(lissa_ctx, f.train, 200);
  std::vector<double> a, b;
  for (const auto& z : dirty) {
    a.push_back(exact.score(z));
    b.push_back(approx.score(z));
  }
  EXPECT_GE(oracle_ref::pearson(a, b), 0.99);
}

TEST(SupportScore, PropertySelfSupportNonNegative) {
  Fitted f = fitted_synthetic(120, 8);
  InfluenceContext ctx(f.params, f.train, f.cfg.lambda);
  for (const auto& z : f.train) EXPECT_GE(support_score(ctx, ctx.n(), z, z), 0.0);
  // Off-distribution probes too.
  std::mt19937_64 rng(8);
  for (int t = 0; t < 50; ++t) {
    Example z = make_example("q", random_vector(10, rng, 4.0), static_cast<int>(rng() % 2));
    EXPECT_GE(support_score(ctx, ctx.n(), z, z), 0.0);
  }
}

TEST(SupportScore, ZeroGradientTrainingPoint) {
  Dataset train = clean_synthetic(50, 9, 2);
  ModelParams p(Backend::Linear, 2);
  p.flat() << 0, 0, 0, 1000, 1000, 0;  // logit difference 1000 (x1 + x2)
  Example saturated = make_example("s", Eigen::Vector2d(10, 10), 1);
  ASSERT_EQ(grad(p, saturated).norm(), 0.0);
  InfluenceContext ctx(p, train, 0.01);
  for (const auto& z : train) EXPECT_EQ(support_score(ctx, 50, saturated, z), 0.0);
}

TEST(SupportScore, PropertyDoublingNHalvesScore) {
  Fitted f = fitted_synthetic(100, 10);
  InfluenceContext ctx(f.params, f.train, f.cfg.lambda);
  for (std::size_t i = 0; i + 1 < 20; i += 2) {
    const double s1 = support_score(ctx, 100, f.train[i], f.train[i + 1]);
    const double s2 = support_score(ctx, 200, f.train[i], f.train[i + 1]);
    EXPECT_DOUBLE_EQ(s2, 0.5 * s1);
  }
}

TEST(MarginalScoreTest, SingleCleanInstanceEqualsPairScore) {
  Fitted f = fitted_synthetic(100, 11);
  InfluenceContext ctx(f.params, f.train, f.cfg.lambda);
  Dataset clean(10);
  clean.add(f.train[3]);
  const double m = marginal_score_test(ctx, f.train[7], clean, 100);
  EXPECT_EQ(m, support_score(ctx, 100, f.train[7], f.train[3]));
  EXPECT_THROW(marginal_score_test(ctx, f.train[7], Dataset(10), 100), ConfigError);
}

TEST(MarginalScores, PropertyPooledEqualsAveragedPairs) {
  Fitted f = fitted_synthetic(150, 12);
  InfluenceContext ctx(f.params, f.train, f.cfg.lambda);
  Dataset clean = clean_synthetic(12, 112);
  PooledScorer pooled(ctx, clean, ctx.n());
  for (std::size_t d = 0; d < 15; ++d) {
    const Example& zd = f.train[d * 7];
    double test_slot = 0.0, train_slot = 0.0;
    for (const auto& zc : clean) {
      test_slot += support_score(ctx, ctx.n(), zd, zc);
      train_slot += support_score(ctx, ctx.n(), zc, zd);
    }
    test_slot /= static_cast<double>(clean.size());
    train_slot /= static_cast<double>(clean.size());
    EXPECT_NEAR(marginal_score_test(ctx, zd, clean, ctx.n()), test_slot, 1e-10);
    EXPECT_NEAR(marginal_score_train(ctx, clean, zd, ctx.n()), train_slot, 1e-10);
    EXPECT_NEAR(pooled.score(zd), train_slot, 1e-10);
    EXPECT_NEAR(pooled.score(zd), test_slot, 1e-10);
  }
}

TEST(MarginalScoreTrain, SelfSupportOfSingleton) {
  Dataset single(10);
  single.add(clean_synthetic(2, 13)[0]);
  TrainConfig cfg;
  ModelParams p = fit(single, cfg).params;
  InfluenceContext ctx(p, single, cfg.lambda);
  Example copy = single[0];
  copy.id = "copy";
  EXPECT_GT(marginal_score_train(ctx, single, copy, 1), 0.0);
  EXPECT_THROW(marginal_score_train(ctx, Dataset(10), copy, 1), ConfigError);
}

// Criterion 1 on a separable toy: a dirty duplicate of a clean positive
// supports the clean set, and retraining without it confirms the sign.
TEST(MarginalScoreTest, DuplicateOfCleanPositiveIsSupported) {
  SyntheticSpec spec;
  spec.n_pos = 25;
  spec.n_neg = 25;
  spec.feature_dim = 4;
  spec.mean_offset = 3.0;
  spec.stddev = 0.5;
  spec.seed = 14;
  Dataset toy = generate_synthetic(spec);
  Dataset clean(4), dirty(4);
  for (std::size_t i = 0; i < toy.size(); ++i) (i % 5 == 0 ? clean : dirty).add(toy[i]);
  Example dup = clean[0];
  ASSERT_EQ(dup.label, 1);
  dup.id = "dup";
  dirty.add(dup);

  TrainConfig cfg;
  cfg.grad_tol = 1e-10;
  FitResult full = fit(dirty, cfg);
  InfluenceContext ctx(full.params, dirty, cfg.lambda);
  const double s = marginal_score_test(ctx, dup, clean, dirty.size());
  EXPECT_GT(s, 0.0);

  FitResult without = fit(zero_weighted(dirty, "dup"), cfg, &full.params);
  double delta = 0.0;
  for (const auto& zc : clean) delta += loss(without.params, zc) - loss(full.params, zc);
  EXPECT_GT(delta / static_cast<double>(clean.size()), 0.0);
}

// Criterion 2: a positive label deep inside the negative cluster is opposed by
// the clean sample. Retraining after dropping each clean instance lowers the
// mislabelled point's loss on average.
TEST(MarginalScoreTrain, FlippedNegativeScoresBelowZero) {
  Dataset clean = clean_synthetic(200, 15);
  TrainConfig cfg;
  cfg.grad_tol = 1e-10;
  FitResult full = fit(clean, cfg);
  InfluenceContext ctx(full.params, clean, cfg.lambda);
  Example flipped = make_example("flip", Eigen::VectorXd::Constant(10, -1.5), 1, 0);
  EXPECT_LT(marginal_score_train(ctx, clean, flipped, clean.size()), 0.0);

  double delta = 0.0;
  for (const auto& zc : clean) {
    FitResult without = fit(zero_weighted(clean, zc.id), cfg, &full.params);
    delta += loss(without.params, flipped) - loss(full.params, flipped);
  }
  EXPECT_LT(delta, 0.0);
}

TEST(ScoreCsv, RoundTrip) {
  std::vector<ScoreRecord> recs = {{"a", 0, 0.125, Strategy::Cr2},
                                   {"b,\"odd\"", 3, -1e-300, Strategy::Cr1},
                                   {"c", 7, 0.1 + 0.2, Strategy::Conf}};
  std::stringstream io;
  write_score_csv(recs, io);
  EXPECT_EQ(read_score_csv(io), recs);
  std::istringstream bad("example_id,iteration,strategy,score\nx,1,cr2\n");
  EXPECT_THROW(read_score_csv(bad), FormatError);
}

TEST(ScorePositives, OnlyPositiveLabelsAndParallelMatchesSerial) {
  Fitted f = fitted_synthetic(100, 16);
  InfluenceContext ctx(f.params, f.train, f.cfg.lambda);
  PooledScorer scorer(ctx, f.train, ctx.n());
  auto serial = score_positives(scorer, f.train, 2, Strategy::Cr2, 1);
  auto threaded = score_positives(scorer, f.train, 2, Strategy::Cr2, 4);
  EXPECT_EQ(serial, threaded);
  EXPECT_EQ(serial.size(), 50u);
  for (const auto& r : serial) EXPECT_EQ(f.train.find(r.example_id)->label, 1);
}

}  // namespace
}  // namespace ifdenoise
