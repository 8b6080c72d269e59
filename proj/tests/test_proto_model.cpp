#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "ucil/ot_assign.hpp"
#include "ucil/proto_model.hpp"
#include "ucil/trainer.hpp"

using namespace ucil;

namespace {

struct Instance {
  Matrix z;
  PrototypeSet protos;
  Matrix targets;
};

Instance random_instance(std::uint64_t seed, int n, int r, int d) {
  std::mt19937_64 rng(seed);
  Instance in;
  in.z = oracle::random_unit_rows(rng, n, d);
  in.protos.means = oracle::random_unit_rows(rng, r, d);
  std::uniform_real_distribution<double> ls(std::log(0.3), std::log(1.5));
  in.protos.log_sigma.resize(r);
  for (int w = 0; w < r; ++w) in.protos.log_sigma[w] = ls(rng);
  in.targets = oracle::random_stochastic_rows(rng, n, r);
  return in;
}

double loss_at(const Instance& in, const PrototypeSet& p) {
  return oracle::proto_loss(in.targets, oracle::log_posterior(in.z, p.means, p.log_sigma));
}

double rel(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

}  // namespace

TEST(InitPrototypes, RandomUnitRowsWithInitialSigma) {
  const auto p = init_prototypes(3, 8, 42);
  ASSERT_EQ(p.size(), 3);
  ASSERT_EQ(p.dim(), 8);
  for (Eigen::Index w = 0; w < 3; ++w) {
    EXPECT_NEAR(p.means.row(w).norm(), 1.0, 1e-12);
    EXPECT_NEAR(p.sigma(w), 0.1, 1e-15);
  }
}

TEST(InitPrototypes, DrawsDistinctRowsFromBatch) {
  std::mt19937_64 rng(5);
  const Matrix batch = oracle::random_unit_rows(rng, 1000, 16);
  const auto p = init_prototypes(1000, 16, 1, &batch);
  std::set<Eigen::Index> used;
  for (Eigen::Index w = 0; w < p.size(); ++w) {
    Eigen::Index match = -1;
    for (Eigen::Index i = 0; i < batch.rows(); ++i)
      if ((batch.row(i) - p.means.row(w)).norm() < 1e-12) match = i;
    ASSERT_GE(match, 0);
    used.insert(match);
  }
  EXPECT_EQ(used.size(), 1000u);
}

TEST(InitPrototypes, SmallBatchFallsBackToRandom) {
  std::mt19937_64 rng(5);
  const Matrix batch = oracle::random_unit_rows(rng, 2, 8);
  const auto p = init_prototypes(4, 8, 1, &batch);
  EXPECT_EQ(p.size(), 4);
  for (Eigen::Index w = 0; w < 4; ++w) EXPECT_NEAR(p.means.row(w).norm(), 1.0, 1e-12);
}

TEST(InitPrototypes, IsDeterministicPerSeed) {
  EXPECT_EQ(init_prototypes(5, 8, 7).means, init_prototypes(5, 8, 7).means);
  EXPECT_NE(init_prototypes(5, 8, 7).means, init_prototypes(5, 8, 8).means);
}

TEST(InitPrototypes, RejectsBadSizes) {
  EXPECT_THROW(init_prototypes(0, 8, 1), ValidationError);
  EXPECT_THROW(init_prototypes(3, 1, 1), ValidationError);
}

TEST(LogPosterior, SinglePrototypeIsCertain) {
  std::mt19937_64 rng(1);
  const auto p = init_prototypes(1, 8, 3);
  const Matrix lp = log_posterior(oracle::random_unit_rows(rng, 5, 8), p);
  for (Eigen::Index i = 0; i < 5; ++i) EXPECT_EQ(lp(0, i), 0.0);
}

TEST(LogPosterior, EquidistantPrototypesSplitEvenly) {
  PrototypeSet p;
  p.means.resize(2, 3);
  p.means << 1, 0, 0, 0, 1, 0;
  p.log_sigma = Vector::Constant(2, std::log(0.1));
  Matrix z(1, 3);
  z << 0, 0, 1;
  const Matrix post = log_posterior(z, p).array().exp();
  EXPECT_NEAR(post(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(post(1, 0), 0.5, 1e-15);
}

TEST(LogPosterior, OrthogonalPrototypeHasNoMass) {
  PrototypeSet p;
  p.means.resize(2, 3);
  p.means << 1, 0, 0, 0, 1, 0;
  p.log_sigma = Vector::Constant(2, std::log(0.1));
  Matrix z(1, 3);
  z << 1, 0, 0;
  const Matrix lp = log_posterior(z, p);
  EXPECT_NEAR(std::exp(lp(0, 0)), 1.0, 1e-15);
  EXPECT_NEAR(lp(1, 0), -200.0, 1e-9);
}

TEST(LogPosterior, MatchesOracleAndColumnsNormalize) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto in = random_instance(seed, 9, 6, 12);
    const Matrix lp = log_posterior(in.z, in.protos);
    const auto ref = oracle::log_posterior(in.z, in.protos.means, in.protos.log_sigma);
    for (int w = 0; w < 6; ++w)
      for (int i = 0; i < 9; ++i) EXPECT_NEAR(lp(w, i), ref[w][i], 1e-9);
    for (int i = 0; i < 9; ++i) EXPECT_NEAR(lp.col(i).array().exp().sum(), 1.0, 1e-12);
  }
}

TEST(LogPosterior, ExponentFormsAgreeOnUnitInputs) {
  std::mt19937_64 rng(4);
  const auto in = random_instance(4, 10, 5, 16);
  const Matrix s = proto_logits(in.z, in.protos);
  for (int w = 0; w < 5; ++w)
    for (int i = 0; i < 10; ++i) {
      const double sigma = in.protos.sigma(w);
      const double dist = (in.z.row(i) - in.protos.means.row(w)).squaredNorm();
      EXPECT_NEAR(s(w, i), -dist / (sigma * sigma), 1e-6);
    }
}

TEST(LogPosterior, RejectsDimensionMismatch) {
  const auto p = init_prototypes(3, 8, 1);
  EXPECT_THROW(log_posterior(Matrix::Zero(2, 7), p), ValidationError);
}

TEST(ProtoLoss, MatchedConfidentTargetsGiveZero) {
  Matrix lp(3, 2);
  lp << 0, -800, -800, 0, -900, -900;
  Matrix t(2, 3);
  t << 1, 0, 0, 0, 1, 0;
  EXPECT_NEAR(proto_loss(t, lp), 0.0, 1e-15);
}

TEST(ProtoLoss, UniformIsLogR) {
  const Matrix lp = Matrix::Constant(4, 6, -std::log(4.0));
  const Matrix t = Matrix::Constant(6, 4, 0.25);
  EXPECT_NEAR(proto_loss(t, lp), std::log(4.0), 1e-15);
}

TEST(ProtoLoss, MatchesScalarLoopOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto in = random_instance(seed, 8, 5, 10);
    const double got = proto_loss(in.targets, log_posterior(in.z, in.protos));
    EXPECT_NEAR(got, loss_at(in, in.protos), 1e-6);
    EXPECT_GE(got, 0.0);
  }
}

TEST(ProtoLoss, RejectsShapeMismatch) {
  EXPECT_THROW(proto_loss(Matrix::Zero(3, 4), Matrix::Zero(3, 3)), ValidationError);
}

TEST(ProtoGrads, ZeroWhenTargetsEqualPosterior) {
  const auto in = random_instance(2, 6, 4, 8);
  const Matrix post = log_posterior(in.z, in.protos).array().exp().transpose();
  const auto g = proto_grads(in.z, in.protos, post);
  EXPECT_LT(g.means.cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT(g.log_sigma.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ProtoGrads, MatchCentralDifferencesOfOracle) {
  const double h = 1e-4;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto in = random_instance(seed, 6, 3, 8);
    const auto g = proto_grads(in.z, in.protos, in.targets);
    const double scale = std::max(1.0, std::max(g.means.cwiseAbs().maxCoeff(), g.log_sigma.cwiseAbs().maxCoeff()));
    for (Eigen::Index k = 0; k < in.protos.means.size(); ++k) {
      PrototypeSet plus = in.protos, minus = in.protos;
      plus.means.data()[k] += h;
      minus.means.data()[k] -= h;
      const double fd = (loss_at(in, plus) - loss_at(in, minus)) / (2 * h);
      EXPECT_LE(std::abs(fd - g.means.data()[k]) / std::max({std::abs(fd), std::abs(g.means.data()[k]), 1e-6 * scale}),
                1e-4)
          << "seed " << seed << " mu " << k;
    }
    for (Eigen::Index w = 0; w < in.protos.size(); ++w) {
      PrototypeSet plus = in.protos, minus = in.protos;
      plus.log_sigma[w] += h;
      minus.log_sigma[w] -= h;
      const double fd = (loss_at(in, plus) - loss_at(in, minus)) / (2 * h);
      EXPECT_LE(rel(fd, g.log_sigma[w]), 1e-4) << "seed " << seed << " log_sigma " << w;
    }
  }
}

TEST(ProtoGrads, SigmaGradientSignForFarPrototype) {
  // The sample sits on prototype 0; prototype 1 is far. All target mass on
  // prototype 0, so widening prototype 1 steals posterior mass and raises the loss.
  PrototypeSet p;
  p.means.resize(2, 3);
  p.means << 1, 0, 0, 0.6, 0.8, 0;
  p.log_sigma = Vector::Constant(2, std::log(0.5));
  Matrix z(1, 3);
  z << 1, 0, 0;
  Matrix t(1, 2);
  t << 1, 0;
  const auto g = proto_grads(z, p, t);
  PrototypeSet wider = p;
  wider.log_sigma[1] += std::log(2.0);
  const double before = proto_loss(t, log_posterior(z, p));
  const double after = proto_loss(t, log_posterior(z, wider));
  EXPECT_GT(after, before);
  EXPECT_GT(g.log_sigma[1], 0.0);
  const Matrix s0 = proto_logits(z, p), s1 = proto_logits(z, wider);
  EXPECT_LT(std::abs(s1(1, 0)), std::abs(s0(1, 0)));
}

TEST(PrototypeSet, ProjectRestoresInvariantsAfterAdamSteps) {
  auto in = random_instance(8, 16, 5, 8);
  AdamMoments mm, ms;
  for (int step = 0; step < 200; ++step) {
    const auto plan = sinkhorn_balanced(log_posterior(in.z, in.protos), 0.05, 3);
    const auto g = proto_grads(in.z, in.protos, to_per_sample_targets(plan));
    adam_step(in.protos.means, g.means, mm, 0.05);
    adam_step(in.protos.log_sigma, g.log_sigma, ms, 0.5);
    in.protos.project();
    for (Eigen::Index w = 0; w < in.protos.size(); ++w) {
      ASSERT_NEAR(in.protos.means.row(w).norm(), 1.0, 1e-5);
      ASSERT_GE(in.protos.sigma(w), kSigmaMin * (1 - 1e-12));
      ASSERT_LE(in.protos.sigma(w), kSigmaMax * (1 + 1e-12));
    }
  }
}

TEST(PrototypeSet, ProjectClampsSigma) {
  PrototypeSet p = init_prototypes(2, 4, 1);
  p.log_sigma << -50.0, 50.0;
  p.project();
  EXPECT_NEAR(p.sigma(0), kSigmaMin, 1e-15);
  EXPECT_NEAR(p.sigma(1), kSigmaMax, 1e-12);
}

TEST(HardAssign, PicksMostProbablePrototype) {
  PrototypeSet p;
  p.means.resize(3, 2);
  p.means << 1, 0, 0, 1, -1, 0;
  p.log_sigma = Vector::Constant(3, std::log(0.2));
  Matrix z(3, 2);
  z << 0, 1, -1, 0, 1, 0;
  EXPECT_EQ(hard_assign(z, p), (std::vector<int>{1, 2, 0}));
}
