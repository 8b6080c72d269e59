#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "oracles.hpp"
#include "ucil/eval.hpp"

using namespace ucil;

namespace {

double assignment_cost(const Matrix& cost, const std::vector<int>& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += cost(static_cast<Eigen::Index>(i), a[i]);
  return s;
}

bool is_permutation(std::vector<int> a) {
  std::sort(a.begin(), a.end());
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != static_cast<int>(i)) return false;
  return true;
}

std::vector<std::uint32_t> u32(std::initializer_list<int> v) { return {v.begin(), v.end()}; }

}  // namespace

TEST(Hungarian, IdentityForZeroDiagonal) {
  const Matrix cost = Matrix::Ones(5, 5) - Matrix::Identity(5, 5);
  EXPECT_EQ(hungarian(cost), (std::vector<int>{0, 1, 2, 3, 4}));
}

TEST(Hungarian, RecoversComplementedPermutation) {
  const std::vector<int> perm{3, 0, 4, 1, 2};
  Matrix p = Matrix::Zero(5, 5);
  for (int i = 0; i < 5; ++i) p(i, perm[i]) = 1.0;
  EXPECT_EQ(hungarian(Matrix::Ones(5, 5) - p), perm);
}

TEST(Hungarian, MatchesExhaustiveSearch) {
  for (int k = 1; k <= 7; ++k)
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      std::mt19937_64 rng(seed * 13 + k);
      std::uniform_real_distribution<double> u(-5.0, 5.0);
      Matrix cost(k, k);
      for (Eigen::Index i = 0; i < cost.size(); ++i) cost.data()[i] = seed % 3 == 0 ? std::round(u(rng)) : u(rng);
      const auto a = hungarian(cost);
      ASSERT_TRUE(is_permutation(a));
      EXPECT_NEAR(assignment_cost(cost, a), oracle::brute_force_assignment(cost), 1e-9) << "k " << k << " seed " << seed;
    }
}

TEST(Hungarian, LargerInstanceBeatsEveryRandomPermutation) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix cost(60, 60);
  for (Eigen::Index i = 0; i < cost.size(); ++i) cost.data()[i] = u(rng);
  const double best = assignment_cost(cost, hungarian(cost));
  std::vector<int> perm(60);
  std::iota(perm.begin(), perm.end(), 0);
  for (int trial = 0; trial < 2000; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    ASSERT_LE(best, assignment_cost(cost, perm) + 1e-12);
  }
}

TEST(Hungarian, RejectsBadInput) {
  EXPECT_THROW(hungarian(Matrix::Zero(2, 3)), ValidationError);
  Matrix bad = Matrix::Zero(2, 2);
  bad(0, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(hungarian(bad), ValidationError);
  EXPECT_TRUE(hungarian(Matrix(0, 0)).empty());
}

TEST(ClusteringAccuracy, PerfectAndPermutedPredictions) {
  const auto labels = u32({0, 1, 2, 0, 1, 2, 2});
  const auto a = clustering_accuracy({0, 1, 2, 0, 1, 2, 2}, labels, 3);
  EXPECT_EQ(a.accuracy, 1.0);
  EXPECT_EQ(a.mapping, (std::vector<std::int64_t>{0, 1, 2}));
  const auto b = clustering_accuracy({2, 0, 1, 2, 0, 1, 1}, labels, 3);
  EXPECT_EQ(b.accuracy, 1.0);
  EXPECT_EQ(b.mapping, (std::vector<std::int64_t>{1, 2, 0}));
}

TEST(ClusteringAccuracy, HandEnumeratedExample) {
  const auto labels = u32({1, 1, 0, 0, 2, 2});
  const auto a = clustering_accuracy({0, 0, 1, 1, 2, 2}, labels, 3);
  EXPECT_EQ(a.accuracy, 1.0);
  EXPECT_EQ(a.mapping, (std::vector<std::int64_t>{1, 0, 2}));
  EXPECT_NEAR(clustering_accuracy({0, 0, 1, 1, 2, 0}, labels, 3).accuracy, 5.0 / 6.0, 1e-15);
  // Accuracy is the trace of the permuted confusion matrix over n.
  int trace = 0;
  for (int p = 0; p < 3; ++p) trace += a.confusion(p, static_cast<int>(a.mapping[p]));
  EXPECT_EQ(trace, 6);
}

TEST(ClusteringAccuracy, InvariantUnderRelabeling) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    std::mt19937_64 rng(seed);
    std::vector<int> preds;
    std::vector<std::uint32_t> labels;
    for (int i = 0; i < 80; ++i) {
      preds.push_back(static_cast<int>(rng() % 6));
      labels.push_back(static_cast<std::uint32_t>(rng() % 6));
    }
    const double base = clustering_accuracy(preds, labels, 6).accuracy;
    EXPECT_GE(base, 0.0);
    EXPECT_LE(base, 1.0);
    std::vector<int> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto p2 = preds;
    for (auto& p : p2) p = perm[p];
    auto l2 = labels;
    for (auto& l : l2) l = static_cast<std::uint32_t>(perm[(l + 2) % 6]) + 100;
    EXPECT_DOUBLE_EQ(clustering_accuracy(p2, labels, 6).accuracy, base);
    EXPECT_DOUBLE_EQ(clustering_accuracy(preds, l2, 6).accuracy, base);
  }
}

TEST(ClusteringAccuracy, PadsWhenLabelsOutnumberClusters) {
  const auto labels = u32({0, 1, 2, 3});
  const auto a = clustering_accuracy({0, 1, 1, 0}, labels, 2);
  EXPECT_EQ(a.confusion.rows(), 4);
  EXPECT_EQ(a.accuracy, 0.5);
  EXPECT_EQ(a.mapping.size(), 2u);
  EXPECT_EQ(a.label_ids, (std::vector<std::uint32_t>{0, 1, 2, 3}));
}

TEST(ClusteringAccuracy, RejectsBadInput) {
  EXPECT_THROW(clustering_accuracy({0, 3}, u32({0, 1}), 3), ValidationError);
  EXPECT_THROW(clustering_accuracy({0, -1}, u32({0, 1}), 3), ValidationError);
  EXPECT_THROW(clustering_accuracy({0}, u32({0, 1}), 3), ValidationError);
  EXPECT_THROW(clustering_accuracy({}, {}, 3), ValidationError);
}

TEST(MappedAccuracy, UsesGivenMapping) {
  EXPECT_DOUBLE_EQ(mapped_accuracy({0, 1, 1}, u32({5, 6, 5}), {5, 6}), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(mapped_accuracy({0, 1, 2}, u32({5, 6, 7}), {5, 6, -1}), 2.0 / 3.0);
}

TEST(Forgetting, DefinitionAndSign) {
  EXPECT_NEAR(forgetting_score(0.90, 0.70), 0.20, 1e-15);
  EXPECT_EQ(forgetting_score(0.8, 0.8), 0.0);
  EXPECT_NEAR(forgetting_score(0.7, 0.9), -0.2, 1e-15);
}

TEST(Forgetting, FromReportsNeedsTwoSessions) {
  SessionReport a, b;
  a.task_accuracy = {0.9};
  a.first_task_restricted = 0.95;
  b.task_accuracy = {0.6, 0.8};
  b.first_task_restricted = 0.85;
  EXPECT_THROW(forgetting_score(std::vector<SessionReport>{a}), ValidationError);
  EXPECT_NEAR(forgetting_score({a, b}), 0.3, 1e-15);
  EXPECT_NEAR(forgetting_score({a, b}, MappingMode::Restricted), 0.1, 1e-15);
  EXPECT_EQ(forgetting_score({a, a}), 0.0);
}

TEST(SessionReport, JsonRoundTripWithFixedFieldNames) {
  SessionReport r;
  r.session = 2;
  r.total_classes = 4;
  r.prototypes = 50;
  r.accuracy = 0.875;
  r.task_accuracy = {0.9, 0.85};
  r.first_task_restricted = 0.95;
  r.forgetting = -0.05;
  r.forgetting_restricted = 0.0;
  r.mapping = {1, 0, 3, 2};
  r.confusion = Eigen::MatrixXi::Identity(4, 4) * 3;
  const std::string line = report_json(r);
  for (const char* key : {"\"session\"", "\"acc_overall\"", "\"acc_task_1\"", "\"acc_task_2\"", "\"forgetting\""})
    EXPECT_NE(line.find(key), std::string::npos) << key;
  EXPECT_EQ(line.find('\n'), std::string::npos);
  const auto back = report_from_json(line);
  EXPECT_EQ(back.session, 2);
  EXPECT_EQ(back.prototypes, 50);
  EXPECT_EQ(back.accuracy, 0.875);
  EXPECT_EQ(back.task_accuracy, r.task_accuracy);
  EXPECT_EQ(back.forgetting, r.forgetting);
  EXPECT_EQ(back.mapping, r.mapping);
  EXPECT_EQ(back.confusion, r.confusion);

  SessionReport first;
  first.session = 1;
  first.task_accuracy = {1.0};
  EXPECT_NE(report_json(first).find("\"forgetting\":null"), std::string::npos);
  EXPECT_FALSE(report_from_json(report_json(first)).forgetting.has_value());
  EXPECT_THROW(report_from_json("{\"session\": 1}"), FormatError);
}
