#include <gtest/gtest.h>

#include <random>

#include "helpers.hpp"
#include "mcf/forest.hpp"
#include "mcf/serialization.hpp"

using namespace mcf;

namespace {

Matrix normal_matrix(std::size_t n, std::size_t p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  Matrix x(n, p);
  for (auto& v : x.data()) v = z(rng);
  return x;
}

std::vector<ColumnKind> continuous(std::size_t p) { return std::vector<ColumnKind>(p, ColumnKind::continuous); }

}  // namespace

TEST(RegressionForest, ConstantTarget) {
  const auto x = normal_matrix(100, 3, 1);
  const std::vector<double> y(100, 5.0);
  ForestParams p;
  p.n_trees = 20;
  const auto m = fit_regression(x, continuous(3), y, p);
  for (const auto& t : m.trees) EXPECT_EQ(t.nodes.size(), 1u);
  const auto test = normal_matrix(50, 3, 2);
  for (double v : m.predict(test)) EXPECT_EQ(v, 5.0);
}

TEST(RegressionForest, NoiseFeaturesDoNotChangeConstantPrediction) {
  const auto x = normal_matrix(80, 6, 3);
  const std::vector<double> y(80, -1.25);
  ForestParams p;
  p.n_trees = 10;
  const auto narrow = fit_regression(x.select_cols(std::vector<std::size_t>{0}), continuous(1), y, p);
  const auto wide = fit_regression(x, continuous(6), y, p);
  const auto test = normal_matrix(20, 6, 4);
  const auto a = narrow.predict(test.select_cols(std::vector<std::size_t>{0}));
  const auto b = wide.predict(test);
  EXPECT_EQ(a, b);
}

TEST(RegressionForest, LinearSignalOobR2) {
  const auto x = normal_matrix(500, 1, 11);
  std::vector<double> y(500);
  for (std::size_t i = 0; i < 500; ++i) y[i] = x(i, 0);
  ForestParams p;
  p.n_trees = 200;
  p.seed = 3;
  const auto m = fit_regression(x, continuous(1), y, p);
  EXPECT_GE(oob_r2(m, x, y), 0.8);
}

TEST(RegressionForest, SameSeedIsBitIdentical) {
  const auto x = normal_matrix(200, 4, 5);
  std::vector<double> y(200);
  for (std::size_t i = 0; i < 200; ++i) y[i] = x(i, 0) - x(i, 2);
  ForestParams p;
  p.n_trees = 30;
  p.seed = 99;
  const auto a = fit_regression(x, continuous(4), y, p);
  const auto b = fit_regression(x, continuous(4), y, p);
  EXPECT_EQ(io::base_forest_to_json(a).dump(), io::base_forest_to_json(b).dump());
  p.seed = 100;
  const auto c = fit_regression(x, continuous(4), y, p);
  EXPECT_NE(io::base_forest_to_json(a).dump(), io::base_forest_to_json(c).dump());
}

TEST(RegressionForest, LeavesRespectMinLeafAndExposeBags) {
  const auto x = normal_matrix(300, 2, 8);
  std::vector<double> y(300);
  for (std::size_t i = 0; i < 300; ++i) y[i] = x(i, 0) * x(i, 1);
  ForestParams p;
  p.n_trees = 15;
  p.min_leaf = 7;
  const auto m = fit_regression(x, continuous(2), y, p);
  ASSERT_EQ(m.in_bag.size(), m.trees.size());
  for (std::size_t t = 0; t < m.trees.size(); ++t) {
    EXPECT_EQ(m.in_bag[t].size(), 150u);
    std::vector<std::size_t> count(m.trees[t].n_leaves, 0);
    for (auto r : m.in_bag[t]) ++count[m.trees[t].leaf_of(x.row(r))];
    for (auto c : count) EXPECT_GE(c, 7u);
  }
  EXPECT_THROW(m.predict(std::vector<double>{1.0}), DataError);
}

TEST(ClassificationForest, SingleClass) {
  const auto x = normal_matrix(60, 2, 9);
  const std::vector<int> labels(60, 2);
  ForestParams p;
  p.n_trees = 10;
  const auto m = fit_classification(x, continuous(2), labels, p, 3);
  const auto probs = m.predict_proba(normal_matrix(25, 2, 10));
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    EXPECT_EQ(probs(i, 0), 0.0);
    EXPECT_EQ(probs(i, 1), 0.0);
    EXPECT_EQ(probs(i, 2), 1.0);
  }
}

TEST(ClassificationForest, SeparableByThreshold) {
  const auto x = normal_matrix(600, 3, 12);
  std::vector<int> labels(600);
  for (std::size_t i = 0; i < 600; ++i) labels[i] = x(i, 1) > 0.2 ? 1 : 0;
  ForestParams p;
  p.n_trees = 100;
  const auto m = fit_classification(x, continuous(3), labels, p);
  const auto test = normal_matrix(400, 3, 13);
  std::size_t correct = 0;
  const auto probs = m.predict_proba(test);
  for (std::size_t i = 0; i < 400; ++i) correct += (probs(i, 1) > 0.5) == (test(i, 1) > 0.2);
  EXPECT_GE(static_cast<double>(correct) / 400.0, 0.95);
  const auto train_probs = m.predict_proba(x);
  for (std::size_t i = 0; i < 600; ++i) {
    const int arg = train_probs(i, 1) > train_probs(i, 0) ? 1 : 0;
    EXPECT_EQ(arg, labels[i]);
  }
}

TEST(ClassificationForest, FiveClassNormalization) {
  const auto x = normal_matrix(400, 4, 14);
  std::mt19937_64 rng(1);
  std::vector<int> labels(400);
  for (auto& l : labels) l = static_cast<int>(rng() % 5);
  ForestParams p;
  p.n_trees = 40;
  const auto m = fit_classification(x, continuous(4), labels, p, 5);
  const auto probs = m.predict_proba(normal_matrix(1000, 4, 15));
  ASSERT_EQ(probs.cols(), 5u);
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
      EXPECT_GE(probs(i, c), 0.0);
      EXPECT_LE(probs(i, c), 1.0);
      s += probs(i, c);
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
  const auto oob = m.oob_predict_proba(x);
  for (std::size_t i = 0; i < oob.rows(); ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < 5; ++c) s += oob(i, c);
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(ClassificationForest, UnorderedCategoricalSplits) {
  // Class is 1 exactly for categories {1, 3} of a 4-level factor.
  std::mt19937_64 rng(4);
  Matrix x(400, 1);
  std::vector<int> labels(400);
  for (std::size_t i = 0; i < 400; ++i) {
    const int c = static_cast<int>(rng() % 4);
    x(i, 0) = c;
    labels[i] = (c == 1 || c == 3) ? 1 : 0;
  }
  ForestParams p;
  p.n_trees = 20;
  const std::vector<ColumnKind> kinds{ColumnKind::unordered};
  const auto m = fit_classification(x, kinds, labels, p);
  for (int c = 0; c < 4; ++c) {
    const auto pr = m.predict_proba(std::vector<double>{static_cast<double>(c)});
    EXPECT_EQ(pr[1] > 0.5, c == 1 || c == 3);
  }
}

TEST(ForestParams, Validation) {
  ForestParams p;
  p.n_trees = 0;
  EXPECT_THROW(p.validate(3), std::invalid_argument);
  p = {};
  p.mtry = 4;
  EXPECT_THROW(p.validate(3), std::invalid_argument);
  p = {};
  p.min_leaf = 0;
  EXPECT_THROW(p.validate(3), std::invalid_argument);
  p = {};
  p.bootstrap_fraction = 0.0;
  EXPECT_THROW(p.validate(3), std::invalid_argument);
}

TEST(ForestSerialization, RoundTripPredictsIdentically) {
  const auto x = normal_matrix(150, 2, 21);
  std::vector<int> labels(150);
  for (std::size_t i = 0; i < 150; ++i) labels[i] = x(i, 0) > 0 ? 1 : 0;
  ForestParams p;
  p.n_trees = 12;
  const auto m = fit_classification(x, continuous(2), labels, p);
  const auto back = io::base_forest_from_json(io::base_forest_to_json(m));
  const auto test = normal_matrix(30, 2, 22);
  const auto a = m.predict_proba(test), b = back.predict_proba(test);
  EXPECT_EQ(a.data(), b.data());
}
