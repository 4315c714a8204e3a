#include <gtest/gtest.h>

#include <algorithm>
#include <map>

#include "helpers.hpp"
#include "mcf/oracles.hpp"
#include "mcf/policy.hpp"

using namespace mcf;
using oracle::brute_force_tree_oracle;

namespace {

PolicyScores scores_of(const std::vector<std::vector<double>>& rows) { return {testutil::from_rows(rows), {}}; }

std::vector<ColumnKind> ordered(std::size_t p) { return std::vector<ColumnKind>(p, ColumnKind::ordered); }

Constraints cap(std::size_t k, std::size_t arm, double share) {
  auto c = Constraints::none(k);
  c.max_share[arm] = share;
  return c;
}

std::vector<std::size_t> counts(const std::vector<int>& a, std::size_t k) {
  std::vector<std::size_t> c(k, 0);
  for (int d : a) ++c[static_cast<std::size_t>(d)];
  return c;
}

struct Instance {
  PolicyScores scores;
  Matrix v;
};

// Integer scores and binary features keep sums exact and the oracle small.
Instance random_instance(Rng& rng, std::size_t n, std::size_t k, std::size_t p) {
  Instance in;
  in.scores.theta = Matrix(n, k);
  in.v = Matrix(n, p);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < k; ++d)
      in.scores.theta(i, d) = static_cast<double>(static_cast<int>(uniform_index(rng, 21)) - 10);
    for (std::size_t f = 0; f < p; ++f) in.v(i, f) = static_cast<double>(uniform_index(rng, 2));
  }
  return in;
}

}  // namespace

TEST(ThreeWaySplit, SizesStratificationAndDeterminism) {
  std::vector<int> d(100);
  for (std::size_t i = 0; i < 100; ++i) d[i] = i < 30 ? 0 : (i < 80 ? 1 : 2);
  const auto s = three_way_split(d, 5);
  EXPECT_EQ(s.train.size(), 40u);
  EXPECT_EQ(s.estimation.size(), 40u);
  EXPECT_EQ(s.validation.size(), 20u);
  std::vector<int> seen(100, 0);
  for (const auto* part : {&s.train, &s.estimation, &s.validation}) {
    std::vector<double> share(3, 0.0);
    for (auto r : *part) {
      ++seen[r];
      share[static_cast<std::size_t>(d[r])] += 1.0;
    }
    const double global[3] = {30, 50, 20};
    for (std::size_t a = 0; a < 3; ++a)
      EXPECT_LE(std::fabs(share[a] - global[a] * static_cast<double>(part->size()) / 100.0), 2.0);
  }
  for (int c : seen) EXPECT_EQ(c, 1);
  const auto again = three_way_split(d, 5);
  EXPECT_EQ(again.train, s.train);
  EXPECT_EQ(again.validation, s.validation);
  EXPECT_NE(three_way_split(d, 6).train, s.train);
  EXPECT_THROW(three_way_split(d, 5, 0.5, 0.5, 0.5), ConfigError);
}

TEST(PolicyTree, FourObservationInstance) {
  const auto s = scores_of({{1, 0}, {1, 0}, {0, 1}, {0, 1}});
  const auto v = testutil::from_rows({{0}, {0}, {1}, {1}});
  PolicyTreeOptions opt;
  opt.depth = 1;
  const auto t = fit_policy_tree(s, v, ordered(1), {}, opt);
  EXPECT_DOUBLE_EQ(t.total, 4.0);
  EXPECT_EQ(t.predict(v), (std::vector<int>{0, 0, 1, 1}));
  ASSERT_FALSE(t.nodes[0].is_leaf());
  EXPECT_EQ(t.nodes[0].rule.threshold, 0.5);
  EXPECT_EQ(brute_force_tree_oracle(s.theta, v, ordered(1), 1).value, 4.0);

  for (auto method : {ConstraintMethod::costs, ConstraintMethod::exact}) {
    opt.method = method;
    const auto c = fit_policy_tree(s, v, ordered(1), cap(2, 0, 0.25), opt);
    EXPECT_LE(counts(c.predict(v), 2)[0], 1u);
    EXPECT_LE(c.total, 3.0);
    EXPECT_EQ(c.total, brute_force_tree_oracle(s.theta, v, ordered(1), 1, cap(2, 0, 0.25)).value);
  }
}

TEST(PolicyTree, DominantArmGivesSingleLeaf) {
  Rng rng(2);
  auto in = random_instance(rng, 50, 3, 2);
  double column = 0.0;
  for (std::size_t i = 0; i < 50; ++i) {
    in.scores.theta(i, 2) = 20.0 + static_cast<double>(i % 3);
    column += in.scores.theta(i, 2);
  }
  for (std::size_t depth = 1; depth <= 3; ++depth) {
    PolicyTreeOptions opt;
    opt.depth = depth;
    const auto t = fit_policy_tree(in.scores, in.v, ordered(2), {}, opt);
    EXPECT_DOUBLE_EQ(t.total, column);
    EXPECT_EQ(counts(t.predict(in.v), 3)[2], 50u);
  }
}

TEST(PolicyTree, AgreesWithBruteForce) {
  Rng rng(3);
  for (int rep = 0; rep < 60; ++rep) {
    const std::size_t n = 10 + uniform_index(rng, 60), k = 2 + uniform_index(rng, 2), p = 1 + uniform_index(rng, 3);
    const auto in = random_instance(rng, n, k, p);
    for (std::size_t depth = 1; depth <= 2; ++depth) {
      PolicyTreeOptions opt;
      opt.depth = depth;
      opt.approximate = false;
      const auto t = fit_policy_tree(in.scores, in.v, ordered(p), {}, opt);
      const auto o = brute_force_tree_oracle(in.scores.theta, in.v, ordered(p), depth);
      EXPECT_EQ(t.total, o.value);
      EXPECT_EQ(evaluate_policy(t.predict(in.v), in.scores.theta).total, t.total);
      EXPECT_LE(t.depth(), depth);
    }
  }
}

TEST(PolicyTree, ConstrainedAgreesWithBruteForceUnderExactMethod) {
  Rng rng(4);
  for (int rep = 0; rep < 30; ++rep) {
    const std::size_t n = 10 + uniform_index(rng, 40), k = 2 + uniform_index(rng, 2), p = 1 + uniform_index(rng, 3);
    const auto in = random_instance(rng, n, k, p);
    const auto c = cap(k, 1 + uniform_index(rng, k - 1), 0.05 + 0.5 * uniform01(rng));
    PolicyTreeOptions opt;
    opt.depth = 2;
    opt.approximate = false;
    opt.method = ConstraintMethod::exact;
    const auto t = fit_policy_tree(in.scores, in.v, ordered(p), c, opt);
    const auto o = brute_force_tree_oracle(in.scores.theta, in.v, ordered(p), 2, c);
    ASSERT_TRUE(o.feasible);
    EXPECT_EQ(t.total, o.value);
  }
}

TEST(PolicyTree, CapsHoldInSample) {
  Rng rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t n = 60 + uniform_index(rng, 100), k = 3;
    auto in = random_instance(rng, n, k, 3);
    for (std::size_t i = 0; i < n; ++i) in.v(i, 2) = uniform01(rng);
    auto c = Constraints::none(k);
    c.max_share[1] = 0.1 + 0.3 * uniform01(rng);
    c.max_share[2] = 0.1 + 0.3 * uniform01(rng);
    const auto limit = c.caps(n, k);
    for (auto method : {ConstraintMethod::costs, ConstraintMethod::exact}) {
      PolicyTreeOptions opt;
      opt.depth = 2;
      opt.method = method;
      opt.max_eval_points = 16;
      const auto t = fit_policy_tree(in.scores, in.v, ordered(3), c, opt);
      const auto got = counts(t.predict(in.v), k);
      EXPECT_LE(got[1], *limit[1]);
      EXPECT_LE(got[2], *limit[2]);
    }
    PolicyTreeOptions opt;
    opt.max_eval_points = 16;
    const auto seq = fit_sequential_tree(in.scores, in.v, ordered(3), 2, 1, c, opt);
    const auto got = counts(seq.predict(in.v), k);
    EXPECT_LE(got[1], *limit[1]);
    EXPECT_LE(got[2], *limit[2]);
  }
}

TEST(PolicyTree, ScoreShiftKeepsAssignments) {
  // Shifting every arm of a row by the same amount, or the whole matrix,
  // changes values but not the optimal unconstrained tree.
  Rng rng(6);
  for (int rep = 0; rep < 20; ++rep) {
    const auto in = random_instance(rng, 80, 3, 3);
    PolicyTreeOptions opt;
    opt.depth = 2;
    const auto base = fit_policy_tree(in.scores, in.v, ordered(3), {}, opt);
    auto whole = in.scores;
    auto rows = in.scores;
    for (std::size_t i = 0; i < 80; ++i) {
      const double shift = static_cast<double>(uniform_index(rng, 7));
      for (std::size_t d = 0; d < 3; ++d) {
        whole.theta(i, d) += 5.0;
        rows.theta(i, d) += shift;
      }
    }
    EXPECT_EQ(fit_policy_tree(whole, in.v, ordered(3), {}, opt).predict(in.v), base.predict(in.v));
    EXPECT_EQ(fit_policy_tree(rows, in.v, ordered(3), {}, opt).predict(in.v), base.predict(in.v));
    EXPECT_DOUBLE_EQ(fit_policy_tree(whole, in.v, ordered(3), {}, opt).value, base.value + 5.0);
  }
}

TEST(PolicyTree, CostsShiftTheArgmax) {
  auto s = scores_of({{1, 0}, {1, 0}, {0, 1}, {0, 1}});
  s.costs = {0.0, 2.0};
  const auto v = testutil::from_rows({{0}, {0}, {1}, {1}});
  PolicyTreeOptions opt;
  opt.depth = 1;
  const auto t = fit_policy_tree(s, v, ordered(1), {}, opt);
  EXPECT_EQ(t.predict(v), (std::vector<int>(4, 0)));
  EXPECT_DOUBLE_EQ(t.total, 2.0);
  s.costs = {1.0};
  EXPECT_THROW(fit_policy_tree(s, v, ordered(1), {}, opt), ConfigError);
}

TEST(PolicyTree, ErrorsAndLeaves) {
  const auto s = scores_of({{1, 0}, {0, 1}});
  const auto v = testutil::from_rows({{0}, {1}});
  PolicyTreeOptions opt;
  opt.depth = 5;
  EXPECT_THROW(fit_policy_tree(s, v, ordered(1), {}, opt), ConfigError);
  opt.depth = 1;
  auto bad = Constraints::none(2);
  bad.max_share = {0.3, 0.3};
  EXPECT_THROW(fit_policy_tree(s, v, ordered(1), bad, opt), ConfigError);
  EXPECT_THROW(fit_policy_tree(PolicyScores{}, v, ordered(1), {}, opt), EstimationError);
  auto nan = s;
  nan.theta(0, 0) = std::nan("");
  EXPECT_THROW(fit_policy_tree(nan, v, ordered(1), {}, opt), DataError);

  Rng rng(7);
  const auto in = random_instance(rng, 40, 2, 2);
  opt.depth = 2;
  const auto t = fit_policy_tree(in.scores, in.v, ordered(2), {}, opt);
  for (const auto& node : t.nodes)
    if (node.is_leaf()) EXPECT_GT(node.n, 0u);
}

TEST(SequentialTree, DepthZeroAndMonotonicity) {
  Rng rng(8);
  for (int rep = 0; rep < 10; ++rep) {
    const auto in = random_instance(rng, 60, 3, 3);
    PolicyTreeOptions opt;
    opt.approximate = false;
    opt.depth = 2;
    const auto base = fit_policy_tree(in.scores, in.v, ordered(3), {}, opt);
    const auto same = fit_sequential_tree(in.scores, in.v, ordered(3), 2, 0, {}, opt);
    EXPECT_EQ(same.predict(in.v), base.predict(in.v));
    const auto seq = fit_sequential_tree(in.scores, in.v, ordered(3), 2, 1, {}, opt);
    opt.depth = 3;
    const auto deep = fit_policy_tree(in.scores, in.v, ordered(3), {}, opt);
    EXPECT_GE(seq.total, base.total);
    EXPECT_LE(seq.total, deep.total);
    EXPECT_LE(seq.depth(), 3u);
  }
}

TEST(SequentialTree, CompositeCanFallShortOfTheDeeperOptimum) {
  const auto v = testutil::from_rows(
      {{0, 1, 1}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0}, {0, 0, 0}, {1, 1, 0}, {0, 0, 1}, {0, 0, 0}});
  const auto s = scores_of({{2, 0}, {2, 3}, {1, 2}, {1, 1}, {0, 0}, {3, 1}, {3, 2}, {1, 0}});
  // With three binary features a depth-3 tree can isolate every cell, so the
  // optimum is the sum over cells of the best arm total.
  std::map<std::vector<double>, std::vector<double>> cells;
  for (std::size_t i = 0; i < 8; ++i) {
    auto& c = cells[{v(i, 0), v(i, 1), v(i, 2)}];
    c.resize(2, 0.0);
    c[0] += s.theta(i, 0);
    c[1] += s.theta(i, 1);
  }
  double best = 0.0;
  for (const auto& [key, sums] : cells) best += std::max(sums[0], sums[1]);
  EXPECT_EQ(best, 15.0);

  PolicyTreeOptions opt;
  opt.approximate = false;
  opt.depth = 3;
  EXPECT_EQ(fit_policy_tree(s, v, ordered(3), {}, opt).total, best);
  opt.depth = 2;
  const auto base = fit_policy_tree(s, v, ordered(3), {}, opt);
  EXPECT_EQ(base.total, brute_force_tree_oracle(s.theta, v, ordered(3), 2).value);
  const auto seq = fit_sequential_tree(s, v, ordered(3), 2, 1, {}, opt);
  EXPECT_EQ(seq.total, 14.0);
  EXPECT_LT(seq.total, best);
}

TEST(BestScore, Examples) {
  const auto dom = testutil::from_rows({{0, 5, 1}, {-2, 3, 2}, {1, 9, 0}});
  EXPECT_EQ(best_score_allocation(dom), (std::vector<int>{1, 1, 1}));
  const auto ties = testutil::from_rows({{1, 1, 1}, {0, 0, 0}});
  EXPECT_EQ(best_score_allocation(ties), (std::vector<int>{0, 0}));
  // Capacity 1 on arm 0; gaps 1 and 5.
  const auto two = testutil::from_rows({{1, 0}, {5, 0}});
  EXPECT_EQ(best_score_allocation(two, cap(2, 0, 0.5)), (std::vector<int>{1, 0}));
  // Unconstrained argmax is the best of all assignments.
  Rng rng(9);
  const auto in = random_instance(rng, 6, 2, 1);
  const double bs = evaluate_policy(best_score_allocation(in.scores.theta), in.scores.theta).total;
  for (unsigned mask = 0; mask < 64; ++mask) {
    std::vector<int> a(6);
    for (std::size_t i = 0; i < 6; ++i) a[i] = static_cast<int>((mask >> i) & 1u);
    EXPECT_LE(evaluate_policy(a, in.scores.theta).total, bs);
  }
}

TEST(RandomAllocation, LargestRemainderCounts) {
  EXPECT_EQ(counts(random_allocation(std::vector<double>{0.5, 0.5}, 4, 1), 2), (std::vector<std::size_t>{2, 2}));
  const auto a = random_allocation(std::vector<double>{0.45, 0.25, 0.30}, 20, 3);
  EXPECT_EQ(counts(a, 3), (std::vector<std::size_t>{9, 5, 6}));
  EXPECT_EQ(random_allocation(std::vector<double>{0.45, 0.25, 0.30}, 20, 3), a);
  EXPECT_EQ(counts(random_allocation(std::vector<double>{0.5, 0.5}, 3, 1), 2), (std::vector<std::size_t>{2, 1}));
  EXPECT_THROW(random_allocation(std::vector<double>{0.5, 0.6}, 3, 1), ConfigError);
}

TEST(EvaluatePolicy, ValueAndShares) {
  const auto s = testutil::from_rows({{1, 2}, {3, 4}, {5, 6}, {7, 8}});
  const auto v = evaluate_policy(std::vector<int>{0, 1, 1, 0}, s);
  EXPECT_DOUBLE_EQ(v.total, 1 + 4 + 6 + 7);
  EXPECT_DOUBLE_EQ(v.mean, 4.5);
  EXPECT_EQ(v.shares, (std::vector<double>{0.5, 0.5}));
  EXPECT_EQ(evaluate_policy(std::vector<int>{0, 1, 1, 0}, Matrix(4, 2, 0.0)).mean, 0.0);
  EXPECT_THROW(evaluate_policy(std::vector<int>{0, 2, 1, 0}, s), DataError);
}

TEST(PolicyExport, TextAndAllocationTable) {
  const auto s = scores_of({{1, 0}, {1, 0}, {0, 1}, {0, 1}});
  const auto v = testutil::from_rows({{0}, {0}, {1}, {1}});
  PolicyTreeOptions opt;
  opt.depth = 1;
  const auto t = fit_policy_tree(s, v, ordered(1), {}, opt, {"age"});
  const auto text = to_text(t, std::vector<std::string>{"none", "job"});
  EXPECT_NE(text.find("age"), std::string::npos);
  EXPECT_NE(text.find("job"), std::string::npos);
  const std::vector<AllocationRow> rows{{"observed", evaluate_policy(std::vector<int>{0, 0, 1, 1}, s.theta)}};
  EXPECT_EQ(allocation_csv(rows, std::vector<std::string>{"none", "job"}),
            "policy,value,share_none,share_job\nobserved,1,0.5,0.5\n");
}
