#include <gtest/gtest.h>

#include <random>

#include "helpers.hpp"
#include "mcf/oracles.hpp"
#include "mcf/support.hpp"

using namespace mcf;

namespace {

Matrix two_column(const std::vector<double>& p0) {
  Matrix m(p0.size(), 2);
  for (std::size_t i = 0; i < p0.size(); ++i) {
    m(i, 0) = p0[i];
    m(i, 1) = 1.0 - p0[i];
  }
  return m;
}

// Random K-column propensity fixture with ties from a coarse grid.
Matrix random_propensities(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> cell(1, 12);
  Matrix m(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += (m(i, j) = cell(rng));
    for (std::size_t j = 0; j < k; ++j) m(i, j) /= s;
  }
  return m;
}

}  // namespace

TEST(Trim, IdenticalDistributionsDropNothing) {
  const auto p = two_column({0.3, 0.5, 0.7, 0.3, 0.5, 0.7});
  const std::vector<int> g{0, 0, 0, 1, 1, 1};
  const auto rep = trim(p, g, SupportRule::min_max());
  EXPECT_EQ(rep.dropped, 0u);
  EXPECT_EQ(rep.dropped_share(), 0.0);
}

TEST(Trim, HandFixtureKeepsTheTwoInteriorRows) {
  // Group 0: p(d=0) in {0.60, 0.70}; group 1: {0.30, 0.65}.
  const std::vector<double> p0{0.60, 0.70, 0.30, 0.65};
  const std::vector<int> g{0, 0, 1, 1};
  const auto p = two_column(p0);
  // Rule applied by hand: column 0 bounds [max(.60,.30), min(.70,.65)].
  EXPECT_DOUBLE_EQ(std::max(0.60, 0.30), 0.60);
  EXPECT_DOUBLE_EQ(std::min(0.70, 0.65), 0.65);
  const auto rep = trim(p, g, SupportRule::min_max());
  EXPECT_DOUBLE_EQ(rep.bounds[0].lower, 0.60);
  EXPECT_DOUBLE_EQ(rep.bounds[0].upper, 0.65);
  EXPECT_EQ(rep.keep, (std::vector<bool>{true, false, false, true}));
  EXPECT_EQ(rep.dropped, 2u);
  EXPECT_EQ(rep.kept_rows(), (std::vector<std::size_t>{0, 3}));
  EXPECT_EQ(oracle::naive_trim(p, g, SupportRule::min_max()), rep.keep);
}

TEST(Trim, ExtremeQuantilesOnTenPerGroupEqualMinMax) {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    const auto p = random_propensities(20, 2, rng);
    std::vector<int> g(20);
    for (std::size_t i = 0; i < 20; ++i) g[i] = i < 10 ? 0 : 1;
    const auto a = trim(p, g, SupportRule::min_max());
    const auto b = trim(p, g, SupportRule::quantile(0.001, 0.999));
    EXPECT_EQ(a.keep, b.keep);
    for (std::size_t j = 0; j < 2; ++j) {
      EXPECT_EQ(a.bounds[j].lower, b.bounds[j].lower);
      EXPECT_EQ(a.bounds[j].upper, b.bounds[j].upper);
    }
  }
}

TEST(Trim, PreconditionsAndCollapse) {
  const auto bad = two_column({0.5, 0.5});
  Matrix off = bad;
  off(0, 0) = 0.9;
  EXPECT_THROW(trim(off, std::vector<int>{0, 1}, SupportRule::min_max()), DataError);
  EXPECT_THROW(trim(bad, std::vector<int>{0, 0}, SupportRule::min_max()), DataError);
  EXPECT_THROW(SupportRule::quantile(0.5, 0.5), std::invalid_argument);
  EXPECT_THROW(SupportRule::quantile(-0.1, 0.5), std::invalid_argument);
  // Disjoint groups: lower bound above upper bound.
  const auto p = two_column({0.9, 0.8, 0.2, 0.1});
  const auto rep = trim(p, std::vector<int>{0, 0, 1, 1}, SupportRule::min_max());
  EXPECT_TRUE(rep.bounds[0].collapsed());
  EXPECT_EQ(rep.dropped, 4u);
  ASSERT_FALSE(rep.warnings.empty());
  EXPECT_NE(rep.warnings[0].find("collapse"), std::string::npos);
}

TEST(Trim, AgreesWithNaiveDefinition) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 0.2);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t k = 2 + rep % 3, n = 10 + static_cast<std::size_t>(rng() % 60);
    const auto p = random_propensities(n, k, rng);
    std::vector<int> g(n);
    for (std::size_t i = 0; i < n; ++i) g[i] = static_cast<int>(i % k);
    const auto rule = rep % 2 ? SupportRule::min_max() : SupportRule::quantile(u(rng), 1.0 - u(rng));
    EXPECT_EQ(trim(p, g, rule).keep, oracle::naive_trim(p, g, rule)) << "fixture " << rep;
  }
}

TEST(Trim, MinMaxKeepsSupersetOfQuantileRules) {
  std::mt19937_64 rng(23);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t k = 3, n = 90;
    const auto p = random_propensities(n, k, rng);
    std::vector<int> g(n);
    for (std::size_t i = 0; i < n; ++i) g[i] = static_cast<int>(i % k);
    const auto mm = trim(p, g, SupportRule::min_max());
    const auto q = trim(p, g, SupportRule::quantile(0.05, 0.95));
    for (std::size_t i = 0; i < n; ++i)
      if (q.keep[i]) EXPECT_TRUE(mm.keep[i]);
  }
}

TEST(Trim, ReapplyingRecordedBoundsDropsNothing) {
  std::mt19937_64 rng(29);
  for (int rep = 0; rep < 30; ++rep) {
    const auto p = random_propensities(60, 3, rng);
    std::vector<int> g(60);
    for (std::size_t i = 0; i < 60; ++i) g[i] = static_cast<int>(i % 3);
    const auto first = trim(p, g, SupportRule::min_max());
    const auto kept = first.kept_rows();
    const auto again = apply_bounds(p.select_rows(kept), first.bounds);
    for (bool b : again) EXPECT_TRUE(b);
  }
}

TEST(Trim, RecomputedBoundsCanDropMore) {
  // Group 0 keeps {.60,.65,.70}, group 1 keeps only .62, so bounds computed
  // on the kept rows tighten to [.62,.62].
  const std::vector<double> p0{0.60, 0.65, 0.70, 0.62, 0.30, 0.75};
  const std::vector<int> g{0, 0, 0, 1, 1, 1};
  const auto p = two_column(p0);
  const auto first = trim(p, g, SupportRule::min_max());
  EXPECT_EQ(first.keep, (std::vector<bool>{true, true, true, true, false, false}));
  const auto rows = first.kept_rows();
  std::vector<int> g2;
  for (auto r : rows) g2.push_back(g[r]);
  const auto second = trim(p.select_rows(rows), g2, SupportRule::min_max());
  EXPECT_EQ(second.dropped, 3u);
}

TEST(SupportDiagnostics, NothingDroppedEmitsNote) {
  Matrix x = testutil::from_rows({{1}, {2}, {3}, {4}});
  const auto d = testutil::make_dataset(x, {0, 1, 0, 1}, {0, 0, 0, 0}, 2);
  SupportReport rep;
  rep.keep.assign(4, true);
  const auto diag = support_diagnostics(d, rep, {"x1"});
  EXPECT_EQ(diag.groups[1].size, 0u);
  ASSERT_FALSE(diag.warnings.empty());
  const auto table = support_table_csv(diag);
  EXPECT_NE(table.find("x1,2.5,,"), std::string::npos) << table;
}

TEST(SupportDiagnostics, ShiftedDroppedGroup) {
  Matrix x = testutil::from_rows({{0, 1}, {1, 2}, {2, 1}, {3, 2}, {10, 1}, {11, 2}});
  const auto d = testutil::make_dataset(x, {0, 1, 0, 1, 0, 1}, {0, 0, 0, 0, 0, 0}, 2);
  SupportReport rep;
  rep.keep = {true, true, true, true, false, false};
  rep.dropped = 2;
  const auto diag = support_diagnostics(d, rep, {"x1", "x2"});
  const std::vector<double> kept{0, 1, 2, 3}, dropped{10, 11};
  EXPECT_NEAR(diag.groups[1].deltas[0], oracle::std_diff(dropped, kept), 1e-9);
  EXPECT_GT(diag.groups[1].deltas[0], 0.0);
  EXPECT_NEAR(diag.groups[1].deltas[1], 0.0, 1e-12);
}

TEST(SupportDiagnostics, AllDroppedStillRenders) {
  Matrix x = testutil::from_rows({{1}, {2}, {3}, {4}});
  const auto d = testutil::make_dataset(x, {0, 1, 0, 1}, {0, 0, 0, 0}, 2);
  SupportReport rep;
  rep.keep.assign(4, false);
  rep.dropped = 4;
  const auto diag = support_diagnostics(d, rep, {"x1"});
  EXPECT_EQ(diag.groups[0].size, 0u);
  EXPECT_FALSE(support_table_csv(diag).empty());
}
