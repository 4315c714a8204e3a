#include <gtest/gtest.h>

#include <cmath>

#include "mcf/causal_forest.hpp"
#include "mcf/effects.hpp"
#include "mcf/oracles.hpp"
#include "mcf/synth.hpp"

using namespace mcf;

namespace {

DgpSpec two_arm_spec(std::size_t n, std::uint64_t seed) {
  DgpSpec s;
  s.n = n;
  s.n_continuous = 4;
  s.n_treatments = 2;
  s.propensity = {{}, {0.0}};
  s.baseline = {1.0, 0.5, -0.5};
  s.effects.resize(2);
  s.seed = seed;
  return s;
}

double group_contrast(const Dataset& d, std::size_t outcome = 0) {
  double s[2] = {0, 0}, c[2] = {0, 0};
  for (std::size_t i = 0; i < d.size(); ++i) {
    s[d.treatment[i]] += d.y(i, outcome);
    c[d.treatment[i]] += 1;
  }
  return s[1] / c[1] - s[0] / c[0];
}

}  // namespace

TEST(Synth, ConstantEffectWithoutNoise) {
  auto s = two_arm_spec(500, 1);
  s.baseline = {2.0};
  s.noise_sd = 0.0;
  s.effects[1].intercept = 1.25;
  const auto g = generate(s);
  EXPECT_NEAR(group_contrast(g.data), 1.25, 1e-12);
  EXPECT_NEAR(g.truth.ate(1, 0), 1.25, 1e-12);
}

TEST(Synth, ZeroCoefficientPropensityIsUniform) {
  auto s = two_arm_spec(4000, 2);
  s.n_treatments = 4;
  s.propensity = {};
  s.effects.resize(4);
  const auto g = generate(s);
  std::vector<double> count(4, 0.0);
  for (int d : g.data.treatment) count[static_cast<std::size_t>(d)] += 1.0;
  const double se = std::sqrt(4000.0 * 0.25 * 0.75);
  for (double c : count) EXPECT_LE(std::fabs(c - 1000.0), 3.0 * se);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(g.truth.propensity(i, 2), 0.25, 1e-15);
}

TEST(Synth, SameSeedSameData) {
  const auto a = generate(DgpSpec::paper_shaped());
  const auto b = generate(DgpSpec::paper_shaped());
  EXPECT_EQ(a.data.x.data(), b.data.x.data());
  EXPECT_EQ(a.data.y.data(), b.data.y.data());
  EXPECT_EQ(a.data.treatment, b.data.treatment);
  auto other = DgpSpec::paper_shaped();
  other.seed = 2;
  EXPECT_NE(generate(other).data.treatment, a.data.treatment);
}

TEST(Synth, GroundTruthAteIsMeanTau) {
  const auto g = generate(DgpSpec::paper_shaped());
  for (int d = 1; d < 5; ++d) {
    double s = 0.0;
    for (std::size_t i = 0; i < g.truth.tau.rows(); ++i) s += g.truth.tau(i, static_cast<std::size_t>(d));
    EXPECT_NEAR(g.truth.ate(d, 0), g.truth.month_multiplier[0] * s / static_cast<double>(g.truth.tau.rows()), 1e-12);
  }
  for (std::size_t i = 0; i < 50; ++i) {
    const auto d = static_cast<std::size_t>(g.data.treatment[i]);
    EXPECT_NEAR(g.truth.potential(i, d), g.data.y(i, 0), 1e-12);
  }
}

TEST(Synth, PaperShapedCurveLocksInThenRecovers) {
  const auto s = DgpSpec::paper_shaped();
  const auto g = generate(s);
  ASSERT_EQ(g.truth.month_multiplier.size(), 12u);
  for (std::size_t m = 0; m < 3; ++m) EXPECT_LT(g.truth.ate(1, 0, m), 0.0);
  EXPECT_GT(g.truth.ate(1, 0, 11), 0.0);
  for (std::size_t m = 3; m < 12; ++m) EXPECT_GE(g.truth.month_multiplier[m], g.truth.month_multiplier[m - 1]);
  EXPECT_EQ(g.data.y.cols(), 12u);
  // Pseudo columns: start months 1..6 for participants, 0 for non-participants.
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    const double start = g.data.aux(i, 0);
    if (g.data.treatment[i] == 0) EXPECT_EQ(start, 0.0);
    else EXPECT_TRUE(start >= 1.0 && start <= 6.0);
    EXPECT_GE(g.data.aux(i, 1), 1.0);
  }
}

TEST(Synth, PlaceboHasZeroTruth) {
  auto s = DgpSpec::paper_shaped();
  const auto g = generate_placebo(s);
  for (int d = 1; d < 5; ++d)
    for (std::size_t m = 0; m < 12; ++m) EXPECT_EQ(g.truth.ate(d, 0, m), 0.0);
}

TEST(Synth, PlaceboSelectionBiasIsRemoved) {
  auto s = two_arm_spec(4000, 3);
  s.propensity = {{}, {0.0, 1.0, 1.0}};
  s.baseline = {0.0, 1.0, 1.0};
  const auto g = generate_placebo(s);
  EXPECT_GT(group_contrast(g.data), 0.5);
  std::vector<std::size_t> a, b;
  for (std::size_t i = 0; i < s.n; ++i) (i % 2 ? b : a).push_back(i);
  McfParams p;
  p.n_trees = 100;
  const auto forest = fit_mcf(g.data.subset(a), g.data.subset(b), p);
  EffectEngine e(forest, g.data.x);
  EXPECT_LT(std::fabs(e.ate({1, 0}).estimate), 0.2);
}

TEST(Synth, Validation) {
  auto s = two_arm_spec(10, 4);
  s.effects[0].intercept = 1.0;
  EXPECT_THROW(generate(s), ConfigError);
  s = two_arm_spec(10, 4);
  s.n_treatments = 1;
  EXPECT_THROW(generate(s), ConfigError);
  s = two_arm_spec(10, 4);
  s.effects[1].steps = {{9, 0.0, 1.0}};
  EXPECT_THROW(generate(s), ConfigError);
}

TEST(TreeOracle, SmallCases) {
  const Matrix scores = [] {
    Matrix m(4, 2);
    const double v[4][2] = {{1, 0}, {1, 0}, {0, 1}, {0, 1}};
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t d = 0; d < 2; ++d) m(i, d) = v[i][d];
    return m;
  }();
  Matrix v(4, 1);
  v(2, 0) = v(3, 0) = 1.0;
  const std::vector<ColumnKind> kinds{ColumnKind::ordered};
  const auto r = oracle::brute_force_tree_oracle(scores, v, kinds, 1);
  EXPECT_TRUE(r.feasible);
  EXPECT_EQ(r.value, 4.0);
  EXPECT_EQ(r.assignment, (std::vector<int>{0, 0, 1, 1}));
  EXPECT_FALSE(r.description.empty());
  EXPECT_EQ(oracle::brute_force_tree_oracle(scores, v, kinds, 0).value, 2.0);
  auto none = Constraints::none(2);
  none.max_share = {0.25, 0.25};
  EXPECT_FALSE(oracle::brute_force_tree_oracle(scores, v, kinds, 1, none).feasible);
  EXPECT_THROW(oracle::brute_force_tree_oracle(scores, v, kinds, 3), std::invalid_argument);
}
