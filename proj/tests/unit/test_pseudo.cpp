#include <gtest/gtest.h>

#include <random>

#include "mcf/pseudo_start.hpp"

using namespace mcf;

namespace {

struct Fixture {
  Matrix x;
  std::vector<int> d;
  std::vector<double> start;
};

Fixture step_fixture(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  Fixture f;
  f.x = Matrix(n, 3);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < 3; ++j) f.x(i, j) = z(rng);
    f.d.push_back(static_cast<int>(rng() % 2));
    f.start.push_back(1.0 + 5.0 * (f.x(i, 0) > 0 ? 1.0 : 0.0));
  }
  return f;
}

const std::vector<ColumnKind> kKinds(3, ColumnKind::continuous);

}  // namespace

TEST(PseudoStart, ConstantStartMonth) {
  auto f = step_fixture(600, 1);
  std::fill(f.start.begin(), f.start.end(), 3.0);
  PseudoStartConfig cfg;
  cfg.forest.n_trees = 20;
  const auto model = fit_start_model(f.x, kKinds, f.d, f.start, cfg);
  for (double p : model.predict(f.x)) EXPECT_EQ(p, 3.0);
}

TEST(PseudoStart, StepDgpHeldOutError) {
  const auto f = step_fixture(5000, 2);
  PseudoStartConfig cfg;
  cfg.forest.n_trees = 100;
  const auto model = fit_start_model(f.x, kKinds, f.d, f.start, cfg);
  const auto draw = pseudo_training_draw(f.x.rows(), cfg);
  std::vector<bool> in_draw(f.x.rows(), false);
  for (auto r : draw) in_draw[r] = true;
  double err = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < f.x.rows(); ++i) {
    if (in_draw[i] || f.d[i] == 0) continue;
    err += std::fabs(model.predict(f.x.row(i)) - f.start[i]);
    ++n;
  }
  EXPECT_LE(err / static_cast<double>(n), 0.5);
}

TEST(PseudoStart, DrawAndModelAreDeterministic) {
  const auto f = step_fixture(800, 3);
  PseudoStartConfig cfg;
  cfg.forest.n_trees = 10;
  EXPECT_EQ(pseudo_training_draw(800, cfg), pseudo_training_draw(800, cfg));
  EXPECT_EQ(pseudo_training_draw(800, cfg).size(), 160u);
  const auto a = fit_start_model(f.x, kKinds, f.d, f.start, cfg);
  const auto b = fit_start_model(f.x, kKinds, f.d, f.start, cfg);
  EXPECT_EQ(a.predict(f.x), b.predict(f.x));
  cfg.seed = 8;
  EXPECT_NE(pseudo_training_draw(800, cfg), pseudo_training_draw(800, PseudoStartConfig{}));
}

TEST(PseudoStart, RoundingAndFilterRules) {
  EXPECT_EQ(pseudo_month(3.7, 6), 4);
  EXPECT_EQ(pseudo_month(3.5, 6), 4);
  EXPECT_EQ(pseudo_month(3.49, 6), 3);
  EXPECT_EQ(pseudo_month(0.2, 6), 1);
  EXPECT_EQ(pseudo_month(9.0, 6), 6);
  for (double p = -3.0; p < 12.0; p += 0.05) {
    const int m = pseudo_month(p, 6);
    EXPECT_GE(m, 1);
    EXPECT_LE(m, 6);
  }
}

TEST(PseudoStart, AssignAndFilter) {
  auto f = step_fixture(600, 4);
  std::fill(f.start.begin(), f.start.end(), 4.0);
  PseudoStartConfig cfg;
  cfg.forest.n_trees = 5;
  const auto model = fit_start_model(f.x, kKinds, f.d, f.start, cfg);
  const Matrix controls = f.x.select_rows(std::vector<std::size_t>{0, 1, 2});
  const auto a = assign_and_filter(controls, model, std::vector<double>{2.0, 4.0, 10.0}, cfg);
  EXPECT_EQ(a.month, (std::vector<int>{4, 4, 4}));
  EXPECT_EQ(a.kept, (std::vector<bool>{false, true, true}));
  const auto all = assign_and_filter(controls, model, std::vector<double>(3, 6.0), cfg);
  EXPECT_EQ(all.kept_count(), 3u);
  EXPECT_THROW(assign_and_filter(controls, model, std::vector<double>{-1.0, 1.0, 1.0}, cfg), DataError);
}

TEST(PseudoStart, KeptIsMonotoneInMonth) {
  // Raising a control's pseudo month can only turn kept into dropped.
  for (double dur = 0.0; dur <= 7.0; dur += 0.5)
    for (int m = 1; m < 6; ++m) EXPECT_LE(dur >= m + 1, dur >= m);
}

TEST(PseudoStart, Errors) {
  const auto f = step_fixture(200, 5);
  PseudoStartConfig cfg;
  cfg.train_share = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  const std::vector<int> none(200, 0);
  EXPECT_THROW(fit_start_model(f.x, kKinds, none, f.start, cfg), DataError);
  auto bad = f.start;
  for (auto& v : bad) v = 9.0;
  EXPECT_THROW(fit_start_model(f.x, kKinds, f.d, bad, cfg), DataError);
}
