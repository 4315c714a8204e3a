#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "helpers.hpp"
#include "mcf/data.hpp"
#include "mcf/serialization.hpp"

using namespace mcf;

namespace {

Schema small_schema(int k) {
  std::vector<ColumnSpec> cols(5);
  cols[0] = {"id", ColumnKind::continuous, static_cast<unsigned>(Role::id), 0, {}};
  cols[1] = {"age", ColumnKind::continuous, Role::confounder | Role::heterogeneity, 0, {}};
  cols[2] = {"sector", ColumnKind::unordered, Role::confounder | Role::policy, 3, {}};
  cols[3] = {"d", ColumnKind::unordered, static_cast<unsigned>(Role::treatment), k, {}};
  cols[4] = {"y", ColumnKind::continuous, static_cast<unsigned>(Role::outcome), 0, {}};
  return Schema(cols);
}

// Textbook formula, written independently of the library.
double hand_delta(const std::vector<double>& a, const std::vector<double>& b) {
  auto m = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  auto var = [&](const std::vector<double>& v) {
    const double mu = m(v);
    double s = 0;
    for (double x : v) s += (x - mu) * (x - mu);
    return s / static_cast<double>(v.size() - 1);
  };
  return std::fabs(m(a) - m(b)) / std::sqrt(0.5 * (var(a) + var(b))) * 100.0;
}

}  // namespace

TEST(LoadCsv, FourRowFile) {
  std::istringstream in("id,age,sector,d,y\n1,30,0,0,1.5\n2,41,1,1,2.5\n3,25,2,0,0.5\n4,52,0,1,3.0\n");
  const auto d = load_csv(in, small_schema(2));
  EXPECT_EQ(d.size(), 4u);
  EXPECT_EQ(d.n_covariates(), 2u);
  EXPECT_EQ(d.treatment, (std::vector<int>{0, 1, 0, 1}));
  EXPECT_DOUBLE_EQ(d.y(3, 0), 3.0);
  EXPECT_EQ(d.ids[2], "3");
}

TEST(LoadCsv, TreatmentOutOfRangeNamesRow) {
  std::istringstream in("id,age,sector,d,y\n1,30,0,0,1\n2,31,0,5,1\n");
  try {
    load_csv(in, small_schema(5));
    FAIL() << "expected a DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos) << e.what();
  }
}

TEST(LoadCsv, HeaderOnlyGivesEmptyDataset) {
  std::istringstream in("id,age,sector,d,y\n");
  const auto d = load_csv(in, small_schema(2));
  EXPECT_EQ(d.size(), 0u);
  McfParams p;
  p.n_trees = 2;
  EXPECT_THROW(fit_mcf(d, d, p), Error);
}

TEST(LoadCsv, MissingColumnAndBadCells) {
  std::istringstream missing("id,age,d,y\n1,30,0,1\n");
  EXPECT_THROW(load_csv(missing, small_schema(2)), DataError);
  std::istringstream bad("id,age,sector,d,y\n1,abc,0,0,1\n");
  try {
    load_csv(bad, small_schema(2));
    FAIL();
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("row 1"), std::string::npos);
    EXPECT_NE(msg.find("age"), std::string::npos);
  }
  std::istringstream na("id,age,sector,d,y\n1,NA,0,0,1\n");
  EXPECT_THROW(load_csv(na, small_schema(2)), DataError);
  std::istringstream code("id,age,sector,d,y\n1,3,7,0,1\n");
  EXPECT_THROW(load_csv(code, small_schema(2)), DataError);
}

TEST(Schema, RejectsBadRoleCombinations) {
  std::vector<ColumnSpec> two_treat{{"a", ColumnKind::unordered, static_cast<unsigned>(Role::treatment), 2, {}},
                                    {"b", ColumnKind::unordered, static_cast<unsigned>(Role::treatment), 2, {}},
                                    {"y", ColumnKind::continuous, static_cast<unsigned>(Role::outcome), 0, {}}};
  EXPECT_THROW(Schema{two_treat}, DataError);
  std::vector<ColumnSpec> no_outcome{{"a", ColumnKind::unordered, static_cast<unsigned>(Role::treatment), 2, {}}};
  EXPECT_THROW(Schema{no_outcome}, DataError);
  std::vector<ColumnSpec> mixed{{"a", ColumnKind::unordered, static_cast<unsigned>(Role::treatment), 2, {}},
                                {"y", ColumnKind::continuous, Role::outcome | Role::confounder, 0, {}}};
  EXPECT_THROW(Schema{mixed}, DataError);
}

TEST(StandardizedDifference, HandCase) {
  const std::vector<double> a{0, 2}, b{1, 3};
  const double oracle = hand_delta(a, b);
  EXPECT_NEAR(oracle, 70.71067811865476, 1e-12);
  EXPECT_NEAR(standardized_difference(a, b), 70.71067811865476, 1e-9);
}

TEST(StandardizedDifference, IdenticalGroupsAndDegenerate) {
  const std::vector<double> a{1, 4, 2, 8};
  EXPECT_EQ(standardized_difference(a, a), 0.0);
  const std::vector<double> c1{2, 2, 2}, c2{5, 5};
  EXPECT_THROW(standardized_difference(c1, c2), DegenerateVariance);
  EXPECT_EQ(standardized_difference(c1, c1), 0.0);
  const std::vector<double> one{1};
  EXPECT_THROW(standardized_difference(one, a), std::invalid_argument);
}

TEST(StandardizedDifference, LargeFlag) {
  EXPECT_TRUE(is_large_imbalance(25.0));
  EXPECT_FALSE(is_large_imbalance(20.0));
  EXPECT_FALSE(is_large_imbalance(3.0));
}

TEST(StandardizedDifference, InvariancesAgainstOracle) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> z;
  std::uniform_int_distribution<int> len(2, 30);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> a(static_cast<std::size_t>(len(rng))), b(static_cast<std::size_t>(len(rng)));
    for (auto& v : a) v = z(rng);
    for (auto& v : b) v = 0.5 + 2.0 * z(rng);
    const double base = standardized_difference(a, b);
    EXPECT_GE(base, 0.0);
    EXPECT_NEAR(base, hand_delta(a, b), 1e-9 * std::max(1.0, base));
    EXPECT_NEAR(standardized_difference(b, a), base, 1e-9 * std::max(1.0, base));
    auto sa = a, sb = b;
    for (auto& v : sa) v += 17.0;
    for (auto& v : sb) v += 17.0;
    EXPECT_NEAR(standardized_difference(sa, sb), base, 1e-7 * std::max(1.0, base));
    for (auto& v : sa) v = 3.5 * (v - 17.0);
    for (auto& v : sb) v = 3.5 * (v - 17.0);
    EXPECT_NEAR(standardized_difference(sa, sb), base, 1e-9 * std::max(1.0, base));
  }
}

TEST(DescribeByTreatment, IdenticalGroupsHaveZeroDelta) {
  Matrix x = testutil::from_rows({{1, 5}, {2, 6}, {1, 5}, {2, 6}});
  const auto d = testutil::make_dataset(x, {0, 0, 1, 1}, {0, 0, 0, 0}, 2);
  const auto rep = describe_by_treatment(d, 0);
  for (const auto& g : rep.groups)
    for (double v : g.deltas) EXPECT_EQ(v, 0.0);
}

TEST(DescribeByTreatment, HandCaseAgainstControl) {
  Matrix x = testutil::from_rows({{0}, {2}, {1}, {3}});
  const auto d = testutil::make_dataset(x, {1, 1, 0, 0}, {0, 0, 0, 0}, 2);
  const auto rep = describe_by_treatment(d, 0);
  const auto& ref = rep.groups[rep.reference];
  EXPECT_EQ(ref.deltas[0], 0.0);
  EXPECT_NEAR(rep.group("1").deltas[0], 70.71067811865476, 1e-9);
  EXPECT_EQ(rep.group("1").size, 2u);
}

TEST(DescribeByTreatment, FiveArmShapeAndEmptyGroup) {
  auto spec = DgpSpec::paper_shaped();
  spec.n = 500;
  const auto g = generate(spec);
  const auto rep = describe_by_treatment(g.data, 0);
  EXPECT_EQ(rep.comparison_count(), 4u * g.data.n_covariates());
  std::size_t finite = 0;
  for (std::size_t gi = 0; gi < rep.groups.size(); ++gi) {
    if (gi == rep.reference) continue;
    for (double v : rep.groups[gi].deltas)
      if (std::isfinite(v)) {
        EXPECT_GE(v, 0.0);
        ++finite;
      }
  }
  EXPECT_EQ(finite, 4u * g.data.n_covariates());

  Matrix x = testutil::from_rows({{0}, {2}, {1}, {3}});
  const auto d = testutil::make_dataset(x, {0, 0, 2, 2}, {0, 0, 0, 0}, 3);
  const auto r2 = describe_by_treatment(d, 0);
  EXPECT_EQ(r2.groups.size(), 2u);
  ASSERT_FALSE(r2.warnings.empty());
  EXPECT_THROW(describe_by_treatment(d, 1), DataError);
}

TEST(Dataset, CsvRoundTrip) {
  auto spec = DgpSpec::paper_shaped();
  spec.n = 300;
  const auto g = generate(spec);
  std::istringstream in(to_csv(g.data));
  const auto back = load_csv(in, g.data.schema);
  ASSERT_EQ(back.size(), g.data.size());
  EXPECT_EQ(back.treatment, g.data.treatment);
  EXPECT_EQ(back.ids, g.data.ids);
  for (std::size_t i = 0; i < back.size(); ++i) {
    for (std::size_t j = 0; j < back.x.cols(); ++j) {
      if (back.covariate_spec(j).is_categorical()) EXPECT_EQ(back.x(i, j), g.data.x(i, j));
      else EXPECT_NEAR(back.x(i, j), g.data.x(i, j), 1e-12);
    }
    for (std::size_t j = 0; j < back.y.cols(); ++j) EXPECT_NEAR(back.y(i, j), g.data.y(i, j), 1e-12);
  }
  const auto schema = io::schema_from_json(io::schema_to_json(g.data.schema));
  EXPECT_EQ(schema.columns().size(), g.data.schema.columns().size());
  EXPECT_EQ(schema.treatment().labels, g.data.schema.treatment().labels);
}

TEST(Common, FormatDoubleRoundTripsAndSeedsDiffer) {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 123456789.123, 0.0}) EXPECT_EQ(std::stod(format_double(v)), v);
  EXPECT_EQ(format_double(std::nan("")), "NA");
  EXPECT_NE(derive_seed(1, 11), derive_seed(1, 12));
  EXPECT_EQ(derive_seed(7, 3), derive_seed(7, 3));
  EXPECT_EQ(stars(0.005), "***");
  EXPECT_EQ(stars(0.03), "**");
  EXPECT_EQ(stars(0.07), "*");
  EXPECT_EQ(stars(0.2), "");
}
