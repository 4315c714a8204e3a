#include <gtest/gtest.h>

#include "helpers.hpp"
#include "mcf/serialization.hpp"

using namespace mcf;

namespace {

SyntheticData small_data() {
  auto s = DgpSpec::paper_shaped();
  s.n = 400;
  s.curve.months = 0;
  s.pseudo_columns = false;
  return generate(s);
}

}  // namespace

TEST(Serialization, SchemaRoundTrip) {
  const auto g = small_data();
  const auto j = io::schema_to_json(g.data.schema);
  const auto back = io::schema_from_json(j);
  EXPECT_EQ(io::dump(io::schema_to_json(back)), io::dump(j));
}

TEST(Serialization, CausalForestRoundTrip) {
  const auto g = small_data();
  std::vector<std::size_t> a, b;
  for (std::size_t i = 0; i < g.data.size(); ++i) (i % 2 ? b : a).push_back(i);
  McfParams p;
  p.n_trees = 20;
  p.min_leaf = 5;
  const auto forest = fit_mcf(g.data.subset(a), g.data.subset(b), p);
  const auto text = io::dump(io::forest_to_json(forest));
  const auto back = io::forest_from_json(nlohmann::ordered_json::parse(text));
  EXPECT_EQ(back.trees, forest.trees);
  EXPECT_EQ(back.members, forest.members);
  EXPECT_EQ(io::dump(io::forest_to_json(back)), text);
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_EQ(potential_outcomes(back, g.data.x.row(i)), potential_outcomes(forest, g.data.x.row(i)));
    EXPECT_EQ(iate(back, g.data.x.row(i), 2, 0), iate(forest, g.data.x.row(i), 2, 0));
  }
}

TEST(Serialization, PolicyTreeRoundTrip) {
  Rng rng(1);
  PolicyScores s;
  s.theta = Matrix(60, 3);
  Matrix v(60, 2);
  for (std::size_t i = 0; i < 60; ++i) {
    for (std::size_t d = 0; d < 3; ++d) s.theta(i, d) = standard_normal(rng);
    v(i, 0) = uniform01(rng);
    v(i, 1) = static_cast<double>(uniform_index(rng, 4));
  }
  const std::vector<ColumnKind> kinds{ColumnKind::continuous, ColumnKind::unordered};
  PolicyTreeOptions opt;
  opt.depth = 2;
  const auto t = fit_policy_tree(s, v, kinds, {}, opt, {"age", "sector"});
  const std::vector<std::string> names{"a", "b", "c"};
  const auto j = io::policy_tree_to_json(t, names);
  const auto back = io::policy_tree_from_json(nlohmann::ordered_json::parse(io::dump(j)));
  EXPECT_EQ(back.predict(v), t.predict(v));
  EXPECT_EQ(back.feature_names, t.feature_names);
  EXPECT_EQ(io::dump(io::policy_tree_to_json(back, names)), io::dump(j));
}

TEST(Serialization, RejectsWrongTypeOrVersion) {
  nlohmann::ordered_json j = {{"type", "policy_tree"}, {"format_version", 1}};
  EXPECT_THROW(io::check_header(j, "causal_forest"), DataError);
  j["format_version"] = 99;
  EXPECT_THROW(io::check_header(j, "policy_tree"), DataError);
  EXPECT_THROW(io::forest_from_json(nlohmann::ordered_json::array()), DataError);
  const auto dir = testutil::scratch_dir("serial");
  EXPECT_THROW(io::read_json_file(dir / "missing.json"), DataError);
}
