#pragma once

// Versioned JSON persistence for schemas, forests and policy trees.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "mcf/causal_forest.hpp"
#include "mcf/data.hpp"
#include "mcf/forest.hpp"
#include "mcf/policy.hpp"

namespace mcf::io {

using json = nlohmann::ordered_json;

inline constexpr int kFormatVersion = 1;

inline json schema_to_json(const Schema& s) {
  json cols = json::array();
  for (const auto& c : s.columns()) {
    json roles = json::array();
    for (const auto& [name, role] : role_names())
      if (c.has(role)) roles.push_back(std::string(name));
    json col = {{"name", c.name}, {"kind", std::string(to_string(c.kind))}, {"roles", roles}};
    if (c.n_categories) col["categories"] = c.n_categories;
    if (!c.labels.empty()) col["labels"] = c.labels;
    cols.push_back(col);
  }
  return {{"columns", cols}};
}

inline Schema schema_from_json(const json& j) {
  if (!j.is_object() || !j.contains("columns") || !j["columns"].is_array())
    throw DataError("schema: expected an object with a 'columns' array");
  std::vector<ColumnSpec> cols;
  for (std::size_t i = 0; i < j["columns"].size(); ++i) {
    const auto& c = j["columns"][i];
    const std::string where = "schema.columns[" + std::to_string(i) + "]";
    if (!c.contains("name") || !c["name"].is_string()) throw DataError(where + ".name: missing");
    ColumnSpec spec;
    spec.name = c["name"].get<std::string>();
    spec.kind = parse_kind(c.value("kind", std::string("continuous")));
    if (c.contains("roles")) {
      if (!c["roles"].is_array()) throw DataError(where + ".roles: expected an array");
      for (const auto& r : c["roles"]) spec.roles |= static_cast<unsigned>(parse_role(r.get<std::string>()));
    }
    spec.n_categories = c.value("categories", 0);
    if (c.contains("labels")) spec.labels = c["labels"].get<std::vector<std::string>>();
    if (spec.n_categories == 0 && !spec.labels.empty()) spec.n_categories = static_cast<int>(spec.labels.size());
    cols.push_back(std::move(spec));
  }
  return Schema(std::move(cols));
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("invalid JSON in '" + path.string() + "': " + e.what());
  }
}

inline std::string dump(const json& j) { return j.dump(1) + "\n"; }

// ---------------------------------------------------------------------------
// Trees

inline json rule_to_json(const SplitRule& r) {
  json j = {{"feature", r.feature}};
  if (r.categorical) j["categories"] = r.left_categories;
  else j["threshold"] = r.threshold;
  return j;
}

inline SplitRule rule_from_json(const json& j) {
  SplitRule r;
  r.feature = j.at("feature").get<std::size_t>();
  if (j.contains("categories")) {
    r.categorical = true;
    r.left_categories = j["categories"].get<std::uint64_t>();
  } else {
    r.threshold = j.at("threshold").get<double>();
  }
  return r;
}

inline json tree_to_json(const FlatTree& t) {
  json nodes = json::array();
  for (const auto& n : t.nodes) {
    if (n.is_leaf()) nodes.push_back({{"leaf", n.leaf}});
    else nodes.push_back({{"rule", rule_to_json(n.rule)}, {"left", n.left}, {"right", n.right}});
  }
  return {{"n_leaves", t.n_leaves}, {"nodes", nodes}};
}

inline FlatTree tree_from_json(const json& j) {
  FlatTree t;
  t.n_leaves = j.at("n_leaves").get<std::size_t>();
  for (const auto& n : j.at("nodes")) {
    TreeNode node;
    if (n.contains("leaf")) {
      node.leaf = n["leaf"].get<std::int32_t>();
    } else {
      node.rule = rule_from_json(n.at("rule"));
      node.left = n.at("left").get<std::int32_t>();
      node.right = n.at("right").get<std::int32_t>();
    }
    t.nodes.push_back(node);
  }
  return t;
}

inline json kinds_to_json(std::span<const ColumnKind> kinds) {
  json a = json::array();
  for (auto k : kinds) a.push_back(std::string(to_string(k)));
  return a;
}

inline std::vector<ColumnKind> kinds_from_json(const json& j) {
  std::vector<ColumnKind> out;
  for (const auto& k : j) out.push_back(parse_kind(k.get<std::string>()));
  return out;
}

inline json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}};
}

inline Matrix matrix_from_json(const json& j) {
  Matrix m(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>());
  m.data() = j.at("data").get<std::vector<double>>();
  if (m.data().size() != m.rows() * m.cols()) throw DataError("matrix payload has the wrong size");
  return m;
}

inline void check_header(const json& j, const std::string& type) {
  if (!j.is_object() || j.value("type", std::string()) != type)
    throw DataError("expected a serialized " + type);
  if (j.value("format_version", 0) != kFormatVersion)
    throw DataError(type + ": unsupported format version " + std::to_string(j.value("format_version", 0)));
}

// ---------------------------------------------------------------------------
// Causal forest

inline json mcf_params_to_json(const McfParams& p) {
  json j = {{"n_trees", p.n_trees},
            {"mtry", p.mtry},
            {"min_leaf", p.min_leaf},
            {"nn_count", p.nn_count},
            {"subsample_fraction", p.subsample_fraction},
            {"estimation_fraction", p.estimation_fraction},
            {"max_depth", p.max_depth},
            {"outcome", p.outcome},
            {"local_centering", p.local_centering},
            {"centering_trees", p.centering_trees},
            {"seed", p.seed}};
  if (p.penalty_weight) j["penalty_weight"] = *p.penalty_weight;
  return j;
}

inline McfParams mcf_params_from_json(const json& j, McfParams p = {}) {
  if (!j.is_object()) throw ConfigError("forest: expected an object");
  p.n_trees = j.value("n_trees", p.n_trees);
  p.mtry = j.value("mtry", p.mtry);
  p.min_leaf = j.value("min_leaf", p.min_leaf);
  p.nn_count = j.value("nn_count", p.nn_count);
  p.subsample_fraction = j.value("subsample_fraction", p.subsample_fraction);
  p.estimation_fraction = j.value("estimation_fraction", p.estimation_fraction);
  p.max_depth = j.value("max_depth", p.max_depth);
  p.outcome = j.value("outcome", p.outcome);
  p.local_centering = j.value("local_centering", p.local_centering);
  p.centering_trees = j.value("centering_trees", p.centering_trees);
  p.seed = j.value("seed", p.seed);
  if (j.contains("penalty_weight") && !j["penalty_weight"].is_null()) p.penalty_weight = j["penalty_weight"].get<double>();
  return p;
}

inline json forest_to_json(const CausalForest& f) {
  json trees = json::array();
  for (std::size_t t = 0; t < f.trees.size(); ++t) {
    json tj = tree_to_json(f.trees[t]);
    tj["member_offsets"] = f.members[t].offsets;
    tj["member_rows"] = f.members[t].rows;
    trees.push_back(std::move(tj));
  }
  return {{"type", "causal_forest"},
          {"format_version", kFormatVersion},
          {"library_version", std::string(kVersion)},
          {"params", mcf_params_to_json(f.params)},
          {"n_treatments", f.n_treatments},
          {"n_features", f.n_features},
          {"kinds", kinds_to_json(f.kinds)},
          {"est_x", matrix_to_json(f.est_x)},
          {"est_treatment", f.est_treatment},
          {"est_y", matrix_to_json(f.est_y)},
          {"est_level", matrix_to_json(f.est_level)},
          {"trees", trees}};
}

inline CausalForest forest_from_json(const json& j) {
  check_header(j, "causal_forest");
  CausalForest f;
  f.params = mcf_params_from_json(j.at("params"));
  f.n_treatments = j.at("n_treatments").get<int>();
  f.n_features = j.at("n_features").get<std::size_t>();
  f.kinds = kinds_from_json(j.at("kinds"));
  f.est_x = matrix_from_json(j.at("est_x"));
  f.est_treatment = j.at("est_treatment").get<std::vector<int>>();
  f.est_y = matrix_from_json(j.at("est_y"));
  f.est_level = matrix_from_json(j.at("est_level"));
  if (f.centred() && (f.est_level.rows() != f.est_y.rows() || f.est_level.cols() != f.est_y.cols()))
    throw DataError("causal_forest: est_level shape does not match est_y");
  for (const auto& tj : j.at("trees")) {
    f.trees.push_back(tree_from_json(tj));
    LeafMembers m;
    m.offsets = tj.at("member_offsets").get<std::vector<std::uint32_t>>();
    m.rows = tj.at("member_rows").get<std::vector<std::uint32_t>>();
    if (m.offsets.size() != f.trees.back().n_leaves * f.k() + 1) throw DataError("causal_forest: bad leaf offsets");
    f.members.push_back(std::move(m));
  }
  return f;
}

// ---------------------------------------------------------------------------
// Base forest

inline json base_forest_to_json(const ForestModel& m) {
  json trees = json::array();
  for (std::size_t t = 0; t < m.trees.size(); ++t) {
    json tj = tree_to_json(m.trees[t]);
    tj["values"] = m.leaf_values[t];
    trees.push_back(std::move(tj));
  }
  return {{"type", "forest"},
          {"format_version", kFormatVersion},
          {"task", m.task == ForestTask::regression ? "regression" : "classification"},
          {"n_features", m.n_features},
          {"kinds", kinds_to_json(m.kinds)},
          {"n_classes", m.n_classes},
          {"n_train", m.n_train},
          {"trees", trees}};
}

inline ForestModel base_forest_from_json(const json& j) {
  check_header(j, "forest");
  ForestModel m;
  m.task = j.at("task").get<std::string>() == "regression" ? ForestTask::regression : ForestTask::classification;
  m.n_features = j.at("n_features").get<std::size_t>();
  m.kinds = kinds_from_json(j.at("kinds"));
  m.n_classes = j.at("n_classes").get<int>();
  m.n_train = j.at("n_train").get<std::size_t>();
  for (const auto& tj : j.at("trees")) {
    m.trees.push_back(tree_from_json(tj));
    m.leaf_values.push_back(tj.at("values").get<std::vector<double>>());
    m.in_bag.emplace_back();
  }
  return m;
}

// ---------------------------------------------------------------------------
// Policy tree

inline json policy_tree_to_json(const PolicyTree& t, std::span<const std::string> arm_names = {}) {
  auto arm = [&](int d) -> json {
    if (static_cast<std::size_t>(d) < arm_names.size()) return arm_names[static_cast<std::size_t>(d)];
    return d;
  };
  std::function<json(std::size_t)> node = [&](std::size_t n) -> json {
    const auto& x = t.nodes[n];
    if (x.is_leaf())
      return {{"treatment", x.arm}, {"label", arm(x.arm)}, {"n", x.n}};
    json j;
    const auto f = x.rule.feature;
    j["variable"] = f < t.feature_names.size() ? json(t.feature_names[f]) : json(f);
    j["feature"] = f;
    if (x.rule.categorical) {
      json cats = json::array();
      for (int c = 0; c < kMaxCategories; ++c)
        if ((x.rule.left_categories >> c) & 1u) cats.push_back(c);
      j["left_categories"] = cats;
    } else {
      j["threshold"] = x.rule.threshold;
    }
    j["n"] = x.n;
    j["left"] = node(static_cast<std::size_t>(x.left));
    j["right"] = node(static_cast<std::size_t>(x.right));
    return j;
  };
  return {{"type", "policy_tree"},
          {"format_version", kFormatVersion},
          {"depth_bound", t.depth_bound},
          {"n_treatments", t.n_treatments},
          {"features", t.feature_names},
          {"kinds", kinds_to_json(t.kinds)},
          {"value", t.value},
          {"shares", t.shares},
          {"internal_costs", t.internal_costs},
          {"root", node(0)}};
}

inline PolicyTree policy_tree_from_json(const json& j) {
  check_header(j, "policy_tree");
  PolicyTree t;
  t.depth_bound = j.at("depth_bound").get<std::size_t>();
  t.n_treatments = j.at("n_treatments").get<int>();
  t.feature_names = j.at("features").get<std::vector<std::string>>();
  t.kinds = kinds_from_json(j.at("kinds"));
  t.value = j.at("value").get<double>();
  t.shares = j.at("shares").get<std::vector<double>>();
  t.internal_costs = j.at("internal_costs").get<std::vector<double>>();
  std::function<void(const json&)> walk = [&](const json& n) {
    const auto idx = t.nodes.size();
    t.nodes.push_back({});
    t.nodes[idx].n = n.value("n", std::size_t{0});
    if (n.contains("treatment")) {
      t.nodes[idx].arm = n["treatment"].get<int>();
      return;
    }
    SplitRule r;
    r.feature = n.at("feature").get<std::size_t>();
    if (n.contains("left_categories")) {
      r.categorical = true;
      for (const auto& c : n["left_categories"]) r.left_categories |= std::uint64_t{1} << c.get<int>();
    } else {
      r.threshold = n.at("threshold").get<double>();
    }
    t.nodes[idx].rule = r;
    t.nodes[idx].left = static_cast<int>(t.nodes.size());
    walk(n.at("left"));
    t.nodes[idx].right = static_cast<int>(t.nodes.size());
    walk(n.at("right"));
  };
  walk(j.at("root"));
  return t;
}

}  // namespace mcf::io
