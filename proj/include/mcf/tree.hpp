#pragma once

// Split rules and flat binary trees shared by the regression/classification
// forest, the causal forest and policy trees.

#include <bit>
#include <cstdint>
#include <span>
#include <vector>

#include "mcf/common.hpp"
#include "mcf/data.hpp"

namespace mcf {

inline constexpr int kMaxCategories = 64;

struct SplitRule {
  std::size_t feature = 0;
  bool categorical = false;
  double threshold = 0.0;             // ordered: value <= threshold goes left
  std::uint64_t left_categories = 0;  // unordered: bit c set -> code c goes left

  bool goes_left(double value) const {
    if (!categorical) return value <= threshold;
    const auto code = static_cast<int>(value);
    return code >= 0 && code < kMaxCategories && ((left_categories >> code) & 1u) != 0;
  }
  bool goes_left(std::span<const double> row) const { return goes_left(row[feature]); }

  friend bool operator==(const SplitRule&, const SplitRule&) = default;
};

struct TreeNode {
  SplitRule rule;
  std::int32_t left = -1;
  std::int32_t right = -1;
  std::int32_t leaf = -1;  // leaf slot index, -1 for internal nodes

  bool is_leaf() const { return leaf >= 0; }
  friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

struct FlatTree {
  std::vector<TreeNode> nodes;  // root at index 0
  std::size_t n_leaves = 0;

  std::size_t leaf_of(std::span<const double> row) const {
    std::size_t n = 0;
    while (!nodes[n].is_leaf()) n = static_cast<std::size_t>(nodes[n].rule.goes_left(row) ? nodes[n].left : nodes[n].right);
    return static_cast<std::size_t>(nodes[n].leaf);
  }

  std::size_t depth() const {
    std::size_t best = 0;
    std::vector<std::pair<std::size_t, std::size_t>> stack{{0, 0}};
    while (!stack.empty()) {
      auto [n, d] = stack.back();
      stack.pop_back();
      if (nodes[n].is_leaf()) {
        best = std::max(best, d);
      } else {
        stack.push_back({static_cast<std::size_t>(nodes[n].left), d + 1});
        stack.push_back({static_cast<std::size_t>(nodes[n].right), d + 1});
      }
    }
    return best;
  }

  friend bool operator==(const FlatTree&, const FlatTree&) = default;
};

// Candidate thresholds for an ordered feature: midpoints between consecutive
// distinct sorted values.
inline double midpoint(double lo, double hi) {
  const double m = lo + (hi - lo) / 2.0;
  return m < hi ? m : lo;
}

inline void check_feature_codes(const Matrix& x, std::span<const ColumnKind> kinds) {
  if (kinds.size() != x.cols()) throw std::invalid_argument("feature kinds do not match matrix width");
  for (std::size_t j = 0; j < x.cols(); ++j) {
    if (kinds[j] != ColumnKind::unordered) continue;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      const double v = x(i, j);
      if (v != std::floor(v) || v < 0 || v >= kMaxCategories)
        throw DataError("unordered feature " + std::to_string(j) + " has code outside 0.." +
                        std::to_string(kMaxCategories - 1));
    }
  }
}

}  // namespace mcf
