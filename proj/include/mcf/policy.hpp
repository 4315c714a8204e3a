#pragma once

// Policy learning: exhaustive depth-bounded policy trees over policy scores,
// capacity constraints, sequential trees and simple allocation baselines.

#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mcf/common.hpp"
#include "mcf/csv.hpp"
#include "mcf/data.hpp"
#include "mcf/tree.hpp"

namespace mcf {

// ---------------------------------------------------------------------------
// Sample split

struct SampleSplit {
  std::vector<std::size_t> train, estimation, validation;  // sorted row ids
};

// Stratified three-way split. Rows are ordered by (treatment, random key) and
// dealt to the part with the largest deficit against its target fraction, so
// part sizes are exact up to rounding and every arm is split proportionally.
inline SampleSplit three_way_split(std::span<const int> treatment, std::uint64_t seed, double f_train = 0.4,
                                   double f_estimation = 0.4, double f_validation = 0.2) {
  const double fr[3] = {f_train, f_estimation, f_validation};
  if (std::fabs(f_train + f_estimation + f_validation - 1.0) > 1e-9 || f_train <= 0 || f_estimation <= 0 ||
      f_validation < 0)
    throw ConfigError("three_way_split: fractions must be positive and sum to 1");
  const std::size_t n = treatment.size();
  Rng rng(derive_seed(seed, 0x3a71));
  std::vector<std::uint64_t> key(n);
  for (auto& k : key) k = rng();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (treatment[a] != treatment[b]) return treatment[a] < treatment[b];
    return key[a] != key[b] ? key[a] < key[b] : a < b;
  });
  SampleSplit out;
  std::vector<std::size_t>* parts[3] = {&out.train, &out.estimation, &out.validation};
  std::size_t assigned[3] = {0, 0, 0};
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    double best_deficit = -std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < 3; ++s) {
      const double deficit = fr[s] * static_cast<double>(i + 1) - static_cast<double>(assigned[s]);
      if (deficit > best_deficit + 1e-12) {
        best_deficit = deficit;
        best = s;
      }
    }
    ++assigned[best];
    parts[best]->push_back(order[i]);
  }
  for (auto* p : parts) std::sort(p->begin(), p->end());
  return out;
}

// ---------------------------------------------------------------------------
// Scores, constraints, trees

struct PolicyScores {
  Matrix theta;               // n x K
  std::vector<double> costs;  // per arm, subtracted from theta; empty means 0

  std::size_t k() const { return theta.cols(); }
  std::size_t n() const { return theta.rows(); }

  Matrix net() const {
    if (theta.rows() == 0 || theta.cols() == 0) throw EstimationError("policy scores are empty");
    if (!costs.empty() && costs.size() != theta.cols()) throw ConfigError("policy costs must have one entry per arm");
    Matrix out = theta;
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t d = 0; d < out.cols(); ++d) {
        if (!std::isfinite(out(i, d))) throw DataError("non-finite policy score in row " + std::to_string(i + 1));
        if (!costs.empty()) out(i, d) -= costs[d];
      }
    return out;
  }
};

struct Constraints {
  std::vector<std::optional<double>> max_share;  // per arm; unset is unconstrained

  static Constraints none(std::size_t k) { return {std::vector<std::optional<double>>(k)}; }

  bool any() const {
    return std::any_of(max_share.begin(), max_share.end(), [](const auto& s) { return s.has_value(); });
  }

  void validate(std::size_t k) const {
    if (max_share.empty()) return;
    if (max_share.size() != k) throw ConfigError("constraints must have one entry per arm");
    double total = 0.0;
    bool free_arm = false;
    for (const auto& s : max_share) {
      if (!s) {
        free_arm = true;
        continue;
      }
      if (!(*s >= 0.0 && *s <= 1.0)) throw ConfigError("maximum shares must lie in [0, 1]");
      total += *s;
    }
    if (!free_arm && total < 1.0 - 1e-12)
      throw ConfigError("infeasible constraints: maximum shares sum to " + format_double(total) +
                        " and no arm is unconstrained");
  }

  // Count caps for a sample of n rows: floor(share * n).
  std::vector<std::optional<std::size_t>> caps(std::size_t n, std::size_t k) const {
    std::vector<std::optional<std::size_t>> out(k);
    for (std::size_t d = 0; d < max_share.size(); ++d)
      if (max_share[d]) out[d] = static_cast<std::size_t>(std::floor(*max_share[d] * static_cast<double>(n) + 1e-9));
    return out;
  }
};

enum class ConstraintMethod { automatic, costs, exact };

struct PolicyTreeOptions {
  std::size_t depth = 2;
  bool approximate = true;           // thin split points below the root
  std::size_t max_eval_points = 0;   // cap on split points per feature and node; 0: none
  ConstraintMethod method = ConstraintMethod::automatic;
  std::size_t bisection_steps = 20;
  std::size_t cost_rounds = 2;  // cost search fits at most bisection_steps * cost_rounds trees
};

struct PolicyNode {
  SplitRule rule;
  int left = -1;
  int right = -1;
  int arm = -1;  // treatment of a leaf, -1 for internal nodes
  std::size_t n = 0;

  bool is_leaf() const { return arm >= 0; }
  friend bool operator==(const PolicyNode&, const PolicyNode&) = default;
};

struct PolicyTree {
  std::vector<PolicyNode> nodes;  // root at 0
  std::size_t depth_bound = 0;
  int n_treatments = 0;
  std::vector<std::string> feature_names;
  std::vector<ColumnKind> kinds;
  double value = 0.0;                  // in-sample mean of net scores
  double total = 0.0;                  // in-sample sum of net scores
  std::vector<double> shares;          // in-sample share per arm
  std::vector<double> internal_costs;  // costs found by the constraint search

  int predict(std::span<const double> v) const {
    std::size_t n = 0;
    while (!nodes[n].is_leaf()) n = static_cast<std::size_t>(nodes[n].rule.goes_left(v) ? nodes[n].left : nodes[n].right);
    return nodes[n].arm;
  }

  std::vector<int> predict(const Matrix& v) const {
    if (v.cols() != kinds.size())
      throw DataError("policy data has " + std::to_string(v.cols()) + " columns, tree expects " +
                      std::to_string(kinds.size()));
    std::vector<int> out(v.rows());
    for (std::size_t i = 0; i < v.rows(); ++i) out[i] = predict(v.row(i));
    return out;
  }

  std::size_t depth() const { return depth_from(0); }
  std::size_t n_leaves() const {
    return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [](const auto& x) { return x.is_leaf(); }));
  }

 private:
  std::size_t depth_from(std::size_t n) const {
    if (nodes[n].is_leaf()) return 0;
    return 1 + std::max(depth_from(static_cast<std::size_t>(nodes[n].left)),
                        depth_from(static_cast<std::size_t>(nodes[n].right)));
  }
};

struct PolicyValue {
  double mean = 0.0;
  double total = 0.0;
  std::vector<double> shares;
};

inline PolicyValue evaluate_policy(std::span<const int> assignment, const Matrix& scores) {
  if (assignment.size() != scores.rows()) throw std::invalid_argument("evaluate_policy: length mismatch");
  PolicyValue v;
  v.shares.assign(scores.cols(), 0.0);
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    const auto d = static_cast<std::size_t>(assignment[i]);
    if (assignment[i] < 0 || d >= scores.cols()) throw DataError("evaluate_policy: arm out of range");
    v.total += scores(i, d);
    v.shares[d] += 1.0;
  }
  const auto n = static_cast<double>(std::max<std::size_t>(assignment.size(), 1));
  v.mean = v.total / n;
  for (auto& s : v.shares) s /= n;
  return v;
}

// ---------------------------------------------------------------------------
// Search

namespace detail {

struct PNode;
using PNodePtr = std::shared_ptr<const PNode>;
struct PNode {
  SplitRule rule;
  PNodePtr left, right;
  int arm = -1;
};

inline PNodePtr make_leaf(int arm) {
  auto n = std::make_shared<PNode>();
  n->arm = arm;
  return n;
}

inline PNodePtr make_split(const SplitRule& rule, PNodePtr l, PNodePtr r) {
  auto n = std::make_shared<PNode>();
  n->rule = rule;
  n->left = std::move(l);
  n->right = std::move(r);
  return n;
}

// Lowest label wins ties.
inline std::pair<int, double> best_arm(std::span<const double> sums) {
  int best = 0;
  for (std::size_t d = 1; d < sums.size(); ++d)
    if (sums[d] > sums[static_cast<std::size_t>(best)]) best = static_cast<int>(d);
  return {best, sums[static_cast<std::size_t>(best)]};
}

constexpr std::size_t kMaxEnumeratedCategories = 8;

class PolicySearch {
 public:
  struct Result {
    double value = 0.0;
    PNodePtr tree;
  };

  // Frontier state for exact constrained search.
  struct State {
    std::vector<std::uint32_t> counts;  // per constrained arm
    double value = 0.0;
    PNodePtr tree;
  };

  PolicySearch(const Matrix& v, std::span<const ColumnKind> kinds, const Matrix& theta, const PolicyTreeOptions& opt)
      : v_(v), kinds_(kinds), theta_(theta), opt_(opt), k_(theta.cols()) {
    order_.resize(v.cols());
    for (std::size_t f = 0; f < v.cols(); ++f) {
      if (kinds[f] == ColumnKind::unordered) continue;
      auto& o = order_[f];
      o.resize(v.rows());
      std::iota(o.begin(), o.end(), 0u);
      std::stable_sort(o.begin(), o.end(), [&](std::uint32_t a, std::uint32_t b) { return v(a, f) < v(b, f); });
    }
  }

  void set_caps(std::vector<int> arms, std::vector<std::size_t> caps) {
    capped_arms_ = std::move(arms);
    caps_ = std::move(caps);
  }

  Result solve(const std::vector<std::uint32_t>& rows, std::size_t depth, std::size_t level) const {
    Result best = leaf(rows);
    if (depth == 0) return best;
    if (depth == 1) {
      depth_one(rows, level, best);
      return best;
    }
    for_each_split(rows, level, [&](const SplitRule& rule, const std::vector<std::uint32_t>& l,
                                    const std::vector<std::uint32_t>& r) {
      auto a = solve(l, depth - 1, level + 1);
      auto b = solve(r, depth - 1, level + 1);
      if (a.value + b.value > best.value) best = {a.value + b.value, make_split(rule, a.tree, b.tree)};
    });
    return best;
  }

  std::vector<State> frontier(const std::vector<std::uint32_t>& rows, std::size_t depth, std::size_t level) const {
    std::vector<State> out = leaf_frontier(rows);
    if (depth > 0) {
      for_each_split(rows, level, [&](const SplitRule& rule, const std::vector<std::uint32_t>& l,
                                      const std::vector<std::uint32_t>& r) {
        const auto a = frontier(l, depth - 1, level + 1);
        const auto b = frontier(r, depth - 1, level + 1);
        for (const auto& sa : a)
          for (const auto& sb : b) {
            State s;
            s.counts.resize(sa.counts.size());
            bool ok = true;
            for (std::size_t c = 0; c < s.counts.size(); ++c) {
              s.counts[c] = sa.counts[c] + sb.counts[c];
              ok = ok && s.counts[c] <= caps_[c];
            }
            if (!ok) continue;
            s.value = sa.value + sb.value;
            s.tree = make_split(rule, sa.tree, sb.tree);
            out.push_back(std::move(s));
          }
        prune(out);
      });
    }
    prune(out);
    return out;
  }

  // Number of split points kept for a feature with m candidates at `level`.
  bool keep_point(std::size_t j, std::size_t m, std::size_t level) const {
    std::size_t step = 1;
    if (opt_.approximate) step <<= std::min<std::size_t>(level, 20);
    if (opt_.max_eval_points > 0) step *= std::max<std::size_t>(1, (m + opt_.max_eval_points - 1) / opt_.max_eval_points);
    if (step == 1) return true;
    const std::size_t phase = (step - 1) / 2;
    if (m <= phase) return j == (m - 1) / 2;
    return j % step == phase;
  }

 private:
  Result leaf(const std::vector<std::uint32_t>& rows) const {
    std::vector<double> sums(k_, 0.0);
    for (auto r : rows)
      for (std::size_t d = 0; d < k_; ++d) sums[d] += theta_(r, d);
    const auto [arm, value] = best_arm(sums);
    return {value, make_leaf(arm)};
  }

  std::vector<State> leaf_frontier(const std::vector<std::uint32_t>& rows) const {
    std::vector<double> sums(k_, 0.0);
    for (auto r : rows)
      for (std::size_t d = 0; d < k_; ++d) sums[d] += theta_(r, d);
    std::vector<State> out;
    for (std::size_t d = 0; d < k_; ++d) {
      State s;
      s.counts.assign(capped_arms_.size(), 0);
      bool ok = true;
      for (std::size_t c = 0; c < capped_arms_.size(); ++c)
        if (static_cast<std::size_t>(capped_arms_[c]) == d) {
          s.counts[c] = static_cast<std::uint32_t>(rows.size());
          ok = rows.size() <= caps_[c];
        }
      if (!ok) continue;
      s.value = sums[d];
      s.tree = make_leaf(static_cast<int>(d));
      out.push_back(std::move(s));
    }
    prune(out);
    return out;
  }

  // Keeps the states not dominated by one with higher value and no larger counts.
  static void prune(std::vector<State>& states) {
    std::stable_sort(states.begin(), states.end(), [](const State& a, const State& b) { return a.value > b.value; });
    std::vector<State> kept;
    for (auto& s : states) {
      bool dominated = false;
      for (const auto& t : kept) {
        bool le = true;
        for (std::size_t c = 0; c < s.counts.size() && le; ++c) le = t.counts[c] <= s.counts[c];
        if (le) {
          dominated = true;
          break;
        }
      }
      if (!dominated) kept.push_back(std::move(s));
    }
    states = std::move(kept);
  }

  std::vector<std::uint32_t> sorted_rows(const std::vector<std::uint32_t>& rows, std::size_t f) const {
    std::vector<char> mark(v_.rows(), 0);
    for (auto r : rows) mark[r] = 1;
    std::vector<std::uint32_t> out;
    out.reserve(rows.size());
    for (auto r : order_[f])
      if (mark[r]) out.push_back(r);
    return out;
  }

  // Boundary positions i (split between sorted[i] and sorted[i+1]) kept at `level`.
  std::vector<std::size_t> ordered_candidates(const std::vector<std::uint32_t>& sorted, std::size_t f,
                                              std::size_t level) const {
    std::vector<std::size_t> all;
    for (std::size_t i = 0; i + 1 < sorted.size(); ++i)
      if (v_(sorted[i], f) < v_(sorted[i + 1], f)) all.push_back(i);
    std::vector<std::size_t> kept;
    for (std::size_t j = 0; j < all.size(); ++j)
      if (keep_point(j, all.size(), level)) kept.push_back(all[j]);
    return kept;
  }

  // Left-category masks for an unordered feature; exhaustive up to 8 present
  // categories, otherwise prefixes of the categories ranked by their mean
  // advantage of the node's best arm.
  std::vector<std::uint64_t> category_candidates(const std::vector<std::uint32_t>& rows, std::size_t f) const {
    std::vector<std::vector<double>> cs(kMaxCategories, std::vector<double>(k_, 0.0));
    std::vector<double> cnt(kMaxCategories, 0.0);
    std::vector<double> total(k_, 0.0);
    for (auto r : rows) {
      const auto c = static_cast<std::size_t>(v_(r, f));
      cnt[c] += 1.0;
      for (std::size_t d = 0; d < k_; ++d) {
        cs[c][d] += theta_(r, d);
        total[d] += theta_(r, d);
      }
    }
    std::vector<int> present;
    for (int c = 0; c < kMaxCategories; ++c)
      if (cnt[static_cast<std::size_t>(c)] > 0) present.push_back(c);
    std::vector<std::uint64_t> out;
    if (present.size() < 2) return out;
    if (present.size() <= kMaxEnumeratedCategories) {
      const std::size_t free_bits = present.size() - 1;
      for (std::uint64_t s = 0; s + 1 < (std::uint64_t{1} << free_bits); ++s) {
        std::uint64_t mask = std::uint64_t{1} << present[0];
        for (std::size_t b = 0; b < free_bits; ++b)
          if ((s >> b) & 1u) mask |= std::uint64_t{1} << present[b + 1];
        out.push_back(mask);
      }
      return out;
    }
    const auto a = static_cast<std::size_t>(best_arm(total).first);
    auto key = [&](int c) {
      const auto u = static_cast<std::size_t>(c);
      double mean_all = 0.0;
      for (std::size_t d = 0; d < k_; ++d) mean_all += cs[u][d];
      return (cs[u][a] - mean_all / static_cast<double>(k_)) / cnt[u];
    };
    std::stable_sort(present.begin(), present.end(), [&](int x, int y) { return key(x) < key(y); });
    std::uint64_t mask = 0;
    for (std::size_t i = 0; i + 1 < present.size(); ++i) {
      mask |= std::uint64_t{1} << present[i];
      out.push_back(mask);
    }
    return out;
  }

  template <typename Fn>
  void for_each_split(const std::vector<std::uint32_t>& rows, std::size_t level, Fn&& fn) const {
    std::vector<std::uint32_t> left, right;
    for (std::size_t f = 0; f < v_.cols(); ++f) {
      if (kinds_[f] == ColumnKind::unordered) {
        for (auto mask : category_candidates(rows, f)) {
          SplitRule rule;
          rule.feature = f;
          rule.categorical = true;
          rule.left_categories = mask;
          left.clear();
          right.clear();
          for (auto r : rows) (rule.goes_left(v_(r, f)) ? left : right).push_back(r);
          fn(rule, left, right);
        }
        continue;
      }
      const auto sorted = sorted_rows(rows, f);
      for (auto i : ordered_candidates(sorted, f, level)) {
        SplitRule rule;
        rule.feature = f;
        rule.threshold = midpoint(v_(sorted[i], f), v_(sorted[i + 1], f));
        left.assign(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(i + 1));
        right.assign(sorted.begin() + static_cast<std::ptrdiff_t>(i + 1), sorted.end());
        fn(rule, left, right);
      }
    }
  }

  // Best single split by prefix sums; replaces `best` only on strict improvement.
  void depth_one(const std::vector<std::uint32_t>& rows, std::size_t level, Result& best) const {
    std::vector<double> total(k_, 0.0), left(k_), right(k_);
    for (auto r : rows)
      for (std::size_t d = 0; d < k_; ++d) total[d] += theta_(r, d);
    for (std::size_t f = 0; f < v_.cols(); ++f) {
      if (kinds_[f] == ColumnKind::unordered) {
        for (auto mask : category_candidates(rows, f)) {
          SplitRule rule;
          rule.feature = f;
          rule.categorical = true;
          rule.left_categories = mask;
          std::fill(left.begin(), left.end(), 0.0);
          for (auto r : rows)
            if (rule.goes_left(v_(r, f)))
              for (std::size_t d = 0; d < k_; ++d) left[d] += theta_(r, d);
          consider(rule, left, total, right, best);
        }
        continue;
      }
      const auto sorted = sorted_rows(rows, f);
      const auto cands = ordered_candidates(sorted, f, level);
      std::fill(left.begin(), left.end(), 0.0);
      std::size_t pos = 0;
      for (auto i : cands) {
        for (; pos <= i; ++pos)
          for (std::size_t d = 0; d < k_; ++d) left[d] += theta_(sorted[pos], d);
        SplitRule rule;
        rule.feature = f;
        rule.threshold = midpoint(v_(sorted[i], f), v_(sorted[i + 1], f));
        consider(rule, left, total, right, best);
      }
    }
  }

  void consider(const SplitRule& rule, const std::vector<double>& left, const std::vector<double>& total,
                std::vector<double>& right, Result& best) const {
    for (std::size_t d = 0; d < k_; ++d) right[d] = total[d] - left[d];
    const auto [la, lv] = best_arm(left);
    const auto [ra, rv] = best_arm(right);
    if (lv + rv > best.value) best = {lv + rv, make_split(rule, make_leaf(la), make_leaf(ra))};
  }

  const Matrix& v_;
  std::span<const ColumnKind> kinds_;
  const Matrix& theta_;
  const PolicyTreeOptions& opt_;
  std::size_t k_;
  std::vector<std::vector<std::uint32_t>> order_;
  std::vector<int> capped_arms_;
  std::vector<std::size_t> caps_;
};

inline void flatten(const PNodePtr& node, std::vector<PolicyNode>& out) {
  const auto idx = out.size();
  out.push_back({});
  if (node->arm >= 0) {
    out[idx].arm = node->arm;
    return;
  }
  out[idx].rule = node->rule;
  out[idx].left = static_cast<int>(out.size());
  flatten(node->left, out);
  out[idx].right = static_cast<int>(out.size());
  flatten(node->right, out);
}

inline std::vector<std::uint32_t> all_rows(std::size_t n) {
  std::vector<std::uint32_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0u);
  return rows;
}

// Fills in-sample statistics from the net scores.
inline void finish_tree(PolicyTree& tree, const Matrix& v, const Matrix& net) {
  const auto assignment = tree.predict(v);
  const auto val = evaluate_policy(assignment, net);
  tree.value = val.mean;
  tree.total = val.total;
  tree.shares = val.shares;
  for (auto& n : tree.nodes) n.n = 0;
  for (std::size_t i = 0; i < v.rows(); ++i) {
    std::size_t n = 0;
    ++tree.nodes[0].n;
    while (!tree.nodes[n].is_leaf()) {
      n = static_cast<std::size_t>(tree.nodes[n].rule.goes_left(v.row(i)) ? tree.nodes[n].left : tree.nodes[n].right);
      ++tree.nodes[n].n;
    }
  }
}

inline std::vector<std::size_t> arm_counts(std::span<const int> assignment, std::size_t k) {
  std::vector<std::size_t> c(k, 0);
  for (int a : assignment) ++c[static_cast<std::size_t>(a)];
  return c;
}

// Best leaf labels for a fixed tree structure under count caps, by branch and
// bound over leaves (largest first). Starts from each leaf's best uncapped
// arm; returns false when no feasible labelling is found.
inline bool relabel_leaves(PolicyTree& t, const Matrix& v, const Matrix& net,
                           const std::vector<std::optional<std::size_t>>& caps) {
  const std::size_t k = net.cols();
  std::vector<std::size_t> leaf_of(t.nodes.size(), 0), leaves;
  for (std::size_t j = 0; j < t.nodes.size(); ++j)
    if (t.nodes[j].is_leaf()) {
      leaf_of[j] = leaves.size();
      leaves.push_back(j);
    }
  const std::size_t m = leaves.size();
  std::vector<std::size_t> size(m, 0);
  Matrix sums(m, k);
  for (std::size_t i = 0; i < v.rows(); ++i) {
    std::size_t j = 0;
    while (!t.nodes[j].is_leaf())
      j = static_cast<std::size_t>(t.nodes[j].rule.goes_left(v.row(i)) ? t.nodes[j].left : t.nodes[j].right);
    const auto l = leaf_of[j];
    ++size[l];
    for (std::size_t d = 0; d < k; ++d) sums(l, d) += net(i, d);
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return size[a] > size[b]; });
  std::vector<double> tail(m + 1, 0.0);  // unconstrained bound of the remaining leaves
  for (std::size_t r = m; r-- > 0;) {
    const auto row = sums.row(order[r]);
    tail[r] = tail[r + 1] + *std::max_element(row.begin(), row.end());
  }

  std::vector<int> label(m, -1), best_label;
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l < m; ++l) {
    for (std::size_t d = 0; d < k; ++d)
      if (!caps[d] && (label[l] < 0 || sums(l, d) > sums(l, static_cast<std::size_t>(label[l]))))
        label[l] = static_cast<int>(d);
  }
  if (label[0] >= 0) {
    best = 0.0;
    for (std::size_t l = 0; l < m; ++l) best += sums(l, static_cast<std::size_t>(label[l]));
    best_label = label;
  }
  std::vector<std::size_t> used(k, 0);
  std::size_t visits = 0;
  std::function<void(std::size_t, double)> dfs = [&](std::size_t r, double acc) {
    if (++visits > 2'000'000) return;
    if (r == m) {
      if (acc > best) {
        best = acc;
        best_label = label;
      }
      return;
    }
    if (acc + tail[r] <= best) return;
    const auto l = order[r];
    std::vector<std::size_t> arms(k);
    std::iota(arms.begin(), arms.end(), 0);
    std::stable_sort(arms.begin(), arms.end(), [&](std::size_t a, std::size_t b) { return sums(l, a) > sums(l, b); });
    for (auto d : arms) {
      if (caps[d] && used[d] + size[l] > *caps[d]) continue;
      used[d] += size[l];
      label[l] = static_cast<int>(d);
      dfs(r + 1, acc + sums(l, d));
      used[d] -= size[l];
    }
  };
  dfs(0, 0.0);
  if (best_label.empty()) return false;
  for (std::size_t l = 0; l < m; ++l) t.nodes[leaves[l]].arm = best_label[l];
  return true;
}

// Per-arm prices under which the unit-level argmax of net - price respects
// the count caps. Each pass lifts an over-full arm's price just past the
// margin of its (cap+1)-th strongest unit; prices only rise.
inline std::vector<double> capacity_prices(const Matrix& net, const std::vector<std::optional<std::size_t>>& caps) {
  const std::size_t n = net.rows(), k = net.cols();
  std::vector<double> price(k, 0.0);
  double range = 0.0;
  for (double x : net.data()) range = std::max(range, std::fabs(x));
  const double eps = 1e-9 * (range + 1.0);
  std::vector<double> margin;
  for (std::size_t pass = 0; pass < 100 * k; ++pass) {
    bool changed = false;
    for (std::size_t d = 0; d < k; ++d) {
      if (!caps[d]) continue;
      margin.clear();
      for (std::size_t i = 0; i < n; ++i) {
        double other = -std::numeric_limits<double>::infinity();
        for (std::size_t e = 0; e < k; ++e)
          if (e != d) other = std::max(other, net(i, e) - price[e]);
        const double m = net(i, d) - price[d] - other;
        if (m > 0) margin.push_back(m);
      }
      if (margin.size() <= *caps[d]) continue;
      std::nth_element(margin.begin(), margin.begin() + static_cast<std::ptrdiff_t>(*caps[d]), margin.end(),
                       std::greater<>());
      price[d] += margin[*caps[d]] + eps;
      changed = true;
    }
    if (!changed) break;
  }
  return price;
}

// Tree search with absolute count caps (nullopt: unconstrained).
inline PolicyTree fit_with_caps(const Matrix& v, std::span<const ColumnKind> kinds, const Matrix& net,
                                const std::vector<std::optional<std::size_t>>& caps, const PolicyTreeOptions& opt) {
  const std::size_t n = net.rows(), k = net.cols();
  PolicyTree tree;
  tree.depth_bound = opt.depth;
  tree.n_treatments = static_cast<int>(k);
  tree.kinds.assign(kinds.begin(), kinds.end());
  tree.internal_costs.assign(k, 0.0);
  const auto rows = all_rows(n);

  std::vector<int> capped;
  std::vector<std::size_t> cap_values;
  for (std::size_t d = 0; d < k; ++d)
    if (caps[d] && *caps[d] < n) {
      capped.push_back(static_cast<int>(d));
      cap_values.push_back(*caps[d]);
    }

  if (capped.empty()) {
    PolicySearch search(v, kinds, net, opt);
    flatten(search.solve(rows, opt.depth, 0).tree, tree.nodes);
    finish_tree(tree, v, net);
    return tree;
  }

  auto method = opt.method;
  if (method == ConstraintMethod::automatic) {
    std::size_t points = 0;
    for (std::size_t f = 0; f < v.cols(); ++f) {
      std::vector<double> col = v.column(f);
      std::sort(col.begin(), col.end());
      points += static_cast<std::size_t>(std::unique(col.begin(), col.end()) - col.begin());
    }
    method = (n <= 400 && opt.depth <= 2 && points <= 64) ? ConstraintMethod::exact : ConstraintMethod::costs;
  }

  if (method == ConstraintMethod::exact) {
    PolicySearch search(v, kinds, net, opt);
    search.set_caps(capped, cap_values);
    const auto states = search.frontier(rows, opt.depth, 0);
    if (states.empty()) throw EstimationError("no policy tree satisfies the capacity constraints");
    flatten(states.front().tree, tree.nodes);
    finish_tree(tree, v, net);
    return tree;
  }

  // Costs: start from the prices that make the unit-level best-score
  // allocation meet the caps, fit trees at scaled versions of them, then
  // raise the prices of arms still over their caps until a tree is feasible.
  // The best feasible labelling of any structure seen is kept.
  double lo_score = std::numeric_limits<double>::infinity(), hi_score = -lo_score;
  for (double x : net.data()) {
    lo_score = std::min(lo_score, x);
    hi_score = std::max(hi_score, x);
  }
  const double range = hi_score - lo_score + 1e-12;
  const auto prices = capacity_prices(net, caps);
  Matrix shifted = net;
  auto fit = [&](const std::vector<double>& c) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t d = 0; d < k; ++d) shifted(i, d) = net(i, d) - c[d];
    PolicySearch search(v, kinds, shifted, opt);
    PolicyTree t = tree;
    flatten(search.solve(rows, opt.depth, 0).tree, t.nodes);
    return t;
  };
  std::optional<PolicyTree> best;
  double best_total = -std::numeric_limits<double>::infinity();
  std::vector<double> best_cost;
  // Fits at the given prices; returns the arm counts and whether the caps hold.
  // Every fitted structure is also relabelled under the caps.
  auto step = [&](const std::vector<double>& c) {
    auto t = fit(c);
    const auto counts = arm_counts(t.predict(v), k);
    bool feasible = true;
    for (std::size_t j = 0; j < capped.size(); ++j)
      feasible = feasible && counts[static_cast<std::size_t>(capped[j])] <= cap_values[j];
    if (relabel_leaves(t, v, net, caps)) {
      const double total = evaluate_policy(t.predict(v), net).total;
      if (!best || total > best_total) {
        best_total = total;
        best = std::move(t);
        best_cost = c;
      }
    }
    return std::pair{counts, feasible};
  };

  const std::size_t budget = std::max<std::size_t>(1, opt.bisection_steps * opt.cost_rounds);
  std::size_t used = 0;
  for (double s : {1.0, 0.5, 0.75, 0.9, 0.95, 1.05, 1.1, 1.25, 1.5, 2.0, 3.0, 0.25}) {
    if (used++ >= budget) break;
    std::vector<double> c(k);
    for (std::size_t d = 0; d < k; ++d) c[d] = s * prices[d];
    step(c);
  }
  // Repair from the unit-level prices. Once an arm costs more than the score
  // range it loses every leaf to an uncapped arm, so with one uncapped arm
  // this ends feasible.
  std::vector<double> cost = prices, inc(k, range / 256.0);
  auto [counts, feasible] = step(cost);
  const std::size_t limit = budget + 16 * k;
  while (used++ < limit && (!feasible || (!best && used < budget))) {
    for (std::size_t j = 0; j < capped.size(); ++j) {
      const auto d = static_cast<std::size_t>(capped[j]);
      if (counts[d] <= cap_values[j]) continue;
      cost[d] += inc[d];
      inc[d] *= 2.0;
    }
    std::tie(counts, feasible) = step(cost);
  }
  if (!best) throw EstimationError("cost search did not meet the capacity constraints");
  PolicyTree current = std::move(*best);
  current.internal_costs = best_cost;
  finish_tree(current, v, net);
  return current;
}

}  // namespace detail

// Optimal tree of the given depth over policy variables `v` maximising the
// sum of net scores, subject to in-sample share caps.
inline PolicyTree fit_policy_tree(const PolicyScores& scores, const Matrix& v, std::span<const ColumnKind> kinds,
                                  const Constraints& constraints, const PolicyTreeOptions& opt,
                                  std::vector<std::string> feature_names = {}) {
  const Matrix net = scores.net();
  if (v.rows() != net.rows()) throw std::invalid_argument("fit_policy_tree: policy data and scores differ in length");
  if (opt.depth < 1 || opt.depth > 4) throw ConfigError("policy tree depth must lie in 1..4");
  check_feature_codes(v, kinds);
  constraints.validate(net.cols());
  auto tree = detail::fit_with_caps(v, kinds, net, constraints.caps(net.rows(), net.cols()), opt);
  tree.feature_names = std::move(feature_names);
  return tree;
}

// Depth-a tree, then an independent depth-b tree inside each of its leaves.
// Each stratum keeps its base allocation feasible and receives a
// proportional part of the remaining global capacity.
inline PolicyTree fit_sequential_tree(const PolicyScores& scores, const Matrix& v, std::span<const ColumnKind> kinds,
                                      std::size_t depth_a, std::size_t depth_b, const Constraints& constraints,
                                      PolicyTreeOptions opt = {}, std::vector<std::string> feature_names = {}) {
  opt.depth = depth_a;
  auto base = fit_policy_tree(scores, v, kinds, constraints, opt, feature_names);
  if (depth_b == 0) return base;
  const Matrix net = scores.net();
  const std::size_t n = net.rows(), k = net.cols();
  const auto caps = constraints.caps(n, k);
  const auto base_assignment = base.predict(v);
  const auto base_counts = detail::arm_counts(base_assignment, k);

  // Rows per base leaf.
  std::vector<std::vector<std::size_t>> leaf_rows(base.nodes.size());
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t node = 0;
    while (!base.nodes[node].is_leaf())
      node = static_cast<std::size_t>(base.nodes[node].rule.goes_left(v.row(i)) ? base.nodes[node].left
                                                                                : base.nodes[node].right);
    leaf_rows[node].push_back(i);
  }
  PolicyTree out = base;
  out.depth_bound = depth_a + depth_b;
  std::vector<PolicyNode> nodes;
  std::function<void(std::size_t)> rebuild = [&](std::size_t node) {
    const auto& b = base.nodes[node];
    if (!b.is_leaf()) {
      const auto idx = nodes.size();
      nodes.push_back(b);
      nodes[idx].left = static_cast<int>(nodes.size());
      rebuild(static_cast<std::size_t>(b.left));
      nodes[idx].right = static_cast<int>(nodes.size());
      rebuild(static_cast<std::size_t>(b.right));
      return;
    }
    const auto& rows = leaf_rows[node];
    if (rows.empty()) {
      nodes.push_back(b);
      return;
    }
    std::vector<std::optional<std::size_t>> leaf_caps(k);
    for (std::size_t d = 0; d < k; ++d) {
      if (!caps[d]) continue;
      const std::size_t own = b.arm == static_cast<int>(d) ? rows.size() : 0;
      const std::size_t slack = *caps[d] - std::min(*caps[d], base_counts[d]);
      leaf_caps[d] = own + slack * rows.size() / n;
    }
    PolicyTreeOptions sub = opt;
    sub.depth = depth_b;
    const auto sub_tree =
        detail::fit_with_caps(v.select_rows(rows), kinds, net.select_rows(rows), leaf_caps, sub);
    const auto offset = static_cast<int>(nodes.size());
    for (auto sn : sub_tree.nodes) {
      if (!sn.is_leaf()) {
        sn.left += offset;
        sn.right += offset;
      }
      nodes.push_back(sn);
    }
  };
  rebuild(0);
  out.nodes = std::move(nodes);
  detail::finish_tree(out, v, net);
  return out;
}

// Row-wise argmax (ties to the lowest label). With caps, rows are served in
// descending order of their best-minus-second-best gap and receive the best
// arm that still has capacity.
inline std::vector<int> best_score_allocation(const Matrix& scores, const Constraints& constraints = {}) {
  const std::size_t n = scores.rows(), k = scores.cols();
  if (n == 0 || k == 0) throw EstimationError("best_score_allocation: empty scores");
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = detail::best_arm(scores.row(i)).first;
  if (!constraints.any()) return out;
  constraints.validate(k);
  const auto caps = constraints.caps(n, k);
  std::vector<double> gap(n);
  for (std::size_t i = 0; i < n; ++i) {
    double first = -std::numeric_limits<double>::infinity(), second = first;
    for (std::size_t d = 0; d < k; ++d) {
      const double s = scores(i, d);
      if (s > first) {
        second = first;
        first = s;
      } else if (s > second) {
        second = s;
      }
    }
    gap[i] = k > 1 ? first - second : 0.0;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return gap[a] > gap[b]; });
  std::vector<std::size_t> used(k, 0);
  for (auto i : order) {
    int best = -1;
    for (std::size_t d = 0; d < k; ++d) {
      if (caps[d] && used[d] >= *caps[d]) continue;
      if (best < 0 || scores(i, d) > scores(i, static_cast<std::size_t>(best))) best = static_cast<int>(d);
    }
    if (best < 0) throw EstimationError("best_score_allocation: capacity exhausted");
    out[i] = best;
    ++used[static_cast<std::size_t>(best)];
  }
  return out;
}

// Exact counts by largest-remainder rounding (ties to the lowest label),
// then a deterministic shuffle.
inline std::vector<int> random_allocation(std::span<const double> shares, std::size_t n, std::uint64_t seed) {
  double total = 0.0;
  for (double s : shares) {
    if (s < 0) throw ConfigError("random_allocation: negative share");
    total += s;
  }
  if (std::fabs(total - 1.0) > 1e-9) throw ConfigError("random_allocation: shares must sum to 1");
  const std::size_t k = shares.size();
  std::vector<std::size_t> counts(k);
  std::vector<double> rem(k);
  std::size_t assigned = 0;
  for (std::size_t d = 0; d < k; ++d) {
    const double exact = shares[d] * static_cast<double>(n);
    counts[d] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[d] = exact - static_cast<double>(counts[d]);
    assigned += counts[d];
  }
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b] + 1e-12; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++counts[order[i % k]];
  std::vector<int> out;
  out.reserve(n);
  for (std::size_t d = 0; d < k; ++d) out.insert(out.end(), counts[d], static_cast<int>(d));
  Rng rng(derive_seed(seed, 0xa110c));
  shuffle(out, rng);
  return out;
}

// ---------------------------------------------------------------------------
// Export

inline std::string to_text(const PolicyTree& tree, std::span<const std::string> arm_names = {}) {
  std::ostringstream out;
  auto feature = [&](std::size_t f) {
    return f < tree.feature_names.size() ? tree.feature_names[f] : "v" + std::to_string(f);
  };
  auto arm = [&](int d) {
    return static_cast<std::size_t>(d) < arm_names.size() ? arm_names[static_cast<std::size_t>(d)] : std::to_string(d);
  };
  auto cats = [](std::uint64_t mask) {
    std::string s = "{";
    bool first = true;
    for (int c = 0; c < kMaxCategories; ++c)
      if ((mask >> c) & 1u) {
        s += (first ? "" : ",") + std::to_string(c);
        first = false;
      }
    return s + "}";
  };
  std::function<void(std::size_t, std::size_t)> walk = [&](std::size_t n, std::size_t indent) {
    const auto& node = tree.nodes[n];
    const std::string pad(indent * 2, ' ');
    if (node.is_leaf()) {
      out << pad << "-> " << arm(node.arm) << " (n=" << node.n << ")\n";
      return;
    }
    const auto& r = node.rule;
    const std::string yes = r.categorical ? " in " + cats(r.left_categories) : " <= " + format_double(r.threshold);
    const std::string no = r.categorical ? " not in " + cats(r.left_categories) : " > " + format_double(r.threshold);
    out << pad << "if " << feature(r.feature) << yes << ":\n";
    walk(static_cast<std::size_t>(node.left), indent + 1);
    out << pad << "if " << feature(r.feature) << no << ":\n";
    walk(static_cast<std::size_t>(node.right), indent + 1);
  };
  walk(0, 0);
  return out.str();
}

struct AllocationRow {
  std::string policy;
  PolicyValue value;
};

// Allocation comparison: policy, value, then one share column per arm.
inline std::string allocation_csv(std::span<const AllocationRow> rows, std::span<const std::string> arm_names) {
  std::ostringstream out;
  csv::Writer w(out);
  std::vector<std::string> header{"policy", "value"};
  for (const auto& a : arm_names) header.push_back("share_" + a);
  w.header(header);
  for (const auto& r : rows) {
    std::vector<std::string> fields{r.policy, format_double(r.value.mean)};
    for (std::size_t d = 0; d < arm_names.size(); ++d)
      fields.push_back(format_double(d < r.value.shares.size() ? r.value.shares[d] : 0.0));
    w.row(fields);
  }
  return out.str();
}

}  // namespace mcf

