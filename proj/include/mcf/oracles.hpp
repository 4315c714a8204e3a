#pragma once

// Brute-force reference implementations used by the verification suites.
// They favour directness over speed and are only meant for small inputs.

#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <vector>

#include "mcf/common.hpp"
#include "mcf/data.hpp"
#include "mcf/policy.hpp"
#include "mcf/support.hpp"

namespace mcf::oracle {

struct TreeOracleResult {
  bool feasible = false;
  double value = 0.0;  // sum of scores under the best tree
  std::vector<int> assignment;
  std::string description;  // one optimal tree, as nested text
};

namespace detail {

struct Outcome {
  double value = 0.0;
  std::vector<std::size_t> counts;  // per arm
  std::shared_ptr<const std::string> tree;
  std::shared_ptr<const std::vector<std::pair<std::size_t, int>>> assigned;  // (row, arm)
};

inline std::vector<Outcome> enumerate(const Matrix& scores, const Matrix& v, std::span<const ColumnKind> kinds,
                                      const std::vector<std::size_t>& rows, std::size_t depth) {
  const std::size_t k = scores.cols();
  std::vector<Outcome> out;
  for (std::size_t d = 0; d < k; ++d) {
    Outcome o;
    o.counts.assign(k, 0);
    o.counts[d] = rows.size();
    auto assigned = std::make_shared<std::vector<std::pair<std::size_t, int>>>();
    for (auto r : rows) {
      o.value += scores(r, d);
      assigned->push_back({r, static_cast<int>(d)});
    }
    o.tree = std::make_shared<const std::string>("leaf(" + std::to_string(d) + ")");
    o.assigned = assigned;
    out.push_back(std::move(o));
  }
  if (depth == 0) return out;
  for (std::size_t f = 0; f < v.cols(); ++f) {
    std::vector<double> values;
    for (auto r : rows) values.push_back(v(r, f));
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    // Each split as a predicate on the feature value.
    std::vector<std::pair<std::string, std::function<bool(double)>>> splits;
    if (kinds[f] == ColumnKind::unordered) {
      const std::size_t m = values.size();
      for (std::uint64_t mask = 1; mask + 1 < (std::uint64_t{1} << m); ++mask) {
        std::vector<double> left;
        for (std::size_t b = 0; b < m; ++b)
          if ((mask >> b) & 1u) left.push_back(values[b]);
        std::string label = "x" + std::to_string(f) + " in {";
        for (double c : left) label += format_double(c) + " ";
        label += "}";
        splits.push_back({label, [left](double x) { return std::find(left.begin(), left.end(), x) != left.end(); }});
      }
    } else {
      for (std::size_t b = 0; b + 1 < values.size(); ++b) {
        const double cut = values[b];
        splits.push_back({"x" + std::to_string(f) + " <= " + format_double(cut), [cut](double x) { return x <= cut; }});
      }
    }
    for (const auto& [label, goes_left] : splits) {
      std::vector<std::size_t> l, r;
      for (auto row : rows) (goes_left(v(row, f)) ? l : r).push_back(row);
      if (l.empty() || r.empty()) continue;
      const auto a = enumerate(scores, v, kinds, l, depth - 1);
      const auto b = enumerate(scores, v, kinds, r, depth - 1);
      for (const auto& oa : a)
        for (const auto& ob : b) {
          Outcome o;
          o.value = oa.value + ob.value;
          o.counts.resize(k);
          for (std::size_t d = 0; d < k; ++d) o.counts[d] = oa.counts[d] + ob.counts[d];
          o.tree = std::make_shared<const std::string>("split(" + label + ", " + *oa.tree + ", " + *ob.tree + ")");
          auto assigned = std::make_shared<std::vector<std::pair<std::size_t, int>>>(*oa.assigned);
          assigned->insert(assigned->end(), ob.assigned->begin(), ob.assigned->end());
          o.assigned = assigned;
          out.push_back(std::move(o));
        }
    }
  }
  return out;
}

inline TreeOracleResult solve(const Matrix& scores, const Matrix& v, std::span<const ColumnKind> kinds,
                              std::size_t depth, const std::vector<std::optional<std::size_t>>& caps) {
  std::vector<std::size_t> rows(scores.rows());
  std::iota(rows.begin(), rows.end(), 0);
  const auto all = enumerate(scores, v, kinds, rows, depth);
  TreeOracleResult res;
  const Outcome* best = nullptr;
  for (const auto& o : all) {
    bool ok = true;
    for (std::size_t d = 0; d < caps.size(); ++d)
      if (caps[d] && o.counts[d] > *caps[d]) ok = false;
    if (ok && (!best || o.value > best->value)) best = &o;
  }
  if (!best) return res;
  res.feasible = true;
  res.value = best->value;
  res.description = *best->tree;
  res.assignment.assign(scores.rows(), -1);
  for (const auto& [r, d] : *best->assigned) res.assignment[r] = d;
  return res;
}

}  // namespace detail

// Enumerates every tree structure up to `depth` (each node a leaf or any
// split on any feature) together with every leaf assignment, and returns the
// best one meeting the share caps. `scores` are the net scores.
inline TreeOracleResult brute_force_tree_oracle(const Matrix& scores, const Matrix& v, std::span<const ColumnKind> kinds,
                                                std::size_t depth, const Constraints& constraints = {}) {
  if (depth > 2) throw std::invalid_argument("brute_force_tree_oracle: depth must be <= 2");
  if (scores.rows() > 200 || v.cols() > 4) throw std::invalid_argument("brute_force_tree_oracle: instance too large");
  for (std::size_t f = 0; f < v.cols(); ++f) {
    auto col = v.column(f);
    std::sort(col.begin(), col.end());
    if (std::unique(col.begin(), col.end()) - col.begin() > 8)
      throw std::invalid_argument("brute_force_tree_oracle: more than 8 distinct values in a feature");
  }
  return detail::solve(scores, v, kinds, depth, constraints.caps(scores.rows(), scores.cols()));
}

// Trimming by definition: per column and group, the bound is the group
// minimum/maximum or the smallest value whose empirical CDF reaches q; a row
// survives when it clears every group's bound in every column.
inline std::vector<bool> naive_trim(const Matrix& propensities, std::span<const int> groups, const SupportRule& rule) {
  const std::size_t n = propensities.rows(), k = propensities.cols();
  std::vector<bool> keep(n, true);
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t g = 0; g < k; ++g) {
      std::vector<double> vals;
      for (std::size_t i = 0; i < n; ++i)
        if (static_cast<std::size_t>(groups[i]) == g) vals.push_back(propensities(i, j));
      if (vals.empty()) continue;
      double lo, hi;
      if (rule.is_min_max()) {
        lo = vals[0];
        hi = vals[0];
        for (double x : vals) {
          if (x < lo) lo = x;
          if (x > hi) hi = x;
        }
      } else {
        const auto& q = std::get<QuantileRule>(rule.variant);
        auto quantile = [&](double level) {
          double best = std::numeric_limits<double>::infinity();
          for (double c : vals) {
            std::size_t at_most = 0;
            for (double x : vals) at_most += x <= c;
            if (static_cast<double>(at_most) >= level * static_cast<double>(vals.size()) - 1e-12 && c < best) best = c;
          }
          return best;
        };
        lo = quantile(q.q_low);
        hi = quantile(q.q_high);
      }
      for (std::size_t i = 0; i < n; ++i)
        if (propensities(i, j) < lo || propensities(i, j) > hi) keep[i] = false;
    }
  }
  return keep;
}

// |mean(a) - mean(b)| / sqrt((s2(a) + s2(b)) / 2) * 100 with n-1 variances,
// written out term by term.
inline double std_diff(std::span<const double> a, std::span<const double> b) {
  auto moments = [](std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    const double m = s / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::pair{m, ss / static_cast<double>(v.size() - 1)};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  return std::fabs(ma - mb) / std::sqrt((va + vb) / 2.0) * 100.0;
}

}  // namespace mcf::oracle
