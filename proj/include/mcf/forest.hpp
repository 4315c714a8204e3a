#pragma once

// Random forest for regression and classification. Used for propensity
// scores and for predicting pseudo programme start months.

#include <algorithm>
#include <numeric>
#include <optional>
#include <vector>

#include "mcf/common.hpp"
#include "mcf/tree.hpp"

namespace mcf {

enum class ForestTask { regression, classification };

struct ForestParams {
  std::size_t n_trees = 500;
  std::size_t mtry = 0;  // 0: ceil(sqrt(p)) for classification, ceil(p/3) for regression
  std::size_t min_leaf = 5;
  double bootstrap_fraction = 0.5;  // subsampling without replacement
  std::uint64_t seed = 1;

  std::size_t resolved_mtry(std::size_t p, ForestTask task) const {
    if (mtry != 0) return mtry;
    const double base = task == ForestTask::classification ? std::sqrt(static_cast<double>(p))
                                                           : static_cast<double>(p) / 3.0;
    return std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(base)), 1, std::max<std::size_t>(p, 1));
  }

  void validate(std::size_t p) const {
    if (n_trees < 1) throw std::invalid_argument("ForestParams: n_trees must be >= 1");
    if (min_leaf < 1) throw std::invalid_argument("ForestParams: min_leaf must be >= 1");
    if (!(bootstrap_fraction > 0.0 && bootstrap_fraction <= 1.0))
      throw std::invalid_argument("ForestParams: bootstrap_fraction must lie in (0, 1]");
    if (mtry > p) throw std::invalid_argument("ForestParams: mtry exceeds the number of features");
  }
};

struct ForestModel {
  ForestTask task = ForestTask::regression;
  std::size_t n_features = 0;
  std::vector<ColumnKind> kinds;
  int n_classes = 1;  // payload width; 1 for regression
  std::size_t n_train = 0;
  std::vector<FlatTree> trees;
  std::vector<std::vector<double>> leaf_values;       // per tree, n_leaves * n_classes
  std::vector<std::vector<std::uint32_t>> in_bag;     // per tree, sorted training rows

  std::size_t width() const { return static_cast<std::size_t>(n_classes); }

  void check_row(std::span<const double> row) const {
    if (row.size() != n_features)
      throw DataError("prediction row has " + std::to_string(row.size()) + " features, model expects " +
                      std::to_string(n_features));
  }

  std::span<const double> leaf_payload(std::size_t t, std::span<const double> row) const {
    const auto leaf = trees[t].leaf_of(row);
    return {leaf_values[t].data() + leaf * width(), width()};
  }

  double predict(std::span<const double> row) const {
    check_row(row);
    if (task != ForestTask::regression) throw std::logic_error("predict: model is not a regression forest");
    double s = 0.0;
    for (std::size_t t = 0; t < trees.size(); ++t) s += leaf_payload(t, row)[0];
    return s / static_cast<double>(trees.size());
  }

  std::vector<double> predict_proba(std::span<const double> row) const {
    check_row(row);
    if (task != ForestTask::classification) throw std::logic_error("predict_proba: model is not a classifier");
    std::vector<double> p(width(), 0.0);
    for (std::size_t t = 0; t < trees.size(); ++t) {
      const auto leaf = leaf_payload(t, row);
      for (std::size_t k = 0; k < p.size(); ++k) p[k] += leaf[k];
    }
    double total = 0.0;
    for (double& v : p) {
      v /= static_cast<double>(trees.size());
      total += v;
    }
    for (double& v : p) v /= total;
    return p;
  }

  Matrix predict_proba(const Matrix& x) const {
    Matrix out(x.rows(), width());
    parallel_for(x.rows(), [&](std::size_t i) {
      const auto p = predict_proba(x.row(i));
      std::copy(p.begin(), p.end(), out.row(i).begin());
    });
    return out;
  }

  std::vector<double> predict(const Matrix& x) const {
    std::vector<double> out(x.rows());
    parallel_for(x.rows(), [&](std::size_t i) { out[i] = predict(x.row(i)); });
    return out;
  }

  // Out-of-bag regression predictions; NaN for rows that were in every bag.
  std::vector<double> oob_predict(const Matrix& x) const {
    std::vector<double> sum(x.rows(), 0.0);
    std::vector<std::size_t> count(x.rows(), 0);
    for (std::size_t t = 0; t < trees.size(); ++t) {
      std::size_t b = 0;
      const auto& bag = in_bag[t];
      for (std::size_t i = 0; i < x.rows(); ++i) {
        while (b < bag.size() && bag[b] < i) ++b;
        if (b < bag.size() && bag[b] == i) continue;
        sum[i] += leaf_payload(t, x.row(i))[0];
        ++count[i];
      }
    }
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] = count[i] ? sum[i] / static_cast<double>(count[i]) : std::nan("");
    return sum;
  }

  // Out-of-bag class probabilities for the training rows; rows that were in
  // every bag get the full-forest probabilities.
  Matrix oob_predict_proba(const Matrix& x) const {
    if (task != ForestTask::classification) throw std::logic_error("oob_predict_proba: model is not a classifier");
    const auto k = static_cast<std::size_t>(n_classes);
    Matrix out(x.rows(), k, 0.0);
    std::vector<std::size_t> count(x.rows(), 0);
    for (std::size_t t = 0; t < trees.size(); ++t) {
      std::size_t b = 0;
      const auto& bag = in_bag[t];
      for (std::size_t i = 0; i < x.rows(); ++i) {
        while (b < bag.size() && bag[b] < i) ++b;
        if (b < bag.size() && bag[b] == i) continue;
        const auto p = leaf_payload(t, x.row(i));
        for (std::size_t d = 0; d < k; ++d) out(i, d) += p[d];
        ++count[i];
      }
    }
    for (std::size_t i = 0; i < x.rows(); ++i) {
      if (count[i] == 0) {
        const auto p = predict_proba(x.row(i));
        for (std::size_t d = 0; d < k; ++d) out(i, d) = p[d];
        continue;
      }
      for (std::size_t d = 0; d < k; ++d) out(i, d) /= static_cast<double>(count[i]);
    }
    return out;
  }
};

namespace detail {

// Grows one tree on `rows` of (x, target). For classification the target is
// the integer class label and payloads are class frequencies.
template <ForestTask Task>
class BaseTreeGrower {
 public:
  BaseTreeGrower(const Matrix& x, std::span<const ColumnKind> kinds, std::span<const double> target, int n_classes,
                 const ForestParams& params, std::size_t mtry, Rng& rng)
      : x_(x), kinds_(kinds), target_(target), n_classes_(n_classes), params_(params), mtry_(mtry), rng_(rng) {}

  void grow(std::vector<std::size_t> rows, FlatTree& tree, std::vector<double>& payload) {
    tree.nodes.clear();
    payload.clear();
    tree.nodes.push_back({});
    std::vector<std::pair<std::size_t, std::vector<std::size_t>>> stack;
    stack.emplace_back(0, std::move(rows));
    while (!stack.empty()) {
      auto [node, members] = std::move(stack.back());
      stack.pop_back();
      std::optional<SplitRule> rule;
      if (members.size() >= 2 * params_.min_leaf && !pure(members)) rule = best_split(members);
      if (!rule) {
        tree.nodes[node].leaf = static_cast<std::int32_t>(tree.n_leaves++);
        append_payload(members, payload);
        continue;
      }
      std::vector<std::size_t> left, right;
      for (auto r : members) (rule->goes_left(x_(r, rule->feature)) ? left : right).push_back(r);
      tree.nodes[node].rule = *rule;
      const auto l = tree.nodes.size();
      tree.nodes.push_back({});
      tree.nodes.push_back({});
      tree.nodes[node].left = static_cast<std::int32_t>(l);
      tree.nodes[node].right = static_cast<std::int32_t>(l + 1);
      stack.emplace_back(l + 1, std::move(right));
      stack.emplace_back(l, std::move(left));
    }
  }

 private:
  bool pure(const std::vector<std::size_t>& rows) const {
    for (auto r : rows)
      if (target_[r] != target_[rows.front()]) return false;
    return true;
  }

  void append_payload(const std::vector<std::size_t>& rows, std::vector<double>& payload) const {
    if constexpr (Task == ForestTask::regression) {
      double s = 0.0;
      for (auto r : rows) s += target_[r];
      payload.push_back(s / static_cast<double>(rows.size()));
    } else {
      std::vector<double> freq(static_cast<std::size_t>(n_classes_), 0.0);
      for (auto r : rows) freq[static_cast<std::size_t>(target_[r])] += 1.0;
      for (double f : freq) payload.push_back(f / static_cast<double>(rows.size()));
    }
  }

  // Per-row sort key: the feature value, or for unordered categoricals the
  // rank of the category in the outcome-mean ordering.
  std::vector<double> sort_keys(const std::vector<std::size_t>& rows, std::size_t f,
                                std::vector<int>& category_order) const {
    std::vector<double> keys(rows.size());
    if (kinds_[f] != ColumnKind::unordered) {
      for (std::size_t i = 0; i < rows.size(); ++i) keys[i] = x_(rows[i], f);
      return keys;
    }
    std::vector<double> sum(kMaxCategories, 0.0), cnt(kMaxCategories, 0.0);
    int majority = 0;
    if constexpr (Task == ForestTask::classification) {
      std::vector<double> freq(static_cast<std::size_t>(n_classes_), 0.0);
      for (auto r : rows) freq[static_cast<std::size_t>(target_[r])] += 1.0;
      majority = static_cast<int>(std::max_element(freq.begin(), freq.end()) - freq.begin());
    }
    for (auto r : rows) {
      const auto c = static_cast<std::size_t>(x_(r, f));
      if constexpr (Task == ForestTask::regression) sum[c] += target_[r];
      else sum[c] += static_cast<int>(target_[r]) == majority ? 1.0 : 0.0;
      cnt[c] += 1.0;
    }
    category_order.clear();
    for (int c = 0; c < kMaxCategories; ++c)
      if (cnt[static_cast<std::size_t>(c)] > 0) category_order.push_back(c);
    std::stable_sort(category_order.begin(), category_order.end(), [&](int a, int b) {
      return sum[static_cast<std::size_t>(a)] / cnt[static_cast<std::size_t>(a)] <
             sum[static_cast<std::size_t>(b)] / cnt[static_cast<std::size_t>(b)];
    });
    std::vector<double> rank(kMaxCategories, 0.0);
    for (std::size_t i = 0; i < category_order.size(); ++i) rank[static_cast<std::size_t>(category_order[i])] = static_cast<double>(i);
    for (std::size_t i = 0; i < rows.size(); ++i) keys[i] = rank[static_cast<std::size_t>(x_(rows[i], f))];
    return keys;
  }

  std::optional<SplitRule> best_split(const std::vector<std::size_t>& rows) {
    const std::size_t p = x_.cols();
    auto features = sample_without_replacement(p, mtry_, rng_);
    std::sort(features.begin(), features.end());

    const std::size_t n = rows.size();
    const std::size_t width = Task == ForestTask::regression ? 1 : static_cast<std::size_t>(n_classes_);
    // Node totals, regression targets centred on the node mean.
    double centre = 0.0;
    if constexpr (Task == ForestTask::regression) {
      for (auto r : rows) centre += target_[r];
      centre /= static_cast<double>(n);
    }
    auto value = [&](std::size_t r) { return target_[r] - centre; };
    std::vector<double> total(width, 0.0);
    for (auto r : rows) {
      if constexpr (Task == ForestTask::regression) total[0] += value(r);
      else total[static_cast<std::size_t>(target_[r])] += 1.0;
    }
    auto score_of = [&](const std::vector<double>& left, double nl) {
      double s = 0.0;
      const double nr = static_cast<double>(n) - nl;
      for (std::size_t k = 0; k < width; ++k) {
        const double right = total[k] - left[k];
        s += left[k] * left[k] / nl + right * right / nr;
      }
      return s;
    };
    double parent = 0.0;
    for (std::size_t k = 0; k < width; ++k) parent += total[k] * total[k] / static_cast<double>(n);
    double node_ss = 0.0;
    if constexpr (Task == ForestTask::regression) {
      for (auto r : rows) node_ss += value(r) * value(r);
    } else {
      node_ss = static_cast<double>(n);
    }
    const double min_gain = 1e-12 * std::max(node_ss, 1e-300);

    std::optional<SplitRule> best;
    double best_score = parent + min_gain;
    std::vector<std::size_t> order(n);
    std::vector<int> category_order;
    std::vector<double> left(width);
    for (auto f : features) {
      const auto keys = sort_keys(rows, f, category_order);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return keys[a] < keys[b]; });
      std::fill(left.begin(), left.end(), 0.0);
      for (std::size_t i = 0; i + 1 < n; ++i) {
        const auto r = rows[order[i]];
        if constexpr (Task == ForestTask::regression) left[0] += value(r);
        else left[static_cast<std::size_t>(target_[r])] += 1.0;
        const std::size_t nl = i + 1;
        if (nl < params_.min_leaf || n - nl < params_.min_leaf) continue;
        const double lo = keys[order[i]], hi = keys[order[i + 1]];
        if (!(lo < hi)) continue;
        const double s = score_of(left, static_cast<double>(nl));
        if (s > best_score) {
          best_score = s;
          SplitRule rule;
          rule.feature = f;
          if (kinds_[f] == ColumnKind::unordered) {
            rule.categorical = true;
            for (std::size_t c = 0; c <= static_cast<std::size_t>(lo); ++c)
              rule.left_categories |= std::uint64_t{1} << category_order[c];
          } else {
            rule.threshold = midpoint(lo, hi);
          }
          best = rule;
        }
      }
    }
    return best;
  }

  const Matrix& x_;
  std::span<const ColumnKind> kinds_;
  std::span<const double> target_;
  int n_classes_;
  const ForestParams& params_;
  std::size_t mtry_;
  Rng& rng_;
};

template <ForestTask Task>
ForestModel fit_forest(const Matrix& x, std::span<const ColumnKind> kinds, std::span<const double> target,
                       int n_classes, const ForestParams& params) {
  params.validate(x.cols());
  check_feature_codes(x, kinds);
  if (x.rows() != target.size()) throw std::invalid_argument("fit_forest: target length mismatch");
  if (x.rows() < 2 * params.min_leaf)
    throw DataError("fit_forest: need at least 2*min_leaf = " + std::to_string(2 * params.min_leaf) +
                    " rows, got " + std::to_string(x.rows()));
  ForestModel model;
  model.task = Task;
  model.n_features = x.cols();
  model.kinds.assign(kinds.begin(), kinds.end());
  model.n_classes = n_classes;
  model.n_train = x.rows();
  model.trees.resize(params.n_trees);
  model.leaf_values.resize(params.n_trees);
  model.in_bag.resize(params.n_trees);
  const auto mtry = params.resolved_mtry(x.cols(), Task);
  const auto bag_size = std::max<std::size_t>(
      2 * params.min_leaf, static_cast<std::size_t>(std::llround(params.bootstrap_fraction * static_cast<double>(x.rows()))));
  parallel_for(params.n_trees, [&](std::size_t t) {
    Rng rng(derive_seed(params.seed, t));
    auto bag = sample_without_replacement(x.rows(), bag_size, rng);
    std::sort(bag.begin(), bag.end());
    model.in_bag[t].assign(bag.begin(), bag.end());
    BaseTreeGrower<Task> grower(x, kinds, target, n_classes, params, mtry, rng);
    grower.grow(std::move(bag), model.trees[t], model.leaf_values[t]);
  });
  return model;
}

}  // namespace detail

inline ForestModel fit_regression(const Matrix& x, std::span<const ColumnKind> kinds, std::span<const double> y,
                                  const ForestParams& params) {
  for (double v : y)
    if (!std::isfinite(v)) throw DataError("fit_regression: non-finite target");
  return detail::fit_forest<ForestTask::regression>(x, kinds, y, 1, params);
}

// Labels must lie in 0..n_classes-1; n_classes = 0 infers max label + 1.
inline ForestModel fit_classification(const Matrix& x, std::span<const ColumnKind> kinds, std::span<const int> labels,
                                      const ForestParams& params, int n_classes = 0) {
  if (labels.empty()) throw DataError("fit_classification: no rows");
  const int max_label = *std::max_element(labels.begin(), labels.end());
  if (n_classes == 0) n_classes = max_label + 1;
  std::vector<double> target(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= n_classes) throw DataError("fit_classification: label out of range");
    target[i] = labels[i];
  }
  return detail::fit_forest<ForestTask::classification>(x, kinds, target, n_classes, params);
}

// Out-of-bag R^2 of a regression forest on its training data.
inline double oob_r2(const ForestModel& model, const Matrix& x, std::span<const double> y) {
  const auto pred = model.oob_predict(x);
  double ss_res = 0.0, ss_tot = 0.0, m = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < y.size(); ++i)
    if (!std::isnan(pred[i])) {
      m += y[i];
      ++n;
    }
  m /= static_cast<double>(n);
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (std::isnan(pred[i])) continue;
    ss_res += (y[i] - pred[i]) * (y[i] - pred[i]);
    ss_tot += (y[i] - m) * (y[i] - m);
  }
  return 1.0 - ss_res / ss_tot;
}

}  // namespace mcf
