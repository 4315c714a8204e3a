#pragma once

// Modified Causal Forest: honest multi-treatment trees whose splits minimise
// the estimated MSE of the IATEs,
//
//   sum over treatment pairs (m, l) of  MSE_m + MSE_l - 2 MCE_{m,l}
//
// plus a penalty that grows when the daughters have similar treatment shares.
// Tree structure is learned on a training sample; leaves are filled with rows
// of a disjoint estimation sample and predictions are weighted averages of
// the estimation outcomes.

#include <algorithm>
#include <numeric>
#include <optional>
#include <sstream>
#include <vector>

#include "mcf/common.hpp"
#include "mcf/data.hpp"
#include "mcf/csv.hpp"
#include "mcf/forest.hpp"
#include "mcf/tree.hpp"

namespace mcf {

struct McfParams {
  std::size_t n_trees = 1000;
  std::size_t mtry = 0;       // 0: min(p, 3 * ceil(sqrt(p)))
  std::size_t min_leaf = 12;  // per treatment arm present in the node
  std::optional<double> penalty_weight;  // unset: outcome variance of the node
  std::size_t nn_count = 1;
  double subsample_fraction = 0.5;   // training rows drawn per tree
  double estimation_fraction = 1.0;  // estimation rows drawn per tree
  std::size_t max_depth = 0;         // 0: unlimited
  std::size_t outcome = 0;           // outcome column driving the splits
  // Subtract an out-of-bag regression-forest fit of E[Y|X] from the outcomes,
  // separately within each sample, before splitting and estimation.
  bool local_centering = true;
  std::size_t centering_trees = 200;
  std::uint64_t seed = 1;

  std::size_t resolved_mtry(std::size_t p) const {
    if (mtry != 0) return std::min(mtry, p);
    const auto m = 3 * static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(p))));
    return std::clamp<std::size_t>(m, 1, p);
  }

  void validate(std::size_t p) const {
    if (n_trees < 1) throw std::invalid_argument("McfParams: n_trees must be >= 1");
    if (min_leaf < 1) throw std::invalid_argument("McfParams: min_leaf must be >= 1");
    if (nn_count < 1) throw std::invalid_argument("McfParams: nn_count must be >= 1");
    if (penalty_weight && *penalty_weight < 0) throw std::invalid_argument("McfParams: penalty_weight must be >= 0");
    if (!(subsample_fraction > 0 && subsample_fraction <= 1))
      throw std::invalid_argument("McfParams: subsample_fraction must lie in (0, 1]");
    if (!(estimation_fraction > 0 && estimation_fraction <= 1))
      throw std::invalid_argument("McfParams: estimation_fraction must lie in (0, 1]");
    if (mtry > p) throw std::invalid_argument("McfParams: mtry exceeds the number of features");
    if (local_centering && centering_trees < 1) throw std::invalid_argument("McfParams: centering_trees must be >= 1");
  }
};

class UndefinedPrediction : public EstimationError {
 public:
  using EstimationError::EstimationError;
};

// Estimation-row membership of every leaf, stored per (leaf, arm) in CSR form.
struct LeafMembers {
  std::vector<std::uint32_t> offsets;  // n_leaves * K + 1
  std::vector<std::uint32_t> rows;

  std::span<const std::uint32_t> of(std::size_t leaf, std::size_t arm, std::size_t k) const {
    const auto slot = leaf * k + arm;
    return {rows.data() + offsets[slot], offsets[slot + 1] - offsets[slot]};
  }
  friend bool operator==(const LeafMembers&, const LeafMembers&) = default;
};

struct CausalForest {
  McfParams params;
  int n_treatments = 0;
  std::size_t n_features = 0;
  std::vector<ColumnKind> kinds;
  std::vector<FlatTree> trees;
  std::vector<LeafMembers> members;
  // Estimation sample; weights index its rows.
  Matrix est_x;
  std::vector<int> est_treatment;
  Matrix est_y;      // outcomes net of est_level when centred
  Matrix est_level;  // centring fit per outcome; empty without local centring

  bool centred() const { return est_level.rows() > 0; }
  std::size_t k() const { return static_cast<std::size_t>(n_treatments); }
  std::size_t n_estimation() const { return est_treatment.size(); }

  std::span<const std::uint32_t> leaf_arm(std::size_t tree, std::size_t leaf, std::size_t arm) const {
    return members[tree].of(leaf, arm, k());
  }

  bool complete(std::size_t tree, std::size_t leaf, std::span<const int> arms) const {
    for (int a : arms)
      if (leaf_arm(tree, leaf, static_cast<std::size_t>(a)).empty()) return false;
    return true;
  }

  void check_row(std::span<const double> row) const {
    if (row.size() != n_features)
      throw DataError("prediction row has " + std::to_string(row.size()) + " features, forest expects " +
                      std::to_string(n_features));
  }

  std::vector<int> all_arms() const {
    std::vector<int> a(k());
    std::iota(a.begin(), a.end(), 0);
    return a;
  }
};

// ---------------------------------------------------------------------------
// Split objective

struct McfObjectiveOptions {
  std::size_t min_leaf = 1;
  std::optional<double> penalty_weight;
  std::size_t nn_count = 1;
};

namespace detail {

// Nearest-neighbour outcome matrix for a node: entry (i, m) is y_i when row i
// has treatment m, otherwise the mean outcome of its nn_count nearest
// node rows with treatment m. Distance: Euclidean on node-standardised
// ordered features plus Hamming on unordered categoricals. Ties go to the
// earlier node position.
inline Matrix matched_outcomes(const Matrix& x, std::span<const ColumnKind> kinds, std::span<const double> y,
                               std::span<const int> d, std::size_t k, std::span<const std::uint32_t> rows,
                               std::size_t nn_count) {
  const std::size_t n = rows.size(), p = x.cols();
  std::vector<std::size_t> cont, cat;
  std::vector<double> scale;
  for (std::size_t f = 0; f < p; ++f) {
    if (kinds[f] == ColumnKind::unordered) {
      cat.push_back(f);
      continue;
    }
    double m = 0.0, ss = 0.0;
    for (auto r : rows) m += x(r, f);
    m /= static_cast<double>(n);
    for (auto r : rows) ss += (x(r, f) - m) * (x(r, f) - m);
    const double sd = std::sqrt(ss / static_cast<double>(n));
    if (sd > 0) {
      cont.push_back(f);
      scale.push_back(1.0 / sd);
    }
  }
  std::vector<double> z(n * cont.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < cont.size(); ++c) z[i * cont.size() + c] = x(rows[i], cont[c]) * scale[c];
  std::vector<int> codes(n * cat.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < cat.size(); ++c) codes[i * cat.size() + c] = static_cast<int>(x(rows[i], cat[c]));

  // best[(i * k + m) * nn_count + s] = (distance, position), sorted ascending.
  const double inf = std::numeric_limits<double>::infinity();
  const auto none = std::numeric_limits<std::size_t>::max();
  std::vector<std::pair<double, std::size_t>> best(n * k * nn_count, {inf, none});
  auto offer = [&](std::size_t i, std::size_t m, double dist, std::size_t pos) {
    auto* slot = &best[(i * k + m) * nn_count];
    const std::pair<double, std::size_t> cand{dist, pos};
    if (!(cand < slot[nn_count - 1])) return;
    std::size_t s = nn_count - 1;
    while (s > 0 && cand < slot[s - 1]) {
      slot[s] = slot[s - 1];
      --s;
    }
    slot[s] = cand;
  };
  const std::size_t q = cont.size(), u = cat.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto di = static_cast<std::size_t>(d[rows[i]]);
    for (std::size_t j = i + 1; j < n; ++j) {
      const auto dj = static_cast<std::size_t>(d[rows[j]]);
      if (di == dj) continue;
      double dist = 0.0;
      const double* zi = z.data() + i * q;
      const double* zj = z.data() + j * q;
      for (std::size_t c = 0; c < q; ++c) {
        const double diff = zi[c] - zj[c];
        dist += diff * diff;
      }
      for (std::size_t c = 0; c < u; ++c) dist += codes[i * u + c] != codes[j * u + c] ? 1.0 : 0.0;
      offer(i, dj, dist, j);
      offer(j, di, dist, i);
    }
  }
  Matrix out(n, k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto di = static_cast<std::size_t>(d[rows[i]]);
    for (std::size_t m = 0; m < k; ++m) {
      if (m == di) {
        out(i, m) = y[rows[i]];
        continue;
      }
      const auto* slot = &best[(i * k + m) * nn_count];
      double s = 0.0;
      std::size_t c = 0;
      for (std::size_t t = 0; t < nn_count && slot[t].second != none; ++t, ++c) s += y[rows[slot[t].second]];
      out(i, m) = c ? s / static_cast<double>(c) : 0.0;  // arm absent from node: unused
    }
  }
  return out;
}

// Sufficient statistics of one daughter.
struct DaughterStats {
  std::size_t k = 0;
  std::vector<int> arms;  // arms present in the node, ascending
  std::vector<double> n, s, q;                 // per arm (indexed by treatment)
  std::vector<double> pc, pa, pb, pab;         // per pair index
  double total = 0;

  DaughterStats() = default;
  explicit DaughterStats(std::size_t k_, std::vector<int> arms_) : k(k_), arms(std::move(arms_)) {
    n.assign(k, 0);
    s.assign(k, 0);
    q.assign(k, 0);
    const auto pairs = arms.size() * (arms.size() - 1) / 2;
    pc.assign(pairs, 0);
    pa.assign(pairs, 0);
    pb.assign(pairs, 0);
    pab.assign(pairs, 0);
  }

  // pair_of[m * k + l] for m < l in `arms`.
  void add(int arm, double y, std::span<const double> matched, std::span<const std::size_t> pair_index, double sign) {
    const auto a = static_cast<std::size_t>(arm);
    total += sign;
    n[a] += sign;
    s[a] += sign * y;
    q[a] += sign * y * y;
    for (std::size_t x = 0; x < arms.size(); ++x) {
      for (std::size_t w = x + 1; w < arms.size(); ++w) {
        const auto m = static_cast<std::size_t>(arms[x]), l = static_cast<std::size_t>(arms[w]);
        if (a != m && a != l) continue;
        const auto idx = pair_index[m * k + l];
        pc[idx] += sign;
        pa[idx] += sign * matched[m];
        pb[idx] += sign * matched[l];
        pab[idx] += sign * matched[m] * matched[l];
      }
    }
  }

  double mse(std::size_t a) const {
    const double mu = s[a] / n[a];
    return std::max(0.0, q[a] / n[a] - mu * mu);
  }

  // Objective of the daughter without the share weighting.
  double term(std::span<const std::size_t> pair_index) const {
    if (arms.size() == 1) return mse(static_cast<std::size_t>(arms[0]));
    double t = 0.0;
    for (std::size_t x = 0; x < arms.size(); ++x)
      for (std::size_t w = x + 1; w < arms.size(); ++w) {
        const auto m = static_cast<std::size_t>(arms[x]), l = static_cast<std::size_t>(arms[w]);
        const auto idx = pair_index[m * k + l];
        const double mu_m = s[m] / n[m], mu_l = s[l] / n[l];
        const double c = pc[idx];
        const double mce = (pab[idx] - mu_m * pb[idx] - mu_l * pa[idx] + c * mu_m * mu_l) / c;
        t += mse(m) + mse(l) - 2.0 * mce;
      }
    return t;
  }
};

struct NodeContext {
  std::vector<int> arms;
  std::vector<std::size_t> pair_index;  // k * k
  double centre = 0.0;                  // node outcome mean
  double penalty = 0.0;
  Matrix matched;                       // centred, node positions x k
};

inline NodeContext make_node_context(const Matrix& x, std::span<const ColumnKind> kinds, std::span<const double> y,
                                     std::span<const int> d, std::size_t k, std::span<const std::uint32_t> rows,
                                     const McfObjectiveOptions& opt) {
  NodeContext ctx;
  std::vector<std::size_t> count(k, 0);
  for (auto r : rows) ++count[static_cast<std::size_t>(d[r])];
  for (std::size_t a = 0; a < k; ++a)
    if (count[a]) ctx.arms.push_back(static_cast<int>(a));
  ctx.pair_index.assign(k * k, 0);
  std::size_t idx = 0;
  for (std::size_t x1 = 0; x1 < ctx.arms.size(); ++x1)
    for (std::size_t x2 = x1 + 1; x2 < ctx.arms.size(); ++x2)
      ctx.pair_index[static_cast<std::size_t>(ctx.arms[x1]) * k + static_cast<std::size_t>(ctx.arms[x2])] = idx++;
  for (auto r : rows) ctx.centre += y[r];
  ctx.centre /= static_cast<double>(rows.size());
  double var = 0.0;
  for (auto r : rows) var += (y[r] - ctx.centre) * (y[r] - ctx.centre);
  var /= static_cast<double>(rows.size());
  ctx.penalty = opt.penalty_weight ? *opt.penalty_weight : var;
  if (ctx.arms.size() > 1) {
    ctx.matched = matched_outcomes(x, kinds, y, d, k, rows, opt.nn_count);
    for (auto& v : ctx.matched.data()) v -= ctx.centre;
  } else {
    ctx.matched = Matrix(rows.size(), k, 0.0);
  }
  return ctx;
}

inline double combine_score(const DaughterStats& left, const DaughterStats& right, const NodeContext& ctx) {
  const double nl = left.total, nr = right.total, n = nl + nr;
  double diff = 0.0;
  for (int a : ctx.arms) {
    const auto m = static_cast<std::size_t>(a);
    diff += std::fabs(left.n[m] / nl - right.n[m] / nr);
  }
  const double similarity = 1.0 - 0.5 * diff;
  return nl / n * left.term(ctx.pair_index) + nr / n * right.term(ctx.pair_index) + ctx.penalty * similarity;
}

inline bool daughters_valid(const DaughterStats& left, const DaughterStats& right, const NodeContext& ctx,
                            std::size_t min_leaf) {
  const auto ml = static_cast<double>(min_leaf);
  for (int a : ctx.arms) {
    const auto m = static_cast<std::size_t>(a);
    if (left.n[m] < ml || right.n[m] < ml) return false;
  }
  return true;
}

}  // namespace detail

// Direct evaluation of the split objective for one candidate split of
// `node_rows`. Returns nullopt when a daughter misses min_leaf rows of an arm
// present in the node. Lower is better.
inline std::optional<double> split_objective(const Matrix& x, std::span<const ColumnKind> kinds,
                                             std::span<const double> y, std::span<const int> d, int n_treatments,
                                             std::span<const std::uint32_t> node_rows, const SplitRule& rule,
                                             const McfObjectiveOptions& opt) {
  const auto k = static_cast<std::size_t>(n_treatments);
  const auto ctx = detail::make_node_context(x, kinds, y, d, k, node_rows, opt);
  detail::DaughterStats left(k, ctx.arms), right(k, ctx.arms);
  for (std::size_t i = 0; i < node_rows.size(); ++i) {
    const auto r = node_rows[i];
    auto& side = rule.goes_left(x.row(r)) ? left : right;
    side.add(d[r], y[r] - ctx.centre, ctx.matched.row(i), ctx.pair_index, 1.0);
  }
  if (left.total == 0 || right.total == 0 || !detail::daughters_valid(left, right, ctx, opt.min_leaf)) return std::nullopt;
  return detail::combine_score(left, right, ctx);
}

namespace detail {

class McfTreeGrower {
 public:
  McfTreeGrower(const Matrix& x, std::span<const ColumnKind> kinds, std::span<const double> y, std::span<const int> d,
                std::size_t k, const McfParams& params, Rng& rng)
      : x_(x), kinds_(kinds), y_(y), d_(d), k_(k), params_(params), rng_(rng), mtry_(params.resolved_mtry(x.cols())) {
    opt_.min_leaf = params.min_leaf;
    opt_.penalty_weight = params.penalty_weight;
    opt_.nn_count = params.nn_count;
  }

  FlatTree grow(std::vector<std::uint32_t> rows) {
    FlatTree tree;
    tree.nodes.push_back({});
    struct Item {
      std::size_t node, depth;
      std::vector<std::uint32_t> rows;
    };
    std::vector<Item> stack;
    stack.push_back({0, 0, std::move(rows)});
    while (!stack.empty()) {
      auto item = std::move(stack.back());
      stack.pop_back();
      std::optional<SplitRule> rule;
      if (params_.max_depth == 0 || item.depth < params_.max_depth) rule = best_split(item.rows);
      if (!rule) {
        tree.nodes[item.node].leaf = static_cast<std::int32_t>(tree.n_leaves++);
        continue;
      }
      std::vector<std::uint32_t> left, right;
      for (auto r : item.rows) (rule->goes_left(x_(r, rule->feature)) ? left : right).push_back(r);
      const auto l = tree.nodes.size();
      tree.nodes[item.node].rule = *rule;
      tree.nodes[item.node].left = static_cast<std::int32_t>(l);
      tree.nodes[item.node].right = static_cast<std::int32_t>(l + 1);
      tree.nodes.push_back({});
      tree.nodes.push_back({});
      stack.push_back({l + 1, item.depth + 1, std::move(right)});
      stack.push_back({l, item.depth + 1, std::move(left)});
    }
    return tree;
  }

  std::optional<SplitRule> best_split(const std::vector<std::uint32_t>& rows) {
    std::vector<std::size_t> count(k_, 0);
    for (auto r : rows) ++count[static_cast<std::size_t>(d_[r])];
    for (auto c : count)
      if (c != 0 && c < 2 * params_.min_leaf) return std::nullopt;

    auto features = sample_without_replacement(x_.cols(), mtry_, rng_);
    std::sort(features.begin(), features.end());

    const auto ctx = make_node_context(x_, kinds_, y_, d_, k_, rows, opt_);
    DaughterStats total(k_, ctx.arms);
    for (std::size_t i = 0; i < rows.size(); ++i)
      total.add(d_[rows[i]], y_[rows[i]] - ctx.centre, ctx.matched.row(i), ctx.pair_index, 1.0);

    const std::size_t n = rows.size();
    std::optional<SplitRule> best;
    double best_score = std::numeric_limits<double>::infinity();
    std::vector<std::size_t> order(n);
    std::vector<double> keys(n);
    std::vector<int> category_order;
    for (auto f : features) {
      fill_keys(rows, f, ctx, keys, category_order);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return keys[a] < keys[b]; });
      DaughterStats left(k_, ctx.arms);
      DaughterStats right = total;
      for (std::size_t i = 0; i + 1 < n; ++i) {
        const auto pos = order[i];
        const auto r = rows[pos];
        const double yc = y_[r] - ctx.centre;
        left.add(d_[r], yc, ctx.matched.row(pos), ctx.pair_index, 1.0);
        right.add(d_[r], yc, ctx.matched.row(pos), ctx.pair_index, -1.0);
        const double lo = keys[pos], hi = keys[order[i + 1]];
        if (!(lo < hi)) continue;
        if (!daughters_valid(left, right, ctx, params_.min_leaf)) continue;
        const double score = combine_score(left, right, ctx);
        if (score < best_score) {
          best_score = score;
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

 private:
  // Sort keys; unordered categories are ranked by their node outcome mean.
  void fill_keys(const std::vector<std::uint32_t>& rows, std::size_t f, const NodeContext&, std::vector<double>& keys,
                 std::vector<int>& category_order) const {
    if (kinds_[f] != ColumnKind::unordered) {
      for (std::size_t i = 0; i < rows.size(); ++i) keys[i] = x_(rows[i], f);
      return;
    }
    std::vector<double> sum(kMaxCategories, 0.0), cnt(kMaxCategories, 0.0);
    for (auto r : rows) {
      const auto c = static_cast<std::size_t>(x_(r, f));
      sum[c] += y_[r];
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
    for (std::size_t i = 0; i < category_order.size(); ++i)
      rank[static_cast<std::size_t>(category_order[i])] = static_cast<double>(i);
    for (std::size_t i = 0; i < rows.size(); ++i) keys[i] = rank[static_cast<std::size_t>(x_(rows[i], f))];
  }

  const Matrix& x_;
  std::span<const ColumnKind> kinds_;
  std::span<const double> y_;
  std::span<const int> d_;
  std::size_t k_;
  const McfParams& params_;
  Rng& rng_;
  std::size_t mtry_;
  McfObjectiveOptions opt_;
};

inline LeafMembers fill_leaves(const FlatTree& tree, const Matrix& est_x, std::span<const int> est_d, std::size_t k,
                               std::span<const std::uint32_t> est_rows) {
  std::vector<std::vector<std::uint32_t>> slots(tree.n_leaves * k);
  for (auto r : est_rows) slots[tree.leaf_of(est_x.row(r)) * k + static_cast<std::size_t>(est_d[r])].push_back(r);
  LeafMembers m;
  m.offsets.reserve(slots.size() + 1);
  m.offsets.push_back(0);
  for (const auto& s : slots) {
    m.rows.insert(m.rows.end(), s.begin(), s.end());
    m.offsets.push_back(static_cast<std::uint32_t>(m.rows.size()));
  }
  return m;
}

// Out-of-bag predictions of y from x (bagged trees over all features); rows
// that no tree left out fall back to the full-forest prediction.
inline std::vector<double> centring_fit(const Matrix& x, std::span<const ColumnKind> kinds, std::span<const double> y,
                                        std::size_t n_trees, std::uint64_t seed) {
  ForestParams fp;
  fp.n_trees = n_trees;
  fp.mtry = x.cols();
  fp.min_leaf = 5;
  fp.seed = seed;
  const auto model = fit_regression(x, kinds, y, fp);
  auto pred = model.oob_predict(x);
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (std::isnan(pred[i])) pred[i] = model.predict(x.row(i));
  return pred;
}

inline constexpr std::uint64_t kTrainCentringStream = 0xCE00000000ull;
inline constexpr std::uint64_t kEstCentringStream = 0xCF00000000ull;

}  // namespace detail

// Fits the forest: structure from (x_train, d_train, y_train), leaves filled
// from the estimation sample. Both samples must contain every treatment.
inline CausalForest fit_mcf(const Matrix& x_train, std::span<const ColumnKind> kinds, std::span<const int> d_train,
                            std::span<const double> y_train, const Matrix& x_est, std::span<const int> d_est,
                            const Matrix& y_est, int n_treatments, const McfParams& params) {
  params.validate(x_train.cols());
  check_feature_codes(x_train, kinds);
  check_feature_codes(x_est, kinds);
  const auto k = static_cast<std::size_t>(n_treatments);
  if (x_train.rows() != d_train.size() || x_train.rows() != y_train.size())
    throw std::invalid_argument("fit_mcf: training sample size mismatch");
  if (x_est.rows() != d_est.size() || x_est.rows() != y_est.rows())
    throw std::invalid_argument("fit_mcf: estimation sample size mismatch");
  if (x_est.cols() != x_train.cols()) throw std::invalid_argument("fit_mcf: feature count mismatch");
  auto check_arms = [&](std::span<const int> d, const char* which) {
    std::vector<bool> seen(k, false);
    for (int t : d) {
      if (t < 0 || static_cast<std::size_t>(t) >= k) throw DataError("fit_mcf: treatment label out of range");
      seen[static_cast<std::size_t>(t)] = true;
    }
    for (std::size_t a = 0; a < k; ++a)
      if (!seen[a])
        throw EstimationError(std::string("fit_mcf: treatment ") + std::to_string(a) + " absent from the " + which +
                              " sample");
  };
  check_arms(d_train, "training");
  check_arms(d_est, "estimation");

  CausalForest forest;
  forest.params = params;
  forest.n_treatments = n_treatments;
  forest.n_features = x_train.cols();
  forest.kinds.assign(kinds.begin(), kinds.end());
  forest.est_x = x_est;
  forest.est_treatment.assign(d_est.begin(), d_est.end());
  forest.est_y = y_est;
  std::vector<double> y_split(y_train.begin(), y_train.end());
  if (params.local_centering) {
    const auto fit = detail::centring_fit(x_train, kinds, y_train, params.centering_trees,
                                          derive_seed(params.seed, detail::kTrainCentringStream));
    for (std::size_t i = 0; i < y_split.size(); ++i) y_split[i] -= fit[i];
    forest.est_level = Matrix(y_est.rows(), y_est.cols(), 0.0);
    for (std::size_t m = 0; m < y_est.cols(); ++m) {
      const auto col = y_est.column(m);
      const auto lvl = detail::centring_fit(x_est, kinds, col, params.centering_trees,
                                            derive_seed(params.seed, detail::kEstCentringStream + m));
      for (std::size_t i = 0; i < col.size(); ++i) {
        forest.est_level(i, m) = lvl[i];
        forest.est_y(i, m) = col[i] - lvl[i];
      }
    }
  }
  forest.trees.resize(params.n_trees);
  forest.members.resize(params.n_trees);

  const auto n_sub = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(params.subsample_fraction * static_cast<double>(x_train.rows()))));
  const auto n_est_sub = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(params.estimation_fraction * static_cast<double>(x_est.rows()))));
  parallel_for(params.n_trees, [&](std::size_t t) {
    Rng rng(derive_seed(params.seed, t));
    auto sub = sample_without_replacement(x_train.rows(), n_sub, rng);
    std::sort(sub.begin(), sub.end());
    std::vector<std::uint32_t> rows(sub.begin(), sub.end());
    detail::McfTreeGrower grower(x_train, kinds, y_split, d_train, k, params, rng);
    forest.trees[t] = grower.grow(std::move(rows));
    std::vector<std::uint32_t> est_rows;
    if (n_est_sub == x_est.rows()) {
      est_rows.resize(x_est.rows());
      std::iota(est_rows.begin(), est_rows.end(), 0u);
    } else {
      auto e = sample_without_replacement(x_est.rows(), n_est_sub, rng);
      std::sort(e.begin(), e.end());
      est_rows.assign(e.begin(), e.end());
    }
    forest.members[t] = detail::fill_leaves(forest.trees[t], x_est, d_est, k, est_rows);
  });
  return forest;
}

inline CausalForest fit_mcf(const Dataset& train, const Dataset& estimation, const McfParams& params) {
  if (train.size() == 0 || estimation.size() == 0) throw DataError("fit_mcf: empty sample");
  if (params.outcome >= train.y.cols()) throw std::invalid_argument("fit_mcf: outcome column out of range");
  const auto y = train.y.column(params.outcome);
  const auto kinds = train.covariate_kinds();
  return fit_mcf(train.x, kinds, train.treatment, y, estimation.x, estimation.treatment, estimation.y,
                 train.n_treatments(), params);
}

// ---------------------------------------------------------------------------
// Weights and predictions

struct WeightVector {
  // Per arm: (estimation row, weight) sorted by row, weights > 0.
  std::vector<std::vector<std::pair<std::uint32_t, double>>> arms;
  std::vector<std::size_t> trees_used;  // per arm

  double sum(std::size_t arm) const {
    double s = 0.0;
    for (const auto& [r, w] : arms[arm]) s += w;
    return s;
  }
};

// Each tree whose leaf for `row` holds at least one estimation row of every
// requested arm contributes 1/|leaf arm| to each member of each arm; the
// contributions are averaged over those trees. Empty `arms` requests all.
inline WeightVector weights_for(const CausalForest& forest, std::span<const double> row, std::span<const int> arms = {}) {
  forest.check_row(row);
  const auto all = forest.all_arms();
  if (arms.empty()) arms = all;
  const auto k = forest.k();
  std::vector<std::vector<double>> dense(k);
  for (int a : arms) dense[static_cast<std::size_t>(a)].assign(forest.n_estimation(), 0.0);
  std::size_t used = 0;
  for (std::size_t t = 0; t < forest.trees.size(); ++t) {
    const auto leaf = forest.trees[t].leaf_of(row);
    if (!forest.complete(t, leaf, arms)) continue;
    ++used;
    for (int a : arms) {
      const auto members = forest.leaf_arm(t, leaf, static_cast<std::size_t>(a));
      const double w = 1.0 / static_cast<double>(members.size());
      for (auto r : members) dense[static_cast<std::size_t>(a)][r] += w;
    }
  }
  if (used == 0) throw UndefinedPrediction("no tree has a complete leaf for the requested arms at this point");
  WeightVector out;
  out.arms.resize(k);
  out.trees_used.assign(k, 0);
  for (int a : arms) {
    const auto arm = static_cast<std::size_t>(a);
    out.trees_used[arm] = used;
    for (std::size_t r = 0; r < dense[arm].size(); ++r)
      if (dense[arm][r] > 0) out.arms[arm].push_back({static_cast<std::uint32_t>(r), dense[arm][r] / static_cast<double>(used)});
  }
  return out;
}

// mu_d(x) = sum_i w_i^d y_i for every arm d (all arms must be complete).
// With centring, y_i is the centred outcome and the arm average of
// sum_i w_i^d level_i is added back to every arm, so contrasts are unchanged.
inline std::vector<double> potential_outcomes(const CausalForest& forest, std::span<const double> row,
                                              std::size_t outcome = 0) {
  if (outcome >= forest.est_y.cols()) throw std::invalid_argument("potential_outcomes: outcome column out of range");
  const auto w = weights_for(forest, row);
  std::vector<double> mu(forest.k(), 0.0);
  double level = 0.0;
  for (std::size_t a = 0; a < forest.k(); ++a)
    for (const auto& [r, wt] : w.arms[a]) {
      mu[a] += wt * forest.est_y(r, outcome);
      if (forest.centred()) level += wt * forest.est_level(r, outcome);
    }
  for (auto& m : mu) m += level / static_cast<double>(forest.k());
  return mu;
}

inline double iate(const CausalForest& forest, std::span<const double> row, int d, int d_ref, std::size_t outcome = 0) {
  const int arms[2] = {d, d_ref};
  const auto w = weights_for(forest, row, arms);
  double a = 0.0, b = 0.0;
  for (const auto& [r, wt] : w.arms[static_cast<std::size_t>(d)]) a += wt * forest.est_y(r, outcome);
  for (const auto& [r, wt] : w.arms[static_cast<std::size_t>(d_ref)]) b += wt * forest.est_y(r, outcome);
  return a - b;
}

// Sparse (prediction row, arm, estimation row, weight) triplets for audit.
inline std::string weights_triplet_csv(const CausalForest& forest, const Matrix& x) {
  std::ostringstream out;
  csv::Writer w(out);
  w.header({"prediction_row", "arm", "estimation_row", "weight"});
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto wv = weights_for(forest, x.row(i));
    for (std::size_t a = 0; a < forest.k(); ++a)
      for (const auto& [r, wt] : wv.arms[a])
        w.row({std::to_string(i), std::to_string(a), std::to_string(r), format_double(wt)});
  }
  return out.str();
}

}  // namespace mcf
