#pragma once

// Aggregation of forest predictions into ATE, ATET, GATE, BGATE and effect
// curves. Every estimand is a linear functional sum_j c_j * IATE(x_j) of the
// prediction rows, so all of them share one point-estimate and one variance
// routine:
//
//   Var = sum_i (wbar_i^d)^2 s_i^2 + sum_i (wbar_i^d')^2 s_i^2
//
// where wbar is the aggregated forest weight of estimation row i and s_i^2 a
// leave-one-out squared residual. Arms never share rows, so the cross term is 0.

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mcf/causal_forest.hpp"
#include "mcf/csv.hpp"

namespace mcf {

struct Contrast {
  int treated = 1;
  int reference = 0;

  Contrast reversed() const { return {reference, treated}; }
  std::string label(std::span<const std::string> names = {}) const {
    auto name = [&](int d) {
      return static_cast<std::size_t>(d) < names.size() ? names[static_cast<std::size_t>(d)] : std::to_string(d);
    };
    return name(treated) + "-" + name(reference);
  }
  friend bool operator==(const Contrast&, const Contrast&) = default;
};

struct EffectEstimate {
  std::string estimand;  // ATE, ATET, GATE, GATE-ATE, BGATE, BGATE-ATE
  Contrast contrast;
  std::string cell;
  std::string outcome;
  double estimate = 0.0;
  double se = 0.0;
  double pvalue = 1.0;
  std::size_t n_effective = 0;  // prediction rows entering the estimand

  bool significant(double alpha = 0.05) const { return pvalue < alpha; }
};

struct CurvePoint {
  std::size_t month = 0;  // 1-based position among the outcome columns
  EffectEstimate effect;
  bool significant5 = false;
};

using EffectCurve = std::vector<CurvePoint>;

// Assignment of prediction rows to the cells of a heterogeneity (or
// balancing) variable.
struct CellPartition {
  std::vector<int> cell;            // per row
  std::vector<std::string> labels;  // per cell

  std::size_t n_cells() const { return labels.size(); }

  // One cell per distinct value (sorted ascending).
  static CellPartition discrete(std::span<const double> values) {
    std::vector<double> distinct(values.begin(), values.end());
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    CellPartition p;
    for (double v : distinct) p.labels.push_back(format_double(v));
    for (double v : values)
      p.cell.push_back(static_cast<int>(std::lower_bound(distinct.begin(), distinct.end(), v) - distinct.begin()));
    return p;
  }

  // Quantile bins with nearest-rank cut points; bins that coincide are merged.
  static CellPartition quantiles(std::span<const double> values, std::size_t bins = 10) {
    if (values.empty()) throw DataError("CellPartition::quantiles: no values");
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const double n = static_cast<double>(sorted.size());
    std::vector<double> cuts;  // upper edges of all but the last bin
    for (std::size_t b = 1; b < bins; ++b) {
      auto rank = static_cast<std::size_t>(std::ceil(static_cast<double>(b) / static_cast<double>(bins) * n - 1e-12));
      rank = std::clamp<std::size_t>(rank, 1, sorted.size());
      const double c = sorted[rank - 1];
      if (c < sorted.back() && (cuts.empty() || c > cuts.back())) cuts.push_back(c);
    }
    CellPartition p;
    double lo = sorted.front();
    for (std::size_t b = 0; b <= cuts.size(); ++b) {
      const double hi = b < cuts.size() ? cuts[b] : sorted.back();
      p.labels.push_back("q" + std::to_string(b + 1) + "[" + format_double(lo) + "," + format_double(hi) + "]");
      lo = hi;
    }
    for (double v : values)
      p.cell.push_back(static_cast<int>(std::lower_bound(cuts.begin(), cuts.end(), v) - cuts.begin()));
    return p;
  }

  // Discrete when there are at most `max_discrete` distinct values, deciles otherwise.
  static CellPartition automatic(std::span<const double> values, std::size_t max_discrete = 10) {
    std::vector<double> distinct(values.begin(), values.end());
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    return distinct.size() <= max_discrete ? discrete(values) : quantiles(values, 10);
  }

  // Cross-classification of several partitions (row-wise tuple of cells).
  static CellPartition combine(std::span<const CellPartition> parts, std::size_t n_rows) {
    CellPartition p;
    std::map<std::vector<int>, int> index;
    for (std::size_t i = 0; i < n_rows; ++i) {
      std::vector<int> key;
      for (const auto& q : parts) key.push_back(q.cell[i]);
      auto [it, inserted] = index.try_emplace(key, 0);
      if (inserted) {
        it->second = static_cast<int>(p.labels.size());
        std::string label;
        for (std::size_t j = 0; j < parts.size(); ++j)
          label += (j ? "|" : "") + parts[j].labels[static_cast<std::size_t>(key[j])];
        p.labels.push_back(label.empty() ? "all" : label);
      }
      p.cell.push_back(it->second);
    }
    if (n_rows > 0 && p.labels.empty()) p.labels.push_back("all");
    return p;
  }
};

class EffectEngine {
 public:
  // Prediction rows are assigned to leaves once; undefined rows (no tree
  // with a complete leaf for a contrast) are dropped with a warning, or
  // abort when their share exceeds `undefined_tolerance`.
  EffectEngine(const CausalForest& forest, Matrix x_pred, double undefined_tolerance = 0.05)
      : forest_(forest), x_(std::move(x_pred)), tolerance_(undefined_tolerance) {
    if (x_.cols() != forest.n_features)
      throw DataError("prediction data has " + std::to_string(x_.cols()) + " features, forest expects " +
                      std::to_string(forest.n_features));
    const auto t_count = forest.trees.size();
    leaf_.resize(x_.rows() * t_count);
    parallel_for(x_.rows(), [&](std::size_t j) {
      for (std::size_t t = 0; t < t_count; ++t)
        leaf_[j * t_count + t] = static_cast<std::uint32_t>(forest.trees[t].leaf_of(x_.row(j)));
    });
  }

  const Matrix& x() const { return x_; }
  std::size_t n_rows() const { return x_.rows(); }
  const std::vector<std::string>& warnings() const { return warnings_; }

  // Per-row IATE; NaN where undefined.
  std::vector<double> iates(Contrast c, std::size_t outcome = 0) const {
    check(c, outcome);
    const auto& sums = leaf_sums(outcome);
    const int arms[2] = {c.treated, c.reference};
    std::vector<double> out(n_rows(), std::nan(""));
    const auto t_count = forest_.trees.size();
    for (std::size_t j = 0; j < n_rows(); ++j) {
      double a = 0.0, b = 0.0;
      std::size_t used = 0;
      for (std::size_t t = 0; t < t_count; ++t) {
        const auto leaf = leaf_[j * t_count + t];
        if (!forest_.complete(t, leaf, arms)) continue;
        ++used;
        a += leaf_mean(sums, t, leaf, c.treated);
        b += leaf_mean(sums, t, leaf, c.reference);
      }
      if (used) out[j] = a / static_cast<double>(used) - b / static_cast<double>(used);
    }
    return out;
  }

  // n x K potential outcomes using trees complete for every arm; rows without
  // such a tree are NaN.
  Matrix potential_outcomes(std::size_t outcome = 0) const {
    if (outcome >= forest_.est_y.cols()) throw std::invalid_argument("outcome column out of range");
    const auto& sums = leaf_sums(outcome);
    const auto all = forest_.all_arms();
    const auto k = forest_.k(), t_count = forest_.trees.size();
    Matrix out(n_rows(), k, std::nan(""));
    for (std::size_t j = 0; j < n_rows(); ++j) {
      std::vector<double> acc(k, 0.0);
      std::size_t used = 0;
      for (std::size_t t = 0; t < t_count; ++t) {
        const auto leaf = leaf_[j * t_count + t];
        if (!forest_.complete(t, leaf, all)) continue;
        ++used;
        for (std::size_t d = 0; d < k; ++d) acc[d] += leaf_mean(sums, t, leaf, static_cast<int>(d));
      }
      if (used)
        for (std::size_t d = 0; d < k; ++d) out(j, d) = acc[d] / static_cast<double>(used);
    }
    if (forest_.centred()) {
      // Common level added back to every arm.
      const auto& lv = leaf_sums(outcome, true);
      for (std::size_t j = 0; j < n_rows(); ++j) {
        if (std::isnan(out(j, 0))) continue;
        double acc = 0.0;
        std::size_t used = 0;
        for (std::size_t t = 0; t < t_count; ++t) {
          const auto leaf = leaf_[j * t_count + t];
          if (!forest_.complete(t, leaf, all)) continue;
          ++used;
          for (std::size_t d = 0; d < k; ++d) acc += leaf_mean(lv, t, leaf, static_cast<int>(d));
        }
        const double level = acc / static_cast<double>(used * k);
        for (std::size_t d = 0; d < k; ++d) out(j, d) += level;
      }
    }
    return out;
  }

  // Rows with a defined IATE for the contrast, after the tolerance check.
  std::vector<bool> defined(Contrast c) const {
    check(c, 0);
    const int arms[2] = {c.treated, c.reference};
    const auto t_count = forest_.trees.size();
    std::vector<bool> ok(n_rows(), false);
    std::size_t bad = 0;
    for (std::size_t j = 0; j < n_rows(); ++j) {
      for (std::size_t t = 0; t < t_count && !ok[j]; ++t)
        if (forest_.complete(t, leaf_[j * t_count + t], arms)) ok[j] = true;
      bad += !ok[j];
    }
    if (bad > 0) {
      const double share = static_cast<double>(bad) / static_cast<double>(std::max<std::size_t>(n_rows(), 1));
      if (share > tolerance_)
        throw EstimationError(std::to_string(bad) + " of " + std::to_string(n_rows()) +
                              " prediction rows have no complete leaf for contrast " + c.label());
      note("contrast " + c.label() + ": " + std::to_string(bad) + " undefined prediction rows dropped");
    }
    return ok;
  }

  // Generic linear estimand sum_j coef_j * IATE_j over defined rows. The
  // caller supplies coefficients for defined rows (zero elsewhere).
  EffectEstimate linear(Contrast c, std::span<const double> coef, std::size_t outcome, const std::string& estimand,
                        const std::string& cell) const {
    check(c, outcome);
    if (coef.size() != n_rows()) throw std::invalid_argument("linear: coefficient length mismatch");
    const auto tau = iates(c, outcome);
    EffectEstimate e;
    e.estimand = estimand;
    e.contrast = c;
    e.cell = cell;
    e.outcome = outcome_name(outcome);
    for (std::size_t j = 0; j < n_rows(); ++j) {
      if (coef[j] == 0.0) continue;
      if (std::isnan(tau[j])) throw std::logic_error("linear: nonzero coefficient on an undefined row");
      e.estimate += coef[j] * tau[j];
      ++e.n_effective;
    }
    e.se = std::sqrt(variance(c, coef, outcome));
    e.pvalue = two_sided_pvalue(e.estimate, e.se);
    return e;
  }

  EffectEstimate ate(Contrast c, std::size_t outcome = 0) const {
    const auto ok = defined(c);
    return linear(c, uniform_over(ok), outcome, "ATE", "all");
  }

  // Average over prediction rows whose observed treatment is `group`.
  EffectEstimate atet(Contrast c, std::span<const int> treatment, int group, std::size_t outcome = 0) const {
    if (treatment.size() != n_rows()) throw std::invalid_argument("atet: treatment length mismatch");
    auto ok = defined(c);
    for (std::size_t j = 0; j < n_rows(); ++j) ok[j] = ok[j] && treatment[j] == group;
    if (std::count(ok.begin(), ok.end(), true) == 0)
      throw EstimationError("atet: no prediction rows observed in treatment " + std::to_string(group));
    return linear(c, uniform_over(ok), outcome, "ATET", std::to_string(group));
  }

  // Per z-cell GATEs; with `deltas` the GATE-ATE differences follow the cells.
  std::vector<EffectEstimate> gate(Contrast c, const CellPartition& z, std::size_t outcome = 0,
                                   bool deltas = false) const {
    CellPartition none = CellPartition::combine({}, n_rows());
    return balanced(c, z, none, outcome, deltas, "GATE");
  }

  // tau^B(z) = sum_w share(w) * mean{IATE | Z=z, W=w} with pooled W shares.
  std::vector<EffectEstimate> bgate(Contrast c, const CellPartition& z, const CellPartition& w,
                                    std::size_t outcome = 0, bool deltas = false) const {
    return balanced(c, z, w, outcome, deltas, "BGATE");
  }

  // ATE for each outcome column in order.
  EffectCurve effect_curve(Contrast c) const {
    EffectCurve curve;
    for (std::size_t m = 0; m < forest_.est_y.cols(); ++m) {
      CurvePoint p;
      p.month = m + 1;
      p.effect = ate(c, m);
      p.significant5 = p.effect.significant(0.05);
      curve.push_back(std::move(p));
    }
    return curve;
  }

  void set_outcome_names(std::vector<std::string> names) { outcome_names_ = std::move(names); }

 private:
  using LeafSums = std::vector<std::vector<double>>;  // per tree, n_leaves * K sums

  void check(Contrast c, std::size_t outcome) const {
    const int k = forest_.n_treatments;
    if (c.treated < 0 || c.treated >= k || c.reference < 0 || c.reference >= k || c.treated == c.reference)
      throw ConfigError("invalid contrast " + c.label());
    if (outcome >= forest_.est_y.cols()) throw std::invalid_argument("outcome column out of range");
  }

  std::string outcome_name(std::size_t outcome) const {
    return outcome < outcome_names_.size() ? outcome_names_[outcome] : std::to_string(outcome);
  }

  void note(std::string msg) const {
    if (std::find(warnings_.begin(), warnings_.end(), msg) == warnings_.end()) warnings_.push_back(std::move(msg));
  }

  static std::vector<double> uniform_over(const std::vector<bool>& rows) {
    const auto n = static_cast<double>(std::count(rows.begin(), rows.end(), true));
    std::vector<double> coef(rows.size(), 0.0);
    for (std::size_t j = 0; j < rows.size(); ++j)
      if (rows[j]) coef[j] = 1.0 / n;
    return coef;
  }

  const LeafSums& leaf_sums(std::size_t outcome, bool level = false) const {
    const Matrix& src = level ? forest_.est_level : forest_.est_y;
    const auto key = level ? outcome + forest_.est_y.cols() : outcome;
    auto it = sums_.find(key);
    if (it != sums_.end()) return it->second;
    const auto k = forest_.k();
    LeafSums sums(forest_.trees.size());
    for (std::size_t t = 0; t < forest_.trees.size(); ++t) {
      sums[t].assign(forest_.trees[t].n_leaves * k, 0.0);
      for (std::size_t leaf = 0; leaf < forest_.trees[t].n_leaves; ++leaf)
        for (std::size_t d = 0; d < k; ++d)
          for (auto r : forest_.leaf_arm(t, leaf, d)) sums[t][leaf * k + d] += src(r, outcome);
    }
    return sums_.emplace(key, std::move(sums)).first->second;
  }

  double leaf_mean(const LeafSums& sums, std::size_t t, std::size_t leaf, int d) const {
    const auto arm = static_cast<std::size_t>(d);
    return sums[t][leaf * forest_.k() + arm] / static_cast<double>(forest_.leaf_arm(t, leaf, arm).size());
  }

  // Leave-one-out squared residuals of the estimation rows, per outcome.
  const std::vector<double>& residual_variance(std::size_t outcome) const {
    auto it = sigma2_.find(outcome);
    if (it != sigma2_.end()) return it->second;
    const auto& sums = leaf_sums(outcome);
    const auto k = forest_.k();
    const auto n = forest_.n_estimation();
    std::vector<double> arm_var(k, 0.0);
    {
      std::vector<std::vector<double>> by_arm(k);
      for (std::size_t i = 0; i < n; ++i)
        by_arm[static_cast<std::size_t>(forest_.est_treatment[i])].push_back(forest_.est_y(i, outcome));
      for (std::size_t d = 0; d < k; ++d) arm_var[d] = sample_variance(by_arm[d]);
    }
    std::vector<double> s2(n, 0.0);
    parallel_for(n, [&](std::size_t i) {
      const auto arm = static_cast<std::size_t>(forest_.est_treatment[i]);
      const double y = forest_.est_y(i, outcome);
      double acc = 0.0;
      std::size_t used = 0;
      for (std::size_t t = 0; t < forest_.trees.size(); ++t) {
        const auto leaf = forest_.trees[t].leaf_of(forest_.est_x.row(i));
        const auto members = forest_.leaf_arm(t, leaf, arm);
        const double s = sums[t][leaf * k + arm];
        const auto cnt = members.size();
        if (std::binary_search(members.begin(), members.end(), static_cast<std::uint32_t>(i))) {
          if (cnt < 2) continue;
          acc += (s - y) / static_cast<double>(cnt - 1);
        } else {
          if (cnt == 0) continue;
          acc += s / static_cast<double>(cnt);
        }
        ++used;
      }
      if (used) {
        const double r = y - acc / static_cast<double>(used);
        s2[i] = r * r;
      } else {
        s2[i] = arm_var[arm];
      }
    });
    return sigma2_.emplace(outcome, std::move(s2)).first->second;
  }

  // Variance of sum_j coef_j * IATE_j from the aggregated weights.
  double variance(Contrast c, std::span<const double> coef, std::size_t outcome) const {
    const auto& s2 = residual_variance(outcome);
    const int arms[2] = {c.treated, c.reference};
    const auto t_count = forest_.trees.size();
    // Per-row number of trees complete for the contrast.
    std::vector<std::size_t> used(n_rows(), 0);
    for (std::size_t j = 0; j < n_rows(); ++j) {
      if (coef[j] == 0.0) continue;
      for (std::size_t t = 0; t < t_count; ++t) used[j] += forest_.complete(t, leaf_[j * t_count + t], arms);
    }
    std::vector<double> wd(forest_.n_estimation(), 0.0), wr(forest_.n_estimation(), 0.0);
    std::vector<double> acc;
    for (std::size_t t = 0; t < t_count; ++t) {
      acc.assign(forest_.trees[t].n_leaves, 0.0);
      bool any = false;
      for (std::size_t j = 0; j < n_rows(); ++j) {
        if (coef[j] == 0.0) continue;
        const auto leaf = leaf_[j * t_count + t];
        if (!forest_.complete(t, leaf, arms)) continue;
        acc[leaf] += coef[j] / static_cast<double>(used[j]);
        any = true;
      }
      if (!any) continue;
      for (std::size_t leaf = 0; leaf < acc.size(); ++leaf) {
        if (acc[leaf] == 0.0) continue;
        const auto md = forest_.leaf_arm(t, leaf, static_cast<std::size_t>(c.treated));
        const auto mr = forest_.leaf_arm(t, leaf, static_cast<std::size_t>(c.reference));
        for (auto r : md) wd[r] += acc[leaf] / static_cast<double>(md.size());
        for (auto r : mr) wr[r] += acc[leaf] / static_cast<double>(mr.size());
      }
    }
    double v = 0.0;
    for (std::size_t i = 0; i < wd.size(); ++i) v += (wd[i] * wd[i] + wr[i] * wr[i]) * s2[i];
    return v;
  }

  // Coefficients of tau^B(z) for one z-cell, or an empty vector when every
  // (z, w) cell is empty.
  std::vector<double> balanced_coef(const std::vector<bool>& ok, const CellPartition& z, const CellPartition& w,
                                    int zc, const std::vector<double>& w_share, const std::string& estimand,
                                    const std::string& contrast) const {
    const auto nw = w.n_cells();
    std::vector<std::size_t> count(nw, 0);
    for (std::size_t j = 0; j < n_rows(); ++j)
      if (ok[j] && z.cell[j] == zc) ++count[static_cast<std::size_t>(w.cell[j])];
    double covered = 0.0;
    std::size_t missing = 0;
    for (std::size_t c = 0; c < nw; ++c) {
      if (w_share[c] == 0.0) continue;
      if (count[c]) covered += w_share[c];
      else ++missing;
    }
    if (covered == 0.0) return {};
    if (missing)
      note(estimand + " " + contrast + ", cell " + z.labels[static_cast<std::size_t>(zc)] + ": " +
           std::to_string(missing) + " balancing cells empty, shares renormalized");
    std::vector<double> coef(n_rows(), 0.0);
    for (std::size_t j = 0; j < n_rows(); ++j) {
      if (!ok[j] || z.cell[j] != zc) continue;
      const auto wc = static_cast<std::size_t>(w.cell[j]);
      coef[j] = w_share[wc] / covered / static_cast<double>(count[wc]);
    }
    return coef;
  }

  std::vector<EffectEstimate> balanced(Contrast c, const CellPartition& z, const CellPartition& w, std::size_t outcome,
                                       bool deltas, const std::string& estimand) const {
    if (z.cell.size() != n_rows() || w.cell.size() != n_rows())
      throw std::invalid_argument(estimand + ": cell assignment length mismatch");
    const auto ok = defined(c);
    const auto n_ok = static_cast<double>(std::count(ok.begin(), ok.end(), true));
    std::vector<double> w_share(w.n_cells(), 0.0);
    for (std::size_t j = 0; j < n_rows(); ++j)
      if (ok[j]) w_share[static_cast<std::size_t>(w.cell[j])] += 1.0 / n_ok;
    const auto ate_coef = uniform_over(ok);
    std::vector<EffectEstimate> cells, diffs;
    for (std::size_t zc = 0; zc < z.n_cells(); ++zc) {
      auto coef = balanced_coef(ok, z, w, static_cast<int>(zc), w_share, estimand, c.label());
      if (coef.empty()) {
        note(estimand + " " + c.label() + ": cell " + z.labels[zc] + " has no defined rows and is skipped");
        continue;
      }
      cells.push_back(linear(c, coef, outcome, estimand, z.labels[zc]));
      if (deltas) {
        for (std::size_t j = 0; j < coef.size(); ++j) coef[j] -= ate_coef[j];
        auto d = linear(c, coef, outcome, estimand + "-ATE", z.labels[zc]);
        d.n_effective = cells.back().n_effective;
        diffs.push_back(std::move(d));
      }
    }
    cells.insert(cells.end(), diffs.begin(), diffs.end());
    return cells;
  }

  const CausalForest& forest_;
  Matrix x_;
  double tolerance_;
  std::vector<std::uint32_t> leaf_;  // row-major (prediction row, tree)
  std::vector<std::string> outcome_names_;
  mutable std::map<std::size_t, LeafSums> sums_;
  mutable std::map<std::size_t, std::vector<double>> sigma2_;
  mutable std::vector<std::string> warnings_;
};

inline std::string effects_csv(std::span<const EffectEstimate> effects, std::span<const std::string> arm_names = {}) {
  std::ostringstream out;
  csv::Writer w(out);
  w.header({"estimand", "contrast", "cell", "estimate", "se", "pvalue", "stars"});
  for (const auto& e : effects)
    w.row({e.estimand, e.contrast.label(arm_names), e.cell, format_double(e.estimate), format_double(e.se),
           format_double(e.pvalue), stars(e.pvalue)});
  return out.str();
}

inline std::string curve_csv(const EffectCurve& curve, std::span<const std::string> arm_names = {}) {
  std::ostringstream out;
  csv::Writer w(out);
  w.header({"month", "outcome", "contrast", "estimate", "se", "lower95", "upper95", "significant5"});
  for (const auto& p : curve)
    w.row({std::to_string(p.month), p.effect.outcome, p.effect.contrast.label(arm_names), format_double(p.effect.estimate),
           format_double(p.effect.se), format_double(p.effect.estimate - 1.959963984540054 * p.effect.se),
           format_double(p.effect.estimate + 1.959963984540054 * p.effect.se), p.significant5 ? "1" : "0"});
  return out.str();
}

}  // namespace mcf
