#pragma once

// Common-support trimming on estimated propensity scores.

#include <algorithm>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "mcf/common.hpp"
#include "mcf/data.hpp"

namespace mcf {

struct MinMaxRule {};

struct QuantileRule {
  double q_low = 0.001;
  double q_high = 0.999;
};

struct SupportRule {
  std::variant<MinMaxRule, QuantileRule> variant;

  static SupportRule min_max() { return {MinMaxRule{}}; }
  static SupportRule quantile(double q_low, double q_high) {
    if (!(0.0 <= q_low && q_low < q_high && q_high <= 1.0))
      throw std::invalid_argument("SupportRule: need 0 <= q_low < q_high <= 1");
    return {QuantileRule{q_low, q_high}};
  }
  bool is_min_max() const { return std::holds_alternative<MinMaxRule>(variant); }
};

struct SupportBounds {
  double lower = 0.0;
  double upper = 1.0;
  bool collapsed() const { return lower > upper; }
};

struct SupportReport {
  std::vector<bool> keep;
  std::vector<SupportBounds> bounds;  // per propensity column
  std::size_t dropped = 0;
  std::vector<std::string> warnings;

  double dropped_share() const { return keep.empty() ? 0.0 : static_cast<double>(dropped) / static_cast<double>(keep.size()); }

  std::vector<std::size_t> kept_rows() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < keep.size(); ++i)
      if (keep[i]) out.push_back(i);
    return out;
  }
  std::vector<std::size_t> dropped_rows() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < keep.size(); ++i)
      if (!keep[i]) out.push_back(i);
    return out;
  }
};

// Nearest-rank quantile: the ceil(q*n)-th smallest value (rank clamped to 1..n).
inline double nearest_rank_quantile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("nearest_rank_quantile: empty sample");
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  auto rank = static_cast<std::size_t>(std::ceil(q * n - 1e-12));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

// Applies `bounds` jointly: a row is kept only if every propensity lies inside
// its column's interval.
inline std::vector<bool> apply_bounds(const Matrix& propensities, std::span<const SupportBounds> bounds) {
  std::vector<bool> keep(propensities.rows(), true);
  for (std::size_t i = 0; i < propensities.rows(); ++i)
    for (std::size_t j = 0; j < propensities.cols(); ++j) {
      const double p = propensities(i, j);
      if (p < bounds[j].lower || p > bounds[j].upper) {
        keep[i] = false;
        break;
      }
    }
  return keep;
}

// For each propensity column, the binding lower bound is the largest
// within-group minimum (or q_low quantile) and the upper bound the smallest
// within-group maximum (or q_high quantile).
inline SupportReport trim(const Matrix& propensities, std::span<const int> groups, const SupportRule& rule) {
  const std::size_t n = propensities.rows(), k = propensities.cols();
  if (groups.size() != n) throw std::invalid_argument("trim: group vector length mismatch");
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += propensities(i, j);
    if (std::fabs(s - 1.0) > 1e-6)
      throw DataError("trim: propensities of row " + std::to_string(i + 1) + " sum to " + format_double(s));
  }
  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t i = 0; i < n; ++i) {
    if (groups[i] < 0 || static_cast<std::size_t>(groups[i]) >= k) throw DataError("trim: group label out of range");
    members[static_cast<std::size_t>(groups[i])].push_back(i);
  }
  for (std::size_t g = 0; g < k; ++g)
    if (members[g].empty()) throw DataError("trim: treatment group " + std::to_string(g) + " is empty");

  SupportReport rep;
  rep.bounds.resize(k);
  for (std::size_t j = 0; j < k; ++j) {
    double lower = -std::numeric_limits<double>::infinity();
    double upper = std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < k; ++g) {
      std::vector<double> vals;
      vals.reserve(members[g].size());
      for (auto i : members[g]) vals.push_back(propensities(i, j));
      double lo, hi;
      if (rule.is_min_max()) {
        const auto [mn, mx] = std::minmax_element(vals.begin(), vals.end());
        lo = *mn;
        hi = *mx;
      } else {
        const auto& q = std::get<QuantileRule>(rule.variant);
        lo = nearest_rank_quantile(vals, q.q_low);
        hi = nearest_rank_quantile(std::move(vals), q.q_high);
      }
      lower = std::max(lower, lo);
      upper = std::min(upper, hi);
    }
    rep.bounds[j] = {lower, upper};
    if (rep.bounds[j].collapsed())
      rep.warnings.push_back("support collapse: propensity column " + std::to_string(j) + " has lower bound " +
                             format_double(lower) + " above upper bound " + format_double(upper) +
                             "; every observation is dropped");
  }
  rep.keep = apply_bounds(propensities, rep.bounds);
  rep.dropped = static_cast<std::size_t>(std::count(rep.keep.begin(), rep.keep.end(), false));
  return rep;
}

// Kept-vs-dropped covariate comparison. Reuses DescriptiveReport with the
// groups "kept" (reference) and "dropped".
inline DescriptiveReport support_diagnostics(const Dataset& data, const SupportReport& report,
                                             const std::vector<std::string>& key_covariates) {
  if (report.keep.size() != data.size()) throw std::invalid_argument("support_diagnostics: mask length mismatch");
  std::vector<std::size_t> cols;
  for (const auto& name : key_covariates) cols.push_back(data.covariate(name));
  const Matrix x = data.x.select_cols(cols);
  const auto kept = report.kept_rows();
  const auto dropped = report.dropped_rows();

  DescriptiveReport rep;
  rep.covariates = key_covariates;
  auto kept_group = detail::summarize("kept", x, kept);
  kept_group.deltas.assign(cols.size(), 0.0);
  auto dropped_group = detail::summarize("dropped", x, dropped);
  dropped_group.deltas.assign(cols.size(), std::nan(""));
  if (dropped.empty()) rep.warnings.push_back("no observations dropped; comparison is empty");
  if (kept.empty()) rep.warnings.push_back("no observations kept; support collapsed");
  if (!dropped.empty() && !kept.empty()) {
    for (std::size_t j = 0; j < cols.size(); ++j)
      dropped_group.deltas[j] = detail::delta_or_nan(x, j, dropped, kept, rep.warnings, "covariate " + key_covariates[j]);
  }
  rep.reference = 0;
  rep.groups.push_back(std::move(kept_group));
  rep.groups.push_back(std::move(dropped_group));
  return rep;
}

// Kept/dropped table: covariate, mean kept, mean dropped, standardized difference.
inline std::string support_table_csv(const DescriptiveReport& diag) {
  std::ostringstream out;
  csv::Writer w(out);
  w.header({"covariate", "mean_kept", "mean_dropped", "std_diff"});
  const auto& kept = diag.groups.at(0);
  const auto& dropped = diag.groups.at(1);
  for (std::size_t j = 0; j < diag.covariates.size(); ++j)
    w.row({diag.covariates[j], format_double(kept.means[j]), dropped.size ? format_double(dropped.means[j]) : "",
           dropped.size ? format_double(dropped.deltas[j]) : ""});
  return out.str();
}

}  // namespace mcf
