#pragma once

// Dataset schema, CSV ingestion and descriptive statistics.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mcf/common.hpp"
#include "mcf/csv.hpp"

namespace mcf {

enum class ColumnKind { continuous, ordered, unordered };

enum class Role : unsigned {
  confounder = 1u << 0,
  heterogeneity = 1u << 1,
  balancing = 1u << 2,
  policy = 1u << 3,
  treatment = 1u << 4,
  outcome = 1u << 5,
  id = 1u << 6,
};

inline constexpr unsigned kCovariateRoles = static_cast<unsigned>(Role::confounder) |
                                            static_cast<unsigned>(Role::heterogeneity) |
                                            static_cast<unsigned>(Role::balancing) |
                                            static_cast<unsigned>(Role::policy);
inline constexpr unsigned kExclusiveRoles = static_cast<unsigned>(Role::treatment) |
                                            static_cast<unsigned>(Role::outcome) |
                                            static_cast<unsigned>(Role::id);

inline constexpr unsigned operator|(Role a, Role b) {
  return static_cast<unsigned>(a) | static_cast<unsigned>(b);
}
inline constexpr unsigned operator|(unsigned a, Role b) { return a | static_cast<unsigned>(b); }

inline std::string_view to_string(ColumnKind k) {
  switch (k) {
    case ColumnKind::continuous: return "continuous";
    case ColumnKind::ordered: return "ordered";
    case ColumnKind::unordered: return "unordered";
  }
  return "?";
}

inline ColumnKind parse_kind(std::string_view s) {
  if (s == "continuous") return ColumnKind::continuous;
  if (s == "ordered" || s == "ordered-categorical") return ColumnKind::ordered;
  if (s == "unordered" || s == "unordered-categorical" || s == "categorical") return ColumnKind::unordered;
  throw DataError("unknown column kind '" + std::string(s) + "'");
}

inline const std::vector<std::pair<std::string_view, Role>>& role_names() {
  static const std::vector<std::pair<std::string_view, Role>> names = {
      {"confounder", Role::confounder}, {"heterogeneity", Role::heterogeneity},
      {"balancing", Role::balancing},   {"policy", Role::policy},
      {"treatment", Role::treatment},   {"outcome", Role::outcome},
      {"id", Role::id}};
  return names;
}

inline Role parse_role(std::string_view s) {
  for (const auto& [name, role] : role_names())
    if (name == s) return role;
  throw DataError("unknown column role '" + std::string(s) + "'");
}

struct ColumnSpec {
  std::string name;
  ColumnKind kind = ColumnKind::continuous;
  unsigned roles = 0;
  // Number of categories for categorical columns; codes are 0..n_categories-1.
  int n_categories = 0;
  std::vector<std::string> labels;

  bool has(Role r) const { return (roles & static_cast<unsigned>(r)) != 0; }
  bool is_covariate() const { return (roles & kCovariateRoles) != 0; }
  bool is_categorical() const { return kind != ColumnKind::continuous; }
};

class Schema {
 public:
  Schema() = default;
  explicit Schema(std::vector<ColumnSpec> columns) : columns_(std::move(columns)) { validate(); }

  const std::vector<ColumnSpec>& columns() const { return columns_; }
  const ColumnSpec& treatment() const { return columns_[treatment_]; }
  int n_treatments() const { return columns_[treatment_].n_categories; }

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < columns_.size(); ++i)
      if (columns_[i].name == name) return i;
    throw DataError("schema has no column '" + std::string(name) + "'");
  }

  void validate() {
    std::size_t n_treat = 0, n_out = 0;
    std::map<std::string, int> seen;
    for (std::size_t i = 0; i < columns_.size(); ++i) {
      const auto& c = columns_[i];
      if (c.name.empty()) throw DataError("schema column " + std::to_string(i) + " has no name");
      if (seen[c.name]++) throw DataError("duplicate schema column '" + c.name + "'");
      const unsigned exclusive = c.roles & kExclusiveRoles;
      if (exclusive != 0 && (exclusive & (exclusive - 1)) != 0)
        throw DataError("column '" + c.name + "' combines treatment/outcome/id roles");
      if (exclusive != 0 && (c.roles & kCovariateRoles) != 0)
        throw DataError("column '" + c.name + "' mixes an exclusive role with covariate roles");
      if (c.has(Role::treatment)) {
        ++n_treat;
        treatment_ = i;
        if (c.n_categories < 1) throw DataError("treatment column '" + c.name + "' must declare categories");
      }
      if (c.has(Role::outcome)) ++n_out;
      if (c.is_categorical() && c.n_categories < 1 && !c.has(Role::id))
        throw DataError("categorical column '" + c.name + "' must declare categories");
    }
    if (n_treat != 1) throw DataError("schema needs exactly one treatment column");
    if (n_out < 1) throw DataError("schema needs at least one outcome column");
  }

 private:
  std::vector<ColumnSpec> columns_;
  std::size_t treatment_ = 0;
};

// Covariates are the columns carrying at least one covariate role. Columns
// without any role are kept as auxiliary data (e.g. spell durations).
struct Dataset {
  Schema schema;
  std::vector<std::size_t> covariate_columns;  // schema indices
  std::vector<std::size_t> outcome_columns;
  std::vector<std::size_t> aux_columns;
  Matrix x;    // n x p covariates
  std::vector<int> treatment;
  Matrix y;    // n x m outcomes
  Matrix aux;  // n x a auxiliary numeric columns
  std::vector<std::string> ids;

  std::size_t size() const { return treatment.size(); }
  std::size_t n_covariates() const { return covariate_columns.size(); }
  int n_treatments() const { return schema.n_treatments(); }

  const ColumnSpec& covariate_spec(std::size_t j) const { return schema.columns()[covariate_columns[j]]; }

  std::vector<std::string> covariate_names() const {
    std::vector<std::string> out;
    for (auto c : covariate_columns) out.push_back(schema.columns()[c].name);
    return out;
  }
  std::vector<std::string> outcome_names() const {
    std::vector<std::string> out;
    for (auto c : outcome_columns) out.push_back(schema.columns()[c].name);
    return out;
  }
  std::vector<ColumnKind> covariate_kinds() const {
    std::vector<ColumnKind> out;
    for (auto c : covariate_columns) out.push_back(schema.columns()[c].kind);
    return out;
  }

  std::size_t covariate(std::string_view name) const {
    for (std::size_t j = 0; j < covariate_columns.size(); ++j)
      if (schema.columns()[covariate_columns[j]].name == name) return j;
    throw DataError("no covariate named '" + std::string(name) + "'");
  }
  std::size_t outcome(std::string_view name) const {
    for (std::size_t j = 0; j < outcome_columns.size(); ++j)
      if (schema.columns()[outcome_columns[j]].name == name) return j;
    throw DataError("no outcome named '" + std::string(name) + "'");
  }
  std::size_t auxiliary(std::string_view name) const {
    for (std::size_t j = 0; j < aux_columns.size(); ++j)
      if (schema.columns()[aux_columns[j]].name == name) return j;
    throw DataError("no auxiliary column named '" + std::string(name) + "'");
  }

  // Covariate positions whose column carries `role`.
  std::vector<std::size_t> covariates_with(Role role) const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < covariate_columns.size(); ++j)
      if (covariate_spec(j).has(role)) out.push_back(j);
    return out;
  }

  Dataset subset(std::span<const std::size_t> rows) const {
    Dataset out;
    out.schema = schema;
    out.covariate_columns = covariate_columns;
    out.outcome_columns = outcome_columns;
    out.aux_columns = aux_columns;
    out.x = x.select_rows(rows);
    out.y = y.select_rows(rows);
    out.aux = aux.select_rows(rows);
    out.treatment.reserve(rows.size());
    for (auto r : rows) {
      out.treatment.push_back(treatment[r]);
      if (!ids.empty()) out.ids.push_back(ids[r]);
    }
    return out;
  }
};

// Partitions schema columns into covariate/outcome/auxiliary lists.
inline void assign_layout(Dataset& d) {
  d.covariate_columns.clear();
  d.outcome_columns.clear();
  d.aux_columns.clear();
  const auto& cols = d.schema.columns();
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i].is_covariate()) d.covariate_columns.push_back(i);
    else if (cols[i].has(Role::outcome)) d.outcome_columns.push_back(i);
    else if (cols[i].roles == 0) d.aux_columns.push_back(i);
  }
}

// Checks the dataset invariants: finite values, treatment labels in range,
// categorical codes inside their declared category sets.
inline void validate(const Dataset& d) {
  const int k = d.n_treatments();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.treatment[i] < 0 || d.treatment[i] >= k)
      throw DataError("row " + std::to_string(i + 1) + ": treatment label " + std::to_string(d.treatment[i]) +
                      " outside 0.." + std::to_string(k - 1));
    for (std::size_t j = 0; j < d.y.cols(); ++j)
      if (!std::isfinite(d.y(i, j)))
        throw DataError("row " + std::to_string(i + 1) + ": non-finite outcome");
    for (std::size_t j = 0; j < d.x.cols(); ++j) {
      const double v = d.x(i, j);
      const auto& spec = d.covariate_spec(j);
      if (!std::isfinite(v))
        throw DataError("row " + std::to_string(i + 1) + ", column '" + spec.name + "': non-finite value");
      if (spec.is_categorical() &&
          (v != std::floor(v) || v < 0 || v >= spec.n_categories))
        throw DataError("row " + std::to_string(i + 1) + ", column '" + spec.name + "': category code " +
                        format_double(v) + " outside 0.." + std::to_string(spec.n_categories - 1));
    }
  }
}

namespace detail {

inline double parse_cell(const std::string& cell, std::size_t row, const std::string& col) {
  auto fail = [&](const std::string& why) {
    return DataError("row " + std::to_string(row) + ", column '" + col + "': " + why);
  };
  std::string_view s = cell;
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  if (s.empty() || s == "NA" || s == "NaN" || s == "nan" || s == ".")
    throw fail("missing value (missing values must be pre-coded)");
  double v = 0.0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) throw fail("unparseable value '" + cell + "'");
  return v;
}

}  // namespace detail

inline Dataset load_csv(std::istream& in, const Schema& schema) {
  const auto table = csv::read(in);
  Dataset d;
  d.schema = schema;
  assign_layout(d);
  const auto& cols = schema.columns();
  std::vector<std::size_t> pos(cols.size());
  for (std::size_t i = 0; i < cols.size(); ++i) pos[i] = table.column(cols[i].name);

  const std::size_t n = table.rows.size();
  d.x = Matrix(n, d.covariate_columns.size());
  d.y = Matrix(n, d.outcome_columns.size());
  d.aux = Matrix(n, d.aux_columns.size());
  d.treatment.resize(n);
  const std::size_t id_col = [&] {
    for (std::size_t i = 0; i < cols.size(); ++i)
      if (cols[i].has(Role::id)) return i;
    return cols.size();
  }();
  const int k = schema.n_treatments();
  for (std::size_t r = 0; r < n; ++r) {
    const auto& fields = table.rows[r];
    const std::size_t row_no = r + 1;
    auto cell = [&](std::size_t c) -> const std::string& {
      if (pos[c] >= fields.size())
        throw DataError("row " + std::to_string(row_no) + ": too few fields for column '" + cols[c].name + "'");
      return fields[pos[c]];
    };
    for (std::size_t j = 0; j < d.covariate_columns.size(); ++j) {
      const auto c = d.covariate_columns[j];
      d.x(r, j) = detail::parse_cell(cell(c), row_no, cols[c].name);
    }
    for (std::size_t j = 0; j < d.outcome_columns.size(); ++j) {
      const auto c = d.outcome_columns[j];
      d.y(r, j) = detail::parse_cell(cell(c), row_no, cols[c].name);
    }
    for (std::size_t j = 0; j < d.aux_columns.size(); ++j) {
      const auto c = d.aux_columns[j];
      d.aux(r, j) = detail::parse_cell(cell(c), row_no, cols[c].name);
    }
    const auto tc = [&] {
      for (std::size_t i = 0; i < cols.size(); ++i)
        if (cols[i].has(Role::treatment)) return i;
      return std::size_t{0};
    }();
    const double t = detail::parse_cell(cell(tc), row_no, cols[tc].name);
    if (t != std::floor(t) || t < 0 || t >= k)
      throw DataError("row " + std::to_string(row_no) + ", column '" + cols[tc].name + "': treatment label " +
                      format_double(t) + " outside 0.." + std::to_string(k - 1));
    d.treatment[r] = static_cast<int>(t);
    if (id_col < cols.size()) d.ids.push_back(cell(id_col));
  }
  validate(d);
  return d;
}

inline Dataset load_csv(const std::filesystem::path& path, const Schema& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return load_csv(in, schema);
}

inline std::string to_csv(const Dataset& d) {
  std::ostringstream out;
  csv::Writer w(out);
  const auto& cols = d.schema.columns();
  std::vector<std::string> header;
  for (const auto& c : cols) header.push_back(c.name);
  w.header(header);
  std::vector<std::size_t> slot(cols.size());
  std::vector<int> which(cols.size(), -1);  // 0 covariate, 1 outcome, 2 aux, 3 treatment, 4 id
  for (std::size_t j = 0; j < d.covariate_columns.size(); ++j) {
    slot[d.covariate_columns[j]] = j;
    which[d.covariate_columns[j]] = 0;
  }
  for (std::size_t j = 0; j < d.outcome_columns.size(); ++j) {
    slot[d.outcome_columns[j]] = j;
    which[d.outcome_columns[j]] = 1;
  }
  for (std::size_t j = 0; j < d.aux_columns.size(); ++j) {
    slot[d.aux_columns[j]] = j;
    which[d.aux_columns[j]] = 2;
  }
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i].has(Role::treatment)) which[i] = 3;
    if (cols[i].has(Role::id)) which[i] = 4;
  }
  std::vector<std::string> fields(cols.size());
  for (std::size_t r = 0; r < d.size(); ++r) {
    for (std::size_t i = 0; i < cols.size(); ++i) {
      switch (which[i]) {
        case 0: fields[i] = format_double(d.x(r, slot[i])); break;
        case 1: fields[i] = format_double(d.y(r, slot[i])); break;
        case 2: fields[i] = format_double(d.aux(r, slot[i])); break;
        case 3: fields[i] = std::to_string(d.treatment[r]); break;
        case 4: fields[i] = d.ids.empty() ? std::to_string(r + 1) : d.ids[r]; break;
        default: fields[i] = ""; break;
      }
    }
    w.row(fields);
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Standardized differences

class DegenerateVariance : public DataError {
 public:
  using DataError::DataError;
};

// |mean(a) - mean(b)| / sqrt((var(a) + var(b)) / 2) * 100, unbiased variances.
inline double standardized_difference(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2)
    throw std::invalid_argument("standardized_difference: each sample needs at least two elements");
  const double diff = std::fabs(mean(a) - mean(b));
  const double pooled = 0.5 * (sample_variance(a) + sample_variance(b));
  if (diff == 0.0) return 0.0;
  if (pooled <= 0.0) throw DegenerateVariance("standardized_difference: both samples have zero variance");
  return diff / std::sqrt(pooled) * 100.0;
}

inline constexpr double kLargeImbalance = 20.0;

inline bool is_large_imbalance(double delta) { return delta > kLargeImbalance; }

struct GroupSummary {
  std::string label;
  std::size_t size = 0;
  std::vector<double> means;   // per covariate
  std::vector<double> deltas;  // vs the reference group, NaN when undefined
};

struct DescriptiveReport {
  std::vector<std::string> covariates;
  std::vector<GroupSummary> groups;
  std::size_t reference = 0;  // index into groups
  std::vector<std::string> warnings;

  // Number of non-reference standardized differences.
  std::size_t comparison_count() const {
    return groups.empty() ? 0 : (groups.size() - 1) * covariates.size();
  }

  const GroupSummary& group(std::string_view label) const {
    for (const auto& g : groups)
      if (g.label == label) return g;
    throw std::out_of_range("no group '" + std::string(label) + "'");
  }

  std::string to_csv() const {
    std::ostringstream out;
    csv::Writer w(out);
    w.header({"covariate", "group", "n", "mean", "std_diff", "large"});
    for (std::size_t j = 0; j < covariates.size(); ++j) {
      for (std::size_t g = 0; g < groups.size(); ++g) {
        const auto& grp = groups[g];
        const bool ref = g == reference;
        w.row({covariates[j], grp.label, std::to_string(grp.size), format_double(grp.means[j]),
               ref ? "" : format_double(grp.deltas[j]),
               ref || std::isnan(grp.deltas[j]) ? "" : (is_large_imbalance(grp.deltas[j]) ? "1" : "0")});
      }
    }
    return out.str();
  }
};

namespace detail {

inline GroupSummary summarize(const std::string& label, const Matrix& x, std::span<const std::size_t> rows) {
  GroupSummary g;
  g.label = label;
  g.size = rows.size();
  g.means.assign(x.cols(), 0.0);
  for (auto r : rows)
    for (std::size_t j = 0; j < x.cols(); ++j) g.means[j] += x(r, j);
  for (auto& m : g.means) m = rows.empty() ? std::nan("") : m / static_cast<double>(rows.size());
  return g;
}

inline double delta_or_nan(const Matrix& x, std::size_t j, std::span<const std::size_t> a,
                           std::span<const std::size_t> b, std::vector<std::string>& warnings,
                           const std::string& what) {
  std::vector<double> va, vb;
  for (auto r : a) va.push_back(x(r, j));
  for (auto r : b) vb.push_back(x(r, j));
  try {
    return standardized_difference(va, vb);
  } catch (const DegenerateVariance&) {
    warnings.push_back(what + ": degenerate variance, standardized difference undefined");
  } catch (const std::invalid_argument&) {
    warnings.push_back(what + ": fewer than two observations, standardized difference undefined");
  }
  return std::nan("");
}

}  // namespace detail

// Covariate means per treatment group with standardized differences against
// the control group. Empty groups are omitted with a warning.
inline DescriptiveReport describe_by_treatment(const Dataset& data, int control) {
  const int k = data.n_treatments();
  if (control < 0 || control >= k) throw DataError("control label out of range");
  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < data.size(); ++i) members[static_cast<std::size_t>(data.treatment[i])].push_back(i);
  if (members[static_cast<std::size_t>(control)].empty())
    throw DataError("control label " + std::to_string(control) + " not present in data");

  DescriptiveReport rep;
  rep.covariates = data.covariate_names();
  const auto& labels = data.schema.treatment().labels;
  auto label_of = [&](int d) {
    return static_cast<std::size_t>(d) < labels.size() ? labels[static_cast<std::size_t>(d)] : std::to_string(d);
  };
  const auto& ctrl = members[static_cast<std::size_t>(control)];
  for (int d = 0; d < k; ++d) {
    const auto& rows = members[static_cast<std::size_t>(d)];
    if (rows.empty()) {
      rep.warnings.push_back("treatment group " + label_of(d) + " is empty and omitted");
      continue;
    }
    auto g = detail::summarize(label_of(d), data.x, rows);
    g.deltas.assign(data.n_covariates(), 0.0);
    if (d != control) {
      for (std::size_t j = 0; j < data.n_covariates(); ++j)
        g.deltas[j] = detail::delta_or_nan(data.x, j, rows, ctrl, rep.warnings,
                                           "group " + g.label + ", covariate " + rep.covariates[j]);
    } else {
      rep.reference = rep.groups.size();
    }
    rep.groups.push_back(std::move(g));
  }
  return rep;
}

}  // namespace mcf
