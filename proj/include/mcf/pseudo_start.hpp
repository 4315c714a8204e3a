#pragma once

// Pseudo programme start dates for non-participants. A regression forest is
// trained on the treated members of a random training draw to predict the
// month of programme start; controls receive the rounded prediction and are
// dropped if they left unemployment before it.

#include <sstream>
#include <vector>

#include "mcf/forest.hpp"

namespace mcf {

struct PseudoStartConfig {
  double train_share = 0.20;
  int horizon = 6;
  std::uint64_t seed = 7;
  ForestParams forest;

  void validate() const {
    if (!(train_share > 0.0 && train_share < 1.0)) throw ConfigError("pseudo: train_share must lie in (0, 1)");
    if (horizon < 1) throw ConfigError("pseudo: horizon must be >= 1");
  }
};

// Rows of the random training draw (sorted). Deterministic in cfg.seed.
inline std::vector<std::size_t> pseudo_training_draw(std::size_t n, const PseudoStartConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, 0x5eed));
  const auto k = static_cast<std::size_t>(std::llround(cfg.train_share * static_cast<double>(n)));
  auto rows = sample_without_replacement(n, k, rng);
  std::sort(rows.begin(), rows.end());
  return rows;
}

// Fits the start-month model on the treated rows (treatment != control) of
// the training draw. `start_month` holds the observed months from spell start
// to programme start; it is ignored for controls.
inline ForestModel fit_start_model(const Matrix& x, std::span<const ColumnKind> kinds, std::span<const int> treatment,
                                   std::span<const double> start_month, const PseudoStartConfig& cfg, int control = 0) {
  const auto draw = pseudo_training_draw(x.rows(), cfg);
  std::vector<std::size_t> rows;
  for (auto r : draw)
    if (treatment[r] != control) rows.push_back(r);
  if (rows.empty()) throw DataError("fit_start_model: no treated observations in the training draw");
  if (rows.size() < 2 * cfg.forest.min_leaf)
    throw DataError("fit_start_model: treated training draw has " + std::to_string(rows.size()) +
                    " rows, need at least 2*min_leaf");
  std::vector<double> target;
  for (auto r : rows) {
    const double m = start_month[r];
    if (!(m >= 1.0 && m <= cfg.horizon))
      throw DataError("fit_start_model: start month " + format_double(m) + " of row " + std::to_string(r + 1) +
                      " outside 1.." + std::to_string(cfg.horizon));
    target.push_back(m);
  }
  return fit_regression(x.select_rows(rows), kinds, target, cfg.forest);
}

// Nearest integer with ties rounded up, clamped to [1, horizon].
inline int pseudo_month(double prediction, int horizon) {
  const double rounded = std::floor(prediction + 0.5);
  return static_cast<int>(std::clamp(rounded, 1.0, static_cast<double>(horizon)));
}

struct PseudoAssignment {
  std::vector<double> prediction;
  std::vector<int> month;
  std::vector<bool> kept;  // still unemployed at the pseudo month

  std::size_t kept_count() const { return static_cast<std::size_t>(std::count(kept.begin(), kept.end(), true)); }
};

inline PseudoAssignment assign_and_filter(const Matrix& controls, const ForestModel& model,
                                          std::span<const double> unemployment_duration, const PseudoStartConfig& cfg) {
  if (unemployment_duration.size() != controls.rows())
    throw std::invalid_argument("assign_and_filter: duration length mismatch");
  PseudoAssignment out;
  out.prediction = model.predict(controls);
  out.month.resize(controls.rows());
  out.kept.resize(controls.rows());
  for (std::size_t i = 0; i < controls.rows(); ++i) {
    if (unemployment_duration[i] < 0) throw DataError("assign_and_filter: negative unemployment duration");
    out.month[i] = pseudo_month(out.prediction[i], cfg.horizon);
    out.kept[i] = unemployment_duration[i] >= out.month[i];
  }
  return out;
}

inline std::string pseudo_audit_csv(const PseudoAssignment& a, std::span<const std::string> ids) {
  std::ostringstream out;
  csv::Writer w(out);
  w.header({"id", "prediction", "pseudo_month", "kept"});
  for (std::size_t i = 0; i < a.month.size(); ++i)
    w.row({i < ids.size() ? ids[i] : std::to_string(i + 1), format_double(a.prediction[i]),
           std::to_string(a.month[i]), a.kept[i] ? "1" : "0"});
  return out.str();
}

}  // namespace mcf
