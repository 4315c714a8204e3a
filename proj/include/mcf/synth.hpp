#pragma once

// Synthetic data-generating processes with known ground truth.
//
// Covariates: n_continuous standard normals x1.., then categorical codes c1..
// drawn uniformly. Treatment: multinomial logit with arm 0 as reference.
// Outcome column t: Y = f0(x) + m(t) * tau_D(x) + noise, where m is the
// monthly curve multiplier (1 for a single outcome).

#include <sstream>
#include <string>
#include <vector>

#include "mcf/common.hpp"
#include "mcf/csv.hpp"
#include "mcf/data.hpp"

namespace mcf {

struct EffectSurface {
  struct Step {
    std::size_t covariate = 0;
    double threshold = 0.0;
    double size = 0.0;
  };

  double intercept = 0.0;
  std::vector<double> slopes;  // per covariate; missing entries are 0
  std::vector<Step> steps;     // size * 1{x_j > threshold}

  double operator()(std::span<const double> x) const {
    double v = intercept;
    for (std::size_t j = 0; j < slopes.size() && j < x.size(); ++j) v += slopes[j] * x[j];
    for (const auto& s : steps) v += x[s.covariate] > s.threshold ? s.size : 0.0;
    return v;
  }

  bool is_zero() const {
    return intercept == 0.0 && std::all_of(slopes.begin(), slopes.end(), [](double s) { return s == 0.0; }) &&
           std::all_of(steps.begin(), steps.end(), [](const Step& s) { return s.size == 0.0; });
  }
};

// Effect multiplier per month: lock_value up to lock_months, linear recovery
// to post_value at recovery_month, post_value afterwards.
struct CurveTemplate {
  std::size_t months = 0;  // 0: single outcome column
  double lock_value = -1.0;
  std::size_t lock_months = 3;
  std::size_t recovery_month = 12;
  double post_value = 1.0;

  double multiplier(std::size_t t) const {
    if (months == 0) return 1.0;
    if (t <= lock_months) return lock_value;
    if (t >= recovery_month) return post_value;
    const double span = static_cast<double>(recovery_month - lock_months);
    return lock_value + (post_value - lock_value) * static_cast<double>(t - lock_months) / span;
  }
  std::size_t n_outcomes() const { return months == 0 ? 1 : months; }
};

struct DgpSpec {
  std::size_t n = 2000;
  std::size_t n_continuous = 6;
  std::vector<int> categorical;  // categories per categorical covariate
  int n_treatments = 3;
  std::vector<std::string> arm_names;
  // Per arm: intercept followed by one coefficient per covariate (missing
  // entries 0). Arm 0 is the reference and is ignored.
  std::vector<std::vector<double>> propensity;
  double selection_on_gain = 0.0;  // adds gamma * tau_d(x) to arm d's logit
  std::vector<double> baseline;    // intercept followed by coefficients
  std::vector<EffectSurface> effects;  // per arm; arm 0 must be zero
  double noise_sd = 1.0;
  bool heteroskedastic = false;  // noise sd scaled by (1 + |x1|)
  CurveTemplate curve;
  bool pseudo_columns = false;  // emit start_month and duration auxiliaries
  std::uint64_t seed = 1;

  std::size_t n_covariates() const { return n_continuous + categorical.size(); }

  void validate() const {
    if (n < 1) throw ConfigError("dgp: n must be >= 1");
    if (n_treatments < 2) throw ConfigError("dgp: need at least two treatments");
    if (n_covariates() < 1) throw ConfigError("dgp: need at least one covariate");
    if (!arm_names.empty() && arm_names.size() != static_cast<std::size_t>(n_treatments))
      throw ConfigError("dgp: arm_names must have one entry per treatment");
    if (effects.size() > static_cast<std::size_t>(n_treatments)) throw ConfigError("dgp: too many effect surfaces");
    if (!effects.empty() && !effects[0].is_zero()) throw ConfigError("dgp: the effect of arm 0 must be zero");
    for (const auto& e : effects)
      for (const auto& s : e.steps)
        if (s.covariate >= n_covariates()) throw ConfigError("dgp: effect step covariate out of range");
    for (int c : categorical)
      if (c < 1 || c > 64) throw ConfigError("dgp: categorical covariates need 1..64 categories");
    if (noise_sd < 0) throw ConfigError("dgp: noise_sd must be >= 0");
    if (curve.months > 0 && curve.recovery_month <= curve.lock_months)
      throw ConfigError("dgp: recovery_month must exceed lock_months");
  }

  std::string arm_name(int d) const {
    return static_cast<std::size_t>(d) < arm_names.size() ? arm_names[static_cast<std::size_t>(d)] : std::to_string(d);
  }

  // Five arms shaped like non-participation and four programmes, with
  // lock-in-then-recovery monthly curves.
  static DgpSpec paper_shaped() {
    DgpSpec s;
    s.n = 2000;
    s.n_continuous = 6;
    s.categorical = {3, 4};
    s.n_treatments = 5;
    s.arm_names = {"NP", "WS", "BC", "TC", "EP"};
    s.propensity = {{},
                    {-0.8, 0.3, 0.0, 0.2},
                    {-1.2, -0.2, 0.3, 0.0},
                    {-1.0, 0.0, -0.3, 0.3},
                    {-1.4, 0.2, 0.2, -0.2}};
    s.baseline = {0.0, 0.5, 0.3, -0.2, 0.1};
    s.effects.resize(5);
    s.effects[1].intercept = 0.6;
    s.effects[1].slopes = {0.3};
    s.effects[2].intercept = 0.2;
    s.effects[2].steps = {{6, 0.5, 0.4}};
    s.effects[3].intercept = 0.4;
    s.effects[3].slopes = {0.0, 0.3};
    s.effects[4].intercept = 0.8;
    s.effects[4].slopes = {-0.2};
    s.noise_sd = 1.0;
    s.curve = {12, -1.0, 3, 9, 1.0};
    s.pseudo_columns = true;
    return s;
  }
};

struct GroundTruth {
  Matrix propensity;  // n x K
  Matrix tau;         // n x K, tau_d(x) with tau_0 = 0
  Matrix mu;          // n x K, noise-free E[Y^d | x] of outcome column 0
  Matrix potential;   // n x K, realised potential outcomes of outcome column 0
  std::vector<double> month_multiplier;  // per outcome column

  // Sample ATE of arm d vs d_ref on outcome column `outcome`.
  double ate(int d, int d_ref, std::size_t outcome = 0) const {
    double s = 0.0;
    for (std::size_t i = 0; i < tau.rows(); ++i)
      s += tau(i, static_cast<std::size_t>(d)) - tau(i, static_cast<std::size_t>(d_ref));
    return month_multiplier.at(outcome) * s / static_cast<double>(tau.rows());
  }

  std::string to_csv(std::span<const std::string> ids) const {
    std::ostringstream out;
    csv::Writer w(out);
    const std::size_t k = tau.cols();
    std::vector<std::string> header{"id"};
    for (std::size_t d = 0; d < k; ++d) header.push_back("p_" + std::to_string(d));
    for (std::size_t d = 0; d < k; ++d) header.push_back("tau_" + std::to_string(d));
    for (std::size_t d = 0; d < k; ++d) header.push_back("mu_" + std::to_string(d));
    for (std::size_t d = 0; d < k; ++d) header.push_back("y_" + std::to_string(d));
    w.header(header);
    for (std::size_t i = 0; i < tau.rows(); ++i) {
      std::vector<std::string> row{i < ids.size() ? ids[i] : std::to_string(i + 1)};
      for (const Matrix* m : {&propensity, &tau, &mu, &potential})
        for (std::size_t d = 0; d < k; ++d) row.push_back(format_double((*m)(i, d)));
      w.row(row);
    }
    return out.str();
  }
};

struct SyntheticData {
  Dataset data;
  GroundTruth truth;
};

namespace detail {

inline Schema synthetic_schema(const DgpSpec& s) {
  std::vector<ColumnSpec> cols;
  cols.push_back({"id", ColumnKind::continuous, static_cast<unsigned>(Role::id), 0, {}});
  for (std::size_t j = 0; j < s.n_continuous; ++j) {
    unsigned roles = static_cast<unsigned>(Role::confounder);
    if (j < 2) roles |= static_cast<unsigned>(Role::heterogeneity);
    if (j == 0) roles |= static_cast<unsigned>(Role::policy);
    if (j == 2) roles |= static_cast<unsigned>(Role::balancing);
    cols.push_back({"x" + std::to_string(j + 1), ColumnKind::continuous, roles, 0, {}});
  }
  for (std::size_t j = 0; j < s.categorical.size(); ++j)
    cols.push_back({"c" + std::to_string(j + 1), ColumnKind::unordered,
                    Role::confounder | Role::heterogeneity | Role::policy, s.categorical[j], {}});
  std::vector<std::string> labels;
  for (int d = 0; d < s.n_treatments; ++d) labels.push_back(s.arm_name(d));
  cols.push_back({"treatment", ColumnKind::unordered, static_cast<unsigned>(Role::treatment), s.n_treatments, labels});
  if (s.curve.months == 0) {
    cols.push_back({"y", ColumnKind::continuous, static_cast<unsigned>(Role::outcome), 0, {}});
  } else {
    for (std::size_t t = 1; t <= s.curve.months; ++t)
      cols.push_back({"y_m" + std::to_string(t), ColumnKind::continuous, static_cast<unsigned>(Role::outcome), 0, {}});
  }
  if (s.pseudo_columns) {
    cols.push_back({"start_month", ColumnKind::continuous, 0, 0, {}});
    cols.push_back({"duration", ColumnKind::continuous, 0, 0, {}});
  }
  return Schema(cols);
}

}  // namespace detail

inline SyntheticData generate(const DgpSpec& spec) {
  spec.validate();
  const std::size_t n = spec.n, p = spec.n_covariates(), k = static_cast<std::size_t>(spec.n_treatments);
  const std::size_t months = spec.curve.n_outcomes();
  SyntheticData out;
  Dataset& d = out.data;
  d.schema = detail::synthetic_schema(spec);
  assign_layout(d);
  d.x = Matrix(n, p);
  d.y = Matrix(n, months);
  d.aux = Matrix(n, spec.pseudo_columns ? 2 : 0);
  d.treatment.resize(n);
  d.ids.resize(n);
  auto& t = out.truth;
  t.propensity = Matrix(n, k);
  t.tau = Matrix(n, k);
  t.mu = Matrix(n, k);
  t.potential = Matrix(n, k);
  for (std::size_t m = 1; m <= months; ++m) t.month_multiplier.push_back(spec.curve.multiplier(m));

  Rng rng(derive_seed(spec.seed, 0xd6b));
  std::vector<double> logit(k);
  for (std::size_t i = 0; i < n; ++i) {
    d.ids[i] = std::to_string(i + 1);
    auto x = d.x.row(i);
    for (std::size_t j = 0; j < spec.n_continuous; ++j) x[j] = standard_normal(rng);
    for (std::size_t j = 0; j < spec.categorical.size(); ++j)
      x[spec.n_continuous + j] = static_cast<double>(uniform_index(rng, static_cast<std::size_t>(spec.categorical[j])));

    for (std::size_t a = 0; a < k; ++a) t.tau(i, a) = a < spec.effects.size() ? spec.effects[a](x) : 0.0;
    double f0 = spec.baseline.empty() ? 0.0 : spec.baseline[0];
    for (std::size_t j = 0; j + 1 < spec.baseline.size() && j < p; ++j) f0 += spec.baseline[j + 1] * x[j];

    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < k; ++a) {
      double eta = 0.0;
      if (a > 0 && a < spec.propensity.size() && !spec.propensity[a].empty()) {
        const auto& c = spec.propensity[a];
        eta = c[0];
        for (std::size_t j = 0; j + 1 < c.size() && j < p; ++j) eta += c[j + 1] * x[j];
      }
      eta += spec.selection_on_gain * t.tau(i, a);
      logit[a] = eta;
      mx = std::max(mx, eta);
    }
    double z = 0.0;
    for (std::size_t a = 0; a < k; ++a) z += std::exp(logit[a] - mx);
    for (std::size_t a = 0; a < k; ++a) t.propensity(i, a) = std::exp(logit[a] - mx) / z;

    const double u = uniform01(rng);
    double acc = 0.0;
    std::size_t arm = k - 1;
    for (std::size_t a = 0; a < k; ++a) {
      acc += t.propensity(i, a);
      if (u < acc) {
        arm = a;
        break;
      }
    }
    d.treatment[i] = static_cast<int>(arm);

    const double sd = spec.noise_sd * (spec.heteroskedastic ? 1.0 + std::fabs(x[0]) : 1.0);
    for (std::size_t m = 0; m < months; ++m) {
      const double eps = sd * standard_normal(rng);
      const double mult = t.month_multiplier[m];
      d.y(i, m) = f0 + mult * t.tau(i, arm) + eps;
      if (m == 0)
        for (std::size_t a = 0; a < k; ++a) {
          t.mu(i, a) = f0 + mult * t.tau(i, a);
          t.potential(i, a) = t.mu(i, a) + eps;
        }
    }
    if (spec.pseudo_columns) {
      // Start month in 1..6, earlier for high x1; duration geometric-like with
      // mean rising in x2.
      const double s = 3.5 - 1.2 * x[0] + standard_normal(rng);
      d.aux(i, 0) = arm == 0 ? 0.0 : std::clamp(std::floor(s + 0.5), 1.0, 6.0);
      const double mean_duration = 8.0 * std::exp(0.3 * (spec.n_continuous > 1 ? x[1] : 0.0));
      double draw = uniform01(rng);
      while (draw <= 0.0) draw = uniform01(rng);
      d.aux(i, 1) = std::ceil(-std::log(draw) * mean_duration);
    }
  }
  validate(d);
  return out;
}

// Same design with every effect surface set to zero.
inline SyntheticData generate_placebo(DgpSpec spec) {
  for (auto& e : spec.effects) e = EffectSurface{};
  return generate(spec);
}

}  // namespace mcf
