#pragma once

// Randomised checks of the fast implementations against the brute-force
// references in oracles.hpp. Used by `mcf verify` and the acceptance suite.

#include <cmath>
#include <string>
#include <vector>

#include "mcf/causal_forest.hpp"
#include "mcf/cluster.hpp"
#include "mcf/effects.hpp"
#include "mcf/oracles.hpp"
#include "mcf/policy.hpp"
#include "mcf/support.hpp"
#include "mcf/synth.hpp"

namespace mcf::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace detail {

inline std::string ratio(std::size_t ok, std::size_t total) {
  return std::to_string(ok) + "/" + std::to_string(total);
}

// Random small policy instance: integer scores keep every sum exact.
struct PolicyInstance {
  Matrix scores, v;
  std::vector<ColumnKind> kinds;
  Constraints constraints;
};

inline PolicyInstance random_policy_instance(Rng& rng, bool constrained) {
  PolicyInstance in;
  const std::size_t n = 10 + uniform_index(rng, 191);
  const std::size_t k = 2 + uniform_index(rng, 2);
  const std::size_t p = 1 + uniform_index(rng, 4);
  in.scores = Matrix(n, k);
  in.v = Matrix(n, p);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < k; ++d) in.scores(i, d) = static_cast<double>(static_cast<int>(uniform_index(rng, 41)) - 20);
    for (std::size_t f = 0; f < p; ++f) in.v(i, f) = static_cast<double>(uniform_index(rng, 2));
  }
  in.kinds.assign(p, ColumnKind::ordered);
  in.constraints = Constraints::none(k);
  if (constrained) {
    const std::size_t arm = 1 + uniform_index(rng, k - 1);
    in.constraints.max_share[arm] = 0.05 + 0.5 * uniform01(rng);
  }
  return in;
}

}  // namespace detail

// Weights of every arm are nonnegative and sum to one at random points.
inline CheckResult weight_contract(std::size_t points, std::size_t n, std::size_t trees, std::uint64_t seed) {
  DgpSpec spec;
  spec.n = n;
  spec.n_continuous = 5;
  spec.n_treatments = 3;
  spec.propensity = {{}, {0.0, 0.4}, {0.0, -0.3, 0.3}};
  spec.baseline = {0.0, 1.0, 0.5};
  spec.effects.resize(3);
  spec.effects[1].intercept = 1.0;
  spec.effects[2].slopes = {0.5};
  spec.seed = seed;
  const auto g = generate(spec);
  std::vector<std::size_t> a, b;
  for (std::size_t i = 0; i < n; ++i) (i % 2 ? b : a).push_back(i);
  McfParams params;
  params.n_trees = trees;
  params.seed = seed;
  const auto forest = fit_mcf(g.data.subset(a), g.data.subset(b), params);

  Rng rng(derive_seed(seed, 0x77));
  double worst_sum = 0.0, min_weight = 0.0;
  std::size_t evaluated = 0, undefined = 0;
  std::vector<double> row(forest.n_features);
  for (std::size_t q = 0; q < points; ++q) {
    for (auto& x : row) x = 1.5 * standard_normal(rng);
    try {
      const auto w = weights_for(forest, row);
      ++evaluated;
      for (std::size_t arm = 0; arm < forest.k(); ++arm) {
        double s = 0.0;
        for (const auto& [r, wt] : w.arms[arm]) {
          s += wt;
          min_weight = std::min(min_weight, wt);
        }
        worst_sum = std::max(worst_sum, std::fabs(s - 1.0));
      }
    } catch (const UndefinedPrediction&) {
      ++undefined;
    }
  }
  CheckResult r{"weight_contract", evaluated > 0 && worst_sum <= 1e-9 && min_weight >= 0.0, ""};
  r.detail = "points " + std::to_string(evaluated) + ", undefined " + std::to_string(undefined) +
             ", max |sum-1| " + format_double(worst_sum) + ", min weight " + format_double(min_weight);
  return r;
}

// Depth-2 search value equals full enumeration, half the instances with one cap.
inline CheckResult policy_exactness(std::size_t instances, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x91));
  std::size_t equal = 0;
  std::string first_mismatch;
  for (std::size_t t = 0; t < instances; ++t) {
    const bool constrained = t % 2 == 1;
    const auto in = detail::random_policy_instance(rng, constrained);
    const auto truth = oracle::brute_force_tree_oracle(in.scores, in.v, in.kinds, 2, in.constraints);
    PolicyScores scores{in.scores, {}};
    PolicyTreeOptions opt;
    opt.depth = 2;
    const auto tree = fit_policy_tree(scores, in.v, in.kinds, in.constraints, opt);
    if (truth.feasible && tree.total == truth.value) {
      ++equal;
    } else if (first_mismatch.empty()) {
      first_mismatch = "; instance " + std::to_string(t) + ": search " + format_double(tree.total) + " vs oracle " +
                       format_double(truth.value);
    }
  }
  return {"policy_exactness", equal == instances, detail::ratio(equal, instances) + " equal" + first_mismatch};
}

// Min-max and quantile trimming against the per-definition reference.
inline CheckResult trimming_oracle(std::size_t fixtures, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x42));
  const double lows[] = {0.0, 0.01, 0.05, 0.1, 0.25};
  const double highs[] = {0.75, 0.9, 0.95, 0.99, 1.0};
  std::size_t equal = 0;
  for (std::size_t f = 0; f < fixtures; ++f) {
    const std::size_t k = 2 + uniform_index(rng, 3);
    const std::size_t n = k + uniform_index(rng, 60);
    // A small pool of distinct rows so ties occur often.
    const std::size_t pool = 1 + uniform_index(rng, n);
    Matrix rows(pool, k);
    for (std::size_t i = 0; i < pool; ++i) {
      double total = 0.0;
      for (std::size_t d = 0; d < k; ++d) total += rows(i, d) = 1.0 + static_cast<double>(uniform_index(rng, 9));
      for (std::size_t d = 0; d < k; ++d) rows(i, d) /= total;
    }
    Matrix p(n, k);
    std::vector<int> groups(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto src = uniform_index(rng, pool);
      for (std::size_t d = 0; d < k; ++d) p(i, d) = rows(src, d);
      groups[i] = i < k ? static_cast<int>(i) : static_cast<int>(uniform_index(rng, k));
    }
    const SupportRule rule = f % 2 == 0 ? SupportRule::min_max()
                                        : SupportRule::quantile(lows[uniform_index(rng, 5)], highs[uniform_index(rng, 5)]);
    const auto fast = trim(p, groups, rule).keep;
    const auto slow = oracle::naive_trim(p, groups, rule);
    equal += fast == slow;
  }
  return {"trimming_oracle", equal == fixtures, detail::ratio(equal, fixtures) + " identical masks"};
}

// Standardized difference against the term-by-term reference, plus the
// {0,2} vs {1,3} case.
inline CheckResult std_diff_oracle(std::size_t fixtures, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x5d));
  double worst = 0.0;
  for (std::size_t f = 0; f < fixtures; ++f) {
    std::vector<double> a(2 + uniform_index(rng, 50)), b(2 + uniform_index(rng, 50));
    const double shift = standard_normal(rng);
    for (auto& x : a) x = standard_normal(rng) + shift;
    for (auto& x : b) x = 2.0 * standard_normal(rng);
    worst = std::max(worst, std::fabs(standardized_difference(a, b) - oracle::std_diff(a, b)));
  }
  const std::vector<double> a{0.0, 2.0}, b{1.0, 3.0};
  const double fixed = standardized_difference(a, b);
  CheckResult r{"std_diff_oracle", worst <= 1e-9 && std::fabs(fixed - 70.71) <= 0.01, ""};
  r.detail = "max deviation " + format_double(worst) + ", {0,2} vs {1,3} = " + format_double(fixed);
  return r;
}

// Lloyd's objective never increases (up to rounding of the sums).
inline CheckResult lloyd_monotone(std::size_t fixtures, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x11));
  std::size_t ok = 0;
  for (std::size_t f = 0; f < fixtures; ++f) {
    const std::size_t n = 20 + uniform_index(rng, 200), dim = 1 + uniform_index(rng, 4);
    const std::size_t blobs = 1 + uniform_index(rng, 5);
    Matrix centres(blobs, dim);
    for (auto& c : centres.data()) c = 4.0 * standard_normal(rng);
    Matrix x(n, dim);
    for (std::size_t i = 0; i < n; ++i) {
      const auto b = uniform_index(rng, blobs);
      for (std::size_t j = 0; j < dim; ++j) x(i, j) = centres(b, j) + standard_normal(rng);
    }
    const std::size_t k = 1 + uniform_index(rng, 6);
    const auto seeds = kmeanspp_seed(x, k, rng);
    const auto run = lloyd(x, seeds, 1e-6, 300);
    bool mono = true;
    for (std::size_t t = 1; t < run.trace.size(); ++t)
      if (run.trace[t] > run.trace[t - 1] * (1.0 + 1e-12)) mono = false;
    ok += mono;
  }
  return {"lloyd_monotone", ok == fixtures, detail::ratio(ok, fixtures) + " nonincreasing traces"};
}

// Share-weighted GATEs reproduce the ATE, BGATE without balancing variables
// is the GATE, and reversing a contrast negates every estimate.
inline CheckResult aggregation_identities(std::size_t n, std::size_t trees, std::uint64_t seed) {
  DgpSpec spec;
  spec.n = n;
  spec.n_continuous = 4;
  spec.categorical = {3};
  spec.n_treatments = 3;
  spec.propensity = {{}, {0.0, 0.3}, {0.0, 0.0, 0.3}};
  spec.baseline = {0.0, 1.0};
  spec.effects.resize(3);
  spec.effects[1].intercept = 1.0;
  spec.effects[1].slopes = {0.5};
  spec.effects[2].steps = {{4, 0.5, 1.0}};
  spec.seed = seed;
  const auto g = generate(spec);
  std::vector<std::size_t> a, b;
  for (std::size_t i = 0; i < n; ++i) (i % 2 ? b : a).push_back(i);
  McfParams params;
  params.n_trees = trees;
  params.seed = seed;
  const auto forest = fit_mcf(g.data.subset(a), g.data.subset(b), params);
  EffectEngine engine(forest, g.data.x, 1.0);

  double worst_sum = 0.0;
  bool bgate_equal = true, antisymmetric = true;
  for (Contrast c : {Contrast{1, 0}, Contrast{2, 0}, Contrast{2, 1}}) {
    const auto ate = engine.ate(c);
    const auto ok = engine.defined(c);
    for (std::size_t zcol : {std::size_t{0}, std::size_t{4}}) {
      std::vector<double> z;
      for (std::size_t i = 0; i < n; ++i)
        if (ok[i]) z.push_back(g.data.x(i, zcol));
      std::vector<double> all = g.data.x.column(zcol);
      const auto part = CellPartition::automatic(all);
      const auto gates = engine.gate(c, part);
      const auto bgates = engine.bgate(c, part, CellPartition::combine({}, n));
      std::vector<double> share(part.n_cells(), 0.0);
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        if (ok[i]) {
          share[static_cast<std::size_t>(part.cell[i])] += 1.0;
          total += 1.0;
        }
      double weighted = 0.0;
      std::size_t gi = 0;
      for (std::size_t cell = 0; cell < part.n_cells(); ++cell) {
        if (share[cell] == 0.0) continue;
        weighted += share[cell] / total * gates.at(gi).estimate;
        ++gi;
      }
      worst_sum = std::max(worst_sum, std::fabs(weighted - ate.estimate));
      if (gates.size() != bgates.size()) bgate_equal = false;
      for (std::size_t j = 0; j < std::min(gates.size(), bgates.size()); ++j)
        if (gates[j].estimate != bgates[j].estimate || gates[j].se != bgates[j].se || gates[j].cell != bgates[j].cell)
          bgate_equal = false;
    }
    const auto rev = engine.ate(c.reversed());
    if (rev.estimate != -ate.estimate || rev.se != ate.se) antisymmetric = false;
    const auto t1 = engine.iates(c), t2 = engine.iates(c.reversed());
    for (std::size_t i = 0; i < t1.size(); ++i)
      if (!(std::isnan(t1[i]) && std::isnan(t2[i])) && t1[i] != -t2[i]) antisymmetric = false;
  }
  CheckResult r{"aggregation_identities", worst_sum <= 1e-9 && bgate_equal && antisymmetric, ""};
  r.detail = "max |sum share*GATE - ATE| " + format_double(worst_sum) + ", BGATE(empty W)==GATE " +
             (bgate_equal ? "yes" : "no") + ", antisymmetric " + (antisymmetric ? "yes" : "no");
  return r;
}

// Quick versions of every suite, for the command-line `verify`.
inline std::vector<CheckResult> run_quick(std::uint64_t seed) {
  return {weight_contract(200, 600, 50, seed),  policy_exactness(40, seed),
          trimming_oracle(100, seed),           std_diff_oracle(100, seed),
          lloyd_monotone(50, seed),             aggregation_identities(600, 50, seed)};
}

}  // namespace mcf::verify
