#pragma once

// k-means++ clustering of IATE vectors with silhouette-based choice of k and
// covariate profiles of the clusters.

#include <algorithm>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mcf/common.hpp"
#include "mcf/csv.hpp"

namespace mcf {

struct KMeansOptions {
  std::vector<std::size_t> k_values{2, 3, 4, 5, 6, 7, 8};
  double min_share = 0.01;
  std::size_t n_init = 10;
  double tol = 1e-6;
  std::size_t max_iter = 300;
  std::uint64_t seed = 1;
  bool merge_small = false;  // merge clusters below min_share instead of re-selecting k
};

struct KMeansRun {
  Matrix centroids;
  std::vector<int> assignment;
  double objective = 0.0;          // within-cluster sum of squares
  std::vector<double> trace;       // objective after every assignment step
  std::size_t iterations = 0;
};

struct ClusterModel {
  std::size_t k = 1;
  Matrix centroids;
  std::vector<int> assignment;
  double silhouette = 0.0;
  std::vector<double> shares;
  std::vector<double> objective_trace;
  std::vector<std::pair<std::size_t, double>> candidates;  // (k, mean silhouette) per fitted k
  std::vector<std::string> warnings;
};

namespace detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
  return s;
}

// Nearest centroid, ties to the lowest index.
inline std::pair<int, double> nearest(std::span<const double> x, const Matrix& c) {
  int best = 0;
  double bd = sq_dist(x, c.row(0));
  for (std::size_t j = 1; j < c.rows(); ++j) {
    const double d = sq_dist(x, c.row(j));
    if (d < bd) {
      bd = d;
      best = static_cast<int>(j);
    }
  }
  return {best, bd};
}

inline std::vector<double> shares_of(std::span<const int> assignment, std::size_t k) {
  std::vector<double> s(k, 0.0);
  for (int a : assignment) s[static_cast<std::size_t>(a)] += 1.0;
  for (auto& v : s) v /= static_cast<double>(assignment.size());
  return s;
}

}  // namespace detail

// First centroid uniform; each further centroid drawn with probability
// proportional to the squared distance to the nearest chosen centroid.
inline Matrix kmeanspp_seed(const Matrix& x, std::size_t k, Rng& rng) {
  const std::size_t n = x.rows();
  Matrix c(k, x.cols());
  const auto first = uniform_index(rng, n);
  std::copy(x.row(first).begin(), x.row(first).end(), c.row(0).begin());
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = detail::sq_dist(x.row(i), c.row(0));
  for (std::size_t j = 1; j < k; ++j) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t pick = 0;
    if (total > 0.0) {
      const double u = uniform01(rng) * total;
      double acc = 0.0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (u < acc && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = uniform_index(rng, n);
    }
    std::copy(x.row(pick).begin(), x.row(pick).end(), c.row(j).begin());
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], detail::sq_dist(x.row(i), c.row(j)));
  }
  return c;
}

// Lloyd iterations from the given centroids until the largest centroid move
// is below tol. Empty clusters keep their previous centroid.
inline KMeansRun lloyd(const Matrix& x, Matrix centroids, double tol, std::size_t max_iter) {
  const std::size_t n = x.rows(), m = x.cols(), k = centroids.rows();
  KMeansRun run;
  run.assignment.assign(n, 0);
  auto assign = [&] {
    double obj = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto [c, d] = detail::nearest(x.row(i), centroids);
      run.assignment[i] = c;
      obj += d;
    }
    return obj;
  };
  for (std::size_t it = 0; it < max_iter; ++it) {
    run.trace.push_back(assign());
    ++run.iterations;
    Matrix next = centroids;
    std::vector<double> count(k, 0.0);
    std::vector<double> sum(k * m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(run.assignment[i]);
      count[c] += 1.0;
      for (std::size_t j = 0; j < m; ++j) sum[c * m + j] += x(i, j);
    }
    double move = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) next(c, j) = sum[c * m + j] / count[c];
      move = std::max(move, std::sqrt(detail::sq_dist(next.row(c), centroids.row(c))));
    }
    centroids = std::move(next);
    if (move < tol) break;
  }
  run.objective = assign();
  run.trace.push_back(run.objective);
  run.centroids = std::move(centroids);
  return run;
}

// Best of n_init seeded restarts (lowest objective, earliest on ties).
inline KMeansRun fit_kmeans(const Matrix& x, std::size_t k, const KMeansOptions& opt) {
  if (k < 1 || k > x.rows())
    throw ConfigError("k = " + std::to_string(k) + " invalid for " + std::to_string(x.rows()) + " points");
  std::vector<KMeansRun> runs(std::max<std::size_t>(opt.n_init, 1));
  parallel_for(runs.size(), [&](std::size_t r) {
    Rng rng(derive_seed(opt.seed, k * 1009 + r));
    runs[r] = lloyd(x, kmeanspp_seed(x, k, rng), opt.tol, opt.max_iter);
  });
  std::size_t best = 0;
  for (std::size_t r = 1; r < runs.size(); ++r)
    if (runs[r].objective < runs[best].objective) best = r;
  return std::move(runs[best]);
}

// Per-point silhouette (b - a) / max(a, b); 0 for singletons and for k = 1.
inline std::vector<double> silhouette_values(const Matrix& x, std::span<const int> assignment, std::size_t k) {
  const std::size_t n = x.rows();
  std::vector<double> s(n, 0.0);
  if (k < 2) return s;
  std::vector<double> size(k, 0.0);
  for (int a : assignment) size[static_cast<std::size_t>(a)] += 1.0;
  parallel_for(n, [&](std::size_t i) {
    std::vector<double> sum(k, 0.0);
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) sum[static_cast<std::size_t>(assignment[j])] += std::sqrt(detail::sq_dist(x.row(i), x.row(j)));
    const auto own = static_cast<std::size_t>(assignment[i]);
    if (size[own] <= 1.0) return;
    const double a = sum[own] / (size[own] - 1.0);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c)
      if (c != own && size[c] > 0) b = std::min(b, sum[c] / size[c]);
    if (!std::isfinite(b)) return;
    const double denom = std::max(a, b);
    s[i] = denom > 0 ? (b - a) / denom : 0.0;
  });
  return s;
}

inline double mean_silhouette(const Matrix& x, std::span<const int> assignment, std::size_t k) {
  const auto s = silhouette_values(x, assignment, k);
  return mean(s);
}

namespace detail {

inline ClusterModel to_model(const Matrix& x, KMeansRun run, std::size_t k) {
  ClusterModel m;
  m.k = k;
  m.centroids = std::move(run.centroids);
  m.assignment = std::move(run.assignment);
  m.objective_trace = std::move(run.trace);
  m.shares = shares_of(m.assignment, k);
  m.silhouette = mean_silhouette(x, m.assignment, k);
  return m;
}

// Folds clusters below min_share into their nearest remaining centroid.
inline void merge_small(const Matrix& x, ClusterModel& m, double min_share) {
  while (m.k > 1) {
    const auto it = std::min_element(m.shares.begin(), m.shares.end());
    if (*it >= min_share) break;
    const auto drop = static_cast<std::size_t>(it - m.shares.begin());
    std::vector<std::size_t> keep;
    for (std::size_t c = 0; c < m.k; ++c)
      if (c != drop) keep.push_back(c);
    Matrix c = m.centroids.select_rows(keep);
    for (std::size_t i = 0; i < x.rows(); ++i) m.assignment[i] = nearest(x.row(i), c).first;
    m.centroids = std::move(c);
    --m.k;
    m.shares = shares_of(m.assignment, m.k);
    m.warnings.push_back("merged a cluster below the minimum share");
  }
  m.silhouette = mean_silhouette(x, m.assignment, m.k);
}

}  // namespace detail

// Fits every k in opt.k_values and keeps the one with the highest mean
// silhouette among the solutions whose clusters all hold at least min_share.
inline ClusterModel kmeanspp_fit(const Matrix& x, const KMeansOptions& opt) {
  if (x.rows() == 0 || x.cols() == 0) throw DataError("kmeanspp_fit: empty point matrix");
  auto ks = opt.k_values;
  if (ks.empty()) throw ConfigError("kmeanspp_fit: no candidate k");
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  for (auto k : ks)
    if (k < 1 || k > x.rows())
      throw ConfigError("kmeanspp_fit: k = " + std::to_string(k) + " exceeds the " + std::to_string(x.rows()) +
                        " points");

  bool identical = true;
  for (std::size_t i = 1; i < x.rows() && identical; ++i)
    identical = std::equal(x.row(i).begin(), x.row(i).end(), x.row(0).begin());
  if (identical) {
    auto m = detail::to_model(x, fit_kmeans(x, 1, opt), 1);
    if (ks.back() >= 2) m.warnings.push_back("all points identical; k forced to 1");
    m.candidates.push_back({1, 0.0});
    return m;
  }

  std::vector<ClusterModel> fits;
  for (auto k : ks) fits.push_back(detail::to_model(x, fit_kmeans(x, k, opt), k));
  std::vector<std::pair<std::size_t, double>> candidates;
  for (const auto& f : fits) candidates.push_back({f.k, f.silhouette});

  auto eligible = [&](const ClusterModel& f) {
    return std::all_of(f.shares.begin(), f.shares.end(), [&](double s) { return s >= opt.min_share; });
  };
  std::size_t chosen = fits.size();
  for (std::size_t i = 0; i < fits.size(); ++i)
    if (eligible(fits[i]) && (chosen == fits.size() || fits[i].silhouette > fits[chosen].silhouette)) chosen = i;

  ClusterModel out;
  if (chosen < fits.size()) {
    out = std::move(fits[chosen]);
  } else if (opt.merge_small) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < fits.size(); ++i)
      if (fits[i].silhouette > fits[best].silhouette) best = i;
    out = std::move(fits[best]);
    detail::merge_small(x, out, opt.min_share);
  } else {
    out = std::move(fits.front());
    out.warnings.push_back("no candidate k keeps every cluster at or above the minimum share; smallest k used");
  }
  out.candidates = std::move(candidates);
  return out;
}

struct ClusterProfile {
  std::vector<std::size_t> order;  // cluster ids sorted by mean IATE, least first
  std::vector<double> shares;      // per cluster id
  Matrix iate_means;               // cluster id x IATE dimension
  Matrix covariate_means;          // cluster id x covariate
  std::vector<std::string> iate_names;
  std::vector<std::string> covariate_names;

  std::size_t least() const { return order.front(); }
  std::size_t most() const { return order.back(); }
};

// Covariate and IATE means per cluster, ordered by the mean of IATE column
// `sort_dim`.
inline ClusterProfile profile_clusters(const ClusterModel& model, const Matrix& iates, const Matrix& covariates,
                                       std::vector<std::string> iate_names, std::vector<std::string> covariate_names,
                                       std::size_t sort_dim = 0) {
  const std::size_t n = model.assignment.size(), k = model.k;
  if (iates.rows() != n || covariates.rows() != n) throw std::invalid_argument("profile_clusters: row mismatch");
  if (sort_dim >= iates.cols()) throw std::invalid_argument("profile_clusters: sort dimension out of range");
  ClusterProfile p;
  p.iate_names = std::move(iate_names);
  p.covariate_names = std::move(covariate_names);
  p.shares = detail::shares_of(model.assignment, k);
  p.iate_means = Matrix(k, iates.cols());
  p.covariate_means = Matrix(k, covariates.cols());
  std::vector<double> count(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<std::size_t>(model.assignment[i]);
    count[c] += 1.0;
    for (std::size_t j = 0; j < iates.cols(); ++j) p.iate_means(c, j) += iates(i, j);
    for (std::size_t j = 0; j < covariates.cols(); ++j) p.covariate_means(c, j) += covariates(i, j);
  }
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t j = 0; j < iates.cols(); ++j) p.iate_means(c, j) = count[c] ? p.iate_means(c, j) / count[c] : std::nan("");
    for (std::size_t j = 0; j < covariates.cols(); ++j)
      p.covariate_means(c, j) = count[c] ? p.covariate_means(c, j) / count[c] : std::nan("");
  }
  p.order.resize(k);
  std::iota(p.order.begin(), p.order.end(), 0);
  std::stable_sort(p.order.begin(), p.order.end(),
                   [&](std::size_t a, std::size_t b) { return p.iate_means(a, sort_dim) < p.iate_means(b, sort_dim); });
  return p;
}

// One column per cluster from least to most benefiting, then Least - Most.
inline std::string profile_csv(const ClusterProfile& p) {
  std::ostringstream out;
  csv::Writer w(out);
  std::vector<std::string> header{"variable"};
  for (std::size_t r = 0; r < p.order.size(); ++r) {
    std::string name = "cluster_" + std::to_string(r + 1);
    if (r == 0) name += "_least";
    if (r + 1 == p.order.size()) name += "_most";
    header.push_back(name);
  }
  header.push_back("least_minus_most");
  w.header(header);
  auto emit = [&](const std::string& label, auto value) {
    std::vector<std::string> row{label};
    for (auto c : p.order) row.push_back(format_double(value(c)));
    row.push_back(format_double(value(p.least()) - value(p.most())));
    w.row(row);
  };
  emit("share", [&](std::size_t c) { return p.shares[c]; });
  for (std::size_t j = 0; j < p.iate_names.size(); ++j)
    emit("iate_" + p.iate_names[j], [&](std::size_t c) { return p.iate_means(c, j); });
  for (std::size_t j = 0; j < p.covariate_names.size(); ++j)
    emit(p.covariate_names[j], [&](std::size_t c) { return p.covariate_means(c, j); });
  return out.str();
}

}  // namespace mcf
