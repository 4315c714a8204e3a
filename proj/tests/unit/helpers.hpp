#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mcf/data.hpp"
#include "mcf/synth.hpp"

namespace testutil {

// Dataset with continuous covariates x1..xp, one outcome y and a K-arm
// treatment column.
inline mcf::Dataset make_dataset(const mcf::Matrix& x, const std::vector<int>& d, const std::vector<double>& y, int k,
                                 std::vector<mcf::ColumnKind> kinds = {}, std::vector<int> categories = {}) {
  using namespace mcf;
  std::vector<ColumnSpec> cols;
  for (std::size_t j = 0; j < x.cols(); ++j) {
    ColumnSpec c;
    c.name = "x" + std::to_string(j + 1);
    c.kind = kinds.empty() ? ColumnKind::continuous : kinds[j];
    c.roles = Role::confounder | Role::heterogeneity;
    if (c.kind != ColumnKind::continuous) c.n_categories = categories.at(j);
    cols.push_back(c);
  }
  ColumnSpec t;
  t.name = "d";
  t.kind = ColumnKind::unordered;
  t.roles = static_cast<unsigned>(Role::treatment);
  t.n_categories = k;
  cols.push_back(t);
  ColumnSpec o;
  o.name = "y";
  o.roles = static_cast<unsigned>(Role::outcome);
  cols.push_back(o);
  Dataset out;
  out.schema = Schema(cols);
  assign_layout(out);
  out.x = x;
  out.treatment = d;
  out.y = Matrix(y.size(), 1);
  for (std::size_t i = 0; i < y.size(); ++i) out.y(i, 0) = y[i];
  out.aux = Matrix(y.size(), 0);
  validate(out);
  return out;
}

inline mcf::Matrix from_rows(const std::vector<std::vector<double>>& rows) {
  mcf::Matrix m;
  for (const auto& r : rows) m.append_row(r);
  return m;
}

inline std::vector<std::size_t> iota(std::size_t n, std::size_t from = 0) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = from + i;
  return v;
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mcf_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Two-arm DGP: x ~ N(0,1)^p, y = base + tau(x)*d + noise.
struct TwoArm {
  mcf::Matrix x;
  std::vector<int> d;
  std::vector<double> y;
  std::vector<double> tau;
};

template <typename Tau, typename Prop>
TwoArm two_arm(std::size_t n, std::size_t p, std::uint64_t seed, Tau tau, Prop prop, double noise = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> u;
  TwoArm out;
  out.x = mcf::Matrix(n, p);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p; ++j) out.x(i, j) = z(rng);
    const auto row = out.x.row(i);
    const int d = u(rng) < prop(row) ? 1 : 0;
    const double t = tau(row);
    out.d.push_back(d);
    out.tau.push_back(t);
    out.y.push_back(0.5 * row[0] + t * d + noise * z(rng));
  }
  return out;
}

}  // namespace testutil
