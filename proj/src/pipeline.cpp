#include "mcf/pipeline.hpp"

#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <unordered_map>

#include "mcf/causal_forest.hpp"
#include "mcf/cluster.hpp"
#include "mcf/csv.hpp"
#include "mcf/data.hpp"
#include "mcf/effects.hpp"
#include "mcf/forest.hpp"
#include "mcf/policy.hpp"
#include "mcf/pseudo_start.hpp"
#include "mcf/serialization.hpp"
#include "mcf/support.hpp"
#include "mcf/synth.hpp"
#include "mcf/verify.hpp"

namespace mcf::pipeline {

namespace fs = std::filesystem;

namespace {

// Seed streams per stage, derived from the global seed.
constexpr std::uint64_t kSupportStream = 11;
constexpr std::uint64_t kPseudoStream = 12;
constexpr std::uint64_t kSplitStream = 13;
constexpr std::uint64_t kForestStream = 14;
constexpr std::uint64_t kPolicyStream = 15;
constexpr std::uint64_t kClusterStream = 16;
constexpr std::uint64_t kSimulateStream = 17;
constexpr std::uint64_t kVerifyStream = 18;

// ---------------------------------------------------------------------------
// Configuration

std::string kind_of(const json& j) {
  if (j.is_null()) return "null";
  if (j.is_boolean()) return "a boolean";
  if (j.is_number()) return "a number";
  if (j.is_string()) return "a string";
  if (j.is_array()) return "an array";
  return "an object";
}

bool same_kind(const json& a, const json& b) {
  return (a.is_boolean() && b.is_boolean()) || (a.is_number() && b.is_number()) || (a.is_string() && b.is_string()) ||
         (a.is_array() && b.is_array()) || (a.is_object() && b.is_object());
}

// Keys must exist in the defaults and keep their type; keys whose default
// is null accept any value.
void check_against(const json& def, const json& cfg, const std::string& path) {
  if (!cfg.is_object()) throw ConfigError((path.empty() ? "config" : path) + ": expected an object");
  for (auto it = cfg.begin(); it != cfg.end(); ++it) {
    const std::string p = path.empty() ? it.key() : path + "." + it.key();
    if (!def.contains(it.key())) throw ConfigError(p + ": unknown key");
    const json& d = def[it.key()];
    if (d.is_null()) continue;
    if (!same_kind(d, it.value()))
      throw ConfigError(p + ": expected " + kind_of(d) + ", got " + kind_of(it.value()));
    if (d.is_object()) check_against(d, it.value(), p);
  }
}

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {}

  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  const json& at(const std::string& key) const {
    if (!j_.contains(key)) throw ConfigError(where(key) + ": missing");
    return j_.at(key);
  }
  bool is_null(const std::string& key) const { return at(key).is_null(); }
  Section sub(const std::string& key) const { return {at(key), where(key)}; }

  double real(const std::string& key) const {
    const auto& v = at(key);
    if (!v.is_number()) throw ConfigError(where(key) + ": expected a number");
    return v.get<double>();
  }
  std::size_t count(const std::string& key) const { return count_of(at(key), where(key)); }
  bool flag(const std::string& key) const {
    const auto& v = at(key);
    if (!v.is_boolean()) throw ConfigError(where(key) + ": expected a boolean");
    return v.get<bool>();
  }
  std::string text(const std::string& key) const {
    const auto& v = at(key);
    if (!v.is_string()) throw ConfigError(where(key) + ": expected a string");
    return v.get<std::string>();
  }
  std::vector<std::string> names(const std::string& key) const {
    const auto& v = at(key);
    if (!v.is_array()) throw ConfigError(where(key) + ": expected an array of names");
    std::vector<std::string> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_string()) throw ConfigError(where(key) + "[" + std::to_string(i) + "]: expected a string");
      out.push_back(v[i].get<std::string>());
    }
    return out;
  }

  static std::size_t count_of(const json& v, const std::string& where) {
    if (!v.is_number_integer() || v.get<long long>() < 0)
      throw ConfigError(where + ": expected a nonnegative integer");
    return v.get<std::size_t>();
  }

 private:
  const json& j_;
  std::string path_;
};

// ---------------------------------------------------------------------------
// Run directory, artifacts and manifest

struct Run {
  json cfg;
  fs::path out;
  std::uint64_t seed = 0;
  std::ostream* log = nullptr;

  Section section(const std::string& key) const { return Section(cfg, "").sub(key); }
  Section top() const { return Section(cfg, ""); }
};

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open '" + p.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Hash of the configuration without the run-location keys.
std::string config_hash(const json& cfg) {
  json c = cfg;
  c.erase("out");
  c.erase("data");
  c.erase("schema");
  return hex64(fnv1a(c.dump()));
}

class Stage {
 public:
  Stage(const Run& run, std::string name) : run_(run), name_(std::move(name)) {}

  void input(const fs::path& p) {
    const auto key = p.parent_path() == run_.out ? p.filename().string() : p.string();
    inputs_[key] = hex64(fnv1a(read_bytes(p)));
  }
  void add(const std::string& file, std::string content) { artifacts_.emplace_back(file, std::move(content)); }
  void warn(const std::string& msg) {
    if (std::find(warnings_.begin(), warnings_.end(), msg) == warnings_.end()) warnings_.push_back(msg);
  }
  void warn_all(const std::vector<std::string>& msgs) {
    for (const auto& m : msgs) warn(m);
  }
  std::ostream& log() const { return *run_.log; }

  // Artifacts are only written once the stage has finished computing, so a
  // failure leaves the previous run's files untouched.
  void commit() {
    json artifacts = json::object();
    for (const auto& [file, content] : artifacts_) {
      csv::write_file_atomic(run_.out / file, content);
      artifacts[file] = hex64(fnv1a(content));
    }
    const auto manifest_path = run_.out / "manifest.json";
    json manifest;
    if (fs::exists(manifest_path)) {
      try {
        manifest = io::read_json_file(manifest_path);
      } catch (const DataError&) {
        manifest = json::object();
      }
    }
    if (!manifest.is_object()) manifest = json::object();
    manifest["tool"] = "mcf";
    manifest["version"] = std::string(kVersion);
    manifest["format_version"] = io::kFormatVersion;
    if (!manifest.contains("stages") || !manifest["stages"].is_object()) manifest["stages"] = json::object();
    json inputs = json::object();
    for (const auto& [k, v] : inputs_) inputs[k] = v;
    manifest["stages"][name_] = {{"seed", run_.seed},
                                 {"config_hash", config_hash(run_.cfg)},
                                 {"inputs", inputs},
                                 {"artifacts", artifacts},
                                 {"warnings", warnings_}};
    csv::write_file_atomic(manifest_path, io::dump(manifest));
    for (const auto& w : warnings_) log() << "  warning: " << w << "\n";
    log() << name_ << ": wrote " << artifacts_.size() << " artifact(s) to " << run_.out.string() << "\n";
  }

 private:
  const Run& run_;
  std::string name_;
  std::map<std::string, std::string> inputs_;
  std::vector<std::pair<std::string, std::string>> artifacts_;
  std::vector<std::string> warnings_;
};

fs::path require(const Run& run, const std::string& stage, const std::string& file, const std::string& producer) {
  const auto p = run.out / file;
  if (!fs::exists(p))
    throw DataError(stage + ": missing dependency " + file + " in " + run.out.string() + " (run `mcf " + producer +
                    "` first)");
  return p;
}

// ---------------------------------------------------------------------------
// Data helpers

Dataset load_data(const Run& run, Stage& st) {
  const auto top = run.top();
  const fs::path data = top.is_null("data") ? run.out / "data.csv" : fs::path(top.text("data"));
  const fs::path schema = top.is_null("schema") ? run.out / "schema.json" : fs::path(top.text("schema"));
  if (!fs::exists(data))
    throw ConfigError(std::string(top.is_null("data") ? "data: not set and " : "data: ") + data.string() +
                      " does not exist" + (top.is_null("data") ? " (run `mcf simulate` or set data)" : ""));
  if (!fs::exists(schema))
    throw ConfigError(std::string(top.is_null("schema") ? "schema: not set and " : "schema: ") + schema.string() +
                      " does not exist");
  st.input(data);
  st.input(schema);
  auto d = load_csv(data, io::schema_from_json(io::read_json_file(schema)));
  if (d.size() == 0) throw DataError("data: no rows in " + data.string());
  return d;
}

std::string row_id(const Dataset& d, std::size_t i) { return d.ids.empty() ? std::to_string(i + 1) : d.ids[i]; }

std::vector<std::string> arm_names(const Dataset& d) {
  const auto& spec = d.schema.treatment();
  std::vector<std::string> out;
  for (int a = 0; a < d.n_treatments(); ++a)
    out.push_back(static_cast<std::size_t>(a) < spec.labels.size() ? spec.labels[static_cast<std::size_t>(a)]
                                                                    : std::to_string(a));
  return out;
}

int control_of(const Run& run, const Dataset& d) {
  const auto& v = run.top().at("control");
  if (!v.is_number_integer() || v.get<long long>() < 0 || v.get<long long>() >= d.n_treatments())
    throw ConfigError("control: expected a treatment label in 0.." + std::to_string(d.n_treatments() - 1));
  return v.get<int>();
}

std::size_t outcome_of(const Run& run, const Dataset& d) {
  const auto top = run.top();
  if (top.is_null("outcome")) return d.y.cols() - 1;
  try {
    return d.outcome(top.text("outcome"));
  } catch (const DataError& e) {
    throw ConfigError(std::string("outcome: ") + e.what());
  }
}

std::vector<std::size_t> covariate_indices(const Dataset& d, const std::vector<std::string>& names,
                                           const std::string& where) {
  std::vector<std::size_t> out;
  for (const auto& n : names) {
    try {
      out.push_back(d.covariate(n));
    } catch (const DataError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  return out;
}

std::vector<std::string> names_of(const Dataset& d, const std::vector<std::size_t>& cols) {
  std::vector<std::string> out;
  for (auto c : cols) out.push_back(d.covariate_spec(c).name);
  return out;
}

std::vector<ColumnKind> kinds_of(const Dataset& d, const std::vector<std::size_t>& cols) {
  const auto all = d.covariate_kinds();
  std::vector<ColumnKind> out;
  for (auto c : cols) out.push_back(all[c]);
  return out;
}

std::vector<bool> read_mask(const fs::path& p, const Dataset& d) {
  const auto t = csv::read_file(p);
  const auto id = t.column("id"), kept = t.column("kept");
  if (t.rows.size() != d.size())
    throw DataError(p.filename().string() + ": " + std::to_string(t.rows.size()) + " rows, data has " +
                    std::to_string(d.size()));
  std::vector<bool> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (t.rows[i].at(id) != row_id(d, i))
      throw DataError(p.filename().string() + ": row " + std::to_string(i + 1) + " does not match the data ids");
    out[i] = t.rows[i].at(kept) == "1";
  }
  return out;
}

struct Parts {
  std::vector<std::size_t> train, estimation, validation, all;  // data rows, ascending
};

Parts read_split(const fs::path& p, const Dataset& d) {
  const auto t = csv::read_file(p);
  const auto id = t.column("id"), part = t.column("part");
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < d.size(); ++i) index.emplace(row_id(d, i), i);
  Parts out;
  for (const auto& r : t.rows) {
    const auto it = index.find(r.at(id));
    if (it == index.end()) throw DataError("split.csv: unknown id '" + r.at(id) + "'");
    const auto& label = r.at(part);
    if (label == "train") out.train.push_back(it->second);
    else if (label == "estimation") out.estimation.push_back(it->second);
    else if (label == "validation") out.validation.push_back(it->second);
    else throw DataError("split.csv: unknown part '" + label + "'");
    out.all.push_back(it->second);
  }
  for (auto* v : {&out.train, &out.estimation, &out.validation, &out.all}) std::sort(v->begin(), v->end());
  return out;
}

CausalForest load_forest(const Run& run, Stage& st, const std::string& stage, const Dataset& d) {
  const auto path = require(run, stage, "forest.json", "fit");
  st.input(path);
  auto forest = io::forest_from_json(io::read_json_file(path));
  if (forest.n_features != d.n_covariates())
    throw DataError(stage + ": forest.json expects " + std::to_string(forest.n_features) + " covariates, data has " +
                    std::to_string(d.n_covariates()));
  if (forest.n_treatments != d.n_treatments()) throw DataError(stage + ": forest.json treatment count differs from data");
  return forest;
}

Parts load_split(const Run& run, Stage& st, const std::string& stage, const Dataset& d) {
  const auto path = require(run, stage, "split.csv", "fit");
  st.input(path);
  return read_split(path, d);
}

std::string matrix_csv(const std::vector<std::string>& header, const std::vector<std::string>& ids, const Matrix& m) {
  std::ostringstream out;
  csv::Writer w(out);
  std::vector<std::string> h{"id"};
  h.insert(h.end(), header.begin(), header.end());
  w.header(h);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    std::vector<std::string> row{ids[i]};
    for (std::size_t j = 0; j < m.cols(); ++j) row.push_back(format_double(m(i, j)));
    w.row(row);
  }
  return out.str();
}

std::vector<std::string> ids_of(const Dataset& d, const std::vector<std::size_t>& rows) {
  std::vector<std::string> out;
  for (auto r : rows) out.push_back(row_id(d, r));
  return out;
}

ForestParams base_forest_params(const Section& s, std::uint64_t seed, std::size_t p) {
  ForestParams fp;
  fp.n_trees = s.count("n_trees");
  fp.min_leaf = s.count("min_leaf");
  fp.mtry = s.count("mtry");
  fp.seed = seed;
  try {
    fp.validate(p);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(s.where("n_trees").substr(0, s.where("n_trees").rfind('.')) + ": " + e.what());
  }
  return fp;
}

// ---------------------------------------------------------------------------
// Option parsers shared by the stages and the upfront check

SupportRule support_rule(const Section& sec) {
  const auto kind = sec.text("rule");
  if (kind == "min_max") return SupportRule::min_max();
  if (kind != "quantile") throw ConfigError(sec.where("rule") + ": expected \"min_max\" or \"quantile\"");
  try {
    return SupportRule::quantile(sec.real("q_low"), sec.real("q_high"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(sec.where("q_low") + ": " + e.what());
  }
}

ConstraintMethod constraint_method(const Section& sec) {
  const auto method = sec.text("method");
  if (method == "auto") return ConstraintMethod::automatic;
  if (method == "costs") return ConstraintMethod::costs;
  if (method == "exact") return ConstraintMethod::exact;
  throw ConfigError(sec.where("method") + ": expected \"auto\", \"costs\" or \"exact\"");
}

std::size_t tree_depth(const Section& sec, const std::string& key) {
  const auto v = sec.count(key);
  if (v > 4) throw ConfigError(sec.where(key) + ": policy tree depth must lie in 0..4");
  return v;
}

std::optional<std::pair<std::size_t, std::size_t>> sequential_depths(const Section& sec) {
  const auto& seq = sec.at("sequential");
  if (seq.empty()) return std::nullopt;
  if (seq.size() != 2) throw ConfigError(sec.where("sequential") + ": expected [depth_a, depth_b] or []");
  const auto a = Section::count_of(seq[0], sec.where("sequential"));
  const auto b = Section::count_of(seq[1], sec.where("sequential"));
  if (a < 1 || a > 4 || b > 4) throw ConfigError(sec.where("sequential") + ": depths must lie in 1..4 and 0..4");
  return std::pair{a, b};
}

KMeansOptions kmeans_options(const Section& sec, std::uint64_t seed) {
  KMeansOptions opt;
  opt.k_values.clear();
  for (const auto& v : sec.at("k_values")) opt.k_values.push_back(Section::count_of(v, sec.where("k_values")));
  if (opt.k_values.empty()) throw ConfigError(sec.where("k_values") + ": empty");
  for (auto k : opt.k_values)
    if (k < 1) throw ConfigError(sec.where("k_values") + ": k must be >= 1");
  opt.min_share = sec.real("min_share");
  if (!(opt.min_share >= 0.0 && opt.min_share < 1.0)) throw ConfigError(sec.where("min_share") + ": must lie in [0, 1)");
  opt.n_init = sec.count("n_init");
  opt.tol = sec.real("tol");
  opt.max_iter = sec.count("max_iter");
  if (opt.n_init < 1 || opt.max_iter < 1) throw ConfigError(sec.where("n_init") + ": n_init and max_iter must be >= 1");
  opt.merge_small = sec.flag("merge_small");
  opt.seed = seed;
  return opt;
}

std::string simulate_preset(const Section& sec) {
  const auto preset = sec.text("preset");
  if (preset != "paper_shaped" && preset != "placebo")
    throw ConfigError(sec.where("preset") + ": expected \"paper_shaped\" or \"placebo\"");
  return preset;
}

std::vector<std::string> simulate_stages(const Section& sec) {
  const auto stages = sec.names("stages");
  for (const auto& s : stages)
    if (std::find(stage_names().begin(), stage_names().end(), s) == stage_names().end())
      throw ConfigError(sec.where("stages") + ": unknown stage '" + s + "'");
  return stages;
}

// ---------------------------------------------------------------------------
// Stages

void stage_describe(const Run& run) {
  Stage st(run, "describe");
  const auto d = load_data(run, st);
  const auto rep = describe_by_treatment(d, control_of(run, d));
  st.add("describe.csv", rep.to_csv());
  st.warn_all(rep.warnings);
  st.log() << "describe: " << d.size() << " rows, " << d.n_covariates() << " covariates, " << d.n_treatments()
           << " treatments\n";
  st.commit();
}

void stage_support(const Run& run) {
  Stage st(run, "support");
  const auto d = load_data(run, st);
  const auto sec = run.section("support");
  auto cols = d.covariates_with(Role::confounder);
  if (cols.empty()) {
    cols.resize(d.n_covariates());
    std::iota(cols.begin(), cols.end(), 0);
  }
  const auto x = d.x.select_cols(cols);
  const auto kinds = kinds_of(d, cols);
  const auto fp = base_forest_params(sec, derive_seed(run.seed, kSupportStream), cols.size());
  const auto model = fit_classification(x, kinds, d.treatment, fp, d.n_treatments());
  const Matrix probs = model.oob_predict_proba(x);

  const auto rule = support_rule(sec);
  const auto rep = trim(probs, d.treatment, rule);
  const auto keys = sec.is_null("key_covariates") ? d.covariate_names() : sec.names("key_covariates");
  covariate_indices(d, keys, sec.where("key_covariates"));
  const auto diag = support_diagnostics(d, rep, keys);

  const auto arms = arm_names(d);
  std::vector<std::string> header;
  for (const auto& a : arms) header.push_back("p_" + a);
  std::vector<std::size_t> all(d.size());
  std::iota(all.begin(), all.end(), 0);
  st.add("propensities.csv", matrix_csv(header, ids_of(d, all), probs));

  std::ostringstream mask;
  csv::Writer mw(mask);
  mw.header({"id", "kept"});
  for (std::size_t i = 0; i < d.size(); ++i) mw.row({row_id(d, i), rep.keep[i] ? "1" : "0"});
  st.add("sample_mask.csv", mask.str());

  std::ostringstream bounds;
  csv::Writer bw(bounds);
  bw.header({"propensity", "lower", "upper"});
  for (std::size_t j = 0; j < rep.bounds.size(); ++j)
    bw.row({"p_" + arms[j], format_double(rep.bounds[j].lower), format_double(rep.bounds[j].upper)});
  st.add("support_bounds.csv", bounds.str());
  st.add("support.csv", support_table_csv(diag));
  st.warn_all(rep.warnings);
  st.warn_all(diag.warnings);
  st.log() << "support: dropped " << rep.dropped << " of " << d.size() << " rows ("
           << format_double(100.0 * rep.dropped_share()) << "%)\n";
  st.commit();
}

void stage_pseudo(const Run& run) {
  Stage st(run, "pseudo");
  const auto d = load_data(run, st);
  const auto sec = run.section("pseudo");
  const int control = control_of(run, d);
  PseudoStartConfig cfg;
  cfg.train_share = sec.real("train_share");
  cfg.horizon = static_cast<int>(sec.count("horizon"));
  cfg.seed = derive_seed(run.seed, kPseudoStream);
  cfg.forest = base_forest_params(sec, derive_seed(run.seed, kPseudoStream + 100), d.n_covariates());
  cfg.validate();
  const auto start = d.auxiliary(sec.text("start_column"));
  const auto duration = d.auxiliary(sec.text("duration_column"));
  const auto kinds = d.covariate_kinds();
  const auto model = fit_start_model(d.x, kinds, d.treatment, d.aux.column(start), cfg, control);

  std::vector<std::size_t> controls;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d.treatment[i] == control) controls.push_back(i);
  if (controls.empty()) throw DataError("pseudo: no control observations");
  std::vector<double> dur;
  for (auto r : controls) dur.push_back(d.aux(r, duration));
  const auto a = assign_and_filter(d.x.select_rows(controls), model, dur, cfg);

  st.add("pseudo_audit.csv", pseudo_audit_csv(a, ids_of(d, controls)));
  std::vector<bool> kept(d.size(), true);
  for (std::size_t c = 0; c < controls.size(); ++c) kept[controls[c]] = a.kept[c];
  std::ostringstream mask;
  csv::Writer mw(mask);
  mw.header({"id", "kept"});
  for (std::size_t i = 0; i < d.size(); ++i) mw.row({row_id(d, i), kept[i] ? "1" : "0"});
  st.add("pseudo_mask.csv", mask.str());
  st.log() << "pseudo: kept " << a.kept_count() << " of " << controls.size() << " controls\n";
  st.commit();
}

McfParams forest_params(const Run& run, std::size_t p, std::size_t outcome) {
  const auto sec = run.section("forest");
  McfParams m;
  m.n_trees = sec.count("n_trees");
  m.mtry = sec.count("mtry");
  m.min_leaf = sec.count("min_leaf");
  if (!sec.is_null("penalty_weight")) m.penalty_weight = sec.real("penalty_weight");
  m.nn_count = sec.count("nn_count");
  m.subsample_fraction = sec.real("subsample_fraction");
  m.estimation_fraction = sec.real("estimation_fraction");
  m.max_depth = sec.count("max_depth");
  m.local_centering = sec.flag("local_centering");
  m.centering_trees = sec.count("centering_trees");
  m.outcome = outcome;
  m.seed = derive_seed(run.seed, kForestStream);
  try {
    m.validate(p);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("forest: ") + e.what());
  }
  return m;
}

void stage_fit(const Run& run) {
  Stage st(run, "fit");
  const auto d = load_data(run, st);
  std::vector<bool> keep(d.size(), true);
  for (const char* file : {"sample_mask.csv", "pseudo_mask.csv"}) {
    const auto p = run.out / file;
    if (!fs::exists(p)) continue;
    st.input(p);
    const auto m = read_mask(p, d);
    for (std::size_t i = 0; i < d.size(); ++i) keep[i] = keep[i] && m[i];
  }
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (keep[i]) rows.push_back(i);
  if (rows.empty()) throw DataError("fit: no rows left after the sample masks");

  const auto sec = run.section("split");
  std::vector<int> treat;
  for (auto r : rows) treat.push_back(d.treatment[r]);
  SampleSplit split;
  try {
    split = three_way_split(treat, derive_seed(run.seed, kSplitStream), sec.real("train"), sec.real("estimation"),
                            sec.real("validation"));
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("split: ") + e.what());
  }
  auto to_rows = [&](const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> out;
    for (auto i : idx) out.push_back(rows[i]);
    return out;
  };
  const auto train = to_rows(split.train), est = to_rows(split.estimation), val = to_rows(split.validation);

  const auto params = forest_params(run, d.n_covariates(), outcome_of(run, d));
  const auto forest = fit_mcf(d.subset(train), d.subset(est), params);

  std::vector<std::string> part(d.size());
  for (auto r : train) part[r] = "train";
  for (auto r : est) part[r] = "estimation";
  for (auto r : val) part[r] = "validation";
  std::ostringstream s;
  csv::Writer w(s);
  w.header({"id", "part"});
  for (std::size_t i = 0; i < d.size(); ++i)
    if (!part[i].empty()) w.row({row_id(d, i), part[i]});
  st.add("split.csv", s.str());
  st.add("forest.json", io::forest_to_json(forest).dump() + "\n");
  st.log() << "fit: " << train.size() << " training, " << est.size() << " estimation, " << val.size()
           << " validation rows; " << params.n_trees << " trees on outcome " << d.outcome_names()[params.outcome]
           << "\n";
  st.commit();
}

std::vector<Contrast> contrasts_of(const Run& run, int k, int control) {
  const auto sec = run.section("effects");
  std::vector<Contrast> out;
  if (sec.is_null("contrasts")) {
    for (int t = 0; t < k; ++t)
      if (t != control) out.push_back({t, control});
    return out;
  }
  const auto& v = sec.at("contrasts");
  const auto where = sec.where("contrasts");
  if (!v.is_array()) throw ConfigError(where + ": expected an array of [treated, reference] pairs");
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto at = where + "[" + std::to_string(i) + "]";
    if (!v[i].is_array() || v[i].size() != 2) throw ConfigError(at + ": expected [treated, reference]");
    const auto t = Section::count_of(v[i][0], at), r = Section::count_of(v[i][1], at);
    if (t >= static_cast<std::size_t>(k) || r >= static_cast<std::size_t>(k) || t == r)
      throw ConfigError(at + ": labels must be distinct and below " + std::to_string(k));
    out.push_back({static_cast<int>(t), static_cast<int>(r)});
  }
  return out;
}

CellPartition named_partition(const Dataset& d, std::size_t col, const std::vector<std::size_t>& rows,
                              std::size_t max_discrete) {
  std::vector<double> v;
  for (auto r : rows) v.push_back(d.x(r, col));
  auto p = CellPartition::automatic(v, max_discrete);
  for (auto& l : p.labels) l = d.covariate_spec(col).name + "=" + l;
  return p;
}

void stage_effects(const Run& run) {
  Stage st(run, "effects");
  const auto d = load_data(run, st);
  const auto forest = load_forest(run, st, "effects", d);
  const auto parts = load_split(run, st, "effects", d);
  const auto sec = run.section("effects");
  const int control = control_of(run, d);
  const auto& rows = parts.all;
  const auto arms = arm_names(d);
  const auto ids = ids_of(d, rows);
  const std::size_t outcome = forest.params.outcome;

  EffectEngine engine(forest, d.x.select_rows(rows), sec.real("undefined_tolerance"));
  engine.set_outcome_names(d.outcome_names());
  const auto contrasts = contrasts_of(run, d.n_treatments(), control);
  const auto max_discrete = sec.count("max_discrete");

  std::vector<std::size_t> zcols =
      sec.is_null("gate") ? d.covariates_with(Role::heterogeneity) : covariate_indices(d, sec.names("gate"), sec.where("gate"));
  std::vector<std::size_t> wcols = sec.is_null("bgate_w") ? d.covariates_with(Role::balancing)
                                                          : covariate_indices(d, sec.names("bgate_w"), sec.where("bgate_w"));
  const bool deltas = sec.flag("deltas");
  std::vector<int> treat;
  for (auto r : rows) treat.push_back(d.treatment[r]);

  std::vector<EffectEstimate> all;
  Matrix iate(rows.size(), contrasts.size());
  std::vector<std::string> iate_header;
  for (std::size_t ci = 0; ci < contrasts.size(); ++ci) {
    const auto c = contrasts[ci];
    all.push_back(engine.ate(c, outcome));
    if (std::count(treat.begin(), treat.end(), c.treated) > 0) {
      auto e = engine.atet(c, treat, c.treated, outcome);
      e.cell = arms[static_cast<std::size_t>(c.treated)];
      all.push_back(e);
    } else {
      st.warn("ATET " + c.label(arms) + ": no prediction rows in treatment " + arms[static_cast<std::size_t>(c.treated)]);
    }
    for (auto z : zcols) {
      const auto zp = named_partition(d, z, rows, max_discrete);
      for (auto& e : engine.gate(c, zp, outcome, deltas)) all.push_back(std::move(e));
      std::vector<CellPartition> wparts;
      for (auto w : wcols)
        if (w != z) wparts.push_back(named_partition(d, w, rows, max_discrete));
      if (wparts.empty()) continue;
      const auto wp = CellPartition::combine(wparts, rows.size());
      for (auto& e : engine.bgate(c, zp, wp, outcome, deltas)) all.push_back(std::move(e));
    }
    const auto tau = engine.iates(c, outcome);
    for (std::size_t j = 0; j < rows.size(); ++j) iate(j, ci) = tau[j];
    iate_header.push_back("iate_" + c.label(arms));
  }
  st.add("effects.csv", effects_csv(all, arms));
  st.add("iate.csv", matrix_csv(iate_header, ids, iate));

  std::vector<std::string> mu_header;
  for (const auto& a : arms) mu_header.push_back("mu_" + a);
  st.add("potential_outcomes.csv", matrix_csv(mu_header, ids, engine.potential_outcomes(outcome)));

  if (sec.flag("curve") && forest.est_y.cols() > 1) {
    EffectCurve curve;
    for (const auto c : contrasts)
      for (auto& p : engine.effect_curve(c)) curve.push_back(std::move(p));
    st.add("curve.csv", curve_csv(curve, arms));
  }
  st.warn_all(engine.warnings());
  st.log() << "effects: " << all.size() << " estimates for " << contrasts.size() << " contrast(s) on "
           << rows.size() << " rows\n";
  for (const auto& e : all)
    if (e.estimand == "ATE")
      st.log() << "  ATE " << e.contrast.label(arms) << " = " << format_double(e.estimate) << " (se "
               << format_double(e.se) << ")" << stars(e.pvalue) << "\n";
  st.commit();
}

// True potential outcomes from the simulation truth, if present.
std::optional<Matrix> oracle_outcomes(const Run& run, Stage& st, const Dataset& d, const std::vector<std::size_t>& rows,
                                      std::size_t outcome) {
  const auto truth_path = run.out / "truth.csv", months_path = run.out / "truth_months.csv";
  if (!fs::exists(truth_path) || !fs::exists(months_path)) return std::nullopt;
  st.input(truth_path);
  st.input(months_path);
  const auto t = csv::read_file(truth_path);
  const auto months = csv::read_file(months_path);
  if (outcome >= months.rows.size()) return std::nullopt;
  const double mult = std::stod(months.rows[outcome].at(months.column("multiplier")));
  const auto k = static_cast<std::size_t>(d.n_treatments());
  std::unordered_map<std::string, std::size_t> index;
  const auto id = t.column("id");
  for (std::size_t i = 0; i < t.rows.size(); ++i) index.emplace(t.rows[i].at(id), i);
  const auto base = t.column("mu_0");
  std::vector<std::size_t> tau;
  for (std::size_t a = 0; a < k; ++a) tau.push_back(t.column("tau_" + std::to_string(a)));
  Matrix out(rows.size(), k);
  for (std::size_t j = 0; j < rows.size(); ++j) {
    const auto it = index.find(row_id(d, rows[j]));
    if (it == index.end()) return std::nullopt;
    const auto& r = t.rows[it->second];
    for (std::size_t a = 0; a < k; ++a) out(j, a) = std::stod(r.at(base)) + mult * std::stod(r.at(tau[a]));
  }
  return out;
}

void stage_policy(const Run& run) {
  Stage st(run, "policy");
  const auto d = load_data(run, st);
  const auto forest = load_forest(run, st, "policy", d);
  const auto parts = load_split(run, st, "policy", d);
  const auto sec = run.section("policy");
  const int control = control_of(run, d);
  const auto arms = arm_names(d);
  const auto k = static_cast<std::size_t>(d.n_treatments());
  const std::size_t outcome = forest.params.outcome;

  std::vector<std::size_t> vcols;
  if (sec.is_null("features")) {
    vcols = d.covariates_with(Role::policy);
    if (vcols.empty()) vcols = d.covariates_with(Role::heterogeneity);
    if (vcols.empty()) throw ConfigError("policy.features: no covariate has the policy or heterogeneity role");
  } else {
    vcols = covariate_indices(d, sec.names("features"), sec.where("features"));
    if (vcols.empty()) throw ConfigError("policy.features: empty");
  }
  const auto vnames = names_of(d, vcols);
  const auto vkinds = kinds_of(d, vcols);

  // Scores: estimated potential outcomes, rows without a complete leaf dropped.
  auto scored = [&](std::vector<std::size_t> rows, const char* which) {
    EffectEngine engine(forest, d.x.select_rows(rows));
    const Matrix mu = engine.potential_outcomes(outcome);
    std::vector<std::size_t> kept;
    Matrix m;
    for (std::size_t j = 0; j < rows.size(); ++j) {
      if (std::isnan(mu(j, 0))) continue;
      kept.push_back(rows[j]);
      m.append_row(mu.row(j));
    }
    if (kept.size() < rows.size())
      st.warn(std::string(which) + ": " + std::to_string(rows.size() - kept.size()) +
              " rows without estimated potential outcomes were skipped");
    if (kept.empty()) throw EstimationError(std::string("policy: no ") + which + " row has estimated potential outcomes");
    return std::pair{kept, m};
  };
  std::vector<std::size_t> learn_rows = parts.train;
  learn_rows.insert(learn_rows.end(), parts.estimation.begin(), parts.estimation.end());
  std::sort(learn_rows.begin(), learn_rows.end());
  auto [learn, mu_learn] = scored(learn_rows, "training");
  std::vector<std::size_t> eval_rows = parts.validation;
  if (eval_rows.empty()) {
    st.warn("no validation rows; allocations are evaluated in-sample");
    eval_rows = learn_rows;
  }
  auto [eval, mu_eval] = scored(eval_rows, "validation");

  std::vector<double> costs;
  if (!sec.is_null("costs")) {
    const auto& v = sec.at("costs");
    if (!v.is_array() || v.size() != k) throw ConfigError(sec.where("costs") + ": expected one number per treatment");
    for (const auto& c : v) {
      if (!c.is_number()) throw ConfigError(sec.where("costs") + ": expected numbers");
      costs.push_back(c.get<double>());
    }
  }
  const PolicyScores learn_scores{mu_learn, costs};
  const PolicyScores eval_scores{mu_eval, costs};
  const Matrix net_eval = eval_scores.net();

  std::vector<double> observed(k, 0.0);
  for (auto r : parts.all) observed[static_cast<std::size_t>(d.treatment[r])] += 1.0;
  for (auto& s : observed) s /= static_cast<double>(parts.all.size());

  const bool constrain = sec.flag("constrain");
  Constraints caps = Constraints::none(k);
  if (constrain) {
    if (sec.is_null("max_shares")) {
      for (std::size_t a = 0; a < k; ++a)
        if (static_cast<int>(a) != control) caps.max_share[a] = observed[a];
    } else {
      const auto& v = sec.at("max_shares");
      if (!v.is_array() || v.size() != k)
        throw ConfigError(sec.where("max_shares") + ": expected one entry (number or null) per treatment");
      for (std::size_t a = 0; a < k; ++a) {
        if (v[a].is_null()) continue;
        if (!v[a].is_number()) throw ConfigError(sec.where("max_shares") + ": expected numbers or null");
        caps.max_share[a] = v[a].get<double>();
      }
    }
    try {
      caps.validate(k);
    } catch (const ConfigError& e) {
      throw ConfigError(sec.where("max_shares") + ": " + e.what());
    }
  }

  PolicyTreeOptions opt;
  opt.approximate = sec.flag("approximate");
  opt.max_eval_points = sec.count("max_eval_points");
  opt.bisection_steps = sec.count("bisection_steps");
  opt.method = constraint_method(sec);

  const Matrix v_learn = d.x.select_rows(learn).select_cols(vcols);
  const Matrix v_eval = d.x.select_rows(eval).select_cols(vcols);

  std::vector<AllocationRow> rows;
  std::vector<std::pair<std::string, std::vector<int>>> assignments;
  auto record = [&](const std::string& name, std::vector<int> a) {
    rows.push_back({name, evaluate_policy(a, net_eval)});
    assignments.emplace_back(name, std::move(a));
  };
  std::vector<int> obs;
  for (auto r : eval) obs.push_back(d.treatment[r]);
  record("observed", obs);
  record("random", random_allocation(observed, eval.size(), derive_seed(run.seed, kPolicyStream)));
  record("best_score", best_score_allocation(net_eval));
  if (constrain) record("best_score_constrained", best_score_allocation(net_eval, caps));

  auto emit_tree = [&](const std::string& file, const PolicyTree& tree) {
    st.add(file + ".txt", to_text(tree, arms));
    st.add(file + ".json", io::dump(io::policy_tree_to_json(tree, arms)));
  };
  const auto depth = tree_depth(sec, "depth");
  if (depth > 0) {
    opt.depth = depth;
    const auto tree = fit_policy_tree(learn_scores, v_learn, vkinds, Constraints::none(k), opt, vnames);
    emit_tree("policy_tree", tree);
    record("tree_depth" + std::to_string(depth), tree.predict(v_eval));
  }
  const auto cdepth = tree_depth(sec, "constrained_depth");
  if (constrain && cdepth > 0) {
    opt.depth = cdepth;
    const auto tree = fit_policy_tree(learn_scores, v_learn, vkinds, caps, opt, vnames);
    emit_tree("policy_tree_constrained", tree);
    record("tree_depth" + std::to_string(cdepth) + "_constrained", tree.predict(v_eval));
  }
  if (const auto seq = sequential_depths(sec)) {
    const auto [a, b] = *seq;
    const auto tree = fit_sequential_tree(learn_scores, v_learn, vkinds, a, b, constrain ? caps : Constraints::none(k),
                                          opt, vnames);
    emit_tree("policy_tree_sequential", tree);
    record("sequential_" + std::to_string(a) + "+" + std::to_string(b) + (constrain ? "_constrained" : ""),
           tree.predict(v_eval));
  }

  st.add("allocation.csv", allocation_csv(rows, arms));
  if (const auto truth = oracle_outcomes(run, st, d, eval, outcome)) {
    std::vector<AllocationRow> oracle_rows;
    for (const auto& [name, a] : assignments) oracle_rows.push_back({name, evaluate_policy(a, *truth)});
    st.add("allocation_oracle.csv", allocation_csv(oracle_rows, arms));
  }
  std::ostringstream s;
  csv::Writer w(s);
  std::vector<std::string> header{"id"};
  for (const auto& [name, a] : assignments) header.push_back(name);
  w.header(header);
  for (std::size_t j = 0; j < eval.size(); ++j) {
    std::vector<std::string> row{row_id(d, eval[j])};
    for (const auto& [name, a] : assignments) row.push_back(arms[static_cast<std::size_t>(a[j])]);
    w.row(row);
  }
  st.add("policy_assignment.csv", s.str());
  st.log() << "policy: " << learn.size() << " training rows, " << eval.size() << " evaluation rows\n";
  for (const auto& r : rows) st.log() << "  " << r.policy << " value " << format_double(r.value.mean) << "\n";
  st.commit();
}

void stage_cluster(const Run& run) {
  Stage st(run, "cluster");
  const auto d = load_data(run, st);
  const auto path = require(run, "cluster", "iate.csv", "effects");
  st.input(path);
  const auto sec = run.section("cluster");
  const auto t = csv::read_file(path);
  const auto id = t.column("id");
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < d.size(); ++i) index.emplace(row_id(d, i), i);
  std::vector<std::string> names;
  std::vector<std::size_t> cols;
  for (std::size_t c = 0; c < t.header.size(); ++c)
    if (c != id) {
      const auto& h = t.header[c];
      names.push_back(h.rfind("iate_", 0) == 0 ? h.substr(5) : h);
      cols.push_back(c);
    }
  if (cols.empty()) throw DataError("iate.csv: no IATE columns");
  Matrix x;
  std::vector<std::size_t> rows;
  std::size_t skipped = 0;
  for (const auto& r : t.rows) {
    const auto it = index.find(r.at(id));
    if (it == index.end()) throw DataError("iate.csv: unknown id '" + r.at(id) + "'");
    std::vector<double> v;
    bool ok = true;
    for (auto c : cols) {
      if (r.at(c) == "NA") ok = false;
      else v.push_back(std::stod(r.at(c)));
    }
    if (!ok) {
      ++skipped;
      continue;
    }
    x.append_row(v);
    rows.push_back(it->second);
  }
  if (skipped) st.warn(std::to_string(skipped) + " rows with undefined IATEs were not clustered");
  if (rows.size() < 2) throw EstimationError("cluster: fewer than two rows with defined IATEs");

  const auto opt = kmeans_options(sec, derive_seed(run.seed, kClusterStream));
  const auto model = kmeanspp_fit(x, opt);
  const auto profile = profile_clusters(model, x, d.x.select_rows(rows), names, d.covariate_names(), 0);

  std::vector<std::size_t> rank(model.k);
  for (std::size_t r = 0; r < profile.order.size(); ++r) rank[profile.order[r]] = r + 1;
  std::ostringstream s;
  csv::Writer w(s);
  w.header({"id", "cluster"});
  for (std::size_t j = 0; j < rows.size(); ++j)
    w.row({row_id(d, rows[j]), std::to_string(rank[static_cast<std::size_t>(model.assignment[j])])});
  st.add("clusters.csv", s.str());
  st.add("cluster_profile.csv", profile_csv(profile));
  std::ostringstream sel;
  csv::Writer sw(sel);
  sw.header({"k", "silhouette", "selected"});
  for (const auto& [kk, sil] : model.candidates)
    sw.row({std::to_string(kk), format_double(sil), kk == model.k ? "1" : "0"});
  st.add("cluster_selection.csv", sel.str());
  st.warn_all(model.warnings);
  st.log() << "cluster: k=" << model.k << ", mean silhouette " << format_double(model.silhouette) << "\n";
  st.commit();
}

void stage_simulate(const Run& run) {
  const auto sec = run.section("simulate");
  const auto preset = simulate_preset(sec);
  auto spec = DgpSpec::paper_shaped();
  spec.n = sec.count("n");
  spec.noise_sd = sec.real("noise_sd");
  spec.selection_on_gain = sec.real("selection_on_gain");
  spec.seed = derive_seed(run.seed, kSimulateStream);
  const auto stages = simulate_stages(sec);
  const auto g = preset == "placebo" ? generate_placebo(spec) : generate(spec);

  Stage st(run, "simulate");
  st.add("data.csv", to_csv(g.data));
  st.add("schema.json", io::dump(io::schema_to_json(g.data.schema)));
  st.add("truth.csv", g.truth.to_csv(g.data.ids));
  std::ostringstream m;
  csv::Writer mw(m);
  mw.header({"month", "outcome", "multiplier"});
  const auto outcomes = g.data.outcome_names();
  for (std::size_t t = 0; t < g.truth.month_multiplier.size(); ++t)
    mw.row({std::to_string(t + 1), outcomes[t], format_double(g.truth.month_multiplier[t])});
  st.add("truth_months.csv", m.str());
  st.log() << "simulate: " << spec.n << " rows, " << spec.n_treatments << " treatments, preset " << preset << "\n";
  st.commit();

  Run inner = run;
  inner.cfg["data"] = nullptr;
  inner.cfg["schema"] = nullptr;
  for (const auto& s : stages) run_subcommand(s, inner.cfg, *run.log);
}

bool stage_verify(const Run& run) {
  Stage st(run, "verify");
  const auto results = verify::run_quick(derive_seed(run.seed, kVerifyStream));
  std::ostringstream s;
  csv::Writer w(s);
  w.header({"check", "passed", "detail"});
  bool ok = true;
  for (const auto& r : results) {
    st.log() << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
    w.row({r.name, r.passed ? "1" : "0", r.detail});
    ok = ok && r.passed;
  }
  st.add("verify.csv", s.str());
  st.commit();
  return ok;
}

// Data-independent value checks, so a bad setting fails before any stage runs.
void check_values(const Run& run) {
  auto width = [](const Section& sec) { return std::max<std::size_t>(sec.count("mtry"), 1); };
  const auto support = run.section("support");
  support_rule(support);
  base_forest_params(support, 0, width(support));
  const auto pseudo = run.section("pseudo");
  PseudoStartConfig pc;
  pc.train_share = pseudo.real("train_share");
  pc.horizon = static_cast<int>(pseudo.count("horizon"));
  pc.forest = base_forest_params(pseudo, 0, width(pseudo));
  pc.validate();
  const auto split = run.section("split");
  const double fr[3] = {split.real("train"), split.real("estimation"), split.real("validation")};
  if (fr[0] <= 0 || fr[1] <= 0 || fr[2] < 0 || std::fabs(fr[0] + fr[1] + fr[2] - 1.0) > 1e-9)
    throw ConfigError("split: fractions must be positive and sum to 1");
  forest_params(run, width(run.section("forest")), 0);
  const auto effects = run.section("effects");
  const double tol = effects.real("undefined_tolerance");
  if (!(tol >= 0.0 && tol <= 1.0)) throw ConfigError(effects.where("undefined_tolerance") + ": must lie in [0, 1]");
  const auto policy = run.section("policy");
  constraint_method(policy);
  tree_depth(policy, "depth");
  tree_depth(policy, "constrained_depth");
  sequential_depths(policy);
  kmeans_options(run.section("cluster"), 0);
  const auto sim = run.section("simulate");
  simulate_preset(sim);
  simulate_stages(sim);
  if (sim.count("n") < 1) throw ConfigError(sim.where("n") + ": must be >= 1");
}

Run make_run(const json& cfg, std::ostream& log) {
  Run run;
  run.cfg = cfg;
  run.log = &log;
  const auto top = run.top();
  run.out = fs::path(top.text("out"));
  const auto& seed = top.at("seed");
  if (!seed.is_number_integer() || seed.get<long long>() < 0) throw ConfigError("seed: expected a nonnegative integer");
  run.seed = seed.get<std::uint64_t>();
  std::error_code ec;
  fs::create_directories(run.out, ec);
  if (ec || !fs::is_directory(run.out)) throw ConfigError("out: cannot create directory " + run.out.string());
  const auto probe = run.out / ".mcf_write_probe";
  {
    std::ofstream f(probe);
    if (!f) throw ConfigError("out: directory " + run.out.string() + " is not writable");
  }
  fs::remove(probe, ec);
  return run;
}

}  // namespace

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"describe", "support", "pseudo", "fit", "effects", "policy", "cluster"};
  return names;
}

const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names{"describe", "support", "pseudo", "fit", "effects",
                                              "policy",   "cluster", "simulate", "verify"};
  return names;
}

json default_config() {
  return json::parse(R"({
  "seed": 1,
  "out": "mcf_out",
  "data": null,
  "schema": null,
  "control": 0,
  "outcome": null,
  "describe": {},
  "support": {"rule": "min_max", "q_low": 0.001, "q_high": 0.999, "key_covariates": null,
              "n_trees": 500, "min_leaf": 5, "mtry": 0},
  "pseudo": {"train_share": 0.2, "horizon": 6, "start_column": "start_month", "duration_column": "duration",
             "n_trees": 300, "min_leaf": 5, "mtry": 0},
  "split": {"train": 0.4, "estimation": 0.4, "validation": 0.2},
  "forest": {"n_trees": 1000, "mtry": 0, "min_leaf": 12, "penalty_weight": null, "nn_count": 1,
             "subsample_fraction": 0.5, "estimation_fraction": 1.0, "max_depth": 0,
             "local_centering": true, "centering_trees": 200},
  "effects": {"contrasts": null, "gate": null, "bgate_w": null, "deltas": true, "undefined_tolerance": 0.05,
              "curve": true, "max_discrete": 10},
  "policy": {"features": null, "depth": 2, "constrained_depth": 3, "sequential": [2, 1], "constrain": true,
             "max_shares": null, "costs": null, "approximate": true, "max_eval_points": 32, "method": "auto",
             "bisection_steps": 20},
  "cluster": {"k_values": [2, 3, 4, 5, 6, 7, 8], "min_share": 0.01, "n_init": 10, "tol": 1e-6, "max_iter": 300,
              "merge_small": false},
  "simulate": {"preset": "paper_shaped", "n": 2000, "noise_sd": 1.0, "selection_on_gain": 0.0,
               "stages": ["describe", "support", "pseudo", "fit", "effects", "policy", "cluster"]}
})");
}

void apply_set(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set " + assignment + ": expected key=value");
  const auto key = assignment.substr(0, eq);
  const auto text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  const auto defaults = default_config();
  const json* def = &defaults;
  json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    const auto path = key.substr(0, dot == std::string::npos ? key.size() : dot);
    if (part.empty() || !def->is_object() || !def->contains(part)) throw ConfigError(path + ": unknown key");
    def = &(*def)[part];
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part) || !(*node)[part].is_object()) (*node)[part] = json::object();
    node = &(*node)[part];
    start = dot + 1;
  }
}

json load_config(const fs::path& path, const Overrides& overrides) {
  json cfg = default_config();
  json user = json::object();
  if (!path.empty()) {
    if (!fs::exists(path)) throw ConfigError("--config: " + path.string() + " does not exist");
    std::ifstream in(path);
    try {
      user = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("--config: invalid JSON in " + path.string() + ": " + e.what());
    }
    check_against(cfg, user, "");
    // Data paths are relative to the config file.
    for (const char* key : {"data", "schema"})
      if (user.contains(key) && user[key].is_string()) {
        const fs::path p(user[key].get<std::string>());
        if (p.is_relative()) user[key] = (path.parent_path() / p).lexically_normal().string();
      }
  }
  for (const auto& s : overrides.sets) apply_set(user, s);
  check_against(cfg, user, "");
  cfg.merge_patch(user);
  // merge_patch drops keys set to null; restore them from the defaults.
  std::function<void(json&, const json&)> restore = [&](json& c, const json& d) {
    for (auto it = d.begin(); it != d.end(); ++it) {
      if (!c.contains(it.key())) c[it.key()] = it.value();
      else if (it.value().is_object() && c[it.key()].is_object()) restore(c[it.key()], it.value());
    }
  };
  restore(cfg, default_config());
  if (overrides.seed) cfg["seed"] = *overrides.seed;
  if (overrides.out) cfg["out"] = overrides.out->string();
  return cfg;
}

bool run_subcommand(const std::string& name, const json& config, std::ostream& log) {
  const Run run = make_run(config, log);
  check_values(run);
  if (name == "describe") stage_describe(run);
  else if (name == "support") stage_support(run);
  else if (name == "pseudo") stage_pseudo(run);
  else if (name == "fit") stage_fit(run);
  else if (name == "effects") stage_effects(run);
  else if (name == "policy") stage_policy(run);
  else if (name == "cluster") stage_cluster(run);
  else if (name == "simulate") stage_simulate(run);
  else if (name == "verify") return stage_verify(run);
  else throw ConfigError("unknown subcommand '" + name + "'");
  return true;
}

int run(const std::string& name, const fs::path& config, const Overrides& overrides, std::ostream& log,
        std::ostream& err) {
  try {
    const auto cfg = load_config(config, overrides);
    return run_subcommand(name, cfg, log) ? 0 : 1;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return 3;
  } catch (const EstimationError& e) {
    err << "estimation error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace mcf::pipeline
