#pragma once

// File formats: the flat key=value run configuration, quantile tables and
// samples as CSV, JSON records for every result type, and plot-ready CSV
// tables. Numbers are written in shortest round-trip form so equal results
// give byte-identical files.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ftree/distance.hpp"
#include "ftree/distributions.hpp"
#include "ftree/dp.hpp"
#include "ftree/errors.hpp"
#include "ftree/flood.hpp"
#include "ftree/quantize.hpp"
#include "ftree/robust.hpp"
#include "ftree/tree.hpp"

namespace ftree::io {

using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Text helpers

/// Shortest decimal string that reads back to the same double.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline double parse_double(std::string_view text, std::string_view what) {
  const std::string t = trim(text);
  double v = 0.0;
  const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size()) {
    throw InputError(std::string(what) + ": '" + t + "' is not a number");
  }
  return v;
}

template <class Int>
Int parse_integer(std::string_view text, std::string_view what) {
  const std::string t = trim(text);
  Int v = 0;
  const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size()) {
    throw InputError(std::string(what) + ": '" + t + "' is not an integer");
  }
  return v;
}

/// Comma- or whitespace-separated list of numbers.
inline std::vector<double> parse_number_list(std::string_view text, std::string_view what) {
  std::string s(text);
  std::replace(s.begin(), s.end(), ',', ' ');
  std::istringstream is(s);
  std::vector<double> out;
  for (std::string tok; is >> tok;) out.push_back(parse_double(tok, what));
  if (out.empty()) throw InputError(std::string(what) + ": empty list");
  return out;
}

inline std::vector<int> parse_int_list(std::string_view text, std::string_view what) {
  std::string s(text);
  std::replace(s.begin(), s.end(), ',', ' ');
  std::istringstream is(s);
  std::vector<int> out;
  for (std::string tok; is >> tok;) out.push_back(parse_integer<int>(tok, what));
  if (out.empty()) throw InputError(std::string(what) + ": empty list");
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out << content;
  if (!out) throw InputError("failed writing '" + path.string() + "'");
}

inline std::string dump(const Json& j) { return j.dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Run configuration

/// Everything a CLI run reads from its config file. The flood keys follow
/// FloodModelConfig; lambda, u, epsilon and sample_size describe the base
/// loss law and the synthetic base sample that seeds tree construction.
struct RunConfig {
  FloodModelConfig flood;
  FrechetParams base{0.4, 1.0, 0.0};
  int sample_size = 100;

  /// The exposure actually used: the configured one, or the 0.9999 quantile
  /// of the base law when the key is 0 or absent.
  [[nodiscard]] double resolved_exposure() const {
    return flood.exposure > 0.0 ? flood.exposure : quantile(base, 0.9999);
  }

  void validate() const {
    flood.validate();
    require_valid(base);
    if (sample_size < 3) throw InputError("config: sample_size must be at least 3");
  }
};

inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "alpha", "beta", "delta", "rho", "gamma", "load", "s0", "stages", "pnl", "exposure",
      "seed", "trajectories", "branchiness", "lambda", "u", "epsilon", "sample_size"};
  return keys;
}

/// Grammar: one `key = value` per line; `#` starts a comment; blank lines
/// are ignored; keys may appear once. `branchiness` takes a comma- or
/// space-separated list. When only one of `stages` and `branchiness` is
/// given the other follows from it (missing branchiness repeats 3). Keys
/// are applied on top of `base`, which is how command-line overrides work.
inline RunConfig parse_config(std::string_view text, RunConfig base = {}) {
  RunConfig c = std::move(base);
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = "config line " + std::to_string(line_no);
    if (eq == std::string::npos) throw InputError(where + ": expected key = value");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    if (std::find(config_keys().begin(), config_keys().end(), key) == config_keys().end()) {
      throw InputError(where + ": unknown key '" + key + "'");
    }
    if (!seen.insert(key).second) throw InputError(where + ": duplicate key '" + key + "'");
    const std::string what = where + " (" + key + ")";
    auto& f = c.flood;
    if (key == "alpha") f.alpha = parse_double(value, what);
    else if (key == "beta") f.beta = parse_double(value, what);
    else if (key == "delta") f.delta = parse_double(value, what);
    else if (key == "rho") f.rho = parse_double(value, what);
    else if (key == "gamma") f.gamma = parse_double(value, what);
    else if (key == "load") f.load = parse_double(value, what);
    else if (key == "s0") f.s0 = parse_double(value, what);
    else if (key == "stages") f.stages = parse_integer<int>(value, what);
    else if (key == "pnl") f.pnl = parse_double(value, what);
    else if (key == "exposure") f.exposure = parse_double(value, what);
    else if (key == "seed") f.seed = parse_integer<std::uint64_t>(value, what);
    else if (key == "trajectories") f.trajectories = parse_integer<int>(value, what);
    else if (key == "branchiness") f.branchiness = parse_int_list(value, what);
    else if (key == "lambda") c.base.lambda = parse_double(value, what);
    else if (key == "u") c.base.u = parse_double(value, what);
    else if (key == "epsilon") c.base.epsilon = parse_double(value, what);
    else if (key == "sample_size") c.sample_size = parse_integer<int>(value, what);
  }
  const bool has_stages = seen.count("stages") > 0;
  const bool has_branch = seen.count("branchiness") > 0;
  if (has_branch && !has_stages) c.flood.stages = static_cast<int>(c.flood.branchiness.size());
  if (has_stages && !has_branch && c.flood.stages >= 1) {
    c.flood.branchiness.assign(static_cast<std::size_t>(c.flood.stages), 3);
  }
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) { return parse_config(read_file(path)); }

inline Json to_json(const RunConfig& c) {
  const auto& f = c.flood;
  Json j;
  j["alpha"] = f.alpha;
  j["beta"] = f.beta;
  j["delta"] = f.delta;
  j["rho"] = f.rho;
  j["gamma"] = f.gamma;
  j["load"] = f.load;
  j["s0"] = f.s0;
  j["stages"] = f.stages;
  j["pnl"] = f.pnl;
  j["exposure"] = f.exposure;
  j["seed"] = f.seed;
  j["trajectories"] = f.trajectories;
  j["branchiness"] = f.branchiness;
  j["lambda"] = c.base.lambda;
  j["u"] = c.base.u;
  j["epsilon"] = c.base.epsilon;
  j["sample_size"] = c.sample_size;
  return j;
}

// ---------------------------------------------------------------------------
// CSV input

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
  std::map<std::string, std::string> meta;  // from `# key: value` lines
};

/// Header row plus numeric rows. Lines starting with `#` are comments; a
/// comment of the form `# key: value` is kept as metadata.
inline CsvTable parse_csv(std::string_view text, std::string_view name) {
  CsvTable t;
  std::istringstream in{std::string(text)};
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    const std::string body = trim(line);
    if (body.empty()) continue;
    if (body[0] == '#') {
      const auto colon = body.find(':');
      if (colon != std::string::npos) {
        t.meta[trim(std::string_view(body).substr(1, colon - 1))] = trim(std::string_view(body).substr(colon + 1));
      }
      continue;
    }
    const auto cells = split(body, ',');
    if (t.header.empty()) {
      t.header = cells;
      continue;
    }
    const std::string where = std::string(name) + " line " + std::to_string(line_no);
    if (cells.size() != t.header.size()) throw InputError(where + ": wrong number of columns");
    std::vector<double> row;
    for (const auto& c : cells) row.push_back(parse_double(c, where));
    t.rows.push_back(std::move(row));
  }
  if (t.header.empty()) throw InputError(std::string(name) + ": missing header row");
  return t;
}

inline void require_header(const CsvTable& t, const std::vector<std::string>& expected,
                           std::string_view name) {
  if (t.header != expected) {
    std::string want;
    for (const auto& h : expected) want += (want.empty() ? "" : ",") + h;
    throw InputError(std::string(name) + ": header must be '" + want + "'");
  }
}

/// Quantile table with header `probability,loss`. The probability of no loss
/// comes from a `# pnl: value` comment when present, else `fallback_pnl`.
inline QuantileTable parse_quantile_table(std::string_view text, std::string_view name,
                                          double fallback_pnl = 0.0) {
  const auto csv = parse_csv(text, name);
  require_header(csv, {"probability", "loss"}, name);
  QuantileTable t;
  for (const auto& r : csv.rows) t.rows.push_back({r[0], r[1]});
  t.pnl = fallback_pnl;
  if (const auto it = csv.meta.find("pnl"); it != csv.meta.end()) {
    t.pnl = parse_double(it->second, std::string(name) + " (pnl)");
  }
  t.validate();
  return t;
}

inline QuantileTable load_quantile_table(const std::filesystem::path& path, double fallback_pnl = 0.0) {
  return parse_quantile_table(read_file(path), path.string(), fallback_pnl);
}

/// Loss sample with header `value`.
inline std::vector<double> parse_sample(std::string_view text, std::string_view name) {
  const auto csv = parse_csv(text, name);
  require_header(csv, {"value"}, name);
  std::vector<double> out;
  for (const auto& r : csv.rows) out.push_back(r[0]);
  return out;
}

// ---------------------------------------------------------------------------
// CSV output

class CsvWriter {
 public:
  explicit CsvWriter(const std::vector<std::string>& header) { row_strings(header); }

  void row(std::initializer_list<double> values) { row(std::vector<double>(values)); }
  void row(const std::vector<double>& values) {
    std::vector<std::string> cells;
    for (double v : values) cells.push_back(format_number(v));
    row_strings(cells);
  }
  void row_strings(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) os_ << (i ? "," : "") << cells[i];
    os_ << '\n';
  }
  [[nodiscard]] std::string str() const { return os_.str(); }

 private:
  std::ostringstream os_;
};

/// One row per (decision stage, node, trajectory point).
inline std::string policy_csv(const PolicySolution& sol) {
  CsvWriter w({"stage", "node", "k", "state", "x", "c", "z", "value"});
  for (const auto& np : sol.nodes) {
    for (std::size_t k = 0; k < np.points.size(); ++k) {
      const auto& p = np.points[k];
      std::vector<double> row{static_cast<double>(np.stage), static_cast<double>(np.node),
                              static_cast<double>(k), p.state(0)};
      for (int i = 0; i < 3; ++i) row.push_back(i < p.decision.size() ? p.decision(i) : 0.0);
      row.push_back(p.value);
      w.row(row);
    }
  }
  return w.str();
}

inline std::string capital_csv(const std::vector<CapitalRow>& rows) {
  CsvWriter w({"capital", "probability", "cumulative"});
  for (const auto& r : rows) w.row({r.capital, r.probability, r.cumulative});
  return w.str();
}

inline std::string theta_csv(const std::vector<ThetaRow>& rows) {
  CsvWriter w({"theta", "value", "x0", "c0", "z0"});
  for (const auto& r : rows) w.row({r.theta, r.value, r.decision(0), r.decision(1), r.decision(2)});
  return w.str();
}

/// Columns: load, value, then mean z and mean x for every decision stage.
inline std::string load_csv(const std::vector<LoadRow>& rows) {
  std::vector<std::string> header{"load", "value"};
  const std::size_t T = rows.empty() ? 0 : rows.front().mean_z.size();
  for (std::size_t t = 0; t < T; ++t) header.push_back("z" + std::to_string(t));
  for (std::size_t t = 0; t < T; ++t) header.push_back("x" + std::to_string(t));
  CsvWriter w(header);
  for (const auto& r : rows) {
    std::vector<double> row{r.load, r.value};
    row.insert(row.end(), r.mean_z.begin(), r.mean_z.end());
    row.insert(row.end(), r.mean_x.begin(), r.mean_x.end());
    w.row(row);
  }
  return w.str();
}

inline std::string convergence_csv(const ConvergenceProbe& probe) {
  CsvWriter w({"n", "distortion"});
  for (std::size_t i = 0; i < probe.n_values.size(); ++i) {
    w.row({static_cast<double>(probe.n_values[i]), probe.distortions[i]});
  }
  return w.str();
}

inline std::string fit_residual_csv(const TableFit& fit) {
  CsvWriter w({"probability", "loss", "fitted", "relative_error"});
  for (std::size_t i = 0; i < fit.used_rows.size(); ++i) {
    w.row({fit.used_rows[i].probability, fit.used_rows[i].loss, fit.fitted[i], fit.relative_errors[i]});
  }
  return w.str();
}

// ---------------------------------------------------------------------------
// JSON

inline Json to_json(const FrechetParams& p) {
  return Json{{"lambda", p.lambda}, {"u", p.u}, {"epsilon", p.epsilon}};
}

inline FrechetParams frechet_from_json(const Json& j) {
  try {
    FrechetParams p{j.at("lambda").get<double>(), j.at("u").get<double>(), j.at("epsilon").get<double>()};
    require_valid(p);
    return p;
  } catch (const Json::exception& e) {
    throw InputError(std::string("parameter record: ") + e.what());
  }
}

inline Json to_json(const GumbelEstimate& e) {
  Json j = to_json(e.params);
  j["residual"] = e.residual;
  j["brackets"] = e.brackets;
  j["ambiguous"] = e.ambiguous();
  return j;
}

inline Json to_json(const TableFit& f) {
  Json j;
  j["family"] = std::string(to_string(f.family));
  j["location"] = f.location;
  j["scale"] = f.scale;
  j["shape"] = f.shape;
  if (f.family == Family::Frechet) j["params"] = to_json(f.frechet());
  j["residual_norm"] = f.residual_norm;
  Json rows = Json::array();
  for (std::size_t i = 0; i < f.used_rows.size(); ++i) {
    rows.push_back({{"probability", f.used_rows[i].probability},
                    {"loss", f.used_rows[i].loss},
                    {"fitted", f.fitted[i]},
                    {"relative_error", f.relative_errors[i]}});
  }
  j["rows"] = rows;
  return j;
}

inline Json to_json(const Quantization& q) {
  Json j;
  j["points"] = q.points;
  j["probabilities"] = q.probabilities;
  j["breakpoints"] = q.breakpoints;
  j["distortion"] = q.distortion;
  j["iterations"] = q.iterations;
  j["converged"] = q.converged;
  return j;
}

inline Json to_json(const ScenarioTree& t) {
  Json j;
  j["stages"] = t.stages;
  j["root_median"] = t.root_median;
  if (t.root_params) j["root_params"] = to_json(*t.root_params);
  Json nodes = Json::array();
  for (const auto& n : t.nodes) {
    Json r;
    r["id"] = n.id;
    r["stage"] = n.stage;
    r["parent"] = n.parent < 0 ? Json(nullptr) : Json(n.parent);
    r["value"] = n.value;
    r["prob"] = n.prob;
    r["group"] = std::string(to_string(n.group));
    r["median"] = n.median;
    if (n.params) r["params"] = to_json(*n.params);
    nodes.push_back(std::move(r));
  }
  j["nodes"] = std::move(nodes);
  return j;
}

/// Reads the tree schema; node ids must equal their positions.
inline ScenarioTree tree_from_json(const Json& j) {
  try {
    ScenarioTree t;
    t.stages = j.at("stages").get<int>();
    if (t.stages < 1) throw InputError("tree: stages must be at least 1");
    t.root_median = j.value("root_median", 1.0);
    if (j.contains("root_params")) t.root_params = frechet_from_json(j.at("root_params"));
    for (const auto& r : j.at("nodes")) {
      TreeNode n;
      n.id = r.at("id").get<int>();
      n.stage = r.at("stage").get<int>();
      n.parent = r.at("parent").is_null() ? -1 : r.at("parent").get<int>();
      n.value = r.at("value").get<double>();
      n.prob = r.at("prob").get<double>();
      const auto g = r.value("group", std::string("G1"));
      if (g != "G1" && g != "G2") throw InputError("tree: group must be G1 or G2");
      n.group = g == "G1" ? Group::G1 : Group::G2;
      n.median = r.value("median", 1.0);
      if (r.contains("params")) n.params = frechet_from_json(r.at("params"));
      t.nodes.push_back(std::move(n));
    }
    if (t.nodes.empty()) throw InputError("tree: no nodes");
    t.link();
    return t;
  } catch (const Json::exception& e) {
    throw InputError(std::string("tree: ") + e.what());
  }
}

inline Json parse_json(std::string_view text, std::string_view name) {
  try {
    return Json::parse(text);
  } catch (const Json::exception& e) {
    throw InputError(std::string(name) + ": " + e.what());
  }
}

inline ScenarioTree load_tree(const std::filesystem::path& path) {
  return tree_from_json(parse_json(read_file(path), path.string()));
}

inline Json to_json(const ValidationReport& r) {
  Json v = Json::array();
  for (const auto& x : r.violations) v.push_back({{"kind", x.kind}, {"node", x.node}, {"message", x.message}});
  return v;
}

inline Json to_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Json to_json(const Eigen::MatrixXd& m) {
  Json rows = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index k = 0; k < m.cols(); ++k) row[static_cast<std::size_t>(k)] = m(i, k);
    rows.push_back(row);
  }
  return rows;
}

inline Json to_json(const ValueFunction& v) {
  Json j;
  j["form"] = std::string(to_string(v.form));
  j["orientation"] = std::string(to_string(v.orientation));
  if (v.form == ValueForm::Quadratic) j["A"] = to_json(v.A);
  j["b"] = to_json(v.b);
  j["c"] = v.c;
  return j;
}

/// Policy with per-stage arrays of nodes; fitted value functions included.
inline Json to_json(const PolicySolution& s) {
  Json j;
  j["value"] = s.value();
  j["subproblems"] = s.subproblems;
  Json stages = Json::array();
  for (int d = 0; d < s.stages; ++d) {
    Json nodes = Json::array();
    for (const auto& np : s.nodes) {
      if (np.stage != d) continue;
      Json n;
      n["node"] = np.node;
      if (np.value_function) {
        n["value_function"] = to_json(*np.value_function);
        n["fit_objective"] = np.fit_objective;
      }
      Json pts = Json::array();
      for (const auto& p : np.points) {
        pts.push_back({{"state", to_json(p.state)},
                       {"decision", to_json(p.decision)},
                       {"value", p.value},
                       {"iterations", p.iterations},
                       {"converged", p.converged}});
      }
      n["points"] = std::move(pts);
      nodes.push_back(std::move(n));
    }
    stages.push_back({{"stage", d}, {"nodes", std::move(nodes)}});
  }
  j["stages"] = std::move(stages);
  j["warnings"] = s.warnings;
  return j;
}

inline Json to_json(const DualSolution& d) {
  Json j;
  j["mu1"] = d.mu1;
  j["mu2"] = d.mu2;
  j["y"] = d.y;
  j["q"] = d.q;
  j["value"] = d.value;
  j["dual_value"] = d.dual_value;
  j["divergence"] = d.divergence;
  j["iterations"] = d.iterations;
  j["nominal"] = d.nominal;
  return j;
}

// ---------------------------------------------------------------------------
// Run manifest

/// Written next to the outputs of every CLI command. It records the command
/// line, the resolved configuration, the seed and every artifact with its
/// size, so a rerun can be checked byte for byte. No clock readings are
/// included; they would make equal runs produce different manifests.
class Manifest {
 public:
  Manifest(std::string command, std::vector<std::string> args, Json config, std::uint64_t seed)
      : command_(std::move(command)), args_(std::move(args)), config_(std::move(config)), seed_(seed) {}

  void add(const std::filesystem::path& path, const std::string& content) {
    artifacts_.push_back({{"path", path.filename().string()}, {"bytes", content.size()}});
  }

  [[nodiscard]] Json json() const {
    Json j;
    j["command"] = command_;
    j["args"] = args_;
    j["config"] = config_;
    j["seed"] = seed_;
    j["artifacts"] = artifacts_;
    j["version"] = FTREE_VERSION_STRING;
    return j;
  }

 private:
  std::string command_;
  std::vector<std::string> args_;
  Json config_;
  std::uint64_t seed_;
  Json artifacts_ = Json::array();
#ifdef FTREE_VERSION
  static constexpr const char* FTREE_VERSION_STRING = FTREE_VERSION;
#else
  static constexpr const char* FTREE_VERSION_STRING = "unversioned";
#endif
};

}  // namespace ftree::io
