// ftree: command-line driver for fitting loss laws, quantizing them,
// building scenario trees, comparing trees and solving the flood budget
// model. Exit codes: 0 success, 2 input error, 3 validation failure,
// 4 solver failure.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ftree/distance.hpp"
#include "ftree/distributions.hpp"
#include "ftree/dp.hpp"
#include "ftree/flood.hpp"
#include "ftree/io.hpp"
#include "ftree/quantize.hpp"
#include "ftree/robust.hpp"
#include "ftree/tree.hpp"

namespace fs = std::filesystem;
using namespace ftree;
using io::Json;

namespace {

constexpr int kOk = 0;
constexpr int kInput = 2;
constexpr int kValidation = 3;
constexpr int kSolver = 4;

struct Globals {
  std::string config_path;
  std::vector<std::string> overrides;  // key=value, applied after the file
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  std::string out = ".";
  std::vector<std::string> argv;
};

class Run {
 public:
  Run(const Globals& g, std::string command) : g_(g), command_(std::move(command)) {
    if (!g.config_path.empty()) cfg_ = io::load_config(g.config_path);
    for (const auto& o : g.overrides) cfg_ = io::parse_config(o, cfg_);
    if (g.seed) cfg_.flood.seed = *g.seed;
  }

  [[nodiscard]] const io::RunConfig& config() const { return cfg_; }
  io::RunConfig& config() { return cfg_; }
  [[nodiscard]] unsigned threads() const { return g_.threads; }

  void write(const std::string& name, const std::string& content) {
    const fs::path path = fs::path(g_.out) / name;
    io::write_file(path, content);
    files_.emplace_back(path, content);
    std::cout << "wrote " << path.string() << "\n";
  }

  void finish() {
    io::Manifest m(command_, g_.argv, io::to_json(cfg_), cfg_.flood.seed);
    for (const auto& [path, content] : files_) m.add(path, content);
    const fs::path path = fs::path(g_.out) / (command_ + "_manifest.json");
    io::write_file(path, io::dump(m.json()));
  }

 private:
  const Globals& g_;
  std::string command_;
  io::RunConfig cfg_;
  std::vector<std::pair<fs::path, std::string>> files_;
};

Family parse_family(const std::string& name) {
  if (name == "frechet") return Family::Frechet;
  if (name == "weibull") return Family::Weibull;
  if (name == "gumbel") return Family::Gumbel;
  throw InputError("unknown family '" + name + "' (frechet, weibull or gumbel)");
}

ScenarioTree build_configured_tree(const io::RunConfig& cfg, unsigned threads) {
  cfg.validate();
  BuildSpec spec;
  spec.base_params = cfg.base;
  spec.base_sample = SampleState::from_values(
      sample(cfg.base, static_cast<std::size_t>(cfg.sample_size), cfg.flood.seed));
  spec.branchiness = cfg.flood.branchiness;
  spec.threshold = cfg.flood.pnl;
  spec.exposure = cfg.resolved_exposure();
  spec.threads = threads;
  LloydConfig lloyd;
  lloyd.threads = threads;
  lloyd.seed = cfg.flood.seed;
  return build_tree(spec, lloyd);
}

/// The tree given on the command line, or one built from the config. A
/// loaded tree fixes the stage count and branchiness of the model.
ScenarioTree tree_for_solve(io::RunConfig& cfg, const std::string& tree_path, unsigned threads) {
  if (tree_path.empty()) return build_configured_tree(cfg, threads);
  auto tree = io::load_tree(tree_path);
  cfg.flood.stages = tree.stages;
  cfg.flood.branchiness.clear();
  int id = -1;
  for (int t = 1; t <= tree.stages; ++t) {
    const auto& kids = tree.children_of(id);
    cfg.flood.branchiness.push_back(static_cast<int>(kids.size()));
    if (kids.empty()) throw InputError("tree: first path ends before the last stage");
    id = kids.front();
  }
  return tree;
}

FloodModelConfig resolved_flood(const io::RunConfig& cfg) {
  FloodModelConfig f = cfg.flood;
  f.exposure = cfg.resolved_exposure();
  return f;
}

DpOptions solve_options(unsigned threads) { return flood_options(threads); }

// ---------------------------------------------------------------------------
// Commands

void cmd_fit(Run& run, const std::string& table_path, const std::string& family) {
  const auto table = io::load_quantile_table(table_path, run.config().flood.pnl);
  const auto fit = fit_quantile_table(table, parse_family(family));
  Json j = io::to_json(fit);
  j["pnl"] = table.pnl;
  double worst = 0.0;
  for (double e : fit.relative_errors) worst = std::max(worst, e);
  j["max_relative_error"] = worst;
  run.write("fit.json", io::dump(j));
  run.write("fit_residuals.csv", io::fit_residual_csv(fit));
  std::cout << "family " << family << ": max relative error " << io::format_number(worst) << "\n";
}

void cmd_estimate(Run& run, const std::string& sample_path) {
  const auto& cfg = run.config();
  std::vector<double> values;
  if (sample_path.empty()) {
    require_valid(cfg.base);
    values = sample(cfg.base, static_cast<std::size_t>(cfg.sample_size), cfg.flood.seed);
  } else {
    values = io::parse_sample(io::read_file(sample_path), sample_path);
  }
  const auto state = SampleState::from_values(values);
  const auto est = gumbel_estimate_detailed(state);
  Json j = io::to_json(est);
  j["n"] = values.size();
  j["median"] = state.median();
  run.write("estimate.json", io::dump(j));
  std::cout << "lambda " << io::format_number(est.params.lambda) << ", u "
            << io::format_number(est.params.u) << ", epsilon " << io::format_number(est.params.epsilon)
            << "\n";
}

void cmd_quantize(Run& run, int n, const std::vector<int>& probe) {
  const auto& cfg = run.config();
  const auto dist = DistributionView::frechet(cfg.base);
  LloydConfig lloyd;
  lloyd.threads = run.threads();
  lloyd.seed = cfg.flood.seed;
  if (n < 1) throw InputError("quantize: --n must be at least 1");
  const auto q = lloyd_w1(dist, static_cast<std::size_t>(n), lloyd);
  Json j = io::to_json(q);
  j["params"] = io::to_json(cfg.base);
  run.write("quantization.json", io::dump(j));
  if (!probe.empty()) {
    std::vector<std::size_t> sizes;
    for (int v : probe) {
      if (v < 1) throw InputError("quantize: probe sizes must be positive");
      sizes.push_back(static_cast<std::size_t>(v));
    }
    const auto p = convergence_probe(dist, sizes, lloyd);
    run.write("convergence.csv", io::convergence_csv(p));
    run.write("convergence.json", io::dump(Json{{"slope", p.slope}}));
    std::cout << "log-log slope " << io::format_number(p.slope) << "\n";
  }
}

int cmd_tree(Run& run) {
  const auto tree = build_configured_tree(run.config(), run.threads());
  const auto report = validate(tree);
  Json j = io::to_json(tree);
  const auto mass = group1_mass_per_stage(tree);
  j["group1_mass"] = mass;
  j["violations"] = io::to_json(report);
  run.write("tree.json", io::dump(j));
  std::size_t g1 = 0;
  for (const auto& nd : tree.nodes) g1 += nd.group == Group::G1 ? 1 : 0;
  std::cout << "nodes " << tree.nodes.size() << ", Group-1 fraction "
            << io::format_number(static_cast<double>(g1) / static_cast<double>(tree.nodes.size()))
            << "\n";
  for (std::size_t t = 0; t < mass.size(); ++t) {
    std::cout << "stage " << t + 1 << " Group-1 mass " << io::format_number(mass[t]) << "\n";
  }
  if (!report.ok()) {
    for (const auto& v : report.violations) {
      std::cerr << "violation " << v.kind << " at node " << v.node << ": " << v.message << "\n";
    }
    throw ValidationError("tree failed validation with " + std::to_string(report.violations.size()) +
                          " violations");
  }
  return kOk;
}

void cmd_distance(Run& run, const std::string& a_path, const std::string& b_path) {
  const auto a = io::load_tree(a_path);
  const auto b = io::load_tree(b_path);
  const double nested = nested_distance(a, b, run.threads());
  const auto inputs = stagewise_inputs(a, b);
  const double bound = stagewise_upper_bound(inputs.per_stage, inputs.bounds);
  Json j;
  j["nested"] = nested;
  j["stagewise_bound"] = bound;
  j["per_stage_dKA"] = inputs.per_stage;
  j["L1"] = inputs.bounds.L1;
  j["Lt"] = inputs.bounds.Lt;
  j["bound_dominates"] = bound >= nested;
  run.write("distance.json", io::dump(j));
  std::cout << "nested " << io::format_number(nested) << ", bound " << io::format_number(bound) << "\n";
}

void write_theta_sweep(Run& run, const FloodInstance& inst, const TrajectorySet& traj,
                       const std::vector<double>& thetas) {
  const auto rows = theta_sweep(inst.model, inst.tree, traj, thetas, solve_options(run.threads()));
  run.write("sweep_theta.csv", io::theta_csv(rows));
}

void write_load_sweep(Run& run, const FloodModelConfig& flood, const ScenarioTree& tree,
                      const std::vector<double>& loads, double theta) {
  const auto rows = load_sweep(flood, tree, loads, theta, solve_options(run.threads()));
  run.write("sweep_load.csv", io::load_csv(rows));
}

void check_sweep_kind(const std::string& kind) {
  if (kind != "load" && kind != "theta") throw InputError("sweep kind must be 'load' or 'theta'");
}

void cmd_solve(Run& run, const std::string& tree_path, double theta, const std::string& sweep,
               const std::vector<double>& values) {
  auto& cfg = run.config();
  const auto tree = tree_for_solve(cfg, tree_path, run.threads());
  const auto flood = resolved_flood(cfg);
  const auto inst = build_model(flood, tree);
  for (const auto& w : inst.warnings) std::cerr << "warning: " << w << "\n";
  const auto traj = flood_trajectories(flood);
  auto opt = solve_options(run.threads());
  opt.aggregate = robust_aggregate(theta);
  const auto sol = backward_solve(inst.model, inst.tree, traj, opt);
  const auto& x = sol.root().points.front().decision;

  Json v;
  v["value"] = sol.value();
  v["theta"] = theta;
  v["root_decision"] = {{"x", x(0)}, {"c", x(1)}, {"z", x(2)}};
  v["subproblems"] = sol.subproblems;
  v["exposure"] = flood.exposure;
  v["clamped_nodes"] = inst.clamped;
  v["warnings"] = sol.warnings;
  run.write("value.json", io::dump(v));
  run.write("policy.json", io::dump(io::to_json(sol)));
  run.write("policy.csv", io::policy_csv(sol));
  run.write("capital.csv", io::capital_csv(capital_distribution(inst, sol, flood, opt)));
  std::cout << "value " << io::format_number(sol.value()) << "\n";

  if (!sweep.empty()) {
    check_sweep_kind(sweep);
    if (values.empty()) throw InputError("--sweep needs --values");
    if (sweep == "theta") write_theta_sweep(run, inst, traj, values);
    else write_load_sweep(run, flood, tree, values, theta);
  }
}

void cmd_sweep(Run& run, const std::string& kind, const std::string& tree_path,
               const std::vector<double>& values, double theta) {
  check_sweep_kind(kind);
  auto& cfg = run.config();
  const auto tree = tree_for_solve(cfg, tree_path, run.threads());
  const auto flood = resolved_flood(cfg);
  if (kind == "load") {
    write_load_sweep(run, flood, tree, values, theta);
    return;
  }
  const auto inst = build_model(flood, tree);
  write_theta_sweep(run, inst, flood_trajectories(flood), values);
}

/// Command-line arguments minus --threads and --out, which change neither
/// the results nor the file contents.
std::vector<std::string> recorded_args(int argc, char** argv) {
  std::vector<std::string> out;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--threads" || a == "--out") {
      ++i;
      continue;
    }
    if (a.rfind("--threads=", 0) == 0 || a.rfind("--out=", 0) == 0) continue;
    out.push_back(a);
  }
  return out;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const InputError*>(&e)) return kInput;
  if (dynamic_cast<const ValidationError*>(&e)) return kValidation;
  if (dynamic_cast<const SolverError*>(&e)) return kSolver;
  return kInput;
}

}  // namespace

int main(int argc, char** argv) {
  Globals g;
  g.argv = recorded_args(argc, argv);
  CLI::App app{"Scenario trees for heavy-tailed losses and the flood budget model"};
  app.require_subcommand(1);
  app.add_option("--config", g.config_path, "key=value configuration file");
  app.add_option("--set", g.overrides, "override a config key (key=value), repeatable");
  app.add_option("--seed", g.seed, "seed for every random draw (overrides the config key)");
  app.add_option("--threads", g.threads, "worker threads, 0 = all cores")->default_val(1);
  app.add_option("--out", g.out, "output directory")->default_val(".");

  std::string table_path, family = "frechet";
  auto* fit = app.add_subcommand("fit", "fit a loss law to a quantile table");
  fit->add_option("table", table_path, "CSV with header probability,loss")->required();
  fit->add_option("--family", family, "frechet, weibull or gumbel")->default_val("frechet");

  std::string sample_path;
  auto* estimate = app.add_subcommand("estimate", "quantile-position estimate of Frechet parameters");
  estimate->add_option("sample", sample_path, "CSV with header value (default: draw from the config law)");

  int n = 8;
  std::vector<int> probe;
  auto* quantize = app.add_subcommand("quantize", "optimal quantization of the config law");
  quantize->add_option("--n", n, "number of points")->default_val(8);
  quantize->add_option("--probe", probe, "sizes for the convergence probe")->delimiter(',');

  auto* tree = app.add_subcommand("tree", "build and validate a scenario tree from the config");

  std::string tree_a, tree_b;
  auto* distance = app.add_subcommand("distance", "nested distance between two trees");
  distance->add_option("a", tree_a, "tree JSON")->required();
  distance->add_option("b", tree_b, "tree JSON")->required();

  std::string tree_path, sweep_kind;
  std::vector<double> values;
  double theta = 0.0;
  auto* solve = app.add_subcommand("solve", "solve the flood model");
  solve->add_option("--tree", tree_path, "tree JSON (default: build from the config)");
  solve->add_option("--robust", theta, "risk budget of the ambiguity set")->default_val(0.0);
  solve->add_option("--sweep", sweep_kind, "also sweep 'load' or 'theta'");
  solve->add_option("--values", values, "sweep values")->delimiter(',');

  std::string kind;
  auto* sweep = app.add_subcommand("sweep", "solve once per insurance load or risk budget");
  sweep->add_option("kind", kind, "load or theta")->required();
  sweep->add_option("--values", values, "values to sweep")->delimiter(',')->required();
  sweep->add_option("--tree", tree_path, "tree JSON (default: build from the config)");
  sweep->add_option("--robust", theta, "risk budget used by a load sweep")->default_val(0.0);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInput;
  }

  try {
    const std::string command = app.get_subcommands().front()->get_name();
    Run run(g, command);
    int code = kOk;
    if (*fit) cmd_fit(run, table_path, family);
    else if (*estimate) cmd_estimate(run, sample_path);
    else if (*quantize) cmd_quantize(run, n, probe);
    else if (*tree) code = cmd_tree(run);
    else if (*distance) cmd_distance(run, tree_a, tree_b);
    else if (*solve) cmd_solve(run, tree_path, theta, sweep_kind, values);
    else if (*sweep) cmd_sweep(run, kind, tree_path, values, theta);
    run.finish();
    return code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}
