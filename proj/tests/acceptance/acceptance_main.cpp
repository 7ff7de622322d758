// Acceptance checks. Without arguments every criterion runs; with
// `--criterion N` only that one. Each prints a single PASS or FAIL line and
// the exit status is nonzero when any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
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
#include "support/flood_oracles.hpp"
#include "support/grid_oracles.hpp"
#include "support/random_trees.hpp"
#include "support/synthetic_models.hpp"
#include "support/transport_oracles.hpp"

namespace fs = std::filesystem;
using namespace ftree;
using namespace ftree::testing;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  /// Records a failed condition; the first few messages are kept.
  void require(bool ok, const std::string& what) {
    if (ok) return;
    if (pass || failures < 4) detail << (failures ? "; " : "") << what;
    pass = false;
    ++failures;
  }
  int failures = 0;
};

std::string num(double v) { return io::format_number(v); }

std::vector<double> random_simplex(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::vector<double> p(n);
  double s = 0.0;
  for (auto& x : p) s += (x = u(rng));
  for (auto& x : p) x /= s;
  return p;
}

// 1. Quick estimator on order-statistic oracle triples.
void criterion_1(Outcome& out) {
  for (double lambda : {0.3, 0.5, 1.0, 1.5}) {
    for (std::size_t n : {10u, 100u, 1000u}) {
      const FrechetParams truth{lambda, 1.0, 0.0};
      const double nd = static_cast<double>(n);
      const auto triple = SampleState::from_summary(quantile(truth, 1.0 - std::pow(0.5, 1.0 / nd)),
                                                    quantile(truth, 0.5),
                                                    quantile(truth, std::pow(0.5, 1.0 / nd)), n);
      const auto est = gumbel_estimate(triple);
      const std::string tag = "lambda " + num(lambda) + " N " + std::to_string(n);
      out.require(std::abs(est.lambda - lambda) <= 1e-3, tag + ": lambda " + num(est.lambda));
      out.require(std::abs(est.epsilon) <= 1e-6, tag + ": epsilon " + num(est.epsilon));
      out.require(std::abs(est.scale() - 1.0) <= 1e-3, tag + ": u - epsilon " + num(est.scale()));
    }
  }
  if (out.pass) out.detail << "12 triples recovered";
}

// 2. Closed-form quantizers.
void criterion_2(Outcome& out) {
  const auto u1 = lloyd_w1(DistributionView::uniform(0.0, 1.0), 1);
  out.require(std::abs(u1.points[0] - 0.5) <= 1e-9 && std::abs(u1.distortion - 0.25) <= 1e-9,
              "uniform n=1: " + num(u1.points[0]) + ", " + num(u1.distortion));
  const auto u2 = lloyd_w1(DistributionView::uniform(0.0, 1.0), 2);
  out.require(std::abs(u2.points[0] - 0.25) <= 1e-9 && std::abs(u2.points[1] - 0.75) <= 1e-9 &&
                  std::abs(u2.distortion - 0.125) <= 1e-9,
              "uniform n=2: " + num(u2.points[0]) + ", " + num(u2.points[1]) + ", " + num(u2.distortion));
  const FrechetParams p{0.5, 1.0, 0.0};
  const auto f1 = lloyd_w1(DistributionView::frechet(p), 1);
  // Gamma(0.5) - 2 * int_0^0.5 (-log p)^(-1/2) dp by 30-digit quadrature.
  const double oracle = 0.92510785792768264;
  out.require(std::abs(f1.points[0] - median(p)) <= 1e-9, "Frechet n=1 point " + num(f1.points[0]));
  out.require(std::abs(f1.distortion - oracle) <= 1e-3, "Frechet n=1 distortion " + num(f1.distortion));
  if (out.pass) out.detail << "Frechet n=1 distortion " << num(f1.distortion);
}

// 3. Log-log slope of the optimal distortion.
void criterion_3(Outcome& out) {
  std::vector<std::size_t> ns;
  for (std::size_t n = 2; n <= 64; ++n) ns.push_back(n);
  LloydConfig cfg;
  cfg.threads = 0;
  const auto fr = convergence_probe(DistributionView::frechet({0.5, 1.0, 0.0}), ns, cfg);
  const auto un = convergence_probe(DistributionView::uniform(0.0, 1.0), ns, cfg);
  out.require(fr.slope >= -1.15 && fr.slope <= -0.85, "Frechet slope " + num(fr.slope));
  out.require(std::abs(un.slope + 1.0) <= 1e-6, "uniform slope " + num(un.slope));
  out.detail << (out.pass ? "" : "; ") << "Frechet slope " << num(fr.slope) << ", uniform "
             << num(un.slope);
}

// 4. Quantizing a scaled law equals scaling the quantizer.
void criterion_4(Outcome& out) {
  const FrechetParams base{0.5, 1.0, 0.3};
  for (std::size_t n : {4u, 6u}) {
    const auto q = lloyd_w1(DistributionView::frechet(base), n);
    for (double r : {0.5, 0.9, 1.3}) {
      const FrechetParams scaled{base.lambda, base.u * r, base.epsilon * r};
      const auto direct = lloyd_w1(DistributionView::frechet(scaled), n);
      const auto rescaled = scale(q, r);
      double worst = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        worst = std::max(worst, std::abs(direct.points[i] - rescaled.points[i]) / std::abs(direct.points[i]));
      }
      const double median_ratio = median(scaled) / median(base);
      const std::string tag = "n " + std::to_string(n) + " ratio " + num(r);
      out.require(worst <= 1e-7, tag + ": point gap " + num(worst));
      out.require(std::abs(direct.distortion / q.distortion - median_ratio) <= 1e-8,
                  tag + ": distortion ratio " + num(direct.distortion / q.distortion));
      out.require(direct.probabilities == rescaled.probabilities, tag + ": probabilities differ");
    }
  }
  if (out.pass) out.detail << "ratios 0.5, 0.9, 1.3 agree";
}

// 5. Group-1 bookkeeping on a [4,4,4] tree.
void criterion_5(Outcome& out) {
  const double threshold = 0.6779;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    BuildSpec spec;
    spec.base_sample = SampleState::from_values(sample({0.4, 1.0, 0.0}, 2001, seed));
    spec.base_params = gumbel_estimate(spec.base_sample);
    spec.branchiness = {4, 4, 4};
    spec.threshold = threshold;
    const auto tree = build_tree(spec);
    for (const auto& v : validate(tree).violations) {
      out.require(v.kind != "group1-persistence", "seed " + std::to_string(seed) + ": " + v.message);
    }
    for (int parent = -1; parent < static_cast<int>(tree.nodes.size()); ++parent) {
      const auto& kids = tree.children_of(parent);
      if (kids.empty()) continue;
      double mass = 0.0, largest = 0.0;
      for (int c : kids) {
        largest = std::max(largest, tree.node(c).prob);
        if (tree.node(c).group == Group::G1) mass += tree.node(c).prob;
      }
      out.require(mass <= threshold + largest,
                  "seed " + std::to_string(seed) + " node " + std::to_string(parent) + ": mass " + num(mass));
    }
  }
  if (out.pass) out.detail << "3 trees, persistence and mass bound hold";
}

// 6. Worst-case expectation over the divergence ball.
void criterion_6(Outcome& out) {
  const std::vector<double> v2{0.0, 1.0};
  const double closed = 1.0 - (0.5 + std::sqrt(0.025 / 1.1));
  const double two = worst_case_expectation(v2, {{0.5, 0.5}, 0.1});
  out.require(std::abs(two - closed) <= 1e-6 && std::abs(two - 0.34924) <= 1e-5,
              "n=2 value " + num(two));

  const std::vector<double> v3{1.0, 2.0, 4.0}, p3{0.2, 0.3, 0.5};
  const double three = worst_case_expectation(v3, {p3, 0.05});
  const double grid = worst_case_grid3(v3, p3, 0.05, 1e-3);
  out.require(std::abs(three - grid) <= 1e-3, "n=3 " + num(three) + " vs grid " + num(grid));

  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> val(-5.0, 5.0), th(0.0, 2.0);
  std::uniform_int_distribution<int> size(2, 12);
  double worst_gap = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = static_cast<std::size_t>(size(rng));
    std::vector<double> v(n);
    for (auto& x : v) x = val(rng);
    const AmbiguitySet set{random_simplex(rng, n), th(rng)};
    const auto sol = worst_case_weights(v, set);
    worst_gap = std::max(worst_gap, std::abs(sol.value - sol.dual_value));

    double nominal = 0.0;
    for (std::size_t i = 0; i < n; ++i) nominal += set.nominal[i] * v[i];
    const double vmin = *std::min_element(v.begin(), v.end());
    double prev = nominal;
    for (double theta : {0.0, 0.05, 0.1, 0.5, 1.0, 10.0}) {
      const double w = worst_case_expectation(v, {set.nominal, theta});
      out.require(w <= prev + 1e-12 && w >= vmin - 1e-12 && w <= nominal + 1e-12,
                  "trial " + std::to_string(trial) + " theta " + num(theta) + ": " + num(w));
      prev = w;
    }
  }
  out.require(worst_gap < 1e-8, "duality gap " + num(worst_gap));
  if (out.pass) out.detail << "n=2 " << num(two) << ", n=3 " << num(three) << ", max gap " << num(worst_gap);
}

// 7. Backward solve against the KKT and lattice oracles.
void criterion_7(Outcome& out) {
  const auto c1 = toy_config(1);
  const auto i1 = build_model(c1, toy_tree_t1());
  const double v1 = backward_solve(i1.model, i1.tree, flood_trajectories(c1), flood_options()).value();
  out.require(std::abs(v1 - 1.65579) <= 1e-3, "T=1 value " + num(v1));

  const auto c2 = toy_config(2);
  const auto i2 = build_model(c2, toy_tree_t2());
  const double v2 = backward_solve(i2.model, i2.tree, flood_trajectories(c2), flood_options()).value();
  const double lattice = lattice_value(c2, i2.tree, -1, c2.s0, 51);
  const double rel = std::abs(v2 / lattice - 1.0);
  out.require(rel <= 1e-2, "T=2 value " + num(v2) + " vs lattice " + num(lattice) + " (relative " + num(rel) + ")");
  if (out.pass) out.detail << "T=1 " << num(v1) << ", T=2 relative gap " << num(rel);
}

// 8. Fitted value functions keep the convex-increasing shape.
void criterion_8(Outcome& out) {
  int fits = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto tree = random_tree(3, 2, 50 + seed, 1.0);
    const auto model = convex_model(seed);
    const auto traj = sample_trajectories(2.0, 0.2, 0.05, 3, 16, seed);
    DpOptions opt;
    opt.form = ValueForm::Quadratic;
    opt.orientation = Orientation::ConvexIncreasing;
    const auto sol = backward_solve(model, tree, traj, opt);
    for (const auto& np : sol.nodes) {
      if (!np.value_function) continue;
      const std::string tag = "seed " + std::to_string(seed) + " node " + std::to_string(np.node);
      const auto& states = traj.at(np.stage + 1);
      out.require(check_orientation(*np.value_function, states).ok(), tag + ": shape check failed");

      std::vector<double> y;
      for (const auto& p : np.points) y.push_back(p.value);
      const auto fit = fit_value_function(states, y, ValueForm::Quadratic, Orientation::ConvexIncreasing);
      const double scale = std::max(1.0, fit.unconstrained_objective);
      out.require(fit.objective >= fit.unconstrained_objective - 1e-9 * scale,
                  tag + ": constrained " + num(fit.objective) + " below " + num(fit.unconstrained_objective));
      if (fit.constraints_active == 0) {
        out.require(std::abs(fit.objective - fit.unconstrained_objective) <= 1e-9 * scale,
                    tag + ": inactive constraints but objectives differ");
      }
      ++fits;
    }
  }
  if (out.pass) out.detail << fits << " fits keep their shape";
}

// 9. Nested distance identities and oracles.
void criterion_9(Outcome& out) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto t = random_tree(3, 3, 300 + seed);
    const double self = nested_distance(t, t);
    out.require(std::abs(self) <= 1e-12, "self distance " + num(self));
  }
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const int stages = 1 + static_cast<int>(seed % 3);
    const auto a = random_tree(stages, 3, 800 + seed), b = random_tree(stages, 3, 900 + seed);
    const auto in = stagewise_inputs(a, b);
    const double bound = stagewise_upper_bound(in.per_stage, in.bounds);
    const double nd = nested_distance(a, b);
    out.require(bound >= nd - 1e-12, "seed " + std::to_string(seed) + ": bound " + num(bound) + " < " + num(nd));
  }
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-1.0, 3.0);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> cost(9);
    for (auto& c : cost) c = u(rng);
    const auto a = random_simplex(rng, 3), b = random_simplex(rng, 3);
    worst = std::max(worst, std::abs(transport_lp(cost, 3, 3, a, b).cost - vertex_enumeration_3x3(cost, a, b)));
  }
  out.require(worst <= 1e-10, "3x3 transport gap " + num(worst));
  if (out.pass) out.detail << "3x3 transport max gap " << num(worst);
}

// 10. Frechet fit to the 2030 Flipped Clayton quantile row.
void criterion_10(Outcome& out) {
  const auto table = io::load_quantile_table(fs::path(FTREE_SOURCE_DIR) / "fixtures" / "2030_flipped_clayton.csv");
  const auto fit = fit_quantile_table(table, Family::Frechet);
  double worst = 0.0;
  for (std::size_t i = 0; i < fit.used_rows.size(); ++i) {
    worst = std::max(worst, fit.relative_errors[i]);
    out.require(fit.relative_errors[i] <= 0.15, "p " + num(fit.used_rows[i].probability) + ": fitted " +
                                                    num(fit.fitted[i]) + " vs " + num(fit.used_rows[i].loss));
  }
  out.detail << (out.pass ? "" : "; ") << "max relative error " << num(worst);
}

// 11. Risk-budget sweep on the pinned toy instance.
void criterion_11(Outcome& out) {
  const auto cfg = toy_config(1);
  const auto inst = build_model(cfg, toy_tree_t1_two());
  const auto traj = flood_trajectories(cfg);
  const std::vector<double> thetas{0.0, 0.05, 0.1, 0.2, 0.5};
  const auto rows = theta_sweep(inst.model, inst.tree, traj, thetas, flood_options());
  for (std::size_t i = 1; i < rows.size(); ++i) {
    out.require(rows[i].value <= rows[i - 1].value + 1e-12,
                "theta " + num(rows[i].theta) + ": " + num(rows[i].value) + " > " + num(rows[i - 1].value));
  }
  const double nominal = backward_solve(inst.model, inst.tree, traj, flood_options()).value();
  out.require(std::abs(rows[0].value - nominal) <= 1e-8, "theta 0 " + num(rows[0].value) + " vs " + num(nominal));
  if (out.pass) out.detail << "values " << num(rows.front().value) << " .. " << num(rows.back().value);
}

// 12. Every CLI command gives byte-identical files at 1 and 8 threads.
void criterion_12(Outcome& out) {
  const fs::path src(FTREE_SOURCE_DIR);
  const fs::path work = fs::path(FTREE_BINARY_DIR) / "acceptance_cli";
  fs::remove_all(work);
  const std::string cli = FTREE_CLI_PATH;
  const std::string def = (src / "configs" / "default.cfg").string();
  const std::string fix = (src / "fixtures").string();
  const std::vector<std::pair<std::string, std::string>> commands{
      {"fit", "fit " + fix + "/2030_flipped_clayton.csv"},
      {"estimate", "--config " + def + " estimate"},
      {"quantize", "--config " + def + " quantize --n 6 --probe 2,4,8,16"},
      {"tree", "--config " + def + " tree"},
      {"distance", "distance " + fix + "/toy_tree_t2.json " + fix + "/toy_tree_t2.json"},
      {"solve", "--config " + def + " solve --robust 0.1 --sweep theta --values 0,0.1"},
      {"sweep_load", "--config " + def + " sweep load --values 0,0.05,0.5"},
      {"sweep_theta", "--config " + (src / "configs" / "toy_t2.cfg").string() + " sweep theta --tree " + fix +
                          "/toy_tree_t2.json --values 0,0.05,0.1"},
  };
  auto read_dir = [](const fs::path& dir) {
    std::map<std::string, std::string> files;
    if (!fs::exists(dir)) return files;
    for (const auto& e : fs::directory_iterator(dir)) files[e.path().filename().string()] = io::read_file(e.path());
    return files;
  };
  for (const auto& [name, args] : commands) {
    std::vector<std::map<std::string, std::string>> runs;
    for (const char* threads : {"1", "1", "8", "8"}) {
      const fs::path dir = work / (name + "_" + threads + "_" + std::to_string(runs.size()));
      const std::string cmd = cli + " --threads " + threads + " --out " + dir.string() + " " + args +
                              " > " + (work / "log.txt").string() + " 2>&1";
      fs::create_directories(work);
      const int rc = std::system(cmd.c_str());
      out.require(rc == 0, name + ": exit status " + std::to_string(rc));
      runs.push_back(read_dir(dir));
    }
    out.require(!runs[0].empty(), name + ": no output files");
    for (std::size_t i = 1; i < runs.size(); ++i) {
      out.require(runs[i] == runs[0], name + ": run " + std::to_string(i) + " differs");
    }
  }
  if (out.pass) out.detail << commands.size() << " commands reproducible";
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;  // 0: no runtime limit
  std::function<void(Outcome&)> run;
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> list{
      {1, "estimator recovery", 1.0, criterion_1},
      {2, "quantization exactness", 0.0, criterion_2},
      {3, "convergence rate", 30.0, criterion_3},
      {4, "scaling identity", 0.0, criterion_4},
      {5, "Group-1 grouping", 0.0, criterion_5},
      {6, "robust dual", 10.0, criterion_6},
      {7, "DP oracle equivalence", 60.0, criterion_7},
      {8, "shape recursion", 0.0, criterion_8},
      {9, "distances", 0.0, criterion_9},
      {10, "table fit", 0.0, criterion_10},
      {11, "theta sweep", 0.0, criterion_11},
      {12, "CLI determinism", 0.0, criterion_12},
  };
  return list;
}

bool run_one(const Criterion& c) {
  Outcome out;
  const auto start = std::chrono::steady_clock::now();
  try {
    c.run(out);
  } catch (const std::exception& e) {
    out.require(false, std::string("exception: ") + e.what());
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (c.budget_seconds > 0.0) {
    out.require(seconds <= c.budget_seconds, "runtime " + num(seconds) + " s over " + num(c.budget_seconds) + " s");
  }
  std::ostringstream time;
  time.precision(3);
  time << std::fixed << seconds;
  std::cout << "criterion " << c.id << " (" << c.name << "): " << (out.pass ? "PASS" : "FAIL") << " - "
            << out.detail.str() << " [" << time.str() << " s]" << std::endl;
  return out.pass;
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--criterion" && i + 1 < argc) {
      only = std::atoi(argv[++i]);
    } else {
      std::cerr << "usage: ftree_acceptance [--criterion N]\n";
      return 2;
    }
  }
  bool all = true;
  bool found = false;
  for (const auto& c : criteria()) {
    if (only != 0 && c.id != only) continue;
    found = true;
    all = run_one(c) && all;
  }
  if (!found) {
    std::cerr << "no criterion " << only << "\n";
    return 2;
  }
  return all ? 0 : 1;
}
