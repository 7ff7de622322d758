#pragma once

// Scenario trees built from conditionally updated Fréchet quantizers.
//
// Stage-1 nodes quantize the base law. Every node appends its value to a copy
// of its parent's sample; Group-1 nodes rescale the quantizer that produced
// them by the median ratio, Group-2 nodes re-estimate the law and re-quantize.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ftree/detail/parallel.hpp"
#include "ftree/distributions.hpp"
#include "ftree/errors.hpp"
#include "ftree/quantize.hpp"

namespace ftree {

enum class Group { G1, G2 };

inline std::string_view to_string(Group g) { return g == Group::G1 ? "G1" : "G2"; }

struct TreeNode {
  int id = 0;
  int stage = 1;    // 1..T
  int parent = -1;  // -1 for stage-1 nodes
  int index = 0;    // position among siblings (quantizer index)
  double value = 0.0;
  double prob = 1.0;  // conditional probability given the parent
  Group group = Group::G1;
  double median = 0.0;  // sample median after appending this node's value
  std::optional<FrechetParams> params;  // law of the children, non-leaf nodes only
  std::vector<int> children;
};

class ScenarioTree {
 public:
  int stages = 0;
  std::vector<TreeNode> nodes;
  std::vector<int> roots;  // stage-1 node ids
  double root_median = 0.0;
  std::optional<FrechetParams> root_params;

  /// Rebuilds children lists and root ids from the parent links. Ids must
  /// equal positions and parents must precede their children.
  void link() {
    roots.clear();
    for (auto& n : nodes) n.children.clear();
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      auto& n = nodes[i];
      if (n.id != static_cast<int>(i)) throw InputError("tree node ids must equal their positions");
      if (n.parent < 0) {
        if (n.stage != 1) throw InputError("only stage-1 nodes may lack a parent");
        n.index = static_cast<int>(roots.size());
        roots.push_back(n.id);
      } else {
        if (n.parent >= n.id) throw InputError("tree parents must precede their children");
        auto& p = nodes[static_cast<std::size_t>(n.parent)];
        if (p.stage + 1 != n.stage) throw InputError("tree child stage must be parent stage + 1");
        n.index = static_cast<int>(p.children.size());
        p.children.push_back(n.id);
      }
      if (n.stage < 1 || n.stage > stages) throw InputError("tree node stage out of range");
    }
  }

  [[nodiscard]] const TreeNode& node(int id) const {
    if (id < 0 || id >= static_cast<int>(nodes.size())) {
      std::ostringstream os;
      os << "unknown tree node id " << id;
      throw InputError(os.str());
    }
    return nodes[static_cast<std::size_t>(id)];
  }

  /// Children of a node, or the stage-1 nodes for id -1.
  [[nodiscard]] const std::vector<int>& children_of(int id) const {
    return id < 0 ? roots : node(id).children;
  }

  [[nodiscard]] std::vector<int> leaves() const {
    std::vector<int> out;
    for (const auto& n : nodes) {
      if (n.children.empty()) out.push_back(n.id);
    }
    return out;
  }

  [[nodiscard]] std::vector<int> stage_nodes(int stage) const {
    std::vector<int> out;
    for (const auto& n : nodes) {
      if (n.stage == stage) out.push_back(n.id);
    }
    return out;
  }

  /// Node ids from stage 1 down to the given node.
  [[nodiscard]] std::vector<int> path(int id) const {
    std::vector<int> out;
    for (int cur = id; cur >= 0; cur = node(cur).parent) out.push_back(cur);
    std::reverse(out.begin(), out.end());
    return out;
  }

  /// Median at the parent level: the root median for stage-1 nodes.
  [[nodiscard]] double parent_median(int id) const {
    const auto& n = node(id);
    return n.parent < 0 ? root_median : node(n.parent).median;
  }

  [[nodiscard]] std::optional<FrechetParams> parent_params(int id) const {
    const auto& n = node(id);
    return n.parent < 0 ? root_params : node(n.parent).params;
  }
};

inline double path_probability(const ScenarioTree& tree, int leaf) {
  if (!tree.node(leaf).children.empty()) {
    std::ostringstream os;
    os << "node " << leaf << " is not a leaf";
    throw InputError(os.str());
  }
  double p = 1.0;
  for (int id : tree.path(leaf)) p *= tree.node(id).prob;
  return p;
}

struct BuildSpec {
  FrechetParams base_params;
  SampleState base_sample;
  std::vector<int> branchiness;  // b_1..b_T
  double threshold = 0.5;
  double exposure = 1.0;
  /// Optional per-node children count (irregular trees); -1 means use the stage default.
  std::function<int(const TreeNode&)> node_branchiness;
  unsigned threads = 1;
  LambdaGrid grid;

  void validate() const {
    if (branchiness.empty()) throw InputError("branchiness must list at least one stage");
    for (int b : branchiness) {
      if (b < 1) throw InputError("branchiness entries must be >= 1");
    }
    if (!(threshold > 0.0 && threshold < 1.0)) throw InputError("threshold must lie in (0, 1)");
    if (!(exposure > 0.0)) throw InputError("exposure must be positive");
    require_valid(base_params);
    require_finite_mean(base_params);
    if (base_sample.size() < 3) throw InputError("base sample needs at least 3 values");
  }
};

namespace detail {

struct NodeWork {
  SampleState sample;
  FrechetParams params;
  Quantization children;  // quantizer that generates this node's children
  bool has_children = false;
};

}  // namespace detail

/// Builds the tree stage by stage; node ids are breadth-first.
inline ScenarioTree build_tree(const BuildSpec& spec, const LloydConfig& config = {}) {
  spec.validate();
  const int T = static_cast<int>(spec.branchiness.size());
  ScenarioTree tree;
  tree.stages = T;
  tree.root_median = spec.base_sample.median();
  tree.root_params = spec.base_params;

  LloydConfig lloyd = config;
  lloyd.threads = 1;

  detail::NodeWork root;
  root.sample = spec.base_sample;
  root.params = spec.base_params;
  root.children = lloyd_w1(DistributionView::frechet(spec.base_params),
                           static_cast<std::size_t>(spec.branchiness[0]), lloyd);
  root.has_children = true;

  auto add_children = [&](int parent, const Quantization& q, int stage) {
    for (std::size_t i = 0; i < q.size(); ++i) {
      TreeNode n;
      n.id = static_cast<int>(tree.nodes.size());
      n.stage = stage;
      n.parent = parent;
      n.index = static_cast<int>(i);
      n.value = q.points[i];
      n.prob = q.probabilities[i];
      if (parent < 0) {
        tree.roots.push_back(n.id);
      } else {
        tree.nodes[static_cast<std::size_t>(parent)].children.push_back(n.id);
      }
      tree.nodes.push_back(std::move(n));
    }
  };
  add_children(-1, root.children, 1);

  std::vector<int> current = tree.roots;
  std::vector<detail::NodeWork> parent_work;  // indexed like the previous stage
  std::vector<int> parent_ids;
  for (int t = 1; t <= T; ++t) {
    std::vector<detail::NodeWork> work(current.size());
    auto parent_slot = [&](int parent) -> const detail::NodeWork& {
      if (parent < 0) return root;
      const auto it = std::lower_bound(parent_ids.begin(), parent_ids.end(), parent);
      return parent_work[static_cast<std::size_t>(it - parent_ids.begin())];
    };
    detail::parallel_for(current.size(), spec.threads, [&](std::size_t k) {
      auto& node = tree.nodes[static_cast<std::size_t>(current[k])];
      const auto& up = parent_slot(node.parent);
      try {
        const auto cls = classify(up.sample, up.params, node.value, spec.threshold);
        node.group = is_group1(cls) ? Group::G1 : Group::G2;
        auto& w = work[k];
        w.sample = up.sample.appended(node.value);
        node.median = w.sample.median();
        if (t == T) return;
        int b = spec.branchiness[static_cast<std::size_t>(t)];
        if (spec.node_branchiness) {
          const int custom = spec.node_branchiness(node);
          if (custom > 0) b = custom;
        }
        const double ratio = node.median / up.sample.median();
        const bool same_count = static_cast<std::size_t>(b) == up.children.size();
        if (node.group == Group::G1) {
          w.params = quick_update(up.params, ratio);
          w.children = same_count ? scale(up.children, ratio)
                                  : lloyd_w1(DistributionView::frechet(w.params),
                                             static_cast<std::size_t>(b), lloyd);
        } else {
          w.params = gumbel_estimate(w.sample, spec.grid);
          if (!w.params.has_finite_mean()) {
            std::ostringstream os;
            os << "re-estimated shape " << w.params.lambda << " >= 1 at node " << node.id
               << ": the W1 quantizer is undefined";
            throw BuildError(os.str(), node.id);
          }
          LloydConfig warm = lloyd;
          if (same_count) {
            warm.init_points = up.children.points;
            for (auto& z : warm.init_points) z *= ratio;
          }
          w.children = lloyd_w1(DistributionView::frechet(w.params), static_cast<std::size_t>(b),
                                warm);
        }
        w.has_children = true;
        node.params = w.params;
      } catch (const BuildError&) {
        throw;
      } catch (const Error& e) {
        std::ostringstream os;
        os << "tree build failed at node " << node.id << ": " << e.what();
        throw BuildError(os.str(), node.id);
      }
    });
    if (t == T) break;
    std::vector<int> next;
    for (std::size_t k = 0; k < current.size(); ++k) {
      const std::size_t before = tree.nodes.size();
      add_children(current[k], work[k].children, t + 1);
      for (std::size_t i = before; i < tree.nodes.size(); ++i) next.push_back(static_cast<int>(i));
    }
    parent_ids = current;
    parent_work = std::move(work);
    current = std::move(next);
  }
  return tree;
}

struct Violation {
  std::string kind;
  int node = -1;
  std::string message;
};

struct ValidationReport {
  std::vector<Violation> violations;
  [[nodiscard]] bool ok() const { return violations.empty(); }
};

struct ValidationTolerances {
  double child_sum = 1e-10;
  double leaf_sum = 1e-9;
  double interpolation = 1e-9;  // relative
};

namespace detail {

inline void report(ValidationReport& r, std::string kind, int node, const std::string& msg) {
  r.violations.push_back({std::move(kind), node, msg});
}

}  // namespace detail

/// Indices of Group-1 nodes among a sibling set, in index order.
inline std::vector<int> group1_indices(const ScenarioTree& tree, const std::vector<int>& siblings) {
  std::vector<int> out;
  for (int id : siblings) {
    if (tree.node(id).group == Group::G1) out.push_back(tree.node(id).index);
  }
  return out;
}

/// Checks the structural and construction invariants; never throws on a
/// violation, every problem becomes a report entry.
inline ValidationReport validate(const ScenarioTree& tree, const ValidationTolerances& tol = {}) {
  ValidationReport r;
  auto check_children = [&](int id, const std::vector<int>& kids) {
    if (kids.empty()) return;
    double s = 0.0;
    for (int c : kids) {
      const double p = tree.node(c).prob;
      if (!(p >= 0.0)) detail::report(r, "negative-probability", c, "probability below zero");
      s += p;
    }
    if (std::abs(s - 1.0) > tol.child_sum) {
      std::ostringstream os;
      os << "children probabilities sum to " << s;
      detail::report(r, "sum-to-one", id, os.str());
    }
  };
  check_children(-1, tree.roots);
  for (const auto& n : tree.nodes) check_children(n.id, n.children);

  double leaf_total = 0.0;
  for (int leaf : tree.leaves()) {
    if (tree.node(leaf).stage != tree.stages) {
      detail::report(r, "depth", leaf, "leaf above the final stage");
    }
    leaf_total += path_probability(tree, leaf);
  }
  if (std::abs(leaf_total - 1.0) > tol.leaf_sum) {
    std::ostringstream os;
    os << "leaf path probabilities sum to " << leaf_total;
    detail::report(r, "leaf-sum", -1, os.str());
  }

  for (const auto& n : tree.nodes) {
    const auto law = tree.parent_params(n.id);
    if (law && n.value < law->epsilon) {
      std::ostringstream os;
      os << "value " << n.value << " below lower limit " << law->epsilon;
      detail::report(r, "support", n.id, os.str());
    }
  }

  // Group-1 persistence: the Group-1 index set never shrinks down a path.
  for (const auto& n : tree.nodes) {
    if (n.children.empty()) continue;
    const auto above = group1_indices(tree, tree.children_of(n.parent));
    const auto below = group1_indices(tree, n.children);
    for (int i : above) {
      if (i < static_cast<int>(n.children.size()) &&
          std::find(below.begin(), below.end(), i) == below.end()) {
        std::ostringstream os;
        os << "index " << i << " is Group 1 above this node but not among its children";
        detail::report(r, "group1-persistence", n.id, os.str());
      }
    }
  }

  // Group-1 children must be the scaled sibling quantizer.
  for (const auto& n : tree.nodes) {
    if (n.group != Group::G1 || n.children.empty()) continue;
    const auto& siblings = tree.children_of(n.parent);
    if (siblings.size() != n.children.size()) continue;
    const double ratio = n.median / tree.parent_median(n.id);
    for (std::size_t i = 0; i < siblings.size(); ++i) {
      const double expect = tree.node(siblings[i]).value * ratio;
      const auto& child = tree.node(n.children[i]);
      if (std::abs(child.value - expect) > tol.interpolation * std::abs(expect)) {
        std::ostringstream os;
        os << "child " << child.id << " value " << child.value << " differs from scaled sibling "
           << expect;
        detail::report(r, "interpolation", n.id, os.str());
      }
      if (child.prob != tree.node(siblings[i]).prob) {
        detail::report(r, "interpolation", n.id, "Group-1 child probability changed");
      }
    }
  }
  return r;
}

/// Probability mass of Group-1 nodes per stage (unconditional).
inline std::vector<double> group1_mass_per_stage(const ScenarioTree& tree) {
  std::vector<double> mass(static_cast<std::size_t>(tree.stages), 0.0);
  std::vector<double> reach(tree.nodes.size(), 0.0);
  for (const auto& n : tree.nodes) {
    const double up = n.parent < 0 ? 1.0 : reach[static_cast<std::size_t>(n.parent)];
    reach[static_cast<std::size_t>(n.id)] = up * n.prob;
    if (n.group == Group::G1) mass[static_cast<std::size_t>(n.stage - 1)] += up * n.prob;
  }
  return mass;
}

}  // namespace ftree
