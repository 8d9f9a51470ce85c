// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include "pathcast/pathcast.hpp"

namespace pathcast::testing {

/// Pet subgraph: animal -> cat -> {shorthair, longhair} and
/// {solid-color, tabby-color, point-color}; british-shorthair below
/// shorthair and every color, bengal below shorthair and tabby-color.
inline LabelGraph figure2() {
  return build_graph("animal", {{"pets", {"cat", "british-shorthair", "bengal"}}},
                     {{"shorthair", {"cat"}},
                      {"longhair", {"cat"}},
                      {"solid-color", {"cat"}},
                      {"tabby-color", {"cat"}},
                      {"point-color", {"cat"}}},
                     {{"animal", "cat"},
                      {"shorthair", "british-shorthair"},
                      {"solid-color", "british-shorthair"},
                      {"tabby-color", "british-shorthair"},
                      {"point-color", "british-shorthair"},
                      {"shorthair", "bengal"},
                      {"tabby-color", "bengal"}},
                     {{"hair", {"shorthair", "longhair"}}, {"color", {"solid-color", "tabby-color", "point-color"}}});
}

/// root -> a -> b -> x with a, b augmented: every decoder block is a
/// singleton.
inline LabelGraph chain() {
  return build_graph("root", {{"d", {"x"}}}, {{"a", {"root"}}, {"b", {"a"}}}, {{"b", "x"}}, {});
}

/// Random rooted DAG with 2..max_nodes nodes. Every non-root node gets a
/// parent with a smaller id (so it is reachable), extra forward edges are
/// sprinkled in, and some sibling sets become explicit groups. Sinks are
/// labels; the rest are labels or augmented at random.
inline LabelGraph random_dag(std::mt19937_64& rng, std::size_t max_nodes = 12, double extra_edge_p = 0.25) {
  std::uniform_int_distribution<std::size_t> size_dist(2, max_nodes);
  const std::size_t n = size_dist(rng);
  std::bernoulli_distribution extra(extra_edge_p), coin(0.5);
  std::set<std::pair<NodeId, NodeId>> edge_set;
  for (NodeId v = 1; v < n; ++v) {
    edge_set.insert({std::uniform_int_distribution<NodeId>(0, v - 1)(rng), v});
    for (NodeId u = 1; u < v; ++u)
      if (extra(rng)) edge_set.insert({u, v});
  }
  std::vector<bool> has_child(n, false);
  for (auto [p, c] : edge_set) has_child[p] = true;
  std::vector<GraphNode> nodes;
  for (NodeId v = 0; v < n; ++v) {
    GraphNode node{v, "n" + std::to_string(v), NodeKind::Label, {"ds"}};
    if (v == 0) node = GraphNode{0, "root", NodeKind::Root, {}};
    else if (has_child[v] && coin(rng)) node = GraphNode{v, "n" + std::to_string(v), NodeKind::Augmented, {}};
    nodes.push_back(node);
  }
  std::vector<Edge> edges;
  for (auto [p, c] : edge_set) edges.push_back({p, c});
  // explicit groups: random subsets of some node's children
  std::vector<Group> groups;
  std::vector<bool> taken(n, false);
  for (NodeId p = 0; p < n; ++p) {
    std::vector<NodeId> kids;
    for (auto [a, c] : edge_set)
      if (a == p && !taken[c]) kids.push_back(c);
    if (kids.size() < 2 || !coin(rng)) continue;
    std::shuffle(kids.begin(), kids.end(), rng);
    std::size_t k = std::uniform_int_distribution<std::size_t>(2, kids.size())(rng);
    Group g{"g" + std::to_string(p), {kids.begin(), kids.begin() + static_cast<std::ptrdiff_t>(k)}, false};
    for (NodeId m : g.members) taken[m] = true;
    groups.push_back(std::move(g));
  }
  return LabelGraph::build(std::move(nodes), std::move(edges), std::move(groups));
}

/// Plain DFS over every child with no pruning; keeps paths that end at the
/// label, sorted.
inline std::vector<PredictionPath> brute_force_paths(const LabelGraph& g, NodeId label) {
  std::vector<PredictionPath> out;
  PredictionPath cur{g.root()};
  std::function<void(NodeId)> dfs = [&](NodeId v) {
    if (v == label) {
      out.push_back(cur);
      return;
    }
    for (const Edge& e : g.edges())
      if (e.parent == v) {
        cur.push_back(e.child);
        dfs(e.child);
        cur.pop_back();
      }
  };
  dfs(g.root());
  std::sort(out.begin(), out.end());
  return out;
}

inline bool same_group_literal(const LabelGraph& g, NodeId u, NodeId w) {
  for (const Group& grp : g.groups()) {
    bool hu = false, hw = false;
    for (NodeId m : grp.members) {
      hu = hu || m == u;
      hw = hw || m == w;
    }
    if (hu && hw) return true;
  }
  return false;
}

/// P is nondeterministic iff some other path P' holds w != u competing with
/// a node u of P. Returns one flag per path of `paths`.
inline std::vector<bool> literal_nondeterministic(const LabelGraph& g, const std::vector<PredictionPath>& paths) {
  std::vector<bool> out(paths.size(), false);
  for (std::size_t i = 0; i < paths.size(); ++i)
    for (std::size_t j = 0; j < paths.size(); ++j) {
      if (i == j) continue;
      for (NodeId u : paths[i])
        for (NodeId w : paths[j])
          if (u != w && same_group_literal(g, u, w)) out[i] = true;
    }
  return out;
}

/// Returns max relative error between backprop and central differences
/// over every coordinate of every parameter. `loss` rebuilds the scalar
/// from scratch on a new tape.
inline double gradient_check(const std::vector<num::Parameter*>& params,
                             const std::function<double(bool record)>& loss, double h = 1e-5,
                             double floor = 1e-6) {
  for (auto* p : params) p->zero_grad();
  loss(true);
  double worst = 0.0;
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double keep = p->value[i];
      p->value[i] = keep + h;
      const double up = loss(false);
      p->value[i] = keep - h;
      const double down = loss(false);
      p->value[i] = keep;
      const double fd = (up - down) / (2 * h);
      const double an = p->grad[i];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), floor});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

/// Root plus three levels; level 3 holds labels, the middle levels mix labels
/// and augmented nodes. Each node below the root gets one or two parents in
/// the level above, and random sibling subsets become groups.
inline LabelGraph layered_dag(std::mt19937_64& rng, std::size_t width_max = 3) {
  std::uniform_int_distribution<std::size_t> width(2, width_max);
  std::bernoulli_distribution coin(0.5);
  std::vector<std::vector<NodeId>> levels{{0}};
  std::vector<GraphNode> nodes{{0, "root", NodeKind::Root, {}}};
  std::set<std::pair<NodeId, NodeId>> edge_set;
  for (int l = 1; l <= 3; ++l) {
    std::vector<NodeId> level;
    const auto& above = levels.back();
    for (std::size_t i = 0, w = width(rng); i < w; ++i) {
      NodeId id = nodes.size();
      bool label = l == 3 || coin(rng);
      nodes.push_back({id, "l" + std::to_string(l) + "n" + std::to_string(i), label ? NodeKind::Label : NodeKind::Augmented,
                       label ? std::set<std::string>{"ds"} : std::set<std::string>{}});
      std::uniform_int_distribution<std::size_t> pick(0, above.size() - 1);
      edge_set.insert({above[pick(rng)], id});
      if (coin(rng)) edge_set.insert({above[pick(rng)], id});
      level.push_back(id);
    }
    levels.push_back(level);
  }
  // augmented nodes without children get one
  for (NodeId v = 1; v < nodes.size(); ++v) {
    if (nodes[v].kind != NodeKind::Augmented) continue;
    bool has = std::any_of(edge_set.begin(), edge_set.end(), [&](const auto& e) { return e.first == v; });
    if (!has) edge_set.insert({v, levels[3].front()});
  }
  std::vector<Edge> edges;
  for (auto [a, b] : edge_set) edges.push_back({a, b});
  std::vector<Group> groups;
  std::vector<bool> taken(nodes.size(), false);
  for (NodeId p = 0; p < nodes.size(); ++p) {
    std::vector<NodeId> kids;
    for (auto [a, c] : edge_set)
      if (a == p && !taken[c]) kids.push_back(c);
    if (kids.size() < 2 || !coin(rng)) continue;
    Group g{"g" + std::to_string(p), kids, false};
    for (NodeId m : kids) taken[m] = true;
    groups.push_back(std::move(g));
  }
  return LabelGraph::build(std::move(nodes), std::move(edges), std::move(groups));
}

/// Two competing arms under the root, both leading to one label; only the
/// `good` arm is rewarded.
inline LabelGraph bandit_graph() {
  return build_graph("root", {{"toy", {"target"}}}, {{"good", {"root"}}, {"bad", {"root"}}},
                     {{"good", "target"}, {"bad", "target"}}, {{"arm", {"good", "bad"}}});
}

struct BanditRun {
  std::vector<double> good_prob;  // after each step
  std::optional<std::size_t> first_hit;  // first step with prob >= 0.95
};

/// Policy gradient alone (alpha 0) with the EMA baseline on the bandit toy.
inline BanditRun run_bandit(std::uint64_t seed, std::size_t steps = 500, double lr = 0.01, std::size_t batch = 16) {
  auto g = std::make_shared<const LabelGraph>(bandit_graph());
  LabelPathModel model(g, {2, 8, 8}, seed);
  TrainConfig cfg;
  cfg.alpha = 0.0;
  cfg.beta = 1.0;
  cfg.lr = cfg.lr_e = lr;
  cfg.seed = seed;
  Trainer trainer(model, cfg);
  const NodeId good = g->id_of("good"), target = g->id_of("target");
  Batch b;
  for (std::size_t k = 0; k < batch; ++k) {
    b.inputs.push_back({1.0, -1.0});
    b.targets.emplace_back();
    b.policy_indexes.push_back(k);
    b.reward_sets.push_back(CertainNodeSet{target, {good}});
  }
  auto good_prob = [&] {
    auto f0 = model.encode(b.inputs[0]);
    auto [d0, f1] = model.step(f0, model.vocab().start());
    auto [d1, f2] = model.step(f1, g->root());
    return d1.probs[d1.candidates[0] == good ? 0 : 1];
  };
  BanditRun run;
  for (std::size_t s = 0; s < steps; ++s) {
    Rng rng = stream(seed, {s});
    trainer.train_batch(b, rng);
    run.good_prob.push_back(good_prob());
    if (!run.first_hit && run.good_prob.back() >= 0.95) run.first_hit = s + 1;
  }
  return run;
}

/// Random batch over a graph: inputs ~ N(0,1), one label each, targets and
/// policy indexes the way the trainer assigns them.
inline Batch random_batch(const LabelGraph& g, const LabelPathModel& model, std::size_t n, std::mt19937_64& rng,
                          std::size_t max_len = 8) {
  std::vector<NodeId> labels;
  for (NodeId v = 0; v < g.node_count(); ++v)
    if (g.is_label(v)) labels.push_back(v);
  std::normal_distribution<double> d(0, 1);
  Batch b;
  for (std::size_t k = 0; k < n; ++k) {
    NodeId label = labels[std::uniform_int_distribution<std::size_t>(0, labels.size() - 1)(rng)];
    std::vector<double> x(model.config().input_dim);
    for (double& v : x) v = d(rng);
    b.inputs.push_back(x);
    auto set = classify_paths(g, label);
    std::vector<TargetPath> targets;
    for (const auto& p : set.deterministic) targets.push_back(make_target(g, model.vocab(), p, max_len));
    if (targets.empty()) b.policy_indexes.push_back(k);
    b.targets.push_back(targets);
    b.reward_sets.push_back(certain_nodes(g, label));
  }
  return b;
}

/// Worst relative error of L_d gradients against central differences.
inline double deterministic_loss_fd(LabelPathModel& model, const Batch& batch, PathAggregation agg) {
  auto loss = [&](bool record) {
    num::Tape t;
    auto p = model.bind(t);
    auto d = deterministic_loss(t, p, model, batch, true, agg);
    if (record) t.backward(d.loss);
    return t.value(d.loss).item();
  };
  return gradient_check(model.parameters(), loss);
}

/// Same for the policy surrogate. Every evaluation replays the same rng
/// stream and baseline, so the sampled paths stay fixed under the tiny
/// perturbations.
inline double policy_loss_fd(LabelPathModel& model, Batch batch, std::uint64_t seed, double baseline_value) {
  if (batch.policy_indexes.empty()) {
    batch.policy_indexes.resize(batch.inputs.size());
    std::iota(batch.policy_indexes.begin(), batch.policy_indexes.end(), std::size_t{0});
  }
  std::vector<PredictionPath> first;
  bool same_paths = true;
  auto loss = [&](bool record) {
    num::Tape t;
    auto p = model.bind(t);
    BaselineEstimator b(0.9, baseline_value);
    Rng rng(seed);
    auto pg = policy_gradient_loss(t, p, model, batch, b, rng, 8);
    std::vector<PredictionPath> paths;
    for (const auto& s : pg.samples) paths.push_back(s.nodes);
    if (first.empty()) first = paths;
    same_paths = same_paths && paths == first;
    if (record) t.backward(pg.surrogate);
    return t.value(pg.surrogate).item();
  };
  double worst = gradient_check(model.parameters(), loss);
  return same_paths ? worst : std::numeric_limits<double>::infinity();
}

inline std::string temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("pathcast-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return dir.string();
}

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Runs the CLI with `args`; stdout goes to `out`, stderr to `out`.err.
/// Returns the exit status, or -1 when the process did not exit normally.
inline int run_cli(const std::string& args, const std::string& out) {
  const std::string cmd = std::string(PATHCAST_CLI) + " " + args + " > '" + out + "' 2> '" + out + ".err'";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace pathcast::testing
