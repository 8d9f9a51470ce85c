// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <map>
#include <mutex>
#include <set>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "pathcast/labelgraph.hpp"

namespace pathcast {

/// Root-to-label node sequence. The decoder's EOP sentinel is not part of it.
using PredictionPath = std::vector<NodeId>;

struct PathSet {
  NodeId label = 0;
  std::vector<PredictionPath> deterministic;
  std::vector<PredictionPath> nondeterministic;
};

struct CertainNodeSet {
  NodeId label = 0;
  std::set<NodeId> members;
};

namespace detail {

inline void require_label(const LabelGraph& graph, NodeId label) {
  if (!graph.is_label(label)) {
    std::string name = label < graph.node_count() ? graph.node(label).name : std::to_string(label);
    throw Error(ErrorCode::NotALabelNode, "expected a label node", {name});
  }
}

}  // namespace detail

/// All simple root->label paths in lexicographic order of their id sequences.
/// The walk only descends into ancestors of the label; visiting children in
/// ascending id order yields the lexicographic order directly (no complete
/// path can be a prefix of another, both end at the label).
inline std::vector<PredictionPath> enumerate_paths(const LabelGraph& graph, NodeId label) {
  detail::require_label(graph, label);
  const std::size_t n = graph.node_count();
  std::vector<bool> reaches(n, false);
  {
    std::vector<NodeId> stack{label};
    reaches[label] = true;
    while (!stack.empty()) {
      NodeId v = stack.back();
      stack.pop_back();
      for (NodeId p : graph.parents(v))
        if (!reaches[p]) {
          reaches[p] = true;
          stack.push_back(p);
        }
    }
  }
  std::vector<PredictionPath> out;
  if (!reaches[graph.root()]) return out;
  PredictionPath current{graph.root()};
  std::vector<bool> on_path(n, false);
  on_path[graph.root()] = true;
  auto dfs = [&](auto&& self, NodeId v) -> void {
    if (v == label) {
      out.push_back(current);
      return;
    }
    for (NodeId c : graph.children(v)) {
      if (!reaches[c] || on_path[c]) continue;
      on_path[c] = true;
      current.push_back(c);
      self(self, c);
      current.pop_back();
      on_path[c] = false;
    }
  };
  dfs(dfs, graph.root());
  return out;
}

/// True iff `u` and `w` sit in the same (explicit or implicit) group.
inline bool are_competing(const LabelGraph& graph, NodeId u, NodeId w) {
  if (u == w) throw std::invalid_argument("are_competing: a node does not compete with itself");
  auto gu = graph.group_of(u);
  auto gw = graph.group_of(w);
  return gu && gw && *gu == *gw;
}

/// Splits `paths` (all groundtruth paths of one label) into deterministic and
/// nondeterministic ones. A path is nondeterministic when some other path of
/// the label holds a competitor of one of its nodes.
inline PathSet classify(const LabelGraph& graph, NodeId label, const std::vector<PredictionPath>& paths) {
  // For every grouped node: how many of the paths contain it.
  std::map<NodeId, std::size_t> occurrences;
  std::map<std::size_t, std::set<NodeId>> group_members_seen;
  for (const auto& p : paths)
    for (NodeId v : p)
      if (auto g = graph.group_of(v)) {
        ++occurrences[v];
        group_members_seen[*g].insert(v);
      }

  PathSet out;
  out.label = label;
  for (const auto& p : paths) {
    std::set<NodeId> own(p.begin(), p.end());
    bool nondeterministic = false;
    for (NodeId u : p) {
      auto g = graph.group_of(u);
      if (!g) continue;
      for (NodeId w : group_members_seen[*g]) {
        if (w == u) continue;
        // another path must carry w; p itself counts only once
        std::size_t elsewhere = occurrences[w] - (own.count(w) ? 1 : 0);
        if (elsewhere > 0) {
          nondeterministic = true;
          break;
        }
      }
      if (nondeterministic) break;
    }
    (nondeterministic ? out.nondeterministic : out.deterministic).push_back(p);
  }
  return out;
}

inline PathSet classify_paths(const LabelGraph& graph, NodeId label) {
  return classify(graph, label, enumerate_paths(graph, label));
}

/// Intersection of the node sets of all root->label paths, plus the label.
inline CertainNodeSet certain_nodes(const LabelGraph& graph, NodeId label) {
  auto paths = enumerate_paths(graph, label);
  CertainNodeSet out;
  out.label = label;
  if (!paths.empty()) {
    out.members = std::set<NodeId>(paths.front().begin(), paths.front().end());
    for (std::size_t i = 1; i < paths.size(); ++i) {
      std::set<NodeId> next;
      std::set<NodeId> p(paths[i].begin(), paths[i].end());
      std::set_intersection(out.members.begin(), out.members.end(), p.begin(), p.end(),
                            std::inserter(next, next.end()));
      out.members = std::move(next);
    }
  }
  out.members.insert(label);
  return out;
}

/// Groups whose choice is left open for `label`: at least two of their
/// members appear across the label's groundtruth paths.
inline std::set<std::size_t> ambiguous_groups(const LabelGraph& graph, NodeId label) {
  std::map<std::size_t, std::set<NodeId>> seen;
  for (const auto& p : enumerate_paths(graph, label))
    for (NodeId v : p)
      if (auto g = graph.group_of(v)) seen[*g].insert(v);
  std::set<std::size_t> out;
  for (const auto& [g, members] : seen)
    if (members.size() > 1) out.insert(g);
  return out;
}

/// Per-label cache of path sets. Fill it before sharing; after warm-up the
/// lookups are read-only, and misses are serialized by a mutex.
class PathCache {
 public:
  explicit PathCache(const LabelGraph& graph) : graph_(&graph) {}

  struct Entry {
    PathSet paths;
    CertainNodeSet certain;
  };

  const Entry& get(NodeId label) const {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(label);
    if (it == entries_.end()) {
      Entry e{classify_paths(*graph_, label), certain_nodes(*graph_, label)};
      it = entries_.emplace(label, std::move(e)).first;
    }
    return it->second;
  }

 private:
  const LabelGraph* graph_;
  mutable std::mutex mutex_;
  mutable std::map<NodeId, Entry> entries_;
};

inline nlohmann::json path_set_json(const LabelGraph& graph, const PathSet& set, const CertainNodeSet& certain) {
  auto names = [&](const PredictionPath& p) {
    std::vector<std::string> out;
    for (NodeId v : p) out.push_back(graph.node(v).name);
    return out;
  };
  nlohmann::json det = nlohmann::json::array(), nondet = nlohmann::json::array();
  for (const auto& p : set.deterministic) det.push_back(names(p));
  for (const auto& p : set.nondeterministic) nondet.push_back(names(p));
  std::vector<std::string> cert;
  for (NodeId v : certain.members) cert.push_back(graph.node(v).name);
  return nlohmann::json{{"deterministic", det}, {"nondeterministic", nondet}, {"certain", cert}};
}

}  // namespace pathcast
