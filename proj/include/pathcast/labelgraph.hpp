// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pathcast/error.hpp"

namespace pathcast {

using NodeId = std::size_t;

enum class NodeKind { Root, Label, Augmented };

inline std::string_view to_string(NodeKind kind) {
  switch (kind) {
    case NodeKind::Root: return "root";
    case NodeKind::Label: return "label";
    case NodeKind::Augmented: return "augmented";
  }
  return "?";
}

/// Lowercase ASCII with runs of whitespace mapped to single hyphens.
inline std::string canonical_name(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  bool pending_hyphen = false;
  for (char ch : raw) {
    auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      pending_hyphen = !out.empty();
      continue;
    }
    if (pending_hyphen) {
      out.push_back('-');
      pending_hyphen = false;
    }
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

struct GraphNode {
  NodeId id = 0;
  std::string name;
  NodeKind kind = NodeKind::Label;
  std::set<std::string> tags;
};

struct Edge {
  NodeId parent = 0;
  NodeId child = 0;
  friend auto operator<=>(const Edge&, const Edge&) = default;
};

/// A set of mutually exclusive (competing) nodes. Implicit groups are derived
/// from ungrouped siblings and are never written to graph files.
struct Group {
  std::string name;
  std::vector<NodeId> members;  // sorted ascending
  bool implicit = false;
};

struct Violation {
  ErrorCode code;
  std::string message;
  std::vector<std::string> names;
};

struct GraphStats {
  std::size_t label_count = 0;
  std::size_t augmented_count = 0;
  std::size_t edge_count = 0;
  std::size_t group_count = 0;
  std::size_t max_depth = 0;
  friend bool operator==(const GraphStats&, const GraphStats&) = default;
};

inline void to_json(nlohmann::json& j, const GraphStats& s) {
  j = nlohmann::json{{"label_count", s.label_count},
                     {"augmented_count", s.augmented_count},
                     {"edge_count", s.edge_count},
                     {"group_count", s.group_count},
                     {"max_depth", s.max_depth}};
}

/// Rooted DAG over dataset labels and augmented nodes. Immutable once built
/// through `LabelGraph::build`; `LabelGraph::unchecked` exists so that
/// `validate` can inspect arbitrary, possibly broken, inputs.
class LabelGraph {
 public:
  LabelGraph() = default;

  /// Assembles adjacency without checking any invariant. Edges that point
  /// outside the node range are kept in `edges()` but not in adjacency.
  static LabelGraph unchecked(std::vector<GraphNode> nodes, std::vector<Edge> edges,
                              std::vector<Group> groups) {
    LabelGraph g;
    g.nodes_ = std::move(nodes);
    g.edges_ = std::move(edges);
    std::sort(g.edges_.begin(), g.edges_.end());
    g.edges_.erase(std::unique(g.edges_.begin(), g.edges_.end()), g.edges_.end());
    g.groups_ = std::move(groups);
    for (auto& grp : g.groups_) std::sort(grp.members.begin(), grp.members.end());
    g.index();
    return g;
  }

  /// Validates and materializes implicit groups. Throws the first violation.
  static LabelGraph build(std::vector<GraphNode> nodes, std::vector<Edge> edges,
                          std::vector<Group> explicit_groups);

  std::size_t node_count() const noexcept { return nodes_.size(); }
  NodeId root() const noexcept { return 0; }
  const GraphNode& node(NodeId id) const { return nodes_.at(id); }
  const std::vector<GraphNode>& nodes() const noexcept { return nodes_; }
  const std::vector<Edge>& edges() const noexcept { return edges_; }
  const std::vector<Group>& groups() const noexcept { return groups_; }

  std::span<const NodeId> children(NodeId id) const { return children_.at(id); }
  std::span<const NodeId> parents(NodeId id) const { return parents_.at(id); }

  bool is_label(NodeId id) const { return id < nodes_.size() && nodes_[id].kind == NodeKind::Label; }
  bool is_leaf(NodeId id) const { return children_.at(id).empty(); }
  bool has_edge(NodeId parent, NodeId child) const {
    if (parent >= children_.size()) return false;
    const auto& c = children_[parent];
    return std::binary_search(c.begin(), c.end(), child);
  }

  std::optional<NodeId> find(std::string_view name) const {
    auto it = by_name_.find(std::string(name));
    if (it == by_name_.end()) return std::nullopt;
    return it->second;
  }

  NodeId id_of(std::string_view name) const {
    auto id = find(name);
    if (!id) throw Error(ErrorCode::UnknownName, "no such node", {std::string(name)});
    return *id;
  }

  /// Index into `groups()` of the group containing `id`, if any.
  std::optional<std::size_t> group_of(NodeId id) const {
    if (id >= group_index_.size() || group_index_[id] < 0) return std::nullopt;
    return static_cast<std::size_t>(group_index_[id]);
  }

  /// Derives implicit groups: ungrouped Label/Augmented siblings are joined
  /// transitively (shared parents chain sibling sets together). Running it on
  /// a graph that already carries its implicit groups changes nothing.
  void materialize_implicit_groups();

 private:
  friend std::vector<Violation> validate(const LabelGraph& graph);

  void index() {
    const std::size_t n = nodes_.size();
    children_.assign(n, {});
    parents_.assign(n, {});
    for (const auto& e : edges_) {
      if (e.parent >= n || e.child >= n) continue;
      children_[e.parent].push_back(e.child);
      parents_[e.child].push_back(e.parent);
    }
    for (auto& c : children_) std::sort(c.begin(), c.end());
    for (auto& p : parents_) std::sort(p.begin(), p.end());
    by_name_.clear();
    for (const auto& node : nodes_) by_name_.emplace(node.name, node.id);
    group_index_.assign(n, -1);
    for (std::size_t gi = 0; gi < groups_.size(); ++gi)
      for (NodeId m : groups_[gi].members)
        if (m < n && group_index_[m] < 0) group_index_[m] = static_cast<long>(gi);
  }

  std::vector<GraphNode> nodes_;
  std::vector<Edge> edges_;
  std::vector<Group> groups_;
  std::vector<std::vector<NodeId>> children_;
  std::vector<std::vector<NodeId>> parents_;
  std::unordered_map<std::string, NodeId> by_name_;
  std::vector<long> group_index_;
};

/// Returns every invariant violation; empty iff the graph is valid.
inline std::vector<Violation> validate(const LabelGraph& graph) {
  std::vector<Violation> out;
  const auto& nodes = graph.nodes_;
  const std::size_t n = nodes.size();
  if (n == 0) {
    out.push_back({ErrorCode::InvalidGraph, "graph has no nodes", {}});
    return out;
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (nodes[i].id != i)
      out.push_back({ErrorCode::InvalidGraph, "node ids must be dense and ordered", {nodes[i].name}});
  }
  std::size_t roots = 0;
  for (const auto& node : nodes) {
    if (node.kind == NodeKind::Root) ++roots;
    if (node.name.empty() || canonical_name(node.name) != node.name)
      out.push_back({ErrorCode::InvalidGraph, "node name is not canonical", {node.name}});
    if (node.kind == NodeKind::Label && node.tags.empty())
      out.push_back({ErrorCode::InvalidGraph, "label node without dataset tag", {node.name}});
    if (node.kind != NodeKind::Label && !node.tags.empty())
      out.push_back({ErrorCode::InvalidGraph, "only label nodes carry dataset tags", {node.name}});
  }
  if (nodes[0].kind != NodeKind::Root || roots != 1)
    out.push_back({ErrorCode::InvalidGraph, "node 0 must be the single root", {nodes[0].name}});

  {
    std::map<std::string, std::size_t> seen;
    for (const auto& node : nodes) ++seen[node.name];
    for (const auto& [name, count] : seen)
      if (count > 1) out.push_back({ErrorCode::DuplicateName, "node name used more than once", {name}});
  }

  for (const auto& e : graph.edges_) {
    if (e.parent >= n || e.child >= n) {
      out.push_back({ErrorCode::UnknownName, "edge references a missing node id",
                     {std::to_string(e.parent) + "->" + std::to_string(e.child)}});
    } else if (e.parent == e.child) {
      out.push_back({ErrorCode::CycleDetected, "self loop", {nodes[e.parent].name}});
    }
  }
  if (!graph.parents_[0].empty())
    out.push_back({ErrorCode::InvalidGraph, "root has incoming edges", {nodes[0].name}});

  // Kahn's algorithm; whatever is left over sits on (or behind) a cycle.
  {
    std::vector<std::size_t> indegree(n, 0);
    for (std::size_t v = 0; v < n; ++v)
      for (NodeId c : graph.children_[v])
        if (c != v) ++indegree[c];
    std::vector<NodeId> queue;
    for (std::size_t v = 0; v < n; ++v)
      if (indegree[v] == 0) queue.push_back(v);
    std::size_t visited = 0;
    while (!queue.empty()) {
      NodeId v = queue.back();
      queue.pop_back();
      ++visited;
      for (NodeId c : graph.children_[v])
        if (c != v && --indegree[c] == 0) queue.push_back(c);
    }
    if (visited != n) {
      std::vector<std::string> names;
      for (std::size_t v = 0; v < n; ++v)
        if (indegree[v] > 0) names.push_back(nodes[v].name);
      out.push_back({ErrorCode::CycleDetected, "graph contains a cycle", std::move(names)});
    }
  }

  {
    std::vector<bool> reached(n, false);
    std::vector<NodeId> stack{0};
    reached[0] = true;
    while (!stack.empty()) {
      NodeId v = stack.back();
      stack.pop_back();
      for (NodeId c : graph.children_[v])
        if (!reached[c]) {
          reached[c] = true;
          stack.push_back(c);
        }
    }
    std::vector<std::string> names;
    for (std::size_t v = 0; v < n; ++v)
      if (!reached[v]) names.push_back(nodes[v].name);
    if (!names.empty())
      out.push_back({ErrorCode::UnreachableNode, "nodes not reachable from root", std::move(names)});
  }

  {
    std::vector<int> membership(n, 0);
    std::set<std::string> group_names;
    for (const auto& grp : graph.groups_) {
      if (!group_names.insert(grp.name).second)
        out.push_back({ErrorCode::DuplicateName, "group name used more than once", {grp.name}});
      if (grp.members.empty()) {
        out.push_back({ErrorCode::InvalidGraph, "empty group", {grp.name}});
        continue;
      }
      bool in_range = true;
      for (NodeId m : grp.members) {
        if (m >= n) {
          out.push_back({ErrorCode::UnknownName, "group member id out of range",
                         {grp.name, std::to_string(m)}});
          in_range = false;
          continue;
        }
        if (m == 0) out.push_back({ErrorCode::InvalidGraph, "root cannot belong to a group", {grp.name}});
        ++membership[m];
      }
      if (!in_range || grp.implicit) continue;
      // members must share a parent
      std::vector<NodeId> common(graph.parents_[grp.members.front()].begin(),
                                 graph.parents_[grp.members.front()].end());
      for (NodeId m : grp.members) {
        std::vector<NodeId> next;
        const auto& p = graph.parents_[m];
        std::set_intersection(common.begin(), common.end(), p.begin(), p.end(), std::back_inserter(next));
        common = std::move(next);
      }
      if (common.empty())
        out.push_back({ErrorCode::InvalidGraph, "group members share no common parent", {grp.name}});
    }
    std::vector<std::string> dup;
    for (std::size_t v = 0; v < n; ++v)
      if (membership[v] > 1) dup.push_back(nodes[v].name);
    if (!dup.empty())
      out.push_back({ErrorCode::DuplicateGroupMembership, "node belongs to more than one group", std::move(dup)});
  }
  return out;
}

inline void LabelGraph::materialize_implicit_groups() {
  const std::size_t n = nodes_.size();
  std::vector<NodeId> parent_of(n);
  std::iota(parent_of.begin(), parent_of.end(), NodeId{0});
  auto find = [&](NodeId v) {
    while (parent_of[v] != v) {
      parent_of[v] = parent_of[parent_of[v]];
      v = parent_of[v];
    }
    return v;
  };
  auto ungrouped = [&](NodeId v) { return v != 0 && group_index_[v] < 0; };

  // The first parent (lowest id) that links a component names it.
  std::vector<std::optional<NodeId>> namer(n);
  for (NodeId p = 0; p < n; ++p) {
    std::optional<NodeId> first;
    for (NodeId c : children_[p]) {
      if (!ungrouped(c)) continue;
      if (!first) {
        first = c;
        continue;
      }
      NodeId a = find(*first), b = find(c);
      if (a != b) parent_of[std::max(a, b)] = std::min(a, b);
    }
  }
  std::map<NodeId, std::vector<NodeId>> components;
  for (NodeId v = 0; v < n; ++v)
    if (ungrouped(v)) components[find(v)].push_back(v);
  for (NodeId p = 0; p < n; ++p) {
    std::size_t count = 0;
    for (NodeId c : children_[p])
      if (ungrouped(c)) ++count;
    if (count < 2) continue;
    for (NodeId c : children_[p])
      if (ungrouped(c) && !namer[find(c)]) namer[find(c)] = p;
  }
  for (auto& [rep, members] : components) {
    if (members.size() < 2 || !namer[rep]) continue;
    groups_.push_back(Group{"implicit:" + nodes_[*namer[rep]].name, members, true});
  }
  index();
}

inline LabelGraph LabelGraph::build(std::vector<GraphNode> nodes, std::vector<Edge> edges,
                                    std::vector<Group> explicit_groups) {
  for (auto& g : explicit_groups) g.implicit = false;
  LabelGraph g = unchecked(std::move(nodes), std::move(edges), std::move(explicit_groups));
  auto violations = validate(g);
  if (!violations.empty()) {
    const auto& v = violations.front();
    throw Error(v.code, v.message, v.names);
  }
  g.materialize_implicit_groups();
  return g;
}

struct LabelSet {
  std::string dataset;
  std::vector<std::string> labels;
};

struct AugmentedNodeSpec {
  std::string name;
  std::vector<std::string> parents;
};

struct EdgeSpec {
  std::string parent;
  std::string child;
};

struct GroupSpec {
  std::string name;
  std::vector<std::string> members;
};

/// Builds a label graph by name: root, then the union of all dataset labels
/// (labels shared across datasets merge into one node), then augmented
/// nodes, then the extra edges and the competing groups.
inline LabelGraph build_graph(std::string_view root_name, const std::vector<LabelSet>& label_sets,
                              const std::vector<AugmentedNodeSpec>& augmented,
                              const std::vector<EdgeSpec>& edge_spec,
                              const std::vector<GroupSpec>& group_spec) {
  std::vector<GraphNode> nodes;
  std::unordered_map<std::string, NodeId> ids;
  auto add = [&](const std::string& name, NodeKind kind) {
    NodeId id = nodes.size();
    nodes.push_back(GraphNode{id, name, kind, {}});
    ids.emplace(name, id);
    return id;
  };
  auto lookup = [&](const std::string& raw) {
    auto it = ids.find(canonical_name(raw));
    if (it == ids.end()) throw Error(ErrorCode::UnknownName, "name not defined in the graph", {raw});
    return it->second;
  };

  add(canonical_name(root_name), NodeKind::Root);
  for (const auto& set : label_sets) {
    std::set<std::string> sorted;
    for (const auto& l : set.labels) sorted.insert(canonical_name(l));
    for (const auto& name : sorted) {
      auto it = ids.find(name);
      NodeId id = it == ids.end() ? add(name, NodeKind::Label) : it->second;
      if (nodes[id].kind != NodeKind::Label)
        throw Error(ErrorCode::DuplicateName, "label collides with the root name", {name});
      nodes[id].tags.insert(canonical_name(set.dataset));
    }
  }
  for (const auto& aug : augmented) {
    auto name = canonical_name(aug.name);
    if (ids.count(name)) throw Error(ErrorCode::DuplicateName, "augmented node name already used", {name});
    add(name, NodeKind::Augmented);
  }

  std::vector<Edge> edges;
  for (const auto& aug : augmented) {
    NodeId child = lookup(aug.name);
    for (const auto& p : aug.parents) edges.push_back({lookup(p), child});
  }
  for (const auto& e : edge_spec) edges.push_back({lookup(e.parent), lookup(e.child)});

  std::vector<Group> groups;
  for (const auto& gs : group_spec) {
    Group grp{canonical_name(gs.name), {}, false};
    for (const auto& m : gs.members) grp.members.push_back(lookup(m));
    groups.push_back(std::move(grp));
  }
  return LabelGraph::build(std::move(nodes), std::move(edges), std::move(groups));
}

inline GraphStats stats(const LabelGraph& graph) {
  GraphStats s;
  for (const auto& node : graph.nodes()) {
    if (node.kind == NodeKind::Label) ++s.label_count;
    if (node.kind == NodeKind::Augmented) ++s.augmented_count;
  }
  s.edge_count = graph.edges().size();
  s.group_count = graph.groups().size();
  // longest root->leaf path, in edges; ids are not topologically ordered so
  // walk a Kahn order
  const std::size_t n = graph.node_count();
  std::vector<std::size_t> indegree(n, 0), depth(n, 0);
  for (const auto& e : graph.edges()) ++indegree[e.child];
  std::vector<NodeId> queue{graph.root()};
  while (!queue.empty()) {
    NodeId v = queue.back();
    queue.pop_back();
    for (NodeId c : graph.children(v)) {
      depth[c] = std::max(depth[c], depth[v] + 1);
      if (--indegree[c] == 0) queue.push_back(c);
    }
  }
  for (std::size_t d : depth) s.max_depth = std::max(s.max_depth, d);
  return s;
}

// ---------------------------------------------------------------------------
// Graph file format

inline nlohmann::json to_json(const LabelGraph& graph) {
  using nlohmann::json;
  json nodes = json::array();
  for (const auto& node : graph.nodes()) {
    nodes.push_back(json{{"id", node.id},
                         {"name", node.name},
                         {"kind", std::string(to_string(node.kind))},
                         {"tags", std::vector<std::string>(node.tags.begin(), node.tags.end())}});
  }
  json edges = json::array();
  for (const auto& e : graph.edges()) edges.push_back(json::array({e.parent, e.child}));
  std::vector<const Group*> explicit_groups;
  for (const auto& g : graph.groups())
    if (!g.implicit) explicit_groups.push_back(&g);
  std::sort(explicit_groups.begin(), explicit_groups.end(),
            [](const Group* a, const Group* b) { return a->name < b->name; });
  json groups = json::array();
  for (const Group* g : explicit_groups) groups.push_back(json{{"name", g->name}, {"members", g->members}});
  return json{{"nodes", nodes}, {"edges", edges}, {"groups", groups}};
}

inline std::string serialize(const LabelGraph& graph) { return to_json(graph).dump(2) + "\n"; }

namespace detail {

inline NodeKind parse_kind(const std::string& s) {
  if (s == "root") return NodeKind::Root;
  if (s == "label") return NodeKind::Label;
  if (s == "augmented") return NodeKind::Augmented;
  throw Error(ErrorCode::FormatError, "unknown node kind", {s});
}

inline void require_keys(const nlohmann::json& j, std::initializer_list<const char*> keys, const char* what) {
  if (!j.is_object()) throw Error(ErrorCode::FormatError, std::string(what) + " must be a JSON object");
  for (const char* k : keys)
    if (!j.contains(k)) throw Error(ErrorCode::FormatError, std::string(what) + " is missing a key", {k});
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (const char* key : keys) known = known || k == key;
    if (!known) throw Error(ErrorCode::FormatError, std::string(what) + " has an unexpected key", {k});
  }
}

}  // namespace detail

/// Parses without validating; pair with `validate` or use `graph_from_json`.
inline LabelGraph unchecked_graph_from_json(const nlohmann::json& j) {
  try {
    detail::require_keys(j, {"nodes", "edges", "groups"}, "graph");
    std::vector<GraphNode> nodes;
    for (const auto& jn : j.at("nodes")) {
      detail::require_keys(jn, {"id", "name", "kind", "tags"}, "node");
      GraphNode node;
      node.id = jn.at("id").get<NodeId>();
      node.name = jn.at("name").get<std::string>();
      node.kind = detail::parse_kind(jn.at("kind").get<std::string>());
      for (const auto& t : jn.at("tags")) node.tags.insert(t.get<std::string>());
      nodes.push_back(std::move(node));
    }
    std::sort(nodes.begin(), nodes.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    std::vector<Edge> edges;
    for (const auto& je : j.at("edges")) {
      if (!je.is_array() || je.size() != 2) throw Error(ErrorCode::FormatError, "edge must be [parent, child]");
      edges.push_back({je[0].get<NodeId>(), je[1].get<NodeId>()});
    }
    std::vector<Group> groups;
    for (const auto& jg : j.at("groups")) {
      detail::require_keys(jg, {"name", "members"}, "group");
      groups.push_back(Group{jg.at("name").get<std::string>(), jg.at("members").get<std::vector<NodeId>>(), false});
    }
    return LabelGraph::unchecked(std::move(nodes), std::move(edges), std::move(groups));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, e.what());
  }
}

inline LabelGraph graph_from_json(const nlohmann::json& j) {
  LabelGraph raw = unchecked_graph_from_json(j);
  return LabelGraph::build(raw.nodes(), raw.edges(), raw.groups());
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open file", {path});
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, e.what(), {path});
  }
}

inline LabelGraph load_graph(const std::string& path) { return graph_from_json(read_json_file(path)); }

inline void save_graph(const LabelGraph& graph, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write file", {path});
  out << serialize(graph);
}

}  // namespace pathcast
