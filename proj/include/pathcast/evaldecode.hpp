// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "pathcast/dataset.hpp"
#include "pathcast/model.hpp"
#include "pathcast/pathalg.hpp"

namespace pathcast {

enum class Termination { Eop, MaxLen, DeadEnd };

inline std::string_view to_string(Termination t) {
  switch (t) {
    case Termination::Eop: return "eop";
    case Termination::MaxLen: return "max_len";
    case Termination::DeadEnd: return "dead_end";
  }
  return "?";
}

struct DecodedResult {
  std::vector<TokenId> path;  // emitted tokens, EOP included when emitted
  Termination terminated_by = Termination::MaxLen;
  std::optional<NodeId> predicted_label;
  std::vector<double> step_probs;

  /// Emitted graph nodes, without EOP.
  PredictionPath nodes(const Vocabulary& vocab) const {
    PredictionPath out;
    for (TokenId t : path)
      if (vocab.is_node(t)) out.push_back(t);
    return out;
  }
};

/// Last Label-kind node on the path.
inline std::optional<NodeId> extract_label(const LabelGraph& graph, const Vocabulary& vocab,
                                           const DecodedResult& result) {
  std::optional<NodeId> out;
  for (TokenId t : result.path)
    if (vocab.is_node(t) && graph.is_label(t)) out = t;
  return out;
}

/// Greedy decoding: at each step the candidate with the highest block
/// probability anywhere in the candidate set, lowest token id on ties.
/// Stops on EOP, after max_len tokens, or at a node without successors.
inline DecodedResult greedy_decode(const LabelPathModel& model, std::span<const double> x, std::size_t max_len) {
  if (max_len < 2) throw std::invalid_argument("greedy_decode needs max_len >= 2");
  num::Tape t;
  auto p = model.bind_frozen(t);
  num::Var f = model.encode(t, p, x);
  const Vocabulary& vocab = model.vocab();
  TokenId prev = vocab.start();
  DecodedResult r;
  for (;;) {
    if (r.path.size() >= max_len) {
      r.terminated_by = Termination::MaxLen;
      break;
    }
    if (model.candidates(prev).tokens.empty()) {
      r.terminated_by = Termination::DeadEnd;
      break;
    }
    auto s = model.step(t, p, f, prev);
    auto d = LabelPathModel::distribution(t, s);
    std::size_t pos = argmax_candidate(d.probs);
    TokenId tok = d.candidates[pos];
    r.path.push_back(tok);
    r.step_probs.push_back(d.probs[pos]);
    if (tok == vocab.eop()) {
      r.terminated_by = Termination::Eop;
      break;
    }
    f = s.state;
    prev = tok;
  }
  r.predicted_label = extract_label(model.graph(), vocab, r);
  return r;
}

struct ClassCounts {
  std::size_t support = 0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;

  double precision() const { return tp + fp ? static_cast<double>(tp) / (tp + fp) : 0.0; }
  double recall() const { return tp + fn ? static_cast<double>(tp) / (tp + fn) : 0.0; }
  double f1() const {
    const std::size_t d = 2 * tp + fp + fn;
    return d ? 2.0 * tp / static_cast<double>(d) : 0.0;
  }
};

struct MetricsReport {
  std::size_t samples = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::optional<double> path_correctness;
  std::size_t audited = 0;
  std::map<std::string, ClassCounts> per_class;  // keyed by gold or predicted label name
};

inline nlohmann::json to_json(const MetricsReport& m) {
  nlohmann::json classes = nlohmann::json::object();
  for (const auto& [name, c] : m.per_class)
    classes[name] = {{"support", c.support}, {"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"f1", c.f1()}};
  nlohmann::json j{{"samples", m.samples},
                   {"correct", m.correct},
                   {"accuracy", m.accuracy},
                   {"macro_f1", m.macro_f1},
                   {"per_class", classes}};
  if (m.path_correctness) {
    j["path_correctness"] = *m.path_correctness;
    j["audited"] = m.audited;
  }
  return j;
}

/// Accuracy and macro-F1 from (gold, predicted) pairs. A missing prediction
/// counts against the gold class only. Macro-F1 averages over gold classes.
inline MetricsReport score_predictions(const std::vector<std::string>& gold,
                                       const std::vector<std::optional<std::string>>& pred) {
  if (gold.empty()) throw Error(ErrorCode::EmptyDataset, "nothing to evaluate");
  MetricsReport m;
  m.samples = gold.size();
  for (std::size_t i = 0; i < gold.size(); ++i) {
    auto& g = m.per_class[gold[i]];
    ++g.support;
    if (pred[i] && *pred[i] == gold[i]) {
      ++g.tp;
      ++m.correct;
    } else {
      ++g.fn;
      if (pred[i]) ++m.per_class[*pred[i]].fp;
    }
  }
  m.accuracy = static_cast<double>(m.correct) / static_cast<double>(m.samples);
  std::size_t classes = 0;
  double f1_sum = 0.0;
  for (const auto& [name, c] : m.per_class) {
    if (c.support == 0) continue;
    f1_sum += c.f1();
    ++classes;
  }
  m.macro_f1 = f1_sum / static_cast<double>(classes);
  return m;
}

/// Decodes every sample and scores label extraction against the gold label.
inline MetricsReport evaluate(const LabelPathModel& model, const std::vector<Sample>& data, std::size_t max_len,
                              std::vector<DecodedResult>* decoded_out = nullptr) {
  if (data.empty()) throw Error(ErrorCode::EmptyDataset, "nothing to evaluate");
  resolve_labels(model.graph(), data);
  std::vector<std::string> gold;
  std::vector<std::optional<std::string>> pred;
  for (const Sample& s : data) {
    DecodedResult r = greedy_decode(model, s.x, max_len);
    gold.push_back(s.label);
    pred.push_back(r.predicted_label ? std::optional(model.graph().node(*r.predicted_label).name) : std::nullopt);
    if (decoded_out) decoded_out->push_back(std::move(r));
  }
  return score_predictions(gold, pred);
}

struct AuditResult {
  std::size_t audited = 0;
  std::size_t matched = 0;
  double fraction() const { return audited ? static_cast<double>(matched) / audited : 0.0; }
};

/// For each decoded path and each group left open by the sample's gold label,
/// compares the group member on the path with the instance attribute under the
/// group's name. Group choices the label pins down are not audited.
inline AuditResult audit_paths(const LabelGraph& graph, const Vocabulary& vocab, const std::vector<Sample>& data,
                               const std::vector<DecodedResult>& decoded) {
  AuditResult a;
  std::map<NodeId, std::set<std::size_t>> open;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Sample& s = data[i];
    NodeId gold = graph.id_of(s.label);
    auto it = open.find(gold);
    if (it == open.end()) it = open.emplace(gold, ambiguous_groups(graph, gold)).first;
    for (NodeId v : decoded[i].nodes(vocab)) {
      auto g = graph.group_of(v);
      if (!g || !it->second.count(*g)) continue;
      auto attr = s.attrs.find(graph.groups()[*g].name);
      if (attr == s.attrs.end()) continue;
      ++a.audited;
      if (attr->second == graph.node(v).name) ++a.matched;
    }
  }
  return a;
}

inline double audit_nondeterministic(const LabelPathModel& model, const std::vector<Sample>& data,
                                     std::size_t max_len) {
  std::vector<DecodedResult> decoded;
  for (const Sample& s : data) decoded.push_back(greedy_decode(model, s.x, max_len));
  auto a = audit_paths(model.graph(), model.vocab(), data, decoded);
  if (a.audited == 0) throw Error(ErrorCode::NoAuditableSamples, "no decoded path crosses an open group");
  return a.fraction();
}

/// evaluate() plus, optionally, the audit, both from a single decoding pass.
inline MetricsReport evaluate_with_audit(const LabelPathModel& model, const std::vector<Sample>& data,
                                         std::size_t max_len, bool audit,
                                         std::vector<DecodedResult>* decoded_out = nullptr) {
  std::vector<DecodedResult> decoded;
  MetricsReport m = evaluate(model, data, max_len, &decoded);
  if (audit) {
    auto a = audit_paths(model.graph(), model.vocab(), data, decoded);
    if (a.audited == 0) throw Error(ErrorCode::NoAuditableSamples, "no decoded path crosses an open group");
    m.path_correctness = a.fraction();
    m.audited = a.audited;
  }
  if (decoded_out) *decoded_out = std::move(decoded);
  return m;
}

inline nlohmann::json decoded_json(const LabelPathModel& model, std::size_t input_id, const DecodedResult& r,
                                   const std::string& gold) {
  std::vector<std::string> names;
  for (TokenId t : r.path) names.push_back(model.token_name(t));
  nlohmann::json pred = r.predicted_label ? nlohmann::json(model.graph().node(*r.predicted_label).name)
                                          : nlohmann::json(nullptr);
  return nlohmann::json{{"input_id", input_id},
                        {"path", names},
                        {"terminated_by", std::string(to_string(r.terminated_by))},
                        {"pred", pred},
                        {"gold", gold}};
}

inline void write_decoded(const std::string& path, const LabelPathModel& model, const std::vector<Sample>& data,
                          const std::vector<DecodedResult>& decoded) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write path dump", {path});
  for (std::size_t i = 0; i < decoded.size(); ++i) out << decoded_json(model, i, decoded[i], data[i].label).dump() << "\n";
}

}  // namespace pathcast
