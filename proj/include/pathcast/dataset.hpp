// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pathcast/error.hpp"
#include "pathcast/labelgraph.hpp"

namespace pathcast {

struct Sample {
  std::vector<double> x;
  std::string label;
  /// group name -> member name; only present in audited splits
  std::map<std::string, std::string> attrs;

  friend bool operator==(const Sample&, const Sample&) = default;
};

enum class Granularity { Fine, Coarse };

struct DatasetSpec {
  std::string name;
  Granularity granularity = Granularity::Fine;
  std::vector<Sample> samples;

  /// Number of distinct labels.
  std::size_t class_count() const {
    std::set<std::string> labels;
    for (const auto& s : samples) labels.insert(s.label);
    return labels.size();
  }
};

inline nlohmann::json sample_json(const Sample& s) {
  nlohmann::json j{{"x", s.x}, {"label", s.label}};
  if (!s.attrs.empty()) j["attrs"] = s.attrs;
  return j;
}

inline Sample sample_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("x") || !j.contains("label"))
    throw Error(ErrorCode::FormatError, "sample needs \"x\" and \"label\"");
  for (const auto& [k, v] : j.items())
    if (k != "x" && k != "label" && k != "attrs") throw Error(ErrorCode::FormatError, "unexpected sample key", {k});
  Sample s;
  s.x = j.at("x").get<std::vector<double>>();
  s.label = j.at("label").get<std::string>();
  if (j.contains("attrs")) s.attrs = j.at("attrs").get<std::map<std::string, std::string>>();
  return s;
}

inline std::vector<Sample> read_samples(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open dataset", {path});
  std::vector<Sample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(sample_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::FormatError, e.what(), {path + ":" + std::to_string(lineno)});
    }
  }
  return out;
}

inline void write_samples(const std::vector<Sample>& samples, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write dataset", {path});
  for (const auto& s : samples) out << sample_json(s).dump() << "\n";
}

/// Node ids for every sample label; throws UnresolvableLabel on the first miss.
inline std::vector<NodeId> resolve_labels(const LabelGraph& graph, const std::vector<Sample>& samples) {
  std::vector<NodeId> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    auto id = graph.find(s.label);
    if (!id || !graph.is_label(*id)) throw Error(ErrorCode::UnresolvableLabel, "label not in graph", {s.label});
    out.push_back(*id);
  }
  return out;
}

}  // namespace pathcast
