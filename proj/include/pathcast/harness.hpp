// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pathcast/dataset.hpp"
#include "pathcast/evaldecode.hpp"
#include "pathcast/labelgraph.hpp"
#include "pathcast/model.hpp"
#include "pathcast/numerics.hpp"
#include "pathcast/pathalg.hpp"
#include "pathcast/rng.hpp"
#include "pathcast/trainer.hpp"

namespace pathcast {

// ---------------------------------------------------------------------------
// Synthetic pet-style task

/// Graph: root -> coarse labels -> attribute group members -> fine labels.
/// Every coarse category owns its own copy of the attribute groups. A fine
/// label hangs below one member of a group when that attribute is fixed for
/// the label, and below every member when the attribute varies per instance.
struct SynthSpec {
  std::size_t coarse_count = 2;
  std::vector<std::size_t> group_sizes{2, 3, 2};
  std::size_t labels_per_coarse = 6;
  /// determinism[label][group]: fixed member index, or -1 for "any".
  /// Empty selects the built-in layout.
  std::vector<std::vector<int>> determinism;
  double sigma = 0.1;
  bool encode_attributes = true;
  std::size_t n_fine = 2000;
  std::size_t n_coarse = 2000;
  std::size_t n_dev = 500;
  std::size_t n_test = 2000;
  std::uint64_t seed = 0;

  std::size_t fine_count() const { return coarse_count * labels_per_coarse; }
  std::size_t input_dim() const {
    return std::accumulate(group_sizes.begin(), group_sizes.end(), std::size_t{0}) + fine_count();
  }

  std::vector<std::vector<int>> layout() const {
    if (!determinism.empty()) return determinism;
    const std::vector<std::vector<int>> builtin{{0, 0, 0}, {1, 1, 1}, {0, 2, 1}, {1, -1, 0}, {-1, -1, -1}, {-1, -1, -1}};
    if (labels_per_coarse == 6 && group_sizes.size() == 3 && group_sizes[0] >= 2 && group_sizes[1] >= 3 &&
        group_sizes[2] >= 2)
      return builtin;
    std::vector<std::vector<int>> out(labels_per_coarse, std::vector<int>(group_sizes.size()));
    for (std::size_t i = 0; i < labels_per_coarse; ++i)
      for (std::size_t g = 0; g < group_sizes.size(); ++g) out[i][g] = static_cast<int>((i + g) % group_sizes[g]);
    return out;
  }

  void check() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::InconsistentSpec, m); };
    if (coarse_count == 0) fail("coarse_count must be positive");
    if (labels_per_coarse == 0) fail("labels_per_coarse must be positive");
    if (group_sizes.empty()) fail("at least one attribute group is needed");
    for (std::size_t s : group_sizes)
      if (s < 2) fail("attribute groups need at least two members");
    if (!(sigma >= 0.0)) fail("sigma must be non-negative");
    if (n_fine == 0 || n_test == 0) fail("fine and test splits must be non-empty");
    auto d = layout();
    if (d.size() != labels_per_coarse) fail("determinism needs one row per label");
    for (const auto& row : d) {
      if (row.size() != group_sizes.size()) fail("determinism rows need one entry per group");
      for (std::size_t g = 0; g < row.size(); ++g)
        if (row[g] < -1 || row[g] >= static_cast<int>(group_sizes[g])) fail("determinism entry out of range");
    }
  }
};

inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  static const std::set<std::string> keys{"coarse_count", "group_sizes", "labels_per_coarse", "determinism",
                                          "sigma", "encode_attributes", "n_fine", "n_coarse", "n_dev",
                                          "n_test", "seed"};
  if (!j.is_object()) throw Error(ErrorCode::FormatError, "synth spec must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!keys.count(k)) throw Error(ErrorCode::FormatError, "unexpected synth spec key", {k});
  SynthSpec s;
  try {
    if (j.contains("coarse_count")) s.coarse_count = j.at("coarse_count").get<std::size_t>();
    if (j.contains("group_sizes")) s.group_sizes = j.at("group_sizes").get<std::vector<std::size_t>>();
    if (j.contains("labels_per_coarse")) s.labels_per_coarse = j.at("labels_per_coarse").get<std::size_t>();
    if (j.contains("determinism")) s.determinism = j.at("determinism").get<std::vector<std::vector<int>>>();
    if (j.contains("sigma")) s.sigma = j.at("sigma").get<double>();
    if (j.contains("encode_attributes")) s.encode_attributes = j.at("encode_attributes").get<bool>();
    if (j.contains("n_fine")) s.n_fine = j.at("n_fine").get<std::size_t>();
    if (j.contains("n_coarse")) s.n_coarse = j.at("n_coarse").get<std::size_t>();
    if (j.contains("n_dev")) s.n_dev = j.at("n_dev").get<std::size_t>();
    if (j.contains("n_test")) s.n_test = j.at("n_test").get<std::size_t>();
    if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, e.what());
  }
  return s;
}

struct SynthData {
  std::shared_ptr<const LabelGraph> graph;
  DatasetSpec fine;
  DatasetSpec coarse;
  DatasetSpec dev;
  DatasetSpec test;  // carries attrs
};

namespace detail {

inline std::string coarse_name(std::size_t c) { return "c" + std::to_string(c); }
inline std::string group_name(std::size_t c, std::size_t g) { return coarse_name(c) + "-g" + std::to_string(g); }
inline std::string member_name(std::size_t c, std::size_t g, std::size_t m) {
  return group_name(c, g) + "-m" + std::to_string(m);
}
inline std::string fine_name(std::size_t c, std::size_t i) { return coarse_name(c) + "-l" + std::to_string(i); }

}  // namespace detail

inline LabelGraph synth_graph(const SynthSpec& spec) {
  spec.check();
  const auto det = spec.layout();
  std::vector<std::string> fine, coarse;
  std::vector<AugmentedNodeSpec> aug;
  std::vector<EdgeSpec> edges;
  std::vector<GroupSpec> groups;
  for (std::size_t c = 0; c < spec.coarse_count; ++c) {
    coarse.push_back(detail::coarse_name(c));
    edges.push_back({"root", detail::coarse_name(c)});
    for (std::size_t g = 0; g < spec.group_sizes.size(); ++g) {
      GroupSpec grp{detail::group_name(c, g), {}};
      for (std::size_t m = 0; m < spec.group_sizes[g]; ++m) {
        aug.push_back({detail::member_name(c, g, m), {detail::coarse_name(c)}});
        grp.members.push_back(detail::member_name(c, g, m));
      }
      groups.push_back(std::move(grp));
    }
    for (std::size_t i = 0; i < spec.labels_per_coarse; ++i) {
      fine.push_back(detail::fine_name(c, i));
      for (std::size_t g = 0; g < spec.group_sizes.size(); ++g) {
        const int d = det[i][g];
        for (std::size_t m = 0; m < spec.group_sizes[g]; ++m) {
          // fixed members rotate with the coarse index
          if (d >= 0 && m != (static_cast<std::size_t>(d) + c) % spec.group_sizes[g]) continue;
          edges.push_back({detail::member_name(c, g, m), detail::fine_name(c, i)});
        }
      }
    }
  }
  return build_graph("root", {{"fine", fine}, {"coarse", coarse}}, aug, edges, groups);
}

/// Graph plus fine, coarse, dev and test splits. Labels are balanced in
/// expectation; attributes left open by a label are drawn per instance.
inline SynthData synth_generate(const SynthSpec& spec) {
  spec.check();
  SynthData out;
  out.graph = std::make_shared<const LabelGraph>(synth_graph(spec));
  const auto det = spec.layout();
  const std::size_t K = spec.fine_count();
  const std::size_t attr_dims = spec.input_dim() - K;

  auto draw = [&](Rng& rng, bool coarse_label, bool with_attrs) {
    std::uniform_int_distribution<std::size_t> pick_label(0, K - 1);
    std::normal_distribution<double> noise(0.0, 1.0);
    const std::size_t k = pick_label(rng);
    const std::size_t c = k / spec.labels_per_coarse, i = k % spec.labels_per_coarse;
    Sample s;
    s.x.assign(spec.input_dim(), 0.0);
    std::size_t offset = 0;
    std::map<std::string, std::string> attrs;
    for (std::size_t g = 0; g < spec.group_sizes.size(); ++g) {
      const std::size_t size = spec.group_sizes[g];
      std::size_t m;
      if (det[i][g] >= 0) {
        m = (static_cast<std::size_t>(det[i][g]) + c) % size;
      } else {
        m = std::uniform_int_distribution<std::size_t>(0, size - 1)(rng);
      }
      if (spec.encode_attributes) s.x[offset + m] = 1.0;
      attrs[detail::group_name(c, g)] = detail::member_name(c, g, m);
      offset += size;
    }
    s.x[attr_dims + k] = 1.0;
    for (double& v : s.x) v += spec.sigma * noise(rng);
    s.label = coarse_label ? detail::coarse_name(c) : detail::fine_name(c, i);
    if (with_attrs) s.attrs = std::move(attrs);
    return s;
  };
  auto split = [&](const std::string& name, Granularity gran, std::size_t n, std::uint64_t key, bool attrs) {
    DatasetSpec d;
    d.name = name;
    d.granularity = gran;
    Rng rng = stream(spec.seed, {0x5917ULL, key});
    for (std::size_t j = 0; j < n; ++j) d.samples.push_back(draw(rng, gran == Granularity::Coarse, attrs));
    return d;
  };
  out.fine = split("fine", Granularity::Fine, spec.n_fine, 1, false);
  out.coarse = split("coarse", Granularity::Coarse, spec.n_coarse, 2, false);
  out.dev = split("dev", Granularity::Fine, spec.n_dev, 3, false);
  out.test = split("test", Granularity::Fine, spec.n_test, 4, true);
  return out;
}

// ---------------------------------------------------------------------------
// Fusion

struct FusionResult {
  DatasetSpec fused;
  std::shared_ptr<const LabelGraph> graph;
  std::vector<std::string> sources;  // "fine" or "coarse", per fused sample
  std::size_t class_count = 0;
};

/// Fine samples first, then coarse ones; test data is never fused.
inline FusionResult fuse(const DatasetSpec& fine, const DatasetSpec& coarse, std::shared_ptr<const LabelGraph> graph) {
  const LabelGraph& g = *graph;
  resolve_labels(g, fine.samples);
  auto coarse_ids = resolve_labels(g, coarse.samples);
  for (std::size_t i = 0; i < coarse_ids.size(); ++i)
    if (g.is_leaf(coarse_ids[i]))
      throw Error(ErrorCode::InconsistentSpec, "coarse dataset labels a leaf node", {coarse.samples[i].label});
  FusionResult r;
  r.graph = std::move(graph);
  r.fused.name = fine.name + "+" + coarse.name;
  r.fused.granularity = Granularity::Fine;
  r.fused.samples = fine.samples;
  r.fused.samples.insert(r.fused.samples.end(), coarse.samples.begin(), coarse.samples.end());
  r.sources.assign(fine.samples.size(), "fine");
  r.sources.insert(r.sources.end(), coarse.samples.size(), "coarse");
  std::set<std::string> fine_labels, extra;
  for (const auto& s : fine.samples) fine_labels.insert(s.label);
  for (const auto& s : coarse.samples)
    if (!fine_labels.count(s.label)) extra.insert(s.label);
  r.class_count = fine_labels.size() + extra.size();
  return r;
}

// ---------------------------------------------------------------------------
// Label-path model runs

struct RunResult {
  MetricsReport metrics;
  std::vector<EpochMetrics> epochs;
};

inline ModelConfig model_config(const RunConfig& rc, std::size_t input_dim) {
  return ModelConfig{input_dim, rc.embed_dim, rc.hidden};
}

/// Trains a fresh model from the config seed and scores it on `test`.
inline RunResult run_label_path(std::shared_ptr<const LabelGraph> graph, const std::vector<Sample>& train,
                                const std::vector<Sample>& dev, const std::vector<Sample>& test,
                                const RunConfig& rc, bool audit = false,
                                const std::function<void(const EpochMetrics&)>& on_epoch = {},
                                LabelPathModel* trained_out = nullptr) {
  if (train.empty()) throw Error(ErrorCode::EmptyDataset, "training set is empty");
  LabelPathModel model(graph, model_config(rc, train.front().x.size()), rc.train_config.seed);
  Trainer trainer(model, rc.train_config);
  std::function<std::optional<double>()> dev_metric;
  if (!dev.empty())
    dev_metric = [&]() -> std::optional<double> { return evaluate(model, dev, rc.train_config.max_len).accuracy; };
  RunResult r;
  r.epochs = trainer.fit(train, dev_metric, on_epoch);
  r.metrics = evaluate_with_audit(model, test, rc.train_config.max_len, audit);
  if (trained_out) *trained_out = std::move(model);
  return r;
}

// ---------------------------------------------------------------------------
// Flat baselines

/// Encoder MLP (same shape as the path model's) plus a linear head.
class FlatNet {
 public:
  FlatNet(std::size_t input_dim, std::size_t hidden, std::size_t outputs, std::uint64_t seed)
      : l1_("encoder.l1", input_dim, hidden), l2_("encoder.l2", hidden, hidden), head_("head", hidden, outputs) {
    Rng rng(seed);
    l1_.init(rng);
    l2_.init(rng);
    head_.init(rng);
  }

  struct Bound {
    num::Affine::Bound l1, l2, head;
  };
  Bound bind(num::Tape& t) { return {l1_.bind(t), l2_.bind(t), head_.bind(t)}; }
  Bound bind_frozen(num::Tape& t) const { return {l1_.bind_frozen(t), l2_.bind_frozen(t), head_.bind_frozen(t)}; }

  num::Var forward(num::Tape& t, const Bound& p, std::span<const double> x) const {
    num::Var in = t.constant(num::Tensor::vector(std::vector<double>(x.begin(), x.end())));
    num::Var h = t.tanh(num::Affine::apply(t, p.l1, in));
    num::Var f = num::Affine::apply(t, p.l2, h);
    return num::Affine::apply(t, p.head, t.tanh(f));
  }

  std::vector<double> scores(std::span<const double> x) const {
    num::Tape t;
    auto p = bind_frozen(t);
    return t.value(forward(t, p, x)).data;
  }

  std::vector<num::Parameter*> encoder_parameters() { return {&l1_.weight, &l1_.bias, &l2_.weight, &l2_.bias}; }
  std::vector<num::Parameter*> head_parameters() { return {&head_.weight, &head_.bias}; }

 private:
  num::Affine l1_, l2_, head_;
};

/// Per-sample loss from the head output.
using FlatLoss = std::function<num::Var(num::Tape&, num::Var scores, std::size_t sample_index)>;

/// Minibatch Adam training with the same batching, seeding and schedule rules
/// as the path-model trainer.
inline void train_flat(FlatNet& net, const std::vector<Sample>& data, const FlatLoss& loss, const TrainConfig& cfg,
                       const std::function<std::optional<double>()>& dev_metric = {}) {
  num::Adam adam;
  const auto enc = adam.add_group(net.encoder_parameters(), cfg.lr_e);
  const auto head = adam.add_group(net.head_parameters(), cfg.lr);
  LrSchedule schedule(cfg.schedule, cfg.lr_e, cfg.lr);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng = stream(cfg.seed, {epoch, 0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      num::Tape t;
      auto p = net.bind(t);
      std::vector<num::Var> terms;
      for (std::size_t i = start; i < end; ++i) terms.push_back(loss(t, net.forward(t, p, data[order[i]].x), order[i]));
      num::Var total = t.scale(t.add_all(terms), 1.0 / static_cast<double>(terms.size()));
      adam.zero_grad();
      t.backward(total);
      adam.step();
    }
    std::optional<double> m;
    if (dev_metric) m = dev_metric();
    if (cfg.schedule.kind == ScheduleConfig::Kind::DynamicReduce && !m) m = 0.0;
    schedule.update(epoch, m);
    adam.set_lr(enc, schedule.lr_e());
    adam.set_lr(head, schedule.lr());
  }
}

/// Class list for a flat baseline: the distinct training labels, sorted.
inline std::vector<std::string> class_list(const std::vector<Sample>& data) {
  std::set<std::string> s;
  for (const auto& x : data) s.insert(x.label);
  return {s.begin(), s.end()};
}

/// Encoder + softmax over fine labels, cross-entropy.
class FfnClassifier {
 public:
  FfnClassifier(std::vector<std::string> classes, std::size_t input_dim, std::size_t hidden, std::uint64_t seed)
      : classes_(std::move(classes)), net_(input_dim, hidden, classes_.size(), seed) {
    partition_.blocks.emplace_back(classes_.size());
    std::iota(partition_.blocks[0].begin(), partition_.blocks[0].end(), std::size_t{0});
  }

  const std::vector<std::string>& classes() const noexcept { return classes_; }

  void fit(const std::vector<Sample>& data, const TrainConfig& cfg, const std::vector<Sample>& dev = {}) {
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < classes_.size(); ++i) index[classes_[i]] = i;
    std::vector<std::size_t> target;
    for (const auto& s : data) {
      auto it = index.find(s.label);
      if (it == index.end()) throw Error(ErrorCode::UnresolvableLabel, "label outside the class list", {s.label});
      target.push_back(it->second);
    }
    FlatLoss loss = [&](num::Tape& t, num::Var z, std::size_t k) {
      return t.scale(t.pick(t.block_log_softmax(z, partition_), target[k]), -1.0);
    };
    std::function<std::optional<double>()> dm;
    if (!dev.empty()) dm = [&]() -> std::optional<double> { return evaluate(dev).accuracy; };
    train_flat(net_, data, loss, cfg, dm);
  }

  std::string predict(std::span<const double> x) const {
    auto z = net_.scores(x);
    return classes_[argmax_candidate(z)];
  }

  MetricsReport evaluate(const std::vector<Sample>& data) const {
    std::vector<std::string> gold;
    std::vector<std::optional<std::string>> pred;
    for (const auto& s : data) {
      gold.push_back(s.label);
      pred.emplace_back(predict(s.x));
    }
    return score_predictions(gold, pred);
  }

 private:
  std::vector<std::string> classes_;
  FlatNet net_;
  num::BlockPartition partition_;
};

/// Union of the nodes over every groundtruth path of `label`.
inline std::set<NodeId> flattened_targets(const LabelGraph& graph, NodeId label) {
  std::set<NodeId> out;
  for (const auto& p : enumerate_paths(graph, label)) out.insert(p.begin(), p.end());
  return out;
}

/// Independent logistic output per graph node, trained with binary
/// cross-entropy against the flattened label set. Prediction is the class
/// label with the highest score.
class LabelSetClassifier {
 public:
  LabelSetClassifier(std::shared_ptr<const LabelGraph> graph, std::vector<std::string> classes,
                     std::size_t input_dim, std::size_t hidden, std::uint64_t seed)
      : graph_(std::move(graph)), classes_(std::move(classes)), net_(input_dim, hidden, graph_->node_count(), seed) {
    for (const auto& c : classes_) class_ids_.push_back(graph_->id_of(c));
  }

  void fit(const std::vector<Sample>& data, const TrainConfig& cfg, const std::vector<Sample>& dev = {}) {
    const auto ids = resolve_labels(*graph_, data);
    std::map<NodeId, num::Tensor> targets;
    for (NodeId id : ids) {
      if (targets.count(id)) continue;
      num::Tensor y{num::Shape{graph_->node_count()}};
      for (NodeId v : flattened_targets(*graph_, id)) y[v] = 1.0;
      targets.emplace(id, std::move(y));
    }
    FlatLoss loss = [&](num::Tape& t, num::Var z, std::size_t k) {
      // sum_v softplus(z_v) - y_v z_v
      num::Var y = t.constant(targets.at(ids[k]));
      return t.sum(t.sub(t.softplus(z), t.mul(y, z)));
    };
    std::function<std::optional<double>()> dm;
    if (!dev.empty()) dm = [&]() -> std::optional<double> { return evaluate(dev).accuracy; };
    train_flat(net_, data, loss, cfg, dm);
  }

  std::string predict(std::span<const double> x) const {
    auto z = net_.scores(x);
    std::vector<double> s;
    for (NodeId id : class_ids_) s.push_back(z[id]);
    return classes_[argmax_candidate(s)];
  }

  MetricsReport evaluate(const std::vector<Sample>& data) const {
    std::vector<std::string> gold;
    std::vector<std::optional<std::string>> pred;
    for (const auto& s : data) {
      gold.push_back(s.label);
      pred.emplace_back(predict(s.x));
    }
    return score_predictions(gold, pred);
  }

 private:
  std::shared_ptr<const LabelGraph> graph_;
  std::vector<std::string> classes_;
  std::vector<NodeId> class_ids_;
  FlatNet net_;
};

inline bool is_descendant(const LabelGraph& graph, NodeId ancestor, NodeId node) {
  std::vector<NodeId> stack{ancestor};
  std::vector<bool> seen(graph.node_count(), false);
  while (!stack.empty()) {
    NodeId v = stack.back();
    stack.pop_back();
    if (v == node) return true;
    for (NodeId c : graph.children(v))
      if (!seen[c]) {
        seen[c] = true;
        stack.push_back(c);
      }
  }
  return false;
}

struct PseudoLabelResult {
  MetricsReport metrics;
  std::size_t coarse_samples = 0;
  std::size_t filtered = 0;
  std::vector<Sample> survivors;  // pseudo-labelled coarse samples kept for stage 3
  double filtered_fraction() const { return coarse_samples ? static_cast<double>(filtered) / coarse_samples : 0.0; }
};

/// Stage 1: FFN on fine. Stage 2: pseudo-label coarse samples and drop those
/// whose fine prediction is not below their coarse label. Stage 3: a fresh
/// FFN (same seed) on fine + survivors.
inline PseudoLabelResult baseline_pseudo_label(const LabelGraph& graph, const std::vector<Sample>& fine,
                                               const std::vector<Sample>& coarse, const std::vector<Sample>& dev,
                                               const std::vector<Sample>& test, const TrainConfig& cfg,
                                               std::size_t hidden) {
  if (fine.empty()) throw Error(ErrorCode::EmptyDataset, "fine training set is empty");
  const auto classes = class_list(fine);
  const std::size_t dim = fine.front().x.size();
  FfnClassifier stage1(classes, dim, hidden, cfg.seed);
  stage1.fit(fine, cfg, dev);
  PseudoLabelResult r;
  r.coarse_samples = coarse.size();
  const auto coarse_ids = resolve_labels(graph, coarse);
  for (std::size_t i = 0; i < coarse.size(); ++i) {
    std::string pred = stage1.predict(coarse[i].x);
    if (!is_descendant(graph, coarse_ids[i], graph.id_of(pred))) {
      ++r.filtered;
      continue;
    }
    Sample s = coarse[i];
    s.label = pred;
    r.survivors.push_back(std::move(s));
  }
  std::vector<Sample> combined = fine;
  combined.insert(combined.end(), r.survivors.begin(), r.survivors.end());
  FfnClassifier stage3(classes, dim, hidden, cfg.seed);
  stage3.fit(combined, cfg, dev);
  r.metrics = stage3.evaluate(test);
  return r;
}

// ---------------------------------------------------------------------------
// Ablation

/// Removes floor(fraction * augmented count) augmented nodes, chosen by a
/// seeded shuffle, and contracts each: its parents inherit its children.
/// Groups left with fewer than two members are dropped.
inline LabelGraph trim_graph(const LabelGraph& graph, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw Error(ErrorCode::InconsistentSpec, "trim fraction outside [0,1]");
  std::vector<NodeId> augmented;
  for (const auto& n : graph.nodes())
    if (n.kind == NodeKind::Augmented) augmented.push_back(n.id);
  const auto remove_count = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(augmented.size()) + 1e-9));
  Rng rng = stream(seed, {0x7219ULL});
  std::shuffle(augmented.begin(), augmented.end(), rng);
  std::vector<bool> removed(graph.node_count(), false);
  for (std::size_t i = 0; i < remove_count; ++i) removed[augmented[i]] = true;

  // adjacency with contraction applied one removed node at a time
  std::vector<std::set<NodeId>> kids(graph.node_count()), parents(graph.node_count());
  for (const auto& e : graph.edges()) {
    kids[e.parent].insert(e.child);
    parents[e.child].insert(e.parent);
  }
  for (NodeId v = 0; v < graph.node_count(); ++v) {
    if (!removed[v]) continue;
    for (NodeId p : parents[v]) {
      kids[p].erase(v);
      for (NodeId c : kids[v]) {
        kids[p].insert(c);
        parents[c].insert(p);
      }
    }
    for (NodeId c : kids[v]) parents[c].erase(v);
    kids[v].clear();
    parents[v].clear();
  }

  std::vector<NodeId> remap(graph.node_count(), 0);
  std::vector<GraphNode> nodes;
  for (const auto& n : graph.nodes()) {
    if (removed[n.id]) continue;
    remap[n.id] = nodes.size();
    GraphNode copy = n;
    copy.id = nodes.size();
    nodes.push_back(std::move(copy));
  }
  std::vector<Edge> edges;
  for (NodeId p = 0; p < graph.node_count(); ++p)
    if (!removed[p])
      for (NodeId c : kids[p]) edges.push_back({remap[p], remap[c]});
  std::vector<Group> groups;
  for (const auto& g : graph.groups()) {
    if (g.implicit) continue;
    Group kept{g.name, {}, false};
    for (NodeId m : g.members)
      if (!removed[m]) kept.members.push_back(remap[m]);
    if (kept.members.size() >= 2) groups.push_back(std::move(kept));
  }
  return LabelGraph::build(std::move(nodes), std::move(edges), std::move(groups));
}

struct AblationRow {
  std::string variant;
  double trim = 0.0;
  PathAggregation aggregation = PathAggregation::Mean;
  std::vector<std::uint64_t> seeds;
  std::vector<double> accuracy;  // per seed
  double mean_accuracy = 0.0;
  double delta = 0.0;  // vs the first row
};

struct AblationTable {
  std::vector<AblationRow> rows;

  std::string to_text() const {
    std::ostringstream out;
    char line[160];
    std::snprintf(line, sizeof line, "%-24s %10s %10s\n", "variant", "acc(%)", "delta");
    out << line;
    for (const auto& r : rows) {
      std::snprintf(line, sizeof line, "%-24s %10.2f %+10.2f\n", r.variant.c_str(), 100.0 * r.mean_accuracy,
                    100.0 * r.delta);
      out << line;
    }
    return out.str();
  }
};

inline std::string_view to_string(PathAggregation a) {
  switch (a) {
    case PathAggregation::Mean: return "mean";
    case PathAggregation::Sum: return "sum";
    case PathAggregation::Random: return "random";
  }
  return "?";
}

inline nlohmann::json to_json(const AblationTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows)
    rows.push_back({{"variant", r.variant},
                    {"trim", r.trim},
                    {"aggregation", std::string(to_string(r.aggregation))},
                    {"seeds", r.seeds},
                    {"accuracy", r.accuracy},
                    {"mean_accuracy", r.mean_accuracy},
                    {"delta", r.delta}});
  return nlohmann::json{{"rows", rows}};
}

struct AblationVariant {
  double trim = 0.0;
  PathAggregation aggregation = PathAggregation::Mean;
};

/// Trains and evaluates every variant under every seed. The first variant
/// is the reference for the deltas.
inline AblationTable ablate(std::shared_ptr<const LabelGraph> graph, const std::vector<AblationVariant>& variants,
                            const std::vector<std::uint64_t>& seeds, const std::vector<Sample>& train,
                            const std::vector<Sample>& dev, const std::vector<Sample>& test, const RunConfig& base,
                            const std::function<void(const AblationRow&)>& on_row = {}) {
  AblationTable table;
  for (const auto& v : variants) {
    AblationRow row;
    row.trim = v.trim;
    row.aggregation = v.aggregation;
    char name[64];
    std::snprintf(name, sizeof name, "trim-%.0f%%", 100.0 * v.trim);
    row.variant = (v.trim == 0.0 ? std::string("full") : std::string(name)) + "/" + std::string(to_string(v.aggregation));
    auto g = v.trim == 0.0 ? graph : std::make_shared<const LabelGraph>(trim_graph(*graph, v.trim, base.train_config.seed));
    for (std::uint64_t seed : seeds) {
      RunConfig rc = base;
      rc.train_config.seed = seed;
      rc.train_config.path_agg = v.aggregation;
      row.seeds.push_back(seed);
      row.accuracy.push_back(run_label_path(g, train, dev, test, rc).metrics.accuracy);
    }
    row.mean_accuracy = std::accumulate(row.accuracy.begin(), row.accuracy.end(), 0.0) / row.accuracy.size();
    row.delta = table.rows.empty() ? 0.0 : row.mean_accuracy - table.rows.front().mean_accuracy;
    if (on_row) on_row(row);
    table.rows.push_back(std::move(row));
  }
  return table;
}

/// Variants from the config: full graph with mean pooling first, the other
/// aggregations next, then each trim fraction with mean pooling. Defaults:
/// {mean, sum, random} and {0.36}.
inline std::vector<std::uint64_t> ablation_seeds(const RunConfig& rc) {
  if (rc.extra.contains("seeds")) return rc.extra.at("seeds").get<std::vector<std::uint64_t>>();
  return {rc.train_config.seed};
}

inline std::vector<AblationVariant> ablation_variants(const RunConfig& rc) {
  std::vector<PathAggregation> aggs{PathAggregation::Mean, PathAggregation::Sum, PathAggregation::Random};
  std::vector<double> trims{0.36};
  if (rc.extra.contains("aggregations")) {
    aggs.clear();
    for (const auto& a : rc.extra.at("aggregations")) {
      auto s = a.get<std::string>();
      if (s == "mean") aggs.push_back(PathAggregation::Mean);
      else if (s == "sum") aggs.push_back(PathAggregation::Sum);
      else if (s == "random") aggs.push_back(PathAggregation::Random);
      else throw Error(ErrorCode::FormatError, "unknown aggregation", {s});
    }
  }
  if (rc.extra.contains("graph_trims")) trims = rc.extra.at("graph_trims").get<std::vector<double>>();
  std::vector<AblationVariant> out{{0.0, PathAggregation::Mean}};
  for (auto a : aggs)
    if (a != PathAggregation::Mean) out.push_back({0.0, a});
  for (double t : trims)
    if (t > 0.0) out.push_back({t, PathAggregation::Mean});
  return out;
}

}  // namespace pathcast
