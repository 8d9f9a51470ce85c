// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pathcast/labelgraph.hpp"
#include "pathcast/numerics.hpp"
#include "pathcast/pathalg.hpp"
#include "pathcast/rng.hpp"

namespace pathcast {

using TokenId = std::size_t;

/// One token per graph node (token id == node id), then START, then EOP.
class Vocabulary {
 public:
  explicit Vocabulary(std::size_t node_count = 0) : nodes_(node_count) {}
  std::size_t size() const noexcept { return nodes_ + 2; }
  std::size_t node_count() const noexcept { return nodes_; }
  TokenId start() const noexcept { return nodes_; }
  TokenId eop() const noexcept { return nodes_ + 1; }
  bool is_node(TokenId t) const noexcept { return t < nodes_; }

 private:
  std::size_t nodes_;
};

/// Tokens admissible after a given token, with their block structure.
/// Blocks hold positions into `tokens` and are ordered by first position.
struct CandidateSet {
  std::vector<TokenId> tokens;  // ascending
  num::BlockPartition partition;

  std::size_t position(TokenId t) const {
    auto it = std::lower_bound(tokens.begin(), tokens.end(), t);
    if (it == tokens.end() || *it != t) return npos;
    return static_cast<std::size_t>(it - tokens.begin());
  }
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
};

struct StepDistribution {
  std::vector<TokenId> candidates;
  std::vector<double> probs;
  std::vector<std::vector<std::size_t>> blocks;  // positions into candidates
};

/// Sampled decoder trajectory: the emitted node path, whether it stopped at
/// EOP, and the probability of every chosen token (EOP included).
struct SampledPath {
  PredictionPath nodes;
  bool ended_with_eop = false;
  std::vector<double> step_probs;

  std::vector<TokenId> tokens(const Vocabulary& vocab) const {
    std::vector<TokenId> t(nodes.begin(), nodes.end());
    if (ended_with_eop) t.push_back(vocab.eop());
    return t;
  }
};

struct ModelConfig {
  std::size_t input_dim = 0;
  std::size_t embed_dim = 16;
  std::size_t hidden = 32;  // encoder width, feature size and GRU state size
};

/// Position of the global maximum probability, ties to the lowest token id.
/// Candidate tokens are ascending, so the first maximal position wins.
inline std::size_t argmax_candidate(std::span<const double> probs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < probs.size(); ++i)
    if (probs[i] > probs[best]) best = i;
  return best;
}

/// Encoder (2-layer tanh MLP) + node embeddings + GRU decoder + output
/// projection over the vocabulary, masked per step to the graph children of
/// the previous token and normalized by block softmax.
class LabelPathModel {
 public:
  LabelPathModel(std::shared_ptr<const LabelGraph> graph, ModelConfig config, std::uint64_t seed)
      : graph_(std::move(graph)),
        config_(config),
        vocab_(graph_->node_count()),
        enc1_("encoder.l1", config.input_dim, config.hidden),
        enc2_("encoder.l2", config.hidden, config.hidden),
        embedding_("decoder.embedding", num::Tensor(num::Shape{vocab_.size(), config.embed_dim})),
        gru_("decoder.gru", config.embed_dim, config.hidden),
        out_("decoder.out", config.hidden, vocab_.size()) {
    Rng rng(seed);
    enc1_.init(rng);
    enc2_.init(rng);
    num::fill_uniform(embedding_.value, 1.0 / std::sqrt(static_cast<double>(config.embed_dim)), rng);
    gru_.init(rng);
    out_.init(rng);
    build_candidates();
  }

  const LabelGraph& graph() const noexcept { return *graph_; }
  std::shared_ptr<const LabelGraph> graph_ptr() const noexcept { return graph_; }
  const ModelConfig& config() const noexcept { return config_; }
  const Vocabulary& vocab() const noexcept { return vocab_; }
  const CandidateSet& candidates(TokenId prev) const { return candidates_.at(prev); }

  std::vector<num::Parameter*> parameters() {
    std::vector<num::Parameter*> out = encoder_parameters();
    for (auto* p : decoder_parameters()) out.push_back(p);
    return out;
  }
  std::vector<num::Parameter*> encoder_parameters() {
    return {&enc1_.weight, &enc1_.bias, &enc2_.weight, &enc2_.bias};
  }
  std::vector<num::Parameter*> decoder_parameters() {
    std::vector<num::Parameter*> out{&embedding_};
    for (auto* p : gru_.parameters()) out.push_back(p);
    out.push_back(&out_.weight);
    out.push_back(&out_.bias);
    return out;
  }
  std::vector<const num::Parameter*> parameters() const {
    std::vector<const num::Parameter*> out;
    for (auto* p : const_cast<LabelPathModel*>(this)->parameters()) out.push_back(p);
    return out;
  }

  struct Bound {
    num::Affine::Bound enc1, enc2;
    num::Var embedding;
    num::GruCell::Bound gru;
    num::Affine::Bound out;
  };

  Bound bind(num::Tape& t) { return {enc1_.bind(t), enc2_.bind(t), t.param(embedding_), gru_.bind(t), out_.bind(t)}; }
  Bound bind_frozen(num::Tape& t) const {
    return {enc1_.bind_frozen(t), enc2_.bind_frozen(t), t.constant(embedding_.value), gru_.bind_frozen(t),
            out_.bind_frozen(t)};
  }

  num::Var encode(num::Tape& t, const Bound& p, std::span<const double> x) const {
    if (x.size() != config_.input_dim)
      throw Error(ErrorCode::ShapeMismatch, "input has " + std::to_string(x.size()) + " features, model expects " +
                                                std::to_string(config_.input_dim));
    num::Var in = t.constant(num::Tensor::vector(std::vector<double>(x.begin(), x.end())));
    num::Var h = t.tanh(num::Affine::apply(t, p.enc1, in));
    return num::Affine::apply(t, p.enc2, h);
  }

  struct StepVars {
    num::Var log_probs;  // over candidates(prev).tokens
    num::Var state;
    const CandidateSet* candidates;
  };

  StepVars step(num::Tape& t, const Bound& p, num::Var f_prev, TokenId prev) const {
    const CandidateSet& cands = candidates_.at(prev);
    if (cands.tokens.empty()) {
      std::string name = vocab_.is_node(prev) ? graph_->node(prev).name : (prev == vocab_.start() ? "<start>" : "<eop>");
      throw Error(ErrorCode::NoCandidates, "token has no admissible successor", {name});
    }
    num::Var e = t.row(p.embedding, prev);
    num::Var f = num::GruCell::step(t, p.gru, e, f_prev);
    num::Var logits = num::Affine::apply(t, p.out, f);
    num::Var masked = t.gather(logits, cands.tokens);
    return {t.block_log_softmax(masked, cands.partition), f, &cands};
  }

  static StepDistribution distribution(const num::Tape& t, const StepVars& s) {
    StepDistribution d;
    d.candidates = s.candidates->tokens;
    d.blocks = s.candidates->partition.blocks;
    for (double lp : t.value(s.log_probs).data) d.probs.push_back(std::exp(lp));
    return d;
  }

  // Value-level conveniences; they run on a private tape with frozen weights.

  num::Tensor encode(std::span<const double> x) const {
    num::Tape t;
    auto p = bind_frozen(t);
    return t.value(encode(t, p, x));
  }

  std::pair<StepDistribution, num::Tensor> step(const num::Tensor& f_prev, TokenId prev) const {
    num::Tape t;
    auto p = bind_frozen(t);
    auto s = step(t, p, t.constant(f_prev), prev);
    return {distribution(t, s), t.value(s.state)};
  }

  /// Teacher-forced log-probability of a token path [root, ..., (EOP)].
  double path_log_prob(std::span<const double> x, std::span<const TokenId> tokens) const {
    num::Tape t;
    auto p = bind_frozen(t);
    num::Var f = encode(t, p, x);
    double total = 0.0;
    TokenId prev = vocab_.start();
    for (TokenId tok : tokens) {
      const CandidateSet& cands = candidates_.at(prev);
      std::size_t pos = cands.position(tok);
      if (pos == CandidateSet::npos) throw Error(ErrorCode::InvalidPath, "token is not admissible after its predecessor", {token_name(tok), token_name(prev)});
      auto s = step(t, p, f, prev);
      total += t.value(s.log_probs)[pos];
      f = s.state;
      prev = tok;
    }
    return total;
  }

  struct TapeSample {
    SampledPath path;
    std::vector<num::Var> chosen_log_probs;
  };

  /// Ancestral sampling on a tape: each candidate block draws one member, and
  /// the drawn member with the highest probability is emitted (ties to the
  /// lowest token id). Stops at EOP, a dead end, or after `max_len` tokens.
  TapeSample sample(num::Tape& t, const Bound& p, num::Var f0, Rng& rng, std::size_t max_len) const {
    TapeSample out;
    num::Var f = f0;
    TokenId prev = vocab_.start();
    for (std::size_t i = 0; i < max_len; ++i) {
      if (candidates_.at(prev).tokens.empty()) break;
      auto s = step(t, p, f, prev);
      auto d = distribution(t, s);
      std::size_t pos = pick_sampled(d, rng);
      out.chosen_log_probs.push_back(emission_log_prob(t, s.log_probs, d, pos));
      out.path.step_probs.push_back(d.probs[pos]);
      TokenId tok = d.candidates[pos];
      if (tok == vocab_.eop()) {
        out.path.ended_with_eop = true;
        break;
      }
      out.path.nodes.push_back(tok);
      f = s.state;
      prev = tok;
    }
    return out;
  }

  SampledPath sample_path(std::span<const double> x, Rng& rng, std::size_t max_len) const {
    num::Tape t;
    auto p = bind_frozen(t);
    return sample(t, p, encode(t, p, x), rng, max_len).path;
  }

  /// One draw per block (inverse CDF), then the cross-block rule.
  static std::size_t pick_sampled(const StepDistribution& d, Rng& rng) {
    std::size_t best = CandidateSet::npos;
    for (const auto& block : d.blocks) {
      std::size_t drawn = sample_block(d, block, rng);
      if (best == CandidateSet::npos || d.probs[drawn] > d.probs[best] ||
          (d.probs[drawn] == d.probs[best] && drawn < best))
        best = drawn;
    }
    return best;
  }

  /// Candidates of the other blocks that lose to `pos` under the cross-block
  /// rule, one list per block (empty lists are skipped).
  static std::vector<std::vector<std::size_t>> beaten_by(const StepDistribution& d, std::size_t pos) {
    std::vector<std::vector<std::size_t>> out;
    for (const auto& block : d.blocks) {
      if (std::find(block.begin(), block.end(), pos) != block.end()) continue;
      std::vector<std::size_t> lose;
      for (std::size_t j : block)
        if (d.probs[j] < d.probs[pos] || (d.probs[j] == d.probs[pos] && j > pos)) lose.push_back(j);
      out.push_back(std::move(lose));
    }
    return out;
  }

  /// Probability that pick_sampled returns `pos`: its block draws it and
  /// every other block draws a member it beats.
  static double emission_probability(const StepDistribution& d, std::size_t pos) {
    double q = d.probs[pos];
    for (const auto& lose : beaten_by(d, pos)) {
      double mass = 0.0;
      for (std::size_t j : lose) mass += d.probs[j];
      q *= mass;
    }
    return q;
  }

  /// log emission_probability on the tape, so the policy gradient scores
  /// the choice with the distribution it was drawn from.
  static num::Var emission_log_prob(num::Tape& t, num::Var log_probs, const StepDistribution& d, std::size_t pos) {
    std::vector<num::Var> terms{t.pick(log_probs, pos)};
    for (auto& lose : beaten_by(d, pos)) {
      if (lose.empty()) throw Error(ErrorCode::InvalidPath, "emitted candidate cannot win its step");
      terms.push_back(t.log_sum_exp(t.gather(log_probs, std::move(lose))));
    }
    return t.add_all(terms);
  }

  static std::size_t sample_block(const StepDistribution& d, const std::vector<std::size_t>& block, Rng& rng) {
    const double u = uniform01(rng);
    double acc = 0.0;
    for (std::size_t pos : block) {
      acc += d.probs[pos];
      if (u < acc) return pos;
    }
    return block.back();
  }

  std::string token_name(TokenId t) const {
    if (vocab_.is_node(t)) return graph_->node(t).name;
    if (t == vocab_.start()) return "<start>";
    if (t == vocab_.eop()) return "<eop>";
    return "<" + std::to_string(t) + ">";
  }

  // Checkpoint + sidecar.

  void save(const std::string& ckpt_path, const std::string& graph_file) const {
    num::save_checkpoint(ckpt_path, parameters());
    std::ofstream side(ckpt_path + ".json", std::ios::binary);
    if (!side) throw Error(ErrorCode::IoError, "cannot write sidecar", {ckpt_path + ".json"});
    side << sidecar(graph_file).dump(2) << "\n";
  }

  nlohmann::json sidecar(const std::string& graph_file) const {
    return nlohmann::json{{"graph_file", graph_file},
                          {"input_dim", config_.input_dim},
                          {"embed_dim", config_.embed_dim},
                          {"hidden", config_.hidden}};
  }

  void load_parameters(const std::vector<std::pair<std::string, num::Tensor>>& entries) {
    std::map<std::string, const num::Tensor*> by_name;
    for (const auto& [name, t] : entries) by_name[name] = &t;
    for (num::Parameter* p : parameters()) {
      auto it = by_name.find(p->name());
      if (it == by_name.end()) throw Error(ErrorCode::FormatError, "checkpoint lacks parameter", {p->name()});
      if (it->second->shape != p->value.shape)
        throw Error(ErrorCode::ShapeMismatch, "checkpoint shape differs", {p->name()});
      p->value = *it->second;
    }
  }

 private:
  void build_candidates() {
    const LabelGraph& g = *graph_;
    candidates_.assign(vocab_.size(), {});
    candidates_[vocab_.start()].tokens = {g.root()};
    candidates_[vocab_.start()].partition.blocks = {{0}};
    for (NodeId v = 0; v < g.node_count(); ++v) {
      CandidateSet& c = candidates_[v];
      auto kids = g.children(v);
      c.tokens.assign(kids.begin(), kids.end());
      const bool offers_eop = g.is_label(v);
      if (offers_eop) c.tokens.push_back(vocab_.eop());
      // children grouped by their competing group restricted to this set
      std::map<std::size_t, std::vector<std::size_t>> by_group;
      std::vector<std::vector<std::size_t>> blocks;
      for (std::size_t pos = 0; pos < kids.size(); ++pos) {
        if (auto grp = g.group_of(kids[pos])) by_group[*grp].push_back(pos);
        else blocks.push_back({pos});
      }
      for (auto& [grp, positions] : by_group) blocks.push_back(std::move(positions));
      std::sort(blocks.begin(), blocks.end(), [](const auto& a, const auto& b) { return a.front() < b.front(); });
      if (offers_eop) {
        const std::size_t eop_pos = c.tokens.size() - 1;
        // EOP next to children joins the first block; a singleton EOP block
        // would always carry probability 1 and win every cross-block max
        if (blocks.empty()) blocks.push_back({eop_pos});
        else blocks.front().push_back(eop_pos);
      }
      c.partition.blocks = std::move(blocks);
    }
  }

  std::shared_ptr<const LabelGraph> graph_;
  ModelConfig config_;
  Vocabulary vocab_;
  num::Affine enc1_;
  num::Affine enc2_;
  num::Parameter embedding_;
  num::GruCell gru_;
  num::Affine out_;
  std::vector<CandidateSet> candidates_;
};

inline LabelPathModel load_model(const std::string& ckpt_path, std::string* graph_file_out = nullptr) {
  auto side = read_json_file(ckpt_path + ".json");
  ModelConfig cfg;
  std::string graph_file;
  try {
    detail::require_keys(side, {"graph_file", "input_dim", "embed_dim", "hidden"}, "sidecar");
    graph_file = side.at("graph_file").get<std::string>();
    cfg.input_dim = side.at("input_dim").get<std::size_t>();
    cfg.embed_dim = side.at("embed_dim").get<std::size_t>();
    cfg.hidden = side.at("hidden").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, e.what(), {ckpt_path + ".json"});
  }
  auto graph = std::make_shared<const LabelGraph>(load_graph(graph_file));
  LabelPathModel model(graph, cfg, 0);
  model.load_parameters(num::load_checkpoint(ckpt_path));
  if (graph_file_out) *graph_file_out = graph_file;
  return model;
}

}  // namespace pathcast
