// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pathcast/dataset.hpp"
#include "pathcast/model.hpp"
#include "pathcast/pathalg.hpp"
#include "pathcast/rng.hpp"

namespace pathcast {

enum class PathAggregation { Mean, Sum, Random };
enum class RewardSetKind { Certain, LabelOnly };

struct ScheduleConfig {
  enum class Kind { FixedDecay, DynamicReduce };
  Kind kind = Kind::FixedDecay;
  std::size_t n = 10;  // decay period, or patience
};

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t max_len = 8;
  double r_tf = 1.0;
  double alpha = 1.0;
  double beta = 1.0;
  PathAggregation path_agg = PathAggregation::Mean;
  std::size_t n_p = 4;
  RewardSetKind reward_set = RewardSetKind::Certain;
  double baseline_decay = 0.9;
  double lr_e = 1e-3;
  double lr = 1e-3;
  ScheduleConfig schedule;
  std::size_t epochs = 30;
  std::uint64_t seed = 0;

  void check() const {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::FormatError, "invalid train config: " + what); };
    if (batch_size == 0) fail("batch_size must be positive");
    if (max_len < 2) fail("max_len must be at least 2");
    if (!(r_tf >= 0.0 && r_tf <= 1.0)) fail("r_tf must lie in [0,1]");
    if (!(alpha >= 0.0) || !(beta >= 0.0)) fail("alpha and beta must be non-negative");
    if (n_p == 0) fail("n_p must be at least 1");
    if (!(baseline_decay > 0.0 && baseline_decay < 1.0)) fail("baseline_decay must lie in (0,1)");
    if (!(lr_e > 0.0) || !(lr > 0.0)) fail("learning rates must be positive");
    if (schedule.n == 0) fail("schedule.n must be positive");
  }
};

/// Running estimate of the reward, b <- decay * b + (1 - decay) * mean(r).
class BaselineEstimator {
 public:
  explicit BaselineEstimator(double decay = 0.9, double initial = 0.0) : decay_(decay), value_(initial) {}
  double value() const noexcept { return value_; }
  void update(double mean_reward) { value_ = decay_ * value_ + (1.0 - decay_) * mean_reward; }

 private:
  double decay_;
  double value_;
};

/// Learning-rate schedules. FixedDecay(p) halves every p epochs;
/// DynamicReduce(n) halves once the dev metric has failed to improve for n
/// consecutive epochs, and restarts its patience after an improvement or a
/// reduction.
class LrSchedule {
 public:
  LrSchedule(ScheduleConfig config, double lr_e, double lr) : config_(config), lr_e_(lr_e), lr_(lr) {}

  /// Call once after each completed epoch (1-based). Returns the new rest-of-
  /// model learning rate.
  double update(std::size_t epoch, std::optional<double> dev_metric) {
    if (config_.kind == ScheduleConfig::Kind::FixedDecay) {
      if (epoch > 0 && epoch % config_.n == 0) halve();
      return lr_;
    }
    if (!dev_metric) throw std::invalid_argument("DynamicReduce needs a dev metric every epoch");
    if (*dev_metric > best_) {
      best_ = *dev_metric;
      stale_ = 0;
    } else if (++stale_ >= config_.n) {
      halve();
      stale_ = 0;
    }
    return lr_;
  }

  double lr_e() const noexcept { return lr_e_; }
  double lr() const noexcept { return lr_; }
  std::size_t reductions() const noexcept { return reductions_; }

 private:
  void halve() {
    lr_e_ *= 0.5;
    lr_ *= 0.5;
    ++reductions_;
  }

  ScheduleConfig config_;
  double lr_e_;
  double lr_;
  double best_ = -std::numeric_limits<double>::infinity();
  std::size_t stale_ = 0;
  std::size_t reductions_ = 0;
};

/// r = |sampled ∩ S| / |S|
inline double reward(const PredictionPath& sampled, const CertainNodeSet& s) {
  if (s.members.empty()) throw Error(ErrorCode::EmptyRewardSet, "reward set is empty");
  std::set<NodeId> seen(sampled.begin(), sampled.end());
  std::size_t hits = 0;
  for (NodeId v : s.members) hits += seen.count(v);
  return static_cast<double>(hits) / static_cast<double>(s.members.size());
}

/// Decoder target padded to max_len. Only the first `length` steps are
/// supervised; what follows is padding.
struct TargetPath {
  std::vector<TokenId> steps;
  std::size_t length = 0;
};

/// One minibatch in the layout the training step consumes.
struct Batch {
  std::vector<std::vector<double>> inputs;
  std::vector<std::vector<TargetPath>> targets;  // deterministic targets; empty for policy samples
  std::vector<std::size_t> policy_indexes;       // I_pg
  std::vector<CertainNodeSet> reward_sets;       // per sample
};

/// Token target for a groundtruth path. Leaf labels end with a supervised
/// EOP; a label that has children (a coarse annotation) supervises only the
/// prefix it pins down.
inline TargetPath make_target(const LabelGraph& graph, const Vocabulary& vocab, const PredictionPath& path,
                              std::size_t max_len) {
  TargetPath t;
  t.steps.assign(path.begin(), path.end());
  if (graph.is_leaf(path.back())) t.steps.push_back(vocab.eop());
  t.length = std::min(t.steps.size(), max_len);
  t.steps.resize(std::max(max_len, t.steps.size()), vocab.eop());
  t.steps.resize(max_len);
  return t;
}

struct DeterministicLoss {
  num::Var loss;
  std::size_t samples = 0;
  /// Tokens fed into the decoder, per sample and target path, START first.
  std::vector<std::vector<std::vector<TokenId>>> fed_tokens;
};

/// L_d: negative log-likelihood of the target paths, summed over steps,
/// pooled over a sample's paths (mean or sum), averaged over the samples that
/// carry targets. With `teacher` the groundtruth prefix is fed; otherwise the
/// decoder's own argmax is fed and a path stops contributing once its target
/// leaves the admissible set.
inline DeterministicLoss deterministic_loss(num::Tape& t, const LabelPathModel::Bound& p,
                                            const LabelPathModel& model, const Batch& batch, bool teacher,
                                            PathAggregation aggregation) {
  DeterministicLoss out;
  const TokenId start = model.vocab().start();
  const TokenId eop = model.vocab().eop();
  std::vector<num::Var> per_sample;
  out.fed_tokens.resize(batch.inputs.size());
  for (std::size_t k = 0; k < batch.inputs.size(); ++k) {
    const auto& targets = batch.targets[k];
    if (targets.empty()) continue;
    num::Var f0 = model.encode(t, p, batch.inputs[k]);
    std::vector<num::Var> per_path;
    for (const TargetPath& target : targets) {
      std::vector<num::Var> terms;
      std::vector<TokenId> fed;
      num::Var f = f0;
      TokenId prev = start;
      for (std::size_t i = 0; i < target.length; ++i) {
        const CandidateSet& cands = model.candidates(prev);
        if (cands.tokens.empty()) break;
        std::size_t pos = cands.position(target.steps[i]);
        if (pos == CandidateSet::npos) {
          if (teacher)
            throw Error(ErrorCode::InvalidPath, "target step is not admissible",
                        {model.token_name(target.steps[i]), model.token_name(prev)});
          break;
        }
        fed.push_back(prev);
        auto s = model.step(t, p, f, prev);
        terms.push_back(t.pick(s.log_probs, pos));
        f = s.state;
        if (teacher) {
          prev = target.steps[i];
        } else {
          const auto& lp = t.value(s.log_probs).data;
          std::vector<double> probs(lp.size());
          for (std::size_t j = 0; j < lp.size(); ++j) probs[j] = std::exp(lp[j]);
          prev = cands.tokens[argmax_candidate(probs)];
        }
        if (prev == eop) break;
      }
      out.fed_tokens[k].push_back(std::move(fed));
      per_path.push_back(t.scale(t.add_all(terms), -1.0));
    }
    num::Var pooled = t.add_all(per_path);
    if (aggregation != PathAggregation::Sum) pooled = t.scale(pooled, 1.0 / static_cast<double>(per_path.size()));
    per_sample.push_back(pooled);
  }
  out.samples = per_sample.size();
  out.loss = t.add_all(per_sample);
  if (out.samples > 1) out.loss = t.scale(out.loss, 1.0 / static_cast<double>(out.samples));
  return out;
}

struct PolicyLoss {
  num::Var surrogate;
  std::vector<double> rewards;
  std::vector<SampledPath> samples;
  double baseline_used = 0.0;
};

/// REINFORCE with a scalar baseline. One free-running sample per selected
/// input; surrogate = mean_k( -sum_t log q(chosen_t) * (r_k - b) ), where q is
/// the sampler's emission probability (the block probability when a step has
/// one block). Reward and baseline enter as constants. The baseline is
/// updated after use.
inline PolicyLoss policy_gradient_loss(num::Tape& t, const LabelPathModel::Bound& p, const LabelPathModel& model,
                                       const Batch& batch, BaselineEstimator& baseline, Rng& rng,
                                       std::size_t max_len) {
  PolicyLoss out;
  out.baseline_used = baseline.value();
  std::vector<num::Var> terms;
  for (std::size_t k : batch.policy_indexes) {
    const CertainNodeSet& s = batch.reward_sets.at(k);
    if (s.members.empty()) throw Error(ErrorCode::EmptyRewardSet, "reward set is empty");
    num::Var f0 = model.encode(t, p, batch.inputs.at(k));
    auto drawn = model.sample(t, p, f0, rng, max_len);
    double r = reward(drawn.path.nodes, s);
    num::Var log_prob = t.add_all(drawn.chosen_log_probs);
    terms.push_back(t.scale(log_prob, -(r - out.baseline_used)));
    out.rewards.push_back(r);
    out.samples.push_back(std::move(drawn.path));
  }
  out.surrogate = t.add_all(terms);
  if (terms.size() > 1) out.surrogate = t.scale(out.surrogate, 1.0 / static_cast<double>(terms.size()));
  if (!out.rewards.empty()) {
    double mean = std::accumulate(out.rewards.begin(), out.rewards.end(), 0.0) / out.rewards.size();
    baseline.update(mean);
  }
  return out;
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss = 0.0;
  double loss_d = 0.0;
  double loss_nd = 0.0;
  double mean_reward = 0.0;
  std::size_t deterministic_samples = 0;
  std::size_t policy_samples = 0;
  std::optional<double> dev_metric;
  double lr_e = 0.0;
  double lr = 0.0;
};

inline nlohmann::json to_json(const EpochMetrics& m) {
  nlohmann::json j{{"epoch", m.epoch},
                   {"loss", m.loss},
                   {"loss_d", m.loss_d},
                   {"loss_nd", m.loss_nd},
                   {"mean_reward", m.mean_reward},
                   {"deterministic_samples", m.deterministic_samples},
                   {"policy_samples", m.policy_samples},
                   {"lr_e", m.lr_e},
                   {"lr", m.lr}};
  j["dev_accuracy"] = m.dev_metric ? nlohmann::json(*m.dev_metric) : nlohmann::json(nullptr);
  return j;
}

/// Owns the optimization state for one model: Adam with separate encoder and
/// decoder learning rates, the schedule, and the reward baseline.
class Trainer {
 public:
  Trainer(LabelPathModel& model, TrainConfig config)
      : model_(&model),
        config_(config),
        cache_(model.graph()),
        schedule_(config.schedule, config.lr_e, config.lr),
        baseline_(config.baseline_decay) {
    config_.check();
    encoder_group_ = adam_.add_group(model.encoder_parameters(), config.lr_e);
    decoder_group_ = adam_.add_group(model.decoder_parameters(), config.lr);
  }

  const TrainConfig& config() const noexcept { return config_; }
  const BaselineEstimator& baseline() const noexcept { return baseline_; }
  const LrSchedule& schedule() const noexcept { return schedule_; }

  /// Assembles a batch: deterministic targets (capped at n_p, or a single
  /// random one) for labels that have deterministic paths; the remaining
  /// samples go to the policy-gradient index set.
  Batch make_batch(std::span<const Sample* const> samples, Rng& rng) const {
    const LabelGraph& g = model_->graph();
    Batch b;
    for (std::size_t k = 0; k < samples.size(); ++k) {
      const Sample& s = *samples[k];
      auto id = g.find(s.label);
      if (!id || !g.is_label(*id)) throw Error(ErrorCode::UnresolvableLabel, "label not in graph", {s.label});
      const auto& entry = cache_.get(*id);
      b.inputs.push_back(s.x);
      b.reward_sets.push_back(config_.reward_set == RewardSetKind::Certain ? entry.certain
                                                                            : CertainNodeSet{*id, {*id}});
      std::vector<TargetPath> targets;
      const auto& det = entry.paths.deterministic;
      if (det.empty()) {
        b.policy_indexes.push_back(k);
      } else if (config_.path_agg == PathAggregation::Random) {
        std::uniform_int_distribution<std::size_t> pick(0, det.size() - 1);
        targets.push_back(make_target(g, model_->vocab(), det[pick(rng)], config_.max_len));
      } else {
        std::vector<std::size_t> chosen(det.size());
        std::iota(chosen.begin(), chosen.end(), std::size_t{0});
        if (chosen.size() > config_.n_p) {
          std::shuffle(chosen.begin(), chosen.end(), rng);
          chosen.resize(config_.n_p);
          std::sort(chosen.begin(), chosen.end());
        }
        for (std::size_t i : chosen) targets.push_back(make_target(g, model_->vocab(), det[i], config_.max_len));
      }
      b.targets.push_back(std::move(targets));
    }
    return b;
  }

  struct StepResult {
    double loss = 0.0;
    double loss_d = 0.0;
    double loss_nd = 0.0;
    std::size_t deterministic_samples = 0;
    std::vector<double> rewards;
  };

  /// One optimization step: coin ~ U(0,1) once per batch decides teacher
  /// forcing, then alpha * L_d + beta * L_nd is backpropagated and Adam steps.
  StepResult train_batch(const Batch& batch, Rng& rng) {
    num::Tape t;
    auto p = model_->bind(t);
    const bool teacher = uniform01(rng) <= config_.r_tf;
    StepResult r;
    auto det = deterministic_loss(t, p, *model_, batch, teacher, config_.path_agg);
    r.loss_d = t.value(det.loss).item();
    r.deterministic_samples = det.samples;
    std::vector<num::Var> total{t.scale(det.loss, config_.alpha)};
    if (!batch.policy_indexes.empty()) {
      auto pg = policy_gradient_loss(t, p, *model_, batch, baseline_, rng, config_.max_len);
      r.loss_nd = t.value(pg.surrogate).item();
      r.rewards = std::move(pg.rewards);
      total.push_back(t.scale(pg.surrogate, config_.beta));
    }
    num::Var loss = t.add_all(total);
    r.loss = t.value(loss).item();
    adam_.zero_grad();
    t.backward(loss);
    adam_.step();
    return r;
  }

  EpochMetrics train_epoch(const std::vector<Sample>& data, std::size_t epoch) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng = stream(config_.seed, {epoch, 0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    EpochMetrics m;
    m.epoch = epoch;
    std::size_t batches = 0, reward_count = 0;
    for (std::size_t start = 0, bi = 0; start < order.size(); start += config_.batch_size, ++bi) {
      const std::size_t end = std::min(order.size(), start + config_.batch_size);
      std::vector<const Sample*> members;
      for (std::size_t i = start; i < end; ++i) members.push_back(&data[order[i]]);
      Rng rng = stream(config_.seed, {epoch, bi + 1});
      Batch batch = make_batch(members, rng);
      auto r = train_batch(batch, rng);
      m.loss += r.loss;
      m.loss_d += r.loss_d;
      m.loss_nd += r.loss_nd;
      m.deterministic_samples += r.deterministic_samples;
      m.policy_samples += r.rewards.size();
      for (double x : r.rewards) m.mean_reward += x;
      reward_count += r.rewards.size();
      ++batches;
    }
    if (batches) {
      m.loss /= static_cast<double>(batches);
      m.loss_d /= static_cast<double>(batches);
      m.loss_nd /= static_cast<double>(batches);
    }
    if (reward_count) m.mean_reward /= static_cast<double>(reward_count);
    m.lr_e = schedule_.lr_e();
    m.lr = schedule_.lr();
    return m;
  }

  /// Full run: epochs 1..config.epochs, the dev metric (if any) after each,
  /// then the schedule update.
  std::vector<EpochMetrics> fit(const std::vector<Sample>& train,
                                const std::function<std::optional<double>()>& dev_metric = {},
                                const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
    std::vector<EpochMetrics> out;
    for (std::size_t epoch = 1; epoch <= config_.epochs; ++epoch) {
      EpochMetrics m = train_epoch(train, epoch);
      if (dev_metric) m.dev_metric = dev_metric();
      schedule_.update(epoch, m.dev_metric);
      adam_.set_lr(encoder_group_, schedule_.lr_e());
      adam_.set_lr(decoder_group_, schedule_.lr());
      if (on_epoch) on_epoch(m);
      out.push_back(m);
    }
    return out;
  }

 private:
  LabelPathModel* model_;
  TrainConfig config_;
  PathCache cache_;
  LrSchedule schedule_;
  BaselineEstimator baseline_;
  num::Adam adam_;
  std::size_t encoder_group_ = 0;
  std::size_t decoder_group_ = 0;
};

// ---------------------------------------------------------------------------
// Config file

struct RunConfig {
  std::string graph;
  std::string train;
  std::string dev;
  TrainConfig train_config;
  std::size_t embed_dim = 16;
  std::size_t hidden = 32;
  // optional harness inputs
  std::string test;
  std::string coarse;
  nlohmann::json extra;  // keys the harness reads itself (ablation variants)
};

namespace detail {

inline std::string resolve_path(const std::string& base_dir, const std::string& p) {
  if (p.empty() || p.front() == '/' || base_dir.empty()) return p;
  return base_dir + "/" + p;
}

}  // namespace detail

/// Parses the training config. Required keys are exactly the documented
/// ones; "embed_dim", "hidden", "baseline_decay", "test", "coarse" and the
/// ablation keys are optional. Relative paths resolve against `base_dir`.
inline RunConfig parse_run_config(const nlohmann::json& j, const std::string& base_dir = "") {
  static const std::vector<std::string> required{"graph", "train", "dev", "batch_size", "max_len", "r_tf",
                                                 "alpha", "beta", "path_agg", "n_p", "reward_set", "lr_e",
                                                 "lr", "schedule", "epochs", "seed"};
  static const std::vector<std::string> optional{"embed_dim", "hidden", "baseline_decay", "test", "coarse",
                                                 "graph_trims", "aggregations", "seeds"};
  if (!j.is_object()) throw Error(ErrorCode::FormatError, "config must be a JSON object");
  for (const auto& k : required)
    if (!j.contains(k)) throw Error(ErrorCode::FormatError, "config is missing a key", {k});
  for (const auto& [k, v] : j.items())
    if (std::find(required.begin(), required.end(), k) == required.end() &&
        std::find(optional.begin(), optional.end(), k) == optional.end())
      throw Error(ErrorCode::FormatError, "config has an unexpected key", {k});
  try {
    RunConfig rc;
    rc.graph = detail::resolve_path(base_dir, j.at("graph").get<std::string>());
    rc.train = detail::resolve_path(base_dir, j.at("train").get<std::string>());
    rc.dev = detail::resolve_path(base_dir, j.at("dev").get<std::string>());
    TrainConfig& c = rc.train_config;
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.max_len = j.at("max_len").get<std::size_t>();
    c.r_tf = j.at("r_tf").get<double>();
    c.alpha = j.at("alpha").get<double>();
    c.beta = j.at("beta").get<double>();
    auto agg = j.at("path_agg").get<std::string>();
    if (agg == "mean") c.path_agg = PathAggregation::Mean;
    else if (agg == "sum") c.path_agg = PathAggregation::Sum;
    else if (agg == "random") c.path_agg = PathAggregation::Random;
    else throw Error(ErrorCode::FormatError, "path_agg must be mean|sum|random", {agg});
    c.n_p = j.at("n_p").get<std::size_t>();
    auto rs = j.at("reward_set").get<std::string>();
    if (rs == "certain") c.reward_set = RewardSetKind::Certain;
    else if (rs == "label_only") c.reward_set = RewardSetKind::LabelOnly;
    else throw Error(ErrorCode::FormatError, "reward_set must be certain|label_only", {rs});
    c.lr_e = j.at("lr_e").get<double>();
    c.lr = j.at("lr").get<double>();
    const auto& sched = j.at("schedule");
    detail::require_keys(sched, {"kind", "n"}, "schedule");
    auto kind = sched.at("kind").get<std::string>();
    if (kind == "fixed") c.schedule.kind = ScheduleConfig::Kind::FixedDecay;
    else if (kind == "dynamic") c.schedule.kind = ScheduleConfig::Kind::DynamicReduce;
    else throw Error(ErrorCode::FormatError, "schedule.kind must be fixed|dynamic", {kind});
    c.schedule.n = sched.at("n").get<std::size_t>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("baseline_decay")) c.baseline_decay = j.at("baseline_decay").get<double>();
    if (j.contains("embed_dim")) rc.embed_dim = j.at("embed_dim").get<std::size_t>();
    if (j.contains("hidden")) rc.hidden = j.at("hidden").get<std::size_t>();
    if (j.contains("test")) rc.test = detail::resolve_path(base_dir, j.at("test").get<std::string>());
    if (j.contains("coarse")) rc.coarse = detail::resolve_path(base_dir, j.at("coarse").get<std::string>());
    for (const char* k : {"graph_trims", "aggregations", "seeds"})
      if (j.contains(k)) rc.extra[k] = j.at(k);
    c.check();
    return rc;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, e.what());
  }
}

}  // namespace pathcast
