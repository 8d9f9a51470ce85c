// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "support.hpp"

using namespace pathcast;
namespace t = pathcast::testing;

namespace {

std::shared_ptr<const LabelGraph> share(LabelGraph g) { return std::make_shared<const LabelGraph>(std::move(g)); }

// root -> {x, y}: one implicit two-way block.
LabelGraph two_way() { return build_graph("root", {{"d", {"x", "y"}}}, {}, {{"root", "x"}, {"root", "y"}}, {}); }

void zero_output(LabelPathModel& m) {
  for (auto* p : m.parameters())
    if (p->name().rfind("decoder.out", 0) == 0) std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
}

std::vector<num::Tensor> grads(LabelPathModel& m) {
  std::vector<num::Tensor> out;
  for (auto* p : m.parameters()) out.push_back(p->grad);
  return out;
}

std::vector<num::Tensor> values(LabelPathModel& m) {
  std::vector<num::Tensor> out;
  for (auto* p : m.parameters()) out.push_back(p->value);
  return out;
}

// Deterministic-only synthetic task: every attribute fixed per label.
SynthSpec deterministic_spec() {
  SynthSpec s;
  s.determinism = {{0, 0, 0}, {1, 1, 1}, {0, 2, 1}, {1, 0, 0}, {0, 1, 1}, {1, 2, 0}};
  s.n_fine = 400;
  s.n_coarse = 10;
  s.n_dev = 10;
  s.n_test = 10;
  return s;
}

}  // namespace

TEST(Reward, Examples) {
  auto g = t::figure2();
  const NodeId animal = g.root(), cat = g.id_of("cat"), bsh = g.id_of("british-shorthair");
  CertainNodeSet s{bsh, {animal, cat, bsh}};
  EXPECT_DOUBLE_EQ(reward({animal, cat, g.id_of("shorthair"), bsh}, s), 1.0);
  EXPECT_DOUBLE_EQ(reward({animal, cat, g.id_of("longhair")}, s), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(reward({g.id_of("tabby-color")}, s), 0.0);
  try {
    reward({animal}, CertainNodeSet{bsh, {}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyRewardSet);
  }
}

TEST(Reward, BoundedAndOneIffCovering) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 100; ++i) {
    auto g = t::random_dag(rng);
    for (NodeId v = 0; v < g.node_count(); ++v) {
      if (!g.is_label(v)) continue;
      auto s = certain_nodes(g, v);
      for (const auto& p : enumerate_paths(g, v)) EXPECT_DOUBLE_EQ(reward(p, s), 1.0);
      PredictionPath partial(enumerate_paths(g, v).front());
      partial.pop_back();
      double r = reward(partial, s);
      EXPECT_GE(r, 0.0);
      EXPECT_LT(r, 1.0);
    }
  }
}

TEST(Baseline, EmaStaysInsideRewardHull) {
  BaselineEstimator b(0.9, 0.0);
  b.update(1.0);
  EXPECT_DOUBLE_EQ(b.value(), 0.1);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 1000; ++i) {
    b.update(u(rng));
    EXPECT_GE(b.value(), 0.0);
    EXPECT_LE(b.value(), 1.0);
  }
}

TEST(MakeTarget, LeafGetsEopAndPadding) {
  auto g = t::figure2();
  Vocabulary v(g.node_count());
  PredictionPath p = classify_paths(g, g.id_of("british-shorthair")).deterministic[0];
  auto target = make_target(g, v, p, 8);
  EXPECT_EQ(target.length, 5u);
  EXPECT_EQ(target.steps.size(), 8u);
  EXPECT_EQ(target.steps[4], v.eop());
  // a label with children supervises only its prefix
  auto coarse = make_target(g, v, {g.root(), g.id_of("cat")}, 8);
  EXPECT_EQ(coarse.length, 2u);
}

TEST(DeterministicLoss, ForcedChainIsZero) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto g = share(t::chain());
    LabelPathModel m(g, {2, 3, 4}, seed);
    Batch b;
    b.inputs = {{0.1, 0.2}, {-1, 3}};
    auto target = make_target(*g, m.vocab(), enumerate_paths(*g, g->id_of("x")).front(), 8);
    b.targets = {{target}, {target}};
    b.reward_sets.resize(2);
    num::Tape tape;
    auto p = m.bind(tape);
    EXPECT_EQ(tape.value(deterministic_loss(tape, p, m, b, true, PathAggregation::Mean).loss).item(), 0.0);
  }
}

TEST(DeterministicLoss, UniformTwoWayBlockIsLn2) {
  auto g = share(two_way());
  LabelPathModel m(g, {3, 4, 5}, 1);
  zero_output(m);
  Batch b;
  std::mt19937_64 rng(0);
  std::normal_distribution<double> d(0, 1);
  for (int k = 0; k < 4; ++k) {
    b.inputs.push_back({d(rng), d(rng), d(rng)});
    b.targets.push_back({make_target(*g, m.vocab(), PredictionPath{g->root(), g->id_of(k % 2 ? "x" : "y")}, 8)});
  }
  b.reward_sets.resize(4);
  num::Tape tape;
  auto p = m.bind(tape);
  auto loss = deterministic_loss(tape, p, m, b, true, PathAggregation::Mean);
  EXPECT_NEAR(tape.value(loss.loss).item(), std::log(2.0), 1e-9);
  EXPECT_EQ(loss.samples, 4u);
}

TEST(DeterministicLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(77);
  for (int i = 0; i < 5; ++i) {
    auto g = share(t::layered_dag(rng));
    LabelPathModel m(g, {3, 4, 6}, static_cast<std::uint64_t>(i));
    auto b = t::random_batch(*g, m, 3, rng);
    EXPECT_LE(t::deterministic_loss_fd(m, b, PathAggregation::Mean), 1e-4);
    EXPECT_LE(t::deterministic_loss_fd(m, b, PathAggregation::Sum), 1e-4);
  }
}

TEST(DeterministicLoss, PaddingAfterEndIsIgnored) {
  auto g = share(t::figure2());
  LabelPathModel m(g, {2, 4, 5}, 3);
  auto path = classify_paths(*g, g->id_of("british-shorthair")).deterministic[0];
  Batch b;
  b.inputs = {{0.3, 0.1}};
  b.targets = {{make_target(*g, m.vocab(), path, 8)}};
  b.reward_sets.resize(1);
  auto eval = [&](const Batch& batch) {
    num::Tape tape;
    auto p = m.bind(tape);
    return tape.value(deterministic_loss(tape, p, m, batch, true, PathAggregation::Mean).loss).item();
  };
  const double base = eval(b);
  Batch perturbed = b;
  for (std::size_t i = perturbed.targets[0][0].length; i < 8; ++i) perturbed.targets[0][0].steps[i] = g->id_of("cat");
  EXPECT_EQ(eval(perturbed), base);
}

TEST(DeterministicLoss, FreeRunningFeedsArgmaxTokens) {
  auto g = share(t::figure2());
  const NodeId bengal = g->id_of("bengal");
  bool found = false;
  for (std::uint64_t seed = 0; seed < 50 && !found; ++seed) {
    LabelPathModel m(g, {2, 4, 5}, seed);
    Batch b;
    b.inputs = {{0.5, -0.5}};
    std::vector<TargetPath> targets;
    for (const auto& p : classify_paths(*g, bengal).deterministic) targets.push_back(make_target(*g, m.vocab(), p, 8));
    b.targets = {targets};
    b.reward_sets.resize(1);
    num::Tape t1, t2;
    auto p1 = m.bind(t1);
    auto p2 = m.bind(t2);
    auto teacher = deterministic_loss(t1, p1, m, b, true, PathAggregation::Mean);
    auto free = deterministic_loss(t2, p2, m, b, false, PathAggregation::Mean);
    // does the model's own choice at some step differ from the target?
    auto f = m.encode(b.inputs[0]);
    TokenId prev = m.vocab().start();
    bool differs = false;
    for (TokenId tok : b.targets[0][0].steps) {
      auto [d, next] = m.step(f, prev);
      if (d.candidates[argmax_candidate(d.probs)] != tok) {
        differs = true;
        break;
      }
      if (tok == m.vocab().eop()) break;
      f = next;
      prev = tok;
    }
    if (!differs) continue;
    found = true;
    EXPECT_NE(teacher.fed_tokens, free.fed_tokens);
    // the teacher-forced stream is the target prefix
    const auto& fed = teacher.fed_tokens[0][0];
    EXPECT_EQ(fed.front(), m.vocab().start());
    for (std::size_t i = 1; i < fed.size(); ++i) EXPECT_EQ(fed[i], b.targets[0][0].steps[i - 1]);
  }
  EXPECT_TRUE(found);
}

TEST(PolicyLoss, ForcedChainSurrogateIsZero) {
  auto g = share(t::chain());
  LabelPathModel m(g, {2, 3, 4}, 1);
  Batch b;
  b.inputs = {{1, 2}};
  b.targets.resize(1);
  b.policy_indexes = {0};
  b.reward_sets = {certain_nodes(*g, g->id_of("x"))};
  num::Tape tape;
  auto p = m.bind(tape);
  BaselineEstimator base(0.9, 0.3);
  Rng rng(0);
  auto pg = policy_gradient_loss(tape, p, m, b, base, rng, 8);
  EXPECT_EQ(tape.value(pg.surrogate).item(), 0.0);
  EXPECT_DOUBLE_EQ(pg.rewards[0], 1.0);
  EXPECT_DOUBLE_EQ(base.value(), 0.9 * 0.3 + 0.1);
  EXPECT_DOUBLE_EQ(pg.baseline_used, 0.3);
}

TEST(PolicyLoss, RewardEqualToBaselineGivesZeroGradient) {
  auto g = share(t::figure2());
  LabelPathModel m(g, {2, 4, 5}, 2);
  Batch b;
  b.inputs = {{1, 2}, {0, -1}};
  b.targets.resize(2);
  b.policy_indexes = {0, 1};
  // the root is on every sampled path, so the reward is always 1
  b.reward_sets = {CertainNodeSet{g->id_of("bengal"), {g->root()}}, CertainNodeSet{g->id_of("bengal"), {g->root()}}};
  num::Tape tape;
  auto p = m.bind(tape);
  BaselineEstimator base(0.9, 1.0);
  Rng rng(4);
  auto pg = policy_gradient_loss(tape, p, m, b, base, rng, 8);
  for (auto* q : m.parameters()) q->zero_grad();
  tape.backward(pg.surrogate);
  for (auto* q : m.parameters())
    for (double v : q->grad.data) EXPECT_EQ(v, 0.0) << q->name();
}

TEST(PolicyLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(78);
  for (int i = 0; i < 5; ++i) {
    auto g = share(t::layered_dag(rng));
    LabelPathModel m(g, {3, 4, 6}, static_cast<std::uint64_t>(i));
    auto b = t::random_batch(*g, m, 3, rng);
    EXPECT_LE(t::policy_loss_fd(m, b, 100 + i, 0.4), 1e-4);
  }
}

namespace {

// Mean surrogate gradient over `trials` draws with reward fixed at 1 and the
// baseline at 0.25; returns (norm of the mean, standard error of it).
std::pair<double, double> mean_gradient(LabelPathModel& m, const Batch& b, int trials) {
  auto params = m.parameters();
  std::size_t dim = 0;
  for (auto* q : params) dim += q->value.size();
  std::vector<double> mean(dim, 0.0), sq(dim, 0.0);
  for (int trial = 0; trial < trials; ++trial) {
    num::Tape tape;
    auto p = m.bind(tape);
    BaselineEstimator base(0.9, 0.25);
    Rng rng = stream(12, {static_cast<std::uint64_t>(trial)});
    auto pg = policy_gradient_loss(tape, p, m, b, base, rng, 8);
    for (auto* q : params) q->zero_grad();
    tape.backward(pg.surrogate);
    std::size_t k = 0;
    for (auto* q : params)
      for (double v : q->grad.data) {
        mean[k] += v;
        sq[k] += v * v;
        ++k;
      }
  }
  double norm2 = 0.0, se2 = 0.0;
  for (std::size_t k = 0; k < dim; ++k) {
    const double mu = mean[k] / trials;
    norm2 += mu * mu;
    se2 += std::max(0.0, sq[k] / trials - mu * mu) / trials;
  }
  return {std::sqrt(norm2), std::sqrt(se2)};
}

Batch constant_reward_batch(const LabelGraph& g, NodeId label) {
  Batch b;
  b.inputs = {{0.7, -0.2}};
  b.targets.resize(1);
  b.policy_indexes = {0};
  b.reward_sets = {CertainNodeSet{label, {g.root()}}};  // every sample covers the root
  return b;
}

}  // namespace

TEST(PolicyLoss, ConstantRewardHasZeroExpectedGradientSingleBlock) {
  auto g = share(build_graph("root", {{"d", {"x", "y", "z"}}}, {{"a", {"root"}}, {"b", {"root"}}},
                             {{"a", "x"}, {"a", "y"}, {"b", "y"}, {"b", "z"}}, {}));
  LabelPathModel m(g, {2, 3, 4}, 6);
  auto [norm, se] = mean_gradient(m, constant_reward_batch(*g, g->id_of("x")), 10000);
  EXPECT_GT(se, 0.0);
  EXPECT_LE(norm, 3.0 * se);
}

// Steps with several blocks: the emitted token is scored by its cross-block
// emission probability, which keeps the estimator unbiased.
TEST(PolicyLoss, ConstantRewardHasZeroExpectedGradientAcrossBlocks) {
  auto g = share(t::figure2());
  for (std::uint64_t seed : {6u, 7u}) {
    LabelPathModel m(g, {2, 3, 4}, seed);
    auto [norm, se] = mean_gradient(m, constant_reward_batch(*g, g->id_of("cat")), 10000);
    EXPECT_GT(se, 0.0);
    EXPECT_LE(norm, 3.0 * se) << "seed " << seed;
  }
}

TEST(PolicyLoss, BanditConverges) {
  auto run = t::run_bandit(0);
  ASSERT_TRUE(run.first_hit.has_value());
  EXPECT_LE(*run.first_hit, 500u);
}

TEST(Trainer, MakeBatchAssignsTargetsAndPolicySamples) {
  auto g = share(t::figure2());
  LabelPathModel m(g, {2, 4, 5}, 0);
  // a label with only nondeterministic paths: below every color
  auto g2 = share(build_graph("animal", {{"pets", {"cat", "ragdoll"}}},
                              {{"solid-color", {"cat"}}, {"point-color", {"cat"}}},
                              {{"animal", "cat"}, {"solid-color", "ragdoll"}, {"point-color", "ragdoll"}},
                              {{"color", {"solid-color", "point-color"}}}));
  LabelPathModel m2(g2, {2, 4, 5}, 0);
  TrainConfig cfg;
  cfg.n_p = 1;
  Trainer tr(m2, cfg);
  std::vector<Sample> data{{{0, 0}, "cat", {}}, {{1, 1}, "ragdoll", {}}};
  std::vector<const Sample*> ptrs{&data[0], &data[1]};
  Rng rng(0);
  auto b = tr.make_batch(ptrs, rng);
  EXPECT_EQ(b.policy_indexes, std::vector<std::size_t>{1});
  ASSERT_EQ(b.targets[0].size(), 1u);
  EXPECT_TRUE(b.targets[1].empty());
  EXPECT_EQ(b.reward_sets[1].members, (std::set<NodeId>{g2->root(), g2->id_of("cat"), g2->id_of("ragdoll")}));

  // caps: bengal has two deterministic paths
  std::vector<Sample> bengal{{{0, 0}, "bengal", {}}};
  std::vector<const Sample*> one{&bengal[0]};
  for (auto [agg, cap, want] : {std::tuple{PathAggregation::Mean, 4u, 2u}, std::tuple{PathAggregation::Mean, 1u, 1u},
                                std::tuple{PathAggregation::Random, 4u, 1u}, std::tuple{PathAggregation::Sum, 4u, 2u}}) {
    TrainConfig c;
    c.path_agg = agg;
    c.n_p = cap;
    c.reward_set = RewardSetKind::LabelOnly;
    Trainer trb(m, c);
    auto batch = trb.make_batch(one, rng);
    EXPECT_EQ(batch.targets[0].size(), want);
    EXPECT_EQ(batch.reward_sets[0].members, std::set<NodeId>{g->id_of("bengal")});
  }

  std::vector<Sample> bad{{{0, 0}, "dragon", {}}};
  std::vector<const Sample*> badp{&bad[0]};
  EXPECT_THROW(tr.make_batch(badp, rng), Error);
}

TEST(Trainer, AlphaOneBetaZeroIsPureDeterministicGradient) {
  std::mt19937_64 rng(31);
  for (int i = 0; i < 5; ++i) {
    auto g = share(t::layered_dag(rng));
    LabelPathModel m(g, {3, 4, 6}, static_cast<std::uint64_t>(i));
    auto b = t::random_batch(*g, m, 6, rng);
    LabelPathModel reference = m;
    TrainConfig cfg;
    cfg.beta = 0.0;
    Trainer tr(m, cfg);
    Rng step_rng(9);
    tr.train_batch(b, step_rng);
    num::Tape tape;
    auto p = reference.bind(tape);
    auto d = deterministic_loss(tape, p, reference, b, true, PathAggregation::Mean);
    for (auto* q : reference.parameters()) q->zero_grad();
    tape.backward(d.loss);
    EXPECT_EQ(grads(m), grads(reference));
  }
}

TEST(Trainer, IdenticalSeedsGiveIdenticalParameters) {
  auto data = synth_generate(deterministic_spec());
  auto run = [&] {
    LabelPathModel m(data.graph, {deterministic_spec().input_dim(), 8, 16}, 5);
    TrainConfig cfg;
    cfg.seed = 5;
    Trainer tr(m, cfg);
    tr.train_epoch(data.fine.samples, 1);
    return values(m);
  };
  EXPECT_EQ(run(), run());
}

TEST(Trainer, DeterministicTaskLossMovingAverageNonIncreasing) {
  auto spec = deterministic_spec();
  auto data = synth_generate(spec);
  LabelPathModel m(data.graph, {spec.input_dim(), 8, 16}, 1);
  TrainConfig cfg;
  cfg.beta = 0.0;
  cfg.epochs = 10;
  cfg.seed = 1;
  Trainer tr(m, cfg);
  std::vector<double> losses;
  for (const auto& e : tr.fit(data.fine.samples)) {
    EXPECT_EQ(e.policy_samples, 0u);
    losses.push_back(e.loss);
  }
  std::vector<double> avg;
  for (std::size_t i = 2; i < losses.size(); ++i) avg.push_back((losses[i] + losses[i - 1] + losses[i - 2]) / 3.0);
  for (std::size_t i = 1; i < avg.size(); ++i) EXPECT_LE(avg[i], avg[i - 1]) << "window ending at epoch " << i + 3;
}

TEST(Schedule, FixedDecayHalvesEveryPeriod) {
  LrSchedule s({ScheduleConfig::Kind::FixedDecay, 10}, 0.0004, 0.0004);
  std::vector<std::size_t> halved;
  double prev = s.lr();
  for (std::size_t epoch = 1; epoch <= 30; ++epoch) {
    double lr = s.update(epoch, std::nullopt);
    if (lr != prev) halved.push_back(epoch);
    if (epoch == 10) {
      EXPECT_DOUBLE_EQ(lr, 0.0002);
    }
    prev = lr;
  }
  EXPECT_EQ(halved, (std::vector<std::size_t>{10, 20, 30}));
  EXPECT_DOUBLE_EQ(s.lr_e(), 0.00005);
}

TEST(Schedule, DynamicReduceKeepsRateWhileImproving) {
  LrSchedule s({ScheduleConfig::Kind::DynamicReduce, 5}, 1e-3, 1e-3);
  for (std::size_t e = 1; e <= 20; ++e) EXPECT_DOUBLE_EQ(s.update(e, 0.1 * e), 1e-3);
  EXPECT_EQ(s.reductions(), 0u);
  EXPECT_THROW(s.update(21, std::nullopt), std::invalid_argument);
}

TEST(Schedule, DynamicReduceHalvesOnceAfterFiveFlatEpochs) {
  LrSchedule s({ScheduleConfig::Kind::DynamicReduce, 5}, 1e-3, 1e-3);
  s.update(1, 0.5);
  for (std::size_t e = 2; e <= 6; ++e) s.update(e, 0.5);
  EXPECT_EQ(s.reductions(), 1u);
  EXPECT_DOUBLE_EQ(s.lr(), 5e-4);
}

TEST(Schedule, DynamicReduceMatchesCounterTrace) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    LrSchedule s({ScheduleConfig::Kind::DynamicReduce, 5}, 1.0, 1.0);
    double best = -1e300, lr = 1.0;
    int stale = 0;
    for (std::size_t e = 1; e <= 60; ++e) {
      double metric = std::uniform_int_distribution<int>(0, 6)(rng) / 6.0;
      if (metric > best) {
        best = metric;
        stale = 0;
      } else if (++stale == 5) {
        lr /= 2;
        stale = 0;
      }
      ASSERT_EQ(s.update(e, metric), lr);
    }
  }
}

TEST(Config, ParsesExactKeys) {
  nlohmann::json j = {{"graph", "g.json"},  {"train", "t.jsonl"}, {"dev", "/abs/d.jsonl"}, {"batch_size", 8},
                      {"max_len", 6},       {"r_tf", 0.5},        {"alpha", 1.0},          {"beta", 2.0},
                      {"path_agg", "sum"},  {"n_p", 3},           {"reward_set", "label_only"},
                      {"lr_e", 1e-4},       {"lr", 2e-3},         {"schedule", {{"kind", "dynamic"}, {"n", 5}}},
                      {"epochs", 7},        {"seed", 9}};
  auto rc = parse_run_config(j, "/base");
  EXPECT_EQ(rc.graph, "/base/g.json");
  EXPECT_EQ(rc.dev, "/abs/d.jsonl");
  EXPECT_EQ(rc.train_config.batch_size, 8u);
  EXPECT_EQ(rc.train_config.path_agg, PathAggregation::Sum);
  EXPECT_EQ(rc.train_config.reward_set, RewardSetKind::LabelOnly);
  EXPECT_EQ(rc.train_config.schedule.kind, ScheduleConfig::Kind::DynamicReduce);
  EXPECT_EQ(rc.train_config.seed, 9u);

  auto missing = j;
  missing.erase("lr_e");
  EXPECT_THROW(parse_run_config(missing), Error);
  auto extra = j;
  extra["momentum"] = 0.9;
  EXPECT_THROW(parse_run_config(extra), Error);
  auto bad = j;
  bad["r_tf"] = 1.5;
  EXPECT_THROW(parse_run_config(bad), Error);
  auto agg = j;
  agg["path_agg"] = "max";
  EXPECT_THROW(parse_run_config(agg), Error);
}
