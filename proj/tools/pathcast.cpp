// SPDX-License-Identifier: Apache-2.0
// pathcast command-line front end.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pathcast/pathcast.hpp"

namespace fs = std::filesystem;
using namespace pathcast;

namespace {

struct Loaded {
  RunConfig rc;
  std::shared_ptr<const LabelGraph> graph;
  std::vector<Sample> train, dev, test, coarse;
};

Loaded load_run(const std::string& config_path, std::optional<std::uint64_t> seed) {
  Loaded l;
  fs::path cfg(config_path);
  l.rc = parse_run_config(read_json_file(config_path), cfg.parent_path().string());
  if (seed) l.rc.train_config.seed = *seed;
  l.graph = std::make_shared<const LabelGraph>(load_graph(l.rc.graph));
  l.train = read_samples(l.rc.train);
  l.dev = read_samples(l.rc.dev);
  l.test = l.rc.test.empty() ? l.dev : read_samples(l.rc.test);
  if (!l.rc.coarse.empty()) l.coarse = read_samples(l.rc.coarse);
  resolve_labels(*l.graph, l.train);
  resolve_labels(*l.graph, l.dev);
  resolve_labels(*l.graph, l.test);
  resolve_labels(*l.graph, l.coarse);
  if (l.train.empty()) throw Error(ErrorCode::EmptyDataset, "training set is empty", {l.rc.train});
  return l;
}

void print_violation(const Violation& v) {
  std::cout << to_string(v.code) << ": " << v.message;
  for (const auto& n : v.names) std::cout << " [" << n << "]";
  std::cout << "\n";
}

int cmd_graph_validate(const std::string& file) {
  LabelGraph g = unchecked_graph_from_json(read_json_file(file));
  auto violations = validate(g);
  if (violations.empty()) {
    std::cout << "valid\n";
    return 0;
  }
  for (const auto& v : violations) print_violation(v);
  return 1;
}

int cmd_train(const std::string& config, const std::string& out, std::optional<std::uint64_t> seed) {
  Loaded l = load_run(config, seed);
  const std::string metrics_path = out + ".metrics.jsonl";
  std::ofstream metrics(metrics_path, std::ios::binary | std::ios::trunc);
  if (!metrics) throw Error(ErrorCode::IoError, "cannot write metrics", {metrics_path});
  LabelPathModel model(l.graph, model_config(l.rc, l.train.front().x.size()), l.rc.train_config.seed);
  Trainer trainer(model, l.rc.train_config);
  std::function<std::optional<double>()> dev_metric;
  if (!l.dev.empty())
    dev_metric = [&]() -> std::optional<double> { return evaluate(model, l.dev, l.rc.train_config.max_len).accuracy; };
  trainer.fit(l.train, dev_metric, [&](const EpochMetrics& m) {
    metrics << to_json(m).dump() << "\n";
    metrics.flush();
    std::cerr << "epoch " << m.epoch << " loss " << m.loss
              << (m.dev_metric ? " dev " + std::to_string(*m.dev_metric) : std::string()) << "\n";
  });
  model.save(out, fs::weakly_canonical(fs::absolute(l.rc.graph)).string());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, bool audit, const std::string& dump,
             const std::string& out, std::size_t max_len) {
  LabelPathModel model = load_model(ckpt);
  auto samples = read_samples(data);
  std::vector<DecodedResult> decoded;
  MetricsReport m = evaluate_with_audit(model, samples, max_len, audit, &decoded);
  if (!dump.empty()) write_decoded(dump, model, samples, decoded);
  const std::string text = to_json(m).dump(2) + "\n";
  if (!out.empty()) {
    std::ofstream f(out, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorCode::IoError, "cannot write report", {out});
    f << text;
  }
  std::cout << text;
  return 0;
}

int cmd_synth(const std::string& spec_file, const std::string& out_dir, std::optional<std::uint64_t> seed) {
  SynthSpec spec = spec_file.empty() ? SynthSpec{} : synth_spec_from_json(read_json_file(spec_file));
  if (seed) spec.seed = *seed;
  SynthData d = synth_generate(spec);
  fs::create_directories(out_dir);
  fs::path dir(out_dir);
  save_graph(*d.graph, (dir / "graph.json").string());
  write_samples(d.fine.samples, (dir / "fine.jsonl").string());
  write_samples(d.coarse.samples, (dir / "coarse.jsonl").string());
  write_samples(d.dev.samples, (dir / "dev.jsonl").string());
  write_samples(d.test.samples, (dir / "test.jsonl").string());
  nlohmann::json cfg{{"graph", "graph.json"},
                     {"train", "fine.jsonl"},
                     {"dev", "dev.jsonl"},
                     {"test", "test.jsonl"},
                     {"coarse", "coarse.jsonl"},
                     {"batch_size", 16},
                     {"max_len", 8},
                     {"r_tf", 1.0},
                     {"alpha", 1.0},
                     {"beta", 1.0},
                     {"path_agg", "mean"},
                     {"n_p", 4},
                     {"reward_set", "certain"},
                     {"lr_e", 1e-3},
                     {"lr", 1e-3},
                     {"schedule", {{"kind", "fixed"}, {"n", 10}}},
                     {"epochs", 30},
                     {"seed", spec.seed}};
  std::ofstream(dir / "config.json", std::ios::binary) << cfg.dump(2) << "\n";
  std::cout << nlohmann::json{{"graph", stats(*d.graph)},
                              {"input_dim", spec.input_dim()},
                              {"fine", d.fine.samples.size()},
                              {"coarse", d.coarse.samples.size()},
                              {"dev", d.dev.samples.size()},
                              {"test", d.test.samples.size()}}
                   .dump(2)
            << "\n";
  return 0;
}

int cmd_fuse(const std::string& fine, const std::string& coarse, const std::string& graph, const std::string& out) {
  auto g = std::make_shared<const LabelGraph>(load_graph(graph));
  DatasetSpec f{"fine", Granularity::Fine, read_samples(fine)};
  DatasetSpec c{"coarse", Granularity::Coarse, read_samples(coarse)};
  FusionResult r = fuse(f, c, g);
  write_samples(r.fused.samples, out);
  std::cout << nlohmann::json{{"fine", f.samples.size()},
                              {"coarse", c.samples.size()},
                              {"fused", r.fused.samples.size()},
                              {"class_count", r.class_count}}
                   .dump(2)
            << "\n";
  return 0;
}

int cmd_baseline(const std::string& kind, const std::string& config, std::optional<std::uint64_t> seed) {
  Loaded l = load_run(config, seed);
  const TrainConfig& tc = l.rc.train_config;
  const std::size_t dim = l.train.front().x.size();
  nlohmann::json out;
  if (kind == "ffn") {
    FfnClassifier clf(class_list(l.train), dim, l.rc.hidden, tc.seed);
    clf.fit(l.train, tc, l.dev);
    out = to_json(clf.evaluate(l.test));
  } else if (kind == "labelset") {
    LabelSetClassifier clf(l.graph, class_list(l.train), dim, l.rc.hidden, tc.seed);
    clf.fit(l.train, tc, l.dev);
    out = to_json(clf.evaluate(l.test));
  } else {
    if (l.rc.coarse.empty()) throw Error(ErrorCode::FormatError, "pseudo baseline needs \"coarse\" in the config");
    auto r = baseline_pseudo_label(*l.graph, l.train, l.coarse, l.dev, l.test, tc, l.rc.hidden);
    out = to_json(r.metrics);
    out["coarse_samples"] = r.coarse_samples;
    out["filtered"] = r.filtered;
    out["filtered_fraction"] = r.filtered_fraction();
  }
  out["baseline"] = kind;
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_ablate(const std::string& config, std::optional<std::uint64_t> seed, bool json) {
  Loaded l = load_run(config, seed);
  auto seeds = seed ? std::vector<std::uint64_t>{*seed} : ablation_seeds(l.rc);
  auto table = ablate(l.graph, ablation_variants(l.rc), seeds, l.train, l.dev, l.test, l.rc,
                      [](const AblationRow& r) { std::cerr << r.variant << " " << r.mean_accuracy << "\n"; });
  if (json) std::cout << to_json(table).dump(2) << "\n";
  else std::cout << table.to_text();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pathcast: label-graph path prediction"};
  app.require_subcommand(1);
  std::optional<std::uint64_t> seed;
  app.add_option("--seed", seed, "override the random seed")->capture_default_str();

  auto* graph = app.add_subcommand("graph", "graph file utilities");
  graph->require_subcommand(1);
  std::string graph_file;
  auto* g_validate = graph->add_subcommand("validate", "check every graph invariant");
  g_validate->add_option("file", graph_file)->required();
  auto* g_stats = graph->add_subcommand("stats", "print graph statistics as JSON");
  g_stats->add_option("file", graph_file)->required();

  auto* paths = app.add_subcommand("paths", "print the path set of a label");
  std::string label;
  paths->add_option("graph", graph_file)->required();
  paths->add_option("--label", label)->required();

  auto* model = app.add_subcommand("model", "checkpoint utilities");
  model->require_subcommand(1);
  std::string ckpt;
  auto* m_inspect = model->add_subcommand("inspect", "print the checkpoint sidecar");
  m_inspect->add_option("ckpt", ckpt)->required();

  auto* train = app.add_subcommand("train", "train a label-path model");
  std::string config, out;
  train->add_option("--config", config)->required();
  train->add_option("--out", out)->required();

  auto* eval = app.add_subcommand("eval", "decode and score a dataset");
  std::string data, dump, report;
  bool audit = false;
  std::size_t max_len = 8;
  eval->add_option("--ckpt", ckpt)->required();
  eval->add_option("--data", data)->required();
  eval->add_flag("--audit", audit, "score open attribute choices against instance annotations");
  eval->add_option("--dump-paths", dump, "write decoded paths as JSON lines");
  eval->add_option("--out", report, "also write the report to a file");
  eval->add_option("--max-len", max_len)->capture_default_str();

  auto* synth = app.add_subcommand("synth", "generate the synthetic task");
  std::string spec, out_dir;
  synth->add_option("--spec", spec, "synthetic spec JSON (defaults when omitted)");
  synth->add_option("--out-dir", out_dir)->required();

  auto* fuse_cmd = app.add_subcommand("fuse", "concatenate a fine and a coarse dataset");
  std::string fine, coarse;
  fuse_cmd->add_option("--fine", fine)->required();
  fuse_cmd->add_option("--coarse", coarse)->required();
  fuse_cmd->add_option("--graph", graph_file)->required();
  fuse_cmd->add_option("--out", out)->required();

  auto* baseline = app.add_subcommand("baseline", "train and score a flat baseline");
  std::string kind;
  baseline->add_option("kind", kind)->required()->check(CLI::IsMember({"ffn", "labelset", "pseudo"}));
  baseline->add_option("--config", config)->required();

  auto* ablate_cmd = app.add_subcommand("ablate", "graph-trim and aggregation ablation");
  bool json = false;
  ablate_cmd->add_option("--config", config)->required();
  ablate_cmd->add_flag("--json", json, "print the table as JSON");

  for (auto* sub : {graph, g_validate, g_stats, paths, model, m_inspect, train, eval, synth, fuse_cmd, baseline,
                    ablate_cmd})
    sub->add_option("--seed", seed, "override the random seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (g_validate->parsed()) return cmd_graph_validate(graph_file);
    if (g_stats->parsed()) {
      std::cout << nlohmann::json(stats(load_graph(graph_file))).dump(2) << "\n";
      return 0;
    }
    if (paths->parsed()) {
      LabelGraph g = load_graph(graph_file);
      auto id = g.find(canonical_name(label));
      if (!id) throw Error(ErrorCode::UnknownName, "no such node", {label});
      std::cout << path_set_json(g, classify_paths(g, *id), certain_nodes(g, *id)).dump(2) << "\n";
      return 0;
    }
    if (m_inspect->parsed()) {
      std::cout << read_json_file(ckpt + ".json").dump(2) << "\n";
      return 0;
    }
    if (train->parsed()) return cmd_train(config, out, seed);
    if (eval->parsed()) return cmd_eval(ckpt, data, audit, dump, report, max_len);
    if (synth->parsed()) return cmd_synth(spec, out_dir, seed);
    if (fuse_cmd->parsed()) return cmd_fuse(fine, coarse, graph_file, out);
    if (baseline->parsed()) return cmd_baseline(kind, config, seed);
    if (ablate_cmd->parsed()) return cmd_ablate(config, seed, json);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
