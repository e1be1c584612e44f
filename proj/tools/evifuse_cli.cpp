// Command-line front end: data generation, the small numeric utilities
// (fuse/loss/partition/gradcheck), the staged trainers, evaluation,
// adaptation and multi-run reporting. Exit codes: 0 success, 2 bad
// usage/config, 3 numeric failure (NaN, gradcheck mismatch), 4 I/O failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "evifuse/checkpoint.hpp"
#include "evifuse/errors.hpp"
#include "evifuse/experiment.hpp"
#include "evifuse/experiment_config.hpp"
#include "evifuse/gradcheck.hpp"
#include "evifuse/model.hpp"
#include "evifuse/nig.hpp"
#include "evifuse/partition.hpp"
#include "evifuse/rng.hpp"
#include "evifuse/synth_data.hpp"
#include "evifuse/training.hpp"

namespace {

using namespace evifuse;
namespace fs = std::filesystem;

constexpr int kOk = 0;
constexpr int kBadConfig = 2;   // malformed config or input values
constexpr int kNumeric = 3;     // numeric failure: NaN mid-run, gradcheck mismatch
constexpr int kIoFailure = 4;   // unreadable/unwritable/corrupt files

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

ExperimentConfig load_config(const std::string& path) {
  if (!fs::exists(path)) throw IoError("config file '" + path + "' does not exist");
  return parse_experiment_config_file(path);
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir + "'");
}

void write_trace_csv(const std::string& path, const std::vector<TraceRow>& trace,
                     const char* first, const char* second) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "batch,total," << first << "," << second << "\n";
  for (const TraceRow& row : trace) {
    out << row.batch << "," << fmt6(row.total) << "," << fmt6(row.first_term) << ","
        << fmt6(row.second_term) << "\n";
  }
}

void print_metrics(const std::string& name, const Metrics& m, bool uncertainties) {
  std::ostringstream line;
  line << name << ": ";
  for (std::size_t d = 0; d < m.mae.size(); ++d) {
    line << "mae" << d << "=" << fmt6(m.mae[d]) << " ";
  }
  line << "euclidean=" << fmt6(m.euclidean);
  if (uncertainties) {
    line << " aleatoric=" << fmt6(m.mean_aleatoric) << " epistemic=" << fmt6(m.mean_epistemic);
  }
  line << " n=" << m.samples;
  std::cout << line.str() << "\n";
}

// stage1_batches is calibrated for one 8000-row dataset; every trainer
// scales by its row count so budgets mean epochs, not raw batches. Kept
// in lockstep with run_experiment's scaling.
int scaled_batches(const TrainConfig& tc, std::size_t rows) {
  const double b = static_cast<double>(tc.stage1_batches) * static_cast<double>(rows) / 8000.0;
  return std::max(200, static_cast<int>(b + 0.5));
}

// The fusion model with per-branch and cross partitions built from the
// stage splits, parameters freshly initialized. Shared by train-stage1
// and the fuse-family smoke paths.
EIFModel build_model(const ExperimentConfig& cfg, const Benchmark& bench,
                     const std::vector<Dataset>& stage1_sets,
                     const std::vector<Dataset>& stage2_sets, std::uint64_t seed) {
  std::vector<std::string> ids;
  for (const Dataset& src : bench.sources) ids.push_back(src.domain_id);
  EIFModel model(cfg.network, ids);
  for (std::size_t b = 0; b < stage1_sets.size(); ++b) {
    std::vector<PartitionSpec> parts;
    for (int d = 0; d < cfg.network.output_components; ++d) {
      parts.push_back(build_partition(stage1_sets[b].component_labels(d),
                                      cfg.network.group_count, cfg.network.overlap));
    }
    model.set_branch_partitions(static_cast<int>(b), std::move(parts));
  }
  std::vector<PartitionSpec> cross_parts;
  for (int d = 0; d < cfg.network.output_components; ++d) {
    std::vector<double> merged;
    for (const Dataset& s2 : stage2_sets) {
      const std::vector<double> labels = s2.component_labels(d);
      merged.insert(merged.end(), labels.begin(), labels.end());
    }
    cross_parts.push_back(build_partition(merged, cfg.network.group_count, cfg.network.overlap));
  }
  model.set_cross_partitions(std::move(cross_parts));
  model.init_params(derive_seed(seed, "init/eif"));
  return model;
}

void split_benchmark(const ExperimentConfig& cfg, const Benchmark& bench, std::uint64_t seed,
                     std::vector<Dataset>& stage1_sets, std::vector<Dataset>& stage2_sets) {
  for (const Dataset& src : bench.sources) {
    auto split = split_for_stages(src, cfg.stage_split, derive_seed(seed, "split/" + src.domain_id));
    stage1_sets.push_back(std::move(split.first));
    stage2_sets.push_back(std::move(split.second));
  }
}

int cmd_gen_data(std::uint64_t seed, const std::string& out_dir) {
  ensure_dir(out_dir);
  const Benchmark bench = make_benchmark(seed);
  const auto emit = [&](const Dataset& ds, const std::string& name) {
    write_dataset_file(ds, (fs::path(out_dir) / (name + ".csv")).string());
  };
  for (const Dataset& ds : bench.sources) emit(ds, ds.domain_id);
  for (const Dataset& ds : bench.source_tests) emit(ds, ds.domain_id);
  for (const Dataset& ds : bench.targets) emit(ds, ds.domain_id);
  emit(bench.ood, bench.ood.domain_id);
  std::cout << "wrote " << (bench.sources.size() + bench.source_tests.size() +
                            bench.targets.size() + 1)
            << " datasets to " << out_dir << "\n";
  return kOk;
}

int cmd_partition(const std::string& labels_path, int groups, double overlap) {
  std::ifstream in(labels_path);
  if (!in) throw IoError("cannot read '" + labels_path + "'");
  std::vector<double> labels;
  double v = 0.0;
  while (in >> v) labels.push_back(v);
  if (labels.empty()) throw PreconditionError("labels file '" + labels_path + "' is empty");
  const PartitionSpec spec = build_partition(labels, groups, overlap);
  std::cout << "group,left,center,right,length\n";
  for (const LabelGroup& g : spec.groups) {
    std::cout << g.index << "," << fmt6(g.left) << "," << fmt6(g.center) << "," << fmt6(g.right)
              << "," << fmt6(g.length) << "\n";
  }
  return kOk;
}

int cmd_fuse(const std::string& input_path) {
  std::ifstream file;
  std::istream* in = &std::cin;
  if (!input_path.empty()) {
    file.open(input_path);
    if (!file) throw IoError("cannot read '" + input_path + "'");
    in = &file;
  }
  std::vector<NIGParams> inputs;
  std::string line;
  while (std::getline(*in, line)) {
    std::istringstream row(line);
    NIGParams p;
    if (!(row >> p.delta >> p.gamma >> p.alpha >> p.beta)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      throw PreconditionError("expected four reals per line, got '" + line + "'");
    }
    inputs.push_back(p);
  }
  if (inputs.empty()) throw PreconditionError("no NIG tuples on input");
  const NIGParams fused = monig_fuse(inputs);
  std::cout << "delta=" << fmt6(fused.delta) << " gamma=" << fmt6(fused.gamma)
            << " alpha=" << fmt6(fused.alpha) << " beta=" << fmt6(fused.beta) << "\n";
  return kOk;
}

int cmd_loss(double delta, double gamma, double alpha, double beta, double y, double lambda) {
  const EvidentialLossParts parts = evidential_loss({delta, gamma, alpha, beta}, y, lambda);
  std::cout << "nll=" << fmt6(parts.nll) << " reg=" << fmt6(parts.reg)
            << " total=" << fmt6(parts.total) << "\n";
  return kOk;
}

int cmd_gradcheck(std::uint64_t seed, double tolerance) {
  const GradCheckReport report = run_gradcheck_suite(seed, tolerance);
  for (const GradCheckCase& c : report.cases) {
    std::cout << (c.passed ? "ok  " : "FAIL") << " " << c.name << " coords=" << c.coordinates
              << " max_rel_error=" << c.max_rel_error << "\n";
  }
  std::cout << (report.all_passed() ? "gradcheck passed" : "gradcheck FAILED")
            << " (worst " << report.worst() << ")\n";
  return report.all_passed() ? kOk : kNumeric;
}

int cmd_train_stage1(const std::string& config_path, const std::string& out_dir) {
  const ExperimentConfig cfg = load_config(config_path);
  ensure_dir(out_dir);
  const std::uint64_t seed = cfg.seeds.front();
  const Benchmark bench = make_benchmark(seed);
  std::vector<Dataset> stage1_sets, stage2_sets;
  split_benchmark(cfg, bench, seed, stage1_sets, stage2_sets);
  EIFModel model = build_model(cfg, bench, stage1_sets, stage2_sets, seed);
  TrainConfig tc = cfg.training;
  tc.seed = derive_seed(seed, "variant/eif");
  for (int b = 0; b < model.branch_count(); ++b) {
    tc.stage1_batches = scaled_batches(cfg.training, stage1_sets[static_cast<std::size_t>(b)].size());
    const std::vector<TraceRow> trace =
        train_stage1(model, b, stage1_sets[static_cast<std::size_t>(b)], tc);
    write_trace_csv((fs::path(out_dir) / ("stage1_trace_branch" + std::to_string(b) + ".csv")).string(),
                    trace, "local_sum", "fused");
    std::cout << "branch " << b << " trained (" << tc.stage1_batches << " batches)\n";
  }
  const std::string ckpt = (fs::path(out_dir) / "stage1.evf").string();
  save_checkpoint(model, ckpt);
  std::cout << "checkpoint " << ckpt << "\n";
  return kOk;
}

int cmd_train_stage2(const std::string& config_path, const std::string& checkpoint,
                     const std::string& out_dir) {
  const ExperimentConfig cfg = load_config(config_path);
  ensure_dir(out_dir);
  EIFModel model = load_eif_checkpoint(checkpoint);
  const std::uint64_t seed = cfg.seeds.front();
  const Benchmark bench = make_benchmark(seed);
  std::vector<Dataset> stage1_sets, stage2_sets;
  split_benchmark(cfg, bench, seed, stage1_sets, stage2_sets);
  model.set_cross_enabled(!cfg.ablation.disable_cross_branch);
  TrainConfig tc = cfg.training;
  tc.seed = derive_seed(seed, "variant/eif");
  const std::vector<TraceRow> trace = train_stage2(model, stage2_sets, tc);
  write_trace_csv((fs::path(out_dir) / "stage2_trace.csv").string(), trace, "cross", "joint");
  const std::string ckpt = (fs::path(out_dir) / "eif.evf").string();
  save_checkpoint(model, ckpt);
  std::cout << "checkpoint " << ckpt << "\n";
  return kOk;
}

int cmd_train_baseline(const std::string& config_path, const std::string& variant,
                       const std::string& out_dir) {
  const ExperimentConfig cfg = load_config(config_path);
  ensure_dir(out_dir);
  const std::uint64_t seed = cfg.seeds.front();
  const Benchmark bench = make_benchmark(seed);
  BaselineVariant kind;
  std::vector<Dataset> data;
  if (variant == "single_0") {
    kind = BaselineVariant::kSingle;
    data = {bench.sources[0]};
  } else if (variant == "single_1") {
    kind = BaselineVariant::kSingle;
    data = {bench.sources[1]};
  } else if (variant == "simple_mix") {
    kind = BaselineVariant::kSimpleMix;
    data = bench.sources;
  } else if (variant == "balanced_mix") {
    kind = BaselineVariant::kBalancedMix;
    data = bench.sources;
  } else {
    throw ConfigError("run.variant '" + variant +
                      "' is not a baseline (single_0 single_1 simple_mix balanced_mix)");
  }
  TrainConfig tc = cfg.training;
  tc.seed = derive_seed(seed, "variant/" + variant);
  std::size_t rows = 0;
  for (const Dataset& d : data) rows += d.size();
  tc.stage1_batches = scaled_batches(cfg.training, rows);
  std::vector<TraceRow> trace;
  const BaselineModel model =
      train_baseline(kind, data, cfg.network, tc, derive_seed(seed, "init/" + variant), &trace);
  write_trace_csv((fs::path(out_dir) / (variant + "_trace.csv")).string(), trace, "l1", "unused");
  const std::string ckpt = (fs::path(out_dir) / (variant + ".evf")).string();
  save_checkpoint(model, ckpt);
  std::cout << "checkpoint " << ckpt << "\n";
  return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_path, bool average_fusion,
             bool cross_only) {
  const Dataset data = read_dataset_file(data_path);
  if (peek_checkpoint_kind(checkpoint) == CheckpointKind::kBaseline) {
    if (average_fusion || cross_only) {
      throw ConfigError("ablation.average_fusion / ablation.disable_inter_fusion do not apply "
                        "to baseline checkpoints");
    }
    const BaselineModel model = load_baseline_checkpoint(checkpoint);
    print_metrics(data.domain_id, evaluate(model, data), false);
    return kOk;
  }
  const EIFModel model = load_eif_checkpoint(checkpoint);
  Metrics m;
  if (average_fusion) {
    m = evaluate_average_fusion(model, data);
  } else if (cross_only) {
    m = evaluate_cross_only(model, data);
  } else {
    m = evaluate(model, data);
  }
  print_metrics(data.domain_id, m, true);
  return kOk;
}

int cmd_adapt(const std::string& config_path, const std::string& checkpoint,
              const std::string& data_path, int samples, int batches,
              const std::string& out_dir) {
  const ExperimentConfig cfg = load_config(config_path);
  ensure_dir(out_dir);
  EIFModel model = load_eif_checkpoint(checkpoint);
  const Dataset target = read_dataset_file(data_path);
  if (static_cast<std::size_t>(samples) >= target.size()) {
    throw ConfigError("run.adapt_samples leaves no holdout for " + target.domain_id);
  }
  std::vector<std::size_t> order(target.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(cfg.seeds.front(), "adapt-pick/" + target.domain_id));
  for (std::size_t i = 0; i + 1 < order.size(); ++i) {
    std::swap(order[i], order[i + rng.below(order.size() - i)]);
  }
  std::vector<std::size_t> picked(order.begin(), order.begin() + samples);
  std::vector<std::size_t> rest(order.begin() + samples, order.end());
  std::sort(picked.begin(), picked.end());
  std::sort(rest.begin(), rest.end());
  const Dataset pool = dataset_subset(target, picked);
  const Dataset holdout = dataset_subset(target, rest);

  print_metrics("before", evaluate(model, holdout), true);
  TrainConfig tc = cfg.training;
  tc.seed = derive_seed(cfg.seeds.front(), "variant/adapt/" + target.domain_id);
  const std::vector<TraceRow> trace = finetune_adapt(model, pool, tc, batches);
  write_trace_csv((fs::path(out_dir) / "adapt_trace.csv").string(), trace, "loss", "unused");
  print_metrics("after", evaluate(model, holdout), true);
  const std::string ckpt = (fs::path(out_dir) / "adapted.evf").string();
  save_checkpoint(model, ckpt);
  std::cout << "checkpoint " << ckpt << "\n";
  return kOk;
}

int cmd_run(const std::string& config_path, const std::string& out_dir) {
  ExperimentConfig cfg = load_config(config_path);
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  const ExperimentResults results = run_experiment(cfg);
  std::cout << "seeds: " << results.seeds.size() << "\n";
  for (const std::string& variant : cfg.effective_variants()) {
    std::ostringstream line;
    line << variant << ":";
    const auto& first = results.seeds.front().metrics.at(variant);
    for (const auto& [dataset, unused] : first) {
      line << " " << dataset << "=" << fmt6(results.mean_euclidean(variant, dataset));
    }
    std::cout << line.str() << "\n";
  }
  std::cout << "results in " << cfg.out_dir << "\n";
  return kOk;
}

int cmd_report(const std::vector<std::string>& runs, const std::string& out_dir) {
  ensure_dir(out_dir);
  write_report(runs, out_dir);
  std::cout << "report in " << out_dir << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Evidential fusion of multi-source regressors: data, training, evaluation"};
  app.require_subcommand(1);

  std::uint64_t seed = 1;
  std::string out_dir = "out";
  std::string config_path;
  std::string checkpoint;
  std::string data_path;
  std::string labels_path;
  std::string input_path;
  std::string variant;
  std::vector<std::string> runs;
  int groups = 4;
  double overlap = 1.5;
  double delta = 0.0, gamma = 1.0, alpha = 2.0, beta = 1.0, y = 0.0, lambda = 0.01;
  double tolerance = 1e-4;
  int samples = 100, batches = 100;
  bool average_fusion = false, cross_only = false;

  CLI::App* gen = app.add_subcommand("gen-data", "Write the benchmark datasets as CSV");
  gen->add_option("--seed", seed, "Generation seed");
  gen->add_option("--out", out_dir, "Output directory");

  CLI::App* part = app.add_subcommand("partition", "Print the label partition for a labels file");
  part->add_option("--labels", labels_path, "File with one label per line")->required();
  part->add_option("--groups", groups, "Group count");
  part->add_option("--overlap", overlap, "Overlap factor (> 1)");

  CLI::App* fuse = app.add_subcommand("fuse", "Fuse NIG tuples (one 'delta gamma alpha beta' per line)");
  fuse->add_option("--input", input_path, "Tuple file (default: stdin)");

  CLI::App* loss = app.add_subcommand("loss", "Print the evidential loss parts for one prediction");
  loss->add_option("--delta", delta)->required();
  loss->add_option("--gamma", gamma)->required();
  loss->add_option("--alpha", alpha)->required();
  loss->add_option("--beta", beta)->required();
  loss->add_option("--y", y)->required();
  loss->add_option("--lambda", lambda, "Regularizer weight");

  CLI::App* grad = app.add_subcommand("gradcheck", "Finite-difference audit of every training loss");
  grad->add_option("--seed", seed, "Suite seed");
  grad->add_option("--tolerance", tolerance, "Max relative error");

  CLI::App* ts1 = app.add_subcommand("train-stage1", "Train the per-source branches");
  ts1->add_option("--config", config_path, "Experiment config")->required();
  ts1->add_option("--out", out_dir, "Output directory");

  CLI::App* ts2 = app.add_subcommand("train-stage2", "Joint training from a stage-1 checkpoint");
  ts2->add_option("--config", config_path, "Experiment config")->required();
  ts2->add_option("--checkpoint", checkpoint, "stage1.evf")->required();
  ts2->add_option("--out", out_dir, "Output directory");

  CLI::App* tb = app.add_subcommand("train-baseline", "Train one plain L1 baseline");
  tb->add_option("--config", config_path, "Experiment config")->required();
  tb->add_option("--variant", variant, "single_0 single_1 simple_mix balanced_mix")->required();
  tb->add_option("--out", out_dir, "Output directory");

  CLI::App* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset file");
  ev->add_option("--checkpoint", checkpoint)->required();
  ev->add_option("--data", data_path)->required();
  ev->add_flag("--average-fusion", average_fusion, "Replace inter fusion with plain averaging");
  ev->add_flag("--cross-only", cross_only, "Score the cross branch alone");

  CLI::App* ad = app.add_subcommand("adapt", "Few-shot adaptation on a target dataset");
  ad->add_option("--config", config_path, "Experiment config")->required();
  ad->add_option("--checkpoint", checkpoint)->required();
  ad->add_option("--data", data_path, "Target dataset file")->required();
  ad->add_option("--samples", samples, "Adaptation pool size");
  ad->add_option("--batches", batches, "Adaptation batches");
  ad->add_option("--out", out_dir, "Output directory");

  CLI::App* run = app.add_subcommand("run", "Full multi-seed experiment from a config");
  run->add_option("--config", config_path, "Experiment config")->required();
  run->add_option("--out", out_dir, "Override config out_dir");
  out_dir.clear();

  CLI::App* rep = app.add_subcommand("report", "Aggregate finished run directories");
  rep->add_option("--runs", runs, "Run directories")->required()->expected(-1);
  rep->add_option("--out", out_dir, "Output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(seed, out_dir.empty() ? "out" : out_dir);
    if (part->parsed()) return cmd_partition(labels_path, groups, overlap);
    if (fuse->parsed()) return cmd_fuse(input_path);
    if (loss->parsed()) return cmd_loss(delta, gamma, alpha, beta, y, lambda);
    if (grad->parsed()) return cmd_gradcheck(seed, tolerance);
    if (ts1->parsed()) return cmd_train_stage1(config_path, out_dir.empty() ? "out" : out_dir);
    if (ts2->parsed()) return cmd_train_stage2(config_path, checkpoint, out_dir.empty() ? "out" : out_dir);
    if (tb->parsed()) return cmd_train_baseline(config_path, variant, out_dir.empty() ? "out" : out_dir);
    if (ev->parsed()) return cmd_eval(checkpoint, data_path, average_fusion, cross_only);
    if (ad->parsed()) return cmd_adapt(config_path, checkpoint, data_path, samples, batches,
                                       out_dir.empty() ? "out" : out_dir);
    if (run->parsed()) return cmd_run(config_path, out_dir);
    if (rep->parsed()) return cmd_report(runs, out_dir.empty() ? "report" : out_dir);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kBadConfig;
  } catch (const PreconditionError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kBadConfig;
  } catch (const ParameterDomainError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kBadConfig;
  } catch (const NumericRangeError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const LoadError& e) {
    std::cerr << "load error: " << e.what() << "\n";
    return kIoFailure;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIoFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kOk;
}
