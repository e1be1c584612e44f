#include "evifuse/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>
#include <utility>

#include "evifuse/checkpoint.hpp"
#include "evifuse/errors.hpp"
#include "evifuse/partition.hpp"
#include "evifuse/rng.hpp"

namespace evifuse {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char b[48];
  std::snprintf(b, sizeof b, "%.9g", v);
  return b;
}

std::string hex16(std::uint64_t v) {
  char b[24];
  std::snprintf(b, sizeof b, "%016llx", static_cast<unsigned long long>(v));
  return b;
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && v[idx[j]] == v[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j - 1)) / 2.0 + 1.0;
    for (std::size_t k = i; k < j; ++k) ranks[idx[k]] = avg;
    i = j;
  }
  return ranks;
}

class Csv {
 public:
  explicit Csv(const fs::path& path) : path_(path.string()), out_(path) {
    if (!out_) throw IoError("cannot write '" + path_ + "'");
  }

  void line(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i > 0) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
  }

  ~Csv() {
    out_.flush();
    if (!out_) std::fprintf(stderr, "warning: short write on %s\n", path_.c_str());
  }

 private:
  std::string path_;
  std::ofstream out_;
};

std::vector<std::string> metrics_header(int comps) {
  std::vector<std::string> h = {"variant", "dataset"};
  for (int d = 0; d < comps; ++d) h.push_back("mae_" + std::to_string(d));
  h.push_back("euclidean");
  h.push_back("mean_aleatoric");
  h.push_back("mean_epistemic");
  h.push_back("samples");
  return h;
}

std::vector<std::string> metrics_row(const std::string& variant, const std::string& dataset,
                                     const Metrics& m) {
  std::vector<std::string> row = {variant, dataset};
  for (double v : m.mae) row.push_back(fmt(v));
  row.push_back(fmt(m.euclidean));
  row.push_back(fmt(m.mean_aleatoric));
  row.push_back(fmt(m.mean_epistemic));
  row.push_back(fmt(static_cast<double>(m.samples)));
  return row;
}

void write_trace(const fs::path& path, const std::vector<TraceRow>& trace,
                 const std::vector<std::string>& header) {
  Csv csv(path);
  csv.line(header);
  for (const TraceRow& row : trace) {
    std::vector<std::string> cells = {std::to_string(row.batch), fmt(row.total)};
    if (header.size() > 2) {
      cells.push_back(fmt(row.first_term));
      cells.push_back(fmt(row.second_term));
    }
    csv.line(cells);
  }
}

// True group of a label: the group whose center lies closest (lowest index
// wins ties); out-of-range labels land on a boundary group naturally.
int nearest_group(const PartitionSpec& part, double y) {
  int best = 0;
  double gap = std::abs(y - part.groups[0].center);
  for (int g = 1; g < part.group_count; ++g) {
    const double d = std::abs(y - part.groups[static_cast<std::size_t>(g)].center);
    if (d < gap) {
      gap = d;
      best = g;
    }
  }
  return best;
}

constexpr std::size_t kChunk = 256;

std::vector<std::size_t> chunk_rows(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> rows(end - begin);
  for (std::size_t i = begin; i < end; ++i) rows[i - begin] = i;
  return rows;
}

// Fig. 5a analog: per branch, on that branch's own test set, the mean
// regressor weight received by each true-group row. Returns the share of
// branch 0's samples whose strongest regressor is within one group of the
// true one.
double write_regressor_diagnostics(const EIFModel& model, const Benchmark& bench,
                                   const fs::path& seed_dir) {
  Csv csv(seed_dir / "regressor_weights.csv");
  csv.line({"branch", "component", "true_group", "regressor", "mean_weight"});
  const int comps = model.config().output_components;
  double rate0 = 0.0;
  for (int b = 0; b < model.branch_count() &&
                  b < static_cast<int>(bench.source_tests.size()); ++b) {
    const Dataset& ts = bench.source_tests[static_cast<std::size_t>(b)];
    const std::vector<PartitionSpec>& parts = model.branch(b).partitions;
    const int groups = parts[0].group_count;
    std::vector<std::vector<std::vector<double>>> sums(
        static_cast<std::size_t>(comps),
        std::vector<std::vector<double>>(static_cast<std::size_t>(groups),
                                         std::vector<double>(static_cast<std::size_t>(groups))));
    std::vector<std::vector<long>> counts(static_cast<std::size_t>(comps),
                                          std::vector<long>(static_cast<std::size_t>(groups), 0));
    long hits = 0;
    for (std::size_t begin = 0; begin < ts.size(); begin += kChunk) {
      const std::size_t end = std::min(ts.size(), begin + kChunk);
      const std::vector<std::size_t> rows = chunk_rows(begin, end);
      const BranchForwardResult out = model.branch_forward(b, input_tensor(ts, rows));
      for (int d = 0; d < comps; ++d) {
        const auto& heads = out.heads[static_cast<std::size_t>(d)];
        for (std::size_t i = 0; i < rows.size(); ++i) {
          double total = 0.0;
          for (int g = 0; g < groups; ++g) {
            total += heads[static_cast<std::size_t>(g)][i].gamma;
          }
          const int truth = nearest_group(parts[static_cast<std::size_t>(d)],
                                          ts.labels[begin + i][static_cast<std::size_t>(d)]);
          int strongest = 0;
          double best = -1.0;
          for (int g = 0; g < groups; ++g) {
            const double w = heads[static_cast<std::size_t>(g)][i].gamma / total;
            sums[static_cast<std::size_t>(d)][static_cast<std::size_t>(truth)]
                [static_cast<std::size_t>(g)] += w;
            if (w > best) {
              best = w;
              strongest = g;
            }
          }
          counts[static_cast<std::size_t>(d)][static_cast<std::size_t>(truth)]++;
          if (b == 0 && std::abs(strongest - truth) <= 1) hits++;
        }
      }
    }
    if (b == 0) rate0 = static_cast<double>(hits) / static_cast<double>(ts.size() * comps);
    for (int d = 0; d < comps; ++d) {
      for (int t = 0; t < groups; ++t) {
        const long count = counts[static_cast<std::size_t>(d)][static_cast<std::size_t>(t)];
        for (int g = 0; g < groups; ++g) {
          const double sum =
              sums[static_cast<std::size_t>(d)][static_cast<std::size_t>(t)][static_cast<std::size_t>(g)];
          csv.line({std::to_string(b), std::to_string(d), std::to_string(t), std::to_string(g),
                    fmt(count > 0 ? sum / static_cast<double>(count) : 0.0)});
        }
      }
    }
  }
  return rate0;
}

// Fig. 5b / Fig. 6 analogs from the trained fusion model: mean inter-fusion
// weight per candidate on every evaluation set, own-branch rates on the
// source test sets, and per-sample (true sigma, aleatoric) pairs.
void collect_fusion_diagnostics(const EIFModel& model, const Benchmark& bench,
                                const std::vector<const Dataset*>& eval_sets,
                                const fs::path& seed_dir, SeedResults& res) {
  const int comps = model.config().output_components;
  std::vector<std::string> candidates;
  for (int b = 0; b < model.branch_count(); ++b) candidates.push_back(model.branch(b).dataset_id);
  if (model.cross_enabled()) candidates.push_back("cross");
  const std::size_t cand_count = candidates.size();

  Csv weights_csv(seed_dir / "branch_weights.csv");
  weights_csv.line({"dataset", "component", "candidate", "mean_weight"});
  Csv pairs_csv(seed_dir / "aleatoric_pairs.csv");
  pairs_csv.line({"dataset", "component", "true_sigma", "aleatoric", "fused_aleatoric"});

  std::vector<double> pooled_sigma;
  std::vector<double> pooled_aleatoric;

  for (const Dataset* ds_ptr : eval_sets) {
    const Dataset& ds = *ds_ptr;
    int own_branch = -1;
    for (std::size_t k = 0; k < bench.source_tests.size(); ++k) {
      if (&bench.source_tests[k] == ds_ptr) own_branch = static_cast<int>(k);
    }

    std::vector<std::vector<double>> sums(static_cast<std::size_t>(comps),
                                          std::vector<double>(cand_count, 0.0));
    long own_hits = 0;
    for (std::size_t begin = 0; begin < ds.size(); begin += kChunk) {
      const std::size_t end = std::min(ds.size(), begin + kChunk);
      const std::vector<std::size_t> rows = chunk_rows(begin, end);
      const EifForwardResult out = model.forward(input_tensor(ds, rows), true);
      // The noise-tracking signal lives in the responsible branch's output:
      // the final fused beta also absorbs cross-branch disagreement, which
      // swamps the per-sample noise structure on source test sets.
      BranchForwardResult own;
      if (own_branch >= 0) own = model.branch_forward(own_branch, input_tensor(ds, rows));
      for (int d = 0; d < comps; ++d) {
        for (std::size_t i = 0; i < rows.size(); ++i) {
          const std::vector<double>& w =
              out.diag.branch_weights[static_cast<std::size_t>(d)][i];
          for (std::size_t c = 0; c < cand_count; ++c) {
            sums[static_cast<std::size_t>(d)][c] += w[c];
          }
          if (own_branch >= 0) {
            int strongest = 0;
            for (int b = 1; b < model.branch_count(); ++b) {
              if (w[static_cast<std::size_t>(b)] > w[static_cast<std::size_t>(strongest)]) {
                strongest = b;
              }
            }
            if (strongest == own_branch) own_hits++;
            const double sigma = ds.noise_sigmas[begin + i];
            const double branch_alea =
                uncertainty(own.fused[static_cast<std::size_t>(d)][i]).aleatoric;
            const double fused_alea =
                out.report[static_cast<std::size_t>(d)][i].aleatoric;
            pairs_csv.line({ds.domain_id, std::to_string(d), fmt(sigma), fmt(branch_alea),
                            fmt(fused_alea)});
            pooled_sigma.push_back(sigma);
            pooled_aleatoric.push_back(branch_alea);
          }
        }
      }
    }
    for (int d = 0; d < comps; ++d) {
      for (std::size_t c = 0; c < cand_count; ++c) {
        weights_csv.line({ds.domain_id, std::to_string(d), candidates[c],
                          fmt(sums[static_cast<std::size_t>(d)][c] /
                              static_cast<double>(ds.size()))});
      }
    }
    if (own_branch >= 0) {
      res.own_branch_rate[ds.domain_id] =
          static_cast<double>(own_hits) / static_cast<double>(ds.size() * comps);
    }
  }
  if (pooled_sigma.size() >= 2) {
    res.aleatoric_spearman = spearman(pooled_aleatoric, pooled_sigma);
  }
}

struct SeedOutput {
  SeedResults results;
  std::vector<std::string> files;  // relative to the run directory
};

void require_benchmark_compatible(const ExperimentConfig& cfg, const Benchmark& bench) {
  if (cfg.network.input_dim != bench.sources[0].input_dim()) {
    throw ConfigError("network.input_dim must be " +
                      std::to_string(bench.sources[0].input_dim()) +
                      " to match the benchmark");
  }
  if (cfg.network.output_components != bench.sources[0].components()) {
    throw ConfigError("network.components must be " +
                      std::to_string(bench.sources[0].components()) +
                      " to match the benchmark");
  }
}

SeedOutput run_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  SeedOutput out;
  out.results.seed = seed;
  const std::vector<std::string> variants = cfg.effective_variants();
  const auto wants = [&](const char* v) {
    return std::find(variants.begin(), variants.end(), v) != variants.end();
  };

  const std::string seed_name = "seed_" + std::to_string(seed);
  const fs::path seed_dir = fs::path(cfg.out_dir) / seed_name;
  std::error_code ec;
  fs::create_directories(seed_dir, ec);
  if (ec) throw IoError("cannot create '" + seed_dir.string() + "'");
  const auto emit = [&](const std::string& name) {
    out.files.push_back(seed_name + "/" + name);
    return seed_dir / name;
  };

  const Benchmark bench = make_benchmark(seed);
  require_benchmark_compatible(cfg, bench);
  std::vector<const Dataset*> eval_sets;
  for (const Dataset& d : bench.source_tests) eval_sets.push_back(&d);
  for (const Dataset& d : bench.targets) eval_sets.push_back(&d);
  eval_sets.push_back(&bench.ood);

  auto& metrics = out.results.metrics;

  // stage1_batches is calibrated for one 8000-row dataset; scaling by row
  // count gives every trainer the same epoch count whether it sees one
  // source, a split, or the merged pool.
  const auto scaled_batches = [&](std::size_t rows) {
    const double b = static_cast<double>(cfg.training.stage1_batches) *
                     static_cast<double>(rows) / 8000.0;
    return std::max(200, static_cast<int>(b + 0.5));
  };

  // Plain L1 baselines.
  const struct {
    const char* name;
    BaselineVariant kind;
    int source;  // -1 = all
  } baseline_rows[] = {
      {"single_0", BaselineVariant::kSingle, 0},
      {"single_1", BaselineVariant::kSingle, 1},
      {"simple_mix", BaselineVariant::kSimpleMix, -1},
      {"balanced_mix", BaselineVariant::kBalancedMix, -1},
  };
  for (const auto& row : baseline_rows) {
    if (!wants(row.name)) continue;
    std::vector<Dataset> data;
    if (row.source >= 0) {
      data.push_back(bench.sources[static_cast<std::size_t>(row.source)]);
    } else {
      data = bench.sources;
    }
    TrainConfig tc = cfg.training;
    tc.seed = derive_seed(seed, std::string("variant/") + row.name);
    std::size_t rows = 0;
    for (const Dataset& d : data) rows += d.size();
    tc.stage1_batches = scaled_batches(rows);
    std::vector<TraceRow> trace;
    const BaselineModel bm = train_baseline(row.kind, data, cfg.network, tc,
                                            derive_seed(seed, std::string("init/") + row.name),
                                            &trace);
    write_trace(emit(std::string(row.name) + "_trace.csv"), trace, {"batch", "total"});
    for (const Dataset* ds : eval_sets) metrics[row.name][ds->domain_id] = evaluate(bm, *ds);
    if (cfg.save_checkpoints) {
      save_checkpoint(bm, emit(std::string(row.name) + ".evf").string());
    }
  }

  if (!(wants("avg_fusion") || wants("inter_fusion") || wants("eif"))) return out;

  // Shared stage-1 training for the fusion family.
  std::vector<Dataset> stage1_sets;
  std::vector<Dataset> stage2_sets;
  for (const Dataset& src : bench.sources) {
    auto split = split_for_stages(src, cfg.stage_split, derive_seed(seed, "split/" + src.domain_id));
    stage1_sets.push_back(std::move(split.first));
    stage2_sets.push_back(std::move(split.second));
  }

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
  {
    std::vector<PartitionSpec> cross_parts;
    for (int d = 0; d < cfg.network.output_components; ++d) {
      std::vector<double> merged;
      for (const Dataset& s2 : stage2_sets) {
        const std::vector<double> labels = s2.component_labels(d);
        merged.insert(merged.end(), labels.begin(), labels.end());
      }
      cross_parts.push_back(build_partition(merged, cfg.network.group_count,
                                            cfg.network.overlap));
    }
    model.set_cross_partitions(std::move(cross_parts));
  }
  model.init_params(derive_seed(seed, "init/eif"));

  TrainConfig stage1_cfg = cfg.training;
  stage1_cfg.seed = derive_seed(seed, "variant/eif");
  for (int b = 0; b < model.branch_count(); ++b) {
    stage1_cfg.stage1_batches =
        scaled_batches(stage1_sets[static_cast<std::size_t>(b)].size());
    const std::vector<TraceRow> trace =
        train_stage1(model, b, stage1_sets[static_cast<std::size_t>(b)], stage1_cfg);
    write_trace(emit("stage1_trace_branch" + std::to_string(b) + ".csv"), trace,
                {"batch", "total", "local_sum", "fused"});
  }
  const EIFModel stage1_model = model;
  if (cfg.save_checkpoints) save_checkpoint(stage1_model, emit("stage1.evf").string());

  out.results.regressor_diag_rate = write_regressor_diagnostics(stage1_model, bench, seed_dir);
  out.files.push_back(seed_name + "/regressor_weights.csv");

  if (wants("avg_fusion")) {
    for (const Dataset* ds : eval_sets) {
      metrics["avg_fusion"][ds->domain_id] = evaluate_average_fusion(stage1_model, *ds);
    }
  }

  if (wants("inter_fusion")) {
    EIFModel inter = stage1_model;
    inter.set_cross_enabled(false);
    TrainConfig tc = cfg.training;
    tc.seed = derive_seed(seed, "variant/inter_fusion");
    const std::vector<TraceRow> trace = train_stage2(inter, stage2_sets, tc);
    write_trace(emit("stage2_trace_inter_fusion.csv"), trace, {"batch", "total", "cross", "joint"});
    for (const Dataset* ds : eval_sets) {
      metrics["inter_fusion"][ds->domain_id] = evaluate(inter, *ds);
    }
    if (cfg.save_checkpoints) save_checkpoint(inter, emit("inter_fusion.evf").string());
  }

  if (wants("eif")) {
    EIFModel eif = stage1_model;
    eif.set_cross_enabled(!cfg.ablation.disable_cross_branch);
    TrainConfig tc = cfg.training;
    tc.seed = derive_seed(seed, "variant/eif");
    const std::vector<TraceRow> trace = train_stage2(eif, stage2_sets, tc);
    write_trace(emit("stage2_trace_eif.csv"), trace, {"batch", "total", "cross", "joint"});

    const auto eval_eif = [&](const EIFModel& m, const Dataset& ds) {
      if (cfg.ablation.average_fusion) return evaluate_average_fusion(m, ds);
      if (cfg.ablation.disable_inter_fusion) return evaluate_cross_only(m, ds);
      return evaluate(m, ds);
    };
    for (const Dataset* ds : eval_sets) {
      metrics["eif"][ds->domain_id] = eval_eif(eif, *ds);
    }
    if (cfg.save_checkpoints) save_checkpoint(eif, emit("eif.evf").string());

    collect_fusion_diagnostics(eif, bench, eval_sets, seed_dir, out.results);
    out.files.push_back(seed_name + "/branch_weights.csv");
    out.files.push_back(seed_name + "/aleatoric_pairs.csv");

    {
      double weighted = 0.0;
      double count = 0.0;
      for (const Dataset& ts : bench.source_tests) {
        const Metrics& m = metrics["eif"][ts.domain_id];
        weighted += m.mean_epistemic * static_cast<double>(m.samples);
        count += static_cast<double>(m.samples);
      }
      out.results.epistemic_source = count > 0.0 ? weighted / count : 0.0;
      out.results.epistemic_ood = metrics["eif"][bench.ood.domain_id].mean_epistemic;
      Csv epi(emit("epistemic.csv"));
      epi.line({"dataset", "mean_epistemic"});
      for (const Dataset* ds : eval_sets) {
        epi.line({ds->domain_id, fmt(metrics["eif"][ds->domain_id].mean_epistemic)});
      }
    }

    if (cfg.adapt_batches > 0) {
      Csv adapt_csv(emit("adaptation.csv"));
      std::vector<std::string> header = {"dataset", "phase"};
      for (int d = 0; d < cfg.network.output_components; ++d) {
        header.push_back("mae_" + std::to_string(d));
      }
      header.push_back("euclidean");
      adapt_csv.line(header);
      for (const Dataset& target : bench.targets) {
        if (static_cast<std::size_t>(cfg.adapt_samples) >= target.size()) {
          throw ConfigError("run.adapt_samples leaves no holdout for " + target.domain_id);
        }
        std::vector<std::size_t> order(target.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(seed, "adapt-pick/" + target.domain_id));
        for (std::size_t i = 0; i + 1 < order.size(); ++i) {
          std::swap(order[i], order[i + rng.below(order.size() - i)]);
        }
        std::vector<std::size_t> picked(order.begin(),
                                        order.begin() + cfg.adapt_samples);
        std::vector<std::size_t> rest(order.begin() + cfg.adapt_samples, order.end());
        std::sort(picked.begin(), picked.end());
        std::sort(rest.begin(), rest.end());
        const Dataset pool = dataset_subset(target, picked);
        const Dataset holdout = dataset_subset(target, rest);

        AdaptationOutcome outcome;
        outcome.before = eval_eif(eif, holdout);
        EIFModel adapted = eif;
        TrainConfig ta = cfg.training;
        ta.seed = derive_seed(seed, "variant/adapt/" + target.domain_id);
        const std::vector<TraceRow> atrace =
            finetune_adapt(adapted, pool, ta, cfg.adapt_batches);
        write_trace(emit("adapt_trace_" + target.domain_id + ".csv"), atrace,
                    {"batch", "total"});
        outcome.after = eval_eif(adapted, holdout);
        out.results.adaptation[target.domain_id] = outcome;

        for (int phase = 0; phase < 2; ++phase) {
          const Metrics& m = phase == 0 ? outcome.before : outcome.after;
          std::vector<std::string> cells = {target.domain_id, phase == 0 ? "pre" : "post"};
          for (double v : m.mae) cells.push_back(fmt(v));
          cells.push_back(fmt(m.euclidean));
          adapt_csv.line(cells);
        }
      }
    }
  }

  {
    Csv csv(emit("metrics.csv"));
    csv.line(metrics_header(cfg.network.output_components));
    for (const auto& [variant, by_dataset] : metrics) {
      for (const auto& [dataset, m] : by_dataset) {
        csv.line(metrics_row(variant, dataset, m));
      }
    }
  }
  return out;
}

void write_config_text(std::ostream& outs, const ExperimentConfig& cfg) {
  outs << "[benchmark]\nseeds = ";
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
    if (i > 0) outs << ",";
    outs << cfg.seeds[i];
  }
  outs << "\n\n[network]\ninput_dim = " << cfg.network.input_dim << "\nfeature_layers = ";
  for (std::size_t i = 0; i < cfg.network.feature_layer_sizes.size(); ++i) {
    if (i > 0) outs << ",";
    outs << cfg.network.feature_layer_sizes[i];
  }
  outs << "\nmff_start_layer = " << cfg.network.mff_start_layer
       << "\ngroups = " << cfg.network.group_count << "\noverlap = " << fmt(cfg.network.overlap)
       << "\ncomponents = " << cfg.network.output_components << "\n\n[training]\nlambda = "
       << fmt(cfg.training.lambda) << "\nlearning_rate = " << fmt(cfg.training.learning_rate)
       << "\nbatch_size = " << cfg.training.batch_size
       << "\nstage1_batches = " << cfg.training.stage1_batches
       << "\nstage2_batches = " << cfg.training.stage2_batches
       << "\nfreeze_backbones_stage2 = " << (cfg.training.freeze_backbones_stage2 ? "on" : "off")
       << "\nclip_norm = " << fmt(cfg.training.clip_norm) << "\n\n[run]\nvariants = ";
  const std::vector<std::string> variants = cfg.effective_variants();
  for (std::size_t i = 0; i < variants.size(); ++i) {
    if (i > 0) outs << ",";
    outs << variants[i];
  }
  outs << "\nout_dir = " << cfg.out_dir << "\nadapt_samples = " << cfg.adapt_samples
       << "\nadapt_batches = " << cfg.adapt_batches << "\nstage_split = "
       << cfg.stage_split.first << ":" << cfg.stage_split.second
       << "\nthreads = " << cfg.threads
       << "\nsave_checkpoints = " << (cfg.save_checkpoints ? "on" : "off")
       << "\n\n[ablation]\ndisable_cross_branch = "
       << (cfg.ablation.disable_cross_branch ? "on" : "off")
       << "\naverage_fusion = " << (cfg.ablation.average_fusion ? "on" : "off")
       << "\ndisable_inter_fusion = " << (cfg.ablation.disable_inter_fusion ? "on" : "off")
       << "\n";
}

void write_manifest(const fs::path& out_dir,
                    const std::vector<std::pair<std::uint64_t, bool>>& seed_status,
                    const std::vector<std::string>& files) {
  std::ofstream m(out_dir / "manifest.txt");
  if (!m) throw IoError("cannot write manifest in '" + out_dir.string() + "'");
  m << "evifuse-manifest v1\n";
  for (const auto& [seed, ok] : seed_status) {
    m << "seed " << seed << (ok ? " complete" : " incomplete") << "\n";
  }
  for (const std::string& f : files) {
    m << "file " << f << " " << hex16(fnv1a_hash_file((out_dir / f).string())) << "\n";
  }
  m.flush();
  if (!m) throw IoError("failed writing manifest in '" + out_dir.string() + "'");
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw PreconditionError("rank correlation needs equal lengths");
  if (a.size() < 2) throw PreconditionError("rank correlation needs at least two points");
  const std::vector<double> ra = average_ranks(a);
  const std::vector<double> rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0;
  double mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0;
  double va = 0.0;
  double vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = ra[i] - ma;
    const double db = rb[i] - mb;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

std::uint64_t fnv1a_hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open '" + path + "' for hashing");
  std::uint64_t h = 1469598103934665603ull;
  char buf[65536];
  while (in) {
    in.read(buf, sizeof buf);
    const std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  return h;
}

double ExperimentResults::mean_euclidean(const std::string& variant,
                                         const std::string& dataset) const {
  double sum = 0.0;
  for (const SeedResults& s : seeds) sum += s.metrics.at(variant).at(dataset).euclidean;
  return sum / static_cast<double>(seeds.size());
}

double ExperimentResults::mean_component_mae(const std::string& variant,
                                             const std::string& dataset) const {
  double sum = 0.0;
  for (const SeedResults& s : seeds) {
    const Metrics& m = s.metrics.at(variant).at(dataset);
    double mae = 0.0;
    for (double v : m.mae) mae += v;
    sum += mae / static_cast<double>(m.mae.size());
  }
  return sum / static_cast<double>(seeds.size());
}

double ExperimentResults::mean_diag(double SeedResults::*field) const {
  double sum = 0.0;
  for (const SeedResults& s : seeds) sum += s.*field;
  return sum / static_cast<double>(seeds.size());
}

ExperimentResults run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw IoError("cannot create '" + cfg.out_dir + "'");

  std::vector<std::string> files;
  {
    std::ofstream conf(fs::path(cfg.out_dir) / "config.txt");
    if (!conf) throw IoError("cannot write config echo in '" + cfg.out_dir + "'");
    write_config_text(conf, cfg);
    files.push_back("config.txt");
  }

  const std::size_t n = cfg.seeds.size();
  std::vector<SeedOutput> slots(n);
  std::vector<std::exception_ptr> errors(n);
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  std::size_t workers = cfg.threads > 0 ? static_cast<std::size_t>(cfg.threads)
                                        : static_cast<std::size_t>(hw);
  workers = std::min(workers, n);
  workers = std::max<std::size_t>(workers, 1);

  const auto work = [&](std::size_t idx) {
    try {
      slots[idx] = run_seed(cfg, cfg.seeds[idx]);
    } catch (...) {
      errors[idx] = std::current_exception();
    }
  };
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        while (true) {
          const std::size_t idx = next.fetch_add(1);
          if (idx >= n) return;
          work(idx);
        }
      });
    }
    for (std::thread& t : pool) t.join();
  }

  std::vector<std::pair<std::uint64_t, bool>> seed_status;
  for (std::size_t i = 0; i < n; ++i) {
    seed_status.emplace_back(cfg.seeds[i], errors[i] == nullptr);
    if (errors[i] == nullptr) {
      files.insert(files.end(), slots[i].files.begin(), slots[i].files.end());
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (errors[i] != nullptr) {
      write_manifest(cfg.out_dir, seed_status, files);
      std::rethrow_exception(errors[i]);
    }
  }

  ExperimentResults results;
  results.config = cfg;
  for (SeedOutput& slot : slots) results.seeds.push_back(std::move(slot.results));

  // Seed-averaged tables.
  {
    Csv csv(fs::path(cfg.out_dir) / "metrics_mean.csv");
    files.push_back("metrics_mean.csv");
    csv.line(metrics_header(cfg.network.output_components));
    const auto& first = results.seeds.front().metrics;
    for (const auto& [variant, by_dataset] : first) {
      for (const auto& [dataset, unused] : by_dataset) {
        (void)unused;
        Metrics mean;
        mean.mae.assign(static_cast<std::size_t>(cfg.network.output_components), 0.0);
        for (const SeedResults& s : results.seeds) {
          const Metrics& m = s.metrics.at(variant).at(dataset);
          for (std::size_t d = 0; d < mean.mae.size(); ++d) mean.mae[d] += m.mae[d];
          mean.euclidean += m.euclidean;
          mean.mean_aleatoric += m.mean_aleatoric;
          mean.mean_epistemic += m.mean_epistemic;
          mean.samples += m.samples;
        }
        const double count = static_cast<double>(results.seeds.size());
        for (double& v : mean.mae) v /= count;
        mean.euclidean /= count;
        mean.mean_aleatoric /= count;
        mean.mean_epistemic /= count;
        mean.samples = static_cast<std::size_t>(
            static_cast<double>(mean.samples) / count + 0.5);
        csv.line(metrics_row(variant, dataset, mean));
      }
    }
  }

  const bool have_diag = !results.seeds.front().own_branch_rate.empty() ||
                         results.seeds.front().regressor_diag_rate > 0.0;
  if (have_diag) {
    Csv csv(fs::path(cfg.out_dir) / "diagnostics_mean.csv");
    files.push_back("diagnostics_mean.csv");
    csv.line({"metric", "value"});
    csv.line({"regressor_diag_rate", fmt(results.mean_diag(&SeedResults::regressor_diag_rate))});
    for (const auto& [dataset, unused] : results.seeds.front().own_branch_rate) {
      (void)unused;
      double sum = 0.0;
      for (const SeedResults& s : results.seeds) sum += s.own_branch_rate.at(dataset);
      csv.line({"own_branch_rate_" + dataset,
                fmt(sum / static_cast<double>(results.seeds.size()))});
    }
    csv.line({"aleatoric_spearman", fmt(results.mean_diag(&SeedResults::aleatoric_spearman))});
    csv.line({"epistemic_source", fmt(results.mean_diag(&SeedResults::epistemic_source))});
    csv.line({"epistemic_ood", fmt(results.mean_diag(&SeedResults::epistemic_ood))});
  }

  if (!results.seeds.front().adaptation.empty()) {
    Csv csv(fs::path(cfg.out_dir) / "adaptation_mean.csv");
    files.push_back("adaptation_mean.csv");
    std::vector<std::string> header = {"dataset", "phase"};
    for (int d = 0; d < cfg.network.output_components; ++d) {
      header.push_back("mae_" + std::to_string(d));
    }
    header.push_back("euclidean");
    csv.line(header);
    for (const auto& [dataset, unused] : results.seeds.front().adaptation) {
      (void)unused;
      for (int phase = 0; phase < 2; ++phase) {
        std::vector<double> mae(static_cast<std::size_t>(cfg.network.output_components), 0.0);
        double euclid = 0.0;
        for (const SeedResults& s : results.seeds) {
          const AdaptationOutcome& o = s.adaptation.at(dataset);
          const Metrics& m = phase == 0 ? o.before : o.after;
          for (std::size_t d = 0; d < mae.size(); ++d) mae[d] += m.mae[d];
          euclid += m.euclidean;
        }
        const double count = static_cast<double>(results.seeds.size());
        std::vector<std::string> cells = {dataset, phase == 0 ? "pre" : "post"};
        for (double v : mae) cells.push_back(fmt(v / count));
        cells.push_back(fmt(euclid / count));
        csv.line(cells);
      }
    }
  }

  write_manifest(cfg.out_dir, seed_status, files);
  return results;
}

namespace {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream stream(line);
  while (std::getline(stream, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

Table read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open '" + path.string() + "'");
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw LoadError("'" + path.string() + "' is empty");
  t.header = split_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells = split_line(line);
    if (cells.size() != t.header.size()) {
      throw LoadError("'" + path.string() + "' has a ragged row");
    }
    t.rows.push_back(std::move(cells));
  }
  return t;
}

double cell_number(const std::string& cell, const fs::path& path) {
  char* end = nullptr;
  const double v = std::strtod(cell.c_str(), &end);
  if (cell.empty() || end != cell.c_str() + cell.size()) {
    throw LoadError("'" + path.string() + "' holds a non-numeric cell '" + cell + "'");
  }
  return v;
}

struct ManifestInfo {
  std::vector<std::uint64_t> complete_seeds;
};

ManifestInfo read_manifest(const fs::path& dir, std::string& version) {
  std::ifstream in(dir / "manifest.txt");
  if (!in) throw LoadError("no manifest in '" + dir.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw LoadError("empty manifest in '" + dir.string() + "'");
  if (line.rfind("evifuse-manifest ", 0) != 0) {
    throw LoadError("'" + dir.string() + "' has an unrecognized manifest");
  }
  if (version.empty()) {
    version = line;
  } else if (version != line) {
    throw LoadError("mixed manifest versions across run directories");
  }
  if (line != "evifuse-manifest v1") {
    throw LoadError("unsupported manifest version in '" + dir.string() + "'");
  }
  ManifestInfo info;
  while (std::getline(in, line)) {
    std::istringstream stream(line);
    std::string word;
    stream >> word;
    if (word != "seed") continue;
    std::uint64_t seed = 0;
    std::string status;
    stream >> seed >> status;
    if (status == "complete") {
      info.complete_seeds.push_back(seed);
    } else {
      std::fprintf(stderr, "note: skipping incomplete seed %llu in %s\n",
                   static_cast<unsigned long long>(seed), dir.string().c_str());
    }
  }
  return info;
}

// key columns -> running mean per numeric column
using MeanMap = std::map<std::vector<std::string>, std::pair<std::vector<double>, long>>;

void accumulate(MeanMap& map, const std::vector<std::string>& key,
                const std::vector<double>& values) {
  auto it = map.find(key);
  if (it == map.end()) {
    map.emplace(key, std::make_pair(values, 1L));
    return;
  }
  for (std::size_t i = 0; i < values.size(); ++i) it->second.first[i] += values[i];
  it->second.second++;
}

void write_mean_map(const fs::path& path, const std::vector<std::string>& header,
                    std::size_t key_width, const MeanMap& map) {
  Csv csv(path);
  csv.line(header);
  for (const auto& [key, acc] : map) {
    std::vector<std::string> cells = key;
    (void)key_width;
    for (double v : acc.first) cells.push_back(fmt(v / static_cast<double>(acc.second)));
    csv.line(cells);
  }
}

}  // namespace

void write_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
  if (run_dirs.empty()) throw PreconditionError("report needs at least one run directory");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create '" + out_dir + "'");

  MeanMap comparison;
  std::vector<std::string> comparison_header;
  MeanMap branch_weights;
  MeanMap regressor_weights;
  MeanMap epistemic;
  MeanMap adaptation;
  std::vector<std::string> adaptation_header;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> pairs_by_dataset;

  std::string version;
  bool any_pairs_file = false;
  Csv pairs_out(fs::path(out_dir) / "aleatoric_pairs.csv");
  pairs_out.line(
      {"run", "seed", "dataset", "component", "true_sigma", "aleatoric", "fused_aleatoric"});

  for (std::size_t r = 0; r < run_dirs.size(); ++r) {
    const fs::path dir(run_dirs[r]);
    const ManifestInfo info = read_manifest(dir, version);
    for (std::uint64_t seed : info.complete_seeds) {
      const fs::path seed_dir = dir / ("seed_" + std::to_string(seed));

      const Table metrics = read_csv(seed_dir / "metrics.csv");
      if (comparison_header.empty()) {
        comparison_header = metrics.header;
      } else if (comparison_header != metrics.header) {
        throw LoadError("metrics headers differ across runs");
      }
      for (const auto& row : metrics.rows) {
        std::vector<double> values;
        for (std::size_t c = 2; c < row.size(); ++c) {
          values.push_back(cell_number(row[c], seed_dir / "metrics.csv"));
        }
        accumulate(comparison, {row[0], row[1]}, values);
      }

      const auto optional_table = [&](const char* name, Table& table) {
        const fs::path p = seed_dir / name;
        if (!fs::exists(p)) return false;
        table = read_csv(p);
        return true;
      };

      Table t;
      if (optional_table("branch_weights.csv", t)) {
        for (const auto& row : t.rows) {
          accumulate(branch_weights, {row[0], row[1], row[2]},
                     {cell_number(row[3], seed_dir / "branch_weights.csv")});
        }
      }
      if (optional_table("regressor_weights.csv", t)) {
        for (const auto& row : t.rows) {
          accumulate(regressor_weights, {row[0], row[1], row[2], row[3]},
                     {cell_number(row[4], seed_dir / "regressor_weights.csv")});
        }
      }
      if (optional_table("epistemic.csv", t)) {
        for (const auto& row : t.rows) {
          accumulate(epistemic, {row[0]}, {cell_number(row[1], seed_dir / "epistemic.csv")});
        }
      }
      if (optional_table("adaptation.csv", t)) {
        if (adaptation_header.empty()) {
          adaptation_header = t.header;
        } else if (adaptation_header != t.header) {
          throw LoadError("adaptation headers differ across runs");
        }
        for (const auto& row : t.rows) {
          std::vector<double> values;
          for (std::size_t c = 2; c < row.size(); ++c) {
            values.push_back(cell_number(row[c], seed_dir / "adaptation.csv"));
          }
          accumulate(adaptation, {row[0], row[1]}, values);
        }
      }
      if (optional_table("aleatoric_pairs.csv", t)) {
        any_pairs_file = true;
        for (const auto& row : t.rows) {
          const double sigma = cell_number(row[2], seed_dir / "aleatoric_pairs.csv");
          const double alea = cell_number(row[3], seed_dir / "aleatoric_pairs.csv");
          const double fused = cell_number(row[4], seed_dir / "aleatoric_pairs.csv");
          pairs_out.line({std::to_string(r), std::to_string(seed), row[0], row[1], fmt(sigma),
                          fmt(alea), fmt(fused)});
          auto& pools = pairs_by_dataset[row[0]];
          pools.first.push_back(alea);
          pools.second.push_back(sigma);
        }
      }
    }
  }
  (void)any_pairs_file;

  if (comparison_header.empty()) {
    throw LoadError("no complete seeds found in the given run directories");
  }
  write_mean_map(fs::path(out_dir) / "comparison.csv", comparison_header, 2, comparison);
  write_mean_map(fs::path(out_dir) / "branch_weight_heatmap.csv",
                 {"dataset", "component", "candidate", "mean_weight"}, 3, branch_weights);
  write_mean_map(fs::path(out_dir) / "regressor_weight_heatmap.csv",
                 {"branch", "component", "true_group", "regressor", "mean_weight"}, 4,
                 regressor_weights);
  if (!adaptation_header.empty()) {
    write_mean_map(fs::path(out_dir) / "adaptation_mean.csv", adaptation_header, 2, adaptation);
  }

  {
    Csv csv(fs::path(out_dir) / "uncertainty_summary.csv");
    csv.line({"dataset", "mean_epistemic", "aleatoric_spearman", "pair_count"});
    for (const auto& [key, acc] : epistemic) {
      const std::string& dataset = key[0];
      double rho = 0.0;
      std::size_t count = 0;
      const auto it = pairs_by_dataset.find(dataset);
      if (it != pairs_by_dataset.end() && it->second.first.size() >= 2) {
        rho = spearman(it->second.first, it->second.second);
        count = it->second.first.size();
      }
      csv.line({dataset, fmt(acc.first[0] / static_cast<double>(acc.second)), fmt(rho),
                std::to_string(count)});
    }
  }
}

}  // namespace evifuse
