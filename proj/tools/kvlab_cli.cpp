// kvlab: train toy models and gates, run eviction sweeps, replay event logs.
//
//   kvlab pretrain --config lab.cfg --out model.txt
//   kvlab prulong  --config lab.cfg --model model.txt --out gates.txt
//   kvlab duo      --config lab.cfg --model model.txt --out duo.txt
//   kvlab sweep    --config lab.cfg
//   kvlab report   --results results/results.csv --out-dir results
//   kvlab footprint events/0000_full_1_0_passkey_0.jsonl
//
// Every config key can be overridden on the command line as --<key> <value>.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kvlab/kvlab.hpp"

namespace {

using namespace kvlab;

struct Overrides {
  std::string config_path;
  std::map<std::string, std::string> values;
};

void add_config_options(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config_path, "key = value config file");
  for (const auto& key : config_keys()) {
    cmd->add_option_function<std::string>(
        "--" + key.name, [&o, name = key.name](const std::string& v) { o.values[name] = v; }, key.help);
  }
}

LabConfig resolve(const Overrides& o) {
  LabConfig c = o.config_path.empty() ? LabConfig{} : load_config(o.config_path);
  for (const auto& [k, v] : o.values) set_config_key(c, k, v);
  c.sync();
  return c;
}

SequenceSource training_source(const LabConfig& c) {
  return [mix = c.mix, vocab = c.vocab](Rng& rng) { return gen_training_sequence(mix, vocab, rng); };
}

MetricsSink metrics_sink(const LabConfig& c, std::unique_ptr<MetricsCsv>& csv, bool verbose) {
  if (!c.metrics_path.empty()) csv = std::make_unique<MetricsCsv>(c.metrics_path);
  return [&csv, verbose](const TrainLog& l) {
    if (csv) (*csv)(l);
    if (verbose) {
      std::fprintf(stderr, "step %zu nll %.4f sparsity %.4f target %.4f lambda %.4f %.4f\n", l.step, l.nll,
                   l.expected_sparsity, l.target, l.lambda1, l.lambda2);
    }
  };
}

int cmd_pretrain(const Overrides& o, const std::string& init, const std::string& out, bool verbose) {
  LabConfig c = resolve(o);
  Model model = init.empty() ? make_model(c.model, c.model_seed, c.init_scale) : load_model(init);
  std::unique_ptr<MetricsCsv> csv;
  model = pretrain_lm(std::move(model), c.pretrain, training_source(c), metrics_sink(c, csv, verbose));
  save_model(model, out);
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

int cmd_prulong(const Overrides& o, const std::string& model_path, const std::string& out, bool verbose) {
  LabConfig c = resolve(o);
  Model model = load_model(model_path);
  std::unique_ptr<MetricsCsv> csv;
  const PruLongState st = train_prulong(model, c.prulong, training_source(c), metrics_sink(c, csv, verbose), c.gate_defaults);
  save_gates(st.gates, out);
  if (c.prulong.lr_weights > 0.0) save_model(model, out + ".model");
  std::printf("wrote %s (expected sparsity %.4f)\n", out.c_str(), expected_sparsity(st.gates));
  return 0;
}

int cmd_duo(const Overrides& o, const std::string& model_path, const std::string& out, bool verbose) {
  LabConfig c = resolve(o);
  const Model model = load_model(model_path);
  std::unique_ptr<MetricsCsv> csv;
  const DuoState st = train_duo(model, c.duo, training_source(c), metrics_sink(c, csv, verbose));
  GateParams g = c.gate_defaults;
  g.log_alpha = st.z;
  save_gates(g, out);
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

int cmd_sweep(const Overrides& o) {
  LabConfig c = resolve(o);
  const SweepAssets assets = load_assets(c);
  const std::vector<ResultRow> rows = run_sweep(c.sweep, assets);
  const std::vector<SummaryRow> summary = summarize(rows, c.sweep.fraction);
  emit_report(rows, summary, c.sweep.out_dir, c.sweep.fraction);
  std::size_t errors = 0;
  for (const auto& r : rows) errors += !r.error.empty();
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (!rows[i].error.empty()) std::fprintf(stderr, "row %zu (%s): %s\n", i, rows[i].method.c_str(), rows[i].error.c_str());
  std::printf("%zu rows (%zu errors) written to %s\n", rows.size(), errors, c.sweep.out_dir.c_str());
  return 0;
}

int cmd_report(const std::string& results, const std::string& out_dir, double fraction) {
  const std::vector<ResultRow> rows = read_results_csv(results);
  const std::vector<SummaryRow> summary = summarize(rows, fraction);
  emit_report(rows, summary, out_dir, fraction);
  write_summary_csv(std::cout, summary);
  return 0;
}

int cmd_footprint(const std::vector<std::string>& logs) {
  for (const auto& path : logs) {
    const auto runs = load_event_log(path);
    for (const auto& run : runs) {
      const FootprintReport r = replay_check(run);
      std::printf("%s run %zu footprint %.10g peak %.10g\n", path.c_str(), run.header.run, r.footprint, r.peak_kv);
    }
    const auto [f, p] = replay_mean(runs);
    std::printf("%s mean footprint %.10g peak %.10g\n", path.c_str(), f, p);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kvlab: KV footprint lab for toy transformers"};
  app.require_subcommand(1);

  Overrides pre_o, pl_o, duo_o, sweep_o;
  std::string pre_init, pre_out = "model.txt";
  std::string pl_model = "model.txt", pl_out = "prulong_gates.txt";
  std::string duo_model = "model.txt", duo_out = "duo_gates.txt";
  std::string rep_results, rep_out = "results";
  double rep_fraction = 0.9;
  std::vector<std::string> fp_logs;
  bool verbose = false;

  auto* pre = app.add_subcommand("pretrain", "train a toy base model on the synthetic mix");
  add_config_options(pre, pre_o);
  pre->add_option("--init", pre_init, "start from this checkpoint instead of a fresh model");
  pre->add_option("--out", pre_out, "output checkpoint");
  pre->add_flag("-v,--verbose", verbose, "print every step");

  auto* pl = app.add_subcommand("prulong", "learn streaming/full head gates under a sparsity target");
  add_config_options(pl, pl_o);
  pl->add_option("--model", pl_model, "base model checkpoint");
  pl->add_option("--out", pl_out, "output gate checkpoint");
  pl->add_flag("-v,--verbose", verbose, "print every step");

  auto* duo = app.add_subcommand("duo", "learn continuous head gates by hidden-state reconstruction");
  add_config_options(duo, duo_o);
  duo->add_option("--model", duo_model, "base model checkpoint");
  duo->add_option("--out", duo_out, "output gate checkpoint");
  duo->add_flag("-v,--verbose", verbose, "print every step");

  auto* sweep = app.add_subcommand("sweep", "evaluate every grid point and write the report");
  add_config_options(sweep, sweep_o);

  auto* rep = app.add_subcommand("report", "rebuild summary and plots from a results CSV");
  rep->add_option("--results", rep_results, "results.csv")->required();
  rep->add_option("--out-dir", rep_out, "output directory");
  rep->add_option("--F", rep_fraction, "critical footprint fraction");

  auto* fp = app.add_subcommand("footprint", "replay event logs and print footprint and peak");
  fp->add_option("logs", fp_logs, "event log files")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*pre) return cmd_pretrain(pre_o, pre_init, pre_out, verbose);
    if (*pl) return cmd_prulong(pl_o, pl_model, pl_out, verbose);
    if (*duo) return cmd_duo(duo_o, duo_model, duo_out, verbose);
    if (*sweep) return cmd_sweep(sweep_o);
    if (*rep) return cmd_report(rep_results, rep_out, rep_fraction);
    if (*fp) return cmd_footprint(fp_logs);
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "kvlab: %s\n", ex.what());
    return 1;
  }
  return 0;
}
