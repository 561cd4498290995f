#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include "kvlab/data/generators.hpp"
#include "kvlab/errors.hpp"
#include "kvlab/eviction/chunked_prefill.hpp"
#include "kvlab/gates/hard_concrete.hpp"
#include "kvlab/harness/config.hpp"
#include "kvlab/ledger/event_log.hpp"
#include "kvlab/ledger/ledger.hpp"
#include "kvlab/model/transformer.hpp"
#include "kvlab/model/weights.hpp"

namespace kvlab {

/// One grid point: how heads and eviction are configured for a row.
struct MethodSetting {
  std::string method;
  double setting = 1.0;
  std::size_t chunk = 0;
  PrefillOptions options;
};

struct ResultRow {
  std::string method;
  double setting = 1.0;
  std::size_t chunk = 0;
  std::string task;
  std::uint64_t seed = 0;
  double score = 0.0;
  double footprint = 0.0;
  double peak = 0.0;
  /// Empty unless the row failed.
  std::string error;
  std::vector<EventLogRun> events;
};

/// Score and footprint of one task instance.
struct InstanceResult {
  double score = 0.0;
  FootprintReport report;
  EventLogRun events;
};

/// Loaded checkpoints shared read-only by all rows.
struct SweepAssets {
  Model model;
  std::optional<GateParams> prulong;
  std::optional<GateParams> duo;
  Vocabulary vocab;
  StreamingSpec streaming;
  std::size_t key_len = 2;
  RecallOptions recall;
};

/// Builds prompt, answer, and (for LM tasks) continuation of one instance.
inline TaskInstance make_instance(const std::string& task, const ExperimentConfig& cfg, const SweepAssets& a,
                                  std::uint64_t seed, std::size_t index) {
  Rng rng = make_rng(seed, 1000003ULL * (index + 1) + (task == "passkey" ? 1 : 2));
  if (task == "passkey") {
    PasskeyOptions o;
    o.seq_len = cfg.seq_len;
    o.key_len = a.key_len;
    o.zipf_exponent = a.recall.zipf_exponent;
    o.depth = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    return gen_passkey(o, a.vocab, rng);
  }
  if (task == "recall") {
    RecallOptions o = a.recall;
    o.seq_len = cfg.seq_len + cfg.decode_len;
    Tokens all = gen_recall_corpus(o, a.vocab, rng);
    TaskInstance t;
    t.tokens.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(cfg.seq_len));
    t.answer.assign(all.begin() + static_cast<std::ptrdiff_t>(cfg.seq_len), all.end());
    return t;
  }
  throw ConfigError("unknown task '" + task + "'");
}

/// Passkey: 100 for an exact match of the generated key, else 0.
/// LM tasks: 100 * exp(-mean NLL) of the teacher-forced continuation, i.e.
/// 100 / perplexity.
inline InstanceResult run_instance(const Model& model, const TaskInstance& t, const std::string& task,
                                   const PrefillOptions& options) {
  Session s = chunked_prefill(model, t.tokens, options);
  const StepHook hook = ledger_hook(*s.ledger, options.modes, options.streaming);
  InstanceResult r;
  if (task == "passkey") {
    const Tokens out = decode_greedy(model, s.state, options.modes, options.streaming, hook, t.answer.size());
    r.score = out == t.answer ? 100.0 : 0.0;
  } else {
    const double nll = score_continuation(model, s.state, options.modes, options.streaming, hook, t.answer);
    r.score = 100.0 * std::exp(-nll);
  }
  r.report = s.ledger->report(t.tokens.size(), t.answer.size());
  r.events = export_run(*s.ledger, 0, t.tokens.size(), t.answer.size());
  return r;
}

inline bool is_mask_method(const std::string& m) { return m == "prulong" || m == "duo" || m == "random_mask"; }

/// Eviction policy for method ids "<snap|pyramid|l2key>[_patched|_unpooled]".
inline EvictionPolicy policy_for(const std::string& method, double retention, const ExperimentConfig& cfg) {
  EvictionPolicy p;
  std::string base = method;
  auto strip = [&](const std::string& suffix) {
    if (base.size() > suffix.size() && base.compare(base.size() - suffix.size(), suffix.size(), suffix) == 0) {
      base.resize(base.size() - suffix.size());
      return true;
    }
    return false;
  };
  p.group_pooled = !strip("_unpooled");
  p.patched = strip("_patched");
  p.method = parse_method(base);
  p.retention = retention;
  p.observation_window = cfg.observation_window;
  p.smoothing_kernel = cfg.smoothing_kernel;
  p.pyramid_ratio = cfg.pyramid_ratio;
  p.protected_tail = cfg.protected_tail;
  p.validate();
  return p;
}

/// Head modes for mask methods; random masks draw their ranking from `seed`.
inline HeadModes modes_for(const std::string& method, double sparsity, const SweepAssets& a, std::uint64_t seed) {
  const ModelConfig& mc = a.model.config;
  if (method == "random_mask") {
    Rng rng = make_rng(seed, 77);
    Array scores(Shape{mc.num_layers, mc.num_query_heads});
    for (double& v : scores.values()) v = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    return discretize(scores, sparsity);
  }
  const auto& g = method == "prulong" ? a.prulong : a.duo;
  if (!g) throw ConfigError("method '" + method + "' needs a gate checkpoint");
  return discretize(g->log_alpha, sparsity);
}

/// Grid points in deterministic order: methods, then settings, then chunks.
/// "full" is always a single pass with no eviction.
inline std::vector<MethodSetting> expand_grid(const ExperimentConfig& cfg, const SweepAssets& a) {
  std::vector<MethodSetting> out;
  const HeadModes full = HeadModes::all(a.model.config, HeadKind::Full);
  for (const auto& m : cfg.methods) {
    if (m == "full") {
      MethodSetting s{m, 1.0, 0, {}};
      s.options.modes = full;
      s.options.streaming = a.streaming;
      out.push_back(std::move(s));
      continue;
    }
    const bool mask = is_mask_method(m);
    for (double v : mask ? cfg.sparsities : cfg.retentions) {
      for (std::size_t chunk : cfg.chunks) {
        MethodSetting s{m, v, chunk, {}};
        s.options.chunk_size = chunk;
        s.options.streaming = a.streaming;
        if (mask) {
          s.options.modes = full;  // replaced per seed for random masks
        } else {
          s.options.modes = full;
          s.options.policy = policy_for(m, v, cfg);
        }
        out.push_back(std::move(s));
      }
    }
  }
  return out;
}

/// Evaluates one (grid point, task, seed) row over cfg.instances instances.
inline ResultRow run_row(const MethodSetting& ms, const std::string& task, std::uint64_t seed,
                         const ExperimentConfig& cfg, const SweepAssets& a) {
  ResultRow row{ms.method, ms.setting, ms.chunk, task, seed, 0.0, 0.0, 0.0, {}, {}};
  try {
    PrefillOptions opt = ms.options;
    if (is_mask_method(ms.method)) opt.modes = modes_for(ms.method, ms.setting, a, seed);
    for (std::size_t i = 0; i < cfg.instances; ++i) {
      const TaskInstance t = make_instance(task, cfg, a, seed, i);
      InstanceResult r = run_instance(a.model, t, task, opt);
      row.score += r.score;
      row.footprint += r.report.footprint;
      row.peak += r.report.peak_kv;
      r.events.header.run = i;
      row.events.push_back(std::move(r.events));
    }
    const double n = static_cast<double>(cfg.instances);
    row.score /= n;
    row.footprint /= n;
    row.peak /= n;
  } catch (const std::exception& ex) {
    row.error = ex.what();
    row.events.clear();
  }
  return row;
}

/// Every (grid point x task x seed) row, evaluated on `cfg.threads` workers
/// and returned in grid order.
inline std::vector<ResultRow> run_sweep(const ExperimentConfig& cfg, const SweepAssets& assets) {
  cfg.validate();
  const std::vector<MethodSetting> grid = expand_grid(cfg, assets);
  struct Job {
    const MethodSetting* ms;
    std::string task;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& ms : grid)
    for (const auto& task : cfg.tasks)
      for (std::uint64_t seed : cfg.seeds) jobs.push_back(Job{&ms, task, seed});

  std::vector<ResultRow> rows(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) rows[i] = run_row(*jobs[i].ms, jobs[i].task, jobs[i].seed, cfg, assets);
  };
  const std::size_t n_threads = std::min(cfg.threads, std::max<std::size_t>(1, jobs.size()));
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  return rows;
}

/// Loads the checkpoints named by the config.
inline SweepAssets load_assets(const LabConfig& lab) {
  const ExperimentConfig& cfg = lab.sweep;
  if (!std::filesystem::exists(cfg.model_path)) throw IoError("model checkpoint not found: " + cfg.model_path);
  SweepAssets a{load_model(cfg.model_path), std::nullopt, std::nullopt, lab.vocab, lab.streaming, lab.mix.key_len,
                RecallOptions{lab.mix.seq_len, lab.mix.span_len, lab.mix.num_copies, lab.mix.zipf_exponent}};
  a.vocab.size = a.model.config.vocab_size;
  for (const auto& m : cfg.methods) {
    if (m == "prulong" && !a.prulong) {
      if (cfg.prulong_gates.empty() || !std::filesystem::exists(cfg.prulong_gates)) {
        throw IoError("prulong method needs sweep.prulong_gates (missing: '" + cfg.prulong_gates + "')");
      }
      a.prulong = load_gates(cfg.prulong_gates);
    }
    if (m == "duo" && !a.duo) {
      if (cfg.duo_gates.empty() || !std::filesystem::exists(cfg.duo_gates)) {
        throw IoError("duo method needs sweep.duo_gates (missing: '" + cfg.duo_gates + "')");
      }
      a.duo = load_gates(cfg.duo_gates);
    }
  }
  return a;
}

/// Critical footprint of one (method, chunk, task) curve.
struct SummaryRow {
  std::string method;
  std::size_t chunk = 0;
  std::string task;
  double full_score = 0.0;
  std::optional<double> critical;
};

/// Seed-averaged (footprint, score) per setting, in setting order.
struct CurvePoint {
  double setting = 0.0;
  double footprint = 0.0;
  double score = 0.0;
};

using CurveKey = std::tuple<std::string, std::size_t, std::string>;

inline std::map<CurveKey, std::vector<CurvePoint>> curves(const std::vector<ResultRow>& rows) {
  std::map<CurveKey, std::map<double, std::tuple<double, double, std::size_t>>> acc;
  for (const auto& r : rows) {
    if (!r.error.empty()) continue;
    auto& [f, s, n] = acc[{r.method, r.chunk, r.task}][r.setting];
    f += r.footprint;
    s += r.score;
    ++n;
  }
  std::map<CurveKey, std::vector<CurvePoint>> out;
  for (const auto& [key, pts] : acc) {
    for (const auto& [setting, v] : pts) {
      const auto& [f, s, n] = v;
      out[key].push_back(CurvePoint{setting, f / static_cast<double>(n), s / static_cast<double>(n)});
    }
  }
  return out;
}

/// Seed-averaged score of the "full" rows per task.
inline std::map<std::string, double> baselines(const std::vector<ResultRow>& rows) {
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (const auto& r : rows) {
    if (r.method != "full" || !r.error.empty()) continue;
    acc[r.task].first += r.score;
    ++acc[r.task].second;
  }
  std::map<std::string, double> out;
  for (const auto& [task, v] : acc) out[task] = v.first / static_cast<double>(v.second);
  return out;
}

inline std::vector<SummaryRow> summarize(const std::vector<ResultRow>& rows, double fraction) {
  const auto base = baselines(rows);
  std::vector<SummaryRow> out;
  for (const auto& [key, pts] : curves(rows)) {
    const auto& [method, chunk, task] = key;
    auto it = base.find(task);
    if (it == base.end()) throw ContractError("summarize: no full-attention baseline for task '" + task + "'");
    std::vector<std::pair<double, double>> points;
    for (const auto& p : pts) points.emplace_back(p.footprint, p.score);
    SummaryRow s{method, chunk, task, it->second, std::nullopt};
    if (it->second > 0.0) s.critical = critical_footprint(points, it->second, fraction);
    out.push_back(s);
  }
  return out;
}

}  // namespace kvlab
