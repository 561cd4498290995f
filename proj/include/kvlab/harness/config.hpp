#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "kvlab/data/generators.hpp"
#include "kvlab/errors.hpp"
#include "kvlab/eviction/policy.hpp"
#include "kvlab/gates/hard_concrete.hpp"
#include "kvlab/model/config.hpp"
#include "kvlab/trainer/trainer.hpp"

namespace kvlab {

/// Sweep grid and evaluation settings.
struct ExperimentConfig {
  std::string model_path = "model.txt";
  std::string prulong_gates;
  std::string duo_gates;
  std::vector<std::string> methods{"full", "snap", "pyramid", "snap_patched", "pyramid_patched", "prulong"};
  std::vector<double> retentions{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::vector<double> sparsities{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::vector<std::size_t> chunks{64, 256};
  std::vector<std::string> tasks{"passkey"};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t instances = 4;
  double fraction = 0.9;
  std::string out_dir = "results";
  std::size_t seq_len = 512;
  /// Continuation length of LM tasks.
  std::size_t decode_len = 16;
  std::size_t threads = 1;
  bool write_events = true;

  std::size_t observation_window = 16;
  std::size_t smoothing_kernel = 7;
  double pyramid_ratio = 8.0;
  std::optional<std::size_t> protected_tail;

  void validate() const {
    detail::require_config(!methods.empty() && !tasks.empty() && !seeds.empty(), "sweep grid is empty");
    detail::require_config(fraction > 0.0 && fraction < 1.0, "F must lie in (0, 1)");
    detail::require_config(instances >= 1, "instances must be >= 1");
    detail::require_config(threads >= 1, "threads must be >= 1");
  }
};

/// Everything the command-line tool reads from one key=value file.
struct LabConfig {
  ModelConfig model;
  std::uint64_t model_seed = 0;
  double init_scale = 0.02;
  Vocabulary vocab;
  TrainingMix mix;
  StreamingSpec streaming;
  TrainConfig pretrain;
  TrainConfig prulong;
  TrainConfig duo;
  GateParams gate_defaults;
  std::string metrics_path;
  ExperimentConfig sweep;

  LabConfig() {
    pretrain.mode = LossMode::PlainLM;
    pretrain.steps = 3000;
    pretrain.batch_size = 8;
    pretrain.lr_weights = 3e-3;
    prulong.mode = LossMode::PruLong;
    prulong.steps = 300;
    prulong.batch_size = 4;
    prulong.sparsity = SparsitySchedule{240, 0.5, 300};
    duo.mode = LossMode::Duo;
    duo.steps = 300;
    duo.batch_size = 4;
  }

  /// Pushes shared settings (vocabulary size, streaming, sequence length)
  /// into the sub-configs.
  void sync() {
    model.model_dim = model.num_query_heads * model.head_dim;
    vocab.size = model.vocab_size;
    for (TrainConfig* c : {&pretrain, &prulong, &duo}) {
      c->streaming = streaming;
      c->seq_len = mix.seq_len;
    }
    prulong.sparsity.total_steps = prulong.steps;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T out{};
  if (!(is >> out) || !(is >> std::ws).eof()) throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

}  // namespace detail

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<void(LabConfig&, const std::string&)> set;
};

/// Every recognised key; the CLI exposes each one as --<name>.
inline const std::vector<ConfigKey>& config_keys() {
  using detail::parse_number;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto size_key = [&](const std::string& name, const std::string& help, auto getter) {
      k.push_back({name, help, [name, getter](LabConfig& c, const std::string& v) {
                     getter(c) = parse_number<std::size_t>(name, v);
                   }});
    };
    auto real_key = [&](const std::string& name, const std::string& help, auto getter) {
      k.push_back({name, help, [name, getter](LabConfig& c, const std::string& v) {
                     getter(c) = parse_number<double>(name, v);
                   }});
    };
    auto seed_key = [&](const std::string& name, const std::string& help, auto getter) {
      k.push_back({name, help, [name, getter](LabConfig& c, const std::string& v) {
                     getter(c) = parse_number<std::uint64_t>(name, v);
                   }});
    };
    auto str_key = [&](const std::string& name, const std::string& help, auto getter) {
      k.push_back({name, help, [getter](LabConfig& c, const std::string& v) { getter(c) = v; }});
    };

    size_key("model.layers", "number of layers", [](LabConfig& c) -> std::size_t& { return c.model.num_layers; });
    size_key("model.heads", "query heads per layer", [](LabConfig& c) -> std::size_t& { return c.model.num_query_heads; });
    size_key("model.kv_heads", "kv heads per layer", [](LabConfig& c) -> std::size_t& { return c.model.num_kv_heads; });
    size_key("model.head_dim", "per-head width", [](LabConfig& c) -> std::size_t& { return c.model.head_dim; });
    size_key("model.vocab", "vocabulary size", [](LabConfig& c) -> std::size_t& { return c.model.vocab_size; });
    size_key("model.ffn_dim", "feed-forward width, 0 disables", [](LabConfig& c) -> std::size_t& { return c.model.ffn_dim; });
    real_key("model.rope_base", "rotary base", [](LabConfig& c) -> double& { return c.model.rope_base; });
    seed_key("model.seed", "initialisation seed", [](LabConfig& c) -> std::uint64_t& { return c.model_seed; });
    real_key("model.init_scale", "std of the Gaussian weight init", [](LabConfig& c) -> double& { return c.init_scale; });

    size_key("data.key_range", "number of reserved passkey tokens", [](LabConfig& c) -> std::size_t& { return c.vocab.key_range; });
    size_key("data.seq_len", "training sequence length", [](LabConfig& c) -> std::size_t& { return c.mix.seq_len; });
    real_key("data.passkey_fraction", "share of passkey sequences in training", [](LabConfig& c) -> double& { return c.mix.passkey_fraction; });
    size_key("data.key_len", "passkey length in tokens", [](LabConfig& c) -> std::size_t& { return c.mix.key_len; });
    size_key("data.span_len", "recall span length", [](LabConfig& c) -> std::size_t& { return c.mix.span_len; });
    size_key("data.num_copies", "recall copies per sequence", [](LabConfig& c) -> std::size_t& { return c.mix.num_copies; });
    real_key("data.zipf_exponent", "filler Zipf exponent", [](LabConfig& c) -> double& { return c.mix.zipf_exponent; });

    size_key("stream.sink", "sink tokens of streaming heads", [](LabConfig& c) -> std::size_t& { return c.streaming.sink_size; });
    size_key("stream.window", "local window of streaming heads", [](LabConfig& c) -> std::size_t& { return c.streaming.window_size; });

    for (const std::string sec : {"pretrain", "prulong", "duo"}) {
      auto cfg = [sec](LabConfig& c) -> TrainConfig& { return sec == "pretrain" ? c.pretrain : sec == "prulong" ? c.prulong : c.duo; };
      size_key(sec + ".steps", "training steps", [cfg](LabConfig& c) -> std::size_t& { return cfg(c).steps; });
      size_key(sec + ".batch", "sequences per step", [cfg](LabConfig& c) -> std::size_t& { return cfg(c).batch_size; });
      real_key(sec + ".lr_weights", "weight learning rate, 0 freezes", [cfg](LabConfig& c) -> double& { return cfg(c).lr_weights; });
      real_key(sec + ".warmup_fraction", "lr warmup share of steps", [cfg](LabConfig& c) -> double& { return cfg(c).warmup_fraction; });
      real_key(sec + ".final_fraction", "final lr as share of peak", [cfg](LabConfig& c) -> double& { return cfg(c).final_fraction; });
      real_key(sec + ".grad_clip", "global gradient norm clip, 0 disables", [cfg](LabConfig& c) -> double& { return cfg(c).grad_clip; });
      seed_key(sec + ".seed", "training seed", [cfg](LabConfig& c) -> std::uint64_t& { return cfg(c).seed; });
    }
    real_key("prulong.lr_log_alpha", "gate learning rate", [](LabConfig& c) -> double& { return c.prulong.lr_log_alpha; });
    real_key("prulong.lr_lambda", "multiplier learning rate", [](LabConfig& c) -> double& { return c.prulong.lr_lambda; });
    real_key("prulong.target", "final target sparsity", [](LabConfig& c) -> double& { return c.prulong.sparsity.final_target; });
    size_key("prulong.warmup_steps", "steps to reach the target", [](LabConfig& c) -> std::size_t& { return c.prulong.sparsity.warmup_steps; });
    real_key("prulong.init_log_alpha", "initial gate log_alpha", [](LabConfig& c) -> double& { return c.prulong.init_log_alpha; });
    real_key("gates.temperature", "hard-concrete temperature", [](LabConfig& c) -> double& { return c.gate_defaults.temperature; });
    real_key("gates.stretch_low", "stretch lower bound", [](LabConfig& c) -> double& { return c.gate_defaults.stretch_low; });
    real_key("gates.stretch_high", "stretch upper bound", [](LabConfig& c) -> double& { return c.gate_defaults.stretch_high; });
    real_key("gates.epsilon", "noise truncation", [](LabConfig& c) -> double& { return c.gate_defaults.epsilon; });
    real_key("duo.lr", "gate learning rate", [](LabConfig& c) -> double& { return c.duo.lr_duo; });
    real_key("duo.l1", "L1 weight on gates", [](LabConfig& c) -> double& { return c.duo.duo_l1; });
    str_key("metrics", "training metrics CSV path", [](LabConfig& c) -> std::string& { return c.metrics_path; });

    str_key("sweep.model", "model checkpoint", [](LabConfig& c) -> std::string& { return c.sweep.model_path; });
    str_key("sweep.prulong_gates", "PruLong gate checkpoint", [](LabConfig& c) -> std::string& { return c.sweep.prulong_gates; });
    str_key("sweep.duo_gates", "Duo gate checkpoint", [](LabConfig& c) -> std::string& { return c.sweep.duo_gates; });
    str_key("sweep.out_dir", "output directory", [](LabConfig& c) -> std::string& { return c.sweep.out_dir; });
    k.push_back({"sweep.methods", "comma-separated method ids",
                 [](LabConfig& c, const std::string& v) { c.sweep.methods = detail::split_list(v); }});
    k.push_back({"sweep.tasks", "comma-separated tasks (passkey, recall)",
                 [](LabConfig& c, const std::string& v) { c.sweep.tasks = detail::split_list(v); }});
    k.push_back({"sweep.retentions", "retention fractions for eviction methods", [](LabConfig& c, const std::string& v) {
                   c.sweep.retentions.clear();
                   for (const auto& s : detail::split_list(v)) c.sweep.retentions.push_back(parse_number<double>("sweep.retentions", s));
                 }});
    k.push_back({"sweep.sparsities", "head sparsities for mask methods", [](LabConfig& c, const std::string& v) {
                   c.sweep.sparsities.clear();
                   for (const auto& s : detail::split_list(v)) c.sweep.sparsities.push_back(parse_number<double>("sweep.sparsities", s));
                 }});
    k.push_back({"sweep.chunks", "chunk sizes, 0 means single pass", [](LabConfig& c, const std::string& v) {
                   c.sweep.chunks.clear();
                   for (const auto& s : detail::split_list(v)) c.sweep.chunks.push_back(parse_number<std::size_t>("sweep.chunks", s));
                 }});
    k.push_back({"sweep.seeds", "evaluation seeds", [](LabConfig& c, const std::string& v) {
                   c.sweep.seeds.clear();
                   for (const auto& s : detail::split_list(v)) c.sweep.seeds.push_back(parse_number<std::uint64_t>("sweep.seeds", s));
                 }});
    size_key("sweep.instances", "task instances per row", [](LabConfig& c) -> std::size_t& { return c.sweep.instances; });
    real_key("sweep.F", "critical footprint fraction", [](LabConfig& c) -> double& { return c.sweep.fraction; });
    size_key("sweep.seq_len", "evaluation prompt length", [](LabConfig& c) -> std::size_t& { return c.sweep.seq_len; });
    size_key("sweep.decode_len", "LM continuation length", [](LabConfig& c) -> std::size_t& { return c.sweep.decode_len; });
    size_key("sweep.threads", "worker threads", [](LabConfig& c) -> std::size_t& { return c.sweep.threads; });
    k.push_back({"sweep.write_events", "emit per-row event logs",
                 [](LabConfig& c, const std::string& v) { c.sweep.write_events = detail::parse_bool("sweep.write_events", v); }});
    size_key("evict.window", "observation window k", [](LabConfig& c) -> std::size_t& { return c.sweep.observation_window; });
    size_key("evict.kernel", "smoothing kernel width", [](LabConfig& c) -> std::size_t& { return c.sweep.smoothing_kernel; });
    real_key("evict.pyramid_ratio", "first/last layer budget ratio", [](LabConfig& c) -> double& { return c.sweep.pyramid_ratio; });
    k.push_back({"evict.protected_tail", "prompt tail never evicted (default k)", [](LabConfig& c, const std::string& v) {
                   c.sweep.protected_tail = parse_number<std::size_t>("evict.protected_tail", v);
                 }});
    return k;
  }();
  return keys;
}

inline void set_config_key(LabConfig& c, const std::string& key, const std::string& value) {
  for (const auto& k : config_keys()) {
    if (k.name == key) {
      k.set(c, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

/// Reads `key = value` lines; blank lines and lines starting with '#' are ignored.
inline void apply_config_text(LabConfig& c, std::istream& is, const std::string& origin = "config") {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    set_config_key(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

inline LabConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  LabConfig c;
  apply_config_text(c, is, path.string());
  return c;
}

}  // namespace kvlab
