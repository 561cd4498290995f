#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "kvlab/errors.hpp"
#include "kvlab/model/config.hpp"
#include "kvlab/tensor/array.hpp"

namespace kvlab {

struct LayerWeights {
  Array wq;  // [model_dim, H*d]
  Array wk;  // [model_dim, G*d]
  Array wv;  // [model_dim, G*d]
  Array wo;  // [H*d, model_dim]
  Array w1;  // [model_dim, ffn_dim]
  Array w2;  // [ffn_dim, model_dim]

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct ModelWeights {
  Array embedding;    // [vocab, model_dim]
  std::vector<LayerWeights> layers;
  Array unembedding;  // [model_dim, vocab]

  /// Every parameter with a stable name, in a fixed order.
  std::vector<std::pair<std::string, Array*>> named() {
    std::vector<std::pair<std::string, Array*>> out{{"embedding", &embedding}};
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      auto& w = layers[l];
      out.insert(out.end(), {{p + "wq", &w.wq}, {p + "wk", &w.wk}, {p + "wv", &w.wv}, {p + "wo", &w.wo}});
      if (w.w1.rank() == 2) out.insert(out.end(), {{p + "w1", &w.w1}, {p + "w2", &w.w2}});
    }
    out.emplace_back("unembedding", &unembedding);
    return out;
  }

  std::vector<std::pair<std::string, const Array*>> named() const {
    std::vector<std::pair<std::string, const Array*>> out;
    for (auto& [name, ptr] : const_cast<ModelWeights*>(this)->named()) out.emplace_back(name, ptr);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, a] : named()) n += a->size();
    return n;
  }

  friend bool operator==(const ModelWeights&, const ModelWeights&) = default;
};

/// Gaussian initialisation with standard deviation `scale`.
inline ModelWeights init_weights(const ModelConfig& config, std::uint64_t seed, double scale = 0.02) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  auto make = [&](std::size_t r, std::size_t c) {
    Array a(Shape{r, c});
    for (double& v : a.values()) v = normal(rng);
    return a;
  };
  const std::size_t D = config.model_dim, d = config.head_dim;
  ModelWeights w;
  w.embedding = make(config.vocab_size, D);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    LayerWeights lw;
    lw.wq = make(D, config.num_query_heads * d);
    lw.wk = make(D, config.num_kv_heads * d);
    lw.wv = make(D, config.num_kv_heads * d);
    lw.wo = make(config.num_query_heads * d, D);
    if (config.ffn_dim > 0) {
      lw.w1 = make(D, config.ffn_dim);
      lw.w2 = make(config.ffn_dim, D);
    }
    w.layers.push_back(std::move(lw));
  }
  w.unembedding = make(D, config.vocab_size);
  return w;
}

struct Model {
  ModelConfig config;
  ModelWeights weights;
};

inline Model make_model(const ModelConfig& config, std::uint64_t seed, double scale = 0.02) {
  return Model{config, init_weights(config, seed, scale)};
}

// Checkpoint text format:
//
//   kvlab-model 1
//   config <key> <value> ...            (one line, all ModelConfig fields)
//   manifest <count>
//   <name> <rank> <dim>...              (count lines)
//   data <name>                         (per tensor, in manifest order)
//   <values separated by spaces, %.17g>
//
// %.17g round-trips every double exactly.

namespace detail {

inline void write_values(std::ostream& os, const Array& a) {
  char buf[32];
  for (std::size_t i = 0; i < a.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", a[i]);
    if (i) os << ' ';
    os << buf;
  }
  os << '\n';
}

inline void read_values(std::istream& is, Array& a, const std::string& name) {
  std::string tok;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(is >> tok)) throw IoError("checkpoint truncated in tensor " + name);
    a[i] = std::strtod(tok.c_str(), nullptr);
  }
}

inline std::string config_line(const ModelConfig& c) {
  std::ostringstream os;
  char base[32];
  std::snprintf(base, sizeof base, "%.17g", c.rope_base);
  os << "config num_layers " << c.num_layers << " num_query_heads " << c.num_query_heads << " num_kv_heads "
     << c.num_kv_heads << " head_dim " << c.head_dim << " model_dim " << c.model_dim << " vocab_size " << c.vocab_size
     << " max_positions " << c.max_positions << " rope_base " << base << " ffn_dim " << c.ffn_dim;
  return os.str();
}

inline ModelConfig parse_config_line(const std::string& line) {
  std::istringstream is(line);
  std::string head, key, value;
  is >> head;
  if (head != "config") throw IoError("checkpoint: expected config line");
  ModelConfig c;
  while (is >> key >> value) {
    if (key == "num_layers") c.num_layers = std::stoull(value);
    else if (key == "num_query_heads") c.num_query_heads = std::stoull(value);
    else if (key == "num_kv_heads") c.num_kv_heads = std::stoull(value);
    else if (key == "head_dim") c.head_dim = std::stoull(value);
    else if (key == "model_dim") c.model_dim = std::stoull(value);
    else if (key == "vocab_size") c.vocab_size = std::stoull(value);
    else if (key == "max_positions") c.max_positions = std::stoull(value);
    else if (key == "rope_base") c.rope_base = std::strtod(value.c_str(), nullptr);
    else if (key == "ffn_dim") c.ffn_dim = std::stoull(value);
    else throw IoError("checkpoint: unknown config key " + key);
  }
  c.validate();
  return c;
}

}  // namespace detail

inline void save_model(const Model& model, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "kvlab-model 1\n" << detail::config_line(model.config) << '\n';
  const auto tensors = model.weights.named();
  os << "manifest " << tensors.size() << '\n';
  for (const auto& [name, a] : tensors) {
    os << name << ' ' << a->rank();
    for (std::size_t d : a->shape()) os << ' ' << d;
    os << '\n';
  }
  for (const auto& [name, a] : tensors) {
    os << "data " << name << '\n';
    detail::write_values(os, *a);
  }
  if (!os) throw IoError("write failed for " + path.string());
}

inline Model load_model(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open model checkpoint " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != "kvlab-model 1") throw IoError(path.string() + ": not a kvlab model checkpoint");
  std::getline(is, line);
  Model model;
  model.config = detail::parse_config_line(line);
  model.weights = init_weights(model.config, 0, 0.0);

  std::string word;
  std::size_t count = 0;
  is >> word >> count;
  if (word != "manifest") throw IoError(path.string() + ": missing manifest");
  auto tensors = model.weights.named();
  if (count != tensors.size()) throw IoError(path.string() + ": manifest size does not match config");
  for (auto& [name, a] : tensors) {
    std::string got;
    std::size_t rank = 0;
    is >> got >> rank;
    Shape shape(rank);
    for (auto& d : shape) is >> d;
    if (got != name || shape != a->shape()) throw IoError(path.string() + ": manifest entry mismatch at " + got);
  }
  for (auto& [name, a] : tensors) {
    std::string got;
    is >> word >> got;
    if (word != "data" || got != name) throw IoError(path.string() + ": expected data for " + name);
    detail::read_values(is, *a, name);
  }
  return model;
}

}  // namespace kvlab
