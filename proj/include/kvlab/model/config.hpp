#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "kvlab/errors.hpp"

namespace kvlab {

/// Shape of the toy grouped-query-attention decoder.
struct ModelConfig {
  std::size_t num_layers = 2;
  std::size_t num_query_heads = 4;
  std::size_t num_kv_heads = 4;
  std::size_t head_dim = 16;
  std::size_t model_dim = 64;
  std::size_t vocab_size = 64;
  std::size_t max_positions = 4096;
  double rope_base = 10000.0;
  /// Hidden width of the feed-forward block; 0 disables it.
  std::size_t ffn_dim = 128;

  std::size_t group_size() const { return num_query_heads / num_kv_heads; }
  std::size_t kv_head_of(std::size_t query_head) const { return query_head / group_size(); }

  void validate() const {
    detail::require_config(num_layers >= 1, "num_layers must be >= 1");
    detail::require_config(num_kv_heads >= 1 && num_query_heads >= 1, "head counts must be >= 1");
    detail::require_config(num_query_heads % num_kv_heads == 0, "num_query_heads must be a multiple of num_kv_heads");
    detail::require_config(head_dim >= 2 && head_dim % 2 == 0, "head_dim must be even");
    detail::require_config(model_dim == num_query_heads * head_dim, "model_dim must equal num_query_heads * head_dim");
    detail::require_config(vocab_size >= 1, "vocab_size must be >= 1");
    detail::require_config(rope_base > 1.0, "rope_base must be > 1");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Sink tokens plus a recent window; the window includes the query itself.
struct StreamingSpec {
  std::size_t sink_size = 4;
  std::size_t window_size = 32;

  void validate() const { detail::require_config(window_size >= 1, "window_size must be >= 1"); }
};

inline bool streaming_allowed(std::size_t query_pos, std::size_t key_pos, const StreamingSpec& spec) {
  return key_pos < spec.sink_size || query_pos - key_pos < spec.window_size;
}

enum class HeadKind { Full, Streaming, Gated };

/// Attention kind per (layer, query head). Gated heads read their mixing
/// weight from a separate differentiable L x H gate array and exist only
/// during training.
class HeadModes {
 public:
  HeadModes() = default;
  HeadModes(std::size_t layers, std::size_t heads, HeadKind kind = HeadKind::Full)
      : layers_(layers), heads_(heads), kinds_(layers * heads, kind) {}

  static HeadModes all(const ModelConfig& c, HeadKind kind) { return HeadModes(c.num_layers, c.num_query_heads, kind); }

  std::size_t layers() const { return layers_; }
  std::size_t heads() const { return heads_; }

  HeadKind at(std::size_t layer, std::size_t head) const { return kinds_.at(layer * heads_ + head); }
  void set(std::size_t layer, std::size_t head, HeadKind kind) { kinds_.at(layer * heads_ + head) = kind; }

  std::size_t count(HeadKind kind) const {
    std::size_t n = 0;
    for (HeadKind k : kinds_) n += (k == kind);
    return n;
  }

  bool has_gated() const { return count(HeadKind::Gated) > 0; }

  void check_matches(const ModelConfig& c) const {
    detail::require_config(layers_ == c.num_layers && heads_ == c.num_query_heads,
                           "head mode table does not match model shape");
  }

  friend bool operator==(const HeadModes&, const HeadModes&) = default;

 private:
  std::size_t layers_ = 0;
  std::size_t heads_ = 0;
  std::vector<HeadKind> kinds_;
};

}  // namespace kvlab
