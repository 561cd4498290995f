#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "kvlab/errors.hpp"
#include "kvlab/model/config.hpp"
#include "kvlab/model/kv_cache.hpp"
#include "kvlab/model/weights.hpp"
#include "kvlab/tensor/ops.hpp"
#include "kvlab/tensor/tape.hpp"

namespace kvlab {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// Additive mask [queries, keys]: 0 where allowed, -inf elsewhere.
inline Array causal_mask(std::span<const std::size_t> q_pos, std::span<const std::size_t> k_pos,
                         const StreamingSpec* streaming = nullptr) {
  Array m(Shape{q_pos.size(), k_pos.size()}, kNegInf);
  for (std::size_t i = 0; i < q_pos.size(); ++i) {
    for (std::size_t j = 0; j < k_pos.size(); ++j) {
      if (k_pos[j] > q_pos[i]) continue;
      if (streaming && !streaming_allowed(q_pos[i], k_pos[j], *streaming)) continue;
      m.at(i, j) = 0.0;
    }
  }
  return m;
}

/// softmax(q k^T + mask) v for one head; `k_t` is already transposed.
inline Var masked_attention(const Var& q, const Var& k_t, const Var& v, const Var& mask) {
  return matmul(row_softmax_with_additive_mask(matmul(q, k_t), mask), v);
}

/// z * Attn_full + (1 - z) * Attn_streaming over the same scores.
/// `q` is expected to be pre-scaled by 1/sqrt(d).
inline Var hybrid_attend(const Var& q, const Var& k, const Var& v, const Var& z, std::span<const std::size_t> q_pos,
                         std::span<const std::size_t> k_pos, const StreamingSpec& spec) {
  if (k.value().rows() == 0 || k_pos.empty()) throw ContractError("hybrid_attend: empty key set");
  if (k.value().rows() != k_pos.size() || q.value().rows() != q_pos.size()) {
    throw ConfigError("hybrid_attend: positions do not match operand rows");
  }
  Tape& tape = detail::tape_of(q);
  const Var k_t = transpose_last2(k);
  const Var scores = matmul(q, k_t);
  const Var full_mask = tape.constant(causal_mask(q_pos, k_pos));
  const Var stream_mask = tape.constant(causal_mask(q_pos, k_pos, &spec));
  const Var full = matmul(row_softmax_with_additive_mask(scores, full_mask), v);
  const Var stream = matmul(row_softmax_with_additive_mask(scores, stream_mask), v);
  return lerp(full, stream, z);
}

/// Model parameters placed on a tape.
struct BoundWeights {
  struct Layer {
    Var wq, wk, wv, wo, w1, w2;
  };
  Var embedding;
  std::vector<Layer> layers;
  Var unembedding;
};

/// References the model's arrays without copying; the model must outlive the tape.
inline BoundWeights bind_weights(Tape& tape, const ModelWeights& w, bool trainable) {
  BoundWeights b;
  b.embedding = tape.leaf_ref(w.embedding, trainable);
  for (const auto& lw : w.layers) {
    BoundWeights::Layer l;
    l.wq = tape.leaf_ref(lw.wq, trainable);
    l.wk = tape.leaf_ref(lw.wk, trainable);
    l.wv = tape.leaf_ref(lw.wv, trainable);
    l.wo = tape.leaf_ref(lw.wo, trainable);
    if (lw.w1.rank() == 2) {
      l.w1 = tape.leaf_ref(lw.w1, trainable);
      l.w2 = tape.leaf_ref(lw.w2, trainable);
    }
    b.layers.push_back(l);
  }
  b.unembedding = tape.leaf_ref(w.unembedding, trainable);
  return b;
}

/// Post-softmax attention of one query head: rows are the chunk queries,
/// columns are the slot's keys in cache order (resident entries first,
/// then the chunk's own keys).
struct AttentionRecord {
  std::size_t layer = 0;
  std::size_t query_head = 0;
  std::size_t slot = 0;
  Array probs;
  std::vector<std::size_t> key_positions;
};

struct ForwardRequest {
  std::span<const std::size_t> tokens;
  std::span<const std::size_t> positions;
  const HeadModes* modes = nullptr;
  StreamingSpec streaming;
  /// [L, H] mixing weights for Gated heads.
  std::optional<Var> gates;
  bool record_attention = false;
};

struct ForwardResult {
  Var logits;        // [chunk, vocab]
  Var final_hidden;  // [chunk, model_dim], normalised, before the output projection
  /// Per (layer * G + kv_head): rotated keys and values of the chunk, [chunk, d].
  std::vector<Array> new_keys;
  std::vector<Array> new_values;
  std::vector<AttentionRecord> attention;
  /// Per cache slot: keys attended by at least one query of the chunk.
  std::vector<std::size_t> active;
};

/// One forward pass of `request.tokens` against the resident entries of
/// `cache`. The cache is read, never modified.
inline ForwardResult forward_core(Tape& tape, const ModelConfig& config, const BoundWeights& w, const KVCache& cache,
                                  const ForwardRequest& request) {
  const std::size_t n = request.tokens.size();
  if (request.positions.size() != n) throw ConfigError("forward: one position per token required");
  if (n == 0) throw ContractError("forward: empty chunk");
  if (!request.modes) throw ContractError("forward: head modes missing");
  request.modes->check_matches(config);
  for (std::size_t i = 0; i < n; ++i) {
    if (i > 0 && request.positions[i] <= request.positions[i - 1]) throw ContractError("forward: positions must increase");
    if (request.tokens[i] >= config.vocab_size) throw ConfigError("forward: token id out of range");
  }
  if (cache.max_position() && request.positions[0] <= *cache.max_position()) {
    throw ContractError("forward: position " + std::to_string(request.positions[0]) +
                        " collides with cached position " + std::to_string(*cache.max_position()));
  }
  if (request.modes->has_gated() && !request.gates) throw ContractError("forward: gated heads need gate values");

  const std::size_t L = config.num_layers, H = config.num_query_heads, G = config.num_kv_heads, d = config.head_dim;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const std::vector<std::size_t> q_pos(request.positions.begin(), request.positions.end());

  ForwardResult result;
  result.new_keys.resize(L * G);
  result.new_values.resize(L * G);
  result.active.assign(cache.num_slots(), 0);

  Var x = embedding_lookup(w.embedding, request.tokens);
  for (std::size_t l = 0; l < L; ++l) {
    const auto& lw = w.layers[l];
    const Var h = rms_normalize(x);
    const Var q = matmul(h, lw.wq);
    const Var k = matmul(h, lw.wk);
    const Var v = matmul(h, lw.wv);

    std::vector<Var> k_new(G), v_new(G);
    for (std::size_t g = 0; g < G; ++g) {
      k_new[g] = rope(slice_last_axis(k, g * d, d), q_pos, config.rope_base);
      v_new[g] = slice_last_axis(v, g * d, d);
      result.new_keys[l * G + g] = k_new[g].value();
      result.new_values[l * G + g] = v_new[g].value();
    }

    // Per-slot keys, values, and masks, shared by the query heads reading the slot.
    struct SlotView {
      Var k_t, v;
      std::vector<std::size_t> k_pos;
      std::optional<Var> full_mask, stream_mask;
    };
    std::vector<std::optional<SlotView>> views(cache.num_slots());
    auto view_for = [&](std::size_t slot) -> SlotView& {
      auto& opt = views[slot];
      if (opt) return *opt;
      const std::size_t g = cache.kv_head_of_slot(slot);
      SlotView sv;
      sv.k_pos = cache.slot(slot).positions();
      sv.k_pos.insert(sv.k_pos.end(), q_pos.begin(), q_pos.end());
      Var keys = k_new[g], values = v_new[g];
      if (!cache.slot(slot).entries.empty()) {
        keys = concat_rows({tape.constant(cache.keys(slot)), k_new[g]});
        values = concat_rows({tape.constant(cache.values(slot)), v_new[g]});
      }
      sv.k_t = transpose_last2(keys);
      sv.v = values;
      bool any_full = false, any_stream = false;
      for (std::size_t qh : cache.query_heads_of_slot(slot)) {
        const HeadKind kind = request.modes->at(l, qh);
        any_full |= kind != HeadKind::Streaming;
        any_stream |= kind != HeadKind::Full;
      }
      std::vector<bool> active(sv.k_pos.size(), false);
      auto mark = [&](const Array& m) {
        for (std::size_t i = 0; i < m.rows(); ++i)
          for (std::size_t j = 0; j < m.cols(); ++j)
            if (m.at(i, j) == 0.0) active[j] = true;
      };
      if (any_full) {
        sv.full_mask = tape.constant(causal_mask(q_pos, sv.k_pos));
        mark(sv.full_mask->value());
      }
      if (any_stream) {
        sv.stream_mask = tape.constant(causal_mask(q_pos, sv.k_pos, &request.streaming));
        mark(sv.stream_mask->value());
      }
      result.active[slot] = static_cast<std::size_t>(std::count(active.begin(), active.end(), true));
      opt = std::move(sv);
      return *opt;
    };

    std::optional<Var> layer_gates;
    std::vector<Var> heads;
    heads.reserve(H);
    for (std::size_t qh = 0; qh < H; ++qh) {
      const std::size_t slot = cache.slot_for(l, qh);
      SlotView& sv = view_for(slot);
      const Var qh_rot = scale(rope(slice_last_axis(q, qh * d, d), q_pos, config.rope_base), inv_sqrt_d);
      const Var scores = matmul(qh_rot, sv.k_t);
      const HeadKind kind = request.modes->at(l, qh);
      Var out;
      Var probs;
      if (kind == HeadKind::Full) {
        probs = row_softmax_with_additive_mask(scores, *sv.full_mask);
        out = matmul(probs, sv.v);
      } else if (kind == HeadKind::Streaming) {
        probs = row_softmax_with_additive_mask(scores, *sv.stream_mask);
        out = matmul(probs, sv.v);
      } else {
        if (!layer_gates) layer_gates = gather_rows(*request.gates, std::vector<std::size_t>{l});
        const Var z = slice_last_axis(*layer_gates, qh, 1);
        probs = row_softmax_with_additive_mask(scores, *sv.full_mask);
        const Var full = matmul(probs, sv.v);
        const Var stream = matmul(row_softmax_with_additive_mask(scores, *sv.stream_mask), sv.v);
        out = lerp(full, stream, z);
      }
      if (request.record_attention) {
        result.attention.push_back(AttentionRecord{l, qh, slot, probs.value(), sv.k_pos});
      }
      heads.push_back(out);
    }
    x = add(x, matmul(concat_last_axis(heads), lw.wo));

    if (lw.w1.valid()) {
      const Var u = matmul(rms_normalize(x), lw.w1);
      x = add(x, matmul(mul(u, sigmoid(u)), lw.w2));
    }
  }
  result.final_hidden = rms_normalize(x);
  result.logits = matmul(result.final_hidden, w.unembedding);
  return result;
}

struct ChunkOutput {
  Array logits;  // [chunk, vocab]
  std::vector<AttentionRecord> attention;
  std::vector<std::size_t> active;
};

/// Inference forward over one chunk. Appends the chunk's KVs to every slot.
inline ChunkOutput forward_chunk(const Model& model, KVCache& cache, std::span<const std::size_t> tokens,
                                 std::span<const std::size_t> positions, const HeadModes& modes,
                                 const StreamingSpec& streaming, bool record_attention = false) {
  if (modes.has_gated()) throw ContractError("forward_chunk: gated heads are training-only");
  Tape tape(false);
  const BoundWeights w = bind_weights(tape, model.weights, false);
  ForwardRequest req{tokens, positions, &modes, streaming, std::nullopt, record_attention};
  ForwardResult r = forward_core(tape, model.config, w, cache, req);

  const std::size_t G = model.config.num_kv_heads, d = model.config.head_dim;
  for (std::size_t slot = 0; slot < cache.num_slots(); ++slot) {
    const std::size_t kv = cache.slot(slot).layer * G + cache.kv_head_of_slot(slot);
    const Array& keys = r.new_keys[kv];
    const Array& values = r.new_values[kv];
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      cache.append(slot, positions[i], std::span<const double>(keys.data() + i * d, d),
                   std::span<const double>(values.data() + i * d, d));
    }
  }
  return ChunkOutput{r.logits.value(), std::move(r.attention), std::move(r.active)};
}

/// Runs probe queries at their true positions against the resident cache
/// and returns their attention. Probe KVs are never committed.
inline std::vector<AttentionRecord> probe_forward(const Model& model, const KVCache& cache,
                                                  std::span<const std::size_t> probe_tokens,
                                                  std::span<const std::size_t> probe_positions, const HeadModes& modes,
                                                  const StreamingSpec& streaming) {
  if (probe_tokens.empty()) return {};
  if (cache.max_position() && probe_positions.front() <= *cache.max_position()) {
    throw ContractError("probe_forward: probe positions must exceed every cached position");
  }
  Tape tape(false);
  const BoundWeights w = bind_weights(tape, model.weights, false);
  ForwardRequest req{probe_tokens, probe_positions, &modes, streaming, std::nullopt, true};
  return forward_core(tape, model.config, w, cache, req).attention;
}

/// Recency eviction for slots whose every reader is a streaming head:
/// removes entries that no query at or after `next_position` can see.
inline std::size_t evict_streaming(KVCache& cache, const HeadModes& modes, const StreamingSpec& spec,
                                   std::size_t next_position) {
  std::size_t evicted = 0;
  for (std::size_t slot = 0; slot < cache.num_slots(); ++slot) {
    const std::size_t layer = cache.slot(slot).layer;
    bool all_streaming = true;
    for (std::size_t qh : cache.query_heads_of_slot(slot)) all_streaming &= modes.at(layer, qh) == HeadKind::Streaming;
    if (!all_streaming) continue;
    std::vector<EntryId> doomed;
    for (const auto& e : cache.slot(slot).entries) {
      if (e.position >= spec.sink_size && next_position - e.position >= spec.window_size) doomed.push_back(e.id);
    }
    cache.evict(slot, doomed);
    evicted += doomed.size();
  }
  return evicted;
}

enum class StepKind { PrefillChunk, Decode };

struct StepInfo {
  StepKind kind = StepKind::PrefillChunk;
  std::size_t q_begin = 0;
  std::size_t q_end = 0;  // exclusive
  std::span<const std::size_t> active;
};

/// Called after every forward pass; may record the step and evict.
using StepHook = std::function<void(const StepInfo&, KVCache&)>;

/// Cache plus the logits of the most recent position.
struct InferenceState {
  KVCache cache;
  Array last_logits;  // [vocab]
};

inline std::size_t argmax(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

/// Greedy generation of `num_steps` tokens. Every generated token is fed
/// back through the model (one decode step each) and the hook runs after
/// each step.
inline std::vector<std::size_t> decode_greedy(const Model& model, InferenceState& state, const HeadModes& modes,
                                              const StreamingSpec& streaming, const StepHook& hook,
                                              std::size_t num_steps) {
  std::vector<std::size_t> out;
  for (std::size_t step = 0; step < num_steps; ++step) {
    const std::size_t token = argmax(state.last_logits.values());
    out.push_back(token);
    const std::size_t pos = state.cache.next_position();
    const std::size_t tok[1] = {token};
    const std::size_t p[1] = {pos};
    ChunkOutput r = forward_chunk(model, state.cache, tok, p, modes, streaming);
    state.last_logits = Array(Shape{model.config.vocab_size}, std::vector<double>(r.logits.values().begin(), r.logits.values().end()));
    if (hook) hook(StepInfo{StepKind::Decode, pos, pos + 1, r.active}, state.cache);
  }
  return out;
}

/// Teacher-forced variant: feeds `continuation` one token per decode step
/// and returns the mean negative log-likelihood of those tokens.
inline double score_continuation(const Model& model, InferenceState& state, const HeadModes& modes,
                                 const StreamingSpec& streaming, const StepHook& hook,
                                 std::span<const std::size_t> continuation) {
  if (continuation.empty()) throw ContractError("score_continuation: empty continuation");
  double total = 0.0;
  for (std::size_t token : continuation) {
    const auto row = state.last_logits.values();
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double v : row) sum += std::exp(v - mx);
    total += mx + std::log(sum) - row[token];
    const std::size_t pos = state.cache.next_position();
    const std::size_t tok[1] = {token};
    const std::size_t p[1] = {pos};
    ChunkOutput r = forward_chunk(model, state.cache, tok, p, modes, streaming);
    state.last_logits = Array(Shape{model.config.vocab_size}, std::vector<double>(r.logits.values().begin(), r.logits.values().end()));
    if (hook) hook(StepInfo{StepKind::Decode, pos, pos + 1, r.active}, state.cache);
  }
  return total / static_cast<double>(continuation.size());
}

}  // namespace kvlab
