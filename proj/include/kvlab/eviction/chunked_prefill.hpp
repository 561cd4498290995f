#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "kvlab/errors.hpp"
#include "kvlab/eviction/policy.hpp"
#include "kvlab/ledger/ledger.hpp"
#include "kvlab/model/transformer.hpp"

namespace kvlab {

struct PrefillOptions {
  /// 0 processes the prompt in a single pass.
  std::size_t chunk_size = 0;
  EvictionPolicy policy;
  HeadModes modes;
  StreamingSpec streaming;
};

/// Non-pooled attention scoring needs an independently evictable list per
/// query head; everything else stores one list per kv head.
inline CacheLayout layout_for(const EvictionPolicy& policy) {
  return policy.attention_based() && !policy.group_pooled ? CacheLayout::PerQueryHead : CacheLayout::Shared;
}

/// A cache with its ledger attached. The ledger lives on the heap so the
/// observer pointer survives moves.
struct Session {
  InferenceState state;
  std::unique_ptr<KVLedger> ledger;

  Session(const ModelConfig& config, CacheLayout layout) : state{KVCache(config, layout), Array{}} {
    ledger = std::make_unique<KVLedger>(KVLedger::attach_to(state.cache));
    state.cache.set_observer(ledger.get());
  }
  Session(Session&&) = default;
  Session& operator=(Session&&) = default;
};

namespace detail {

inline bool all_streaming(const KVCache& cache, const HeadModes& modes, std::size_t slot) {
  const std::size_t layer = cache.slot(slot).layer;
  for (std::size_t qh : cache.query_heads_of_slot(slot))
    if (modes.at(layer, qh) != HeadKind::Streaming) return false;
  return true;
}

/// Rows [first, last) of `a`, columns [0, cols).
inline Array take_block(const Array& a, std::size_t first, std::size_t last, std::size_t cols) {
  Array out(Shape{last - first, cols});
  for (std::size_t r = first; r < last; ++r)
    std::copy(a.row(r).begin(), a.row(r).begin() + static_cast<std::ptrdiff_t>(cols), out.row(r - first).begin());
  return out;
}

inline Array stack_rows(const Array& top, const Array& bottom) {
  if (top.rows() == 0) return bottom;
  if (bottom.rows() == 0) return top;
  std::vector<double> v(top.values().begin(), top.values().end());
  v.insert(v.end(), bottom.values().begin(), bottom.values().end());
  return Array(Shape{top.rows() + bottom.rows(), top.cols()}, std::move(v));
}

}  // namespace detail

/// Observation attention per (layer, query head), restricted to the
/// entries currently resident in the head's slot.
using ObservationMap = std::map<std::pair<std::size_t, std::size_t>, Array>;

/// Policy eviction over every slot that has at least one non-streaming
/// reader. Returns the number of evicted entries.
inline std::size_t evict_by_policy(KVCache& cache, const HeadModes& modes, const EvictionPolicy& policy,
                                   const ObservationMap& observation, std::span<const std::size_t> protected_positions) {
  if (!policy.evicts()) return 0;
  const std::size_t L = cache.config().num_layers;

  std::vector<std::vector<std::size_t>> eligible(L);
  for (std::size_t s = 0; s < cache.num_slots(); ++s)
    if (!detail::all_streaming(cache, modes, s)) eligible[cache.slot(s).layer].push_back(s);

  std::vector<std::size_t> active_layers, mean_resident;
  std::size_t resident_sum = 0;
  for (std::size_t l = 0; l < L; ++l) {
    if (eligible[l].empty()) continue;
    std::size_t r = 0;
    for (std::size_t s : eligible[l]) r += cache.slot(s).entries.size();
    const auto mean = static_cast<std::size_t>(std::llround(static_cast<double>(r) / static_cast<double>(eligible[l].size())));
    active_layers.push_back(l);
    mean_resident.push_back(mean);
    resident_sum += mean;
  }
  if (active_layers.empty() || resident_sum == 0) return 0;
  const std::size_t total_keep = std::max<std::size_t>(
      active_layers.size(), static_cast<std::size_t>(std::llround(policy.retention * static_cast<double>(resident_sum))));
  const std::vector<std::size_t> budgets =
      allocate_budgets(policy.method, total_keep, active_layers.size(), policy.pyramid_ratio);

  std::size_t evicted = 0;
  for (std::size_t i = 0; i < active_layers.size(); ++i) {
    const std::size_t l = active_layers[i];
    for (std::size_t s : eligible[l]) {
      const CacheSlot& slot = cache.slot(s);
      const std::size_t n = slot.entries.size();
      if (n == 0) continue;
      std::vector<double> scores;
      if (policy.method == EvictionMethod::L2Key) {
        scores = score_l2_keys(cache.keys(s));
      } else {
        std::vector<Array> heads;
        for (std::size_t qh : cache.query_heads_of_slot(s)) {
          auto it = observation.find({l, qh});
          if (it == observation.end()) throw ContractError("evict_by_policy: missing observation attention");
          if (it->second.cols() != n) throw ContractError("evict_by_policy: observation does not match resident entries");
          heads.push_back(it->second);
        }
        scores = score_attention(heads, policy.smoothing_kernel);
      }
      std::size_t n_protected = 0;
      for (const auto& e : slot.entries)
        n_protected += std::find(protected_positions.begin(), protected_positions.end(), e.position) !=
                       protected_positions.end();
      const std::size_t keep = std::max(std::min(budgets[i], n), n_protected);
      const std::vector<EntryId> doomed = select_evictions(slot, scores, keep, protected_positions);
      cache.evict(s, doomed);
      evicted += doomed.size();
    }
  }
  return evicted;
}

/// Processes `prompt` chunk by chunk, recording each pass in the session
/// ledger and evicting after every chunk (the last one included).
inline Session chunked_prefill(const Model& model, std::span<const std::size_t> prompt, const PrefillOptions& opt) {
  const EvictionPolicy& policy = opt.policy;
  policy.validate();
  opt.streaming.validate();
  opt.modes.check_matches(model.config);
  const std::size_t n = prompt.size();
  if (n == 0) throw ContractError("chunked_prefill: empty prompt");
  const std::size_t chunk = opt.chunk_size == 0 ? n : std::min(opt.chunk_size, n);
  const bool scoring = policy.evicts() && policy.attention_based();
  const std::size_t k = policy.observation_window;
  if (scoring && n < k) throw ConfigError("chunked_prefill: prompt shorter than the observation window");
  if (scoring && !policy.patched && chunk < k) throw ConfigError("chunked_prefill: naive chunks must hold k queries");

  Session session(model.config, layout_for(policy));
  KVCache& cache = session.state.cache;
  std::vector<std::size_t> positions(n);
  std::iota(positions.begin(), positions.end(), 0);
  const std::span<const std::size_t> all_pos(positions);
  const std::size_t tail = std::min(policy.tail(), n);

  for (std::size_t b = 0; b < n; b += chunk) {
    const std::size_t e = std::min(n, b + chunk);
    const bool final_chunk = e == n;
    ChunkOutput out = forward_chunk(model, cache, prompt.subspan(b, e - b), all_pos.subspan(b, e - b), opt.modes,
                                    opt.streaming, scoring);
    session.ledger->record_step(StepKind::PrefillChunk, b, e, out.active);
    if (final_chunk) {
      const auto last = out.logits.row(out.logits.rows() - 1);
      session.state.last_logits = Array(Shape{last.size()}, std::vector<double>(last.begin(), last.end()));
    }
    evict_streaming(cache, opt.modes, opt.streaming, e);
    if (!policy.evicts()) continue;

    std::vector<std::size_t> protected_positions;
    for (std::size_t p = n - tail; p < n; ++p)
      if (p < e) protected_positions.push_back(p);
    if (scoring && !policy.patched) {
      for (std::size_t p = e - std::min(tail, e - b); p < e; ++p)
        if (p < n - tail) protected_positions.push_back(p);
    }

    ObservationMap observation;
    if (scoring) {
      std::size_t own_first, own_last = e - b;
      std::vector<AttentionRecord> probes;
      if (policy.patched && !final_chunk) {
        own_first = std::max(b, n - k) - b;
        if (own_first > own_last) own_first = own_last;
        const std::size_t probe_begin = std::max(e, n - k);
        probes = probe_forward(model, cache, prompt.subspan(probe_begin, n - probe_begin),
                               all_pos.subspan(probe_begin, n - probe_begin), opt.modes, opt.streaming);
      } else {
        own_first = own_last - std::min(k, own_last);
      }
      for (const auto& rec : out.attention) {
        const std::size_t entries = cache.slot(rec.slot).entries.size();
        observation[{rec.layer, rec.query_head}] = detail::take_block(rec.probs, own_first, own_last, entries);
      }
      for (const auto& rec : probes) {
        const std::size_t entries = cache.slot(rec.slot).entries.size();
        Array& obs = observation[{rec.layer, rec.query_head}];
        obs = detail::stack_rows(obs, detail::take_block(rec.probs, 0, rec.probs.rows(), entries));
      }
    }
    evict_by_policy(cache, opt.modes, policy, observation, protected_positions);
  }
  return session;
}

/// Decode-time hook: records the step, then applies recency eviction.
inline StepHook ledger_hook(KVLedger& ledger, const HeadModes& modes, const StreamingSpec& spec) {
  return [&ledger, &modes, spec](const StepInfo& info, KVCache& cache) {
    ledger.record(info);
    evict_streaming(cache, modes, spec, info.q_end);
  };
}

}  // namespace kvlab
