#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kvlab/errors.hpp"
#include "kvlab/model/kv_cache.hpp"
#include "kvlab/model/transformer.hpp"

namespace kvlab {

enum class Lifecycle { Create, Evict };

/// One create or evict event. Creations belong to the step whose forward
/// pass produced the entry; evictions happen after the step they name.
struct LifecycleEvent {
  std::size_t step = 0;
  std::size_t layer = 0;
  std::size_t head = 0;
  Lifecycle event = Lifecycle::Create;
  EntryId entry_id = 0;
  std::size_t position = 0;
};

/// Snapshot at the end of one forward pass, before any eviction it triggers.
struct StepRecord {
  std::size_t index = 0;
  StepKind kind = StepKind::PrefillChunk;
  std::size_t q_begin = 0;
  std::size_t q_end = 0;  // exclusive
  std::vector<std::size_t> resident;  // per slot
  std::vector<std::size_t> active;    // per slot

  std::size_t queries() const { return q_end - q_begin; }
};

struct FootprintReport {
  double footprint = 0.0;
  double peak_kv = 0.0;
  /// Mean resident entries per kv head, one value per step.
  std::vector<double> resident_series;

  friend bool operator==(const FootprintReport&, const FootprintReport&) = default;
};

/// Occupancy of the single-pass, no-eviction schedule: n^2 + sum_{i=1..m} (n + i).
inline std::uint64_t reference_denominator(std::uint64_t n, std::uint64_t m) {
  return n * n + m * n + m * (m + 1) / 2;
}

namespace detail {

/// Shared by the incremental ledger and the replay oracle so both reduce
/// integer counts through the same arithmetic.
inline FootprintReport reduce_footprint(std::span<const std::size_t> queries_per_step,
                                        std::span<const std::uint64_t> total_resident_per_step, std::size_t normalizer,
                                        std::size_t n, std::size_t m) {
  FootprintReport r;
  if (queries_per_step.empty() || n + m == 0) return r;
  std::uint64_t numerator = 0, peak = 0;
  for (std::size_t s = 0; s < queries_per_step.size(); ++s) {
    numerator += static_cast<std::uint64_t>(queries_per_step[s]) * total_resident_per_step[s];
    peak = std::max(peak, total_resident_per_step[s]);
    r.resident_series.push_back(static_cast<double>(total_resident_per_step[s]) / static_cast<double>(normalizer));
  }
  const double norm = static_cast<double>(normalizer);
  r.footprint = static_cast<double>(numerator) / (norm * static_cast<double>(reference_denominator(n, m)));
  r.peak_kv = static_cast<double>(peak) / (norm * static_cast<double>(n + m));
  return r;
}

inline void check_complete(std::span<const StepRecord> steps, std::size_t n, std::size_t m) {
  std::size_t next = 0;
  for (const auto& s : steps) {
    if (s.q_begin != next || s.q_end <= s.q_begin) throw ContractError("ledger: steps do not tile the sequence");
    if (s.kind == StepKind::Decode && (s.queries() != 1 || s.q_begin < n)) {
      throw ContractError("ledger: decode steps must cover exactly one generated position");
    }
    if (s.kind == StepKind::PrefillChunk && s.q_end > n) throw ContractError("ledger: prefill step beyond prompt");
    next = s.q_end;
  }
  if (next != n + m) {
    throw ContractError("ledger: incomplete run, covered " + std::to_string(next) + " of " + std::to_string(n + m) +
                        " positions");
  }
}

}  // namespace detail

/// Per-entry lifecycle accounting for one simulated sequence. Attach it to
/// a cache as observer; call record_step after each forward pass.
class KVLedger : public CacheObserver {
 public:
  KVLedger(std::size_t num_layers, std::size_t num_kv_heads, std::vector<std::pair<std::size_t, std::size_t>> slots)
      : num_layers_(num_layers), num_kv_heads_(num_kv_heads), slots_(std::move(slots)), resident_(slots_.size(), 0) {}

  /// Mirrors the cache's slot layout and registers itself as its observer.
  static KVLedger attach_to(KVCache& cache) {
    std::vector<std::pair<std::size_t, std::size_t>> slots;
    for (std::size_t i = 0; i < cache.num_slots(); ++i) slots.emplace_back(cache.slot(i).layer, cache.slot(i).head);
    return KVLedger(cache.config().num_layers, cache.config().num_kv_heads, std::move(slots));
  }

  KVLedger(const KVLedger&) = default;
  KVLedger(KVLedger&&) = default;

  void on_create(std::size_t slot, const CacheSlot& where, const KVEntry& entry) override {
    events_.push_back(LifecycleEvent{steps_.size(), where.layer, where.head, Lifecycle::Create, entry.id, entry.position});
    ++resident_.at(slot);
  }

  void on_evict(std::size_t slot, const CacheSlot& where, const KVEntry& entry) override {
    if (steps_.empty()) throw IntegrityError("ledger: eviction before any recorded step");
    events_.push_back(LifecycleEvent{steps_.size() - 1, where.layer, where.head, Lifecycle::Evict, entry.id, entry.position});
    if (resident_.at(slot) == 0) throw IntegrityError("ledger: eviction from empty slot");
    --resident_[slot];
  }

  void record_step(StepKind kind, std::size_t q_begin, std::size_t q_end, std::span<const std::size_t> active = {}) {
    StepRecord r;
    r.index = steps_.size();
    r.kind = kind;
    r.q_begin = q_begin;
    r.q_end = q_end;
    r.resident = resident_;
    r.active.assign(active.begin(), active.end());
    if (r.active.empty()) r.active.assign(resident_.size(), 0);
    for (std::size_t i = 0; i < r.active.size() && i < r.resident.size(); ++i) {
      if (r.active[i] > r.resident[i]) throw IntegrityError("ledger: active count exceeds resident count");
    }
    steps_.push_back(std::move(r));
  }

  /// StepHook adapter for decoding.
  void record(const StepInfo& info) { record_step(info.kind, info.q_begin, info.q_end, info.active); }

  const std::vector<StepRecord>& steps() const { return steps_; }
  const std::vector<LifecycleEvent>& events() const { return events_; }
  const std::vector<std::pair<std::size_t, std::size_t>>& slots() const { return slots_; }
  std::size_t num_layers() const { return num_layers_; }
  std::size_t num_kv_heads() const { return num_kv_heads_; }
  /// Storage units of the reference cache: num_layers * num_kv_heads.
  std::size_t normalizer() const { return num_layers_ * num_kv_heads_; }
  std::size_t resident(std::size_t slot) const { return resident_.at(slot); }

  std::uint64_t total_resident_at(std::size_t step) const {
    std::uint64_t t = 0;
    for (std::size_t c : steps_.at(step).resident) t += c;
    return t;
  }

  FootprintReport report(std::size_t n, std::size_t m) const {
    detail::check_complete(steps_, n, m);
    std::vector<std::size_t> q;
    std::vector<std::uint64_t> totals;
    for (std::size_t s = 0; s < steps_.size(); ++s) {
      q.push_back(steps_[s].queries());
      totals.push_back(total_resident_at(s));
    }
    return detail::reduce_footprint(q, totals, normalizer(), n, m);
  }

 private:
  std::size_t num_layers_;
  std::size_t num_kv_heads_;
  std::vector<std::pair<std::size_t, std::size_t>> slots_;
  std::vector<std::size_t> resident_;
  std::vector<StepRecord> steps_;
  std::vector<LifecycleEvent> events_;
};

/// Time-aggregated resident entries over the run, normalised to
/// single-pass full causal attention.
inline double kv_footprint(const KVLedger& ledger, std::size_t n, std::size_t m) { return ledger.report(n, m).footprint; }

/// Largest mean-per-kv-head resident count over all steps, divided by n + m.
inline double peak_kv(const KVLedger& ledger, std::size_t n, std::size_t m) { return ledger.report(n, m).peak_kv; }

/// Smallest footprint whose score is at least F * full_score.
inline std::optional<double> critical_footprint(std::span<const std::pair<double, double>> points, double full_score,
                                                double fraction) {
  if (full_score <= 0.0) throw ContractError("critical_footprint: full score must be positive");
  std::optional<double> best;
  const double threshold = fraction * full_score;
  for (const auto& [footprint, score] : points) {
    if (score >= threshold && (!best || footprint < *best)) best = footprint;
  }
  return best;
}

}  // namespace kvlab
