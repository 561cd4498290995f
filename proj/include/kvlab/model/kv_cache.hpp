#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <unordered_set>
#include <vector>

#include "kvlab/errors.hpp"
#include "kvlab/model/config.hpp"
#include "kvlab/tensor/array.hpp"

namespace kvlab {

using EntryId = std::uint64_t;

struct KVEntry {
  std::size_t position = 0;
  EntryId id = 0;
  std::vector<double> key;
  std::vector<double> value;
};

/// Shared: one entry list per (layer, kv head), read by every query head of
/// the group. PerQueryHead: the group's KVs are replicated so each query head
/// owns an independently evictable list.
enum class CacheLayout { Shared, PerQueryHead };

/// One independently evictable entry list.
struct CacheSlot {
  std::size_t layer = 0;
  /// kv head index for Shared, query head index for PerQueryHead.
  std::size_t head = 0;
  std::vector<KVEntry> entries;

  std::vector<std::size_t> positions() const {
    std::vector<std::size_t> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.position);
    return out;
  }
};

class CacheObserver {
 public:
  virtual ~CacheObserver() = default;
  virtual void on_create(std::size_t slot, const CacheSlot& where, const KVEntry& entry) = 0;
  virtual void on_evict(std::size_t slot, const CacheSlot& where, const KVEntry& entry) = 0;
};

class KVCache {
 public:
  KVCache(const ModelConfig& config, CacheLayout layout = CacheLayout::Shared)
      : config_(config), layout_(layout) {
    config_.validate();
    const std::size_t per_layer = slots_per_layer();
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
      for (std::size_t h = 0; h < per_layer; ++h) slots_.push_back(CacheSlot{l, h, {}});
    }
  }

  const ModelConfig& config() const { return config_; }
  CacheLayout layout() const { return layout_; }

  std::size_t slots_per_layer() const {
    return layout_ == CacheLayout::Shared ? config_.num_kv_heads : config_.num_query_heads;
  }
  std::size_t num_slots() const { return slots_.size(); }
  const CacheSlot& slot(std::size_t i) const { return slots_.at(i); }

  std::size_t slot_for(std::size_t layer, std::size_t query_head) const {
    const std::size_t h = layout_ == CacheLayout::Shared ? config_.kv_head_of(query_head) : query_head;
    return layer * slots_per_layer() + h;
  }

  /// kv head whose projections fill the slot.
  std::size_t kv_head_of_slot(std::size_t slot) const {
    const std::size_t h = slots_.at(slot).head;
    return layout_ == CacheLayout::Shared ? h : config_.kv_head_of(h);
  }

  std::vector<std::size_t> query_heads_of_slot(std::size_t slot) const {
    const std::size_t h = slots_.at(slot).head;
    if (layout_ == CacheLayout::PerQueryHead) return {h};
    std::vector<std::size_t> out;
    const std::size_t g = config_.group_size();
    for (std::size_t q = h * g; q < (h + 1) * g; ++q) out.push_back(q);
    return out;
  }

  void set_observer(CacheObserver* observer) { observer_ = observer; }

  EntryId append(std::size_t slot, std::size_t position, std::span<const double> key, std::span<const double> value) {
    CacheSlot& s = slots_.at(slot);
    if (!s.entries.empty() && s.entries.back().position >= position) {
      throw ContractError("kv cache: position " + std::to_string(position) + " collides with cached position " +
                          std::to_string(s.entries.back().position));
    }
    KVEntry e{position, next_id_++, std::vector<double>(key.begin(), key.end()),
              std::vector<double>(value.begin(), value.end())};
    s.entries.push_back(std::move(e));
    max_position_ = std::max(max_position_.value_or(0), position);
    if (observer_) observer_->on_create(slot, s, s.entries.back());
    return s.entries.back().id;
  }

  /// Physically removes the listed entries; unknown ids are a contract error.
  void evict(std::size_t slot, std::span<const EntryId> ids) {
    if (ids.empty()) return;
    CacheSlot& s = slots_.at(slot);
    std::unordered_set<EntryId> doomed(ids.begin(), ids.end());
    std::size_t found = 0;
    std::vector<KVEntry> kept;
    kept.reserve(s.entries.size());
    for (auto& e : s.entries) {
      if (doomed.contains(e.id)) {
        ++found;
        if (observer_) observer_->on_evict(slot, s, e);
      } else {
        kept.push_back(std::move(e));
      }
    }
    if (found != doomed.size()) throw ContractError("kv cache: evicting entries not resident in slot");
    s.entries = std::move(kept);
  }

  /// Keys (or values) of a slot stacked as [entries, head_dim].
  Array keys(std::size_t slot) const { return stack(slot, true); }
  Array values(std::size_t slot) const { return stack(slot, false); }

  std::optional<std::size_t> max_position() const { return max_position_; }
  std::size_t next_position() const { return max_position_ ? *max_position_ + 1 : 0; }

  std::size_t total_resident() const {
    std::size_t n = 0;
    for (const auto& s : slots_) n += s.entries.size();
    return n;
  }

  /// Entry ids of every slot, for before/after comparisons.
  std::vector<std::vector<EntryId>> entry_ids() const {
    std::vector<std::vector<EntryId>> out;
    for (const auto& s : slots_) {
      std::vector<EntryId> ids;
      for (const auto& e : s.entries) ids.push_back(e.id);
      out.push_back(std::move(ids));
    }
    return out;
  }

 private:
  Array stack(std::size_t slot, bool key) const {
    const CacheSlot& s = slots_.at(slot);
    const std::size_t d = config_.head_dim;
    Array out(Shape{s.entries.size(), d});
    for (std::size_t i = 0; i < s.entries.size(); ++i) {
      const auto& src = key ? s.entries[i].key : s.entries[i].value;
      std::copy(src.begin(), src.end(), out.data() + i * d);
    }
    return out;
  }

  ModelConfig config_;
  CacheLayout layout_;
  std::vector<CacheSlot> slots_;
  CacheObserver* observer_ = nullptr;
  EntryId next_id_ = 0;
  std::optional<std::size_t> max_position_;
};

}  // namespace kvlab
