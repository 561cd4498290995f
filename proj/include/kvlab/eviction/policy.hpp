#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kvlab/errors.hpp"
#include "kvlab/model/kv_cache.hpp"
#include "kvlab/tensor/array.hpp"

namespace kvlab {

enum class EvictionMethod { None, Snap, Pyramid, L2Key };

inline const char* method_name(EvictionMethod m) {
  switch (m) {
    case EvictionMethod::Snap: return "snap";
    case EvictionMethod::Pyramid: return "pyramid";
    case EvictionMethod::L2Key: return "l2key";
    case EvictionMethod::None: break;
  }
  return "none";
}

inline EvictionMethod parse_method(const std::string& s) {
  if (s == "none") return EvictionMethod::None;
  if (s == "snap") return EvictionMethod::Snap;
  if (s == "pyramid") return EvictionMethod::Pyramid;
  if (s == "l2key") return EvictionMethod::L2Key;
  throw ConfigError("unknown eviction method '" + s + "'");
}

struct EvictionPolicy {
  EvictionMethod method = EvictionMethod::None;
  double retention = 1.0;
  std::size_t observation_window = 16;
  std::size_t smoothing_kernel = 7;
  bool patched = false;
  bool group_pooled = true;
  /// Defaults to the observation window when unset.
  std::optional<std::size_t> protected_tail;
  double pyramid_ratio = 8.0;

  bool attention_based() const { return method == EvictionMethod::Snap || method == EvictionMethod::Pyramid; }
  bool evicts() const { return method != EvictionMethod::None && retention < 1.0; }
  std::size_t tail() const { return protected_tail.value_or(observation_window); }

  void validate() const {
    detail::require_config(retention > 0.0 && retention <= 1.0, "retention must lie in (0, 1]");
    detail::require_config(observation_window >= 1, "observation window must be at least 1");
    detail::require_config(smoothing_kernel >= 1 && smoothing_kernel % 2 == 1, "smoothing kernel must be odd and >= 1");
    detail::require_config(pyramid_ratio >= 1.0, "pyramid ratio must be >= 1");
  }
};

/// Centered moving average of odd width. Windows are truncated at the
/// edges but always divided by the full width (zero padding).
inline std::vector<double> moving_average(std::span<const double> x, std::size_t kernel) {
  if (kernel == 0 || kernel % 2 == 0) throw ConfigError("moving_average: kernel must be odd");
  const std::size_t n = x.size(), half = kernel / 2;
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = i >= half ? i - half : 0, hi = std::min(n, i + half + 1);
    double s = 0.0;
    for (std::size_t j = lo; j < hi; ++j) s += x[j];
    out[i] = s / static_cast<double>(kernel);
  }
  return out;
}

/// Importance of each key from observation-query attention. Each element
/// of `heads` is one query head's [observation queries, keys] probabilities;
/// passing several heads pools them (mean) into a single score vector.
inline std::vector<double> score_attention(std::span<const Array> heads, std::size_t kernel) {
  if (heads.empty()) throw ContractError("score_attention: no heads");
  const std::size_t keys = heads.front().cols();
  std::vector<double> pooled(keys, 0.0);
  for (const Array& probs : heads) {
    if (probs.rank() != 2 || probs.rows() == 0) throw ContractError("score_attention: zero observation queries");
    if (probs.cols() != keys) throw ConfigError("score_attention: heads disagree on key count");
    std::vector<double> sums(keys, 0.0);
    for (std::size_t i = 0; i < probs.rows(); ++i)
      for (std::size_t j = 0; j < keys; ++j) sums[j] += probs.at(i, j);
    const std::vector<double> smooth = moving_average(sums, kernel);
    for (std::size_t j = 0; j < keys; ++j) pooled[j] += smooth[j];
  }
  for (double& v : pooled) v /= static_cast<double>(heads.size());
  return pooled;
}

inline std::vector<double> score_attention(const Array& probs, std::size_t kernel) {
  return score_attention(std::span<const Array>(&probs, 1), kernel);
}

/// Negative key norm: small-norm keys count as important.
inline std::vector<double> score_l2_keys(const Array& keys) {
  if (keys.rows() == 0) throw ContractError("score_l2_keys: no keys");
  std::vector<double> out(keys.rows());
  for (std::size_t i = 0; i < keys.rows(); ++i) {
    double s = 0.0;
    for (double v : keys.row(i)) s += v * v;
    out[i] = -std::sqrt(s);
  }
  return out;
}

/// Per-layer keep counts summing to `total_keep`.
inline std::vector<std::size_t> allocate_budgets(EvictionMethod method, std::size_t total_keep, std::size_t layers,
                                                 double pyramid_ratio) {
  if (layers == 0) throw ConfigError("allocate_budgets: no layers");
  if (total_keep < layers) throw ConfigError("allocate_budgets: budget smaller than layer count");
  if (pyramid_ratio < 1.0) throw ConfigError("allocate_budgets: pyramid ratio must be >= 1");
  std::vector<std::size_t> out(layers, total_keep / layers);
  if (method != EvictionMethod::Pyramid || layers == 1 || pyramid_ratio == 1.0) {
    for (std::size_t l = 0; l < total_keep % layers; ++l) ++out[l];
    return out;
  }
  // b_l linear in l, b_0 / b_{L-1} = ratio, sum = total.
  const double T = static_cast<double>(total_keep), Ld = static_cast<double>(layers);
  const double last = 2.0 * T / (Ld * (pyramid_ratio + 1.0));
  const double first = pyramid_ratio * last;
  std::vector<double> exact(layers);
  std::size_t assigned = 0;
  for (std::size_t l = 0; l < layers; ++l) {
    exact[l] = first + (last - first) * static_cast<double>(l) / (Ld - 1.0);
    out[l] = static_cast<std::size_t>(std::floor(exact[l] + 1e-9));
    assigned += out[l];
  }
  std::vector<std::size_t> order(layers);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return exact[a] - std::floor(exact[a] + 1e-9) > exact[b] - std::floor(exact[b] + 1e-9);
  });
  for (std::size_t i = 0; assigned < total_keep; i = (i + 1) % layers, ++assigned) ++out[order[i]];
  // Lift empty layers, taking from the largest.
  for (std::size_t l = 0; l < layers; ++l) {
    while (out[l] == 0) {
      auto big = std::max_element(out.begin(), out.end());
      --*big;
      ++out[l];
    }
  }
  return out;
}

/// Indices (into `positions`) of entries to evict: protected entries stay,
/// then the highest scores until `keep_budget` entries remain. Equal scores
/// favour the more recent position.
inline std::vector<std::size_t> select_evictions(std::span<const std::size_t> positions, std::span<const double> scores,
                                                 std::size_t keep_budget,
                                                 std::span<const std::size_t> protected_positions = {}) {
  if (positions.size() != scores.size()) throw ConfigError("select_evictions: one score per entry required");
  const std::size_t n = positions.size();
  if (keep_budget >= n) return {};
  std::vector<bool> is_protected(n, false);
  std::size_t n_protected = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (std::find(protected_positions.begin(), protected_positions.end(), positions[i]) != protected_positions.end()) {
      is_protected[i] = true;
      ++n_protected;
    }
  }
  if (keep_budget < n_protected) throw ContractError("select_evictions: budget below protected count");
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < n; ++i)
    if (!is_protected[i]) candidates.push_back(i);
  std::stable_sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return positions[a] > positions[b];
  });
  std::vector<std::size_t> evict(candidates.begin() + static_cast<std::ptrdiff_t>(keep_budget - n_protected),
                                 candidates.end());
  std::sort(evict.begin(), evict.end());
  return evict;
}

/// Entry ids of `slot` to evict given per-entry scores.
inline std::vector<EntryId> select_evictions(const CacheSlot& slot, std::span<const double> scores,
                                             std::size_t keep_budget,
                                             std::span<const std::size_t> protected_positions = {}) {
  const std::vector<std::size_t> pos = slot.positions();
  std::vector<EntryId> ids;
  for (std::size_t i : select_evictions(pos, scores, keep_budget, protected_positions)) ids.push_back(slot.entries[i].id);
  return ids;
}

}  // namespace kvlab
