#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "kvlab/kvlab.hpp"
#include "support.hpp"

using namespace kvlab;
using kvlab::testing::iota_positions;
using kvlab::testing::random_tokens;
using kvlab::testing::tiny_config;

namespace {

// Brute-force retention: protected first, then by (score desc, position desc).
std::set<std::size_t> brute_kept(const std::vector<std::size_t>& pos, const std::vector<double>& scores, std::size_t keep,
                                 const std::vector<std::size_t>& prot) {
  if (keep >= pos.size()) return {pos.begin(), pos.end()};
  std::set<std::size_t> kept(prot.begin(), prot.end());
  std::vector<std::pair<double, std::size_t>> rest;
  for (std::size_t i = 0; i < pos.size(); ++i)
    if (!kept.contains(pos[i])) rest.emplace_back(scores[i], pos[i]);
  std::sort(rest.rbegin(), rest.rend());
  for (std::size_t i = 0; kept.size() < keep; ++i) kept.insert(rest[i].second);
  return kept;
}

std::set<std::size_t> kept_after(const std::vector<std::size_t>& pos, const std::vector<double>& scores, std::size_t keep,
                                 const std::vector<std::size_t>& prot = {}) {
  std::set<std::size_t> kept(pos.begin(), pos.end());
  for (std::size_t i : select_evictions(pos, scores, keep, prot)) kept.erase(pos[i]);
  return kept;
}

std::map<std::size_t, std::vector<std::size_t>> slot_positions(const KVCache& c) {
  std::map<std::size_t, std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < c.num_slots(); ++s) out[s] = c.slot(s).positions();
  return out;
}

PrefillOptions snap_options(const Model& m, double retention, std::size_t chunk, std::size_t k, bool patched) {
  PrefillOptions o;
  o.chunk_size = chunk;
  o.policy.method = EvictionMethod::Snap;
  o.policy.retention = retention;
  o.policy.observation_window = k;
  o.policy.smoothing_kernel = 1;
  o.policy.patched = patched;
  o.modes = HeadModes::all(m.config, HeadKind::Full);
  return o;
}

// Manual eviction step for one pooled slot: mean over the group's heads of
// column sums of the given observation rows, keep the top `keep`.
void manual_evict(KVCache& cache, std::size_t slot, const std::vector<Array>& rows, std::size_t keep,
                  const std::vector<std::size_t>& prot) {
  const auto pos = cache.slot(slot).positions();
  std::vector<double> scores(pos.size(), 0.0);
  for (const Array& r : rows)
    for (std::size_t i = 0; i < r.rows(); ++i)
      for (std::size_t j = 0; j < pos.size(); ++j) scores[j] += r.at(i, j) / static_cast<double>(rows.size());
  const auto kept = brute_kept(pos, scores, keep, prot);
  std::vector<EntryId> doomed;
  for (const auto& e : cache.slot(slot).entries)
    if (!kept.contains(e.position)) doomed.push_back(e.id);
  cache.evict(slot, doomed);
}

Array rows_of(const Array& a, std::size_t first, std::size_t last, std::size_t cols) {
  Array out(Shape{last - first, cols});
  for (std::size_t r = first; r < last; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.at(r - first, c) = a.at(r, c);
  return out;
}

}  // namespace

TEST(Eviction, UniformAttentionScores) {
  const auto s = score_attention(Array(Shape{1, 4}, 0.25), 1);
  for (double v : s) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Eviction, PooledScoresAreGroupMeans) {
  const std::vector<Array> heads{Array::matrix(1, 2, {1.0, 2.0}), Array::matrix(1, 2, {3.0, 0.0})};
  EXPECT_EQ(score_attention(heads, 1), (std::vector<double>{2.0, 1.0}));
}

TEST(Eviction, SmoothingUsesTruncatedWindowsOverFullWidth) {
  EXPECT_EQ(score_attention(Array::matrix(1, 4, {0, 3, 0, 0}), 3), (std::vector<double>{1, 1, 1, 0}));
  EXPECT_THROW(score_attention(Array(Shape{0, 4}), 1), ContractError);
  EXPECT_THROW(moving_average(std::vector<double>{1, 2}, 2), ConfigError);
}

TEST(Eviction, L2KeyScores) {
  const Array keys = Array::matrix(3, 2, {0.0, 1.0, 2.0, 0.0, 0.0, -3.0});
  const auto s = score_l2_keys(keys);
  EXPECT_EQ(s, (std::vector<double>{-1.0, -2.0, -3.0}));
  EXPECT_EQ(score_l2_keys(Array::matrix(1, 2, {0.0, 0.0}))[0], 0.0);
  const std::vector<std::size_t> pos{0, 1, 2};
  EXPECT_EQ(kept_after(pos, s, 2), (std::set<std::size_t>{0, 1}));
}

TEST(Eviction, L2RankingMatchesNormSort) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> d(0, 1);
  Array keys(Shape{30, 5});
  for (double& v : keys.values()) v = d(rng);
  const auto s = score_l2_keys(keys);
  std::vector<std::size_t> by_norm(30), by_score(30);
  std::iota(by_norm.begin(), by_norm.end(), 0);
  by_score = by_norm;
  auto norm = [&](std::size_t i) {
    double n = 0;
    for (double v : keys.row(i)) n += v * v;
    return n;
  };
  std::sort(by_norm.begin(), by_norm.end(), [&](auto a, auto b) { return norm(a) < norm(b); });
  std::sort(by_score.begin(), by_score.end(), [&](auto a, auto b) { return s[a] > s[b]; });
  EXPECT_EQ(by_norm, by_score);
}

TEST(Eviction, BudgetAllocationExamples) {
  EXPECT_EQ(allocate_budgets(EvictionMethod::Snap, 80, 4, 8.0), (std::vector<std::size_t>{20, 20, 20, 20}));
  EXPECT_EQ(allocate_budgets(EvictionMethod::Pyramid, 80, 4, 3.0), (std::vector<std::size_t>{30, 23, 17, 10}));
  EXPECT_EQ(allocate_budgets(EvictionMethod::Pyramid, 81, 4, 1.0), allocate_budgets(EvictionMethod::Snap, 81, 4, 1.0));
  EXPECT_EQ(allocate_budgets(EvictionMethod::Snap, 10, 4, 1.0), (std::vector<std::size_t>{3, 3, 2, 2}));
  EXPECT_THROW(allocate_budgets(EvictionMethod::Snap, 3, 4, 1.0), ConfigError);
}

TEST(Eviction, PyramidBudgetsSumAndStayPositive) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t L = 1 + rng() % 8, total = L + rng() % 200;
    const double ratio = 1.0 + std::uniform_real_distribution<double>(0, 15)(rng);
    const auto b = allocate_budgets(EvictionMethod::Pyramid, total, L, ratio);
    EXPECT_EQ(std::accumulate(b.begin(), b.end(), std::size_t{0}), total);
    for (std::size_t i = 0; i < L; ++i) {
      EXPECT_GE(b[i], 1u);
      if (i > 0 && total >= 4 * L) EXPECT_LE(b[i], b[i - 1] + 1);
    }
  }
}

TEST(Eviction, SelectEvictionsExamples) {
  const std::vector<std::size_t> pos{0, 1, 2, 3};
  const std::vector<double> scores{5, 1, 3, 2};
  const std::vector<std::size_t> prot{3};
  EXPECT_EQ(select_evictions(pos, scores, 2, prot), (std::vector<std::size_t>{1, 2}));
  EXPECT_TRUE(select_evictions(pos, scores, 4).empty());
  EXPECT_TRUE(select_evictions(pos, scores, 9).empty());
  const std::vector<std::size_t> two{2, 3};
  EXPECT_THROW(select_evictions(pos, scores, 1, two), ContractError);
}

TEST(Eviction, TiesKeepTheMoreRecentEntry) {
  const std::vector<std::size_t> pos{0, 1, 2};
  EXPECT_EQ(kept_after(pos, std::vector<double>{1, 1, 1}, 1), (std::set<std::size_t>{2}));
}

TEST(Eviction, SelectionMatchesBruteForce) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng() % 20;
    std::vector<std::size_t> pos(n);
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < n; ++i) {
      pos[i] = 3 * i + rng() % 3;
      scores[i] = static_cast<double>(rng() % 5);  // plenty of ties
    }
    std::vector<std::size_t> prot;
    for (std::size_t i = 0; i < n; ++i)
      if (rng() % 6 == 0) prot.push_back(pos[i]);
    const std::size_t keep = prot.size() + rng() % (n - prot.size() + 2);
    EXPECT_EQ(kept_after(pos, scores, keep, prot), brute_kept(pos, scores, keep, prot));
  }
}

TEST(Eviction, LowerBudgetNeverKeepsWhatAHigherOneEvicted) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng() % 15;
    std::vector<std::size_t> pos(n);
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < n; ++i) {
      pos[i] = i;
      scores[i] = static_cast<double>(rng() % 4);
    }
    for (std::size_t keep = 1; keep < n; ++keep) {
      const auto hi = kept_after(pos, scores, keep + 1), lo = kept_after(pos, scores, keep);
      EXPECT_TRUE(std::includes(hi.begin(), hi.end(), lo.begin(), lo.end()));
    }
  }
}

TEST(Eviction, NonePolicyMatchesSinglePass) {
  const Model m = make_model(tiny_config(), 20, 0.4);
  const Tokens prompt = random_tokens(13, m.config.vocab_size, 1);
  PrefillOptions o;
  o.modes = HeadModes::all(m.config, HeadKind::Full);
  const Session single = chunked_prefill(m, prompt, o);
  o.chunk_size = 4;
  const Session chunked = chunked_prefill(m, prompt, o);
  EXPECT_EQ(slot_positions(chunked.state.cache), slot_positions(single.state.cache));
  EXPECT_EQ(chunked.state.cache.total_resident(), 2u * 2u * 13u);
  EXPECT_LE(max_abs_diff(chunked.state.last_logits, single.state.last_logits), 1e-10);
}

TEST(Eviction, FullRetentionEvictsNothing) {
  const Model m = make_model(tiny_config(), 21, 0.4);
  const Tokens prompt = random_tokens(16, m.config.vocab_size, 2);
  for (auto method : {EvictionMethod::Snap, EvictionMethod::Pyramid}) {
    PrefillOptions o = snap_options(m, 1.0, 4, 2, true);
    o.policy.method = method;
    EXPECT_EQ(chunked_prefill(m, prompt, o).state.cache.total_resident(), 2u * 2u * 16u);
  }
}

TEST(Eviction, PatchedProbesUseTheFinalQueries) {
  // Prompt 8, chunk 4, k 2: after chunk one the scores come from probes at
  // positions 6 and 7; chunk two scores with its own last two queries.
  const Model m = make_model(tiny_config(), 22, 0.5);
  const Tokens prompt = random_tokens(8, m.config.vocab_size, 3);
  const PrefillOptions o = snap_options(m, 0.5, 4, 2, true);
  const Session s = chunked_prefill(m, prompt, o);

  KVCache cache(m.config);
  const auto pos = iota_positions(0, 8);
  const std::span<const std::size_t> tok(prompt), ps(pos);
  forward_chunk(m, cache, tok.subspan(0, 4), ps.subspan(0, 4), o.modes, {});
  const std::size_t before_probe = cache.total_resident();
  const auto probes = probe_forward(m, cache, tok.subspan(6, 2), ps.subspan(6, 2), o.modes, {});
  EXPECT_EQ(cache.total_resident(), before_probe);
  for (const auto& p : probes) EXPECT_EQ(p.probs.rows(), 2u);
  for (std::size_t slot = 0; slot < cache.num_slots(); ++slot) {
    std::vector<Array> rows;
    for (const auto& p : probes)
      if (p.slot == slot) rows.push_back(rows_of(p.probs, 0, 2, 4));
    manual_evict(cache, slot, rows, 2, {});
  }
  const ChunkOutput second = forward_chunk(m, cache, tok.subspan(4, 4), ps.subspan(4, 4), o.modes, {}, true);
  for (std::size_t slot = 0; slot < cache.num_slots(); ++slot) {
    std::vector<Array> rows;
    for (const auto& r : second.attention)
      if (r.slot == slot) rows.push_back(rows_of(r.probs, 2, 4, 6));
    manual_evict(cache, slot, rows, 3, {6, 7});
  }
  EXPECT_EQ(slot_positions(s.state.cache), slot_positions(cache));

  // The ledger never sees probe entries: chunk one ends with 4 per slot.
  ASSERT_EQ(s.ledger->steps().size(), 2u);
  for (std::size_t c : s.ledger->steps()[0].resident) EXPECT_EQ(c, 4u);
}

TEST(Eviction, SingleChunkPatchedEqualsNaive) {
  const Model m = make_model(tiny_config(), 23, 0.5);
  const Tokens prompt = random_tokens(12, m.config.vocab_size, 4);
  const Session a = chunked_prefill(m, prompt, snap_options(m, 0.4, 0, 3, true));
  const Session b = chunked_prefill(m, prompt, snap_options(m, 0.4, 0, 3, false));
  EXPECT_EQ(slot_positions(a.state.cache), slot_positions(b.state.cache));
}

TEST(Eviction, ProtectedTailSurvivesAndBudgetsHold) {
  const Model m = make_model(tiny_config(), 24, 0.5);
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t n = 10 + rng() % 20, k = 1 + rng() % 4;
    const Tokens prompt = random_tokens(n, m.config.vocab_size, trial);
    const bool patched = trial % 2 == 0;
    PrefillOptions o = snap_options(m, 0.3 + 0.1 * (trial % 4), k + rng() % 6, k, patched);
    o.policy.method = trial % 3 == 0 ? EvictionMethod::Pyramid : EvictionMethod::Snap;
    o.policy.smoothing_kernel = 3;
    const Session s = chunked_prefill(m, prompt, o);
    for (std::size_t slot = 0; slot < s.state.cache.num_slots(); ++slot) {
      const auto p = s.state.cache.slot(slot).positions();
      for (std::size_t q = n - k; q < n; ++q) EXPECT_NE(std::find(p.begin(), p.end(), q), p.end()) << "tail " << q;
      EXPECT_LT(p.size(), n);
    }
  }
}

TEST(Eviction, PooledSelectionStoresOneSetPerKvHead) {
  const Model m = make_model(tiny_config(), 25, 0.5);
  const Tokens prompt = random_tokens(16, m.config.vocab_size, 5);
  PrefillOptions o = snap_options(m, 0.5, 8, 2, false);
  const Session pooled = chunked_prefill(m, prompt, o);
  o.policy.group_pooled = false;
  const Session split = chunked_prefill(m, prompt, o);
  EXPECT_EQ(pooled.state.cache.num_slots(), m.config.num_layers * m.config.num_kv_heads);
  EXPECT_EQ(split.state.cache.num_slots(), m.config.num_layers * m.config.num_query_heads);
  const std::size_t group = m.config.num_query_heads / m.config.num_kv_heads;
  EXPECT_EQ(pooled.state.cache.total_resident() * group, split.state.cache.total_resident());
}

TEST(Eviction, NaiveChunksMustHoldTheWindow) {
  const Model m = make_model(tiny_config(), 26);
  const Tokens prompt = random_tokens(12, m.config.vocab_size, 6);
  EXPECT_THROW(chunked_prefill(m, prompt, snap_options(m, 0.5, 2, 4, false)), ConfigError);
  EXPECT_NO_THROW(chunked_prefill(m, prompt, snap_options(m, 0.5, 2, 4, true)));
}

TEST(Eviction, StreamingHeadsEvictUnderAnyPolicy) {
  const Model m = make_model(tiny_config(), 27, 0.5);
  const Tokens prompt = random_tokens(20, m.config.vocab_size, 7);
  PrefillOptions o = snap_options(m, 0.5, 5, 2, true);
  o.modes = HeadModes::all(m.config, HeadKind::Streaming);
  o.streaming = StreamingSpec{1, 3};
  const Session s = chunked_prefill(m, prompt, o);
  for (std::size_t slot = 0; slot < s.state.cache.num_slots(); ++slot)
    EXPECT_EQ(s.state.cache.slot(slot).positions(), (std::vector<std::size_t>{0, 18, 19}));
}
