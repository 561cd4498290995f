#pragma once

// Helpers shared by the unit and acceptance tests.

#include <cstddef>
#include <optional>
#include <random>
#include <vector>

#include "kvlab/kvlab.hpp"

namespace kvlab::testing {

/// Small GQA shape: 2 layers, 4 query heads over 2 kv heads.
inline ModelConfig tiny_config(std::size_t ffn = 8) {
  ModelConfig c;
  c.num_layers = 2;
  c.num_query_heads = 4;
  c.num_kv_heads = 2;
  c.head_dim = 4;
  c.model_dim = 16;
  c.vocab_size = 20;
  c.ffn_dim = ffn;
  return c;
}

inline Tokens random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tokens t(n);
  for (auto& x : t) x = rng() % vocab;
  return t;
}

inline std::vector<std::size_t> iota_positions(std::size_t first, std::size_t count) {
  std::vector<std::size_t> p(count);
  for (std::size_t i = 0; i < count; ++i) p[i] = first + i;
  return p;
}

/// Next-token NLL of `seq` as a function of one model parameter (by index
/// into ModelWeights::named()), for finite-difference checks.
inline ScalarFunction nll_wrt_parameter(const Model& model, const Tokens& seq, std::size_t param, const HeadModes& modes,
                                        const StreamingSpec& streaming = {}, std::optional<Array> gates = std::nullopt) {
  return [&model, seq, param, modes, streaming, gates](Tape& t, const Var& x) {
    BoundWeights w = bind_weights(t, model.weights, false);
    std::vector<Var*> slots{&w.embedding};
    for (auto& l : w.layers) {
      slots.insert(slots.end(), {&l.wq, &l.wk, &l.wv, &l.wo});
      if (l.w1.valid()) slots.insert(slots.end(), {&l.w1, &l.w2});
    }
    slots.push_back(&w.unembedding);
    *slots.at(param) = x;
    const auto terms = detail::lm_terms(seq);
    std::optional<Var> z;
    if (gates) z = t.constant(*gates);
    const KVCache empty(model.config);
    ForwardRequest req{terms.inputs, terms.positions, &modes, streaming, z, false};
    return next_token_nll(forward_core(t, model.config, w, empty, req).logits, terms.targets);
  };
}

/// Next-token NLL as a function of the [L, H] gate values.
inline ScalarFunction nll_wrt_gates(const Model& model, const Tokens& seq, const StreamingSpec& streaming) {
  return [&model, seq, streaming](Tape& t, const Var& z) {
    const HeadModes modes = HeadModes::all(model.config, HeadKind::Gated);
    const BoundWeights w = bind_weights(t, model.weights, false);
    const auto terms = detail::lm_terms(seq);
    const KVCache empty(model.config);
    ForwardRequest req{terms.inputs, terms.positions, &modes, streaming, z, false};
    return next_token_nll(forward_core(t, model.config, w, empty, req).logits, terms.targets);
  };
}

// A cache with a ledger attached, driven by hand.
struct LedgerRig {
  KVCache cache;
  KVLedger ledger;
  explicit LedgerRig(const ModelConfig& c) : cache(c), ledger(KVLedger::attach_to(cache)) { cache.set_observer(&ledger); }
  LedgerRig(const LedgerRig&) = delete;

  void add(std::size_t position) {
    const std::vector<double> kv(cache.config().head_dim, 0.0);
    for (std::size_t s = 0; s < cache.num_slots(); ++s) cache.append(s, position, kv, kv);
  }
  void evict_position(std::size_t slot, std::size_t position) {
    for (const auto& e : cache.slot(slot).entries)
      if (e.position == position) {
        const std::vector<EntryId> one{e.id};
        cache.evict(slot, one);
        return;
      }
  }
};

struct Schedule {
  EventLogRun run;
  FootprintReport live;
};

// Random chunking, random evictions, then decode steps with more evictions.
inline Schedule random_schedule(std::mt19937_64& rng, std::size_t run_index) {
  LedgerRig rig(tiny_config());
  const std::size_t n = 1 + rng() % 40, m = rng() % 10;
  std::size_t b = 0;
  auto random_evictions = [&] {
    for (std::size_t s = 0; s < rig.cache.num_slots(); ++s) {
      const auto pos = rig.cache.slot(s).positions();
      for (std::size_t p : pos)
        if (rng() % 4 == 0) rig.evict_position(s, p);
    }
  };
  while (b < n) {
    const std::size_t e = std::min(n, b + 1 + rng() % 9);
    for (std::size_t p = b; p < e; ++p) rig.add(p);
    rig.ledger.record_step(StepKind::PrefillChunk, b, e);
    random_evictions();
    b = e;
  }
  for (std::size_t i = 0; i < m; ++i) {
    rig.add(n + i);
    rig.ledger.record_step(StepKind::Decode, n + i, n + i + 1);
    random_evictions();
  }
  return {export_run(rig.ledger, run_index, n, m), rig.ledger.report(n, m)};
}

}  // namespace kvlab::testing
