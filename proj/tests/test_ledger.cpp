#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "kvlab/kvlab.hpp"
#include "support.hpp"

using namespace kvlab;
using kvlab::testing::random_tokens;
using kvlab::testing::tiny_config;

namespace {

using Rig = kvlab::testing::LedgerRig;

ModelConfig one_slot_config() {
  ModelConfig c = tiny_config();
  c.num_layers = 1;
  c.num_query_heads = 1;
  c.num_kv_heads = 1;
  c.model_dim = c.head_dim;
  return c;
}

// Independent reduction straight from the log lines: resident counts per
// step by counting creations minus evictions seen so far.
std::pair<double, double> brute_footprint(const EventLogRun& run) {
  long long live = 0;
  double numerator = 0.0, peak = 0.0;
  for (const auto& l : run.lines) {
    if (l.type == LogLine::Type::Create) ++live;
    if (l.type == LogLine::Type::Evict) --live;
    if (l.type == LogLine::Type::Step) {
      numerator += static_cast<double>(l.q_end - l.q_begin) * static_cast<double>(live);
      peak = std::max(peak, static_cast<double>(live));
    }
  }
  const double n = static_cast<double>(run.header.prompt_len), m = static_cast<double>(run.header.decode_len);
  const double units = static_cast<double>(run.header.layers * run.header.kv_heads);
  double denom = n * n;
  for (double i = 1; i <= m; ++i) denom += n + i;
  return {numerator / (units * denom), peak / (units * (n + m))};
}

EventLogRun random_schedule(std::mt19937_64& rng, std::size_t run_index) {
  const auto [run, live] = kvlab::testing::random_schedule(rng, run_index);
  EXPECT_EQ(replay_check(run), live);
  return run;
}

}  // namespace

TEST(Ledger, ReferenceDenominator) {
  EXPECT_EQ(reference_denominator(6, 0), 36u);
  EXPECT_EQ(reference_denominator(4, 3), 16u + 5u + 6u + 7u);
}

TEST(Ledger, SinglePassWithoutEvictionIsOne) {
  for (std::size_t n : {1u, 6u, 17u}) {
    for (std::size_t m : {0u, 5u}) {
      Rig rig(tiny_config());
      for (std::size_t p = 0; p < n; ++p) rig.add(p);
      rig.ledger.record_step(StepKind::PrefillChunk, 0, n);
      for (std::size_t i = 0; i < m; ++i) {
        rig.add(n + i);
        rig.ledger.record_step(StepKind::Decode, n + i, n + i + 1);
      }
      const FootprintReport r = rig.ledger.report(n, m);
      EXPECT_EQ(r.footprint, 1.0);
      EXPECT_EQ(r.peak_kv, 1.0);
    }
  }
}

TEST(Ledger, TwoChunksWithOneEviction) {
  Rig rig(one_slot_config());
  rig.add(0);
  rig.add(1);
  rig.ledger.record_step(StepKind::PrefillChunk, 0, 2);
  rig.evict_position(0, 0);
  rig.add(2);
  rig.add(3);
  rig.ledger.record_step(StepKind::PrefillChunk, 2, 4);
  EXPECT_DOUBLE_EQ(kv_footprint(rig.ledger, 4, 0), 0.625);
  EXPECT_DOUBLE_EQ(peak_kv(rig.ledger, 4, 0), 0.75);
}

TEST(Ledger, IncompleteRunsAreRejected) {
  Rig rig(one_slot_config());
  rig.add(0);
  rig.ledger.record_step(StepKind::PrefillChunk, 0, 1);
  EXPECT_THROW(rig.ledger.report(2, 0), ContractError);
  EXPECT_THROW(rig.ledger.report(1, 1), ContractError);
}

TEST(Ledger, ActiveCannotExceedResident) {
  Rig rig(one_slot_config());
  rig.add(0);
  const std::vector<std::size_t> active{2};
  EXPECT_THROW(rig.ledger.record_step(StepKind::PrefillChunk, 0, 1, active), IntegrityError);
}

TEST(Ledger, ReplayMatchesIncrementalOnRandomSchedules) {
  std::mt19937_64 rng(77);
  for (std::size_t i = 0; i < 100; ++i) {
    const EventLogRun run = random_schedule(rng, i);
    const FootprintReport rep = replay_check(run);
    const auto [f, p] = brute_footprint(run);
    EXPECT_NEAR(rep.footprint, f, 1e-12);
    EXPECT_NEAR(rep.peak_kv, p, 1e-12);
    EXPECT_LE(rep.footprint, 1.0 + 1e-12);
  }
}

TEST(Ledger, EventLogSurvivesTextRoundTrip) {
  std::mt19937_64 rng(78);
  std::vector<EventLogRun> runs;
  for (std::size_t i = 0; i < 5; ++i) runs.push_back(random_schedule(rng, i));
  std::stringstream ss;
  write_event_log(ss, runs);
  const auto back = read_event_log(ss);
  ASSERT_EQ(back.size(), runs.size());
  for (std::size_t i = 0; i < runs.size(); ++i) EXPECT_EQ(replay_check(back[i]), replay_check(runs[i]));
}

TEST(Ledger, EmptyLogReplaysToZero) {
  const FootprintReport r = replay_check(EventLogRun{});
  EXPECT_EQ(r.footprint, 0.0);
  EXPECT_EQ(r.peak_kv, 0.0);
  EXPECT_TRUE(r.resident_series.empty());
}

TEST(Ledger, CorruptLogsRaiseIntegrityErrors) {
  EventLogRun run;
  run.header = RunHeader{0, 1, 1, 1, 0};
  LogLine step;
  step.type = LogLine::Type::Step;
  step.q_end = 1;
  LogLine evict;
  evict.type = LogLine::Type::Evict;
  evict.entry_id = 5;
  run.lines = {step, evict};
  EXPECT_THROW(replay_check(run), IntegrityError);

  LogLine create = evict;
  create.type = LogLine::Type::Create;
  run.lines = {create, step, evict, evict};
  EXPECT_THROW(replay_check(run), IntegrityError);

  std::stringstream bad("{\"event\":\"run\",\"run\":0,\"layers\":1}\nnot json\n");
  EXPECT_THROW(read_event_log(bad), IntegrityError);
}

TEST(Ledger, StreamingPeakIsChunkPlusSinkPlusWindow) {
  const Model m = make_model(tiny_config(), 30, 0.5);
  const std::size_t n = 64, chunk = 8, sink = 2, window = 4;
  PrefillOptions o;
  o.chunk_size = chunk;
  o.modes = HeadModes::all(m.config, HeadKind::Streaming);
  o.streaming = StreamingSpec{sink, window};
  const Session s = chunked_prefill(m, random_tokens(n, m.config.vocab_size, 1), o);
  const FootprintReport r = s.ledger->report(n, 0);
  EXPECT_DOUBLE_EQ(r.peak_kv, static_cast<double>(chunk + sink + window - 1) / n);
  // Chunk i (0-based) ends with chunk, then chunk + sink + window - 1 entries.
  const double numerator = chunk * chunk + 7.0 * chunk * (chunk + sink + window - 1);
  EXPECT_DOUBLE_EQ(r.footprint, numerator / (n * n));
}

TEST(Ledger, RunsAreDeterministic) {
  const Model m = make_model(tiny_config(), 31, 0.5);
  const Tokens prompt = random_tokens(24, m.config.vocab_size, 2);
  PrefillOptions o;
  o.chunk_size = 5;
  o.policy.method = EvictionMethod::Snap;
  o.policy.retention = 0.5;
  o.policy.observation_window = 3;
  o.policy.patched = true;
  o.modes = HeadModes::all(m.config, HeadKind::Full);
  const Session a = chunked_prefill(m, prompt, o), b = chunked_prefill(m, prompt, o);
  EXPECT_EQ(a.ledger->report(24, 0), b.ledger->report(24, 0));
}

TEST(Ledger, SmallerChunksNeverRaiseFootprint) {
  const Model m = make_model(tiny_config(), 32, 0.5);
  const Tokens prompt = random_tokens(48, m.config.vocab_size, 3);
  for (double retention : {0.3, 0.6}) {
    double previous = 2.0;
    for (std::size_t chunk : {48u, 24u, 16u, 8u}) {
      PrefillOptions o;
      o.chunk_size = chunk;
      o.policy.method = EvictionMethod::Snap;
      o.policy.retention = retention;
      o.policy.observation_window = 4;
      o.policy.patched = true;
      o.modes = HeadModes::all(m.config, HeadKind::Full);
      const double f = chunked_prefill(m, prompt, o).ledger->report(48, 0).footprint;
      EXPECT_LE(f, previous + 1e-12) << "chunk " << chunk;
      previous = f;
    }
  }
}

TEST(Ledger, CriticalFootprintExamples) {
  const std::vector<std::pair<double, double>> pts{{0.2, 50}, {0.4, 85}, {0.6, 92}, {1.0, 95}};
  EXPECT_EQ(critical_footprint(pts, 95, 0.9), 0.6);
  const std::vector<std::pair<double, double>> low{{0.2, 10}, {0.5, 20}};
  EXPECT_FALSE(critical_footprint(low, 95, 0.9).has_value());
  const std::vector<std::pair<double, double>> one{{1.0, 95}};
  EXPECT_EQ(critical_footprint(one, 95, 0.9), 1.0);
  EXPECT_THROW(critical_footprint(one, 0.0, 0.9), ContractError);
}

TEST(Ledger, EventLogFileRoundTrip) {
  std::mt19937_64 rng(79);
  const std::vector<EventLogRun> runs{random_schedule(rng, 0)};
  const auto path = std::filesystem::temp_directory_path() / "kvlab_events.jsonl";
  save_event_log(path, runs);
  EXPECT_EQ(replay_check(load_event_log(path).at(0)), replay_check(runs[0]));
  std::filesystem::remove(path);
  EXPECT_THROW(load_event_log(path), IoError);
}
