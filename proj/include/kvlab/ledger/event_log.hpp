#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kvlab/errors.hpp"
#include "kvlab/ledger/ledger.hpp"

// Event log text format: one JSON object per line. A file holds one or more
// runs (simulated sequences), each introduced by a header line:
//
//   {"event":"run","run":0,"layers":2,"kv_heads":4,"prompt_len":512,"decode_len":4}
//
// followed, for every step s in order, by the step's creations, the step
// record, and the evictions performed after it:
//
//   {"step":0,"kind":"prefill","layer":0,"head":1,"event":"create","entry_id":7,"position":3}
//   {"step":0,"kind":"prefill","event":"step","q_begin":0,"q_end":64}
//   {"step":0,"kind":"prefill","layer":0,"head":1,"event":"evict","entry_id":7,"position":3}
//
// `head` is the storage slot within the layer: the kv head for shared
// caches, the query head for per-query-head replicated caches.

namespace kvlab {

struct RunHeader {
  std::size_t run = 0;
  std::size_t layers = 0;
  std::size_t kv_heads = 0;
  std::size_t prompt_len = 0;
  std::size_t decode_len = 0;
};

struct LogLine {
  enum class Type { Step, Create, Evict };
  Type type = Type::Step;
  std::size_t step = 0;
  StepKind kind = StepKind::PrefillChunk;
  std::size_t layer = 0;
  std::size_t head = 0;
  EntryId entry_id = 0;
  std::size_t position = 0;
  std::size_t q_begin = 0;
  std::size_t q_end = 0;
};

struct EventLogRun {
  RunHeader header;
  std::vector<LogLine> lines;
};

inline const char* kind_name(StepKind k) { return k == StepKind::Decode ? "decode" : "prefill"; }

inline StepKind parse_kind(const std::string& s) {
  if (s == "prefill") return StepKind::PrefillChunk;
  if (s == "decode") return StepKind::Decode;
  throw IntegrityError("event log: unknown step kind '" + s + "'");
}

/// Event-log view of a finished ledger.
inline EventLogRun export_run(const KVLedger& ledger, std::size_t run, std::size_t n, std::size_t m) {
  EventLogRun out;
  out.header = RunHeader{run, ledger.num_layers(), ledger.num_kv_heads(), n, m};
  const auto& steps = ledger.steps();
  const auto& events = ledger.events();
  std::size_t e = 0;
  auto emit_event = [&](const LifecycleEvent& ev) {
    LogLine l;
    l.type = ev.event == Lifecycle::Create ? LogLine::Type::Create : LogLine::Type::Evict;
    l.step = ev.step;
    l.kind = ev.step < steps.size() ? steps[ev.step].kind : StepKind::PrefillChunk;
    l.layer = ev.layer;
    l.head = ev.head;
    l.entry_id = ev.entry_id;
    l.position = ev.position;
    out.lines.push_back(l);
  };
  for (const auto& s : steps) {
    while (e < events.size() && events[e].event == Lifecycle::Create && events[e].step == s.index) emit_event(events[e++]);
    LogLine l;
    l.type = LogLine::Type::Step;
    l.step = s.index;
    l.kind = s.kind;
    l.q_begin = s.q_begin;
    l.q_end = s.q_end;
    out.lines.push_back(l);
    while (e < events.size() && events[e].event == Lifecycle::Evict && events[e].step == s.index) emit_event(events[e++]);
  }
  while (e < events.size()) emit_event(events[e++]);
  return out;
}

inline void write_event_log(std::ostream& os, const std::vector<EventLogRun>& runs) {
  using nlohmann::json;
  for (const auto& r : runs) {
    os << json{{"event", "run"}, {"run", r.header.run}, {"layers", r.header.layers}, {"kv_heads", r.header.kv_heads},
               {"prompt_len", r.header.prompt_len}, {"decode_len", r.header.decode_len}}
              .dump()
       << '\n';
    for (const auto& l : r.lines) {
      json j;
      j["step"] = l.step;
      j["kind"] = kind_name(l.kind);
      if (l.type == LogLine::Type::Step) {
        j["event"] = "step";
        j["q_begin"] = l.q_begin;
        j["q_end"] = l.q_end;
      } else {
        j["layer"] = l.layer;
        j["head"] = l.head;
        j["event"] = l.type == LogLine::Type::Create ? "create" : "evict";
        j["entry_id"] = l.entry_id;
        j["position"] = l.position;
      }
      os << j.dump() << '\n';
    }
  }
}

inline std::vector<EventLogRun> read_event_log(std::istream& is) {
  using nlohmann::json;
  std::vector<EventLogRun> runs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& ex) {
      throw IntegrityError("event log line " + std::to_string(lineno) + ": " + ex.what());
    }
    try {
      const std::string ev = j.at("event").get<std::string>();
      if (ev == "run") {
        EventLogRun r;
        r.header = RunHeader{j.at("run").get<std::size_t>(), j.at("layers").get<std::size_t>(),
                             j.at("kv_heads").get<std::size_t>(), j.at("prompt_len").get<std::size_t>(),
                             j.at("decode_len").get<std::size_t>()};
        runs.push_back(std::move(r));
        continue;
      }
      if (runs.empty()) throw IntegrityError("event log line " + std::to_string(lineno) + ": event before run header");
      LogLine l;
      l.step = j.at("step").get<std::size_t>();
      l.kind = parse_kind(j.at("kind").get<std::string>());
      if (ev == "step") {
        l.type = LogLine::Type::Step;
        l.q_begin = j.at("q_begin").get<std::size_t>();
        l.q_end = j.at("q_end").get<std::size_t>();
      } else if (ev == "create" || ev == "evict") {
        l.type = ev == "create" ? LogLine::Type::Create : LogLine::Type::Evict;
        l.layer = j.at("layer").get<std::size_t>();
        l.head = j.at("head").get<std::size_t>();
        l.entry_id = j.at("entry_id").get<EntryId>();
        l.position = j.at("position").get<std::size_t>();
      } else {
        throw IntegrityError("event log line " + std::to_string(lineno) + ": unknown event '" + ev + "'");
      }
      runs.back().lines.push_back(l);
    } catch (const json::exception& ex) {
      throw IntegrityError("event log line " + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return runs;
}

inline void save_event_log(const std::filesystem::path& path, const std::vector<EventLogRun>& runs) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write event log " + path.string());
  write_event_log(os, runs);
}

inline std::vector<EventLogRun> load_event_log(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open event log " + path.string());
  return read_event_log(is);
}

/// Recomputes the footprint report of a run from its raw events alone.
inline FootprintReport replay_check(const EventLogRun& run) {
  struct Live {
    std::size_t layer, head, created;
  };
  std::unordered_map<EntryId, Live> live;
  std::unordered_map<EntryId, bool> seen;
  std::map<std::pair<std::size_t, std::size_t>, std::uint64_t> resident;
  std::vector<StepRecord> steps;
  std::vector<std::uint64_t> totals;

  for (const auto& l : run.lines) {
    switch (l.type) {
      case LogLine::Type::Create: {
        if (l.step != steps.size()) throw IntegrityError("replay: creation tagged with a past or skipped step");
        if (seen.contains(l.entry_id)) throw IntegrityError("replay: duplicate entry id " + std::to_string(l.entry_id));
        seen[l.entry_id] = true;
        live[l.entry_id] = Live{l.layer, l.head, l.step};
        ++resident[{l.layer, l.head}];
        break;
      }
      case LogLine::Type::Evict: {
        if (steps.empty() || l.step != steps.size() - 1) throw IntegrityError("replay: eviction not after the latest step");
        auto it = live.find(l.entry_id);
        if (it == live.end()) {
          throw IntegrityError("replay: eviction of entry " + std::to_string(l.entry_id) +
                               " that is not resident (never created or already evicted)");
        }
        if (it->second.layer != l.layer || it->second.head != l.head) throw IntegrityError("replay: eviction slot mismatch");
        if (l.step < it->second.created) throw IntegrityError("replay: eviction precedes creation");
        --resident[{l.layer, l.head}];
        live.erase(it);
        break;
      }
      case LogLine::Type::Step: {
        if (l.step != steps.size()) throw IntegrityError("replay: steps out of order");
        StepRecord r;
        r.index = l.step;
        r.kind = l.kind;
        r.q_begin = l.q_begin;
        r.q_end = l.q_end;
        steps.push_back(r);
        std::uint64_t t = 0;
        for (const auto& [slot, c] : resident) t += c;
        totals.push_back(t);
        break;
      }
    }
  }
  if (steps.empty()) return FootprintReport{};
  const auto& h = run.header;
  try {
    detail::check_complete(steps, h.prompt_len, h.decode_len);
  } catch (const ContractError& ex) {
    throw IntegrityError(std::string("replay: ") + ex.what());
  }
  std::vector<std::size_t> q;
  for (const auto& s : steps) q.push_back(s.queries());
  return detail::reduce_footprint(q, totals, h.layers * h.kv_heads, h.prompt_len, h.decode_len);
}

/// Mean footprint and peak over the runs of a log, in run order.
inline std::pair<double, double> replay_mean(const std::vector<EventLogRun>& runs) {
  if (runs.empty()) return {0.0, 0.0};
  double f = 0.0, p = 0.0;
  for (const auto& r : runs) {
    const FootprintReport rep = replay_check(r);
    f += rep.footprint;
    p += rep.peak_kv;
  }
  return {f / static_cast<double>(runs.size()), p / static_cast<double>(runs.size())};
}

}  // namespace kvlab
