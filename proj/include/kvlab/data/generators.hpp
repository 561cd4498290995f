#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "kvlab/errors.hpp"

namespace kvlab {

using Rng = std::mt19937_64;
using Tokens = std::vector<std::size_t>;

/// Seeds an independent stream for (seed, index) pairs.
inline Rng make_rng(std::uint64_t seed, std::uint64_t index = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x6b766c61u};
  return Rng(seq);
}

/// Token id layout:
///   0                   needle marker
///   1                   query marker
///   [2, 2 + key_range)  passkey tokens, never used as filler
///   [2 + key_range, V)  filler
struct Vocabulary {
  std::size_t size = 64;
  std::size_t key_range = 16;

  static constexpr std::size_t kNeedle = 0;
  static constexpr std::size_t kQuery = 1;
  static constexpr std::size_t kReserved = 2;

  std::size_t key_begin() const { return kReserved; }
  std::size_t filler_begin() const { return kReserved + key_range; }
  std::size_t filler_count() const { return size - filler_begin(); }

  void validate() const {
    detail::require_config(size > filler_begin(), "vocabulary leaves no filler tokens");
    detail::require_config(key_range >= 1, "vocabulary needs at least one key token");
  }
};

struct TaskInstance {
  Tokens tokens;
  Tokens answer;
  std::optional<std::pair<std::size_t, std::size_t>> needle_span;
};

/// Zipf(exponent) sampler over ranks [0, n).
class ZipfSampler {
 public:
  ZipfSampler(std::size_t n, double exponent) {
    if (n == 0) throw ConfigError("zipf: empty support");
    if (!(exponent > 0.0)) throw ConfigError("zipf: exponent must be positive");
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) w[i] = std::pow(static_cast<double>(i + 1), -exponent);
    dist_ = std::discrete_distribution<std::size_t>(w.begin(), w.end());
  }
  template <class G>
  std::size_t operator()(G& rng) {
    return dist_(rng);
  }

 private:
  std::discrete_distribution<std::size_t> dist_;
};

/// i.i.d. Zipf tokens over [0, vocab).
inline Tokens gen_zipf(std::size_t seq_len, std::size_t vocab, double exponent, Rng& rng) {
  ZipfSampler z(vocab, exponent);
  Tokens out(seq_len);
  for (auto& t : out) t = z(rng);
  return out;
}

inline Tokens gen_filler(std::size_t seq_len, const Vocabulary& v, double exponent, Rng& rng) {
  Tokens out = gen_zipf(seq_len, v.filler_count(), exponent, rng);
  for (auto& t : out) t += v.filler_begin();
  return out;
}

struct PasskeyOptions {
  std::size_t seq_len = 256;
  double depth = 0.5;
  std::size_t key_len = 2;
  double zipf_exponent = 1.0;
};

/// Suffix appended after the filler: the query marker followed by the needle
/// marker, so the answer is what followed the needle marker earlier.
inline constexpr std::size_t kPasskeySuffix = 2;

/// Filler with a needle marker followed by `key_len` key tokens at
/// depth * seq_len, ending in [QUERY, NEEDLE]. The answer is the key.
inline TaskInstance gen_passkey(const PasskeyOptions& o, const Vocabulary& v, Rng& rng) {
  v.validate();
  if (o.seq_len <= o.key_len + 1 + kPasskeySuffix) throw ConfigError("passkey: sequence too short for needle and query");
  if (o.key_len == 0 || o.key_len > v.key_range) throw ConfigError("passkey: key length outside key range");
  if (!(o.depth >= 0.0 && o.depth <= 1.0)) throw ConfigError("passkey: depth must lie in [0, 1]");
  TaskInstance t;
  t.tokens = gen_filler(o.seq_len, v, o.zipf_exponent, rng);
  Tokens keys(v.key_range);
  for (std::size_t i = 0; i < v.key_range; ++i) keys[i] = v.key_begin() + i;
  std::shuffle(keys.begin(), keys.end(), rng);
  t.answer.assign(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(o.key_len));

  const std::size_t last_start = o.seq_len - kPasskeySuffix - (o.key_len + 1);
  const std::size_t at = std::min(static_cast<std::size_t>(std::floor(o.depth * static_cast<double>(o.seq_len))), last_start);
  t.tokens[at] = Vocabulary::kNeedle;
  std::copy(t.answer.begin(), t.answer.end(), t.tokens.begin() + static_cast<std::ptrdiff_t>(at + 1));
  t.tokens[o.seq_len - 2] = Vocabulary::kQuery;
  t.tokens[o.seq_len - 1] = Vocabulary::kNeedle;
  t.needle_span = std::make_pair(at, at + 1 + o.key_len);
  return t;
}

struct RecallOptions {
  std::size_t seq_len = 256;
  std::size_t span_len = 8;
  std::size_t num_copies = 8;
  double zipf_exponent = 1.0;
};

/// Zipf filler in which `num_copies` spans repeat earlier text verbatim.
/// Copy c lands at the end of the c-th of num_copies equal segments and
/// copies from a uniformly chosen earlier offset.
inline Tokens gen_recall_corpus(const RecallOptions& o, const Vocabulary& v, Rng& rng) {
  v.validate();
  if (o.num_copies > 0 && o.span_len * o.num_copies >= o.seq_len) throw ConfigError("recall: copies do not fit");
  Tokens t = gen_filler(o.seq_len, v, o.zipf_exponent, rng);
  if (o.num_copies == 0 || o.span_len == 0) return t;
  const std::size_t seg = o.seq_len / o.num_copies;
  for (std::size_t c = 0; c < o.num_copies; ++c) {
    const std::size_t dst = c * seg + seg - o.span_len;
    if (dst == 0) continue;
    const std::size_t src = std::uniform_int_distribution<std::size_t>(0, dst - 1)(rng);
    for (std::size_t i = 0; i < o.span_len; ++i) t[dst + i] = t[src + i];
  }
  return t;
}

/// Pre-training stream: recall-corpus sequences mixed with passkey
/// sequences (prompt plus answer) of the same total length.
struct TrainingMix {
  std::size_t seq_len = 256;
  double passkey_fraction = 0.5;
  std::size_t key_len = 2;
  std::size_t span_len = 8;
  std::size_t num_copies = 8;
  double zipf_exponent = 1.0;
};

inline Tokens gen_training_sequence(const TrainingMix& mix, const Vocabulary& v, Rng& rng) {
  std::bernoulli_distribution pick(mix.passkey_fraction);
  if (pick(rng)) {
    PasskeyOptions o;
    o.seq_len = mix.seq_len - mix.key_len;
    o.key_len = mix.key_len;
    o.zipf_exponent = mix.zipf_exponent;
    o.depth = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    TaskInstance t = gen_passkey(o, v, rng);
    t.tokens.insert(t.tokens.end(), t.answer.begin(), t.answer.end());
    return t.tokens;
  }
  return gen_recall_corpus(RecallOptions{mix.seq_len, mix.span_len, mix.num_copies, mix.zipf_exponent}, v, rng);
}

/// Line-delimited dataset: "<tokens...> | <answer...>" per instance.
inline void save_dataset(const std::filesystem::path& path, const std::vector<TaskInstance>& data) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write dataset " + path.string());
  for (const auto& t : data) {
    for (std::size_t i = 0; i < t.tokens.size(); ++i) os << (i ? " " : "") << t.tokens[i];
    os << " |";
    for (std::size_t a : t.answer) os << ' ' << a;
    os << '\n';
  }
}

inline std::vector<TaskInstance> load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open dataset " + path.string());
  std::vector<TaskInstance> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    TaskInstance t;
    std::istringstream ls(line);
    std::string w;
    bool answer = false;
    while (ls >> w) {
      if (w == "|") {
        answer = true;
        continue;
      }
      (answer ? t.answer : t.tokens).push_back(std::stoul(w));
    }
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace kvlab
