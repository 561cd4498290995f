#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "kvlab/errors.hpp"
#include "kvlab/model/config.hpp"
#include "kvlab/tensor/ops.hpp"

namespace kvlab {

/// Hard-concrete gates, one per (layer, query head).
///
/// Sampling chain for each gate:
///   u  ~ Uniform(eps, 1 - eps)
///   s  = sigmoid((log(u / (1 - u)) + log_alpha) / temperature)
///   g  = stretch_low + s * (stretch_high - stretch_low)
///   z  = clamp(g, 0, 1)
///
/// The log_alpha term shares the temperature with the logistic noise, which
/// gives P(z > 0) = sigmoid(log_alpha - temperature * log(-low / high)) and
/// the Bernoulli(sigmoid(log_alpha)) limit as the temperature goes to 0.
struct GateParams {
  Array log_alpha;  // [L, H]
  double temperature = 1.5;
  double stretch_low = -0.1;
  double stretch_high = 1.1;
  double epsilon = 1e-6;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double target = 0.0;

  static GateParams uniform(std::size_t layers, std::size_t heads, double log_alpha = 0.0) {
    GateParams p;
    p.log_alpha = Array(Shape{layers, heads}, log_alpha);
    return p;
  }

  std::size_t layers() const { return log_alpha.shape().at(0); }
  std::size_t heads() const { return log_alpha.shape().at(1); }

  /// Offset such that prob_active = sigmoid(log_alpha + offset).
  double active_offset() const { return -temperature * std::log(-stretch_low / stretch_high); }

  void validate() const {
    detail::require_config(log_alpha.rank() == 2, "log_alpha must be [layers, heads]");
    detail::require_config(temperature > 0.0, "gate temperature must be positive");
    detail::require_config(stretch_low < 0.0 && stretch_high > 1.0, "gate stretch needs low < 0 and high > 1");
    detail::require_config(epsilon > 0.0 && epsilon <= 1e-3, "gate epsilon must lie in (0, 1e-3]");
    detail::require_config(target >= 0.0 && target <= 1.0, "target sparsity must lie in [0, 1]");
  }
};

/// Uniform draws truncated to (eps, 1 - eps).
template <class Rng>
Array draw_gate_noise(const Shape& shape, double epsilon, Rng& rng) {
  std::uniform_real_distribution<double> dist(epsilon, 1.0 - epsilon);
  Array u(shape);
  for (double& v : u.values()) v = dist(rng);
  return u;
}

/// The differentiable chain for given uniform draws `u`.
inline Var hard_concrete(const Var& log_alpha, const Array& u, const GateParams& p) {
  detail::same_shape("hard_concrete", log_alpha.value(), u);
  Array logistic(u.shape());
  for (std::size_t i = 0; i < u.size(); ++i) logistic[i] = std::log(u[i] / (1.0 - u[i]));
  Tape& tape = detail::tape_of(log_alpha);
  const Var s = sigmoid(scale(add(tape.constant(std::move(logistic)), log_alpha), 1.0 / p.temperature));
  const Var stretched = affine(s, p.stretch_high - p.stretch_low, p.stretch_low);
  return clamp01(stretched);
}

/// One Monte Carlo draw of all gates, differentiable w.r.t. `log_alpha`.
template <class Rng>
Var sample_gates(const Var& log_alpha, const GateParams& p, Rng& rng) {
  return hard_concrete(log_alpha, draw_gate_noise(log_alpha.shape(), p.epsilon, rng), p);
}

template <class Rng>
Array sample_gates(const GateParams& p, Rng& rng) {
  Tape tape(false);
  return sample_gates(tape.constant_ref(p.log_alpha), p, rng).value();
}

/// P(z > 0) per gate.
inline Var prob_active(const Var& log_alpha, const GateParams& p) {
  return sigmoid(affine(log_alpha, 1.0, p.active_offset()));
}

inline Array prob_active(const GateParams& p) {
  Tape tape(false);
  return prob_active(tape.constant_ref(p.log_alpha), p).value();
}

/// 1 - mean P(z > 0): the expected fraction of streaming heads.
inline Var expected_sparsity(const Var& log_alpha, const GateParams& p) {
  return affine(mean_all(prob_active(log_alpha, p)), -1.0, 1.0);
}

inline double expected_sparsity(const GateParams& p) {
  Tape tape(false);
  return expected_sparsity(tape.constant_ref(p.log_alpha), p).value().item();
}

/// lambda1 * (s - t) + lambda2 * (s - t)^2.
inline Var lagrangian_penalty(const Var& sparsity, double target, const Var& lambda1, const Var& lambda2) {
  const Var gap = affine(sparsity, 1.0, -target);
  return add(mul(lambda1, gap), mul(lambda2, mul(gap, gap)));
}

inline double lagrangian_penalty(double sparsity, double target, double lambda1, double lambda2) {
  const double gap = sparsity - target;
  return lambda1 * gap + lambda2 * gap * gap;
}

/// Target sparsity ramps linearly from 0 to `final_target` over `warmup_steps`.
struct SparsitySchedule {
  std::size_t warmup_steps = 800;
  double final_target = 0.5;
  std::size_t total_steps = 1000;

  void validate() const {
    detail::require_config(warmup_steps <= total_steps, "sparsity warmup exceeds total steps");
    detail::require_config(final_target >= 0.0 && final_target <= 1.0, "final target must lie in [0, 1]");
  }
};

inline double target_at(const SparsitySchedule& s, std::size_t step) {
  if (step > s.total_steps) throw ContractError("target_at: step beyond schedule");
  if (s.warmup_steps == 0) return s.final_target;
  return s.final_target * std::min(1.0, static_cast<double>(step) / static_cast<double>(s.warmup_steps));
}

/// Marks the floor(head_sparsity * L * H) gates with the smallest scores as
/// streaming and the rest as full. Ties go to the lower (layer, head) index.
inline HeadModes discretize(const Array& log_alpha, double head_sparsity) {
  if (log_alpha.rank() != 2) throw ConfigError("discretize: scores must be [layers, heads]");
  if (!(head_sparsity >= 0.0 && head_sparsity <= 1.0)) throw ContractError("discretize: sparsity must lie in [0, 1]");
  const std::size_t L = log_alpha.shape()[0], H = log_alpha.shape()[1], n = L * H;
  const auto k = static_cast<std::size_t>(std::floor(head_sparsity * static_cast<double>(n) + 1e-9));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return log_alpha[a] < log_alpha[b]; });
  HeadModes modes(L, H, HeadKind::Full);
  for (std::size_t i = 0; i < std::min(k, n); ++i) modes.set(order[i] / H, order[i] % H, HeadKind::Streaming);
  return modes;
}

// Gate checkpoint: a header line, the scalar parameters, then one
// "<layer> <head> <log_alpha>" line per gate.

inline void save_gates(const GateParams& p, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write gate checkpoint " + path.string());
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  os << "kvlab-gates 1\n";
  os << "shape " << p.layers() << ' ' << p.heads() << '\n';
  os << "temperature " << num(p.temperature) << '\n';
  os << "stretch " << num(p.stretch_low) << ' ' << num(p.stretch_high) << '\n';
  os << "epsilon " << num(p.epsilon) << '\n';
  os << "lambda " << num(p.lambda1) << ' ' << num(p.lambda2) << '\n';
  os << "target " << num(p.target) << '\n';
  for (std::size_t l = 0; l < p.layers(); ++l)
    for (std::size_t h = 0; h < p.heads(); ++h) os << l << ' ' << h << ' ' << num(p.log_alpha.at(l, h)) << '\n';
  if (!os) throw IoError("write failed for " + path.string());
}

inline GateParams load_gates(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open gate checkpoint " + path.string());
  std::string word;
  std::getline(is, word);
  if (word != "kvlab-gates 1") throw IoError(path.string() + ": not a gate checkpoint");
  GateParams p;
  std::size_t L = 0, H = 0;
  std::string lo, hi, a, b;
  is >> word >> L >> H;
  p.log_alpha = Array(Shape{L, H});
  is >> word >> a;
  p.temperature = std::strtod(a.c_str(), nullptr);
  is >> word >> lo >> hi;
  p.stretch_low = std::strtod(lo.c_str(), nullptr);
  p.stretch_high = std::strtod(hi.c_str(), nullptr);
  is >> word >> a;
  p.epsilon = std::strtod(a.c_str(), nullptr);
  is >> word >> a >> b;
  p.lambda1 = std::strtod(a.c_str(), nullptr);
  p.lambda2 = std::strtod(b.c_str(), nullptr);
  is >> word >> a;
  p.target = std::strtod(a.c_str(), nullptr);
  for (std::size_t i = 0; i < L * H; ++i) {
    std::size_t l = 0, h = 0;
    if (!(is >> l >> h >> a) || l >= L || h >= H) throw IoError(path.string() + ": bad gate line");
    p.log_alpha.at(l, h) = std::strtod(a.c_str(), nullptr);
  }
  p.validate();
  return p;
}

/// "layer,head,mode" table with modes "full" or "streaming".
inline void save_mask_table(const HeadModes& modes, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write mask table " + path.string());
  os << "layer,head,mode\n";
  for (std::size_t l = 0; l < modes.layers(); ++l)
    for (std::size_t h = 0; h < modes.heads(); ++h)
      os << l << ',' << h << ',' << (modes.at(l, h) == HeadKind::Streaming ? "streaming" : "full") << '\n';
}

inline HeadModes load_mask_table(const std::filesystem::path& path, std::size_t layers, std::size_t heads) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open mask table " + path.string());
  std::string line;
  std::getline(is, line);
  HeadModes modes(layers, heads);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string l, h, m;
    std::getline(ls, l, ',');
    std::getline(ls, h, ',');
    std::getline(ls, m);
    modes.set(std::stoul(l), std::stoul(h), m == "streaming" ? HeadKind::Streaming : HeadKind::Full);
  }
  return modes;
}

}  // namespace kvlab
