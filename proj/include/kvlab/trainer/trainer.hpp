#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kvlab/data/generators.hpp"
#include "kvlab/errors.hpp"
#include "kvlab/gates/hard_concrete.hpp"
#include "kvlab/model/transformer.hpp"
#include "kvlab/tensor/ops.hpp"

namespace kvlab {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LossMode { PlainLM, PruLong, Duo };

struct TrainConfig {
  std::size_t steps = 500;
  std::size_t batch_size = 1;
  std::size_t seq_len = 256;
  /// 0 keeps the model weights frozen.
  double lr_weights = 0.0;
  double lr_log_alpha = 1.0;
  double lr_lambda = 1.0;
  double lr_duo = 0.02;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double warmup_fraction = 0.1;
  double final_fraction = 0.01;
  SparsitySchedule sparsity;
  double init_log_alpha = 2.0;
  std::uint64_t seed = 0;
  LossMode mode = LossMode::PruLong;
  /// Global-norm clip for weights and log_alpha; 0 disables.
  double grad_clip = 1.0;
  double duo_l1 = 0.01;
  StreamingSpec streaming;

  void validate() const {
    detail::require_config(steps >= 1, "steps must be >= 1");
    detail::require_config(batch_size >= 1, "batch_size must be >= 1");
    detail::require_config(seq_len >= 2, "seq_len must be >= 2");
    detail::require_config(warmup_fraction >= 0.0 && warmup_fraction <= 1.0, "warmup_fraction must lie in [0, 1]");
    detail::require_config(final_fraction >= 0.0 && final_fraction <= 1.0, "final_fraction must lie in [0, 1]");
    detail::require_config(lr_weights >= 0.0 && lr_log_alpha >= 0.0 && lr_lambda >= 0.0, "learning rates must be >= 0");
    streaming.validate();
  }
};

/// Learning-rate multiplier: linear warmup from 0 to 1, then linear decay
/// to `final_fraction` at the last step.
inline double lr_at(const TrainConfig& c, std::size_t step) {
  if (step > c.steps) throw ContractError("lr_at: step beyond schedule");
  const double warm = c.warmup_fraction * static_cast<double>(c.steps);
  const double s = static_cast<double>(step);
  if (warm > 0.0 && s <= warm) return s / warm;
  const double rest = static_cast<double>(c.steps) - warm;
  if (rest <= 0.0) return 1.0;
  return 1.0 - (1.0 - c.final_fraction) * (s - warm) / rest;
}

struct AdamState {
  Array m, v;
  std::size_t t = 0;
};

/// One Adam update. `ascent` moves along the gradient instead of against it.
inline void adam_update(Array& param, const Array& grad, AdamState& s, double lr, const TrainConfig& c,
                        bool ascent = false) {
  if (s.m.shape() != param.shape()) {
    s.m = Array(param.shape());
    s.v = Array(param.shape());
    s.t = 0;
  }
  ++s.t;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.t));
  const double sign = ascent ? 1.0 : -1.0;
  for (std::size_t i = 0; i < param.size(); ++i) {
    s.m[i] = c.beta1 * s.m[i] + (1.0 - c.beta1) * grad[i];
    s.v[i] = c.beta2 * s.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
    param[i] += sign * lr * (s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + c.adam_eps);
  }
}

/// Scales every gradient so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_global_norm(std::span<Array* const> grads, double max_norm) {
  double sq = 0.0;
  for (const Array* g : grads)
    for (double v : g->values()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (Array* g : grads)
      for (double& v : g->values()) v *= f;
  }
  return norm;
}

/// Mean next-token negative log-likelihood.
inline Var next_token_nll(const Var& logits, std::span<const std::size_t> targets) {
  return cross_entropy_mean(logits, targets);
}

struct TrainLog {
  std::size_t step = 0;
  double nll = 0.0;
  double expected_sparsity = 0.0;
  double target = 0.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
};

/// Training curves as CSV: step,nll,expected_sparsity,target,lambda1,lambda2.
class MetricsCsv {
 public:
  explicit MetricsCsv(const std::filesystem::path& path) : os_(path), path_(path) {
    if (!os_) throw IoError("cannot write metrics " + path.string());
    os_ << "step,nll,expected_sparsity,target,lambda1,lambda2\n";
  }
  void operator()(const TrainLog& l) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g,%.10g,%.10g\n", l.step, l.nll, l.expected_sparsity, l.target,
                  l.lambda1, l.lambda2);
    os_ << buf;
    os_.flush();
  }

 private:
  std::ofstream os_;
  std::filesystem::path path_;
};

using MetricsSink = std::function<void(const TrainLog&)>;
using SequenceSource = std::function<Tokens(Rng&)>;

namespace detail {

inline std::vector<Var> flatten(const BoundWeights& b) {
  std::vector<Var> out{b.embedding};
  for (const auto& l : b.layers) {
    out.insert(out.end(), {l.wq, l.wk, l.wv, l.wo});
    if (l.w1.valid()) out.insert(out.end(), {l.w1, l.w2});
  }
  out.push_back(b.unembedding);
  return out;
}

struct LmTerms {
  std::vector<std::size_t> inputs, targets, positions;
};

inline LmTerms lm_terms(std::span<const std::size_t> seq) {
  if (seq.size() < 2) throw ConfigError("training sequence needs at least two tokens");
  LmTerms t;
  t.inputs.assign(seq.begin(), seq.end() - 1);
  t.targets.assign(seq.begin() + 1, seq.end());
  for (std::size_t i = 0; i + 1 < seq.size(); ++i) t.positions.push_back(i);
  return t;
}

inline void check_finite(double loss, std::size_t step) {
  if (!std::isfinite(loss)) {
    throw TrainingError("training diverged at step " + std::to_string(step) + ": loss is " + std::to_string(loss));
  }
}

inline void accumulate(Array& into, const Array& g) {
  if (into.shape() != g.shape()) into = Array(g.shape());
  for (std::size_t i = 0; i < g.size(); ++i) into[i] += g[i];
}

}  // namespace detail

/// Mean next-token NLL of `seq` under `modes` (no gates).
inline double evaluate_nll(const Model& model, std::span<const std::size_t> seq, const HeadModes& modes,
                           const StreamingSpec& streaming) {
  Tape tape(false);
  const auto terms = detail::lm_terms(seq);
  const BoundWeights w = bind_weights(tape, model.weights, false);
  const KVCache empty(model.config);
  ForwardRequest req{terms.inputs, terms.positions, &modes, streaming, std::nullopt, false};
  return next_token_nll(forward_core(tape, model.config, w, empty, req).logits, terms.targets).value().item();
}

/// Stepwise plain language-model training of every weight.
class LmTrainer {
 public:
  LmTrainer(Model model, const TrainConfig& c)
      : model_(std::move(model)), c_(c), rng_(make_rng(c.seed, 1)),
        modes_(HeadModes::all(model_.config, HeadKind::Full)), empty_(model_.config) {
    c_.validate();
    if (c_.lr_weights <= 0.0) throw ConfigError("pretrain_lm: lr_weights must be positive");
    opt_.resize(model_.weights.named().size());
  }

  TrainLog step(const SequenceSource& source) {
    const auto params = model_.weights.named();
    std::vector<Array> grads(params.size());
    double nll = 0.0;
    for (std::size_t b = 0; b < c_.batch_size; ++b) {
      const Tokens seq = source(rng_);
      const auto terms = detail::lm_terms(seq);
      Tape tape;
      const BoundWeights w = bind_weights(tape, model_.weights, true);
      ForwardRequest req{terms.inputs, terms.positions, &modes_, c_.streaming, std::nullopt, false};
      const Var loss = next_token_nll(forward_core(tape, model_.config, w, empty_, req).logits, terms.targets);
      nll += loss.value().item() / static_cast<double>(c_.batch_size);
      const Gradients g = tape.backward(scale(loss, 1.0 / static_cast<double>(c_.batch_size)));
      const auto vars = detail::flatten(w);
      for (std::size_t i = 0; i < vars.size(); ++i)
        if (g.has(vars[i])) detail::accumulate(grads[i], g.of(vars[i]));
    }
    detail::check_finite(nll, step_);
    std::vector<Array*> gp;
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (grads[i].shape() != params[i].second->shape()) grads[i] = Array(params[i].second->shape());
      gp.push_back(&grads[i]);
    }
    clip_global_norm(gp, c_.grad_clip);
    const double lr = c_.lr_weights * lr_at(c_, std::min(step_ + 1, c_.steps));
    for (std::size_t i = 0; i < params.size(); ++i) adam_update(*params[i].second, grads[i], opt_[i], lr, c_);
    return TrainLog{step_++, nll, 0.0, 0.0, 0.0, 0.0};
  }

  const Model& model() const { return model_; }
  Model& model() { return model_; }
  std::size_t steps_done() const { return step_; }

 private:
  Model model_;
  TrainConfig c_;
  Rng rng_;
  HeadModes modes_;
  KVCache empty_;
  std::vector<AdamState> opt_;
  std::size_t step_ = 0;
};

/// Plain language-model training for `c.steps` steps.
inline Model pretrain_lm(Model model, const TrainConfig& c, const SequenceSource& source, const MetricsSink& sink = {}) {
  if (c.steps == 0) return model;
  LmTrainer trainer(std::move(model), c);
  for (std::size_t s = 0; s < c.steps; ++s) {
    const TrainLog log = trainer.step(source);
    if (sink) sink(log);
  }
  return std::move(trainer.model());
}

struct PruLongState {
  GateParams gates;
  AdamState alpha_opt, lambda1_opt, lambda2_opt;
  std::vector<AdamState> weight_opt;
  std::size_t step = 0;

  /// Fresh gates at c.init_log_alpha; sampler settings come from `proto`.
  static PruLongState init(const ModelConfig& config, const TrainConfig& c, const GateParams& proto = {}) {
    PruLongState s;
    s.gates = proto;
    s.gates.log_alpha = Array(Shape{config.num_layers, config.num_query_heads}, c.init_log_alpha);
    s.gates.lambda1 = s.gates.lambda2 = s.gates.target = 0.0;
    s.gates.validate();
    return s;
  }
};

/// One min-max step: descent on log_alpha (and weights when unfrozen),
/// ascent on the Lagrange multipliers.
inline TrainLog prulong_step(Model& model, PruLongState& st, std::span<const Tokens> batch, const TrainConfig& c,
                             Rng& rng) {
  if (batch.empty()) throw ContractError("prulong_step: empty batch");
  GateParams& gp = st.gates;
  const std::size_t t = st.step + 1;
  const double target = target_at(c.sparsity, std::min(t, c.sparsity.total_steps));
  gp.target = target;
  const Array u = draw_gate_noise(gp.log_alpha.shape(), gp.epsilon, rng);
  const HeadModes modes = HeadModes::all(model.config, HeadKind::Gated);
  const bool train_weights = c.lr_weights > 0.0;
  const KVCache empty(model.config);

  Array alpha_grad(gp.log_alpha.shape());
  const auto params = model.weights.named();
  std::vector<Array> wgrads(train_weights ? params.size() : 0);
  double nll = 0.0;
  for (const Tokens& seq : batch) {
    const auto terms = detail::lm_terms(seq);
    Tape tape;
    const Var alpha = tape.leaf_ref(gp.log_alpha, true);
    const Var z = hard_concrete(alpha, u, gp);
    const BoundWeights w = bind_weights(tape, model.weights, train_weights);
    ForwardRequest req{terms.inputs, terms.positions, &modes, c.streaming, z, false};
    const Var loss = next_token_nll(forward_core(tape, model.config, w, empty, req).logits, terms.targets);
    nll += loss.value().item() / static_cast<double>(batch.size());
    const Gradients g = tape.backward(scale(loss, 1.0 / static_cast<double>(batch.size())));
    if (g.has(alpha)) detail::accumulate(alpha_grad, g.of(alpha));
    if (train_weights) {
      const auto vars = detail::flatten(w);
      for (std::size_t i = 0; i < vars.size(); ++i)
        if (g.has(vars[i])) detail::accumulate(wgrads[i], g.of(vars[i]));
    }
  }
  detail::check_finite(nll, st.step);

  Tape pt;
  const Var alpha = pt.leaf_ref(gp.log_alpha, true);
  const Var l1 = pt.leaf(Array::scalar(gp.lambda1), true);
  const Var l2 = pt.leaf(Array::scalar(gp.lambda2), true);
  const Var s = expected_sparsity(alpha, gp);
  const Gradients pg = pt.backward(lagrangian_penalty(s, target, l1, l2));
  detail::accumulate(alpha_grad, pg.of(alpha));
  const Array g1 = pg.of(l1), g2 = pg.of(l2);

  std::vector<Array*> clipped{&alpha_grad};
  for (std::size_t i = 0; i < wgrads.size(); ++i) {
    if (wgrads[i].shape() != params[i].second->shape()) wgrads[i] = Array(params[i].second->shape());
    clipped.push_back(&wgrads[i]);
  }
  clip_global_norm(clipped, c.grad_clip);

  const double mult = lr_at(c, std::min(t, c.steps));
  adam_update(gp.log_alpha, alpha_grad, st.alpha_opt, c.lr_log_alpha * mult, c);
  Array lam1 = Array::scalar(gp.lambda1), lam2 = Array::scalar(gp.lambda2);
  adam_update(lam1, g1, st.lambda1_opt, c.lr_lambda * mult, c, true);
  adam_update(lam2, g2, st.lambda2_opt, c.lr_lambda * mult, c, true);
  gp.lambda1 = lam1.item();
  gp.lambda2 = lam2.item();
  if (train_weights) {
    st.weight_opt.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
      adam_update(*params[i].second, wgrads[i], st.weight_opt[i], c.lr_weights * mult, c);
  }
  ++st.step;
  return TrainLog{st.step, nll, s.value().item(), target, gp.lambda1, gp.lambda2};
}

/// Full PruLong run from fresh gates.
inline PruLongState train_prulong(Model& model, const TrainConfig& c, const SequenceSource& source,
                                  const MetricsSink& sink = {}, const GateParams& proto = {}) {
  c.validate();
  c.sparsity.validate();
  Rng data_rng = make_rng(c.seed, 2);
  Rng gate_rng = make_rng(c.seed, 3);
  PruLongState st = PruLongState::init(model.config, c, proto);
  for (std::size_t step = 0; step < c.steps; ++step) {
    std::vector<Tokens> batch;
    for (std::size_t b = 0; b < c.batch_size; ++b) batch.push_back(source(data_rng));
    const TrainLog log = prulong_step(model, st, batch, c, gate_rng);
    if (sink) sink(log);
  }
  return st;
}

struct DuoState {
  Array z;  // [L, H] in [0, 1]
  AdamState opt;
  std::size_t step = 0;

  static DuoState init(const ModelConfig& config) {
    return DuoState{Array(Shape{config.num_layers, config.num_query_heads}, 1.0), {}, 0};
  }
};

/// Reconstruction step: MSE between the final hidden states of the
/// all-full model and the z-interpolated model, plus duo_l1 * sum(z).
/// Only z moves; it is clamped to [0, 1] afterwards.
inline TrainLog duo_step(const Model& model, DuoState& st, std::span<const Tokens> batch, const TrainConfig& c) {
  if (batch.empty()) throw ContractError("duo_step: empty batch");
  const HeadModes full = HeadModes::all(model.config, HeadKind::Full);
  const HeadModes gated = HeadModes::all(model.config, HeadKind::Gated);
  const KVCache empty(model.config);
  Array grad(st.z.shape());
  double mse_total = 0.0;
  for (const Tokens& seq : batch) {
    const auto terms = detail::lm_terms(seq);
    Array reference;
    {
      Tape ref(false);
      const BoundWeights w = bind_weights(ref, model.weights, false);
      ForwardRequest req{terms.inputs, terms.positions, &full, c.streaming, std::nullopt, false};
      reference = forward_core(ref, model.config, w, empty, req).final_hidden.value();
    }
    Tape tape;
    const Var z = tape.leaf_ref(st.z, true);
    const BoundWeights w = bind_weights(tape, model.weights, false);
    ForwardRequest req{terms.inputs, terms.positions, &gated, c.streaming, z, false};
    const Var diff = sub(forward_core(tape, model.config, w, empty, req).final_hidden, tape.constant(std::move(reference)));
    const Var mse = mean_all(mul(diff, diff));
    mse_total += mse.value().item() / static_cast<double>(batch.size());
    const Gradients g = tape.backward(scale(mse, 1.0 / static_cast<double>(batch.size())));
    if (g.has(z)) detail::accumulate(grad, g.of(z));
  }
  detail::check_finite(mse_total, st.step);
  double l1 = 0.0;
  for (std::size_t i = 0; i < st.z.size(); ++i) {
    l1 += std::abs(st.z[i]);
    if (st.z[i] > 0.0) grad[i] += c.duo_l1;
  }
  const std::size_t t = st.step + 1;
  adam_update(st.z, grad, st.opt, c.lr_duo * lr_at(c, std::min(t, c.steps)), c);
  for (double& v : st.z.values()) v = std::clamp(v, 0.0, 1.0);
  ++st.step;
  double mean_z = 0.0;
  for (double v : st.z.values()) mean_z += v;
  mean_z /= static_cast<double>(st.z.size());
  return TrainLog{st.step, mse_total + c.duo_l1 * l1, 1.0 - mean_z, 0.0, 0.0, 0.0};
}

inline DuoState train_duo(const Model& model, const TrainConfig& c, const SequenceSource& source,
                          const MetricsSink& sink = {}) {
  c.validate();
  Rng data_rng = make_rng(c.seed, 4);
  DuoState st = DuoState::init(model.config);
  for (std::size_t step = 0; step < c.steps; ++step) {
    std::vector<Tokens> batch;
    for (std::size_t b = 0; b < c.batch_size; ++b) batch.push_back(source(data_rng));
    const TrainLog log = duo_step(model, st, batch, c);
    if (sink) sink(log);
  }
  return st;
}

}  // namespace kvlab
