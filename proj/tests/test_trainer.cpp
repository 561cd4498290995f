#include <cmath>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "kvlab/kvlab.hpp"
#include "support.hpp"

using namespace kvlab;
using kvlab::testing::random_tokens;
using kvlab::testing::tiny_config;

namespace {

SequenceSource random_source(std::size_t n, std::size_t vocab) {
  return [n, vocab](Rng& rng) {
    Tokens t(n);
    for (auto& x : t) x = rng() % vocab;
    return t;
  };
}

TrainConfig prulong_config(std::size_t steps) {
  TrainConfig c;
  c.steps = steps;
  c.batch_size = 2;
  c.sparsity = SparsitySchedule{steps / 2, 0.5, steps};
  c.streaming = StreamingSpec{1, 3};
  return c;
}

}  // namespace

TEST(Trainer, LearningRateSchedule) {
  TrainConfig c;
  c.steps = 1000;
  EXPECT_EQ(lr_at(c, 0), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(c, 50), 0.5);
  EXPECT_DOUBLE_EQ(lr_at(c, 100), 1.0);
  EXPECT_NEAR(lr_at(c, 1000), 0.01, 1e-15);
  EXPECT_NEAR(lr_at(c, 550), 0.505, 1e-12);
  EXPECT_THROW(lr_at(c, 1001), ContractError);
}

TEST(Trainer, NllOfUniformLogitsIsLogVocab) {
  Tape t;
  const std::vector<std::size_t> targets{0, 3, 6};
  EXPECT_NEAR(next_token_nll(t.constant(Array(Shape{3, 7}, 0.25)), targets).value().item(), std::log(7.0), 1e-14);
  Array sharp(Shape{2, 5}, 0.0);
  sharp.at(0, 1) = sharp.at(1, 4) = 60.0;
  const std::vector<std::size_t> right{1, 4};
  EXPECT_LT(next_token_nll(t.constant(sharp), right).value().item(), 1e-20);
}

TEST(Trainer, NllMatchesDirectLogSoftmax) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> d(0, 2);
  Array logits(Shape{6, 9});
  for (double& v : logits.values()) v = d(rng);
  std::vector<std::size_t> targets(6);
  for (auto& x : targets) x = rng() % 9;
  double expected = 0.0;
  for (std::size_t r = 0; r < 6; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < 9; ++c) z += std::exp(logits.at(r, c));
    expected += (std::log(z) - logits.at(r, targets[r])) / 6.0;
  }
  Tape t;
  EXPECT_NEAR(next_token_nll(t.constant(logits), targets).value().item(), expected, 1e-12);
}

TEST(Trainer, ZeroGradientLeavesParametersUnchanged) {
  TrainConfig c;
  Array p(Shape{3}, std::vector<double>{1.0, -2.0, 0.5});
  const Array before = p;
  AdamState s;
  adam_update(p, Array(Shape{3}), s, 0.1, c);
  EXPECT_EQ(p, before);
}

TEST(Trainer, LambdaAscentRaisesLambdaWhenAboveTarget) {
  // Gates start mostly closed, so s > t and the ascent step must raise lambda.
  const Model m = make_model(tiny_config(), 1, 0.3);
  TrainConfig c = prulong_config(10);
  c.init_log_alpha = -6.0;
  PruLongState st = PruLongState::init(m.config, c);
  Model copy = m;
  auto rng = make_rng(0);
  const std::vector<Tokens> batch{random_tokens(8, 20, 1)};
  const TrainLog log = prulong_step(copy, st, batch, c, rng);
  EXPECT_GT(log.expected_sparsity, log.target);
  EXPECT_GT(st.gates.lambda1, 0.0);
  EXPECT_GT(st.gates.lambda2, 0.0);
}

TEST(Trainer, FrozenLambdaRateKeepsLambda) {
  const Model m = make_model(tiny_config(), 2, 0.3);
  TrainConfig c = prulong_config(10);
  c.lr_lambda = 0.0;
  PruLongState st = PruLongState::init(m.config, c);
  st.gates.lambda1 = 0.7;
  st.gates.lambda2 = -0.2;
  Model copy = m;
  auto rng = make_rng(0);
  const std::vector<Tokens> batch{random_tokens(8, 20, 2)};
  for (int i = 0; i < 3; ++i) prulong_step(copy, st, batch, c, rng);
  EXPECT_EQ(st.gates.lambda1, 0.7);
  EXPECT_EQ(st.gates.lambda2, -0.2);
}

TEST(Trainer, AllRatesZeroChangesNothing) {
  const Model m = make_model(tiny_config(), 3, 0.3);
  TrainConfig c = prulong_config(10);
  c.lr_log_alpha = 0.0;
  c.lr_lambda = 0.0;
  PruLongState st = PruLongState::init(m.config, c);
  const GateParams before = st.gates;
  Model copy = m;
  auto rng = make_rng(0);
  const std::vector<Tokens> batch{random_tokens(8, 20, 3)};
  prulong_step(copy, st, batch, c, rng);
  EXPECT_EQ(st.gates.log_alpha, before.log_alpha);
  EXPECT_EQ(copy.weights, m.weights);
}

TEST(Trainer, PruLongLeavesFrozenWeightsBitIdentical) {
  const Model m = make_model(tiny_config(), 4, 0.3);
  Model copy = m;
  const TrainConfig c = prulong_config(6);
  const PruLongState st = train_prulong(copy, c, random_source(10, 20));
  EXPECT_EQ(copy.weights, m.weights);
  EXPECT_NE(st.gates.log_alpha, Array(Shape{2, 4}, c.init_log_alpha));
}

TEST(Trainer, PruLongCanTrainWeightsToo) {
  const Model m = make_model(tiny_config(), 5, 0.3);
  Model copy = m;
  TrainConfig c = prulong_config(3);
  c.lr_weights = 1e-3;
  train_prulong(copy, c, random_source(10, 20));
  EXPECT_NE(copy.weights, m.weights);
}

TEST(Trainer, PruLongIsDeterministic) {
  const Model m = make_model(tiny_config(), 6, 0.3);
  Model a = m, b = m;
  const TrainConfig c = prulong_config(5);
  const PruLongState x = train_prulong(a, c, random_source(10, 20));
  const PruLongState y = train_prulong(b, c, random_source(10, 20));
  EXPECT_EQ(x.gates.log_alpha, y.gates.log_alpha);
  EXPECT_EQ(x.gates.lambda1, y.gates.lambda1);
}

TEST(Trainer, PruLongReachesTheTargetOnAToyRun) {
  ModelConfig mc = tiny_config();
  mc.num_layers = 4;
  mc.num_query_heads = 8;
  mc.model_dim = 32;
  Model m = make_model(mc, 7, 0.3);
  TrainConfig c = prulong_config(500);
  c.sparsity = SparsitySchedule{400, 0.5, 500};
  const PruLongState st = train_prulong(m, c, random_source(12, 20));
  EXPECT_NEAR(expected_sparsity(st.gates), 0.5, 0.02);
}

TEST(Trainer, DuoFullGatesReconstructExactly) {
  const Model m = make_model(tiny_config(), 8, 0.3);
  TrainConfig c;
  c.duo_l1 = 0.0;
  c.streaming = StreamingSpec{1, 2};
  DuoState st = DuoState::init(m.config);
  const std::vector<Tokens> batch{random_tokens(12, 20, 4)};
  const TrainLog log = duo_step(m, st, batch, c);
  EXPECT_EQ(log.nll, 0.0);
  EXPECT_EQ(st.z, Array(Shape{2, 4}, 1.0));
}

TEST(Trainer, DuoClosesHeadsThatDoNotMatter) {
  // Heads whose output projection is zero are lossless under streaming.
  Model m = make_model(tiny_config(), 9, 0.3);
  const std::size_t d = m.config.head_dim;
  for (std::size_t h : {0u, 3u})
    for (std::size_t r = h * d; r < (h + 1) * d; ++r)
      for (std::size_t col = 0; col < m.config.model_dim; ++col) m.weights.layers[1].wo.at(r, col) = 0.0;
  TrainConfig c;
  c.steps = 60;
  c.batch_size = 2;
  c.lr_duo = 0.05;
  c.duo_l1 = 1e-3;
  c.streaming = StreamingSpec{1, 2};
  const DuoState st = train_duo(m, c, random_source(16, 20));
  EXPECT_EQ(st.z.at(1, 0), 0.0);
  EXPECT_EQ(st.z.at(1, 3), 0.0);
  for (double v : st.z.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_GT(st.z.at(0, 0) + st.z.at(0, 1) + st.z.at(0, 2) + st.z.at(0, 3), 0.0);
}

TEST(Trainer, PretrainWithZeroStepsReturnsInitialWeights) {
  const Model m = make_model(tiny_config(), 10);
  TrainConfig c;
  c.steps = 0;
  c.lr_weights = 1e-3;
  EXPECT_EQ(pretrain_lm(m, c, random_source(8, 20)).weights, m.weights);
}

TEST(Trainer, PretrainLowersLossOnAFixedSeed) {
  ModelConfig mc = tiny_config(16);
  const Model m = make_model(mc, 11, 0.125);
  const Vocabulary v{20, 4};
  const RecallOptions ro{32, 4, 2, 1.0};
  auto src = [&](Rng& r) { return gen_recall_corpus(ro, v, r); };
  std::vector<Tokens> held;
  for (std::uint64_t i = 0; i < 8; ++i) {
    auto r = make_rng(99, i);
    held.push_back(src(r));
  }
  const HeadModes full = HeadModes::all(mc, HeadKind::Full);
  auto eval = [&](const Model& model) {
    double s = 0.0;
    for (const auto& t : held) s += evaluate_nll(model, t, full, {});
    return s / 8.0;
  };
  TrainConfig c;
  c.steps = 50;
  c.batch_size = 4;
  c.lr_weights = 3e-3;
  EXPECT_LT(eval(pretrain_lm(m, c, src)), eval(m));
}

TEST(Trainer, ReloadedCheckpointReproducesEvalLoss) {
  const Model m = make_model(tiny_config(), 12, 0.3);
  const auto path = std::filesystem::temp_directory_path() / "kvlab_trainer_ckpt.txt";
  save_model(m, path);
  const Tokens t = random_tokens(16, 20, 5);
  const HeadModes full = HeadModes::all(m.config, HeadKind::Full);
  EXPECT_NEAR(evaluate_nll(load_model(path), t, full, {}), evaluate_nll(m, t, full, {}), 1e-12);
  std::filesystem::remove(path);
}

TEST(Trainer, DivergenceAborts) {
  Model m = make_model(tiny_config(), 13);
  m.weights.unembedding[0] = std::nan("");
  TrainConfig c;
  c.steps = 2;
  c.lr_weights = 1e-3;
  EXPECT_THROW(pretrain_lm(m, c, random_source(8, 20)), TrainingError);
}
