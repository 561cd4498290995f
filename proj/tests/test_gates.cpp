#include <cmath>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "kvlab/kvlab.hpp"

using namespace kvlab;

namespace {

// Sampler without the library: draw u, push it through the stretched,
// clamped logistic by hand.
double reference_gate(double log_alpha, double u, double tau, double lo, double hi) {
  const double s = 1.0 / (1.0 + std::exp(-(std::log(u / (1.0 - u)) + log_alpha) / tau));
  return std::clamp(lo + s * (hi - lo), 0.0, 1.0);
}

}  // namespace

TEST(Gates, SaturatedLogAlphaGivesHardGates) {
  Tape t;
  const GateParams p = GateParams::uniform(1, 3);
  const Array u(Shape{1, 3}, std::vector<double>{1e-6, 0.5, 1.0 - 1e-6});
  EXPECT_EQ(hard_concrete(t.constant(Array(Shape{1, 3}, 1e9)), u, p).value(), Array(Shape{1, 3}, 1.0));
  EXPECT_EQ(hard_concrete(t.constant(Array(Shape{1, 3}, -1e9)), u, p).value(), Array(Shape{1, 3}, 0.0));
}

TEST(Gates, MidpointNoiseGivesHalf) {
  Tape t;
  const GateParams p = GateParams::uniform(1, 1);
  const Array z = hard_concrete(t.constant(Array(Shape{1, 1}, 0.0)), Array(Shape{1, 1}, 0.5), p).value();
  EXPECT_NEAR(z[0], 0.5, 1e-15);
}

TEST(Gates, SamplerMatchesHandWrittenChain) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> ud(1e-6, 1 - 1e-6), ad(-4, 4);
  GateParams p = GateParams::uniform(4, 5);
  for (double& a : p.log_alpha.values()) a = ad(rng);
  Array u(Shape{4, 5});
  for (double& v : u.values()) v = ud(rng);
  Tape t;
  const Array z = hard_concrete(t.constant(p.log_alpha), u, p).value();
  for (std::size_t i = 0; i < z.size(); ++i)
    EXPECT_NEAR(z[i], reference_gate(p.log_alpha[i], u[i], 1.5, -0.1, 1.1), 1e-14);
}

TEST(Gates, ProbActiveWorkedValues) {
  GateParams p = GateParams::uniform(1, 3);
  p.log_alpha[0] = 1.5 * std::log(0.1 / 1.1);
  p.log_alpha[1] = 0.0;
  p.log_alpha[2] = -1e9;
  const Array a = prob_active(p);
  EXPECT_NEAR(a[0], 0.5, 1e-15);
  EXPECT_NEAR(a[1], 0.9733, 5e-5);
  EXPECT_EQ(a[2], 0.0);
}

TEST(Gates, ProbActiveAgreesWithMonteCarlo) {
  // One million hand-chain draws at log_alpha = 0.
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> ud(1e-6, 1 - 1e-6);
  const int n = 1000000;
  int active = 0;
  for (int i = 0; i < n; ++i) active += reference_gate(0.0, ud(rng), 1.5, -0.1, 1.1) > 0.0;
  const double closed = prob_active(GateParams::uniform(1, 1))[0];
  EXPECT_NEAR(static_cast<double>(active) / n, closed, 0.001);
}

TEST(Gates, SamplerConsistencyOverRandomLogAlpha) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> ad(-3, 3);
  GateParams p = GateParams::uniform(4, 5);
  for (double& a : p.log_alpha.values()) a = ad(rng);
  const Array expected = prob_active(p);
  Array hits(Shape{4, 5}, 0.0);
  bool saw_zero = false, saw_one = false;
  const int n = 100000;
  auto grng = make_rng(1);
  for (int i = 0; i < n; ++i) {
    const Array z = sample_gates(p, grng);
    for (std::size_t g = 0; g < z.size(); ++g) {
      ASSERT_GE(z[g], 0.0);
      ASSERT_LE(z[g], 1.0);
      hits[g] += z[g] > 0.0;
      saw_zero |= z[g] == 0.0;
      saw_one |= z[g] == 1.0;
    }
  }
  for (std::size_t g = 0; g < hits.size(); ++g) EXPECT_NEAR(hits[g] / n, expected[g], 0.01);
  EXPECT_TRUE(saw_zero);
  EXPECT_TRUE(saw_one);
}

TEST(Gates, ExpectedSparsityLimits) {
  GateParams p = GateParams::uniform(2, 2, 1e9);
  EXPECT_NEAR(expected_sparsity(p), 0.0, 1e-15);
  p.log_alpha = Array(Shape{2, 2}, -1e9);
  EXPECT_NEAR(expected_sparsity(p), 1.0, 1e-15);
  p.log_alpha = Array(Shape{2, 2}, std::vector<double>{1e9, -1e9, -1e9, 1e9});
  EXPECT_NEAR(expected_sparsity(p), 0.5, 1e-15);
}

TEST(Gates, ExpectedSparsityGradient) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> d(0, 2);
  GateParams p = GateParams::uniform(3, 4);
  for (double& a : p.log_alpha.values()) a = d(rng);
  const double err = finite_diff_check([&p](Tape&, const Var& x) { return expected_sparsity(x, p); }, p.log_alpha);
  EXPECT_LT(err, 1e-4);
}

TEST(Gates, RaisingOneGateNeverRaisesSparsity) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> d(0, 3);
  for (int trial = 0; trial < 200; ++trial) {
    GateParams p = GateParams::uniform(2, 3);
    for (double& a : p.log_alpha.values()) a = d(rng);
    const double before = expected_sparsity(p);
    p.log_alpha[rng() % 6] += std::abs(d(rng));
    EXPECT_LE(expected_sparsity(p), before);
  }
}

TEST(Gates, LagrangianPenaltyArithmetic) {
  EXPECT_NEAR(lagrangian_penalty(0.6, 0.5, 2.0, 3.0), 0.23, 1e-12);
  EXPECT_EQ(lagrangian_penalty(0.4, 0.4, 7.0, -2.0), 0.0);
  Tape t;
  const Var l1 = t.leaf(Array::scalar(2.0), true), l2 = t.leaf(Array::scalar(3.0), true);
  const Var pen = lagrangian_penalty(t.constant(Array::scalar(0.6)), 0.5, l1, l2);
  const auto g = t.backward(pen);
  EXPECT_NEAR(g.of(l1)[0], 0.1, 1e-12);
  EXPECT_NEAR(g.of(l2)[0], 0.01, 1e-12);
}

TEST(Gates, TargetSchedule) {
  const SparsitySchedule s{800, 0.7, 1000};
  EXPECT_EQ(target_at(s, 0), 0.0);
  EXPECT_NEAR(target_at(s, 400), 0.35, 1e-15);
  EXPECT_EQ(target_at(s, 800), 0.7);
  EXPECT_EQ(target_at(s, 1000), 0.7);
  EXPECT_THROW(target_at(s, 1001), ContractError);
}

TEST(Gates, DiscretizeExamples) {
  const Array la(Shape{2, 2}, std::vector<double>{0.5, -1.0, 2.0, 0.0});
  const HeadModes m = discretize(la, 0.5);
  EXPECT_EQ(m.at(0, 0), HeadKind::Full);
  EXPECT_EQ(m.at(0, 1), HeadKind::Streaming);
  EXPECT_EQ(m.at(1, 0), HeadKind::Full);
  EXPECT_EQ(m.at(1, 1), HeadKind::Streaming);
  EXPECT_EQ(discretize(la, 0.0), HeadModes(2, 2, HeadKind::Full));
  EXPECT_EQ(discretize(la, 1.0), HeadModes(2, 2, HeadKind::Streaming));
  EXPECT_THROW(discretize(la, 1.5), ContractError);
}

TEST(Gates, DiscretizeTiesGoToLowerIndex) {
  const HeadModes m = discretize(Array(Shape{2, 3}, 1.0), 0.5);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(m.at(i / 3, i % 3), i < 3 ? HeadKind::Streaming : HeadKind::Full);
}

TEST(Gates, DiscretizeIgnoresMonotoneTransforms) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> d(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    Array la(Shape{3, 4});
    for (double& v : la.values()) v = d(rng);
    Array squashed = la;
    for (double& v : squashed.values()) v = std::exp(3.0 * v) + 7.0;
    for (double s : {0.0, 0.25, 0.5, 0.75, 1.0}) EXPECT_EQ(discretize(la, s), discretize(squashed, s));
  }
}

TEST(Gates, CheckpointRoundTrip) {
  GateParams p = GateParams::uniform(2, 3, -0.25);
  p.log_alpha[4] = 1.0 / 3.0;
  p.lambda1 = 0.125;
  p.lambda2 = -2.5;
  p.target = 0.4;
  const auto path = std::filesystem::temp_directory_path() / "kvlab_gates_roundtrip.txt";
  save_gates(p, path);
  const GateParams q = load_gates(path);
  EXPECT_EQ(q.log_alpha, p.log_alpha);
  EXPECT_EQ(q.lambda1, p.lambda1);
  EXPECT_EQ(q.lambda2, p.lambda2);
  EXPECT_EQ(q.target, p.target);
  std::filesystem::remove(path);
}

TEST(Gates, InvalidParamsAreRejected) {
  GateParams p = GateParams::uniform(1, 1);
  p.stretch_high = 1.0;
  EXPECT_THROW(p.validate(), ConfigError);
  p = GateParams::uniform(1, 1);
  p.temperature = 0.0;
  EXPECT_THROW(p.validate(), ConfigError);
}
