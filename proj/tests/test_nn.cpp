#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "fedcada/nn.hpp"
#include "oracles.hpp"

using namespace fedcada;

namespace {

Batch random_batch(const MlpSpec& spec, int n, std::mt19937_64& gen) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Batch b;
  b.features.resize(n, spec.input_dim());
  for (Eigen::Index i = 0; i < b.features.size(); ++i) b.features.data()[i] = nd(gen);
  std::uniform_int_distribution<int> lab(0, spec.num_classes() - 1);
  for (int i = 0; i < n; ++i) b.labels.push_back(lab(gen));
  return b;
}

// Relative error with a small floor so near-zero coordinates do not dominate.
double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

}  // namespace

TEST(MlpSpec, ParamCountAndManifest) {
  MlpSpec spec(4, 8, 8, 3);
  EXPECT_EQ(spec.param_count(), std::size_t(4 * 8 + 8 + 8 * 8 + 8 + 8 * 3 + 3));
  std::size_t covered = 0;
  for (const auto& s : spec.manifest()) {
    EXPECT_EQ(s.offset, covered);
    covered += s.size();
  }
  EXPECT_EQ(covered, spec.param_count());
  EXPECT_THROW(MlpSpec(4, 0, 8, 3), ConfigError);
}

TEST(InitParams, DeterministicWithZeroBiases) {
  MlpSpec spec(4, 8, 8, 3);
  const auto a = init_params(spec, 7);
  const auto b = init_params(spec, 7);
  EXPECT_EQ(a.values, b.values);
  for (const auto& s : a.manifest) {
    if (s.kind != SegmentKind::Bias) continue;
    for (double v : a.segment(s)) EXPECT_EQ(v, 0.0);
  }
  const auto c = init_params(spec, 8);
  EXPECT_NE(a.values, c.values);
}

TEST(InitParams, HeScale) {
  MlpSpec spec(400, 300, 10, 2);
  const auto p = init_params(spec, 1);
  const auto seg = p.segment(p.manifest[0]);
  double ss = 0.0;
  for (double w : seg) ss += w * w;
  EXPECT_NEAR(std::sqrt(ss / double(seg.size())), std::sqrt(2.0 / 400.0), 0.002);
}

TEST(LossAndGrad, UniformLogitsGiveLogClasses) {
  MlpSpec spec(4, 8, 8, 3);
  Batch b;
  b.features = RowMatrix::Zero(2, 4);
  b.labels = {0, 2};
  const auto lg = loss_and_grad(spec, ParamVector::zeros(spec), b);
  EXPECT_NEAR(lg.loss, std::log(3.0), 1e-15);
  EXPECT_NEAR(lg.loss, 1.0986123, 1e-7);
}

TEST(LossAndGrad, MatchesFiniteDifferences) {
  std::mt19937_64 gen(3);
  MlpSpec spec(4, 8, 8, 3);
  const auto p = init_params(spec, 11);
  const Batch b = random_batch(spec, 5, gen);
  const auto lg = loss_and_grad(spec, p, b);
  const auto rows = oracle::rows_of(b.features);
  EXPECT_NEAR(lg.loss, oracle::mlp_loss(spec.dims(), p.values, rows, b.labels), 1e-12);
  std::uniform_int_distribution<std::size_t> coord(0, p.size() - 1);
  double worst = 0.0;
  for (int k = 0; k < 20; ++k) {
    const std::size_t i = coord(gen);
    worst = std::max(worst, rel_err(lg.grad.values[i], oracle::mlp_loss_fd(spec.dims(), p.values, rows, b.labels, i, 1e-5)));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(LossAndGrad, DuplicatedRowsLeaveMeanUnchanged) {
  std::mt19937_64 gen(5);
  MlpSpec spec(4, 8, 8, 3);
  const auto p = init_params(spec, 2);
  const Batch b = random_batch(spec, 4, gen);
  Batch d;
  d.features.resize(8, 4);
  d.features << b.features, b.features;
  d.labels = b.labels;
  d.labels.insert(d.labels.end(), b.labels.begin(), b.labels.end());
  const auto l1 = loss_and_grad(spec, p, b);
  const auto l2 = loss_and_grad(spec, p, d);
  EXPECT_NEAR(l1.loss, l2.loss, 1e-14);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(l1.grad.values[i], l2.grad.values[i], 1e-14);
  EXPECT_EQ(l1.grad.manifest, p.manifest);
}

TEST(LossAndGrad, RejectsMismatchedParams) {
  MlpSpec spec(4, 8, 8, 3);
  auto p = ParamVector::zeros(MlpSpec(4, 8, 7, 3));
  Batch b;
  b.features = RowMatrix::Zero(1, 4);
  b.labels = {0};
  EXPECT_THROW(loss_and_grad(spec, p, b), ConfigError);
  b.labels = {3};
  EXPECT_THROW(loss_and_grad(spec, ParamVector::zeros(spec), b), ConfigError);
}

TEST(Softmax, RowsSumToOneAndLossNonNegative) {
  std::mt19937_64 gen(9);
  for (int trial = 0; trial < 20; ++trial) {
    MlpSpec spec(5, 6, 7, 4);
    const auto p = init_params(spec, std::uint64_t(trial));
    const Batch b = random_batch(spec, 6, gen);
    const RowMatrix s = softmax(logits(spec, p, b.features * 10.0));
    for (Eigen::Index i = 0; i < s.rows(); ++i) EXPECT_NEAR(s.row(i).sum(), 1.0, 1e-12);
    EXPECT_GE(loss_and_grad(spec, p, b).loss, 0.0);
  }
}

namespace {

// Identity layers on one-hot positive inputs make logits equal the inputs.
ParamVector identity_net(const MlpSpec& spec) {
  ParamVector p = ParamVector::zeros(spec);
  for (const auto& s : p.manifest)
    if (s.kind == SegmentKind::Weight)
      for (std::size_t i = 0; i < s.rows; ++i) p.values[s.offset + i * s.cols + i] = 1.0;
  return p;
}

}  // namespace

TEST(Evaluate, AccuracyFromPredictions) {
  MlpSpec spec(3, 3, 3, 3);
  Batch b;
  b.features = RowMatrix::Zero(3, 3);
  b.features(0, 1) = b.features(1, 0) = b.features(2, 2) = 1.0;  // predicts 1, 0, 2
  b.labels = {1, 0, 0};
  EXPECT_DOUBLE_EQ(evaluate(spec, identity_net(spec), b).accuracy, 2.0 / 3.0);
}

TEST(Evaluate, TiesGoToLowestClass) {
  MlpSpec spec(3, 4, 4, 3);
  Batch b;
  b.features = RowMatrix::Random(5, 3);
  b.labels = {0, 1, 0, 2, 2};
  const auto ev = evaluate(spec, ParamVector::zeros(spec), b);
  EXPECT_DOUBLE_EQ(ev.accuracy, 2.0 / 5.0);
  EXPECT_NEAR(ev.loss, std::log(3.0), 1e-15);
}

TEST(Evaluate, SingleCorrectSample) {
  MlpSpec spec(3, 3, 3, 3);
  Batch b;
  b.features = RowMatrix::Zero(1, 3);
  b.features(0, 2) = 2.0;
  b.labels = {2};
  EXPECT_DOUBLE_EQ(evaluate(spec, identity_net(spec), b).accuracy, 1.0);
}
