#include "chowflow/train.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "chowflow/data.hpp"
#include "chowflow/rng.hpp"

namespace chowflow::train {
namespace {

using diff::Matrix;
using flow::ControlledFlowModel;
using nets::MlpSpec;

ControlledFlowModel small_model(std::uint64_t seed, std::vector<std::size_t> hidden = {8, 8}) {
  return ControlledFlowModel::initialize(fields::chain_set(3), MlpSpec{4, std::move(hidden)}, seed);
}

ControlledFlowModel random_model(std::uint64_t seed, std::vector<std::size_t> hidden) {
  ControlledFlowModel model = small_model(seed, std::move(hidden));
  Rng rng(seed + 77);
  std::vector<double> p = model.flat_params();
  for (double& v : p) v = 0.5 * rng.normal();
  model.set_flat_params(p);
  return model;
}

TrainConfig small_config(std::size_t iterations, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.iterations = iterations;
  cfg.batch = 32;
  cfg.steps = 4;
  cfg.learning_rate = 1e-2;
  cfg.seed = seed;
  return cfg;
}

double loss_value(const ControlledFlowModel& model, const Matrix& batch, std::size_t steps) {
  return nll_and_gradient(model, batch, steps).loss;
}

// --- loss ------------------------------------------------------------------

TEST(NllBatch, OriginUnderIdentityFlow) {
  const auto model = small_model(1);
  const double expected = 1.5 * std::log(2.0 * std::numbers::pi);
  EXPECT_NEAR(loss_value(model, Matrix::Zero(1, 3), 16), expected, 1e-15);
  EXPECT_NEAR(expected, 2.75682, 1e-5);
}

TEST(NllBatch, GaussianEntropyUnderIdentityFlow) {
  const auto model = small_model(2);
  const Matrix x = data::standard_normal(10000, 3, 2);
  const double nll = -flow::log_likelihood(model, x, 16).mean();
  const double entropy = 1.5 * std::log(2.0 * std::numbers::pi * std::numbers::e);
  EXPECT_NEAR(entropy, 4.2568, 1e-4);
  EXPECT_NEAR(nll, entropy, 0.05);
  // The graph loss agrees with the value path on a batch.
  EXPECT_NEAR(loss_value(model, x.topRows(64), 16),
              -flow::log_likelihood(model, x.topRows(64), 16).mean(), 1e-12);
}

TEST(NllBatch, GradientMatchesFiniteDifference) {
  ControlledFlowModel model = random_model(3, {4});
  const Matrix batch = data::gen_mixture(4, 3, 3).points / 3.0;
  const LossAndGradient lg = nll_and_gradient(model, batch, 4);
  const std::vector<double> p0 = model.flat_params();
  ASSERT_EQ(lg.gradient.size(), p0.size());

  const double h = 1e-4;
  std::vector<double> fd(p0.size());
  for (std::size_t j = 0; j < p0.size(); ++j) {
    std::vector<double> p = p0;
    p[j] = p0[j] + h;
    model.set_flat_params(p);
    const double up = loss_value(model, batch, 4);
    p[j] = p0[j] - h;
    model.set_flat_params(p);
    const double down = loss_value(model, batch, 4);
    fd[j] = (up - down) / (2.0 * h);
  }
  double diff_sq = 0.0, ref_sq = 0.0;
  for (std::size_t j = 0; j < fd.size(); ++j) {
    diff_sq += (lg.gradient[j] - fd[j]) * (lg.gradient[j] - fd[j]);
    ref_sq += fd[j] * fd[j];
    // Coordinates with a clear signal must match individually too.
    if (std::abs(fd[j]) > 1e-2) EXPECT_NEAR(lg.gradient[j], fd[j], 1e-3 * std::abs(fd[j])) << j;
  }
  EXPECT_GT(ref_sq, 1e-4);
  EXPECT_LT(std::sqrt(diff_sq / ref_sq), 1e-3);
}

// --- clipping --------------------------------------------------------------

TEST(Clip, ScalesDownLargeGradients) {
  std::vector<double> g{12.0, -16.0};
  EXPECT_DOUBLE_EQ(clip_by_global_norm(g, 10.0), 20.0);
  EXPECT_NEAR(global_norm(g), 10.0, 1e-12);
  EXPECT_DOUBLE_EQ(g[0], 6.0);
  EXPECT_DOUBLE_EQ(g[1], -8.0);
}

TEST(Clip, LeavesSmallGradients) {
  std::vector<double> g{1.0, 2.0, 2.0};
  const std::vector<double> before = g;
  EXPECT_DOUBLE_EQ(clip_by_global_norm(g, 10.0), 3.0);
  EXPECT_EQ(g, before);
  std::vector<double> zero(4, 0.0);
  clip_by_global_norm(zero, 10.0);
  EXPECT_EQ(zero, std::vector<double>(4, 0.0));
}

TEST(Clip, NonFinite) {
  std::vector<double> g{1.0, std::nan("")};
  EXPECT_THROW(clip_by_global_norm(g, 10.0), NumericError);
  std::vector<double> inf{INFINITY};
  EXPECT_THROW(clip_by_global_norm(inf, 10.0), NumericError);
}

// --- Adam ------------------------------------------------------------------

TEST(Adam, FirstStepHasMagnitudeLr) {
  std::vector<double> p{1.0, -2.0, 0.5};
  const std::vector<double> g{0.3, -40.0, 1e-3};
  AdamState s(3);
  adam_update(p, g, s, 1e-3);
  // At t = 1, m_hat = g and v_hat = g^2, so the step is lr g / (|g| + eps).
  const std::vector<double> start{1.0, -2.0, 0.5};
  for (std::size_t i = 0; i < 3; ++i) {
    const double expected = 1e-3 * g[i] / (std::abs(g[i]) + 1e-8);
    EXPECT_NEAR(start[i] - p[i], expected, 1e-15);
    EXPECT_NEAR(std::abs(start[i] - p[i]), 1e-3, 1e-7);
  }
  EXPECT_EQ(s.step, 1u);
}

TEST(Adam, MatchesHandWrittenRecursion) {
  std::vector<double> p{0.2};
  AdamState s(1);
  double m = 0.0, v = 0.0, theta = 0.2;
  for (int t = 1; t <= 5; ++t) {
    const double g = std::sin(t) * 3.0;
    adam_update(p, std::vector<double>{g}, s, 0.01);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, t));
    const double vh = v / (1.0 - std::pow(0.999, t));
    theta -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    EXPECT_NEAR(p[0], theta, 1e-15);
  }
}

TEST(Adam, ZeroGradientsLeaveParameters) {
  std::vector<double> p{1.0, 2.0};
  AdamState s(2);
  for (int i = 0; i < 100; ++i) adam_update(p, std::vector<double>{0.0, 0.0}, s, 1e-2);
  EXPECT_EQ(p, (std::vector<double>{1.0, 2.0}));
}

TEST(Adam, QuadraticBowl) {
  std::vector<double> p{1.0, 1.0};
  AdamState s(2);
  for (int i = 0; i < 500; ++i) {
    adam_update(p, std::vector<double>{2.0 * p[0], 2.0 * p[1]}, s, 1e-2);
  }
  EXPECT_LT(global_norm(p), 1e-3);
}

TEST(Adam, LayoutMismatch) {
  std::vector<double> p{1.0, 2.0};
  AdamState s(3);
  EXPECT_THROW(adam_update(p, std::vector<double>{0.0, 0.0}, s, 1e-3), ContractError);
  AdamState ok(2);
  EXPECT_THROW(adam_update(p, std::vector<double>{0.0}, ok, 1e-3), ContractError);
}

// --- training loop ---------------------------------------------------------

TEST(TrainLoop, ZeroIterations) {
  ControlledFlowModel model = small_model(4);
  const std::vector<double> before = model.flat_params();
  const LossHistory h = train_loop(model, data::gen_mixture(100, 3, 4).points, small_config(0, 4));
  EXPECT_TRUE(h.empty());
  EXPECT_EQ(model.flat_params(), before);
}

TEST(TrainLoop, DeterministicGivenSeed) {
  const Matrix ds = data::gen_moons3d(500, 5).points;
  ControlledFlowModel a = small_model(5), b = small_model(5);
  const LossHistory ha = train_loop(a, ds, small_config(15, 5));
  const LossHistory hb = train_loop(b, ds, small_config(15, 5));
  ASSERT_EQ(ha.size(), 15u);
  ASSERT_EQ(hb.size(), 15u);
  for (std::size_t i = 0; i < ha.size(); ++i) {
    EXPECT_EQ(ha[i].iteration, i);
    EXPECT_EQ(ha[i].nll, hb[i].nll);
  }
  EXPECT_EQ(a.flat_params(), b.flat_params());

  ControlledFlowModel c = small_model(5);
  const LossHistory hc = train_loop(c, ds, small_config(15, 6));
  EXPECT_NE(hc.back().nll, ha.back().nll);
}

TEST(TrainLoop, DescendsAndRespectsClip) {
  ControlledFlowModel model = small_model(6, {16, 16});
  TrainConfig cfg = small_config(150, 6);
  cfg.batch = 64;
  double max_clipped = 0.0;
  const LossHistory h = train_loop(model, data::gen_mixture(2000, 3, 6, 0.6).points, cfg,
                                   [&](const IterationStats& s) {
                                     max_clipped = std::max(max_clipped, s.clipped_norm);
                                     EXPECT_LE(s.clipped_norm, std::min(s.grad_norm, 10.0) + 1e-9);
                                   });
  ASSERT_EQ(h.size(), 150u);
  double tail = 0.0;
  for (std::size_t i = h.size() - 15; i < h.size(); ++i) tail += h[i].nll;
  tail /= 15.0;
  EXPECT_LT(tail, h.front().nll);
  EXPECT_LE(max_clipped, 10.0 + 1e-9);
}

TEST(TrainLoop, AbortCarriesIterationAndRow) {
  ControlledFlowModel model = small_model(7);
  Matrix ds = Matrix::Constant(1, 3, 1e200);
  try {
    train_loop(model, ds, small_config(3, 7));
    FAIL() << "expected TrainingAborted";
  } catch (const TrainingAborted& e) {
    EXPECT_EQ(e.iteration(), 0u);
    EXPECT_TRUE(e.history().empty());
    EXPECT_NE(std::string(e.what()).find("batch row 0"), std::string::npos) << e.what();
  }
}

TEST(TrainLoop, Contracts) {
  ControlledFlowModel model = small_model(8);
  EXPECT_THROW(train_loop(model, Matrix::Zero(10, 4), small_config(1, 8)), ContractError);
  TrainConfig bad = small_config(1, 8);
  bad.batch = 0;
  EXPECT_THROW(train_loop(model, Matrix::Zero(10, 3), bad), ContractError);
  bad = small_config(1, 8);
  bad.horizon = 2.0;
  EXPECT_THROW(train_loop(model, Matrix::Zero(10, 3), bad), ContractError);
}

}  // namespace
}  // namespace chowflow::train
