#include "chowflow/flow.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "chowflow/data.hpp"
#include "chowflow/errors.hpp"
#include "chowflow/rng.hpp"
#include "chowflow/train.hpp"

namespace chowflow::flow {
namespace {

using diff::Tape;
using nets::ControlNet;
using nets::MlpSpec;
using nets::ParamStore;

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

// Single affine layer a(t, x) = w_t t + w . x + b.
ControlNet affine_control(std::size_t d, double w_t, const std::vector<double>& w, double b) {
  ParamStore p;
  p.add("W0", d + 1, 1);
  p.add("b0", 1, 1);
  std::vector<double> flat{w_t};
  flat.insert(flat.end(), w.begin(), w.end());
  flat.push_back(b);
  p.assign(flat);
  return ControlNet(MlpSpec{d + 1, {}}, p);
}

// Coordinate fields with a_i(t, x) = lambda x_i, so v(x) = lambda x.
ControlledFlowModel linear_model(std::size_t d, double lambda) {
  std::vector<ControlNet> controls;
  for (std::size_t i = 0; i < d; ++i) {
    std::vector<double> w(d, 0.0);
    w[i] = lambda;
    controls.push_back(affine_control(d, 0.0, w, 0.0));
  }
  return ControlledFlowModel(fields::coordinate_set(d, d), controls);
}

// Closed form for v = lambda x on [0, 1]: z = e^{-lambda} x, Delta = lambda d.
double linear_log_density(const Matrix& x, double lambda) {
  const double d = static_cast<double>(x.cols());
  return -0.5 * d * kLog2Pi - 0.5 * x.squaredNorm() * std::exp(-2.0 * lambda) - lambda * d;
}

ControlledFlowModel random_model(fields::FieldSet set, std::uint64_t seed, double scale,
                                 std::vector<std::size_t> hidden = {32, 32}) {
  const MlpSpec spec{set.dim() + 1, std::move(hidden)};
  ControlledFlowModel model = ControlledFlowModel::initialize(std::move(set), spec, seed);
  Rng rng(seed ^ 0x5eed);
  for (auto& c : model.controls()) {
    for (double& p : c.params().flat()) p = scale * rng.normal() / 4.0;
  }
  return model;
}

Matrix random_points(std::size_t n, std::size_t d, std::uint64_t seed) {
  return data::standard_normal(n, d, seed);
}

Matrix velocity_value(const ControlledFlowModel& model, double t, const Matrix& x) {
  Tape tape;
  return velocity(bind_frozen(tape, model), t, tape.constant(x)).value();
}

double divergence_value(const ControlledFlowModel& model, double t, const Matrix& x) {
  Tape tape;
  return divergence_velocity(bind_frozen(tape, model), t, tape.constant(x)).scalar();
}

double fd_divergence(const ControlledFlowModel& model, double t, const Matrix& x, double h) {
  double div = 0.0;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    Matrix xp = x, xm = x;
    xp(0, j) += h;
    xm(0, j) -= h;
    div += (velocity_value(model, t, xp)(0, j) - velocity_value(model, t, xm)(0, j)) / (2.0 * h);
  }
  return div;
}

// dx/dt = x on a 1x1 state from x0 = 1 over [0, 1].
double exponential_endpoint(std::size_t steps) {
  Tape tape;
  const GraphSystem system = [](double, const std::vector<Var>& s) { return s; };
  return rk4_integrate(system, {tape.constant(1.0)}, 0.0, 1.0, steps)[0].scalar();
}

// --- velocity and divergence -----------------------------------------------

TEST(Velocity, ZeroControls) {
  const auto model = ControlledFlowModel::initialize(fields::chain_set(4), MlpSpec{5, {8}}, 1);
  EXPECT_EQ(velocity_value(model, 0.3, random_points(5, 4, 1)), Matrix::Zero(5, 4));
}

TEST(Velocity, ConstantControlsOnCoordinateFields) {
  std::vector<ControlNet> controls{affine_control(3, 0, {0, 0, 0}, 0.5),
                                   affine_control(3, 0, {0, 0, 0}, -1.25),
                                   affine_control(3, 0, {0, 0, 0}, 2.0)};
  const ControlledFlowModel model(fields::coordinate_set(3, 3), controls);
  EXPECT_EQ(velocity_value(model, 0.9, Matrix{{3.0, -1.0, 7.0}}), (Matrix{{0.5, -1.25, 2.0}}));
}

TEST(Velocity, ChainPairSubstitution) {
  std::vector<ControlNet> controls{affine_control(3, 0, {0, 0, 0}, 1.0),
                                   affine_control(3, 0, {0, 0, 0}, 0.0)};
  const ControlledFlowModel model(fields::chain_set(3), controls);
  EXPECT_EQ(velocity_value(model, 0.0, Matrix{{0.0, 4.0, 0.0}}), (Matrix{{1.0, 0.0, 4.0}}));
}

TEST(Velocity, DimensionMismatch) {
  const auto model = ControlledFlowModel::initialize(fields::chain_set(3), MlpSpec{4, {8}}, 1);
  Tape tape;
  EXPECT_THROW(velocity(bind_frozen(tape, model), 0.0, tape.constant(Matrix::Zero(2, 4))),
               ContractError);
}

TEST(Model, ControlCountMustMatchFields) {
  std::vector<ControlNet> one{affine_control(3, 0, {0, 0, 0}, 0.0)};
  EXPECT_THROW(ControlledFlowModel(fields::chain_set(3), one), ContractError);
  std::vector<ControlNet> wrong_dim{affine_control(4, 0, {0, 0, 0, 0}, 0.0),
                                    affine_control(4, 0, {0, 0, 0, 0}, 0.0)};
  EXPECT_THROW(ControlledFlowModel(fields::chain_set(3), wrong_dim), ContractError);
}

TEST(Model, FlatParamsRoundTrip) {
  ControlledFlowModel model = random_model(fields::chain_set(3), 2, 1.0, {4});
  const auto p = model.flat_params();
  EXPECT_EQ(p.size(), model.parameter_count());
  EXPECT_EQ(p.size(), 2u * (4 * 4 + 4 + 4 + 1));
  std::vector<double> q(p.size());
  for (std::size_t i = 0; i < q.size(); ++i) q[i] = static_cast<double>(i);
  model.set_flat_params(q);
  EXPECT_EQ(model.flat_params(), q);
  EXPECT_THROW(model.set_flat_params(std::vector<double>(3)), ContractError);
}

TEST(Divergence, ZeroControls) {
  const auto model = ControlledFlowModel::initialize(fields::chain_set(3), MlpSpec{4, {8}}, 1);
  EXPECT_EQ(divergence_value(model, 0.5, Matrix{{1.0, 2.0, 3.0}}), 0.0);
}

TEST(Divergence, LinearFlow) {
  for (std::size_t d = 3; d <= 5; ++d) {
    const auto model = linear_model(d, 0.5);
    EXPECT_DOUBLE_EQ(divergence_value(model, 0.2, random_points(1, d, d)), 0.5 * static_cast<double>(d));
  }
}

TEST(Divergence, MatchesFiniteDifference) {
  for (std::uint64_t m = 0; m < 3; ++m) {
    const auto model = random_model(m == 2 ? fields::chain_set(4, 3) : fields::chain_set(3), m, 1.0);
    Rng rng(m + 100);
    for (int i = 0; i < 20; ++i) {
      const double t = rng.uniform();
      const Matrix x = random_points(1, model.dim(), 1000 * m + static_cast<std::uint64_t>(i));
      const double exact = divergence_value(model, t, x);
      const double fd = fd_divergence(model, t, x, 1e-4);
      EXPECT_LT(std::abs(exact - fd), 1e-4 * std::abs(fd) + 1e-8) << "model " << m << " point " << i;
    }
  }
}

TEST(Divergence, BatchedMatchesRows) {
  const auto model = random_model(fields::chain_set(3), 4, 1.0);
  const Matrix x = random_points(6, 3, 4);
  Tape tape;
  const Matrix div = divergence_velocity(bind_frozen(tape, model), 0.4, tape.constant(x)).value();
  ASSERT_EQ(div.rows(), 6);
  for (Eigen::Index r = 0; r < 6; ++r) {
    EXPECT_NEAR(div(r, 0), divergence_value(model, 0.4, x.row(r)), 1e-13);
  }
}

// --- integration -----------------------------------------------------------

TEST(Rk4, ExponentialEndpoint) {
  EXPECT_LT(std::abs(exponential_endpoint(16) - std::exp(1.0)), 1e-4);
}

TEST(Rk4, FourthOrderConvergence) {
  for (std::size_t k : {4u, 8u, 16u}) {
    const double e1 = std::abs(exponential_endpoint(k) - std::exp(1.0));
    const double e2 = std::abs(exponential_endpoint(2 * k) - std::exp(1.0));
    EXPECT_GE(e1 / e2, 8.0) << "K=" << k;
  }
}

TEST(Rk4, NonFiniteStateReportsStep) {
  Tape tape;
  const GraphSystem system = [](double, const std::vector<Var>& s) {
    return std::vector<Var>{mul(s[0], s[0])};
  };
  try {
    rk4_integrate(system, {tape.constant(1e200)}, 0.0, 1.0, 4);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(e.where().find("rk4 step 0"), std::string::npos) << e.where();
  }
}

TEST(Integrate, NonFiniteStart) {
  const auto model = linear_model(3, 0.5);
  Matrix x = Matrix::Zero(1, 3);
  x(0, 1) = std::nan("");
  EXPECT_THROW(integrate(model, x, {16, Direction::Forward}), NumericError);
  EXPECT_THROW(integrate(model, Matrix::Zero(1, 4), {16, Direction::Forward}), ContractError);
  EXPECT_THROW(integrate(model, Matrix::Zero(1, 3), {0, Direction::Forward}), ContractError);
}

TEST(Integrate, ZeroControlsIsIdentity) {
  const auto model = ControlledFlowModel::initialize(fields::chain_set(3), MlpSpec{4, {8}}, 3);
  const Matrix x = random_points(10, 3, 3);
  EXPECT_EQ(integrate(model, x, {16, Direction::Forward}), x);
  EXPECT_EQ(integrate(model, x, {16, Direction::Backward}), x);
  const AugmentedState s = integrate_augmented(model, x, {16, Direction::Forward});
  EXPECT_EQ(s.x, x);
  EXPECT_EQ(s.delta, Matrix::Zero(10, 1));
}

TEST(Integrate, LinearFlowEndpoint) {
  const auto model = linear_model(3, 0.5);
  const Matrix x = random_points(4, 3, 5);
  const Matrix fwd = integrate(model, x, {64, Direction::Forward});
  const Matrix bwd = integrate(model, x, {64, Direction::Backward});
  EXPECT_LE((fwd - std::exp(0.5) * x).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LE((bwd - std::exp(-0.5) * x).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Integrate, DeltaOfLinearFlowIsExact) {
  const auto model = linear_model(3, 0.5);
  const Matrix x = random_points(3, 3, 6);
  for (Direction dir : {Direction::Forward, Direction::Backward}) {
    for (std::size_t k : {1u, 4u, 16u}) {
      const AugmentedState s = integrate_augmented(model, x, {k, dir});
      for (Eigen::Index r = 0; r < 3; ++r) EXPECT_DOUBLE_EQ(s.delta(r, 0), 1.5);
    }
  }
}

TEST(Integrate, PathReversalOfDelta) {
  const auto model = random_model(fields::chain_set(3), 7, 1.0);
  const Matrix z = random_points(20, 3, 7);
  const AugmentedState fwd = integrate_augmented(model, z, {64, Direction::Forward});
  const AugmentedState bwd = integrate_augmented(model, fwd.x, {64, Direction::Backward});
  EXPECT_GT(fwd.delta.cwiseAbs().maxCoeff(), 1e-2);
  EXPECT_LE((fwd.delta - bwd.delta).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LE((bwd.x - z).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Integrate, Invertibility) {
  for (std::uint64_t m = 0; m < 3; ++m) {
    const auto model = random_model(fields::chain_set(3), 10 + m, 1.0);
    const Matrix x = random_points(100, 3, 10 + m);
    const Matrix z = integrate(model, x, {64, Direction::Backward});
    const Matrix back = integrate(model, z, {64, Direction::Forward});
    EXPECT_GT((z - x).cwiseAbs().maxCoeff(), 1e-2);
    EXPECT_LT((back - x).cwiseAbs().maxCoeff(), 1e-3);
  }
}

TEST(Integrate, BlocksMatchSingleRows) {
  const auto model = random_model(fields::chain_set(3), 12, 1.0, {8});
  const Matrix x = random_points(2100, 3, 12);
  const Matrix all = integrate(model, x, {4, Direction::Forward});
  for (Eigen::Index r : {0, 1023, 1024, 2099}) {
    const Matrix one = integrate(model, x.row(r), {4, Direction::Forward});
    EXPECT_LE((all.row(r) - one).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Integrate, ObserverSeesEveryGridPoint) {
  const auto model = linear_model(3, 0.5);
  std::vector<double> times;
  integrate_augmented(model, Matrix::Ones(1, 3), {16, Direction::Forward},
                      [&](std::size_t step, double t, const Matrix&, const Matrix&) {
                        EXPECT_EQ(step, times.size());
                        times.push_back(t);
                      });
  ASSERT_EQ(times.size(), 17u);
  EXPECT_EQ(times.front(), 0.0);
  EXPECT_EQ(times.back(), 1.0);
}

// --- likelihood ------------------------------------------------------------

TEST(LogLikelihood, UntrainedAtOrigin) {
  const auto model = ControlledFlowModel::initialize(fields::chain_set(3), MlpSpec{4, {8}}, 1);
  const Eigen::VectorXd lp = log_likelihood(model, Matrix::Zero(1, 3), 16);
  EXPECT_NEAR(lp(0), -1.5 * kLog2Pi, 1e-15);
  EXPECT_NEAR(lp(0), -2.75682, 1e-5);
}

TEST(LogLikelihood, IdentityAtInit) {
  const auto model = ControlledFlowModel::initialize(fields::chain_set(4), MlpSpec{5, {16}}, 2);
  const Matrix x = random_points(50, 4, 2);
  EXPECT_EQ(log_likelihood(model, x, 16), log_base_density(x));
}

TEST(LogLikelihood, LinearFlowClosedForm) {
  const auto model = linear_model(3, 0.5);
  const Eigen::VectorXd at_ones = log_likelihood(model, Matrix::Ones(1, 3), 64);
  EXPECT_NEAR(at_ones(0), linear_log_density(Matrix::Ones(1, 3), 0.5), 1e-4);
  EXPECT_NEAR(at_ones(0), -4.8086, 1e-4);

  const Matrix x = random_points(100, 3, 8);
  const Eigen::VectorXd lp = log_likelihood(model, x, 64);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    EXPECT_NEAR(lp(r), linear_log_density(x.row(r), 0.5), 1e-4) << "row " << r;
  }
}

TEST(LogLikelihood, GraphAndValuePathsAgree) {
  const auto model = random_model(fields::chain_set(3), 13, 1.0);
  const Matrix x = random_points(8, 3, 13);
  Tape tape;
  const Matrix graph = log_likelihood(bind(tape, model), tape.constant(x), 8).value();
  const Eigen::VectorXd values = log_likelihood(model, x, 8);
  EXPECT_LE((graph.col(0) - values).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(LogLikelihood, MarginalMassByQuadrature) {
  // Train a small model briefly so the density is non-Gaussian, then compare
  // the mass of a slab computed by quadrature of p with the fraction of
  // model samples that land in it.
  ControlledFlowModel model =
      ControlledFlowModel::initialize(fields::chain_set(3), MlpSpec{4, {16, 16}}, 21);
  train::TrainConfig cfg;
  cfg.iterations = 60;
  cfg.batch = 64;
  cfg.steps = 8;
  cfg.learning_rate = 1e-2;
  cfg.seed = 21;
  train::train_loop(model, data::gen_moons3d(2000, 21).points, cfg);

  const double lo1 = 0.0, hi1 = 3.0, lo2 = -3.0, hi2 = 3.0, lo3 = -4.0, hi3 = 4.0, h = 0.1;
  std::vector<double> rows;
  for (double a = lo1 + h / 2; a < hi1; a += h) {
    for (double b = lo2 + h / 2; b < hi2; b += h) {
      for (double c = lo3 + h / 2; c < hi3; c += h) rows.insert(rows.end(), {a, b, c});
    }
  }
  const Matrix grid = Eigen::Map<Matrix>(rows.data(), static_cast<Eigen::Index>(rows.size() / 3), 3);
  const double quadrature = log_likelihood(model, grid, 32).array().exp().sum() * h * h * h;

  const Matrix s = sample(model, 20000, 22, {32, Direction::Forward});
  double inside = 0.0;
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    if (s(r, 0) >= lo1 && s(r, 0) < hi1 && s(r, 1) >= lo2 && s(r, 1) < hi2 && s(r, 2) >= lo3 &&
        s(r, 2) < hi3) {
      inside += 1.0;
    }
  }
  const double mc = inside / static_cast<double>(s.rows());
  EXPECT_GT(mc, 0.2);
  EXPECT_LT(std::abs(quadrature - mc), 0.05 * mc) << "quadrature " << quadrature << " mc " << mc;
}

// --- sampling --------------------------------------------------------------

TEST(Sample, ZeroControlsReturnsBaseDraws) {
  const auto model = ControlledFlowModel::initialize(fields::chain_set(3), MlpSpec{4, {8}}, 1);
  EXPECT_EQ(sample(model, 30, 99, {64, Direction::Forward}), data::standard_normal(30, 3, 99));
}

TEST(Sample, Deterministic) {
  const auto model = random_model(fields::chain_set(3), 14, 1.0);
  EXPECT_EQ(sample(model, 50, 5, {16, Direction::Forward}), sample(model, 50, 5, {16, Direction::Forward}));
  EXPECT_NE(sample(model, 50, 5, {16, Direction::Forward}), sample(model, 50, 6, {16, Direction::Forward}));
  EXPECT_THROW(sample(model, 5, 5, {16, Direction::Backward}), ContractError);
}

}  // namespace
}  // namespace chowflow::flow
