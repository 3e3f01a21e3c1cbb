#pragma once

// Controlled flow dx/dt = v(t, x) = sum_i a_i(t, x) V_i(x), integrated with
// fixed-step RK4, and its exact CNF log-likelihood.
//
// All batched quantities are matrices with one row per point: positions are
// n x d, divergences and log-densities are n x 1.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "chowflow/control_net.hpp"
#include "chowflow/diff.hpp"
#include "chowflow/fields.hpp"

namespace chowflow::flow {

using diff::Matrix;
using diff::Var;

inline constexpr std::size_t kTrainSteps = 16;
inline constexpr std::size_t kSampleSteps = 64;

enum class Direction { Forward, Backward };

struct SolverConfig {
  std::size_t steps = kTrainSteps;
  Direction direction = Direction::Forward;

  void validate() const;
};

class ControlledFlowModel {
 public:
  ControlledFlowModel(fields::FieldSet fields, std::vector<nets::ControlNet> controls,
                      double horizon = 1.0);

  /// One freshly initialised control net per field, seeded independently.
  static ControlledFlowModel initialize(fields::FieldSet fields, const nets::MlpSpec& spec,
                                        std::uint64_t seed, double horizon = 1.0);

  std::size_t dim() const { return fields_.dim(); }
  std::size_t k() const { return fields_.size(); }
  double horizon() const { return horizon_; }
  const fields::FieldSet& fields() const { return fields_; }
  const std::vector<nets::ControlNet>& controls() const { return controls_; }
  std::vector<nets::ControlNet>& controls() { return controls_; }

  /// All control parameters, net by net, each in its ParamStore layout.
  std::vector<double> flat_params() const;
  void set_flat_params(std::span<const double> values);
  std::size_t parameter_count() const;

 private:
  fields::FieldSet fields_;
  std::vector<nets::ControlNet> controls_;
  double horizon_;
};

/// A model's parameters placed on a tape.
struct BoundModel {
  const ControlledFlowModel* model = nullptr;
  std::vector<nets::BoundNet> nets;

  /// Parameter leaves in flat_params() order.
  std::vector<Var> leaves() const;
};

BoundModel bind(diff::Tape& tape, const ControlledFlowModel& model);
BoundModel bind_frozen(diff::Tape& tape, const ControlledFlowModel& model);

Var velocity(const BoundModel& model, double t, const Var& x);

/// sum_i <grad_x a_i, V_i> + a_i div V_i, exact, differentiable in theta.
Var divergence_velocity(const BoundModel& model, double t, const Var& x);

struct VelocityDivergence {
  Var velocity;
  Var divergence;
};

/// Both at once; shares one forward pass per control net.
VelocityDivergence velocity_and_divergence(const BoundModel& model, double t, const Var& x);

// ---------------------------------------------------------------------------
// Generic RK4 over graph states.

/// Right-hand side: derivative of each state component at (t, state).
using GraphSystem = std::function<std::vector<Var>(double t, const std::vector<Var>& state)>;

/// One classical RK4 step of size h (negative h steps backward in time).
std::vector<Var> rk4_step(const GraphSystem& system, double t, double h,
                          const std::vector<Var>& state);

/// K uniform steps from t0 to t1. Any NumericError is rethrown tagged with
/// the step index.
std::vector<Var> rk4_integrate(const GraphSystem& system, std::vector<Var> state, double t0,
                               double t1, std::size_t steps);

// ---------------------------------------------------------------------------
// Model integration.

/// Position plus the divergence integral along the trajectory, oriented so
/// that Delta = int_0^T div v(t, x_t) dt whichever way the path was solved.
struct AugmentedState {
  Matrix x;
  Matrix delta;
};

struct AugmentedVars {
  Var x;
  Var delta;
};

/// Endpoint after integrating forward (0 -> T) or backward (T -> 0). Rows are
/// solved in blocks of 1024.
Matrix integrate(const ControlledFlowModel& model, const Matrix& x0, const SolverConfig& cfg);

AugmentedState integrate_augmented(const ControlledFlowModel& model, const Matrix& x0,
                                   const SolverConfig& cfg);

/// Called once per grid point (steps + 1 times) with the state at time t.
/// All rows are solved as one block.
using TrajectoryObserver =
    std::function<void(std::size_t step, double t, const Matrix& x, const Matrix& delta)>;

AugmentedState integrate_augmented(const ControlledFlowModel& model, const Matrix& x0,
                                   const SolverConfig& cfg, const TrajectoryObserver& observer);

/// Differentiable augmented integration on the model's tape.
AugmentedVars integrate_augmented(const BoundModel& model, const Var& x0, const SolverConfig& cfg);

/// log N(z; 0, I) per row.
Eigen::VectorXd log_base_density(const Matrix& z);

/// Per-row log p(x) = log p0(z) - Delta via backward integration; n x 1.
Var log_likelihood(const BoundModel& model, const Var& x_data, std::size_t steps);

/// Values only, evaluated step by step without retaining the graph.
Eigen::VectorXd log_likelihood(const ControlledFlowModel& model, const Matrix& x_data,
                               std::size_t steps);

/// z ~ N(0, I) from `seed`, pushed forward 0 -> T.
Matrix sample(const ControlledFlowModel& model, std::size_t n, std::uint64_t seed,
              const SolverConfig& cfg);

}  // namespace chowflow::flow
