#include "chowflow/flow.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "chowflow/data.hpp"
#include "chowflow/errors.hpp"
#include "chowflow/rng.hpp"

namespace chowflow::flow {

using diff::Dual;
using diff::Tape;

void SolverConfig::validate() const {
  if (steps == 0) throw ContractError("SolverConfig: steps must be >= 1");
}

ControlledFlowModel::ControlledFlowModel(fields::FieldSet fields,
                                         std::vector<nets::ControlNet> controls, double horizon)
    : fields_(std::move(fields)), controls_(std::move(controls)), horizon_(horizon) {
  if (controls_.size() != fields_.size()) {
    throw ContractError("ControlledFlowModel: " + std::to_string(controls_.size()) +
                        " controls for " + std::to_string(fields_.size()) + " fields");
  }
  for (const auto& c : controls_) {
    if (c.state_dim() != fields_.dim()) {
      throw ContractError("ControlledFlowModel: control input does not match field dimension");
    }
  }
  if (!(horizon_ > 0.0) || !std::isfinite(horizon_)) {
    throw ContractError("ControlledFlowModel: horizon must be positive");
  }
}

ControlledFlowModel ControlledFlowModel::initialize(fields::FieldSet fields,
                                                    const nets::MlpSpec& spec, std::uint64_t seed,
                                                    double horizon) {
  std::vector<nets::ControlNet> controls;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    controls.push_back(nets::init_control_net(spec, mix_seed(seed, i)));
  }
  return ControlledFlowModel(std::move(fields), std::move(controls), horizon);
}

std::vector<double> ControlledFlowModel::flat_params() const {
  std::vector<double> out;
  out.reserve(parameter_count());
  for (const auto& c : controls_) {
    const auto p = c.params().flat();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

void ControlledFlowModel::set_flat_params(std::span<const double> values) {
  if (values.size() != parameter_count()) {
    throw ContractError("set_flat_params: expected " + std::to_string(parameter_count()) +
                        " values, got " + std::to_string(values.size()));
  }
  std::size_t offset = 0;
  for (auto& c : controls_) {
    const std::size_t n = c.params().size();
    c.params().assign(values.subspan(offset, n));
    offset += n;
  }
}

std::size_t ControlledFlowModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& c : controls_) n += c.params().size();
  return n;
}

std::vector<Var> BoundModel::leaves() const {
  std::vector<Var> out;
  for (const auto& net : nets) {
    const auto l = net.leaves();
    out.insert(out.end(), l.begin(), l.end());
  }
  return out;
}

BoundModel bind(Tape& tape, const ControlledFlowModel& model) {
  BoundModel bound{&model, {}};
  for (const auto& c : model.controls()) bound.nets.push_back(nets::bind(tape, c));
  return bound;
}

BoundModel bind_frozen(Tape& tape, const ControlledFlowModel& model) {
  BoundModel bound{&model, {}};
  for (const auto& c : model.controls()) bound.nets.push_back(nets::bind_frozen(tape, c));
  return bound;
}

namespace {

void check_points(const BoundModel& model, const Var& x) {
  if (static_cast<std::size_t>(x.cols()) != model.model->dim()) {
    throw ContractError("flow: points have " + std::to_string(x.cols()) +
                        " columns, model dimension is " + std::to_string(model.model->dim()));
  }
}

}  // namespace

Var velocity(const BoundModel& model, double t, const Var& x) {
  check_points(model, x);
  const auto& fields = model.model->fields();
  std::optional<Var> v;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    const Var a = nets::control_forward(model.nets[i], t, x);
    const Var term = mul_col_broadcast(a, fields[i].eval_batch(x));
    v = v ? add(*v, term) : term;
  }
  return *v;
}

VelocityDivergence velocity_and_divergence(const BoundModel& model, double t, const Var& x) {
  check_points(model, x);
  const auto& fields = model.model->fields();
  std::optional<Var> v, div;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    const Var field = fields[i].eval_batch(x);
    // <grad_x a_i, V_i> is the x-tangent of a_i along V_i.
    const Dual a = nets::control_forward(model.nets[i], t, Dual(x, field));
    Var div_i = a.tangent_or_zero();
    const double field_div = fields[i].affine_form()->linear.trace();
    if (field_div != 0.0) div_i = add(div_i, scale(a.primal, field_div));
    const Var term = mul_col_broadcast(a.primal, field);
    v = v ? add(*v, term) : term;
    div = div ? add(*div, div_i) : div_i;
  }
  return {*v, *div};
}

Var divergence_velocity(const BoundModel& model, double t, const Var& x) {
  return velocity_and_divergence(model, t, x).divergence;
}

// ---------------------------------------------------------------------------

std::vector<Var> rk4_step(const GraphSystem& system, double t, double h,
                          const std::vector<Var>& state) {
  auto offset = [&](const std::vector<Var>& k, double c) {
    std::vector<Var> out;
    out.reserve(state.size());
    for (std::size_t j = 0; j < state.size(); ++j) out.push_back(add(state[j], scale(k[j], c)));
    return out;
  };
  const std::vector<Var> k1 = system(t, state);
  const std::vector<Var> k2 = system(t + 0.5 * h, offset(k1, 0.5 * h));
  const std::vector<Var> k3 = system(t + 0.5 * h, offset(k2, 0.5 * h));
  const std::vector<Var> k4 = system(t + h, offset(k3, h));
  if (k1.size() != state.size() || k2.size() != state.size() || k3.size() != state.size() ||
      k4.size() != state.size()) {
    throw ContractError("rk4_step: system returned wrong number of components");
  }
  std::vector<Var> next;
  next.reserve(state.size());
  for (std::size_t j = 0; j < state.size(); ++j) {
    const Var slope = add(add(k1[j], scale(add(k2[j], k3[j]), 2.0)), k4[j]);
    next.push_back(add(state[j], scale(slope, h / 6.0)));
  }
  return next;
}

namespace {

[[noreturn]] void rethrow_at_step(const NumericError& e, std::size_t step) {
  throw NumericError("rk4 step " + std::to_string(step) + " (" + e.where() + ")",
                     "non-finite state at RK4 step " + std::to_string(step) + ": " + e.what());
}

double grid_time(double t0, double t1, std::size_t step, std::size_t steps) {
  if (step == steps) return t1;
  return t0 + (t1 - t0) * static_cast<double>(step) / static_cast<double>(steps);
}

}  // namespace

std::vector<Var> rk4_integrate(const GraphSystem& system, std::vector<Var> state, double t0,
                               double t1, std::size_t steps) {
  if (steps == 0) throw ContractError("rk4_integrate: steps must be >= 1");
  const double h = (t1 - t0) / static_cast<double>(steps);
  for (std::size_t n = 0; n < steps; ++n) {
    try {
      state = rk4_step(system, grid_time(t0, t1, n, steps), h, state);
    } catch (const NumericError& e) {
      rethrow_at_step(e, n);
    }
  }
  return state;
}

// ---------------------------------------------------------------------------

namespace {

struct Span {
  double t0;
  double t1;
  double orientation;  // +1 forward, -1 backward
};

Span time_span(const ControlledFlowModel& model, const SolverConfig& cfg) {
  cfg.validate();
  if (cfg.direction == Direction::Forward) return {0.0, model.horizon(), 1.0};
  return {model.horizon(), 0.0, -1.0};
}

GraphSystem augmented_system(const BoundModel& model) {
  return [&model](double t, const std::vector<Var>& s) {
    const VelocityDivergence vd = velocity_and_divergence(model, t, s[0]);
    return std::vector<Var>{vd.velocity, vd.divergence};
  };
}

void check_start(const ControlledFlowModel& model, const Matrix& x0) {
  if (static_cast<std::size_t>(x0.cols()) != model.dim()) {
    throw ContractError("integrate: points have " + std::to_string(x0.cols()) +
                        " columns, model dimension is " + std::to_string(model.dim()));
  }
  if (!x0.allFinite()) throw NumericError("rk4 step 0", "non-finite initial state");
}

// Value-path solves hold one RK4 step of graph per block; bounding the rows
// bounds the memory.
constexpr Eigen::Index kBlockRows = 1024;

template <typename Fn>
void for_each_block(Eigen::Index rows, Fn&& fn) {
  for (Eigen::Index start = 0; start < rows; start += kBlockRows) {
    fn(start, std::min(kBlockRows, rows - start));
  }
}

Matrix integrate_block(const ControlledFlowModel& model, const Matrix& x0,
                       const SolverConfig& cfg) {
  const Span span = time_span(model, cfg);
  const double h = (span.t1 - span.t0) / static_cast<double>(cfg.steps);
  Matrix x = x0;
  for (std::size_t n = 0; n < cfg.steps; ++n) {
    Tape tape;
    const BoundModel bound = bind_frozen(tape, model);
    const GraphSystem system = [&bound](double t, const std::vector<Var>& s) {
      return std::vector<Var>{velocity(bound, t, s[0])};
    };
    try {
      x = rk4_step(system, grid_time(span.t0, span.t1, n, cfg.steps), h, {tape.constant(x)})[0]
              .value();
    } catch (const NumericError& e) {
      rethrow_at_step(e, n);
    }
  }
  return x;
}

AugmentedState integrate_augmented_block(const ControlledFlowModel& model, const Matrix& x0,
                                         const SolverConfig& cfg,
                                         const TrajectoryObserver& observer) {
  const Span span = time_span(model, cfg);
  const double h = (span.t1 - span.t0) / static_cast<double>(cfg.steps);
  AugmentedState state{x0, Matrix::Zero(x0.rows(), 1)};
  if (observer) observer(0, span.t0, state.x, state.delta);
  for (std::size_t n = 0; n < cfg.steps; ++n) {
    Tape tape;
    const BoundModel bound = bind_frozen(tape, model);
    try {
      // The signed accumulator integrates div v along the direction of
      // travel; multiplying by the orientation gives int_0^T.
      const auto next = rk4_step(augmented_system(bound), grid_time(span.t0, span.t1, n, cfg.steps),
                                 h, {tape.constant(state.x), tape.constant(span.orientation * state.delta)});
      state.x = next[0].value();
      state.delta = span.orientation * next[1].value();
    } catch (const NumericError& e) {
      rethrow_at_step(e, n);
    }
    if (observer) observer(n + 1, grid_time(span.t0, span.t1, n + 1, cfg.steps), state.x, state.delta);
  }
  return state;
}

}  // namespace

Matrix integrate(const ControlledFlowModel& model, const Matrix& x0, const SolverConfig& cfg) {
  check_start(model, x0);
  cfg.validate();
  Matrix out(x0.rows(), x0.cols());
  for_each_block(x0.rows(), [&](Eigen::Index start, Eigen::Index n) {
    out.middleRows(start, n) = integrate_block(model, x0.middleRows(start, n), cfg);
  });
  return out;
}

AugmentedState integrate_augmented(const ControlledFlowModel& model, const Matrix& x0,
                                   const SolverConfig& cfg) {
  check_start(model, x0);
  cfg.validate();
  AugmentedState out{Matrix(x0.rows(), x0.cols()), Matrix(x0.rows(), 1)};
  for_each_block(x0.rows(), [&](Eigen::Index start, Eigen::Index n) {
    const AugmentedState part =
        integrate_augmented_block(model, x0.middleRows(start, n), cfg, nullptr);
    out.x.middleRows(start, n) = part.x;
    out.delta.middleRows(start, n) = part.delta;
  });
  return out;
}

AugmentedState integrate_augmented(const ControlledFlowModel& model, const Matrix& x0,
                                   const SolverConfig& cfg, const TrajectoryObserver& observer) {
  check_start(model, x0);
  return integrate_augmented_block(model, x0, cfg, observer);
}

AugmentedVars integrate_augmented(const BoundModel& model, const Var& x0, const SolverConfig& cfg) {
  const Span span = time_span(*model.model, cfg);
  check_points(model, x0);
  Tape& tape = x0.tape();
  const auto end = rk4_integrate(augmented_system(model),
                                 {x0, tape.constant(Matrix::Zero(x0.rows(), 1))}, span.t0,
                                 span.t1, cfg.steps);
  return {end[0], span.orientation > 0 ? end[1] : neg(end[1])};
}

Eigen::VectorXd log_base_density(const Matrix& z) {
  const double norm = 0.5 * static_cast<double>(z.cols()) * std::log(2.0 * std::numbers::pi);
  return (-0.5 * z.rowwise().squaredNorm()).array() - norm;
}

Var log_likelihood(const BoundModel& model, const Var& x_data, std::size_t steps) {
  const AugmentedVars end =
      integrate_augmented(model, x_data, SolverConfig{steps, Direction::Backward});
  const double norm = 0.5 * static_cast<double>(x_data.cols()) * std::log(2.0 * std::numbers::pi);
  const Var log_p0 = add_scalar(scale(row_sum(mul(end.x, end.x)), -0.5), -norm);
  return sub(log_p0, end.delta);
}

Eigen::VectorXd log_likelihood(const ControlledFlowModel& model, const Matrix& x_data,
                               std::size_t steps) {
  const AugmentedState end =
      integrate_augmented(model, x_data, SolverConfig{steps, Direction::Backward});
  return log_base_density(end.x) - end.delta.col(0);
}

Matrix sample(const ControlledFlowModel& model, std::size_t n, std::uint64_t seed,
              const SolverConfig& cfg) {
  if (cfg.direction != Direction::Forward) {
    throw ContractError("sample: solver direction must be forward");
  }
  return integrate(model, data::standard_normal(n, model.dim(), seed), cfg);
}

}  // namespace chowflow::flow
