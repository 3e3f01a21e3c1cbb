#include "chowflow/train.hpp"

#include <cmath>

#include "chowflow/rng.hpp"

namespace chowflow::train {

using diff::Matrix;
using diff::Var;

void TrainConfig::validate() const {
  if (batch == 0) throw ContractError("batch must be positive");
  if (steps == 0) throw ContractError("steps must be positive");
  if (!(learning_rate > 0.0)) throw ContractError("learning rate must be positive");
  if (!(clip_norm > 0.0)) throw ContractError("clip norm must be positive");
  if (!(horizon > 0.0)) throw ContractError("horizon must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ContractError("Adam betas must lie in [0, 1)");
  }
  if (!(adam.eps > 0.0)) throw ContractError("Adam eps must be positive");
}

Var nll_batch(const flow::BoundModel& model, const Var& batch, std::size_t steps) {
  const Var log_p = flow::log_likelihood(model, batch, steps);
  return scale(sum(log_p), -1.0 / static_cast<double>(batch.rows()));
}

LossAndGradient nll_and_gradient(const flow::ControlledFlowModel& model, const Matrix& batch,
                                 std::size_t steps) {
  diff::Tape tape;
  const flow::BoundModel bound = flow::bind(tape, model);
  const Var loss = nll_batch(bound, tape.constant(batch), steps);
  const std::vector<Var> leaves = bound.leaves();
  return {loss.scalar(), diff::reverse_grad(loss, leaves)};
}

double global_norm(std::span<const double> v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  return std::sqrt(sq);
}

double clip_by_global_norm(std::span<double> grads, double max_norm) {
  const double norm = global_norm(grads);
  if (!std::isfinite(norm)) throw NumericError("clip", "non-finite gradient norm");
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (double& g : grads) g *= factor;
  }
  return norm;
}

void adam_update(std::span<double> params, std::span<const double> grads, AdamState& state,
                 double learning_rate) {
  if (params.size() != grads.size() || params.size() != state.m.size() ||
      params.size() != state.v.size()) {
    throw ContractError("adam_update: parameter, gradient and moment sizes differ");
  }
  const AdamConfig& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * grads[i];
    state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * grads[i] * grads[i];
    const double m_hat = state.m[i] / correction1;
    const double v_hat = state.v[i] / correction2;
    params[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + c.eps);
  }
}

namespace {

// Finds the first batch row whose likelihood is not finite, for error
// messages. Returns rows() if every row evaluates cleanly on its own.
Eigen::Index offending_row(const flow::ControlledFlowModel& model, const Matrix& batch,
                           std::size_t steps) {
  for (Eigen::Index r = 0; r < batch.rows(); ++r) {
    try {
      if (!std::isfinite(flow::log_likelihood(model, batch.row(r), steps)(0))) return r;
    } catch (const NumericError&) {
      return r;
    }
  }
  return batch.rows();
}

}  // namespace

LossHistory train_loop(flow::ControlledFlowModel& model, const Matrix& dataset,
                       const TrainConfig& cfg, const IterationCallback& on_iteration) {
  cfg.validate();
  if (static_cast<std::size_t>(dataset.cols()) != model.dim()) {
    throw ContractError("train_loop: dataset has " + std::to_string(dataset.cols()) +
                        " columns, model dimension is " + std::to_string(model.dim()));
  }
  if (dataset.rows() == 0 && cfg.iterations > 0) throw ContractError("train_loop: empty dataset");
  if (model.horizon() != cfg.horizon) {
    throw ContractError("train_loop: model horizon differs from config horizon");
  }

  LossHistory history;
  history.reserve(cfg.iterations);
  Rng batch_rng(mix_seed(cfg.seed, 0xba7c4));
  AdamState adam(model.parameter_count(), cfg.adam);
  std::vector<double> params = model.flat_params();
  Matrix batch(static_cast<Eigen::Index>(cfg.batch), dataset.cols());

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    for (Eigen::Index r = 0; r < batch.rows(); ++r) {
      batch.row(r) = dataset.row(
          static_cast<Eigen::Index>(batch_rng.index(static_cast<std::uint64_t>(dataset.rows()))));
    }
    LossAndGradient lg;
    try {
      lg = nll_and_gradient(model, batch, cfg.steps);
      if (!std::isfinite(lg.loss)) throw NumericError("nll", "non-finite loss");
    } catch (const NumericError& e) {
      const Eigen::Index row = offending_row(model, batch, cfg.steps);
      std::string cause = e.what();
      if (row < batch.rows()) cause += " (batch row " + std::to_string(row) + ")";
      throw TrainingAborted(it, cause, std::move(history));
    }
    const double norm = clip_by_global_norm(lg.gradient, cfg.clip_norm);
    adam_update(params, lg.gradient, adam, cfg.learning_rate);
    model.set_flat_params(params);
    history.push_back({it, lg.loss});
    if (on_iteration) {
      on_iteration({it, lg.loss, norm, global_norm(lg.gradient)});
    }
  }
  return history;
}

}  // namespace chowflow::train
