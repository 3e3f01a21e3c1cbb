#pragma once

// Maximum-likelihood training: minibatch NLL through the RK4 solver, global
// norm clipping, Adam.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "chowflow/errors.hpp"
#include "chowflow/flow.hpp"

namespace chowflow::train {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  std::size_t iterations = 3000;
  std::size_t batch = 512;
  double learning_rate = 1e-3;
  double clip_norm = 10.0;
  std::size_t steps = flow::kTrainSteps;
  double horizon = 1.0;
  std::uint64_t seed = 0;
  std::string dataset = "mixture";
  AdamConfig adam;

  void validate() const;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
  AdamConfig config;

  AdamState(std::size_t n, AdamConfig cfg = {}) : m(n, 0.0), v(n, 0.0), config(cfg) {}
};

struct LossRecord {
  std::size_t iteration;
  double nll;
};

using LossHistory = std::vector<LossRecord>;

/// -(1/B) sum_j log p(y_j) for the rows of `batch`.
diff::Var nll_batch(const flow::BoundModel& model, const diff::Var& batch, std::size_t steps);

/// Loss value and its gradient with respect to model.flat_params().
struct LossAndGradient {
  double loss;
  std::vector<double> gradient;
};

LossAndGradient nll_and_gradient(const flow::ControlledFlowModel& model, const diff::Matrix& batch,
                                 std::size_t steps);

double global_norm(std::span<const double> v);

/// Rescales grads in place to norm max_norm if it exceeds it. Returns the
/// norm before clipping.
double clip_by_global_norm(std::span<double> grads, double max_norm);

/// Bias-corrected Adam step, in place.
void adam_update(std::span<double> params, std::span<const double> grads, AdamState& state,
                 double learning_rate);

struct IterationStats {
  std::size_t iteration;
  double nll;
  double grad_norm;     ///< before clipping
  double clipped_norm;  ///< after clipping
};

/// Thrown when an iteration fails; carries the history up to that point.
class TrainingAborted : public NumericError {
 public:
  TrainingAborted(std::size_t iteration, const std::string& cause, LossHistory history)
      : NumericError("iteration " + std::to_string(iteration),
                     "training aborted at iteration " + std::to_string(iteration) + ": " + cause),
        iteration_(iteration),
        history_(std::move(history)) {}

  std::size_t iteration() const noexcept { return iteration_; }
  const LossHistory& history() const noexcept { return history_; }

 private:
  std::size_t iteration_;
  LossHistory history_;
};

using IterationCallback = std::function<void(const IterationStats&)>;

/// Runs cfg.iterations steps of: sample a minibatch (uniform, with
/// replacement, seeded by cfg.seed), NLL, backprop, clip, Adam. Updates
/// `model` in place and returns the per-iteration NLL.
LossHistory train_loop(flow::ControlledFlowModel& model, const diff::Matrix& dataset,
                       const TrainConfig& cfg, const IterationCallback& on_iteration = nullptr);

}  // namespace chowflow::train
