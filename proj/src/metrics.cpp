#include "chowflow/metrics.hpp"

#include <cmath>

#include "chowflow/errors.hpp"

namespace chowflow::metrics {

namespace {

double mean_pairwise_distance(const diff::Matrix& a, const diff::Matrix& b) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    total += (b.rowwise() - a.row(i)).rowwise().norm().sum();
  }
  return total / (static_cast<double>(a.rows()) * static_cast<double>(b.rows()));
}

}  // namespace

double energy_distance(const diff::Matrix& a, const diff::Matrix& b) {
  if (a.cols() != b.cols()) throw ContractError("energy_distance: dimension mismatch");
  if (a.rows() == 0 || b.rows() == 0) throw ContractError("energy_distance: empty sample");
  return 2.0 * mean_pairwise_distance(a, b) - mean_pairwise_distance(a, a) -
         mean_pairwise_distance(b, b);
}

std::size_t count_within(const diff::Matrix& points, const diff::Matrix& center, double radius) {
  if (center.rows() != 1 || center.cols() != points.cols()) {
    throw ContractError("count_within: center must be a 1 x d row");
  }
  return static_cast<std::size_t>(
      ((points.rowwise() - center.row(0)).rowwise().norm().array() <= radius).count());
}

}  // namespace chowflow::metrics
