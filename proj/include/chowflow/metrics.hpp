#pragma once

#include <cstddef>

#include "chowflow/diff.hpp"

namespace chowflow::metrics {

/// Sample energy distance 2 E|X-Y| - E|X-X'| - E|Y-Y'| with every mean
/// taken over all ordered pairs (V-statistic). Non-negative.
double energy_distance(const diff::Matrix& a, const diff::Matrix& b);

/// Number of rows within `radius` of `center` (a 1 x d row).
std::size_t count_within(const diff::Matrix& points, const diff::Matrix& center, double radius);

}  // namespace chowflow::metrics
