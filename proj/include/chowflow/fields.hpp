#pragma once

// Fixed vector fields on R^d and their Lie brackets.
//
// Coordinates are numbered 1..d in this API (x_1 is the first coordinate),
// matching how the fields are written mathematically. Eigen vectors are
// 0-based as usual.

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "chowflow/diff.hpp"

namespace chowflow::fields {

using Vector = Eigen::VectorXd;
using DenseMatrix = Eigen::MatrixXd;

/// V(x) = linear * x + offset.
struct AffineForm {
  DenseMatrix linear;
  Vector offset;
};

class FixedField {
 public:
  using EvalFn = std::function<Vector(const Vector&)>;
  using JacobianActionFn = std::function<Vector(const Vector& x, const Vector& w)>;
  using DivergenceFn = std::function<double(const Vector&)>;

  /// General smooth field given by callbacks. Such a field supports
  /// evaluation and single brackets but not batched graph evaluation or
  /// nested brackets.
  FixedField(std::string tag, std::size_t dim, EvalFn eval, JacobianActionFn jacobian_action,
             DivergenceFn divergence);

  static FixedField affine(std::string tag, DenseMatrix linear, Vector offset);

  const std::string& tag() const { return tag_; }
  std::size_t dim() const { return dim_; }
  const std::optional<AffineForm>& affine_form() const { return affine_; }

  Vector eval(const Vector& x) const;
  Vector jacobian_action(const Vector& x, const Vector& w) const;
  double divergence(const Vector& x) const;

  /// V applied to every row of x (batch x d) on x's tape. Affine fields only.
  diff::Var eval_batch(const diff::Var& x) const;

 private:
  void check_dim(const Vector& x, const char* what) const;

  std::string tag_;
  std::size_t dim_;
  EvalFn eval_;
  JacobianActionFn jacobian_action_;
  DivergenceFn divergence_;
  std::optional<AffineForm> affine_;
};

/// Ordered fields of a control system; 2 <= k <= d, equal dimensions.
class FieldSet {
 public:
  explicit FieldSet(std::vector<FixedField> fields);

  std::size_t size() const { return fields_.size(); }
  std::size_t dim() const { return fields_.front().dim(); }
  const FixedField& operator[](std::size_t i) const { return fields_[i]; }
  std::span<const FixedField> fields() const { return fields_; }

 private:
  std::vector<FixedField> fields_;
};

/// V = d/dx_1 + x_2 d/dx_3 + ... + x_{d-1} d/dx_d, for d >= 3.
FixedField chain_field(std::size_t d);
/// Chain field along a coordinate ordering: perm lists 1-based coordinates
/// i_1..i_d, giving d/dx_{i_1} + x_{i_2} d/dx_{i_3} + ... + x_{i_{d-1}} d/dx_{i_d}.
FixedField permuted_chain_field(std::span<const std::size_t> perm);
/// Constant unit field d/dx_axis, 1 <= axis <= d.
FixedField coordinate_field(std::size_t axis, std::size_t d);

/// Chain field plus d/dx_2 .. d/dx_k.
FieldSet chain_set(std::size_t d, std::size_t k = 2);
/// Permuted chain field plus d/dx_{i_2} .. d/dx_{i_k}.
FieldSet permuted_chain_set(std::span<const std::size_t> perm, std::size_t k = 2);
/// d/dx_1 .. d/dx_k (standard CNF when k = d).
FieldSet coordinate_set(std::size_t d, std::size_t k);
/// Heisenberg pair on R^3: V_1 = d/dx_1, V_2 = d/dx_2 + x_1 d/dx_3.
FieldSet heisenberg_set();

/// [X, Y](x) = J_Y(x) X(x) - J_X(x) Y(x).
Vector lie_bracket(const FixedField& x_field, const FixedField& y_field, const Vector& x);

/// [X, Y] as a field. Both must be affine (the bracket is then affine too).
FixedField bracket_field(const FixedField& x_field, const FixedField& y_field);

/// ad_X^m (Y) evaluated at x, m >= 1.
Vector iterated_ad(const FixedField& x_field, const FixedField& y_field, std::size_t m,
                   const Vector& x);

inline constexpr double kRankTolerance = 1e-8;

/// Numerical rank at x of the fields together with all their iterated
/// brackets of order <= depth (singular values above tol).
///
/// For affine fields each bracket level is reduced to a basis of its span
/// before the next level is formed. This leaves the spanned space unchanged
/// and keeps the column count polynomial in d instead of k^depth.
std::size_t bracket_generating_rank(std::span<const FixedField> fields, const Vector& x,
                                    std::size_t depth, double tol = kRankTolerance);

}  // namespace chowflow::fields
