#include "chowflow/fields.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "chowflow/errors.hpp"

namespace chowflow::fields {

namespace {

Vector unit(std::size_t axis, std::size_t d) {
  Vector e = Vector::Zero(static_cast<Eigen::Index>(d));
  e(static_cast<Eigen::Index>(axis - 1)) = 1.0;
  return e;
}

void check_axis(std::size_t axis, std::size_t d) {
  if (axis < 1 || axis > d) {
    throw ContractError("coordinate " + std::to_string(axis) + " out of range 1.." +
                        std::to_string(d));
  }
}

void check_permutation(std::span<const std::size_t> perm) {
  const std::size_t d = perm.size();
  if (d < 3) throw ContractError("chain field needs d >= 3, got " + std::to_string(d));
  std::set<std::size_t> seen;
  for (std::size_t i : perm) {
    check_axis(i, d);
    if (!seen.insert(i).second) {
      throw ContractError("coordinate " + std::to_string(i) + " repeated in permutation");
    }
  }
}

// Affine form flattened to a vector (linear part row-major, then offset).
Vector flatten(const AffineForm& f) {
  const Eigen::Index d = f.offset.size();
  Vector v(d * d + d);
  for (Eigen::Index r = 0; r < d; ++r) v.segment(r * d, d) = f.linear.row(r).transpose();
  v.tail(d) = f.offset;
  return v;
}

AffineForm unflatten(const Vector& v, Eigen::Index d) {
  AffineForm f{DenseMatrix(d, d), v.tail(d)};
  for (Eigen::Index r = 0; r < d; ++r) f.linear.row(r) = v.segment(r * d, d).transpose();
  return f;
}

AffineForm bracket_form(const AffineForm& x, const AffineForm& y) {
  return AffineForm{y.linear * x.linear - x.linear * y.linear,
                    y.linear * x.offset - x.linear * y.offset};
}

// Orthonormal basis of span(forms), by modified Gram-Schmidt.
std::vector<AffineForm> span_basis(const std::vector<AffineForm>& forms, Eigen::Index d) {
  constexpr double kDrop = 1e-10;
  std::vector<Vector> basis;
  for (const auto& f : forms) {
    Vector v = flatten(f);
    const double scale = std::max(1.0, v.norm());
    for (const Vector& b : basis) v -= b.dot(v) * b;
    for (const Vector& b : basis) v -= b.dot(v) * b;
    const double n = v.norm();
    if (n > kDrop * scale) basis.push_back(v / n);
  }
  std::vector<AffineForm> out;
  out.reserve(basis.size());
  for (const Vector& b : basis) out.push_back(unflatten(b, d));
  return out;
}

}  // namespace

FixedField::FixedField(std::string tag, std::size_t dim, EvalFn eval,
                       JacobianActionFn jacobian_action, DivergenceFn divergence)
    : tag_(std::move(tag)),
      dim_(dim),
      eval_(std::move(eval)),
      jacobian_action_(std::move(jacobian_action)),
      divergence_(std::move(divergence)) {
  if (dim_ == 0) throw ContractError("FixedField: dimension must be positive");
}

FixedField FixedField::affine(std::string tag, DenseMatrix linear, Vector offset) {
  const auto d = offset.size();
  if (d == 0 || linear.rows() != d || linear.cols() != d) {
    throw ContractError("FixedField::affine: linear part must be d x d for offset of size d");
  }
  const double trace = linear.trace();
  FixedField f(
      std::move(tag), static_cast<std::size_t>(d),
      [linear, offset](const Vector& x) -> Vector { return linear * x + offset; },
      [linear](const Vector&, const Vector& w) -> Vector { return linear * w; },
      [trace](const Vector&) { return trace; });
  f.affine_ = AffineForm{std::move(linear), std::move(offset)};
  return f;
}

void FixedField::check_dim(const Vector& x, const char* what) const {
  if (static_cast<std::size_t>(x.size()) != dim_) {
    throw ContractError(std::string(what) + ": field '" + tag_ + "' has dim " +
                        std::to_string(dim_) + ", point has " + std::to_string(x.size()));
  }
}

Vector FixedField::eval(const Vector& x) const {
  check_dim(x, "eval");
  return eval_(x);
}

Vector FixedField::jacobian_action(const Vector& x, const Vector& w) const {
  check_dim(x, "jacobian_action");
  check_dim(w, "jacobian_action");
  return jacobian_action_(x, w);
}

double FixedField::divergence(const Vector& x) const {
  check_dim(x, "divergence");
  return divergence_(x);
}

diff::Var FixedField::eval_batch(const diff::Var& x) const {
  if (!affine_) {
    throw UnsupportedFieldError("field '" + tag_ + "' has no affine form for batched evaluation");
  }
  if (static_cast<std::size_t>(x.cols()) != dim_) {
    throw ContractError("eval_batch: field '" + tag_ + "' has dim " + std::to_string(dim_) +
                        ", input has " + std::to_string(x.cols()) + " columns");
  }
  diff::Tape& tape = x.tape();
  const diff::Matrix offset_row = affine_->offset.transpose();
  if (affine_->linear.isZero(0.0)) {
    return tape.constant(offset_row.replicate(x.rows(), 1));
  }
  const diff::Var linear_t = tape.constant(affine_->linear.transpose());
  return add_row_broadcast(matmul(x, linear_t), tape.constant(offset_row));
}

FieldSet::FieldSet(std::vector<FixedField> fields) : fields_(std::move(fields)) {
  if (fields_.empty()) throw ContractError("FieldSet: no fields");
  const std::size_t d = fields_.front().dim();
  if (fields_.size() < 2 || fields_.size() > d) {
    throw ContractError("FieldSet: need 2 <= k <= d, got k=" + std::to_string(fields_.size()) +
                        ", d=" + std::to_string(d));
  }
  for (const auto& f : fields_) {
    if (f.dim() != d) throw ContractError("FieldSet: fields have different dimensions");
  }
}

namespace {

FixedField chain_along(std::span<const std::size_t> perm, std::string tag) {
  check_permutation(perm);
  const std::size_t d = perm.size();
  DenseMatrix linear = DenseMatrix::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  // x_{i_j} d/dx_{i_{j+1}} for j = 2..d-1.
  for (std::size_t j = 1; j + 1 < d; ++j) {
    linear(static_cast<Eigen::Index>(perm[j + 1] - 1), static_cast<Eigen::Index>(perm[j] - 1)) = 1.0;
  }
  return FixedField::affine(std::move(tag), std::move(linear), unit(perm[0], d));
}

}  // namespace

FixedField chain_field(std::size_t d) {
  if (d < 3) throw ContractError("chain_field: need d >= 3, got " + std::to_string(d));
  std::vector<std::size_t> identity(d);
  std::iota(identity.begin(), identity.end(), 1);
  return chain_along(identity, "chain");
}

FixedField permuted_chain_field(std::span<const std::size_t> perm) {
  return chain_along(perm, "permuted-chain");
}

FixedField coordinate_field(std::size_t axis, std::size_t d) {
  check_axis(axis, d);
  const auto n = static_cast<Eigen::Index>(d);
  return FixedField::affine("d/dx" + std::to_string(axis), DenseMatrix::Zero(n, n), unit(axis, d));
}

FieldSet chain_set(std::size_t d, std::size_t k) {
  std::vector<FixedField> fields{chain_field(d)};
  for (std::size_t i = 2; i <= k; ++i) fields.push_back(coordinate_field(i, d));
  return FieldSet(std::move(fields));
}

FieldSet permuted_chain_set(std::span<const std::size_t> perm, std::size_t k) {
  std::vector<FixedField> fields{permuted_chain_field(perm)};
  for (std::size_t i = 2; i <= k && i <= perm.size(); ++i) {
    fields.push_back(coordinate_field(perm[i - 1], perm.size()));
  }
  return FieldSet(std::move(fields));
}

FieldSet coordinate_set(std::size_t d, std::size_t k) {
  std::vector<FixedField> fields;
  for (std::size_t i = 1; i <= k; ++i) fields.push_back(coordinate_field(i, d));
  return FieldSet(std::move(fields));
}

FieldSet heisenberg_set() {
  DenseMatrix linear = DenseMatrix::Zero(3, 3);
  linear(2, 0) = 1.0;
  return FieldSet({coordinate_field(1, 3),
                   FixedField::affine("heisenberg-V2", std::move(linear), unit(2, 3))});
}

Vector lie_bracket(const FixedField& x_field, const FixedField& y_field, const Vector& x) {
  if (x_field.dim() != y_field.dim()) {
    throw ContractError("lie_bracket: fields have dims " + std::to_string(x_field.dim()) +
                        " and " + std::to_string(y_field.dim()));
  }
  return y_field.jacobian_action(x, x_field.eval(x)) - x_field.jacobian_action(x, y_field.eval(x));
}

FixedField bracket_field(const FixedField& x_field, const FixedField& y_field) {
  if (x_field.dim() != y_field.dim()) throw ContractError("bracket_field: dimension mismatch");
  if (!x_field.affine_form() || !y_field.affine_form()) {
    throw UnsupportedFieldError("bracket of '" + x_field.tag() + "' and '" + y_field.tag() +
                                "' is not representable: only affine fields can be nested");
  }
  AffineForm f = bracket_form(*x_field.affine_form(), *y_field.affine_form());
  return FixedField::affine("[" + x_field.tag() + "," + y_field.tag() + "]", std::move(f.linear),
                            std::move(f.offset));
}

Vector iterated_ad(const FixedField& x_field, const FixedField& y_field, std::size_t m,
                   const Vector& x) {
  if (m == 0) throw ContractError("iterated_ad: order must be >= 1");
  if (m == 1) return lie_bracket(x_field, y_field, x);
  FixedField inner = bracket_field(x_field, y_field);
  for (std::size_t i = 2; i < m; ++i) inner = bracket_field(x_field, inner);
  return lie_bracket(x_field, inner, x);
}

std::size_t bracket_generating_rank(std::span<const FixedField> fields, const Vector& x,
                                    std::size_t depth, double tol) {
  if (fields.empty()) return 0;
  const std::size_t d = fields.front().dim();
  for (const auto& f : fields) {
    if (f.dim() != d) throw ContractError("bracket_generating_rank: dimension mismatch");
  }
  const auto n = static_cast<Eigen::Index>(d);

  std::vector<Vector> columns;
  for (const auto& f : fields) columns.push_back(f.eval(x));

  const bool all_affine =
      std::all_of(fields.begin(), fields.end(), [](const FixedField& f) { return f.affine_form().has_value(); });

  if (all_affine) {
    std::vector<AffineForm> generators;
    for (const auto& f : fields) generators.push_back(*f.affine_form());
    std::vector<AffineForm> level = span_basis(generators, n);
    for (std::size_t order = 1; order <= depth && !level.empty(); ++order) {
      std::vector<AffineForm> next;
      for (const auto& g : generators) {
        for (const auto& y : level) next.push_back(bracket_form(g, y));
      }
      level = span_basis(next, n);
      for (const auto& f : level) columns.push_back(f.linear * x + f.offset);
    }
  } else if (depth >= 1) {
    if (depth > 1) {
      throw UnsupportedFieldError("nested brackets need affine fields; use depth <= 1");
    }
    for (const auto& a : fields) {
      for (const auto& b : fields) columns.push_back(lie_bracket(a, b, x));
    }
  }

  DenseMatrix stacked(n, static_cast<Eigen::Index>(columns.size()));
  for (std::size_t j = 0; j < columns.size(); ++j) stacked.col(static_cast<Eigen::Index>(j)) = columns[j];
  const Vector sv = Eigen::JacobiSVD<DenseMatrix>(stacked).singularValues();
  return static_cast<std::size_t>((sv.array() > tol).count());
}

}  // namespace chowflow::fields
