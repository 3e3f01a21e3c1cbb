#pragma once
//
// Reverse-mode differentiation over a tape of dense matrices, plus a
// forward-mode layer (Dual) whose tangents are themselves tape nodes.
//
// Every op appends one node to the tape; parents always precede children, so
// insertion order is a topological order and the backward sweep is a single
// reverse pass. A Dual evaluates f and its directional derivative in the same
// tape, which makes the directional derivative differentiable again by
// reverse_grad (forward-over-reverse). The CNF loss needs exactly this: the
// divergence contains grad_x a_i, and training differentiates the divergence
// with respect to the network parameters.
//
// Values are matrices so that a minibatch travels through the graph as one
// node per op (rows = batch items). A scalar is a 1x1 matrix.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace chowflow::diff {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Op : std::uint8_t {
  Leaf,
  Constant,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Scale,
  AddScalar,
  Exp,
  Log,
  Sigmoid,
  Silu,
  SiluDeriv,
  Sum,
  RowSum,
  Dot,
  MatMul,
  AddRowBroadcast,
  MulColBroadcast,
  HCat,
  Cols,
};

std::string_view op_name(Op op);

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  /// Value of a 1x1 node.
  double scalar() const;
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input.
  Var leaf(Matrix value);
  Var leaf(double value);
  /// Input that never receives a gradient.
  Var constant(Matrix value);
  Var constant(double value);

  std::size_t size() const { return nodes_.size(); }
  void reserve(std::size_t n) { nodes_.reserve(n); }

  // Appends a node; throws NumericError tagged with `op` if `value` is not
  // finite. Used by the op functions below.
  Var push(Op op, Matrix value, std::initializer_list<Var> parents,
           double aux = 0.0, std::size_t aux_index = 0, Matrix cache = Matrix());

 private:
  friend class Var;
  friend std::vector<Matrix> gradients(const Var& output, std::span<const Var> wrt);

  struct Node {
    Op op;
    bool requires_grad;
    std::uint8_t n_parents;
    std::size_t parents[2];
    double aux;
    std::size_t aux_index;
    Matrix value;
    Matrix cache;  // sigmoid of the input, for Silu and SiluDeriv
  };

  std::vector<Node> nodes_;
};

// Elementwise arithmetic requires equal shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var exp(const Var& a);
Var log(const Var& a);
Var sigmoid(const Var& a);
Var silu(const Var& a);
/// Elementwise silu'(a) = s + a s (1 - s), s = sigmoid(a).
Var silu_deriv(const Var& a);
/// Sum of all entries (1x1).
Var sum(const Var& a);
/// Per-row sums (rows x 1).
Var row_sum(const Var& a);
/// Frobenius inner product (1x1).
Var dot(const Var& a, const Var& b);
Var matmul(const Var& a, const Var& b);
/// a + 1 * bias for a 1 x cols bias row.
Var add_row_broadcast(const Var& a, const Var& bias);
/// Scales row r of m by column(r, 0).
Var mul_col_broadcast(const Var& column, const Var& m);
Var hcat(const Var& left, const Var& right);
/// Columns [start, start + count).
Var cols(const Var& a, Eigen::Index start, Eigen::Index count);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator+(const Var& a, double c) { return add_scalar(a, c); }
inline Var operator+(double c, const Var& a) { return add_scalar(a, c); }
inline Var operator-(const Var& a, double c) { return add_scalar(a, -c); }

/// d output / d wrt[j] for each j, shaped like wrt[j]. `output` must be 1x1.
/// Nodes outside the ancestry of `output` get zero gradients.
std::vector<Matrix> gradients(const Var& output, std::span<const Var> wrt);

/// Same as gradients(), concatenated into one flat row-major array.
std::vector<double> reverse_grad(const Var& output, std::span<const Var> wrt);

// ---------------------------------------------------------------------------
// Forward mode over the tape.

/// A primal node and its tangent. An empty tangent means identically zero.
struct Dual {
  Var primal;
  std::optional<Var> tangent;

  Dual() = default;
  explicit Dual(Var p) : primal(p) {}
  Dual(Var p, Var t) : primal(p), tangent(t) {}

  /// Tangent as a node, materialising zeros if absent.
  Var tangent_or_zero() const;
};

Dual add(const Dual& a, const Dual& b);
Dual sub(const Dual& a, const Dual& b);
Dual mul(const Dual& a, const Dual& b);
Dual div(const Dual& a, const Dual& b);
Dual neg(const Dual& a);
Dual scale(const Dual& a, double c);
Dual add_scalar(const Dual& a, double c);
Dual exp(const Dual& a);
Dual log(const Dual& a);
Dual sigmoid(const Dual& a);
Dual silu(const Dual& a);
Dual sum(const Dual& a);
Dual row_sum(const Dual& a);
Dual dot(const Dual& a, const Dual& b);
Dual matmul(const Dual& a, const Dual& b);
Dual add_row_broadcast(const Dual& a, const Dual& bias);
Dual mul_col_broadcast(const Dual& column, const Dual& m);
Dual hcat(const Dual& left, const Dual& right);
Dual cols(const Dual& a, Eigen::Index start, Eigen::Index count);

inline Dual operator+(const Dual& a, const Dual& b) { return add(a, b); }
inline Dual operator-(const Dual& a, const Dual& b) { return sub(a, b); }
inline Dual operator*(const Dual& a, const Dual& b) { return mul(a, b); }
inline Dual operator/(const Dual& a, const Dual& b) { return div(a, b); }
inline Dual operator-(const Dual& a) { return neg(a); }
inline Dual operator*(double c, const Dual& a) { return scale(a, c); }
inline Dual operator+(const Dual& a, double c) { return add_scalar(a, c); }

using GraphFn = std::function<Var(const Var&)>;
using DualFn = std::function<Dual(const Dual&)>;

/// Directional derivative of f at x along `direction`, as a node on x's tape.
/// The result depends on x through the graph, so reverse_grad(jvp(...), {x})
/// yields the Hessian-vector product.
Var jvp(const DualFn& f, const Var& x, const Var& direction);
Var jvp(const DualFn& f, const Var& x, const Matrix& direction);

/// Max over coordinates of |reverse - central| / (|central| + 1e-12) for a
/// scalar f evaluated on a fresh tape at x (a 1 x m row).
double check_grad_fd(const GraphFn& f, std::span<const double> x, double h);

}  // namespace chowflow::diff
