#include "chowflow/diff.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <sstream>
#include <string>

#include "chowflow/errors.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace chowflow::diff {

namespace {

using Array = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string shape(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

void same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands live on different tapes");
}

void same_shape(const Var& a, const Var& b, std::string_view what) {
  same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ContractError(std::string(what) + ": shape mismatch " + shape(a.value()) +
                        " vs " + shape(b.value()));
  }
}

// x * 0 is NaN exactly when x is NaN or infinite; the sum vectorises.
bool all_finite(const Matrix& m) { return !std::isnan((m.array() * 0.0).sum()); }

Matrix sigmoid_of(const Matrix& u) {
  return (1.0 + (-u.array()).exp()).inverse().matrix();
}

// silu'(u) and silu''(u) given s = sigmoid(u).
Array silu_first(const Matrix& u, const Matrix& s) {
  return s.array() * (1.0 + u.array() * (1.0 - s.array()));
}

Array silu_second(const Matrix& u, const Matrix& s) {
  const auto sa = s.array();
  return sa * (1.0 - sa) * (2.0 + u.array() * (1.0 - 2.0 * sa));
}

// Tapes allocate and free many large matrices per solver step. With glibc's
// defaults each one is a fresh mmap and the freed heap top is trimmed
// straight back, so most of the run goes to page faults. Keep them on the
// heap instead.
void tune_allocator() {
#if defined(__GLIBC__)
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
  });
#endif
}

}  // namespace

Tape::Tape() { tune_allocator(); }

std::string_view op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Sigmoid: return "sigmoid";
    case Op::Silu: return "silu";
    case Op::SiluDeriv: return "silu_deriv";
    case Op::Sum: return "sum";
    case Op::RowSum: return "row_sum";
    case Op::Dot: return "dot";
    case Op::MatMul: return "matmul";
    case Op::AddRowBroadcast: return "add_row_broadcast";
    case Op::MulColBroadcast: return "mul_col_broadcast";
    case Op::HCat: return "hcat";
    case Op::Cols: return "cols";
  }
  return "unknown";
}

const Matrix& Var::value() const { return tape_->nodes_[id_].value; }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) {
    throw ContractError("scalar(): node is " + shape(v) + ", not 1x1");
  }
  return v(0, 0);
}

bool Var::requires_grad() const { return tape_->nodes_[id_].requires_grad; }

Var Tape::push(Op op, Matrix value, std::initializer_list<Var> parents, double aux,
               std::size_t aux_index, Matrix cache) {
  if (!all_finite(value)) {
    throw NumericError(std::string(op_name(op)),
                       "non-finite value produced by op '" + std::string(op_name(op)) + "'");
  }
  Node node{op, op == Op::Leaf, 0, {0, 0}, aux, aux_index, std::move(value), std::move(cache)};
  for (const Var& p : parents) {
    if (p.tape_ != this) throw ContractError("parent node belongs to another tape");
    node.parents[node.n_parents++] = p.id_;
    node.requires_grad = node.requires_grad || nodes_[p.id_].requires_grad;
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Matrix value) { return push(Op::Leaf, std::move(value), {}); }
Var Tape::leaf(double value) { return leaf(Matrix::Constant(1, 1, value)); }
Var Tape::constant(Matrix value) { return push(Op::Constant, std::move(value), {}); }
Var Tape::constant(double value) { return constant(Matrix::Constant(1, 1, value)); }

// ---------------------------------------------------------------------------
// Primal ops.

Var add(const Var& a, const Var& b) {
  same_shape(a, b, "add");
  return a.tape().push(Op::Add, a.value() + b.value(), {a, b});
}

Var sub(const Var& a, const Var& b) {
  same_shape(a, b, "sub");
  return a.tape().push(Op::Sub, a.value() - b.value(), {a, b});
}

Var mul(const Var& a, const Var& b) {
  same_shape(a, b, "mul");
  return a.tape().push(Op::Mul, a.value().cwiseProduct(b.value()), {a, b});
}

Var div(const Var& a, const Var& b) {
  same_shape(a, b, "div");
  return a.tape().push(Op::Div, a.value().cwiseQuotient(b.value()), {a, b});
}

Var neg(const Var& a) { return a.tape().push(Op::Neg, -a.value(), {a}); }

Var scale(const Var& a, double c) { return a.tape().push(Op::Scale, c * a.value(), {a}, c); }

Var add_scalar(const Var& a, double c) {
  return a.tape().push(Op::AddScalar, (a.value().array() + c).matrix(), {a}, c);
}

Var exp(const Var& a) { return a.tape().push(Op::Exp, a.value().array().exp().matrix(), {a}); }

Var log(const Var& a) { return a.tape().push(Op::Log, a.value().array().log().matrix(), {a}); }

Var sigmoid(const Var& a) { return a.tape().push(Op::Sigmoid, sigmoid_of(a.value()), {a}); }

Var silu(const Var& a) {
  const Matrix& u = a.value();
  Matrix s = sigmoid_of(u);
  Matrix y = u.cwiseProduct(s);
  return a.tape().push(Op::Silu, std::move(y), {a}, 0.0, 0, std::move(s));
}

Var silu_deriv(const Var& a) {
  const Matrix& u = a.value();
  Matrix s = sigmoid_of(u);
  Matrix y = silu_first(u, s).matrix();
  return a.tape().push(Op::SiluDeriv, std::move(y), {a}, 0.0, 0, std::move(s));
}

Var sum(const Var& a) {
  return a.tape().push(Op::Sum, Matrix::Constant(1, 1, a.value().sum()), {a});
}

Var row_sum(const Var& a) { return a.tape().push(Op::RowSum, a.value().rowwise().sum(), {a}); }

Var dot(const Var& a, const Var& b) {
  same_shape(a, b, "dot");
  return a.tape().push(Op::Dot, Matrix::Constant(1, 1, a.value().cwiseProduct(b.value()).sum()),
                       {a, b});
}

Var matmul(const Var& a, const Var& b) {
  same_tape(a, b);
  if (a.cols() != b.rows()) {
    throw ContractError("matmul: inner dimensions differ " + shape(a.value()) + " * " +
                        shape(b.value()));
  }
  Matrix out(a.rows(), b.cols());
  out.noalias() = a.value() * b.value();
  return a.tape().push(Op::MatMul, std::move(out), {a, b});
}

Var add_row_broadcast(const Var& a, const Var& bias) {
  same_tape(a, bias);
  if (bias.rows() != 1 || bias.cols() != a.cols()) {
    throw ContractError("add_row_broadcast: bias " + shape(bias.value()) + " for " +
                        shape(a.value()));
  }
  Matrix out = a.value();
  out.rowwise() += bias.value().row(0);
  return a.tape().push(Op::AddRowBroadcast, std::move(out), {a, bias});
}

Var mul_col_broadcast(const Var& column, const Var& m) {
  same_tape(column, m);
  if (column.cols() != 1 || column.rows() != m.rows()) {
    throw ContractError("mul_col_broadcast: column " + shape(column.value()) + " for " +
                        shape(m.value()));
  }
  Matrix out = column.value().col(0).asDiagonal() * m.value();
  return m.tape().push(Op::MulColBroadcast, std::move(out), {column, m});
}

Var hcat(const Var& left, const Var& right) {
  same_tape(left, right);
  if (left.rows() != right.rows()) {
    throw ContractError("hcat: row counts differ " + shape(left.value()) + " | " +
                        shape(right.value()));
  }
  Matrix out(left.rows(), left.cols() + right.cols());
  out << left.value(), right.value();
  return left.tape().push(Op::HCat, std::move(out), {left, right});
}

Var cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw ContractError("cols: range out of bounds for " + shape(a.value()));
  }
  return a.tape().push(Op::Cols, a.value().middleCols(start, count), {a}, 0.0,
                       static_cast<std::size_t>(start));
}

// ---------------------------------------------------------------------------
// Backward sweep.

std::vector<Matrix> gradients(const Var& output, std::span<const Var> wrt) {
  Tape& tape = output.tape();
  auto& nodes = tape.nodes_;
  const std::size_t out = output.id();
  if (out >= nodes.size()) throw GraphCorruptionError("output node is not on its tape");
  if (output.rows() != 1 || output.cols() != 1) {
    throw ContractError("reverse_grad: output must be scalar, got " + shape(output.value()));
  }

  std::vector<bool> keep(out + 1, false);
  for (const Var& w : wrt) {
    if (&w.tape() != &tape) throw ContractError("reverse_grad: input on another tape");
    if (w.id() <= out) keep[w.id()] = true;
  }

  std::vector<Matrix> grad(out + 1);
  grad[out] = Matrix::Ones(1, 1);

  auto accumulate = [&](std::size_t id, auto&& g) {
    if (!nodes[id].requires_grad) return;
    if (grad[id].size() == 0) {
      grad[id] = g;
    } else {
      grad[id] += g;
    }
  };

  for (std::size_t i = out + 1; i-- > 0;) {
    if (grad[i].size() == 0) continue;
    auto& node = nodes[i];
    for (std::uint8_t p = 0; p < node.n_parents; ++p) {
      if (node.parents[p] >= i) {
        throw GraphCorruptionError("node " + std::to_string(i) + " (" +
                                   std::string(op_name(node.op)) + ") has parent " +
                                   std::to_string(node.parents[p]) +
                                   " at or after itself: cycle");
      }
    }
    const Matrix& g = grad[i];
    if (!all_finite(g)) {
      throw NumericError(std::string(op_name(node.op)),
                         "non-finite gradient at op '" + std::string(op_name(node.op)) + "'");
    }
    const std::size_t pa = node.parents[0];
    const std::size_t pb = node.parents[1];
    const Matrix& y = node.value;

    switch (node.op) {
      case Op::Leaf:
      case Op::Constant:
        break;
      case Op::Add:
        accumulate(pa, g);
        accumulate(pb, g);
        break;
      case Op::Sub:
        accumulate(pa, g);
        accumulate(pb, -g);
        break;
      case Op::Mul:
        accumulate(pa, g.cwiseProduct(nodes[pb].value));
        accumulate(pb, g.cwiseProduct(nodes[pa].value));
        break;
      case Op::Div: {
        const Matrix& b = nodes[pb].value;
        accumulate(pa, g.cwiseQuotient(b));
        accumulate(pb, (-g.cwiseProduct(y)).cwiseQuotient(b));
        break;
      }
      case Op::Neg:
        accumulate(pa, -g);
        break;
      case Op::Scale:
        accumulate(pa, node.aux * g);
        break;
      case Op::AddScalar:
        accumulate(pa, g);
        break;
      case Op::Exp:
        accumulate(pa, g.cwiseProduct(y));
        break;
      case Op::Log:
        accumulate(pa, g.cwiseQuotient(nodes[pa].value));
        break;
      case Op::Sigmoid:
        accumulate(pa, (g.array() * y.array() * (1.0 - y.array())).matrix());
        break;
      case Op::Silu:
        accumulate(pa, (g.array() * silu_first(nodes[pa].value, node.cache)).matrix());
        break;
      case Op::SiluDeriv:
        accumulate(pa, (g.array() * silu_second(nodes[pa].value, node.cache)).matrix());
        break;
      case Op::Sum: {
        const Matrix& a = nodes[pa].value;
        accumulate(pa, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
        break;
      }
      case Op::RowSum:
        accumulate(pa, g.replicate(1, nodes[pa].value.cols()));
        break;
      case Op::Dot:
        accumulate(pa, g(0, 0) * nodes[pb].value);
        accumulate(pb, g(0, 0) * nodes[pa].value);
        break;
      case Op::MatMul: {
        const Matrix& a = nodes[pa].value;
        const Matrix& b = nodes[pb].value;
        if (nodes[pa].requires_grad) {
          Matrix ga(a.rows(), a.cols());
          ga.noalias() = g * b.transpose();
          accumulate(pa, ga);
        }
        if (nodes[pb].requires_grad) {
          Matrix gb(b.rows(), b.cols());
          gb.noalias() = a.transpose() * g;
          accumulate(pb, gb);
        }
        break;
      }
      case Op::AddRowBroadcast:
        accumulate(pa, g);
        accumulate(pb, g.colwise().sum());
        break;
      case Op::MulColBroadcast: {
        const Matrix& c = nodes[pa].value;
        const Matrix& m = nodes[pb].value;
        accumulate(pa, g.cwiseProduct(m).rowwise().sum());
        accumulate(pb, c.col(0).asDiagonal() * g);
        break;
      }
      case Op::HCat: {
        const Eigen::Index left = nodes[pa].value.cols();
        accumulate(pa, g.leftCols(left));
        accumulate(pb, g.rightCols(g.cols() - left));
        break;
      }
      case Op::Cols: {
        const Matrix& a = nodes[pa].value;
        Matrix ga = Matrix::Zero(a.rows(), a.cols());
        ga.middleCols(static_cast<Eigen::Index>(node.aux_index), g.cols()) = g;
        accumulate(pa, ga);
        break;
      }
    }
    if (!keep[i]) grad[i] = Matrix();
  }

  std::vector<Matrix> result;
  result.reserve(wrt.size());
  for (const Var& w : wrt) {
    if (w.id() <= out && grad[w.id()].size() != 0) {
      result.push_back(grad[w.id()]);
    } else {
      result.push_back(Matrix::Zero(w.rows(), w.cols()));
    }
  }
  return result;
}

std::vector<double> reverse_grad(const Var& output, std::span<const Var> wrt) {
  const std::vector<Matrix> parts = gradients(output, wrt);
  std::size_t total = 0;
  for (const auto& p : parts) total += static_cast<std::size_t>(p.size());
  std::vector<double> flat;
  flat.reserve(total);
  for (const auto& p : parts) flat.insert(flat.end(), p.data(), p.data() + p.size());
  return flat;
}

// ---------------------------------------------------------------------------
// Dual ops. Tangent rules are written with primal ops, so they land on the
// tape and stay differentiable.

namespace {

std::optional<Var> sum_opt(std::optional<Var> a, std::optional<Var> b) {
  if (a && b) return add(*a, *b);
  return a ? a : b;
}

Var zeros_like(const Var& v) {
  return v.tape().constant(Matrix::Zero(v.rows(), v.cols()));
}

}  // namespace

Var Dual::tangent_or_zero() const { return tangent ? *tangent : zeros_like(primal); }

Dual add(const Dual& a, const Dual& b) {
  Dual out(add(a.primal, b.primal));
  out.tangent = sum_opt(a.tangent, b.tangent);
  return out;
}

Dual sub(const Dual& a, const Dual& b) {
  Dual out(sub(a.primal, b.primal));
  if (a.tangent && b.tangent) {
    out.tangent = sub(*a.tangent, *b.tangent);
  } else if (a.tangent) {
    out.tangent = a.tangent;
  } else if (b.tangent) {
    out.tangent = neg(*b.tangent);
  }
  return out;
}

Dual mul(const Dual& a, const Dual& b) {
  Dual out(mul(a.primal, b.primal));
  std::optional<Var> ta, tb;
  if (a.tangent) ta = mul(*a.tangent, b.primal);
  if (b.tangent) tb = mul(a.primal, *b.tangent);
  out.tangent = sum_opt(ta, tb);
  return out;
}

Dual div(const Dual& a, const Dual& b) {
  Dual out(div(a.primal, b.primal));
  std::optional<Var> ta, tb;
  if (a.tangent) ta = div(*a.tangent, b.primal);
  if (b.tangent) tb = neg(div(mul(out.primal, *b.tangent), b.primal));
  out.tangent = sum_opt(ta, tb);
  return out;
}

Dual neg(const Dual& a) {
  Dual out(neg(a.primal));
  if (a.tangent) out.tangent = neg(*a.tangent);
  return out;
}

Dual scale(const Dual& a, double c) {
  Dual out(scale(a.primal, c));
  if (a.tangent) out.tangent = scale(*a.tangent, c);
  return out;
}

Dual add_scalar(const Dual& a, double c) {
  Dual out(add_scalar(a.primal, c));
  out.tangent = a.tangent;
  return out;
}

Dual exp(const Dual& a) {
  Dual out(exp(a.primal));
  if (a.tangent) out.tangent = mul(out.primal, *a.tangent);
  return out;
}

Dual log(const Dual& a) {
  Dual out(log(a.primal));
  if (a.tangent) out.tangent = div(*a.tangent, a.primal);
  return out;
}

Dual sigmoid(const Dual& a) {
  Dual out(sigmoid(a.primal));
  if (a.tangent) {
    const Var slope = mul(out.primal, add_scalar(neg(out.primal), 1.0));
    out.tangent = mul(slope, *a.tangent);
  }
  return out;
}

Dual silu(const Dual& a) {
  Dual out(silu(a.primal));
  if (a.tangent) out.tangent = mul(silu_deriv(a.primal), *a.tangent);
  return out;
}

Dual sum(const Dual& a) {
  Dual out(sum(a.primal));
  if (a.tangent) out.tangent = sum(*a.tangent);
  return out;
}

Dual row_sum(const Dual& a) {
  Dual out(row_sum(a.primal));
  if (a.tangent) out.tangent = row_sum(*a.tangent);
  return out;
}

Dual dot(const Dual& a, const Dual& b) {
  Dual out(dot(a.primal, b.primal));
  std::optional<Var> ta, tb;
  if (a.tangent) ta = dot(*a.tangent, b.primal);
  if (b.tangent) tb = dot(a.primal, *b.tangent);
  out.tangent = sum_opt(ta, tb);
  return out;
}

Dual matmul(const Dual& a, const Dual& b) {
  Dual out(matmul(a.primal, b.primal));
  std::optional<Var> ta, tb;
  if (a.tangent) ta = matmul(*a.tangent, b.primal);
  if (b.tangent) tb = matmul(a.primal, *b.tangent);
  out.tangent = sum_opt(ta, tb);
  return out;
}

Dual add_row_broadcast(const Dual& a, const Dual& bias) {
  Dual out(add_row_broadcast(a.primal, bias.primal));
  if (bias.tangent) {
    out.tangent = add_row_broadcast(a.tangent_or_zero(), *bias.tangent);
  } else {
    out.tangent = a.tangent;
  }
  return out;
}

Dual mul_col_broadcast(const Dual& column, const Dual& m) {
  Dual out(mul_col_broadcast(column.primal, m.primal));
  std::optional<Var> tc, tm;
  if (column.tangent) tc = mul_col_broadcast(*column.tangent, m.primal);
  if (m.tangent) tm = mul_col_broadcast(column.primal, *m.tangent);
  out.tangent = sum_opt(tc, tm);
  return out;
}

Dual hcat(const Dual& left, const Dual& right) {
  Dual out(hcat(left.primal, right.primal));
  if (left.tangent || right.tangent) {
    out.tangent = hcat(left.tangent_or_zero(), right.tangent_or_zero());
  }
  return out;
}

Dual cols(const Dual& a, Eigen::Index start, Eigen::Index count) {
  Dual out(cols(a.primal, start, count));
  if (a.tangent) out.tangent = cols(*a.tangent, start, count);
  return out;
}

// ---------------------------------------------------------------------------

Var jvp(const DualFn& f, const Var& x, const Var& direction) {
  same_shape(x, direction, "jvp");
  const Dual y = f(Dual(x, direction));
  return y.tangent_or_zero();
}

Var jvp(const DualFn& f, const Var& x, const Matrix& direction) {
  return jvp(f, x, x.tape().constant(direction));
}

double check_grad_fd(const GraphFn& f, std::span<const double> x, double h) {
  const auto m = static_cast<Eigen::Index>(x.size());
  const Matrix x0 = Eigen::Map<const Matrix>(x.data(), 1, m);

  std::vector<double> analytic;
  {
    Tape tape;
    const Var in = tape.leaf(x0);
    const Var out = f(in);
    const std::vector<Var> wrt{in};
    analytic = reverse_grad(out, wrt);
  }

  auto eval = [&](const Matrix& at) {
    Tape tape;
    const double v = f(tape.leaf(at)).scalar();
    if (!std::isfinite(v)) throw NumericError("check_grad_fd", "f is not finite near x");
    return v;
  };

  double worst = 0.0;
  for (Eigen::Index j = 0; j < m; ++j) {
    Matrix plus = x0, minus = x0;
    plus(0, j) += h;
    minus(0, j) -= h;
    const double central = (eval(plus) - eval(minus)) / (2.0 * h);
    const double err =
        std::abs(analytic[static_cast<std::size_t>(j)] - central) / (std::abs(central) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace chowflow::diff
