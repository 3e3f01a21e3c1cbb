#include "chowflow/control_net.hpp"

#include <algorithm>
#include <cmath>

#include "chowflow/errors.hpp"
#include "chowflow/rng.hpp"

namespace chowflow::nets {

using diff::Dual;
using diff::Matrix;
using diff::Var;

std::size_t ParamStore::add(std::string name, std::size_t rows, std::size_t cols) {
  layout_.push_back(Slice{std::move(name), flat_.size(), rows, cols});
  flat_.resize(flat_.size() + rows * cols, 0.0);
  return layout_.size() - 1;
}

std::span<double> ParamStore::view(std::size_t slice) {
  const Slice& s = layout_.at(slice);
  return std::span<double>(flat_).subspan(s.offset, s.size());
}

std::span<const double> ParamStore::view(std::size_t slice) const {
  const Slice& s = layout_.at(slice);
  return std::span<const double>(flat_).subspan(s.offset, s.size());
}

Matrix ParamStore::matrix(std::size_t slice) const {
  const Slice& s = layout_.at(slice);
  return Eigen::Map<const Matrix>(flat_.data() + s.offset, static_cast<Eigen::Index>(s.rows),
                                  static_cast<Eigen::Index>(s.cols));
}

void ParamStore::assign(std::span<const double> values) {
  if (values.size() != flat_.size()) {
    throw ContractError("ParamStore::assign: expected " + std::to_string(flat_.size()) +
                        " values, got " + std::to_string(values.size()));
  }
  std::copy(values.begin(), values.end(), flat_.begin());
}

std::size_t MlpSpec::parameter_count() const {
  std::size_t count = 0;
  std::size_t fan_in = input_dim;
  for (std::size_t width : hidden) {
    count += fan_in * width + width;
    fan_in = width;
  }
  return count + fan_in + 1;
}

void MlpSpec::validate() const {
  if (input_dim < 2) throw ContractError("MlpSpec: input must be (t, x) with dim(x) >= 1");
  for (std::size_t width : hidden) {
    if (width == 0) throw ContractError("MlpSpec: hidden widths must be positive");
  }
}

ControlNet::ControlNet(MlpSpec spec, ParamStore params)
    : spec_(std::move(spec)), params_(std::move(params)) {
  spec_.validate();
  const auto& layout = params_.layout();
  if (layout.size() != 2 * layer_count() || params_.size() != spec_.parameter_count()) {
    throw ContractError("ControlNet: parameter layout does not match spec");
  }
  std::size_t fan_in = spec_.input_dim;
  for (std::size_t l = 0; l < layer_count(); ++l) {
    const std::size_t fan_out = l < spec_.hidden.size() ? spec_.hidden[l] : 1;
    if (layout[2 * l].rows != fan_in || layout[2 * l].cols != fan_out ||
        layout[2 * l + 1].rows != 1 || layout[2 * l + 1].cols != fan_out) {
      throw ContractError("ControlNet: layer " + std::to_string(l) + " has wrong shape");
    }
    fan_in = fan_out;
  }
}

ControlNet init_control_net(const MlpSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  ParamStore params;
  std::size_t fan_in = spec.input_dim;
  const std::size_t layers = spec.hidden.size() + 1;
  for (std::size_t l = 0; l < layers; ++l) {
    const bool output_layer = l + 1 == layers;
    const std::size_t fan_out = output_layer ? 1 : spec.hidden[l];
    const std::size_t w = params.add("W" + std::to_string(l), fan_in, fan_out);
    params.add("b" + std::to_string(l), 1, fan_out);
    if (!output_layer) {
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      for (double& v : params.view(w)) v = rng.uniform(-limit, limit);
    }
    fan_in = fan_out;
  }
  return ControlNet(spec, std::move(params));
}

std::vector<Var> BoundNet::leaves() const {
  std::vector<Var> out;
  out.reserve(weights.size() * 2);
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(weights[l]);
    out.push_back(biases[l]);
  }
  return out;
}

namespace {

BoundNet bind_impl(diff::Tape& tape, const ControlNet& net, bool trainable) {
  BoundNet bound;
  for (std::size_t l = 0; l < net.layer_count(); ++l) {
    Matrix w = net.params().matrix(2 * l);
    Matrix b = net.params().matrix(2 * l + 1);
    bound.weights.push_back(trainable ? tape.leaf(std::move(w)) : tape.constant(std::move(w)));
    bound.biases.push_back(trainable ? tape.leaf(std::move(b)) : tape.constant(std::move(b)));
  }
  return bound;
}

void check_input(const BoundNet& net, const Var& x) {
  if (net.weights.empty()) throw ContractError("control_forward: unbound net");
  if (x.cols() + 1 != net.weights.front().rows()) {
    throw ContractError("control_forward: x has " + std::to_string(x.cols()) +
                        " columns, net expects " +
                        std::to_string(net.weights.front().rows() - 1));
  }
}

template <typename T>
T run_layers(const BoundNet& net, T h) {
  const std::size_t last = net.weights.size() - 1;
  for (std::size_t l = 0; l <= last; ++l) {
    h = add_row_broadcast(matmul(h, T(net.weights[l])), T(net.biases[l]));
    if (l != last) h = silu(h);
  }
  return h;
}

}  // namespace

BoundNet bind(diff::Tape& tape, const ControlNet& net) { return bind_impl(tape, net, true); }

BoundNet bind_frozen(diff::Tape& tape, const ControlNet& net) {
  return bind_impl(tape, net, false);
}

Var control_forward(const BoundNet& net, double t, const Var& x) {
  check_input(net, x);
  const Var time = x.tape().constant(Matrix::Constant(x.rows(), 1, t));
  return run_layers(net, hcat(time, x));
}

Dual control_forward(const BoundNet& net, double t, const Dual& x) {
  check_input(net, x.primal);
  const Dual time(x.primal.tape().constant(Matrix::Constant(x.primal.rows(), 1, t)));
  return run_layers(net, hcat(time, x));
}

double control_value(const ControlNet& net, double t, std::span<const double> x) {
  if (x.size() != net.state_dim()) throw ContractError("control_value: dimension mismatch");
  diff::Tape tape;
  const BoundNet bound = bind_frozen(tape, net);
  const Var in = tape.constant(
      Eigen::Map<const Matrix>(x.data(), 1, static_cast<Eigen::Index>(x.size())));
  return control_forward(bound, t, in).scalar();
}

}  // namespace chowflow::nets
