#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "chowflow/diff.hpp"

namespace chowflow::nets {

/// Named contiguous block of a ParamStore holding a rows x cols matrix,
/// stored row-major.
struct Slice {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }

  bool operator==(const Slice&) const = default;
};

/// Flat parameter array with a layout of disjoint slices that tile it.
class ParamStore {
 public:
  /// Appends a zero-filled slice; returns its index.
  std::size_t add(std::string name, std::size_t rows, std::size_t cols);

  std::span<double> flat() { return flat_; }
  std::span<const double> flat() const { return flat_; }
  const std::vector<Slice>& layout() const { return layout_; }
  std::size_t size() const { return flat_.size(); }

  std::span<double> view(std::size_t slice);
  std::span<const double> view(std::size_t slice) const;
  diff::Matrix matrix(std::size_t slice) const;

  /// Overwrites the whole array; length must match.
  void assign(std::span<const double> values);

  bool operator==(const ParamStore&) const = default;

 private:
  std::vector<double> flat_;
  std::vector<Slice> layout_;
};

inline constexpr std::size_t kDefaultWidth = 128;

/// MLP mapping (t, x) in R^{1+d} to a scalar through SiLU hidden layers.
/// An empty hidden list is a single affine layer.
struct MlpSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden{kDefaultWidth, kDefaultWidth, kDefaultWidth};

  /// Default three-layer width-128 spec for state dimension d.
  static MlpSpec for_dimension(std::size_t d) { return MlpSpec{d + 1}; }
  /// sum over layers of fan_in * fan_out + fan_out.
  std::size_t parameter_count() const;
  void validate() const;

  bool operator==(const MlpSpec&) const = default;
};

/// Scalar control a(t, x; theta). Layer l has weight slice 2l (fan_in x
/// fan_out, so a layer computes H W + b) and bias slice 2l + 1 (1 x fan_out).
class ControlNet {
 public:
  ControlNet(MlpSpec spec, ParamStore params);

  const MlpSpec& spec() const { return spec_; }
  const ParamStore& params() const { return params_; }
  ParamStore& params() { return params_; }
  std::size_t layer_count() const { return spec_.hidden.size() + 1; }
  std::size_t state_dim() const { return spec_.input_dim - 1; }

 private:
  MlpSpec spec_;
  ParamStore params_;
};

/// Glorot-uniform hidden weights, zero biases, zero output layer (so the net
/// is identically zero until trained).
ControlNet init_control_net(const MlpSpec& spec, std::uint64_t seed);

/// Parameters of one net loaded onto a tape as leaves, in layout order.
struct BoundNet {
  std::vector<diff::Var> weights;
  std::vector<diff::Var> biases;

  /// Leaves interleaved W0, b0, W1, b1, ... to match ParamStore layout.
  std::vector<diff::Var> leaves() const;
};

BoundNet bind(diff::Tape& tape, const ControlNet& net);
/// Same, with constant (non-differentiable) parameters.
BoundNet bind_frozen(diff::Tape& tape, const ControlNet& net);

/// a(t, x) for each row of x (batch x d); returns batch x 1.
diff::Var control_forward(const BoundNet& net, double t, const diff::Var& x);
/// Forward with an x-tangent; the t input carries no tangent.
diff::Dual control_forward(const BoundNet& net, double t, const diff::Dual& x);

/// Convenience for a single point on a fresh graph.
double control_value(const ControlNet& net, double t, std::span<const double> x);

}  // namespace chowflow::nets
