#pragma once

// Dense row-major tensors with reverse-mode differentiation.
//
// A Tensor is a shared handle onto a graph node. Operators build new nodes
// that remember their parents and a backward closure; Tensor::backward()
// walks the graph in reverse topological order and accumulates gradients
// into every node that requires them. Broadcasting is limited to a
// right-aligned suffix (leading-batch broadcast).
//
// The scalar type is float by default; defining HM_REAL64 switches the whole
// library to double (used by the gradient-check builds).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hm/types.hpp"

namespace hm::ad {

#ifdef HM_REAL64
using Real = double;
#else
using Real = float;
#endif

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

class ShapeError : public Error {
 public:
  using Error::Error;
};

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  std::span<Real> grad_span();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real v, bool requires_grad = false);

  /// Builds an operator result. The node records `parents` and `backward`
  /// only if gradient recording is on and some parent requires a gradient.
  static Tensor make(Shape shape, std::vector<Real> values, std::vector<Tensor> parents,
                     std::function<void(Node&)> backward, const char* op);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  /// Extent of axis `i`; negative indices count from the end.
  std::size_t dim(int i) const;
  std::size_t size() const { return node_->value.size(); }

  std::span<const Real> data() const { return node_->value; }
  std::span<Real> mutable_data() { return node_->value; }
  /// Empty until a backward pass reaches this node.
  std::span<const Real> grad() const { return node_->grad; }
  Real item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad();

  /// Accumulates d(this)/d(x) into every reachable x. `this` must be a scalar.
  void backward() const;

  /// Deep copy of value (no graph, no grad).
  Tensor clone() const;
  /// Same value, detached from the graph.
  Tensor detach() const { return clone(); }

  Node* node() const { return node_.get(); }
  const NodePtr& node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

/// Gradient recording is on by default; the guard disables it on this thread.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// When on, every operator result is checked for NaN/Inf.
void set_check_finite(bool on);
bool check_finite();

// Elementwise. `b` may match `a` or a right-aligned suffix of it.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real c);
Tensor gelu(const Tensor& x);

/// a: [..., M, K]; b: [K, N] (shared) or [..., K, N] (same leading dims).
Tensor matmul(const Tensor& a, const Tensor& b);
/// x: [..., in] times w: [in, out] plus bias [out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor transpose_last2(const Tensor& x);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor reshape(const Tensor& x, Shape shape);

Tensor softmax_last(const Tensor& x);
/// Normalizes over the last axis, then applies gamma/beta of shape [C].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps = 1e-5);

/// Inverted dropout. Row b (leading axis) draws its mask from the counter
/// stream keyed by row_keys[b]. p == 0 is the identity.
Tensor dropout(const Tensor& x, double p, std::span<const std::uint64_t> row_keys);

/// x: [B, T, C], w: [C, K] (K odd), bias: [C]; zero "same" padding.
Tensor depthwise_conv1d(const Tensor& x, const Tensor& w, const Tensor& bias);
/// x: [B, Cin, H, W], w: [Cout, Cin, K, K], bias: [Cout].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride, std::size_t pad);

/// Mean over one axis (removed from the result).
Tensor mean_axis(const Tensor& x, std::size_t axis);
Tensor sum(const Tensor& x);
Tensor concat_last(const Tensor& a, const Tensor& b);
Tensor slice_last(const Tensor& x, std::size_t start, std::size_t len);

/// table: [H, 2*clip+1] -> [H, T, T] with out[h,i,j] = table[h, clamp(j-i) + clip].
Tensor relative_position_bias(const Tensor& table, std::size_t length, std::size_t clip);

struct Parameter {
  std::string name;
  Tensor tensor;
};

/// Finite-difference check of the gradient of `loss` (a scalar rebuilt from
/// the current parameter values on each call). Samples up to
/// `coords_per_param` coordinates per parameter and returns the maximum of
/// |analytic - numeric| / max(|analytic| + |numeric|, 1e-4). The floor keeps
/// exactly-zero gradients from turning rounding noise into a unit error.
double grad_check(const std::function<Tensor()>& loss, std::span<Parameter> params, double h,
                  std::size_t coords_per_param, std::uint64_t seed);

}  // namespace hm::ad
