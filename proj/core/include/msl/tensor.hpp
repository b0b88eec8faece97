#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace msl {

// Dense row-major tensor of 64-bit reals with reverse-mode autodiff.
//
// Ops record a DAG as they execute whenever an input requires gradients.
// backward() walks that DAG once in reverse topological order and
// accumulates d(loss)/d(leaf) into each requires-grad leaf. Calling
// backward() again without zero_grad() adds another full gradient on top
// (accumulate semantics).

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

enum class OpKind {
  leaf,
  add,
  sub,
  mul,
  scale,
  sum,
  sigmoid,
  relu,
  conv2d,
  linear,
  gap,
  bce,
  laco,
};

struct Node;
using NodePtr = std::shared_ptr<Node>;

class BackwardPass;

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // leaf accumulator, lazily allocated
  bool requires_grad = false;
  OpKind kind = OpKind::leaf;
  std::vector<NodePtr> parents;
  std::function<void(const Node& self, const std::vector<double>& gout,
                     BackwardPass& bp)>
      vjp;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
};

// Per-invocation gradient workspace. Intermediate gradients live here and
// are discarded when the pass ends; only leaves keep their accumulators.
class BackwardPass {
 public:
  std::vector<double>& slot(const Node* node);
  bool has(const Node* node) const;
  // gout += values (allocating a zeroed slot on first touch)
  void accumulate(const Node* node, std::span<const double> values);

 private:
  std::unordered_map<const Node*, std::vector<double>> grads_;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t numel() const;
  bool requires_grad() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();  // in-place edits (optimizer, fills)

  // Scalar tensors only.
  double value() const;

  // Gradient of a leaf; empty span until a backward pass reaches it.
  std::span<const double> grad() const;
  void zero_grad();

  // Deep copy of the values; the copy is a fresh leaf.
  Tensor copy(bool requires_grad = false) const;

  bool all_finite() const;
  uint64_t fingerprint() const;  // FNV-1a over shape and data bytes

  detail::NodePtr node() const { return node_; }
  static Tensor wrap(detail::NodePtr node);

 private:
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}
  detail::NodePtr node_;
};

// Elementwise; shapes must match exactly (no broadcasting).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

// Full reduction to a scalar of shape {1}.
Tensor sum(const Tensor& a);

// out = 1/(1+exp(-x)), computed in the sign-split stable form.
Tensor sigmoid(const Tensor& x);

// max(0, x); subgradient at exactly 0 is 0.
Tensor relu(const Tensor& x);

// Cross-correlation. x: [N,C,H,W], kernel: [F,C,kh,kw], bias: [F].
// Output [N,F,Ho,Wo] with Ho = (H + 2*padding - kh)/stride + 1.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              int stride = 1, int padding = 0);

// out = x * weight^T + bias. x: [N,D], weight: [K,D], bias: [K].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Spatial mean per channel: [N,C,H,W] -> [N,C].
Tensor global_avg_pool(const Tensor& x);

// Mean binary cross-entropy over all N*K entries. Targets must be exactly
// 0 or 1. When pred is the direct output of sigmoid(), the loss and its
// gradient are computed in the fused logit form (stable for any |logit|);
// otherwise probabilities are clamped to [1e-12, 1-1e-12].
Tensor bce_loss(const Tensor& pred, const Tensor& target);

// Mean over rows of the squared L2 distance between a and b ([N,K] each).
// Gradients flow into both arguments.
Tensor consistency_loss(const Tensor& a, const Tensor& b);

// Populate gradients of every requires-grad leaf reachable from loss.
// loss must be a scalar produced by recorded operations.
void backward(const Tensor& loss);

}  // namespace msl
