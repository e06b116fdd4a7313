#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

#include "eaa/common.hpp"

namespace eaa {

namespace detail {

// One node of the autodiff DAG. `parents` are the inputs of the op that
// produced this node; `backprop` pushes this node's gradient into theirs.
// Leaves have no backprop. Construction order is the topological order.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // leaves only; empty means "not populated yet"
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // gout: gradient w.r.t. this node. pg[i]: accumulation buffer for parent i,
  // nullptr when that parent does not need a gradient.
  std::function<void(const std::vector<double>& gout,
                     const std::vector<std::vector<double>*>& pg)>
      backprop;

  bool is_leaf() const { return !backprop; }
};

}  // namespace detail

// Value handle with reverse-mode autodiff. All data is double, row-major.
// Copying a Tensor copies the handle, not the storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor create(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor rand_uniform(Shape shape, double lo, double hi, SplitMix64& rng,
                             bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t rank() const;

  const std::vector<double>& data() const;
  // In-place edits are only meaningful on leaves (parameters, inputs).
  std::vector<double>& mutable_data();

  double at(std::initializer_list<std::size_t> index) const;
  // Value of a one-element tensor.
  double value() const;

  bool requires_grad() const;
  bool has_grad() const;
  const std::vector<double>& grad() const;
  // Zeros when no gradient has been populated; a leaf the loss never touched
  // has gradient zero by definition.
  std::vector<double> grad_or_zero() const;
  void zero_grad();

  // Reverse pass from a one-element tensor. Gradients of reachable
  // requires_grad leaves are accumulated additively; calling twice without
  // zero_grad doubles them.
  void backward() const;

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Elementwise arithmetic with trailing-dimension broadcasting: shapes are
// right-aligned, missing leading extents act as 1, and extent-1 axes stretch.
// Gradients of a broadcast input are summed over the stretched axes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
// c - a, elementwise.
Tensor sub_from_scalar(double c, const Tensor& a);
Tensor neg(const Tensor& a);
Tensor abs(const Tensor& a);
// ln(max(a, eps)); the gradient is zero where the clamp was active.
Tensor log_clamped(const Tensor& a, double eps);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// Reductions remove the given axes from the shape; axes must be in range and
// not repeated. An empty axis set is the identity. The *_all forms reduce to
// a one-element tensor of shape {1}.
Tensor reduce_sum(const Tensor& a, std::vector<std::size_t> axes);
Tensor reduce_sum_all(const Tensor& a);
Tensor reduce_mean(const Tensor& a, std::vector<std::size_t> axes);
Tensor reduce_mean_all(const Tensor& a);

// Softmax along one axis, as a differentiable primitive:
// grad_in = p * (gout - sum_axis(gout * p)).
Tensor softmax(const Tensor& a, std::size_t axis);

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis);

// x:[N,F] w:[O,F] -> [N,O]. No bias; the only dense layers in the network
// (squeeze-excite) do not use one.
Tensor linear(const Tensor& x, const Tensor& w);

// x:[N,Ci,H,W] w:[Co,Ci,k,k] b:[Co]. Cross-correlation with zero padding;
// output extents use floor division, H' = floor((H+2p-k)/s)+1.
Tensor conv2d_raw(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
                  std::size_t padding);

// x:[N,Ci,h,w] w:[Ci,Co,k,k] b:[Co] -> [N,Co,(h-1)s-2p+k+op,(w-1)s-2p+k+op].
// Exact transpose of conv2d_raw's linear map for matching stride/padding.
Tensor conv_transpose2d_raw(const Tensor& x, const Tensor& w, const Tensor& b,
                            std::size_t stride, std::size_t padding,
                            std::size_t output_padding);

// 2x2/stride-2 max pooling; extents must be even. Ties resolve to the first
// element in scan order, and the gradient routes to the saved argmax.
Tensor maxpool2d(const Tensor& x);

// Batch statistics over (N,H,W) per channel, biased variance for
// normalization. Requires N*H*W > 1. When batch_mean/batch_var are non-null
// the per-channel statistics are written there for running-average updates.
Tensor batchnorm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                       std::vector<double>* batch_mean, std::vector<double>* batch_var);

// Normalization by fixed statistics; differentiable in x, gamma, beta.
Tensor batchnorm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      const std::vector<double>& running_mean,
                      const std::vector<double>& running_var, double eps);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// Class index per pixel from scores [N,K,H,W], by argmax over the class axis
// (first max wins on ties). Not differentiable; used for predictions.
std::vector<std::uint8_t> argmax_channel(const Tensor& scores);

}  // namespace eaa
