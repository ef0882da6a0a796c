#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "shortcut/kernels.hpp"
#include "shortcut/tensor.hpp"

// Reverse-mode automatic differentiation over Tensor values.
//
// Every backward rule is itself written with differentiable ops, so gradients
// produced with create_graph = true can be differentiated again. The loss
// terms that penalize input or latent gradients rely on this.
namespace shortcut::ad {

class Var;

struct Node {
  Tensor value;
  bool requires_grad = false;
  std::vector<Var> inputs;
  // Maps the gradient w.r.t. this node's value to gradients w.r.t. each
  // input; an empty Var means "no contribution".
  std::function<std::vector<Var>(const Var&)> backward;
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Node* node() const { return node_.get(); }

  static Var from_node(std::shared_ptr<Node> node) {
    Var v;
    v.node_ = std::move(node);
    return v;
  }

 private:
  std::shared_ptr<Node> node_;
};

// Graph recording is on by default; NoGradGuard switches it off for the
// current thread.
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

class EnableGradGuard {
 public:
  EnableGradGuard();
  ~EnableGradGuard();
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool previous_;
};

// Gradients of `output` (any shape; seeded with `seed`, default all ones)
// w.r.t. each entry of `wrt`. Inputs not reached get zero gradients.
std::vector<Var> grad(const Var& output, const std::vector<Var>& wrt, bool create_graph = false,
                      const Var& seed = Var());

// Elementwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var mul_const(const Var& a, const Tensor& c);
Var scale(const Var& a, double s);
Var exp(const Var& a);
Var relu(const Var& a);
// g * step(ref > 0); differentiable in g only, `ref` is treated as constant.
Var relu_mask(const Var& g, const Var& ref);

// Reductions / shape.
Var sum(const Var& a);  // rank-0 result
Var expand(const Var& scalar, const Shape& shape);
Var reshape(const Var& a, const Shape& shape);
Var rowsum(const Var& a);                     // [N,K] -> [N,1]
Var row_broadcast(const Var& a, std::size_t k);  // [N,1] -> [N,K]
Var pick(const Var& a, const std::vector<std::size_t>& cols);        // [N,K] -> [N]
Var unpick(const Var& a, const std::vector<std::size_t>& cols, std::size_t k);

// Linear algebra.
Var matmul(const Var& a, const Var& b);  // [M,K] x [K,N]
Var transpose(const Var& a);             // 2D

// Convolution family.
Var conv2d(const Var& x, const Var& w, kernels::ConvGeometry g);
Var conv2d_input_grad(const Var& gy, const Var& w, const Shape& x_shape, kernels::ConvGeometry g);
Var conv2d_weight_grad(const Var& x, const Var& gy, const Shape& w_shape, kernels::ConvGeometry g);
Var add_channel_bias(const Var& x, const Var& b);
Var channel_sum(const Var& x);
Var channel_broadcast(const Var& v, const Shape& shape);

// Pooling via fixed index maps.
Var max_pool(const Var& x, std::size_t kh, std::size_t kw);
Var gather(const Var& x, kernels::PoolIndex index, const Shape& out_shape);
Var scatter(const Var& y, kernels::PoolIndex index, const Shape& in_shape);

// Row-wise log-softmax for [N,K].
Var log_softmax(const Var& x);

}  // namespace shortcut::ad
