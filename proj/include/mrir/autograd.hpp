#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "mrir/tensor.hpp"

// Tape-free reverse-mode differentiation: every op result keeps shared ownership
// of its inputs plus a closure that pushes its gradient back into them.
namespace mrir::ag {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  // Zero-filled on first use.
  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& grad_buffer() { return node_->grad_buffer(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  const Shape& shape() const { return node_->value.shape(); }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& handle() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }
  void zero_grad();

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
Var leaf(Tensor value, bool requires_grad);

// Seeds d(root)/d(root) = 1; root must hold a single element.
void backward(const Var& root);

bool grad_enabled();

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var silu(const Var& x);
Var leaky_relu(const Var& x, double slope);
Var reshape(const Var& x, Shape shape);

// reductions to a scalar [1]
Var sum(const Var& x);
Var mean(const Var& x);
Var mse(const Var& pred, const Var& target);
Var l1_mean(const Var& pred, const Var& target);
// mean over channels and frequency bins of |Re(D)| + |Im(D)|, D = DFT2(pred) - DFT2(target),
// per channel of [C, H, W] inputs, unnormalized transform.
Var fft_l1(const Var& pred, const Var& target);

// token algebra on [N, D]
Var linear(const Var& x, const Var& weight, const Var& bias);  // weight [out, in], bias [out] or empty
Var matmul(const Var& a, const Var& b);                        // [N, M] x [M, D]
Var matmul_nt(const Var& a, const Var& b);                     // [N, D] x [M, D]^T
Var softmax_rows(const Var& x);
Var slice_cols(const Var& x, int start, int count);
Var concat_cols(const std::vector<Var>& parts);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// feature maps [C, H, W]
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);  // weight [O, C, k, k]
Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps = 1e-5);
Var upsample_nearest2(const Var& x);
Var concat_channels(const Var& a, const Var& b);
Var add_channel_vector(const Var& x, const Var& v);  // v holds C values in any shape
Var to_tokens(const Var& x);                         // [C, H, W] -> [H*W, C]
Var from_tokens(const Var& t, int h, int w);         // [H*W, C] -> [C, H, W]

}  // namespace mrir::ag
