#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "idfcr/nn/tensor.hpp"

namespace idfcr::nn {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  bool retain_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into inputs that require grad.
  std::function<void(Node&)> backward_fn;

  void accumulate(const Tensor& g);
  Tensor& grad_buffer();
};

// Handle to a node in the dynamic graph. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(std::size_t axis) const { return node_->value.dim(axis); }
  std::size_t size() const { return node_->value.size(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  // Gradient, or zeros of the value's shape when none has been accumulated.
  Tensor grad() const;
  void zero_grad() { node_->grad = Tensor(); }
  // Keeps this interior node's gradient after backward().
  void retain_grad() { node_->retain_grad = true; }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

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

// Records an op result. The node keeps its inputs and backward only when
// grad mode is on and some input requires grad.
Var make_result(Tensor value, const std::vector<Var>& inputs,
                std::function<void(Node&)> backward_fn);

// Reverse-mode sweep from a scalar root; leaf gradients accumulate.
void backward(const Var& root);

}  // namespace idfcr::nn
