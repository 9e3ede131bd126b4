// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "kiop/tensor.hpp"

namespace kiop::nn {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the dynamic reverse-mode graph. Leaves are long-lived
/// (parameters); interior op nodes are rebuilt every forward pass.
struct Node {
  Tensor value;
  Tensor grad; // allocated on first use, same shape as value
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node &)> backward_fn;
  std::string name;

  Tensor &ensure_grad() {
    if (!grad.defined()) grad = Tensor::zeros(value.shape());
    return grad;
  }

  void zero_grad() {
    if (grad.defined()) grad.zero();
  }
};

NodePtr leaf(Tensor value, bool requires_grad = false, std::string name = {});
NodePtr constant(Tensor value);

/// Builds an op node. When gradients are globally disabled or no parent
/// requires them, the parents and closure are dropped so the graph stays
/// shallow in evaluation paths.
NodePtr make_op(Tensor value, std::vector<NodePtr> parents,
                std::function<void(Node &)> backward_fn);

bool grad_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard &) = delete;
  NoGradGuard &operator=(const NoGradGuard &) = delete;

private:
  bool prev_;
};

/// Reverse pass from a scalar root. Accumulates into leaf grads.
void backward(const NodePtr &root);

/// Adds src into dst.grad (allocating it first if needed).
void accumulate(Node &dst, const float *src, std::int64_t n);

} // namespace kiop::nn
