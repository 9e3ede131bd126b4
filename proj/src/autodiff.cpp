// SPDX-License-Identifier: Apache-2.0
#include "kiop/autodiff.hpp"

#include <unordered_set>

namespace kiop::nn {

namespace {
thread_local bool g_grad_enabled = true;
} // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

NodePtr leaf(Tensor value, bool requires_grad, std::string name) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->name = std::move(name);
  return n;
}

NodePtr constant(Tensor value) { return leaf(std::move(value), false); }

NodePtr make_op(Tensor value, std::vector<NodePtr> parents,
                std::function<void(Node &)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool need = false;
  if (g_grad_enabled) {
    for (const auto &p : parents)
      if (p && p->requires_grad) { need = true; break; }
  }
  if (need) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

void accumulate(Node &dst, const float *src, std::int64_t n) {
  float *g = dst.ensure_grad().data();
  for (std::int64_t i = 0; i < n; ++i) g[i] += src[i];
}

void backward(const NodePtr &root) {
  if (!root || !root->requires_grad) return;
  if (root->value.numel() != 1)
    throw Error("backward() expects a scalar root");

  // Iterative post-order DFS; parents are visited in their stored order so
  // the reverse pass is deterministic.
  std::vector<Node *> order;
  std::unordered_set<Node *> visited;
  struct Frame {
    Node *node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({root.get(), 0});
  visited.insert(root.get());
  while (!stack.empty()) {
    Frame &f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Node *p = f.node->parents[f.next_parent++].get();
      if (p && p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  root->ensure_grad().fill(1.f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node *n = *it;
    if (n->backward_fn && n->grad.defined()) n->backward_fn(*n);
  }
}

} // namespace kiop::nn
