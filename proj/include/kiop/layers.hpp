// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "kiop/ops.hpp"
#include "kiop/rng.hpp"

namespace kiop::nn {

struct NamedTensor {
  std::string name;
  Tensor tensor; // shares storage with the owning layer
};

/// Conv layer with square kernels; weights follow the fan-in uniform init.
class Conv2d {
public:
  Conv2d(int in_ch, int out_ch, int k, int stride, int pad, Rng &rng,
         std::string name)
      : stride_(stride), pad_(pad), name_(std::move(name)) {
    Tensor w({out_ch, in_ch, k, k});
    Tensor b({out_ch});
    const float bound = 1.f / std::sqrt(static_cast<float>(in_ch) * k * k);
    rng.fill_uniform(w.data(), w.numel(), -bound, bound);
    rng.fill_uniform(b.data(), b.numel(), -bound, bound);
    w_ = leaf(std::move(w), true, name_ + ".weight");
    b_ = leaf(std::move(b), true, name_ + ".bias");
  }

  NodePtr operator()(NodePtr x) { return conv2d(std::move(x), w_, b_, stride_, pad_); }

  std::vector<NodePtr> parameters() { return {w_, b_}; }
  std::vector<NamedTensor> state() {
    return {{name_ + ".weight", w_->value}, {name_ + ".bias", b_->value}};
  }
  NodePtr weight() { return w_; }
  NodePtr bias() { return b_; }

private:
  NodePtr w_, b_;
  int stride_, pad_;
  std::string name_;
};

class BatchNorm2d {
public:
  BatchNorm2d(int ch, std::string name) : name_(std::move(name)) {
    gamma_ = leaf(Tensor::full({ch}, 1.f), true, name_ + ".gamma");
    beta_ = leaf(Tensor::zeros({ch}), true, name_ + ".beta");
    state_.running_mean = Tensor::zeros({ch});
    state_.running_var = Tensor::full({ch}, 1.f);
  }

  NodePtr operator()(NodePtr x) {
    if (capture_inputs) last_input = x;
    return batch_norm2d(std::move(x), gamma_, beta_, state_, training,
                        momentum, eps);
  }

  std::vector<NodePtr> parameters() { return {gamma_, beta_}; }
  std::vector<NamedTensor> state() {
    return {{name_ + ".gamma", gamma_->value},
            {name_ + ".beta", beta_->value},
            {name_ + ".running_mean", state_.running_mean},
            {name_ + ".running_var", state_.running_var}};
  }

  const Tensor &running_mean() const { return state_.running_mean; }
  const Tensor &running_var() const { return state_.running_var; }

  bool training = false;
  bool capture_inputs = false;
  NodePtr last_input; // pre-normalization activations, when captured
  float momentum = 0.1f;
  float eps = 1e-5f;

private:
  NodePtr gamma_, beta_;
  BatchNormState state_;
  std::string name_;
};

class Linear {
public:
  Linear(int in_dim, int out_dim, Rng &rng, std::string name)
      : name_(std::move(name)) {
    Tensor w({out_dim, in_dim});
    Tensor b({out_dim});
    const float bound = 1.f / std::sqrt(static_cast<float>(in_dim));
    rng.fill_uniform(w.data(), w.numel(), -bound, bound);
    rng.fill_uniform(b.data(), b.numel(), -bound, bound);
    w_ = leaf(std::move(w), true, name_ + ".weight");
    b_ = leaf(std::move(b), true, name_ + ".bias");
  }

  NodePtr operator()(NodePtr x) { return linear(std::move(x), w_, b_); }

  std::vector<NodePtr> parameters() { return {w_, b_}; }
  std::vector<NamedTensor> state() {
    return {{name_ + ".weight", w_->value}, {name_ + ".bias", b_->value}};
  }
  NodePtr weight() { return w_; }
  NodePtr bias() { return b_; }

private:
  NodePtr w_, b_;
  std::string name_;
};

} // namespace kiop::nn
