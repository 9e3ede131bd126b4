// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "kiop/autodiff.hpp"

namespace kiop::nn {

/// Adam with per-group learning rates. Parameters whose grad was never
/// produced in the current step are skipped entirely (moments untouched),
/// so an untouched parameter is bit-identical after step().
class Adam {
public:
  struct Group {
    std::vector<NodePtr> params;
    float lr;
  };

  explicit Adam(std::vector<Group> groups, float beta1 = 0.9f,
                float beta2 = 0.999f, float eps = 1e-8f)
      : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto &g : groups_)
      for (auto &p : g.params) {
        m_.push_back(Tensor::zeros(p->value.shape()));
        v_.push_back(Tensor::zeros(p->value.shape()));
      }
  }

  Adam(std::vector<NodePtr> params, float lr)
      : Adam(std::vector<Group>{Group{std::move(params), lr}}) {}

  /// Multiplies every group's base lr by s for this and later steps.
  void set_lr_scale(float s) { lr_scale_ = s; }
  float lr_scale() const { return lr_scale_; }

  void step() {
    ++t_;
    const float bc1 = 1.f - std::pow(beta1_, static_cast<float>(t_));
    const float bc2 = 1.f - std::pow(beta2_, static_cast<float>(t_));
    std::size_t idx = 0;
    for (auto &g : groups_) {
      const float lr = g.lr * lr_scale_;
      for (auto &p : g.params) {
        const std::size_t i = idx++;
        if (!p->grad.defined()) continue;
        const auto n = p->value.numel();
        float *val = p->value.data();
        const float *gr = p->grad.data();
        float *m = m_[i].data();
        float *v = v_[i].data();
        for (std::int64_t j = 0; j < n; ++j) {
          m[j] = beta1_ * m[j] + (1.f - beta1_) * gr[j];
          v[j] = beta2_ * v[j] + (1.f - beta2_) * gr[j] * gr[j];
          const float mh = m[j] / bc1;
          const float vh = v[j] / bc2;
          val[j] -= lr * mh / (std::sqrt(vh) + eps_);
        }
      }
    }
  }

  void zero_grad() {
    for (auto &g : groups_)
      for (auto &p : g.params) p->zero_grad();
  }

private:
  std::vector<Group> groups_;
  std::vector<Tensor> m_, v_;
  float beta1_, beta2_, eps_;
  float lr_scale_ = 1.f;
  std::int64_t t_ = 0;
};

inline float cosine_lr_scale(std::int64_t step, std::int64_t total) {
  if (total <= 1) return 1.f;
  const double x = static_cast<double>(step) / static_cast<double>(total);
  return static_cast<float>(0.5 * (1.0 + std::cos(3.14159265358979323846 * x)));
}

} // namespace kiop::nn
