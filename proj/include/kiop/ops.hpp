// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "kiop/autodiff.hpp"

namespace kiop::nn {

// ---- elementwise ----
NodePtr add(NodePtr a, NodePtr b);
NodePtr sub(NodePtr a, NodePtr b);
NodePtr mul(NodePtr a, NodePtr b);
NodePtr scale(NodePtr x, float c);
NodePtr add_scalar(NodePtr x, float c);
NodePtr relu(NodePtr x);
NodePtr leaky_relu(NodePtr x, float slope);
NodePtr tanh_op(NodePtr x);
NodePtr exp_op(NodePtr x);
NodePtr square(NodePtr x);

// ---- shape ----
NodePtr reshape(NodePtr x, std::vector<std::int64_t> shape);
NodePtr concat_rows(NodePtr a, NodePtr b);       // 2-D, along dim 0
NodePtr concat_cols(NodePtr a, NodePtr b);       // 2-D, along dim 1
NodePtr crop(NodePtr x, int top, int left, int h, int w); // NCHW spatial crop
NodePtr hflip(NodePtr x);                        // NCHW, reverses W
NodePtr stop_grad(NodePtr x);

// ---- reductions ----
NodePtr sum_all(NodePtr x);                      // -> {1}
NodePtr mean_all(NodePtr x);                     // -> {1}
NodePtr row_sum(NodePtr x);                      // (N,K) -> (N,1)
NodePtr channel_mean(NodePtr x);                 // (N,C,H,W) -> (C), over N,H,W
NodePtr channel_var(NodePtr x);                  // biased, over N,H,W

// ---- linear algebra ----
NodePtr linear(NodePtr x, NodePtr w, NodePtr b); // x:(N,D) w:(K,D) b:(K)
NodePtr matmul_nt(NodePtr a, NodePtr b);         // (M,D)x(N,D)^T -> (M,N)

// ---- conv nets ----
NodePtr conv2d(NodePtr x, NodePtr w, NodePtr b, int stride, int pad);
NodePtr maxpool2d(NodePtr x, int k, int stride);
NodePtr global_avg_pool(NodePtr x);              // (N,C,H,W) -> (N,C)
NodePtr upsample_nearest2x(NodePtr x);

struct BatchNormState {
  Tensor running_mean; // (C)
  Tensor running_var;  // (C), unbiased update, torch convention
};

/// Train mode normalizes with batch statistics and updates the running
/// state in place; eval mode uses the running state.
NodePtr batch_norm2d(NodePtr x, NodePtr gamma, NodePtr beta,
                     BatchNormState &state, bool training,
                     float momentum = 0.1f, float eps = 1e-5f);

// ---- classification ----
NodePtr log_softmax(NodePtr x);                  // rows of (N,K)
NodePtr softmax(NodePtr x);
NodePtr nll(NodePtr log_probs, const std::vector<int> &targets); // -> {1}
NodePtr gather_cols(NodePtr x, const std::vector<int> &indices);
NodePtr pick(NodePtr x, std::int64_t row, std::int64_t col);     // -> {1}

// ---- geometry / images ----
NodePtr l2_normalize_rows(NodePtr x, float eps = 1e-12f);
NodePtr bilinear_resize(NodePtr x, int out_h, int out_w);

struct CropSpec {
  int top = 0;
  int left = 0;
  int size = 0;  // square crop side in the source image
  bool flip = false;
};

/// Per-sample crop + bilinear resize back to out_side (+ optional hflip).
NodePtr batched_crop_resize(NodePtr x, const std::vector<CropSpec> &specs,
                            int out_side);

/// Per-channel affine y = x * scale[c] + shift[c]; constants, not learnable.
NodePtr channel_affine(NodePtr x, const std::vector<float> &scale,
                       const std::vector<float> &shift);

// ---- threading ----
void set_num_threads(int n); // 0 = hardware default
int num_threads();

} // namespace kiop::nn
