// SPDX-License-Identifier: Apache-2.0
#include "kiop/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace kiop::nn {

namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapCM = Eigen::Map<const MatRM>;

int g_num_threads = 0;

int effective_threads() {
#ifdef _OPENMP
  return g_num_threads > 0 ? g_num_threads : omp_get_max_threads();
#else
  return 1;
#endif
}

/// Runs fn(chunk_index, begin, end) over [0, n) split into fixed-size chunks.
/// Chunk boundaries do not depend on the thread count, so any per-chunk
/// partial results can be reduced in chunk order for bit-stable output.
template <typename F>
void parallel_chunks(std::int64_t n, std::int64_t chunk, F &&fn) {
  if (n <= 0) return;
  std::int64_t n_chunks = (n + chunk - 1) / chunk;
  if (effective_threads() <= 1 || n_chunks == 1) {
    for (std::int64_t c = 0; c < n_chunks; ++c)
      fn(c, c * chunk, std::min(n, (c + 1) * chunk));
    return;
  }
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) num_threads(effective_threads())
#endif
  for (std::int64_t c = 0; c < n_chunks; ++c)
    fn(c, c * chunk, std::min(n, (c + 1) * chunk));
}

void check_same_shape(const NodePtr &a, const NodePtr &b, const char *what) {
  if (!a->value.same_shape(b->value))
    throw ShapeMismatch(std::string(what) + ": operand shapes differ");
}

NodePtr unary_map(NodePtr x, float (*f)(float),
                  std::function<float(float y, float xi)> dfdx_from) {
  const auto n = x->value.numel();
  Tensor out(x->value.shape());
  const float *xs = x->value.data();
  float *ys = out.data();
  for (std::int64_t i = 0; i < n; ++i) ys[i] = f(xs[i]);
  Tensor saved = out;
  Tensor xin = x->value;
  return make_op(std::move(out), {std::move(x)},
                 [saved, xin, dfdx_from, n](Node &self) {
                   auto &p = *self.parents[0];
                   if (!p.requires_grad) return;
                   float *pg = p.ensure_grad().data();
                   const float *g = self.grad.data();
                   const float *y = saved.data();
                   const float *xi = xin.data();
                   for (std::int64_t i = 0; i < n; ++i)
                     pg[i] += g[i] * dfdx_from(y[i], xi[i]);
                 });
}

} // namespace

void set_num_threads(int n) { g_num_threads = n; }
int num_threads() { return effective_threads(); }

// ---------------------------------------------------------------- elementwise

NodePtr add(NodePtr a, NodePtr b) {
  check_same_shape(a, b, "add");
  const auto n = a->value.numel();
  Tensor out(a->value.shape());
  const float *pa = a->value.data(), *pb = b->value.data();
  float *po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  return make_op(std::move(out), {std::move(a), std::move(b)}, [n](Node &self) {
    for (int k = 0; k < 2; ++k)
      if (self.parents[k]->requires_grad)
        accumulate(*self.parents[k], self.grad.data(), n);
  });
}

NodePtr sub(NodePtr a, NodePtr b) {
  check_same_shape(a, b, "sub");
  const auto n = a->value.numel();
  Tensor out(a->value.shape());
  const float *pa = a->value.data(), *pb = b->value.data();
  float *po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  return make_op(std::move(out), {std::move(a), std::move(b)}, [n](Node &self) {
    if (self.parents[0]->requires_grad)
      accumulate(*self.parents[0], self.grad.data(), n);
    if (self.parents[1]->requires_grad) {
      float *pg = self.parents[1]->ensure_grad().data();
      const float *g = self.grad.data();
      for (std::int64_t i = 0; i < n; ++i) pg[i] -= g[i];
    }
  });
}

NodePtr mul(NodePtr a, NodePtr b) {
  check_same_shape(a, b, "mul");
  const auto n = a->value.numel();
  Tensor out(a->value.shape());
  Tensor va = a->value, vb = b->value;
  const float *pa = va.data(), *pb = vb.data();
  float *po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  return make_op(std::move(out), {std::move(a), std::move(b)},
                 [va, vb, n](Node &self) {
                   const float *g = self.grad.data();
                   if (self.parents[0]->requires_grad) {
                     float *pg = self.parents[0]->ensure_grad().data();
                     const float *o = vb.data();
                     for (std::int64_t i = 0; i < n; ++i) pg[i] += g[i] * o[i];
                   }
                   if (self.parents[1]->requires_grad) {
                     float *pg = self.parents[1]->ensure_grad().data();
                     const float *o = va.data();
                     for (std::int64_t i = 0; i < n; ++i) pg[i] += g[i] * o[i];
                   }
                 });
}

NodePtr scale(NodePtr x, float c) {
  const auto n = x->value.numel();
  Tensor out(x->value.shape());
  const float *xs = x->value.data();
  float *po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = xs[i] * c;
  return make_op(std::move(out), {std::move(x)}, [c, n](Node &self) {
    auto &p = *self.parents[0];
    if (!p.requires_grad) return;
    float *pg = p.ensure_grad().data();
    const float *g = self.grad.data();
    for (std::int64_t i = 0; i < n; ++i) pg[i] += g[i] * c;
  });
}

NodePtr add_scalar(NodePtr x, float c) {
  const auto n = x->value.numel();
  Tensor out(x->value.shape());
  const float *xs = x->value.data();
  float *po = out.data();
  for (std::int64_t i = 0; i < n; ++i) po[i] = xs[i] + c;
  return make_op(std::move(out), {std::move(x)}, [n](Node &self) {
    auto &p = *self.parents[0];
    if (p.requires_grad) accumulate(p, self.grad.data(), n);
  });
}

NodePtr relu(NodePtr x) {
  return unary_map(std::move(x), [](float v) { return v > 0.f ? v : 0.f; },
                   [](float, float xi) { return xi > 0.f ? 1.f : 0.f; });
}

NodePtr leaky_relu(NodePtr x, float slope) {
  const auto n = x->value.numel();
  Tensor out(x->value.shape());
  Tensor xin = x->value;
  const float *xs = xin.data();
  float *po = out.data();
  for (std::int64_t i = 0; i < n; ++i)
    po[i] = xs[i] > 0.f ? xs[i] : slope * xs[i];
  return make_op(std::move(out), {std::move(x)}, [xin, slope, n](Node &self) {
    auto &p = *self.parents[0];
    if (!p.requires_grad) return;
    float *pg = p.ensure_grad().data();
    const float *g = self.grad.data();
    const float *xi = xin.data();
    for (std::int64_t i = 0; i < n; ++i)
      pg[i] += g[i] * (xi[i] > 0.f ? 1.f : slope);
  });
}

NodePtr tanh_op(NodePtr x) {
  return unary_map(std::move(x), [](float v) { return std::tanh(v); },
                   [](float y, float) { return 1.f - y * y; });
}

NodePtr exp_op(NodePtr x) {
  return unary_map(std::move(x), [](float v) { return std::exp(v); },
                   [](float y, float) { return y; });
}

NodePtr square(NodePtr x) {
  return unary_map(std::move(x), [](float v) { return v * v; },
                   [](float, float xi) { return 2.f * xi; });
}

// --------------------------------------------------------------------- shape

NodePtr reshape(NodePtr x, std::vector<std::int64_t> shape) {
  Tensor out = x->value.clone().reshaped(std::move(shape));
  const auto n = out.numel();
  return make_op(std::move(out), {std::move(x)}, [n](Node &self) {
    auto &p = *self.parents[0];
    if (p.requires_grad) accumulate(p, self.grad.data(), n);
  });
}

NodePtr concat_rows(NodePtr a, NodePtr b) {
  if (a->value.ndim() != 2 || b->value.ndim() != 2 ||
      a->value.dim(1) != b->value.dim(1))
    throw ShapeMismatch("concat_rows: incompatible shapes");
  const auto na = a->value.dim(0), nb = b->value.dim(0), d = a->value.dim(1);
  Tensor out({na + nb, d});
  std::memcpy(out.data(), a->value.data(), sizeof(float) * na * d);
  std::memcpy(out.data() + na * d, b->value.data(), sizeof(float) * nb * d);
  return make_op(std::move(out), {std::move(a), std::move(b)},
                 [na, nb, d](Node &self) {
                   if (self.parents[0]->requires_grad)
                     accumulate(*self.parents[0], self.grad.data(), na * d);
                   if (self.parents[1]->requires_grad)
                     accumulate(*self.parents[1], self.grad.data() + na * d,
                                nb * d);
                 });
}

NodePtr concat_cols(NodePtr a, NodePtr b) {
  if (a->value.ndim() != 2 || b->value.ndim() != 2 ||
      a->value.dim(0) != b->value.dim(0))
    throw ShapeMismatch("concat_cols: incompatible shapes");
  const auto n = a->value.dim(0), da = a->value.dim(1), db = b->value.dim(1);
  Tensor out({n, da + db});
  for (std::int64_t i = 0; i < n; ++i) {
    std::memcpy(out.data() + i * (da + db), a->value.data() + i * da,
                sizeof(float) * da);
    std::memcpy(out.data() + i * (da + db) + da, b->value.data() + i * db,
                sizeof(float) * db);
  }
  return make_op(std::move(out), {std::move(a), std::move(b)},
                 [n, da, db](Node &self) {
                   const float *g = self.grad.data();
                   if (self.parents[0]->requires_grad) {
                     float *pg = self.parents[0]->ensure_grad().data();
                     for (std::int64_t i = 0; i < n; ++i)
                       for (std::int64_t j = 0; j < da; ++j)
                         pg[i * da + j] += g[i * (da + db) + j];
                   }
                   if (self.parents[1]->requires_grad) {
                     float *pg = self.parents[1]->ensure_grad().data();
                     for (std::int64_t i = 0; i < n; ++i)
                       for (std::int64_t j = 0; j < db; ++j)
                         pg[i * db + j] += g[i * (da + db) + da + j];
                   }
                 });
}

NodePtr crop(NodePtr x, int top, int left, int h, int w) {
  if (x->value.ndim() != 4) throw ShapeMismatch("crop expects NCHW");
  const auto N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
             W = x->value.dim(3);
  if (top < 0 || left < 0 || top + h > H || left + w > W)
    throw ShapeMismatch("crop region out of bounds");
  Tensor out({N, C, h, w});
  const float *xs = x->value.data();
  float *po = out.data();
  for (std::int64_t nc = 0; nc < N * C; ++nc)
    for (int i = 0; i < h; ++i)
      std::memcpy(po + (nc * h + i) * w, xs + (nc * H + top + i) * W + left,
                  sizeof(float) * w);
  return make_op(std::move(out), {std::move(x)},
                 [N, C, H, W, top, left, h, w](Node &self) {
                   auto &p = *self.parents[0];
                   if (!p.requires_grad) return;
                   float *pg = p.ensure_grad().data();
                   const float *g = self.grad.data();
                   for (std::int64_t nc = 0; nc < N * C; ++nc)
                     for (int i = 0; i < h; ++i) {
                       const float *gr = g + (nc * h + i) * w;
                       float *pr = pg + (nc * H + top + i) * W + left;
                       for (int j = 0; j < w; ++j) pr[j] += gr[j];
                     }
                 });
}

NodePtr hflip(NodePtr x) {
  if (x->value.ndim() != 4) throw ShapeMismatch("hflip expects NCHW");
  const auto N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
             W = x->value.dim(3);
  Tensor out(x->value.shape());
  const float *xs = x->value.data();
  float *po = out.data();
  for (std::int64_t r = 0; r < N * C * H; ++r)
    for (std::int64_t j = 0; j < W; ++j) po[r * W + j] = xs[r * W + (W - 1 - j)];
  return make_op(std::move(out), {std::move(x)}, [N, C, H, W](Node &self) {
    auto &p = *self.parents[0];
    if (!p.requires_grad) return;
    float *pg = p.ensure_grad().data();
    const float *g = self.grad.data();
    for (std::int64_t r = 0; r < N * C * H; ++r)
      for (std::int64_t j = 0; j < W; ++j)
        pg[r * W + (W - 1 - j)] += g[r * W + j];
  });
}

NodePtr stop_grad(NodePtr x) { return constant(x->value); }

// ---------------------------------------------------------------- reductions

NodePtr sum_all(NodePtr x) {
  const auto n = x->value.numel();
  double acc = 0.0;
  const float *xs = x->value.data();
  for (std::int64_t i = 0; i < n; ++i) acc += xs[i];
  Tensor out({1});
  out.data()[0] = static_cast<float>(acc);
  return make_op(std::move(out), {std::move(x)}, [n](Node &self) {
    auto &p = *self.parents[0];
    if (!p.requires_grad) return;
    float *pg = p.ensure_grad().data();
    const float g = self.grad.data()[0];
    for (std::int64_t i = 0; i < n; ++i) pg[i] += g;
  });
}

NodePtr mean_all(NodePtr x) {
  const auto n = x->value.numel();
  return scale(sum_all(std::move(x)), 1.f / static_cast<float>(n));
}

NodePtr row_sum(NodePtr x) {
  if (x->value.ndim() != 2) throw ShapeMismatch("row_sum expects 2-D");
  const auto n = x->value.dim(0), k = x->value.dim(1);
  Tensor out({n, 1});
  const float *xs = x->value.data();
  for (std::int64_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < k; ++j) acc += xs[i * k + j];
    out.data()[i] = static_cast<float>(acc);
  }
  return make_op(std::move(out), {std::move(x)}, [n, k](Node &self) {
    auto &p = *self.parents[0];
    if (!p.requires_grad) return;
    float *pg = p.ensure_grad().data();
    const float *g = self.grad.data();
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < k; ++j) pg[i * k + j] += g[i];
  });
}

namespace {
void channel_stats(const Tensor &x, std::vector<double> &mean,
                   std::vector<double> &var) {
  const auto N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const double M = static_cast<double>(N * HW);
  mean.assign(C, 0.0);
  var.assign(C, 0.0);
  const float *xs = x.data();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const float *p = xs + (n * C + c) * HW;
      double acc = 0.0;
      for (std::int64_t i = 0; i < HW; ++i) acc += p[i];
      mean[c] += acc;
    }
  for (std::int64_t c = 0; c < C; ++c) mean[c] /= M;
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const float *p = xs + (n * C + c) * HW;
      double acc = 0.0;
      for (std::int64_t i = 0; i < HW; ++i) {
        double d = p[i] - mean[c];
        acc += d * d;
      }
      var[c] += acc;
    }
  for (std::int64_t c = 0; c < C; ++c) var[c] /= M;
}
} // namespace

NodePtr channel_mean(NodePtr x) {
  if (x->value.ndim() != 4) throw ShapeMismatch("channel_mean expects NCHW");
  const auto N = x->value.dim(0), C = x->value.dim(1),
             HW = x->value.dim(2) * x->value.dim(3);
  std::vector<double> m, v;
  channel_stats(x->value, m, v);
  Tensor out({C});
  for (std::int64_t c = 0; c < C; ++c) out.data()[c] = static_cast<float>(m[c]);
  const float invM = 1.f / static_cast<float>(N * HW);
  return make_op(std::move(out), {std::move(x)}, [N, C, HW, invM](Node &self) {
    auto &p = *self.parents[0];
    if (!p.requires_grad) return;
    float *pg = p.ensure_grad().data();
    const float *g = self.grad.data();
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        float gc = g[c] * invM;
        float *pp = pg + (n * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) pp[i] += gc;
      }
  });
}

NodePtr channel_var(NodePtr x) {
  if (x->value.ndim() != 4) throw ShapeMismatch("channel_var expects NCHW");
  const auto N = x->value.dim(0), C = x->value.dim(1),
             HW = x->value.dim(2) * x->value.dim(3);
  std::vector<double> m, v;
  channel_stats(x->value, m, v);
  Tensor out({C});
  Tensor meansT({C});
  for (std::int64_t c = 0; c < C; ++c) {
    out.data()[c] = static_cast<float>(v[c]);
    meansT.data()[c] = static_cast<float>(m[c]);
  }
  Tensor xin = x->value;
  const float invM = 1.f / static_cast<float>(N * HW);
  // d var_c / d x_i = 2 (x_i - mean_c) / M; the mean dependence cancels.
  return make_op(std::move(out), {std::move(x)},
                 [N, C, HW, invM, xin, meansT](Node &self) {
                   auto &p = *self.parents[0];
                   if (!p.requires_grad) return;
                   float *pg = p.ensure_grad().data();
                   const float *g = self.grad.data();
                   const float *xs = xin.data();
                   const float *mu = meansT.data();
                   for (std::int64_t n = 0; n < N; ++n)
                     for (std::int64_t c = 0; c < C; ++c) {
                       const float gc = 2.f * g[c] * invM;
                       const float mc = mu[c];
                       const float *xp = xs + (n * C + c) * HW;
                       float *pp = pg + (n * C + c) * HW;
                       for (std::int64_t i = 0; i < HW; ++i)
                         pp[i] += gc * (xp[i] - mc);
                     }
                 });
}

// ------------------------------------------------------------ linear algebra

NodePtr linear(NodePtr x, NodePtr w, NodePtr b) {
  if (x->value.ndim() != 2 || w->value.ndim() != 2 ||
      x->value.dim(1) != w->value.dim(1))
    throw ShapeMismatch("linear: shape mismatch");
  const auto N = x->value.dim(0), D = x->value.dim(1), K = w->value.dim(0);
  if (b && b->value.numel() != K) throw ShapeMismatch("linear: bias size");
  Tensor out({N, K});
  {
    MapCM X(x->value.data(), N, D), W(w->value.data(), K, D);
    MapM Y(out.data(), N, K);
    Y.noalias() = X * W.transpose();
    if (b) {
      const float *bs = b->value.data();
      float *ys = out.data();
      for (std::int64_t i = 0; i < N; ++i)
        for (std::int64_t j = 0; j < K; ++j) ys[i * K + j] += bs[j];
    }
  }
  Tensor xin = x->value, win = w->value;
  std::vector<NodePtr> parents{std::move(x), std::move(w)};
  if (b) parents.push_back(std::move(b));
  return make_op(std::move(out), std::move(parents),
                 [N, D, K, xin, win](Node &self) {
                   MapCM G(self.grad.data(), N, K);
                   if (self.parents[0]->requires_grad) {
                     MapM DX(self.parents[0]->ensure_grad().data(), N, D);
                     MapCM W(win.data(), K, D);
                     DX.noalias() += G * W;
                   }
                   if (self.parents[1]->requires_grad) {
                     MapM DW(self.parents[1]->ensure_grad().data(), K, D);
                     MapCM X(xin.data(), N, D);
                     DW.noalias() += G.transpose() * X;
                   }
                   if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                     float *db = self.parents[2]->ensure_grad().data();
                     const float *g = self.grad.data();
                     for (std::int64_t i = 0; i < N; ++i)
                       for (std::int64_t j = 0; j < K; ++j) db[j] += g[i * K + j];
                   }
                 });
}

NodePtr matmul_nt(NodePtr a, NodePtr b) {
  if (a->value.ndim() != 2 || b->value.ndim() != 2 ||
      a->value.dim(1) != b->value.dim(1))
    throw ShapeMismatch("matmul_nt: inner dims differ");
  const auto M = a->value.dim(0), D = a->value.dim(1), N = b->value.dim(0);
  Tensor out({M, N});
  {
    MapCM A(a->value.data(), M, D), B(b->value.data(), N, D);
    MapM Y(out.data(), M, N);
    Y.noalias() = A * B.transpose();
  }
  Tensor av = a->value, bv = b->value;
  return make_op(std::move(out), {std::move(a), std::move(b)},
                 [M, D, N, av, bv](Node &self) {
                   MapCM G(self.grad.data(), M, N);
                   if (self.parents[0]->requires_grad) {
                     MapM DA(self.parents[0]->ensure_grad().data(), M, D);
                     MapCM B(bv.data(), N, D);
                     DA.noalias() += G * B;
                   }
                   if (self.parents[1]->requires_grad) {
                     MapM DB(self.parents[1]->ensure_grad().data(), N, D);
                     MapCM A(av.data(), M, D);
                     DB.noalias() += G.transpose() * A;
                   }
                 });
}

// ----------------------------------------------------------------- conv nets

namespace {

struct ConvDims {
  std::int64_t N, C, H, W, F, K, OH, OW;
  int stride, pad;
};

void im2col_sample(const float *x, const ConvDims &d, float *col) {
  const std::int64_t OHOW = d.OH * d.OW;
  for (std::int64_t c = 0; c < d.C; ++c) {
    for (std::int64_t ki = 0; ki < d.K; ++ki) {
      for (std::int64_t kj = 0; kj < d.K; ++kj) {
        float *dst = col + ((c * d.K + ki) * d.K + kj) * OHOW;
        const float *xc = x + c * d.H * d.W;
        for (std::int64_t oh = 0; oh < d.OH; ++oh) {
          const std::int64_t ih = oh * d.stride - d.pad + ki;
          float *drow = dst + oh * d.OW;
          if (ih < 0 || ih >= d.H) {
            std::memset(drow, 0, sizeof(float) * d.OW);
            continue;
          }
          const float *xrow = xc + ih * d.W;
          for (std::int64_t ow = 0; ow < d.OW; ++ow) {
            const std::int64_t iw = ow * d.stride - d.pad + kj;
            drow[ow] = (iw >= 0 && iw < d.W) ? xrow[iw] : 0.f;
          }
        }
      }
    }
  }
}

void col2im_sample(const float *col, const ConvDims &d, float *dx) {
  const std::int64_t OHOW = d.OH * d.OW;
  for (std::int64_t c = 0; c < d.C; ++c) {
    for (std::int64_t ki = 0; ki < d.K; ++ki) {
      for (std::int64_t kj = 0; kj < d.K; ++kj) {
        const float *src = col + ((c * d.K + ki) * d.K + kj) * OHOW;
        float *xc = dx + c * d.H * d.W;
        for (std::int64_t oh = 0; oh < d.OH; ++oh) {
          const std::int64_t ih = oh * d.stride - d.pad + ki;
          if (ih < 0 || ih >= d.H) continue;
          float *xrow = xc + ih * d.W;
          const float *srow = src + oh * d.OW;
          for (std::int64_t ow = 0; ow < d.OW; ++ow) {
            const std::int64_t iw = ow * d.stride - d.pad + kj;
            if (iw >= 0 && iw < d.W) xrow[iw] += srow[ow];
          }
        }
      }
    }
  }
}

constexpr std::int64_t kConvChunk = 8;

} // namespace

NodePtr conv2d(NodePtr x, NodePtr w, NodePtr b, int stride, int pad) {
  if (x->value.ndim() != 4 || w->value.ndim() != 4)
    throw ShapeMismatch("conv2d expects NCHW input and FCKK weights");
  ConvDims d;
  d.N = x->value.dim(0);
  d.C = x->value.dim(1);
  d.H = x->value.dim(2);
  d.W = x->value.dim(3);
  d.F = w->value.dim(0);
  d.K = w->value.dim(2);
  d.stride = stride;
  d.pad = pad;
  if (w->value.dim(1) != d.C || w->value.dim(3) != d.K)
    throw ShapeMismatch("conv2d: weight shape mismatch");
  d.OH = (d.H + 2 * pad - d.K) / stride + 1;
  d.OW = (d.W + 2 * pad - d.K) / stride + 1;
  if (d.OH <= 0 || d.OW <= 0) throw ShapeMismatch("conv2d: input too small");

  const std::int64_t CKK = d.C * d.K * d.K, OHOW = d.OH * d.OW;
  Tensor out({d.N, d.F, d.OH, d.OW});
  {
    const float *xs = x->value.data();
    const float *ws = w->value.data();
    const float *bs = b ? b->value.data() : nullptr;
    float *ys = out.data();
    parallel_chunks(d.N, kConvChunk, [&](std::int64_t, std::int64_t n0,
                                         std::int64_t n1) {
      std::vector<float> col(CKK * OHOW);
      MapCM W(ws, d.F, CKK);
      for (std::int64_t n = n0; n < n1; ++n) {
        im2col_sample(xs + n * d.C * d.H * d.W, d, col.data());
        MapCM Col(col.data(), CKK, OHOW);
        MapM Y(ys + n * d.F * OHOW, d.F, OHOW);
        Y.noalias() = W * Col;
        if (bs)
          for (std::int64_t f = 0; f < d.F; ++f)
            Y.row(f).array() += bs[f];
      }
    });
  }

  Tensor xin = x->value, win = w->value;
  std::vector<NodePtr> parents{std::move(x), std::move(w)};
  if (b) parents.push_back(std::move(b));
  return make_op(std::move(out), std::move(parents), [d, CKK, OHOW, xin,
                                                      win](Node &self) {
    const bool need_dx = self.parents[0]->requires_grad;
    const bool need_dw = self.parents[1]->requires_grad;
    const bool need_db =
        self.parents.size() > 2 && self.parents[2]->requires_grad;
    const float *g = self.grad.data();

    if (need_db) {
      float *db = self.parents[2]->ensure_grad().data();
      for (std::int64_t n = 0; n < d.N; ++n)
        for (std::int64_t f = 0; f < d.F; ++f) {
          const float *gp = g + (n * d.F + f) * OHOW;
          double acc = 0.0;
          for (std::int64_t i = 0; i < OHOW; ++i) acc += gp[i];
          db[f] += static_cast<float>(acc);
        }
    }

    const std::int64_t n_chunks = (d.N + kConvChunk - 1) / kConvChunk;
    std::vector<std::vector<float>> dw_parts;
    if (need_dw) dw_parts.assign(n_chunks, std::vector<float>(d.F * CKK, 0.f));

    float *dx = nullptr;
    if (need_dx) dx = self.parents[0]->ensure_grad().data();

    const float *ws = win.data();
    const float *xs = xin.data();
    parallel_chunks(d.N, kConvChunk, [&](std::int64_t ci, std::int64_t n0,
                                         std::int64_t n1) {
      std::vector<float> col(CKK * OHOW);
      std::vector<float> dcol(need_dx ? CKK * OHOW : 0);
      MapCM W(ws, d.F, CKK);
      for (std::int64_t n = n0; n < n1; ++n) {
        MapCM G(g + n * d.F * OHOW, d.F, OHOW);
        if (need_dw) {
          im2col_sample(xs + n * d.C * d.H * d.W, d, col.data());
          MapCM Col(col.data(), CKK, OHOW);
          MapM DW(dw_parts[ci].data(), d.F, CKK);
          DW.noalias() += G * Col.transpose();
        }
        if (need_dx) {
          MapM DCol(dcol.data(), CKK, OHOW);
          DCol.noalias() = W.transpose() * G;
          col2im_sample(dcol.data(), d, dx + n * d.C * d.H * d.W);
        }
      }
    });

    if (need_dw) {
      float *dw = self.parents[1]->ensure_grad().data();
      for (std::int64_t ci = 0; ci < n_chunks; ++ci) {
        const float *part = dw_parts[ci].data();
        for (std::int64_t i = 0; i < d.F * CKK; ++i) dw[i] += part[i];
      }
    }
  });
}

NodePtr maxpool2d(NodePtr x, int k, int stride) {
  if (x->value.ndim() != 4) throw ShapeMismatch("maxpool2d expects NCHW");
  const auto N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
             W = x->value.dim(3);
  const std::int64_t OH = (H - k) / stride + 1, OW = (W - k) / stride + 1;
  if (OH <= 0 || OW <= 0) throw ShapeMismatch("maxpool2d: input too small");
  Tensor out({N, C, OH, OW});
  auto argmax = std::make_shared<std::vector<std::int32_t>>(N * C * OH * OW);
  const float *xs = x->value.data();
  float *ys = out.data();
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const float *xp = xs + nc * H * W;
    for (std::int64_t oh = 0; oh < OH; ++oh)
      for (std::int64_t ow = 0; ow < OW; ++ow) {
        float best = -std::numeric_limits<float>::infinity();
        std::int32_t besti = 0;
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < k; ++j) {
            const std::int64_t idx = (oh * stride + i) * W + ow * stride + j;
            if (xp[idx] > best) {
              best = xp[idx];
              besti = static_cast<std::int32_t>(idx);
            }
          }
        ys[(nc * OH + oh) * OW + ow] = best;
        (*argmax)[(nc * OH + oh) * OW + ow] = besti;
      }
  }
  return make_op(std::move(out), {std::move(x)},
                 [N, C, H, W, OH, OW, argmax](Node &self) {
                   auto &p = *self.parents[0];
                   if (!p.requires_grad) return;
                   float *pg = p.ensure_grad().data();
                   const float *g = self.grad.data();
                   for (std::int64_t nc = 0; nc < N * C; ++nc)
                     for (std::int64_t o = 0; o < OH * OW; ++o)
                       pg[nc * H * W + (*argmax)[nc * OH * OW + o]] +=
                           g[nc * OH * OW + o];
                 });
}

NodePtr global_avg_pool(NodePtr x) {
  if (x->value.ndim() != 4) throw ShapeMismatch("global_avg_pool expects NCHW");
  const auto N = x->value.dim(0), C = x->value.dim(1),
             HW = x->value.dim(2) * x->value.dim(3);
  Tensor out({N, C});
  const float *xs = x->value.data();
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    double acc = 0.0;
    const float *p = xs + nc * HW;
    for (std::int64_t i = 0; i < HW; ++i) acc += p[i];
    out.data()[nc] = static_cast<float>(acc / static_cast<double>(HW));
  }
  return make_op(std::move(out), {std::move(x)}, [N, C, HW](Node &self) {
    auto &p = *self.parents[0];
    if (!p.requires_grad) return;
    float *pg = p.ensure_grad().data();
    const float *g = self.grad.data();
    const float inv = 1.f / static_cast<float>(HW);
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      const float gc = g[nc] * inv;
      float *pp = pg + nc * HW;
      for (std::int64_t i = 0; i < HW; ++i) pp[i] += gc;
    }
  });
}

NodePtr upsample_nearest2x(NodePtr x) {
  if (x->value.ndim() != 4) throw ShapeMismatch("upsample expects NCHW");
  const auto N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
             W = x->value.dim(3);
  Tensor out({N, C, H * 2, W * 2});
  const float *xs = x->value.data();
  float *ys = out.data();
  for (std::int64_t nc = 0; nc < N * C; ++nc)
    for (std::int64_t i = 0; i < H; ++i)
      for (std::int64_t j = 0; j < W; ++j) {
        const float v = xs[(nc * H + i) * W + j];
        float *o = ys + (nc * 2 * H + 2 * i) * 2 * W + 2 * j;
        o[0] = v;
        o[1] = v;
        o[2 * W] = v;
        o[2 * W + 1] = v;
      }
  return make_op(std::move(out), {std::move(x)}, [N, C, H, W](Node &self) {
    auto &p = *self.parents[0];
    if (!p.requires_grad) return;
    float *pg = p.ensure_grad().data();
    const float *g = self.grad.data();
    for (std::int64_t nc = 0; nc < N * C; ++nc)
      for (std::int64_t i = 0; i < H; ++i)
        for (std::int64_t j = 0; j < W; ++j) {
          const float *o = g + (nc * 2 * H + 2 * i) * 2 * W + 2 * j;
          pg[(nc * H + i) * W + j] += o[0] + o[1] + o[2 * W] + o[2 * W + 1];
        }
  });
}

NodePtr batch_norm2d(NodePtr x, NodePtr gamma, NodePtr beta,
                     BatchNormState &state, bool training, float momentum,
                     float eps) {
  if (x->value.ndim() != 4) throw ShapeMismatch("batch_norm2d expects NCHW");
  const auto N = x->value.dim(0), C = x->value.dim(1),
             HW = x->value.dim(2) * x->value.dim(3);
  if (gamma->value.numel() != C || beta->value.numel() != C ||
      state.running_mean.numel() != C)
    throw ShapeMismatch("batch_norm2d: channel mismatch");
  const std::int64_t M = N * HW;

  Tensor mean({C}), istd({C});
  if (training) {
    std::vector<double> m, v;
    channel_stats(x->value, m, v);
    for (std::int64_t c = 0; c < C; ++c) {
      mean.data()[c] = static_cast<float>(m[c]);
      istd.data()[c] = static_cast<float>(1.0 / std::sqrt(v[c] + eps));
    }
    // Torch convention: running variance tracks the unbiased estimate.
    const double unbias = M > 1 ? static_cast<double>(M) / (M - 1) : 1.0;
    for (std::int64_t c = 0; c < C; ++c) {
      state.running_mean.data()[c] = static_cast<float>(
          (1.0 - momentum) * state.running_mean.data()[c] + momentum * m[c]);
      state.running_var.data()[c] = static_cast<float>(
          (1.0 - momentum) * state.running_var.data()[c] +
          momentum * v[c] * unbias);
    }
  } else {
    for (std::int64_t c = 0; c < C; ++c) {
      mean.data()[c] = state.running_mean.data()[c];
      istd.data()[c] =
          1.f / std::sqrt(state.running_var.data()[c] + eps);
    }
  }

  Tensor out(x->value.shape());
  {
    const float *xs = x->value.data();
    const float *gs = gamma->value.data();
    const float *bs = beta->value.data();
    float *ys = out.data();
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        const float mu = mean.data()[c], is = istd.data()[c];
        const float ga = gs[c], be = bs[c];
        const float *xp = xs + (n * C + c) * HW;
        float *yp = ys + (n * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i)
          yp[i] = (xp[i] - mu) * is * ga + be;
      }
  }

  Tensor xin = x->value, gin = gamma->value;
  return make_op(
      std::move(out), {std::move(x), std::move(gamma), std::move(beta)},
      [N, C, HW, M, training, mean, istd, xin, gin](Node &self) {
        const bool need_dx = self.parents[0]->requires_grad;
        const bool need_dg = self.parents[1]->requires_grad;
        const bool need_db = self.parents[2]->requires_grad;
        if (!need_dx && !need_dg && !need_db) return;
        const float *g = self.grad.data();
        const float *xs = xin.data();
        const float *gs = gin.data();

        // Per-channel sums of dy and dy*xhat.
        std::vector<double> s1(C, 0.0), s2(C, 0.0);
        for (std::int64_t n = 0; n < N; ++n)
          for (std::int64_t c = 0; c < C; ++c) {
            const float mu = mean.data()[c], is = istd.data()[c];
            const float *gp = g + (n * C + c) * HW;
            const float *xp = xs + (n * C + c) * HW;
            double a1 = 0.0, a2 = 0.0;
            for (std::int64_t i = 0; i < HW; ++i) {
              a1 += gp[i];
              a2 += static_cast<double>(gp[i]) * ((xp[i] - mu) * is);
            }
            s1[c] += a1;
            s2[c] += a2;
          }

        if (need_dg) {
          float *dg = self.parents[1]->ensure_grad().data();
          for (std::int64_t c = 0; c < C; ++c)
            dg[c] += static_cast<float>(s2[c]);
        }
        if (need_db) {
          float *db = self.parents[2]->ensure_grad().data();
          for (std::int64_t c = 0; c < C; ++c)
            db[c] += static_cast<float>(s1[c]);
        }
        if (need_dx) {
          float *dx = self.parents[0]->ensure_grad().data();
          const float invM = 1.f / static_cast<float>(M);
          for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t c = 0; c < C; ++c) {
              const float mu = mean.data()[c], is = istd.data()[c];
              const float ga = gs[c];
              const float m1 = static_cast<float>(s1[c]) * invM;
              const float m2 = static_cast<float>(s2[c]) * invM;
              const float *gp = g + (n * C + c) * HW;
              const float *xp = xs + (n * C + c) * HW;
              float *dp = dx + (n * C + c) * HW;
              if (training) {
                for (std::int64_t i = 0; i < HW; ++i) {
                  const float xh = (xp[i] - mu) * is;
                  dp[i] += ga * is * (gp[i] - m1 - xh * m2);
                }
              } else {
                for (std::int64_t i = 0; i < HW; ++i)
                  dp[i] += ga * is * gp[i];
              }
            }
        }
      });
}

// ------------------------------------------------------------ classification

NodePtr log_softmax(NodePtr x) {
  if (x->value.ndim() != 2) throw ShapeMismatch("log_softmax expects 2-D");
  const auto N = x->value.dim(0), K = x->value.dim(1);
  Tensor out({N, K});
  const float *xs = x->value.data();
  float *ys = out.data();
  for (std::int64_t i = 0; i < N; ++i) {
    const float *xr = xs + i * K;
    float m = xr[0];
    for (std::int64_t j = 1; j < K; ++j) m = std::max(m, xr[j]);
    double lse = 0.0;
    for (std::int64_t j = 0; j < K; ++j) lse += std::exp(static_cast<double>(xr[j] - m));
    const float logz = m + static_cast<float>(std::log(lse));
    for (std::int64_t j = 0; j < K; ++j) ys[i * K + j] = xr[j] - logz;
  }
  Tensor saved = out;
  return make_op(std::move(out), {std::move(x)}, [N, K, saved](Node &self) {
    auto &p = *self.parents[0];
    if (!p.requires_grad) return;
    float *pg = p.ensure_grad().data();
    const float *g = self.grad.data();
    const float *y = saved.data();
    for (std::int64_t i = 0; i < N; ++i) {
      double gsum = 0.0;
      for (std::int64_t j = 0; j < K; ++j) gsum += g[i * K + j];
      for (std::int64_t j = 0; j < K; ++j)
        pg[i * K + j] += g[i * K + j] -
                         std::exp(y[i * K + j]) * static_cast<float>(gsum);
    }
  });
}

NodePtr softmax(NodePtr x) { return exp_op(log_softmax(std::move(x))); }

NodePtr nll(NodePtr log_probs, const std::vector<int> &targets) {
  if (log_probs->value.ndim() != 2) throw ShapeMismatch("nll expects 2-D");
  const auto N = log_probs->value.dim(0), K = log_probs->value.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != N)
    throw ShapeMismatch("nll: target count mismatch");
  for (int t : targets)
    if (t < 0 || t >= K) throw InvalidLabel("nll: target out of range");
  double acc = 0.0;
  const float *xs = log_probs->value.data();
  for (std::int64_t i = 0; i < N; ++i) acc -= xs[i * K + targets[i]];
  Tensor out({1});
  out.data()[0] = static_cast<float>(acc / static_cast<double>(N));
  auto tgt = targets;
  return make_op(std::move(out), {std::move(log_probs)},
                 [N, K, tgt](Node &self) {
                   auto &p = *self.parents[0];
                   if (!p.requires_grad) return;
                   float *pg = p.ensure_grad().data();
                   const float g = self.grad.data()[0] / static_cast<float>(N);
                   for (std::int64_t i = 0; i < N; ++i)
                     pg[i * K + tgt[i]] -= g;
                 });
}

NodePtr gather_cols(NodePtr x, const std::vector<int> &indices) {
  if (x->value.ndim() != 2) throw ShapeMismatch("gather_cols expects 2-D");
  const auto N = x->value.dim(0), K = x->value.dim(1);
  const auto T = static_cast<std::int64_t>(indices.size());
  for (int i : indices)
    if (i < 0 || i >= K) throw ShapeMismatch("gather_cols: index out of range");
  Tensor out({N, T});
  const float *xs = x->value.data();
  for (std::int64_t i = 0; i < N; ++i)
    for (std::int64_t j = 0; j < T; ++j)
      out.data()[i * T + j] = xs[i * K + indices[j]];
  auto idx = indices;
  return make_op(std::move(out), {std::move(x)}, [N, K, T, idx](Node &self) {
    auto &p = *self.parents[0];
    if (!p.requires_grad) return;
    float *pg = p.ensure_grad().data();
    const float *g = self.grad.data();
    for (std::int64_t i = 0; i < N; ++i)
      for (std::int64_t j = 0; j < T; ++j)
        pg[i * K + idx[j]] += g[i * T + j];
  });
}

NodePtr pick(NodePtr x, std::int64_t row, std::int64_t col) {
  if (x->value.ndim() != 2) throw ShapeMismatch("pick expects 2-D");
  const auto K = x->value.dim(1);
  Tensor out({1});
  out.data()[0] = x->value.data()[row * K + col];
  return make_op(std::move(out), {std::move(x)}, [row, col, K](Node &self) {
    auto &p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad().data()[row * K + col] += self.grad.data()[0];
  });
}

// --------------------------------------------------------- geometry / images

NodePtr l2_normalize_rows(NodePtr x, float eps) {
  if (x->value.ndim() != 2) throw ShapeMismatch("l2_normalize expects 2-D");
  const auto N = x->value.dim(0), D = x->value.dim(1);
  Tensor out({N, D});
  Tensor norms({N});
  const float *xs = x->value.data();
  for (std::int64_t i = 0; i < N; ++i) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < D; ++j)
      acc += static_cast<double>(xs[i * D + j]) * xs[i * D + j];
    const float nrm = static_cast<float>(std::sqrt(acc + eps));
    norms.data()[i] = nrm;
    for (std::int64_t j = 0; j < D; ++j) out.data()[i * D + j] = xs[i * D + j] / nrm;
  }
  Tensor xin = x->value;
  return make_op(std::move(out), {std::move(x)}, [N, D, xin, norms](Node &self) {
    auto &p = *self.parents[0];
    if (!p.requires_grad) return;
    float *pg = p.ensure_grad().data();
    const float *g = self.grad.data();
    const float *xi = xin.data();
    for (std::int64_t i = 0; i < N; ++i) {
      const float nrm = norms.data()[i];
      double dot = 0.0;
      for (std::int64_t j = 0; j < D; ++j)
        dot += static_cast<double>(xi[i * D + j]) * g[i * D + j];
      const float d = static_cast<float>(dot) / (nrm * nrm * nrm);
      for (std::int64_t j = 0; j < D; ++j)
        pg[i * D + j] += g[i * D + j] / nrm - xi[i * D + j] * d;
    }
  });
}

namespace {

struct Lerp {
  std::int64_t lo, hi;
  float w_hi;
};

Lerp lerp_coord(std::int64_t out_i, std::int64_t in_size, std::int64_t out_size) {
  const double scale = static_cast<double>(in_size) / out_size;
  double src = (out_i + 0.5) * scale - 0.5;
  if (src < 0) src = 0;
  if (src > in_size - 1) src = in_size - 1;
  Lerp l;
  l.lo = static_cast<std::int64_t>(src);
  l.hi = std::min(l.lo + 1, in_size - 1);
  l.w_hi = static_cast<float>(src - l.lo);
  return l;
}

} // namespace

NodePtr bilinear_resize(NodePtr x, int out_h, int out_w) {
  if (x->value.ndim() != 4) throw ShapeMismatch("bilinear_resize expects NCHW");
  const auto N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
             W = x->value.dim(3);
  if (H == out_h && W == out_w) {
    // Identity resize keeps the graph shallow.
    const auto n = x->value.numel();
    Tensor out = x->value.clone();
    return make_op(std::move(out), {std::move(x)}, [n](Node &self) {
      if (self.parents[0]->requires_grad)
        accumulate(*self.parents[0], self.grad.data(), n);
    });
  }
  std::vector<Lerp> lh(out_h), lw(out_w);
  for (int i = 0; i < out_h; ++i) lh[i] = lerp_coord(i, H, out_h);
  for (int j = 0; j < out_w; ++j) lw[j] = lerp_coord(j, W, out_w);
  Tensor out({N, C, out_h, out_w});
  const float *xs = x->value.data();
  float *ys = out.data();
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const float *xp = xs + nc * H * W;
    float *yp = ys + nc * out_h * out_w;
    for (int i = 0; i < out_h; ++i)
      for (int j = 0; j < out_w; ++j) {
        const auto &a = lh[i];
        const auto &b = lw[j];
        const float v00 = xp[a.lo * W + b.lo], v01 = xp[a.lo * W + b.hi];
        const float v10 = xp[a.hi * W + b.lo], v11 = xp[a.hi * W + b.hi];
        yp[i * out_w + j] = (1 - a.w_hi) * ((1 - b.w_hi) * v00 + b.w_hi * v01) +
                            a.w_hi * ((1 - b.w_hi) * v10 + b.w_hi * v11);
      }
  }
  return make_op(std::move(out), {std::move(x)},
                 [N, C, H, W, out_h, out_w, lh, lw](Node &self) {
                   auto &p = *self.parents[0];
                   if (!p.requires_grad) return;
                   float *pg = p.ensure_grad().data();
                   const float *g = self.grad.data();
                   for (std::int64_t nc = 0; nc < N * C; ++nc) {
                     float *pp = pg + nc * H * W;
                     const float *gp = g + nc * out_h * out_w;
                     for (int i = 0; i < out_h; ++i)
                       for (int j = 0; j < out_w; ++j) {
                         const auto &a = lh[i];
                         const auto &b = lw[j];
                         const float gv = gp[i * out_w + j];
                         pp[a.lo * W + b.lo] += (1 - a.w_hi) * (1 - b.w_hi) * gv;
                         pp[a.lo * W + b.hi] += (1 - a.w_hi) * b.w_hi * gv;
                         pp[a.hi * W + b.lo] += a.w_hi * (1 - b.w_hi) * gv;
                         pp[a.hi * W + b.hi] += a.w_hi * b.w_hi * gv;
                       }
                   }
                 });
}

NodePtr batched_crop_resize(NodePtr x, const std::vector<CropSpec> &specs,
                            int out_side) {
  if (x->value.ndim() != 4) throw ShapeMismatch("crop_resize expects NCHW");
  const auto N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
             W = x->value.dim(3);
  if (static_cast<std::int64_t>(specs.size()) != N)
    throw ShapeMismatch("crop_resize: one spec per sample required");
  for (const auto &s : specs)
    if (s.size <= 0 || s.top < 0 || s.left < 0 || s.top + s.size > H ||
        s.left + s.size > W)
      throw ShapeMismatch("crop_resize: spec out of bounds");

  Tensor out({N, C, out_side, out_side});
  const float *xs = x->value.data();
  float *ys = out.data();
  auto run = [&](std::int64_t n, const CropSpec &s, float *dst) {
    std::vector<Lerp> li(out_side), lj(out_side);
    for (int i = 0; i < out_side; ++i) li[i] = lerp_coord(i, s.size, out_side);
    for (int j = 0; j < out_side; ++j) lj[j] = lerp_coord(j, s.size, out_side);
    for (std::int64_t c = 0; c < C; ++c) {
      const float *xp = xs + (n * C + c) * H * W;
      float *yp = dst + c * out_side * out_side;
      for (int i = 0; i < out_side; ++i)
        for (int j = 0; j < out_side; ++j) {
          const int jj = s.flip ? out_side - 1 - j : j;
          const auto &a = li[i];
          const auto &b = lj[jj];
          const std::int64_t r0 = (s.top + a.lo) * W + s.left,
                             r1 = (s.top + a.hi) * W + s.left;
          const float v00 = xp[r0 + b.lo], v01 = xp[r0 + b.hi];
          const float v10 = xp[r1 + b.lo], v11 = xp[r1 + b.hi];
          yp[i * out_side + j] =
              (1 - a.w_hi) * ((1 - b.w_hi) * v00 + b.w_hi * v01) +
              a.w_hi * ((1 - b.w_hi) * v10 + b.w_hi * v11);
        }
    }
  };
  for (std::int64_t n = 0; n < N; ++n)
    run(n, specs[n], ys + n * C * out_side * out_side);

  auto sp = specs;
  return make_op(std::move(out), {std::move(x)},
                 [N, C, H, W, out_side, sp](Node &self) {
                   auto &p = *self.parents[0];
                   if (!p.requires_grad) return;
                   float *pg = p.ensure_grad().data();
                   const float *g = self.grad.data();
                   for (std::int64_t n = 0; n < N; ++n) {
                     const auto &s = sp[n];
                     std::vector<Lerp> li(out_side), lj(out_side);
                     for (int i = 0; i < out_side; ++i)
                       li[i] = lerp_coord(i, s.size, out_side);
                     for (int j = 0; j < out_side; ++j)
                       lj[j] = lerp_coord(j, s.size, out_side);
                     for (std::int64_t c = 0; c < C; ++c) {
                       float *pp = pg + (n * C + c) * H * W;
                       const float *gp =
                           g + (n * C + c) * out_side * out_side;
                       for (int i = 0; i < out_side; ++i)
                         for (int j = 0; j < out_side; ++j) {
                           const int jj = s.flip ? out_side - 1 - j : j;
                           const auto &a = li[i];
                           const auto &b = lj[jj];
                           const float gv = gp[i * out_side + j];
                           float *r0 = pp + (s.top + a.lo) * W + s.left;
                           float *r1 = pp + (s.top + a.hi) * W + s.left;
                           r0[b.lo] += (1 - a.w_hi) * (1 - b.w_hi) * gv;
                           r0[b.hi] += (1 - a.w_hi) * b.w_hi * gv;
                           r1[b.lo] += a.w_hi * (1 - b.w_hi) * gv;
                           r1[b.hi] += a.w_hi * b.w_hi * gv;
                         }
                     }
                   }
                 });
}

NodePtr channel_affine(NodePtr x, const std::vector<float> &scale,
                       const std::vector<float> &shift) {
  if (x->value.ndim() != 4) throw ShapeMismatch("channel_affine expects NCHW");
  const auto N = x->value.dim(0), C = x->value.dim(1),
             HW = x->value.dim(2) * x->value.dim(3);
  if (static_cast<std::int64_t>(scale.size()) != C ||
      static_cast<std::int64_t>(shift.size()) != C)
    throw ShapeMismatch("channel_affine: channel count mismatch");
  Tensor out(x->value.shape());
  const float *xs = x->value.data();
  float *ys = out.data();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const float sc = scale[c], sh = shift[c];
      const float *xp = xs + (n * C + c) * HW;
      float *yp = ys + (n * C + c) * HW;
      for (std::int64_t i = 0; i < HW; ++i) yp[i] = xp[i] * sc + sh;
    }
  auto sc = scale;
  return make_op(std::move(out), {std::move(x)}, [N, C, HW, sc](Node &self) {
    auto &p = *self.parents[0];
    if (!p.requires_grad) return;
    float *pg = p.ensure_grad().data();
    const float *g = self.grad.data();
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        const float s = sc[c];
        const float *gp = g + (n * C + c) * HW;
        float *pp = pg + (n * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) pp[i] += gp[i] * s;
      }
  });
}

} // namespace kiop::nn
