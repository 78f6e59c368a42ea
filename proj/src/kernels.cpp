// Copyright 2026 The Fundus Pipeline Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "fundus/kernels.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace fundus::kernels {
namespace {

constexpr long kParallelThreshold = 1 << 14;

// Column block for output rows [oy0, oy1): [patch, (oy1 - oy0) * ow].
void im2col(const ConvGeometry& g, const float* x, int oy0, int oy1, float* col) {
  const int ow = g.out_w();
  const long cols = static_cast<long>(oy1 - oy0) * ow;
  const int rows = g.patch();
#pragma omp parallel for schedule(static) if (rows * cols > kParallelThreshold)
  for (int r = 0; r < rows; ++r) {
    const int kj = r % g.kernel_w;
    const int ki = (r / g.kernel_w) % g.kernel_h;
    const int c = r / (g.kernel_w * g.kernel_h);
    const float* plane = x + static_cast<long>(c) * g.in_h * g.in_w;
    float* dst = col + r * cols;
    for (int oy = oy0; oy < oy1; ++oy) {
      const int iy = oy * g.stride - g.pad_h + ki;
      float* row = dst + static_cast<long>(oy - oy0) * ow;
      if (iy < 0 || iy >= g.in_h) {
        std::fill(row, row + ow, 0.0f);
        continue;
      }
      const float* src = plane + static_cast<long>(iy) * g.in_w;
      if (g.stride == 1) {
        const int shift = kj - g.pad_w;
        const int lo = std::clamp(-shift, 0, ow), hi = std::clamp(g.in_w - shift, lo, ow);
        std::fill(row, row + lo, 0.0f);
        std::copy(src + lo + shift, src + hi + shift, row + lo);
        std::fill(row + hi, row + ow, 0.0f);
      } else {
        for (int ox = 0; ox < ow; ++ox) {
          const int ix = ox * g.stride - g.pad_w + kj;
          row[ox] = (ix >= 0 && ix < g.in_w) ? src[ix] : 0.0f;
        }
      }
    }
  }
}

void col2im_accumulate(const ConvGeometry& g, const float* col, int oy0, int oy1, float* dx) {
  const int ow = g.out_w();
  const long cols = static_cast<long>(oy1 - oy0) * ow;
  const int taps = g.kernel_h * g.kernel_w;
  // One channel per iteration: every tap of channel c writes only into plane c.
#pragma omp parallel for schedule(static) if (g.patch() * cols > kParallelThreshold)
  for (int c = 0; c < g.in_channels; ++c) {
    float* plane = dx + static_cast<long>(c) * g.in_h * g.in_w;
    for (int t = 0; t < taps; ++t) {
      const int ki = t / g.kernel_w, kj = t % g.kernel_w;
      const float* src = col + (static_cast<long>(c) * taps + t) * cols;
      for (int oy = oy0; oy < oy1; ++oy) {
        const int iy = oy * g.stride - g.pad_h + ki;
        if (iy < 0 || iy >= g.in_h) continue;
        float* row = plane + static_cast<long>(iy) * g.in_w;
        const float* s = src + static_cast<long>(oy - oy0) * ow;
        if (g.stride == 1) {
          const int shift = kj - g.pad_w;
          const int lo = std::clamp(-shift, 0, ow), hi = std::clamp(g.in_w - shift, lo, ow);
          for (int ox = lo; ox < hi; ++ox) row[ox + shift] += s[ox];
        } else {
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * g.stride - g.pad_w + kj;
            if (ix >= 0 && ix < g.in_w) row[ix] += s[ox];
          }
        }
      }
    }
  }
}

// Output rows per column block, sized so one block stays cache resident.
int block_rows(const ConvGeometry& g) {
  constexpr long kBlockFloats = 1 << 17;
  const long per_row = static_cast<long>(g.patch()) * g.out_w();
  return static_cast<int>(std::clamp<long>(kBlockFloats / std::max<long>(per_row, 1), 1, g.out_h()));
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, int batch, std::span<const float> x, std::span<const float> weight,
                    std::span<const float> bias, std::span<float> y) {
  const int oh = g.out_h(), ow = g.out_w();
  const int out_plane = oh * ow;
  const int k = g.patch();
  const long in_stride = static_cast<long>(g.in_channels) * g.in_h * g.in_w;
  const long out_stride = static_cast<long>(g.out_channels) * out_plane;
  const int rows = block_rows(g);
  std::vector<float> col(g.pointwise() ? 0 : static_cast<std::size_t>(k) * rows * ow);
  for (int n = 0; n < batch; ++n) {
    const float* xn = x.data() + n * in_stride;
    float* yn = y.data() + n * out_stride;
    float beta = 0.0f;
    if (!bias.empty()) {
      for (int o = 0; o < g.out_channels; ++o)
        std::fill(yn + static_cast<long>(o) * out_plane, yn + static_cast<long>(o + 1) * out_plane, bias[o]);
      beta = 1.0f;
    }
    if (g.pointwise()) {
      cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, g.out_channels, out_plane, k, 1.0f, weight.data(), k,
                  xn, out_plane, beta, yn, out_plane);
      continue;
    }
    for (int oy0 = 0; oy0 < oh; oy0 += rows) {
      const int oy1 = std::min(oh, oy0 + rows);
      const int cols = (oy1 - oy0) * ow;
      im2col(g, xn, oy0, oy1, col.data());
      cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, g.out_channels, cols, k, 1.0f, weight.data(), k,
                  col.data(), cols, beta, yn + static_cast<long>(oy0) * ow, out_plane);
    }
  }
}

void conv2d_backward(const ConvGeometry& g, int batch, std::span<const float> x, std::span<const float> weight,
                     std::span<const float> dy, std::span<float> dx, std::span<float> dweight,
                     std::span<float> dbias) {
  const int oh = g.out_h(), ow = g.out_w();
  const int out_plane = oh * ow;
  const int k = g.patch();
  const long in_stride = static_cast<long>(g.in_channels) * g.in_h * g.in_w;
  const long out_stride = static_cast<long>(g.out_channels) * out_plane;
  const bool pointwise = g.pointwise();
  const int rows = block_rows(g);
  std::vector<float> col(pointwise || dweight.empty() ? 0 : static_cast<std::size_t>(k) * rows * ow);
  std::vector<float> dcol(pointwise || dx.empty() ? 0 : static_cast<std::size_t>(k) * rows * ow);
  for (int n = 0; n < batch; ++n) {
    const float* dyn = dy.data() + n * out_stride;
    const float* xn = x.data() + n * in_stride;
    if (!dbias.empty()) {
      for (int o = 0; o < g.out_channels; ++o) {
        const float* p = dyn + static_cast<long>(o) * out_plane;
        double s = 0.0;
        for (int i = 0; i < out_plane; ++i) s += p[i];
        dbias[o] += static_cast<float>(s);
      }
    }
    if (pointwise) {
      if (!dweight.empty())
        cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, g.out_channels, k, out_plane, 1.0f, dyn, out_plane, xn,
                    out_plane, 1.0f, dweight.data(), k);
      if (!dx.empty())
        cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, out_plane, g.out_channels, 1.0f, weight.data(), k,
                    dyn, out_plane, 1.0f, dx.data() + n * in_stride, out_plane);
      continue;
    }
    for (int oy0 = 0; oy0 < oh; oy0 += rows) {
      const int oy1 = std::min(oh, oy0 + rows);
      const int cols = (oy1 - oy0) * ow;
      const float* dyb = dyn + static_cast<long>(oy0) * ow;
      if (!dweight.empty()) {
        im2col(g, xn, oy0, oy1, col.data());
        cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, g.out_channels, k, cols, 1.0f, dyb, out_plane,
                    col.data(), cols, 1.0f, dweight.data(), k);
      }
      if (!dx.empty()) {
        cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, cols, g.out_channels, 1.0f, weight.data(), k, dyb,
                    out_plane, 0.0f, dcol.data(), cols);
        col2im_accumulate(g, dcol.data(), oy0, oy1, dx.data() + n * in_stride);
      }
    }
  }
}

void maxpool_forward(const PoolGeometry& g, int planes, std::span<const float> x, std::span<float> y,
                     std::span<int> argmax) {
  const int oh = g.out_h(), ow = g.out_w();
  const long in_plane = static_cast<long>(g.in_h) * g.in_w;
  const long out_plane = static_cast<long>(oh) * ow;
#pragma omp parallel for schedule(static) if (planes * out_plane > kParallelThreshold)
  for (int p = 0; p < planes; ++p) {
    const float* src = x.data() + p * in_plane;
    if (g.kernel == 2 && g.stride == 2 && g.pad == 0) {
      for (int oy = 0; oy < oh; ++oy) {
        const float* r0 = src + 2L * oy * g.in_w;
        const float* r1 = r0 + g.in_w;
        for (int ox = 0; ox < ow; ++ox) {
          const int i = 2 * ox;
          const int top = 2 * oy * g.in_w + i, bottom = top + g.in_w;
          // Branch-free selects; activations are close to random at the sign bit.
          const bool a = r0[i + 1] > r0[i];
          const float ab = a ? r0[i + 1] : r0[i];
          const int ai = a ? top + 1 : top;
          const bool b = r1[i + 1] > r1[i];
          const float bb = b ? r1[i + 1] : r1[i];
          const int bi = b ? bottom + 1 : bottom;
          const bool c = bb > ab;
          const float best = c ? bb : ab;
          const int idx = c ? bi : ai;
          y[p * out_plane + oy * ow + ox] = best;
          argmax[p * out_plane + oy * ow + ox] = idx;
        }
      }
      continue;
    }
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        float best = -std::numeric_limits<float>::infinity();
        int best_idx = -1;
        for (int ky = 0; ky < g.kernel; ++ky) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_h) continue;
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.in_w) continue;
            const float v = src[iy * g.in_w + ix];
            if (v > best || best_idx < 0) {
              best = v;
              best_idx = iy * g.in_w + ix;
            }
          }
        }
        y[p * out_plane + oy * ow + ox] = best;
        argmax[p * out_plane + oy * ow + ox] = best_idx;
      }
    }
  }
}

void maxpool_backward(const PoolGeometry& g, int planes, std::span<const float> dy, std::span<const int> argmax,
                      std::span<float> dx) {
  const long in_plane = static_cast<long>(g.in_h) * g.in_w;
  const long out_plane = static_cast<long>(g.out_h()) * g.out_w();
#pragma omp parallel for schedule(static) if (planes * out_plane > kParallelThreshold)
  for (int p = 0; p < planes; ++p) {
    float* d = dx.data() + p * in_plane;
    for (long i = 0; i < out_plane; ++i) d[argmax[p * out_plane + i]] += dy[p * out_plane + i];
  }
}

void avgpool_forward(const PoolGeometry& g, int planes, std::span<const float> x, std::span<float> y) {
  const int oh = g.out_h(), ow = g.out_w();
  const long in_plane = static_cast<long>(g.in_h) * g.in_w;
  const long out_plane = static_cast<long>(oh) * ow;
  const float inv = 1.0f / static_cast<float>(g.kernel * g.kernel);
#pragma omp parallel for schedule(static) if (planes * out_plane > kParallelThreshold)
  for (int p = 0; p < planes; ++p) {
    const float* src = x.data() + p * in_plane;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        float s = 0.0f;
        for (int ky = 0; ky < g.kernel; ++ky) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_h) continue;
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.in_w) s += src[iy * g.in_w + ix];
          }
        }
        y[p * out_plane + oy * ow + ox] = s * inv;
      }
    }
  }
}

void avgpool_backward(const PoolGeometry& g, int planes, std::span<const float> dy, std::span<float> dx) {
  const int oh = g.out_h(), ow = g.out_w();
  const long in_plane = static_cast<long>(g.in_h) * g.in_w;
  const long out_plane = static_cast<long>(oh) * ow;
  const float inv = 1.0f / static_cast<float>(g.kernel * g.kernel);
#pragma omp parallel for schedule(static) if (planes * out_plane > kParallelThreshold)
  for (int p = 0; p < planes; ++p) {
    float* d = dx.data() + p * in_plane;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const float gval = dy[p * out_plane + oy * ow + ox] * inv;
        for (int ky = 0; ky < g.kernel; ++ky) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_h) continue;
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.in_w) d[iy * g.in_w + ix] += gval;
          }
        }
      }
    }
  }
}

void upsample_nearest_forward(int planes, int h, int w, int factor, std::span<const float> x, std::span<float> y) {
  const int oh = h * factor, ow = w * factor;
  const long total = static_cast<long>(planes) * oh;
#pragma omp parallel for schedule(static) if (total * ow > kParallelThreshold)
  for (long r = 0; r < total; ++r) {
    const long p = r / oh;
    const int oy = static_cast<int>(r % oh);
    const float* src = x.data() + (p * h + oy / factor) * w;
    float* dst = y.data() + r * ow;
    for (int ox = 0; ox < ow; ++ox) dst[ox] = src[ox / factor];
  }
}

void upsample_nearest_backward(int planes, int h, int w, int factor, std::span<const float> dy,
                               std::span<float> dx) {
  const int ow = w * factor;
  const long total = static_cast<long>(planes) * h;
#pragma omp parallel for schedule(static) if (total * w * factor * factor > kParallelThreshold)
  for (long r = 0; r < total; ++r) {
    float* dst = dx.data() + r * w;
    for (int fy = 0; fy < factor; ++fy) {
      const float* src = dy.data() + (r * factor + fy) * ow;
      for (int ox = 0; ox < ow; ++ox) dst[ox / factor] += src[ox];
    }
  }
}

namespace {

struct Tap {
  int i0, i1;
  float w1;
};

std::vector<Tap> bilinear_taps(int in, int factor) {
  std::vector<Tap> taps(static_cast<std::size_t>(in) * factor);
  for (int o = 0; o < in * factor; ++o) {
    float src = (static_cast<float>(o) + 0.5f) / static_cast<float>(factor) - 0.5f;
    if (src < 0.0f) src = 0.0f;
    int i0 = static_cast<int>(src);
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, src - static_cast<float>(i0)};
  }
  return taps;
}

}  // namespace

void upsample_bilinear_forward(int planes, int h, int w, int factor, std::span<const float> x, std::span<float> y) {
  const int oh = h * factor, ow = w * factor;
  const auto ty = bilinear_taps(h, factor);
  const auto tx = bilinear_taps(w, factor);
#pragma omp parallel for schedule(static) if (static_cast<long>(planes) * oh * ow > kParallelThreshold)
  for (int p = 0; p < planes; ++p) {
    const float* src = x.data() + static_cast<long>(p) * h * w;
    float* dst = y.data() + static_cast<long>(p) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      const Tap& a = ty[static_cast<std::size_t>(oy)];
      const float* r0 = src + static_cast<long>(a.i0) * w;
      const float* r1 = src + static_cast<long>(a.i1) * w;
      for (int ox = 0; ox < ow; ++ox) {
        const Tap& b = tx[static_cast<std::size_t>(ox)];
        const float top = r0[b.i0] + (r0[b.i1] - r0[b.i0]) * b.w1;
        const float bot = r1[b.i0] + (r1[b.i1] - r1[b.i0]) * b.w1;
        dst[static_cast<long>(oy) * ow + ox] = top + (bot - top) * a.w1;
      }
    }
  }
}

void upsample_bilinear_backward(int planes, int h, int w, int factor, std::span<const float> dy,
                                std::span<float> dx) {
  const int oh = h * factor, ow = w * factor;
  const auto ty = bilinear_taps(h, factor);
  const auto tx = bilinear_taps(w, factor);
#pragma omp parallel for schedule(static) if (static_cast<long>(planes) * oh * ow > kParallelThreshold)
  for (int p = 0; p < planes; ++p) {
    const float* src = dy.data() + static_cast<long>(p) * oh * ow;
    float* dst = dx.data() + static_cast<long>(p) * h * w;
    for (int oy = 0; oy < oh; ++oy) {
      const Tap& a = ty[static_cast<std::size_t>(oy)];
      float* r0 = dst + static_cast<long>(a.i0) * w;
      float* r1 = dst + static_cast<long>(a.i1) * w;
      for (int ox = 0; ox < ow; ++ox) {
        const Tap& b = tx[static_cast<std::size_t>(ox)];
        const float gval = src[static_cast<long>(oy) * ow + ox];
        const float g0 = gval * (1.0f - a.w1), g1 = gval * a.w1;
        r0[b.i0] += g0 * (1.0f - b.w1);
        r0[b.i1] += g0 * b.w1;
        r1[b.i0] += g1 * (1.0f - b.w1);
        r1[b.i1] += g1 * b.w1;
      }
    }
  }
}

namespace {

inline int reflect(int i, int n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * (n - 1) - i;
  return i;
}

}  // namespace

void reflect_pad_forward(int planes, int h, int w, int pad, std::span<const float> x, std::span<float> y) {
  const int oh = h + 2 * pad, ow = w + 2 * pad;
#pragma omp parallel for schedule(static) if (static_cast<long>(planes) * oh * ow > kParallelThreshold)
  for (int p = 0; p < planes; ++p) {
    const float* src = x.data() + static_cast<long>(p) * h * w;
    float* dst = y.data() + static_cast<long>(p) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      const int iy = reflect(oy - pad, h);
      for (int ox = 0; ox < ow; ++ox) dst[oy * ow + ox] = src[iy * w + reflect(ox - pad, w)];
    }
  }
}

void reflect_pad_backward(int planes, int h, int w, int pad, std::span<const float> dy, std::span<float> dx) {
  const int oh = h + 2 * pad, ow = w + 2 * pad;
#pragma omp parallel for schedule(static) if (static_cast<long>(planes) * oh * ow > kParallelThreshold)
  for (int p = 0; p < planes; ++p) {
    const float* src = dy.data() + static_cast<long>(p) * oh * ow;
    float* dst = dx.data() + static_cast<long>(p) * h * w;
    for (int oy = 0; oy < oh; ++oy) {
      const int iy = reflect(oy - pad, h);
      for (int ox = 0; ox < ow; ++ox) dst[iy * w + reflect(ox - pad, w)] += src[oy * ow + ox];
    }
  }
}

void instance_norm_forward(int planes, int plane_size, float eps, std::span<const float> x, std::span<float> y,
                           std::span<float> mean, std::span<float> invstd) {
#pragma omp parallel for schedule(static) if (static_cast<long>(planes) * plane_size > kParallelThreshold)
  for (int p = 0; p < planes; ++p) {
    const float* src = x.data() + static_cast<long>(p) * plane_size;
    float* dst = y.data() + static_cast<long>(p) * plane_size;
    double s = 0.0;
    for (int i = 0; i < plane_size; ++i) s += src[i];
    const double m = s / plane_size;
    double v = 0.0;
    for (int i = 0; i < plane_size; ++i) v += (src[i] - m) * (src[i] - m);
    const float is = static_cast<float>(1.0 / std::sqrt(v / plane_size + eps));
    const float mf = static_cast<float>(m);
    for (int i = 0; i < plane_size; ++i) dst[i] = (src[i] - mf) * is;
    mean[p] = mf;
    invstd[p] = is;
  }
}

void instance_norm_backward(int planes, int plane_size, std::span<const float> y, std::span<const float> invstd,
                            std::span<const float> dy, std::span<float> dx) {
#pragma omp parallel for schedule(static) if (static_cast<long>(planes) * plane_size > kParallelThreshold)
  for (int p = 0; p < planes; ++p) {
    const float* yh = y.data() + static_cast<long>(p) * plane_size;
    const float* g = dy.data() + static_cast<long>(p) * plane_size;
    float* d = dx.data() + static_cast<long>(p) * plane_size;
    double sg = 0.0, sgy = 0.0;
    for (int i = 0; i < plane_size; ++i) {
      sg += g[i];
      sgy += static_cast<double>(g[i]) * yh[i];
    }
    const float mg = static_cast<float>(sg / plane_size);
    const float mgy = static_cast<float>(sgy / plane_size);
    for (int i = 0; i < plane_size; ++i) d[i] += invstd[p] * (g[i] - mg - yh[i] * mgy);
  }
}

void softmax_channels(int batch, int channels, int plane_size, std::span<const float> x, std::span<float> y) {
  const long total = static_cast<long>(batch) * plane_size;
#pragma omp parallel for schedule(static) if (total * channels > kParallelThreshold)
  for (long t = 0; t < total; ++t) {
    const long n = t / plane_size, i = t % plane_size;
    const float* src = x.data() + n * channels * plane_size + i;
    float* dst = y.data() + n * channels * plane_size + i;
    float mx = src[0];
    for (int c = 1; c < channels; ++c) mx = std::max(mx, src[c * plane_size]);
    double s = 0.0;
    for (int c = 0; c < channels; ++c) {
      const float e = std::exp(src[c * plane_size] - mx);
      dst[c * plane_size] = e;
      s += e;
    }
    const float inv = static_cast<float>(1.0 / s);
    for (int c = 0; c < channels; ++c) dst[c * plane_size] *= inv;
  }
}

}  // namespace fundus::kernels
