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

#include "fundus/kernels_reference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fundus::kernels::reference {

void conv2d_forward(const ConvGeometry& g, int batch, std::span<const float> x, std::span<const float> weight,
                    std::span<const float> bias, std::span<float> y) {
  const int oh = g.out_h(), ow = g.out_w();
  for (int n = 0; n < batch; ++n)
    for (int o = 0; o < g.out_channels; ++o)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double acc = bias.empty() ? 0.0 : bias[o];
          for (int c = 0; c < g.in_channels; ++c)
            for (int ki = 0; ki < g.kernel_h; ++ki)
              for (int kj = 0; kj < g.kernel_w; ++kj) {
                const int iy = oy * g.stride - g.pad_h + ki;
                const int ix = ox * g.stride - g.pad_w + kj;
                if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
                const double xv = x[((static_cast<long>(n) * g.in_channels + c) * g.in_h + iy) * g.in_w + ix];
                const double wv = weight[(static_cast<long>(o) * g.in_channels + c) * g.kernel_h * g.kernel_w +
                                         ki * g.kernel_w + kj];
                acc += xv * wv;
              }
          y[((static_cast<long>(n) * g.out_channels + o) * oh + oy) * ow + ox] = static_cast<float>(acc);
        }
}

void conv2d_backward(const ConvGeometry& g, int batch, std::span<const float> x, std::span<const float> weight,
                     std::span<const float> dy, std::span<float> dx, std::span<float> dweight,
                     std::span<float> dbias) {
  const int oh = g.out_h(), ow = g.out_w();
  for (int n = 0; n < batch; ++n)
    for (int o = 0; o < g.out_channels; ++o)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const float gv = dy[((static_cast<long>(n) * g.out_channels + o) * oh + oy) * ow + ox];
          if (!dbias.empty()) dbias[o] += gv;
          for (int c = 0; c < g.in_channels; ++c)
            for (int ki = 0; ki < g.kernel_h; ++ki)
              for (int kj = 0; kj < g.kernel_w; ++kj) {
                const int iy = oy * g.stride - g.pad_h + ki;
                const int ix = ox * g.stride - g.pad_w + kj;
                if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
                const long xi = ((static_cast<long>(n) * g.in_channels + c) * g.in_h + iy) * g.in_w + ix;
                const long wi =
                    (static_cast<long>(o) * g.in_channels + c) * g.kernel_h * g.kernel_w + ki * g.kernel_w + kj;
                if (!dweight.empty()) dweight[wi] += gv * x[xi];
                if (!dx.empty()) dx[xi] += gv * weight[wi];
              }
        }
}

void maxpool_forward(const PoolGeometry& g, int planes, std::span<const float> x, std::span<float> y) {
  const int oh = g.out_h(), ow = g.out_w();
  for (int p = 0; p < planes; ++p)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        float best = -std::numeric_limits<float>::infinity();
        for (int ky = 0; ky < g.kernel; ++ky)
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int iy = oy * g.stride - g.pad + ky, ix = ox * g.stride - g.pad + kx;
            if (iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w)
              best = std::max(best, x[(static_cast<long>(p) * g.in_h + iy) * g.in_w + ix]);
          }
        y[(static_cast<long>(p) * oh + oy) * ow + ox] = best;
      }
}

void avgpool_forward(const PoolGeometry& g, int planes, std::span<const float> x, std::span<float> y) {
  const int oh = g.out_h(), ow = g.out_w();
  for (int p = 0; p < planes; ++p)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double s = 0.0;
        for (int ky = 0; ky < g.kernel; ++ky)
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int iy = oy * g.stride - g.pad + ky, ix = ox * g.stride - g.pad + kx;
            if (iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w)
              s += x[(static_cast<long>(p) * g.in_h + iy) * g.in_w + ix];
          }
        y[(static_cast<long>(p) * oh + oy) * ow + ox] = static_cast<float>(s / (g.kernel * g.kernel));
      }
}

void upsample_bilinear_forward(int planes, int h, int w, int factor, std::span<const float> x, std::span<float> y) {
  const int oh = h * factor, ow = w * factor;
  auto source = [factor](int o, int in, int& i0, int& i1, double& frac) {
    double s = (o + 0.5) / factor - 0.5;
    s = std::max(s, 0.0);
    i0 = std::min(static_cast<int>(std::floor(s)), in - 1);
    i1 = std::min(i0 + 1, in - 1);
    frac = s - i0;
  };
  for (int p = 0; p < planes; ++p)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        int y0, y1, x0, x1;
        double fy, fx;
        source(oy, h, y0, y1, fy);
        source(ox, w, x0, x1, fx);
        auto at = [&](int r, int c) { return static_cast<double>(x[(static_cast<long>(p) * h + r) * w + c]); };
        const double v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
        y[(static_cast<long>(p) * oh + oy) * ow + ox] = static_cast<float>(v);
      }
}

void instance_norm_forward(int planes, int plane_size, float eps, std::span<const float> x, std::span<float> y) {
  for (int p = 0; p < planes; ++p) {
    double m = 0.0;
    for (int i = 0; i < plane_size; ++i) m += x[static_cast<long>(p) * plane_size + i];
    m /= plane_size;
    double v = 0.0;
    for (int i = 0; i < plane_size; ++i) {
      const double d = x[static_cast<long>(p) * plane_size + i] - m;
      v += d * d;
    }
    v /= plane_size;
    for (int i = 0; i < plane_size; ++i)
      y[static_cast<long>(p) * plane_size + i] =
          static_cast<float>((x[static_cast<long>(p) * plane_size + i] - m) / std::sqrt(v + eps));
  }
}

void softmax_channels(int batch, int channels, int plane_size, std::span<const float> x, std::span<float> y) {
  for (int n = 0; n < batch; ++n)
    for (int i = 0; i < plane_size; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < channels; ++c) mx = std::max(mx, static_cast<double>(x[(static_cast<long>(n) * channels + c) * plane_size + i]));
      double s = 0.0;
      for (int c = 0; c < channels; ++c) s += std::exp(x[(static_cast<long>(n) * channels + c) * plane_size + i] - mx);
      for (int c = 0; c < channels; ++c) {
        const long idx = (static_cast<long>(n) * channels + c) * plane_size + i;
        y[idx] = static_cast<float>(std::exp(x[idx] - mx) / s);
      }
    }
}

}  // namespace fundus::kernels::reference
