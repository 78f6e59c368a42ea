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

#pragma once

// Data-parallel compute kernels behind the autograd ops. Every kernel here has
// a serial counterpart in kernels_reference.hpp with identical semantics; the
// kernel tests compare the two and bench/ measures the gap.
//
// Layout is NCHW throughout. Backward kernels accumulate into their outputs.
// Work is partitioned over disjoint output elements, so results do not depend
// on the OpenMP thread count.

#include <span>

namespace fundus::kernels {

struct ConvGeometry {
  int in_channels = 0;
  int in_h = 0;
  int in_w = 0;
  int out_channels = 0;
  int kernel_h = 1;
  int kernel_w = 1;
  int stride = 1;
  int pad_h = 0;
  int pad_w = 0;

  int out_h() const { return (in_h + 2 * pad_h - kernel_h) / stride + 1; }
  int out_w() const { return (in_w + 2 * pad_w - kernel_w) / stride + 1; }
  int patch() const { return in_channels * kernel_h * kernel_w; }
  bool pointwise() const { return kernel_h == 1 && kernel_w == 1 && stride == 1 && pad_h == 0 && pad_w == 0; }
};

/// weight is [out_channels, in_channels * kernel_h * kernel_w]; bias may be empty.
void conv2d_forward(const ConvGeometry& g, int batch, std::span<const float> x, std::span<const float> weight,
                    std::span<const float> bias, std::span<float> y);

/// Any of dx / dweight / dbias may be empty to skip that gradient.
void conv2d_backward(const ConvGeometry& g, int batch, std::span<const float> x, std::span<const float> weight,
                     std::span<const float> dy, std::span<float> dx, std::span<float> dweight,
                     std::span<float> dbias);

struct PoolGeometry {
  int in_h = 0;
  int in_w = 0;
  int kernel = 2;
  int stride = 2;
  int pad = 0;

  int out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  int out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
};

/// `planes` = N * C. argmax receives the flat in-plane index of each maximum.
void maxpool_forward(const PoolGeometry& g, int planes, std::span<const float> x, std::span<float> y,
                     std::span<int> argmax);
void maxpool_backward(const PoolGeometry& g, int planes, std::span<const float> dy, std::span<const int> argmax,
                      std::span<float> dx);

/// Average pooling that counts padded cells in the divisor.
void avgpool_forward(const PoolGeometry& g, int planes, std::span<const float> x, std::span<float> y);
void avgpool_backward(const PoolGeometry& g, int planes, std::span<const float> dy, std::span<float> dx);

void upsample_nearest_forward(int planes, int h, int w, int factor, std::span<const float> x, std::span<float> y);
void upsample_nearest_backward(int planes, int h, int w, int factor, std::span<const float> dy, std::span<float> dx);

/// Half-pixel-centred bilinear upsampling by an integer factor (edges clamped).
void upsample_bilinear_forward(int planes, int h, int w, int factor, std::span<const float> x, std::span<float> y);
void upsample_bilinear_backward(int planes, int h, int w, int factor, std::span<const float> dy,
                                std::span<float> dx);

void reflect_pad_forward(int planes, int h, int w, int pad, std::span<const float> x, std::span<float> y);
void reflect_pad_backward(int planes, int h, int w, int pad, std::span<const float> dy, std::span<float> dx);

/// Per-plane normalisation without affine parameters. mean/invstd have `planes` entries.
void instance_norm_forward(int planes, int plane_size, float eps, std::span<const float> x, std::span<float> y,
                           std::span<float> mean, std::span<float> invstd);
void instance_norm_backward(int planes, int plane_size, std::span<const float> y, std::span<const float> invstd,
                            std::span<const float> dy, std::span<float> dx);

/// Softmax over the channel axis of an [N, C, HW] block.
void softmax_channels(int batch, int channels, int plane_size, std::span<const float> x, std::span<float> y);

}  // namespace fundus::kernels
