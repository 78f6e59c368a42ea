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

// Serial, loop-nest reference versions of the kernels in kernels.hpp.
// Slow on purpose: these mirror the textbook definitions and exist so the
// optimised kernels can be checked and benchmarked against them.

#include "fundus/kernels.hpp"

namespace fundus::kernels::reference {

void conv2d_forward(const ConvGeometry& g, int batch, std::span<const float> x, std::span<const float> weight,
                    std::span<const float> bias, std::span<float> y);
void conv2d_backward(const ConvGeometry& g, int batch, std::span<const float> x, std::span<const float> weight,
                     std::span<const float> dy, std::span<float> dx, std::span<float> dweight,
                     std::span<float> dbias);

void maxpool_forward(const PoolGeometry& g, int planes, std::span<const float> x, std::span<float> y);
void avgpool_forward(const PoolGeometry& g, int planes, std::span<const float> x, std::span<float> y);
void upsample_bilinear_forward(int planes, int h, int w, int factor, std::span<const float> x, std::span<float> y);
void instance_norm_forward(int planes, int plane_size, float eps, std::span<const float> x, std::span<float> y);
void softmax_channels(int batch, int channels, int plane_size, std::span<const float> x, std::span<float> y);

}  // namespace fundus::kernels::reference
