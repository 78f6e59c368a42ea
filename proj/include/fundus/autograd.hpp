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

// Reverse-mode automatic differentiation over Tensor values.
//
// A Var is a node in a dynamically built graph: ops create a new node holding
// the forward value, its parents, and a closure that pushes the node's
// gradient into the parents. Nodes only record parents when gradient tracking
// is enabled and at least one input requires a gradient, so inference under
// NoGradGuard keeps no graph alive.

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "fundus/tensor.hpp"

namespace fundus::nn {

class Variable;
using Var = std::shared_ptr<Variable>;

class Variable {
 public:
  explicit Variable(Tensor v, bool needs_grad = false) : value(std::move(v)), requires_grad(needs_grad) {}

  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Variable&)> backward_fn;

  const Shape& shape() const { return value.shape(); }
  /// Gradient buffer, zero-initialised on first use.
  Tensor& grad_buffer();
};

Var constant(Tensor value);
Var parameter(Tensor value);
/// Same value, cut from the graph.
Var detach(const Var& x);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Runs backpropagation from a single-element root.
void backward(const Var& root);

struct ConvOptions {
  int stride = 1;
  int pad_h = 0;
  int pad_w = 0;
};

// Weight is [out, in, kh, kw]; bias may be null.
Var conv2d(const Var& x, const Var& weight, const Var& bias, ConvOptions opt = {});
// x [N, F], weight [O, F], bias [O].
Var linear(const Var& x, const Var& weight, const Var& bias);

Var relu(const Var& x);
Var leaky_relu(const Var& x, float slope);
Var tanh(const Var& x);
Var sigmoid(const Var& x);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scale(const Var& x, float s);

Var maxpool2d(const Var& x, int kernel, int stride, int pad = 0);
Var avgpool2d(const Var& x, int kernel, int stride, int pad = 0);
/// [N, C, H, W] -> [N, C]
Var global_avg_pool(const Var& x);
Var upsample_nearest(const Var& x, int factor);
Var upsample_bilinear(const Var& x, int factor);
Var concat_channels(std::span<const Var> parts);
Var reflect_pad(const Var& x, int pad);
Var instance_norm(const Var& x, float eps = 1e-5f);
/// Per-channel affine normalisation over (N, H, W). In training mode the batch
/// statistics are used and the running estimates updated in place; otherwise
/// the running estimates are used.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean, Tensor& running_var,
               bool training, float momentum = 0.1f, float eps = 1e-3f);
/// Zeroes whole channels with probability p and rescales survivors by 1/(1-p).
Var dropout2d(const Var& x, float p, std::mt19937_64& rng);

// Losses reduce to a single-element Var.
Var mse_loss(const Var& pred, const Tensor& target);
Var l1_loss(const Var& pred, const Tensor& target);
/// Mean over the batch of w[y] * -log softmax(logits)[y], divided by the mean of
/// the applied weights. logits is [N, C].
Var weighted_cross_entropy(const Var& logits, std::span<const int> labels, std::span<const float> class_weights);
/// Mean per-pixel cross-entropy; scores [N, C, H, W], labels N*H*W class ids.
Var pixel_cross_entropy(const Var& scores, std::span<const std::uint8_t> labels);

}  // namespace fundus::nn
