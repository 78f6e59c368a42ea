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

#include "fundus/autograd.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "fundus/kernels.hpp"

namespace fundus::nn {
namespace {

thread_local bool g_grad_enabled = true;

constexpr long kParallelThreshold = 1 << 15;

Var make_result(Tensor value, std::initializer_list<Var> inputs, std::function<void(Variable&)> fn) {
  auto out = std::make_shared<Variable>(std::move(value));
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& p : inputs) any = any || (p && p->requires_grad);
  if (!any) return out;
  out->requires_grad = true;
  for (const auto& p : inputs)
    if (p) out->parents.push_back(p);
  out->backward_fn = std::move(fn);
  return out;
}

void require_rank(const Var& x, int rank, const char* op) {
  if (x->value.rank() != rank)
    throw Error(std::string(op) + ": expected rank " + std::to_string(rank) + " input, got " + shape_str(x->shape()));
}

template <class F>
Var unary(const Var& x, F&& f) {
  Tensor y(x->shape());
  const long n = static_cast<long>(y.size());
  const float* src = x->value.data();
  float* dst = y.data();
#pragma omp parallel for simd schedule(static) if (n > kParallelThreshold)
  for (long i = 0; i < n; ++i) dst[i] = f(src[i]);
  return make_result(std::move(y), {x}, nullptr);
}

// Accumulates dx += dy * g(x_i, y_i) for elementwise ops.
template <class G>
void elementwise_backward(Variable& self, G&& g) {
  Variable& x = *self.parents[0];
  if (!x.requires_grad) return;
  float* dx = x.grad_buffer().data();
  const float* dy = self.grad.data();
  const float* xv = x.value.data();
  const float* yv = self.value.data();
  const long n = static_cast<long>(self.value.size());
#pragma omp parallel for simd schedule(static) if (n > kParallelThreshold)
  for (long i = 0; i < n; ++i) dx[i] += dy[i] * g(xv[i], yv[i]);
}

void accumulate(Variable& target, const Tensor& g, float factor = 1.0f) {
  if (!target.requires_grad) return;
  float* dst = target.grad_buffer().data();
  const float* src = g.data();
  const long n = static_cast<long>(g.size());
#pragma omp parallel for simd schedule(static) if (n > kParallelThreshold)
  for (long i = 0; i < n; ++i) dst[i] += factor * src[i];
}

}  // namespace

Tensor& Variable::grad_buffer() {
  if (grad.empty() && !value.empty()) grad = Tensor(value.shape());
  return grad;
}

Var constant(Tensor value) { return std::make_shared<Variable>(std::move(value), false); }
Var parameter(Tensor value) { return std::make_shared<Variable>(std::move(value), true); }
Var detach(const Var& x) { return constant(x->value); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& root) {
  if (root->value.size() != 1) throw Error("backward: root must hold a single element, got " + shape_str(root->shape()));
  if (!root->requires_grad) return;
  std::vector<Variable*> order;
  std::unordered_set<Variable*> seen{root.get()};
  std::vector<std::pair<Variable*, std::size_t>> stack{{root.get(), 0}};
  while (!stack.empty()) {
    Variable* node = stack.back().first;
    const std::size_t next = stack.back().second;
    if (next < node->parents.size()) {
      ++stack.back().second;
      Variable* p = node->parents[next].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->grad_buffer().fill(1.0f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Variable* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, ConvOptions opt) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  kernels::ConvGeometry g;
  g.in_channels = x->value.dim(1);
  g.in_h = x->value.dim(2);
  g.in_w = x->value.dim(3);
  g.out_channels = weight->value.dim(0);
  g.kernel_h = weight->value.dim(2);
  g.kernel_w = weight->value.dim(3);
  g.stride = opt.stride;
  g.pad_h = opt.pad_h;
  g.pad_w = opt.pad_w;
  if (weight->value.dim(1) != g.in_channels)
    throw Error("conv2d: weight " + shape_str(weight->shape()) + " does not match input " + shape_str(x->shape()));
  if (g.out_h() <= 0 || g.out_w() <= 0) throw Error("conv2d: input " + shape_str(x->shape()) + " too small for kernel");
  const int batch = x->value.dim(0);
  Tensor y({batch, g.out_channels, g.out_h(), g.out_w()});
  std::span<const float> b = bias ? bias->value.values() : std::span<const float>{};
  kernels::conv2d_forward(g, batch, x->value.values(), weight->value.values(), b, y.values());
  return make_result(std::move(y), {x, weight, bias}, [g, batch, x, weight, bias](Variable& self) {
    std::span<float> dx = x->requires_grad ? x->grad_buffer().values() : std::span<float>{};
    std::span<float> dw = weight->requires_grad ? weight->grad_buffer().values() : std::span<float>{};
    std::span<float> db = (bias && bias->requires_grad) ? bias->grad_buffer().values() : std::span<float>{};
    kernels::conv2d_backward(g, batch, x->value.values(), weight->value.values(), self.grad.values(), dx, dw, db);
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 2, "linear");
  const int n = x->value.dim(0), f = x->value.dim(1), o = weight->value.dim(0);
  if (weight->value.dim(1) != f) throw Error("linear: weight " + shape_str(weight->shape()) + " vs input " + shape_str(x->shape()));
  Tensor y({n, o});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < o; ++j) y[static_cast<std::size_t>(i) * o + j] = bias ? bias->value[static_cast<std::size_t>(j)] : 0.0f;
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, n, o, f, 1.0f, x->value.data(), f, weight->value.data(), f,
              1.0f, y.data(), o);
  return make_result(std::move(y), {x, weight, bias}, [n, f, o, x, weight, bias](Variable& self) {
    const float* dy = self.grad.data();
    if (x->requires_grad)
      cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, n, f, o, 1.0f, dy, o, weight->value.data(), f, 1.0f,
                  x->grad_buffer().data(), f);
    if (weight->requires_grad)
      cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, o, f, n, 1.0f, dy, o, x->value.data(), f, 1.0f,
                  weight->grad_buffer().data(), f);
    if (bias && bias->requires_grad) {
      float* db = bias->grad_buffer().data();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < o; ++j) db[j] += dy[static_cast<std::size_t>(i) * o + j];
    }
  });
}

Var relu(const Var& x) {
  auto y = unary(x, [](float v) { return v > 0.0f ? v : 0.0f; });
  if (y->requires_grad)
    y->backward_fn = [](Variable& self) {
      elementwise_backward(self, [](float, float out) { return out > 0.0f ? 1.0f : 0.0f; });
    };
  return y;
}

Var leaky_relu(const Var& x, float slope) {
  auto y = unary(x, [slope](float v) { return v > 0.0f ? v : slope * v; });
  if (y->requires_grad)
    y->backward_fn = [slope](Variable& self) {
      elementwise_backward(self, [slope](float in, float) { return in > 0.0f ? 1.0f : slope; });
    };
  return y;
}

Var tanh(const Var& x) {
  auto y = unary(x, [](float v) { return std::tanh(v); });
  if (y->requires_grad)
    y->backward_fn = [](Variable& self) {
      elementwise_backward(self, [](float, float out) { return 1.0f - out * out; });
    };
  return y;
}

Var sigmoid(const Var& x) {
  auto y = unary(x, [](float v) { return 1.0f / (1.0f + std::exp(-v)); });
  if (y->requires_grad)
    y->backward_fn = [](Variable& self) {
      elementwise_backward(self, [](float, float out) { return out * (1.0f - out); });
    };
  return y;
}

namespace {

Var combine(const Var& a, const Var& b, float sign) {
  if (!a->value.same_shape(b->value))
    throw Error("elementwise op: shape mismatch " + shape_str(a->shape()) + " vs " + shape_str(b->shape()));
  Tensor y(a->shape());
  const long n = static_cast<long>(y.size());
  const float* pa = a->value.data();
  const float* pb = b->value.data();
  float* dst = y.data();
#pragma omp parallel for simd schedule(static) if (n > kParallelThreshold)
  for (long i = 0; i < n; ++i) dst[i] = pa[i] + sign * pb[i];
  return make_result(std::move(y), {a, b}, [a, b, sign](Variable& self) {
    accumulate(*a, self.grad);
    accumulate(*b, self.grad, sign);
  });
}

}  // namespace

Var add(const Var& a, const Var& b) { return combine(a, b, 1.0f); }
Var sub(const Var& a, const Var& b) { return combine(a, b, -1.0f); }

Var scale(const Var& x, float s) {
  auto y = unary(x, [s](float v) { return s * v; });
  if (y->requires_grad) y->backward_fn = [s](Variable& self) { accumulate(*self.parents[0], self.grad, s); };
  return y;
}

Var maxpool2d(const Var& x, int kernel, int stride, int pad) {
  require_rank(x, 4, "maxpool2d");
  kernels::PoolGeometry g{x->value.dim(2), x->value.dim(3), kernel, stride, pad};
  const int planes = x->value.dim(0) * x->value.dim(1);
  Tensor y({x->value.dim(0), x->value.dim(1), g.out_h(), g.out_w()});
  std::vector<int> argmax(y.size());
  kernels::maxpool_forward(g, planes, x->value.values(), y.values(), argmax);
  return make_result(std::move(y), {x}, [g, planes, x, argmax = std::move(argmax)](Variable& self) {
    kernels::maxpool_backward(g, planes, self.grad.values(), argmax, x->grad_buffer().values());
  });
}

Var avgpool2d(const Var& x, int kernel, int stride, int pad) {
  require_rank(x, 4, "avgpool2d");
  kernels::PoolGeometry g{x->value.dim(2), x->value.dim(3), kernel, stride, pad};
  const int planes = x->value.dim(0) * x->value.dim(1);
  Tensor y({x->value.dim(0), x->value.dim(1), g.out_h(), g.out_w()});
  kernels::avgpool_forward(g, planes, x->value.values(), y.values());
  return make_result(std::move(y), {x}, [g, planes, x](Variable& self) {
    kernels::avgpool_backward(g, planes, self.grad.values(), x->grad_buffer().values());
  });
}

Var global_avg_pool(const Var& x) {
  require_rank(x, 4, "global_avg_pool");
  const int n = x->value.dim(0), c = x->value.dim(1);
  const int plane = x->value.dim(2) * x->value.dim(3);
  Tensor y({n, c});
  for (int p = 0; p < n * c; ++p) {
    const float* src = x->value.data() + static_cast<long>(p) * plane;
    double s = 0.0;
    for (int i = 0; i < plane; ++i) s += src[i];
    y[static_cast<std::size_t>(p)] = static_cast<float>(s / plane);
  }
  return make_result(std::move(y), {x}, [n, c, plane, x](Variable& self) {
    float* dx = x->grad_buffer().data();
    for (int p = 0; p < n * c; ++p) {
      const float gval = self.grad[static_cast<std::size_t>(p)] / static_cast<float>(plane);
      float* d = dx + static_cast<long>(p) * plane;
      for (int i = 0; i < plane; ++i) d[i] += gval;
    }
  });
}

Var upsample_nearest(const Var& x, int factor) {
  require_rank(x, 4, "upsample_nearest");
  const int planes = x->value.dim(0) * x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
  Tensor y({x->value.dim(0), x->value.dim(1), h * factor, w * factor});
  kernels::upsample_nearest_forward(planes, h, w, factor, x->value.values(), y.values());
  return make_result(std::move(y), {x}, [planes, h, w, factor, x](Variable& self) {
    kernels::upsample_nearest_backward(planes, h, w, factor, self.grad.values(), x->grad_buffer().values());
  });
}

Var upsample_bilinear(const Var& x, int factor) {
  require_rank(x, 4, "upsample_bilinear");
  const int planes = x->value.dim(0) * x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
  Tensor y({x->value.dim(0), x->value.dim(1), h * factor, w * factor});
  kernels::upsample_bilinear_forward(planes, h, w, factor, x->value.values(), y.values());
  return make_result(std::move(y), {x}, [planes, h, w, factor, x](Variable& self) {
    kernels::upsample_bilinear_backward(planes, h, w, factor, self.grad.values(), x->grad_buffer().values());
  });
}

Var concat_channels(std::span<const Var> parts) {
  if (parts.empty()) throw Error("concat_channels: no inputs");
  const int n = parts[0]->value.dim(0), h = parts[0]->value.dim(2), w = parts[0]->value.dim(3);
  int channels = 0;
  for (const auto& p : parts) {
    require_rank(p, 4, "concat_channels");
    if (p->value.dim(0) != n || p->value.dim(2) != h || p->value.dim(3) != w)
      throw Error("concat_channels: incompatible shapes " + shape_str(p->shape()) + " vs " + shape_str(parts[0]->shape()));
    channels += p->value.dim(1);
  }
  const long plane = static_cast<long>(h) * w;
  Tensor y({n, channels, h, w});
  for (int i = 0; i < n; ++i) {
    float* dst = y.data() + static_cast<long>(i) * channels * plane;
    for (const auto& p : parts) {
      const long len = p->value.dim(1) * plane;
      const float* src = p->value.data() + i * len;
      std::copy(src, src + len, dst);
      dst += len;
    }
  }
  auto out = std::make_shared<Variable>(std::move(y));
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& p : parts) any = any || p->requires_grad;
  if (!any) return out;
  out->requires_grad = true;
  out->parents.assign(parts.begin(), parts.end());
  out->backward_fn = [n, channels, plane](Variable& self) {
    long offset = 0;
    for (const auto& p : self.parents) {
      const long len = p->value.dim(1) * plane;
      if (p->requires_grad) {
        float* d = p->grad_buffer().data();
        for (int i = 0; i < n; ++i) {
          const float* src = self.grad.data() + static_cast<long>(i) * channels * plane + offset;
          float* dst = d + i * len;
          for (long k = 0; k < len; ++k) dst[k] += src[k];
        }
      }
      offset += len;
    }
  };
  return out;
}

Var reflect_pad(const Var& x, int pad) {
  require_rank(x, 4, "reflect_pad");
  const int planes = x->value.dim(0) * x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
  if (pad >= h || pad >= w) throw Error("reflect_pad: pad " + std::to_string(pad) + " too large for " + shape_str(x->shape()));
  Tensor y({x->value.dim(0), x->value.dim(1), h + 2 * pad, w + 2 * pad});
  kernels::reflect_pad_forward(planes, h, w, pad, x->value.values(), y.values());
  return make_result(std::move(y), {x}, [planes, h, w, pad, x](Variable& self) {
    kernels::reflect_pad_backward(planes, h, w, pad, self.grad.values(), x->grad_buffer().values());
  });
}

Var instance_norm(const Var& x, float eps) {
  require_rank(x, 4, "instance_norm");
  const int planes = x->value.dim(0) * x->value.dim(1);
  const int plane = x->value.dim(2) * x->value.dim(3);
  Tensor y(x->shape());
  std::vector<float> mean(static_cast<std::size_t>(planes)), invstd(static_cast<std::size_t>(planes));
  kernels::instance_norm_forward(planes, plane, eps, x->value.values(), y.values(), mean, invstd);
  return make_result(std::move(y), {x}, [planes, plane, x, invstd = std::move(invstd)](Variable& self) {
    kernels::instance_norm_backward(planes, plane, self.value.values(), invstd, self.grad.values(),
                                    x->grad_buffer().values());
  });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean, Tensor& running_var,
               bool training, float momentum, float eps) {
  require_rank(x, 4, "batch_norm");
  const int n = x->value.dim(0), c = x->value.dim(1);
  const long plane = static_cast<long>(x->value.dim(2)) * x->value.dim(3);
  const long count = n * plane;
  if (gamma->value.size() != static_cast<std::size_t>(c) || beta->value.size() != static_cast<std::size_t>(c) ||
      running_mean.size() != static_cast<std::size_t>(c) || running_var.size() != static_cast<std::size_t>(c))
    throw Error("batch_norm: parameters do not match " + std::to_string(c) + " channels");
  if (training && count < 2) throw Error("batch_norm: training needs more than one value per channel");
  std::vector<float> mean(static_cast<std::size_t>(c)), invstd(static_cast<std::size_t>(c));
  const float* xv = x->value.data();
  for (int ch = 0; ch < c; ++ch) {
    const auto k = static_cast<std::size_t>(ch);
    if (training) {
      double s = 0.0, s2 = 0.0;
      for (int b = 0; b < n; ++b) {
        const float* src = xv + (static_cast<long>(b) * c + ch) * plane;
        for (long i = 0; i < plane; ++i) s += src[i];
      }
      const double m = s / static_cast<double>(count);
      for (int b = 0; b < n; ++b) {
        const float* src = xv + (static_cast<long>(b) * c + ch) * plane;
        for (long i = 0; i < plane; ++i) s2 += (src[i] - m) * (src[i] - m);
      }
      const double var = s2 / static_cast<double>(count);
      mean[k] = static_cast<float>(m);
      invstd[k] = static_cast<float>(1.0 / std::sqrt(var + eps));
      running_mean[k] = (1.0f - momentum) * running_mean[k] + momentum * static_cast<float>(m);
      running_var[k] = (1.0f - momentum) * running_var[k] +
                       momentum * static_cast<float>(s2 / static_cast<double>(count - 1));
    } else {
      mean[k] = running_mean[k];
      invstd[k] = 1.0f / std::sqrt(running_var[k] + eps);
    }
  }
  Tensor xhat(x->shape());
  Tensor y(x->shape());
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const auto k = static_cast<std::size_t>(ch);
      const long off = (static_cast<long>(b) * c + ch) * plane;
      const float g = gamma->value[k], be = beta->value[k];
      for (long i = 0; i < plane; ++i) {
        const float h = (xv[off + i] - mean[k]) * invstd[k];
        xhat.data()[off + i] = h;
        y.data()[off + i] = g * h + be;
      }
    }
  return make_result(std::move(y), {x, gamma, beta},
                     [n, c, plane, count, training, x, gamma, beta, xhat = std::move(xhat),
                      invstd = std::move(invstd)](Variable& self) {
                       const float* dy = self.grad.data();
                       const float* h = xhat.data();
                       for (int ch = 0; ch < c; ++ch) {
                         const auto k = static_cast<std::size_t>(ch);
                         double sdy = 0.0, sdyh = 0.0;
                         for (int b = 0; b < n; ++b) {
                           const long off = (static_cast<long>(b) * c + ch) * plane;
                           for (long i = 0; i < plane; ++i) {
                             sdy += dy[off + i];
                             sdyh += static_cast<double>(dy[off + i]) * h[off + i];
                           }
                         }
                         if (gamma->requires_grad) gamma->grad_buffer()[k] += static_cast<float>(sdyh);
                         if (beta->requires_grad) beta->grad_buffer()[k] += static_cast<float>(sdy);
                         if (!x->requires_grad) continue;
                         float* dx = x->grad_buffer().data();
                         const float g = gamma->value[k] * invstd[k];
                         const auto mdy = static_cast<float>(sdy / static_cast<double>(count));
                         const auto mdyh = static_cast<float>(sdyh / static_cast<double>(count));
                         for (int b = 0; b < n; ++b) {
                           const long off = (static_cast<long>(b) * c + ch) * plane;
                           for (long i = 0; i < plane; ++i)
                             dx[off + i] += training ? g * (dy[off + i] - mdy - h[off + i] * mdyh) : g * dy[off + i];
                         }
                       }
                     });
}

Var dropout2d(const Var& x, float p, std::mt19937_64& rng) {
  require_rank(x, 4, "dropout2d");
  if (p <= 0.0f) return x;
  const int planes = x->value.dim(0) * x->value.dim(1);
  const long plane = static_cast<long>(x->value.dim(2)) * x->value.dim(3);
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<float> mask(static_cast<std::size_t>(planes));
  const float survivor = 1.0f / (1.0f - p);
  for (auto& m : mask) m = keep(rng) ? survivor : 0.0f;
  Tensor y(x->shape());
  for (int q = 0; q < planes; ++q) {
    const float* src = x->value.data() + q * plane;
    float* dst = y.data() + q * plane;
    for (long i = 0; i < plane; ++i) dst[i] = src[i] * mask[static_cast<std::size_t>(q)];
  }
  return make_result(std::move(y), {x}, [planes, plane, x, mask = std::move(mask)](Variable& self) {
    float* dx = x->grad_buffer().data();
    for (int q = 0; q < planes; ++q)
      for (long i = 0; i < plane; ++i) dx[q * plane + i] += self.grad[static_cast<std::size_t>(q * plane + i)] * mask[static_cast<std::size_t>(q)];
  });
}

Var mse_loss(const Var& pred, const Tensor& target) {
  if (!pred->value.same_shape(target))
    throw Error("mse_loss: shape mismatch " + shape_str(pred->shape()) + " vs " + shape_str(target.shape()));
  const long n = static_cast<long>(target.size());
  double s = 0.0;
  for (long i = 0; i < n; ++i) {
    const double d = static_cast<double>(pred->value[static_cast<std::size_t>(i)]) - target[static_cast<std::size_t>(i)];
    s += d * d;
  }
  Tensor y({1}, static_cast<float>(s / static_cast<double>(n)));
  return make_result(std::move(y), {pred}, [pred, target, n](Variable& self) {
    const float k = 2.0f * self.grad[0] / static_cast<float>(n);
    float* dx = pred->grad_buffer().data();
    const float* pv = pred->value.data();
    const float* tv = target.data();
#pragma omp parallel for simd schedule(static) if (n > kParallelThreshold)
    for (long i = 0; i < n; ++i) dx[i] += k * (pv[i] - tv[i]);
  });
}

Var l1_loss(const Var& pred, const Tensor& target) {
  if (!pred->value.same_shape(target))
    throw Error("l1_loss: shape mismatch " + shape_str(pred->shape()) + " vs " + shape_str(target.shape()));
  const long n = static_cast<long>(target.size());
  double s = 0.0;
  for (long i = 0; i < n; ++i) s += std::abs(static_cast<double>(pred->value[static_cast<std::size_t>(i)]) - target[static_cast<std::size_t>(i)]);
  Tensor y({1}, static_cast<float>(s / static_cast<double>(n)));
  return make_result(std::move(y), {pred}, [pred, target, n](Variable& self) {
    const float k = self.grad[0] / static_cast<float>(n);
    float* dx = pred->grad_buffer().data();
    const float* pv = pred->value.data();
    const float* tv = target.data();
#pragma omp parallel for simd schedule(static) if (n > kParallelThreshold)
    for (long i = 0; i < n; ++i) {
      const float d = pv[i] - tv[i];
      dx[i] += d > 0.0f ? k : (d < 0.0f ? -k : 0.0f);
    }
  });
}

Var weighted_cross_entropy(const Var& logits, std::span<const int> labels, std::span<const float> class_weights) {
  require_rank(logits, 2, "weighted_cross_entropy");
  const int n = logits->value.dim(0), c = logits->value.dim(1);
  if (static_cast<int>(labels.size()) != n) throw Error("weighted_cross_entropy: label count does not match batch");
  if (static_cast<int>(class_weights.size()) != c) throw Error("weighted_cross_entropy: need one weight per class");
  std::vector<double> probs(static_cast<std::size_t>(n) * c);
  double total = 0.0, weight_sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw Error("weighted_cross_entropy: label out of range");
    const float* z = logits->value.data() + static_cast<long>(i) * c;
    const double mx = *std::max_element(z, z + c);
    double s = 0.0;
    for (int k = 0; k < c; ++k) s += std::exp(z[k] - mx);
    const double lse = mx + std::log(s);
    for (int k = 0; k < c; ++k) probs[static_cast<std::size_t>(i) * c + k] = std::exp(z[k] - lse);
    const double w = class_weights[static_cast<std::size_t>(y)];
    total += w * (lse - z[y]);
    weight_sum += w;
  }
  Tensor out({1}, static_cast<float>(total / weight_sum));
  std::vector<int> lab(labels.begin(), labels.end());
  std::vector<float> weights(class_weights.begin(), class_weights.end());
  return make_result(std::move(out), {logits}, [n, c, logits, probs = std::move(probs), lab = std::move(lab),
                                                weights = std::move(weights), weight_sum](Variable& self) {
    float* dz = logits->grad_buffer().data();
    const double g = self.grad[0];
    for (int i = 0; i < n; ++i) {
      const int y = lab[static_cast<std::size_t>(i)];
      const double w = weights[static_cast<std::size_t>(y)] / weight_sum;
      for (int k = 0; k < c; ++k) {
        const double target = k == y ? 1.0 : 0.0;
        dz[static_cast<long>(i) * c + k] += static_cast<float>(g * w * (probs[static_cast<std::size_t>(i) * c + k] - target));
      }
    }
  });
}

Var pixel_cross_entropy(const Var& scores, std::span<const std::uint8_t> labels) {
  require_rank(scores, 4, "pixel_cross_entropy");
  const int n = scores->value.dim(0), c = scores->value.dim(1);
  const int plane = scores->value.dim(2) * scores->value.dim(3);
  if (labels.size() != static_cast<std::size_t>(n) * plane)
    throw Error("pixel_cross_entropy: label count does not match " + shape_str(scores->shape()));
  Tensor probs(scores->shape());
  kernels::softmax_channels(n, c, plane, scores->value.values(), probs.values());
  double total = 0.0;
  for (int i = 0; i < n; ++i)
    for (int p = 0; p < plane; ++p) {
      const std::uint8_t y = labels[static_cast<std::size_t>(i) * plane + p];
      if (y >= c) throw Error("pixel_cross_entropy: label " + std::to_string(y) + " outside class alphabet");
      total -= std::log(std::max(probs[(static_cast<std::size_t>(i) * c + y) * plane + p], 1e-30f));
    }
  const double count = static_cast<double>(n) * plane;
  Tensor out({1}, static_cast<float>(total / count));
  std::vector<std::uint8_t> lab(labels.begin(), labels.end());
  return make_result(std::move(out), {scores}, [n, c, plane, count, scores, probs = std::move(probs),
                                                lab = std::move(lab)](Variable& self) {
    float* d = scores->grad_buffer().data();
    const float k = static_cast<float>(self.grad[0] / count);
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const long base = (static_cast<long>(i) * c + ch) * plane;
        for (int p = 0; p < plane; ++p) {
          const float target = lab[static_cast<std::size_t>(i) * plane + p] == ch ? 1.0f : 0.0f;
          d[base + p] += k * (probs[static_cast<std::size_t>(base + p)] - target);
        }
      }
  });
}

}  // namespace fundus::nn
