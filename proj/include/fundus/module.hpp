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

#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fundus/autograd.hpp"

namespace fundus::nn {

struct NamedParameter {
  std::string name;
  Var var;
};

/// Parameter container with a recursive name space ("down.0.conv.weight").
class Module {
 public:
  virtual ~Module() = default;

  void train(bool on = true);
  void eval() { train(false); }
  bool is_training() const { return training_; }

  std::vector<NamedParameter> named_parameters() const;
  /// Non-trainable state such as running statistics.
  std::vector<NamedParameter> named_buffers() const;
  /// Parameters followed by buffers; what checkpoints and snapshots hold.
  std::vector<NamedParameter> named_state() const;
  std::vector<Var> parameters() const;
  /// Parameters that will receive gradients.
  std::vector<Var> trainable_parameters() const;
  std::size_t parameter_count() const;

  /// Marks every parameter whose name starts with `prefix` as frozen.
  void freeze(const std::string& prefix);

 protected:
  Var register_parameter(std::string name, Tensor init);
  Var register_buffer(std::string name, Tensor init);
  template <class M>
  std::shared_ptr<M> register_module(std::string name, std::shared_ptr<M> child) {
    children_.emplace_back(std::move(name), child);
    return child;
  }

 private:
  void collect(const std::string& prefix, std::vector<NamedParameter>& out, bool buffers) const;

  bool training_ = true;
  std::vector<std::pair<std::string, Var>> params_;
  std::vector<std::pair<std::string, Var>> buffers_;
  std::vector<std::pair<std::string, std::shared_ptr<Module>>> children_;
};

/// He-normal weights, zero bias.
class Conv2d : public Module {
 public:
  Conv2d(int in, int out, int kernel_h, int kernel_w, ConvOptions opt, std::mt19937_64& rng, bool bias = true);
  Conv2d(int in, int out, int kernel, int stride, int pad, std::mt19937_64& rng, bool bias = true)
      : Conv2d(in, out, kernel, kernel, ConvOptions{stride, pad, pad}, rng, bias) {}

  Var forward(const Var& x) const { return conv2d(x, weight_, bias_, opt_); }
  int out_channels() const { return weight_->value.dim(0); }
  const Var& weight() const { return weight_; }
  const Var& bias() const { return bias_; }

 private:
  Var weight_;
  Var bias_;
  ConvOptions opt_;
};

/// Batch normalisation over channels with learnable scale and shift.
class BatchNorm2d : public Module {
 public:
  explicit BatchNorm2d(int channels, float eps = 1e-3f, float momentum = 0.1f);
  Var forward(const Var& x) const;

 private:
  Var gamma_;
  Var beta_;
  Var running_mean_;
  Var running_var_;
  float eps_;
  float momentum_;
};

class Linear : public Module {
 public:
  Linear(int in, int out, std::mt19937_64& rng);
  Var forward(const Var& x) const { return linear(x, weight_, bias_); }

 private:
  Var weight_;
  Var bias_;
};

struct AdamOptions {
  float learning_rate = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

class Adam {
 public:
  Adam(std::vector<Var> params, AdamOptions opt);

  void zero_grad();
  void step();
  void set_learning_rate(float lr) { opt_.learning_rate = lr; }
  float learning_rate() const { return opt_.learning_rate; }

 private:
  std::vector<Var> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  AdamOptions opt_;
  long step_ = 0;
};

/// Learning rate multiplied by `factor` every `every` epochs; epochs count from 1.
struct StepSchedule {
  double initial = 1e-3;
  double factor = 0.1;
  int every = 50;

  double at(int epoch) const;
};

/// Patience-based stopping on a validation loss that should decrease.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}
  /// Returns true when the loss improved on the best seen so far.
  bool update(double loss);
  bool should_stop() const { return stale_ >= patience_; }
  double best() const { return best_; }

 private:
  int patience_;
  int stale_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

/// Parameters and buffers by name.
using ParameterSnapshot = std::map<std::string, Tensor>;
ParameterSnapshot snapshot(const Module& m);
void restore(Module& m, const ParameterSnapshot& s);

void save_parameters(const Module& m, const std::filesystem::path& path);
ParameterSnapshot read_parameter_file(const std::filesystem::path& path);
/// Every parameter and buffer of `m` except those starting with `skip_prefix`
/// must be present in the file with a matching shape.
void load_parameters(Module& m, const std::filesystem::path& path, const std::string& skip_prefix = "");

}  // namespace fundus::nn
