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

#include "fundus/module.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>

namespace fundus::nn {

void Module::train(bool on) {
  training_ = on;
  for (auto& [name, child] : children_) child->train(on);
}

void Module::collect(const std::string& prefix, std::vector<NamedParameter>& out, bool buffers) const {
  for (const auto& [name, var] : buffers ? buffers_ : params_) out.push_back({prefix + name, var});
  for (const auto& [name, child] : children_) child->collect(prefix + name + ".", out, buffers);
}

std::vector<NamedParameter> Module::named_parameters() const {
  std::vector<NamedParameter> out;
  collect("", out, false);
  return out;
}

std::vector<NamedParameter> Module::named_buffers() const {
  std::vector<NamedParameter> out;
  collect("", out, true);
  return out;
}

std::vector<NamedParameter> Module::named_state() const {
  auto out = named_parameters();
  for (auto& b : named_buffers()) out.push_back(std::move(b));
  return out;
}

std::vector<Var> Module::parameters() const {
  std::vector<Var> out;
  for (auto& p : named_parameters()) out.push_back(p.var);
  return out;
}

std::vector<Var> Module::trainable_parameters() const {
  std::vector<Var> out;
  for (auto& p : named_parameters())
    if (p.var->requires_grad) out.push_back(p.var);
  return out;
}

std::size_t Module::parameter_count() const {
  std::size_t n = 0;
  for (auto& p : named_parameters()) n += p.var->value.size();
  return n;
}

void Module::freeze(const std::string& prefix) {
  for (auto& p : named_parameters())
    if (p.name.rfind(prefix, 0) == 0) {
      p.var->requires_grad = false;
      p.var->grad = Tensor();
    }
}

Var Module::register_parameter(std::string name, Tensor init) {
  auto v = parameter(std::move(init));
  params_.emplace_back(std::move(name), v);
  return v;
}

Var Module::register_buffer(std::string name, Tensor init) {
  auto v = constant(std::move(init));
  buffers_.emplace_back(std::move(name), v);
  return v;
}

BatchNorm2d::BatchNorm2d(int channels, float eps, float momentum) : eps_(eps), momentum_(momentum) {
  gamma_ = register_parameter("weight", Tensor({channels}, 1.0f));
  beta_ = register_parameter("bias", Tensor({channels}));
  running_mean_ = register_buffer("running_mean", Tensor({channels}));
  running_var_ = register_buffer("running_var", Tensor({channels}, 1.0f));
}

Var BatchNorm2d::forward(const Var& x) const {
  return batch_norm(x, gamma_, beta_, running_mean_->value, running_var_->value, is_training(), momentum_, eps_);
}

Conv2d::Conv2d(int in, int out, int kernel_h, int kernel_w, ConvOptions opt, std::mt19937_64& rng, bool bias)
    : opt_(opt) {
  Tensor w({out, in, kernel_h, kernel_w});
  std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(in * kernel_h * kernel_w)));
  for (auto& v : w.values()) v = dist(rng);
  weight_ = register_parameter("weight", std::move(w));
  if (bias) bias_ = register_parameter("bias", Tensor({out}));
}

Linear::Linear(int in, int out, std::mt19937_64& rng) {
  Tensor w({out, in});
  const float bound = 1.0f / std::sqrt(static_cast<float>(in));
  std::uniform_real_distribution<float> dist(-bound, bound);
  for (auto& v : w.values()) v = dist(rng);
  weight_ = register_parameter("weight", std::move(w));
  bias_ = register_parameter("bias", Tensor({out}));
}

Adam::Adam(std::vector<Var> params, AdamOptions opt) : opt_(opt) {
  for (auto& p : params)
    if (p->requires_grad) params_.push_back(std::move(p));
  for (const auto& p : params_) {
    m_.emplace_back(p->shape());
    v_.emplace_back(p->shape());
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p->grad = Tensor();
}

void Adam::step() {
  ++step_;
  const double c1 = 1.0 - std::pow(static_cast<double>(opt_.beta1), static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(static_cast<double>(opt_.beta2), static_cast<double>(step_));
  const float lr = static_cast<float>(opt_.learning_rate * std::sqrt(c2) / c1);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Variable& p = *params_[i];
    if (!p.requires_grad || p.grad.empty()) continue;
    float* w = p.value.data();
    const float* g = p.grad.data();
    float* m = m_[i].data();
    float* v = v_[i].data();
    const long n = static_cast<long>(p.value.size());
    const float b1 = opt_.beta1, b2 = opt_.beta2;
    const float eps = opt_.eps * static_cast<float>(std::sqrt(c2));
    for (long k = 0; k < n; ++k) {
      m[k] = b1 * m[k] + (1.0f - b1) * g[k];
      v[k] = b2 * v[k] + (1.0f - b2) * g[k] * g[k];
      w[k] -= lr * m[k] / (std::sqrt(v[k]) + eps);
    }
  }
}

double StepSchedule::at(int epoch) const {
  if (epoch < 1) epoch = 1;
  return initial * std::pow(factor, (epoch - 1) / every);
}

bool EarlyStopping::update(double loss) {
  if (loss < best_) {
    best_ = loss;
    stale_ = 0;
    return true;
  }
  ++stale_;
  return false;
}

ParameterSnapshot snapshot(const Module& m) {
  ParameterSnapshot s;
  for (const auto& p : m.named_state()) s.emplace(p.name, p.var->value);
  return s;
}

void restore(Module& m, const ParameterSnapshot& s) {
  for (auto& p : m.named_state()) {
    auto it = s.find(p.name);
    if (it == s.end()) throw Error("restore: snapshot lacks parameter " + p.name);
    p.var->value = it->second;
  }
}

namespace {
constexpr char kMagic[8] = {'F', 'N', 'D', 'S', 'P', 'R', 'M', '1'};

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw Error("truncated parameter file");
  return v;
}
}  // namespace

void save_parameters(const Module& m, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  const auto params = m.named_state();
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    const Shape& shape = p.var->shape();
    put<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) put<std::int32_t>(os, d);
    os.write(reinterpret_cast<const char*>(p.var->value.data()),
             static_cast<std::streamsize>(p.var->value.size() * sizeof(float)));
  }
  if (!os) throw Error("failed writing " + path.string());
}

ParameterSnapshot read_parameter_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open parameter file " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || !std::equal(magic, magic + 8, kMagic)) throw Error(path.string() + " is not a parameter file");
  const auto count = get<std::uint32_t>(is);
  std::map<std::string, Tensor> stored;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(get<std::uint32_t>(is), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    Shape shape(get<std::uint32_t>(is));
    for (auto& d : shape) d = get<std::int32_t>(is);
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!is) throw Error("truncated parameter file " + path.string());
    stored.emplace(std::move(name), std::move(t));
  }
  return stored;
}

void load_parameters(Module& m, const std::filesystem::path& path, const std::string& skip_prefix) {
  const ParameterSnapshot stored = read_parameter_file(path);
  for (auto& p : m.named_state()) {
    if (!skip_prefix.empty() && p.name.rfind(skip_prefix, 0) == 0) continue;
    auto it = stored.find(p.name);
    if (it == stored.end()) throw Error(path.string() + " lacks parameter " + p.name);
    if (it->second.shape() != p.var->shape())
      throw Error(path.string() + ": parameter " + p.name + " has shape " + shape_str(it->second.shape()) +
                  ", model expects " + shape_str(p.var->shape()));
    p.var->value = it->second;
  }
}

}  // namespace fundus::nn
