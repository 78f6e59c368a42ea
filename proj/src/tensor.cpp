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

#include "fundus/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace fundus {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw Error("negative dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != shape_numel(shape_))
    throw Error("tensor value count " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
}

int Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw Error("axis out of range for shape " + shape_str(shape_));
  return shape_[static_cast<std::size_t>(axis)];
}

std::span<float> Tensor::slice(int n) {
  const std::size_t stride = data_.size() / static_cast<std::size_t>(shape_.at(0));
  return std::span<float>(data_).subspan(static_cast<std::size_t>(n) * stride, stride);
}

std::span<const float> Tensor::slice(int n) const {
  const std::size_t stride = data_.size() / static_cast<std::size_t>(shape_.at(0));
  return std::span<const float>(data_).subspan(static_cast<std::size_t>(n) * stride, stride);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size())
    throw Error("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw Error("stack of zero tensors");
  Shape shape = items.front().shape();
  shape.insert(shape.begin(), static_cast<int>(items.size()));
  Tensor out(shape);
  const std::size_t per = items.front().size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape() != items.front().shape())
      throw Error("stack: shape mismatch " + shape_str(items[i].shape()) + " vs " + shape_str(items.front().shape()));
    std::copy(items[i].values().begin(), items[i].values().end(), out.data() + i * per);
  }
  return out;
}

Tensor take(const Tensor& batch, int n) {
  Shape shape = batch.shape();
  shape[0] = 1;
  auto src = batch.slice(n);
  return Tensor(shape, std::vector<float>(src.begin(), src.end()));
}

}  // namespace fundus
