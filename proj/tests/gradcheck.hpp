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

// Central-difference gradient oracle for autograd tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "fundus/autograd.hpp"

namespace testing {

inline fundus::Tensor random_tensor(fundus::Shape shape, unsigned seed, float lo = -1.0f, float hi = 1.0f) {
  fundus::Tensor t(std::move(shape));
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

/// Largest |analytic - numeric| / max(1, |numeric|) over every leaf element.
inline double gradcheck(const std::vector<fundus::nn::Var>& leaves, const std::function<fundus::nn::Var()>& loss,
                        double eps = 1e-2) {
  for (auto& l : leaves) l->grad = fundus::Tensor();
  fundus::nn::backward(loss());
  double worst = 0.0;
  for (auto& leaf : leaves) {
    fundus::Tensor analytic = leaf->grad.empty() ? fundus::Tensor(leaf->shape()) : leaf->grad;
    for (std::size_t i = 0; i < leaf->value.size(); ++i) {
      const float orig = leaf->value[i];
      leaf->value[i] = orig + static_cast<float>(eps);
      const double up = loss()->value[0];
      leaf->value[i] = orig - static_cast<float>(eps);
      const double down = loss()->value[0];
      leaf->value[i] = orig;
      const double numeric = (up - down) / (2 * eps);
      worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
    }
  }
  return worst;
}

}  // namespace testing
