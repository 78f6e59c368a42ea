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

// Epoch loop shared by the supervised trainers: step-decayed Adam, patience
// based early stopping on validation loss, best-weights restore.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fundus/module.hpp"
#include "fundus/seed.hpp"

namespace fundus::nn {

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double learning_rate = 0.0;
};

struct TrainingHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  bool stopped_early = false;
};

nlohmann::json to_json(const TrainingHistory& h);

struct FitOptions {
  std::string name = "model";
  int max_epochs = 100;
  int batch_size = 8;
  StepSchedule schedule;
  int patience = 10;
  std::uint64_t seed = 0;
};

/// Mean loss over the samples named by `indices`. The rng is seeded per batch
/// so augmentation is reproducible; `training` selects augmentation on/off.
using BatchLoss = std::function<Var(std::span<const std::size_t> indices, std::mt19937_64& rng, bool training)>;

/// When n_val is 0 the training loss drives early stopping.
TrainingHistory fit(Module& model, std::size_t n_train, std::size_t n_val, const BatchLoss& train_loss,
                    const BatchLoss& val_loss, const FitOptions& opt);

/// Checkpoint sidecar `<weights>.json` holding {config, epoch, val_loss}.
void write_sidecar(const std::filesystem::path& weights, const nlohmann::json& config, const TrainingHistory& h);
nlohmann::json read_sidecar(const std::filesystem::path& weights);

/// Throws with a diagnostic naming `what` when `v` is NaN or infinite.
void require_finite(double v, const std::string& what);

/// Deterministic permutation of [0, n) for a given seed.
std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed);

}  // namespace fundus::nn
