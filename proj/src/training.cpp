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

#include "fundus/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "fundus/log.hpp"

namespace fundus::nn {

nlohmann::json to_json(const TrainingHistory& h) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : h.epochs)
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss},
                      {"learning_rate", e.learning_rate}});
  return {{"epochs", epochs}, {"best_epoch", h.best_epoch}, {"best_val_loss", h.best_val_loss},
          {"stopped_early", h.stopped_early}};
}

namespace {
std::filesystem::path sidecar_path(const std::filesystem::path& weights) {
  return std::filesystem::path(weights.string() + ".json");
}
}  // namespace

void write_sidecar(const std::filesystem::path& weights, const nlohmann::json& config, const TrainingHistory& h) {
  nlohmann::json j{{"config", config}, {"epoch", h.best_epoch}, {"val_loss", h.best_val_loss},
                   {"history", to_json(h)}};
  std::ofstream os(sidecar_path(weights));
  if (!os) throw Error("cannot write " + sidecar_path(weights).string());
  os << j.dump(2) << "\n";
}

nlohmann::json read_sidecar(const std::filesystem::path& weights) {
  std::ifstream is(sidecar_path(weights));
  if (!is) throw Error("missing checkpoint sidecar " + sidecar_path(weights).string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed checkpoint sidecar " + sidecar_path(weights).string() + ": " + e.what());
  }
}

void require_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw Error(what + " is not finite (" + std::to_string(v) + "); aborting");
}

std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng() % i]);
  return p;
}

namespace {

double mean_loss(std::size_t n, int batch, const BatchLoss& loss, std::uint64_t seed) {
  NoGradGuard guard;
  double total = 0.0;
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t stop = std::min(n, start + static_cast<std::size_t>(batch));
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < stop; ++i) idx.push_back(i);
    std::mt19937_64 rng(mix_seed(seed, start));
    total += loss(idx, rng, false)->value[0] * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(n);
}

}  // namespace

TrainingHistory fit(Module& model, std::size_t n_train, std::size_t n_val, const BatchLoss& train_loss,
                    const BatchLoss& val_loss, const FitOptions& opt) {
  if (n_train == 0) throw Error(opt.name + ": empty training set");
  if (opt.batch_size < 1) throw Error(opt.name + ": batch size must be at least 1");
  if (n_val == 0) log::warn(opt.name + ": no validation samples, early stopping follows the training loss");

  Adam adam(model.trainable_parameters(), AdamOptions{static_cast<float>(opt.schedule.initial)});
  EarlyStopping stopper(opt.patience);
  TrainingHistory history;
  ParameterSnapshot best = snapshot(model);

  for (int epoch = 1; epoch <= opt.max_epochs; ++epoch) {
    const double lr = opt.schedule.at(epoch);
    adam.set_learning_rate(static_cast<float>(lr));
    model.train();
    const auto order = permutation(n_train, mix_seed(opt.seed, static_cast<std::uint64_t>(epoch)));
    double total = 0.0;
    for (std::size_t start = 0, stop = 0; start < n_train; start = stop) {
      stop = std::min(n_train, start + static_cast<std::size_t>(opt.batch_size));
      if (opt.batch_size > 1 && n_train - stop == 1) stop = n_train;  // no single-sample batch
      std::span<const std::size_t> idx(order.data() + start, stop - start);
      std::mt19937_64 rng(mix_seed(mix_seed(opt.seed, epoch), start + 1));
      adam.zero_grad();
      Var loss = train_loss(idx, rng, true);
      require_finite(loss->value[0], opt.name + " training loss at epoch " + std::to_string(epoch));
      backward(loss);
      adam.step();
      total += loss->value[0] * static_cast<double>(idx.size());
    }
    model.eval();
    EpochRecord rec{epoch, total / static_cast<double>(n_train), 0.0, lr};
    rec.val_loss = n_val > 0 ? mean_loss(n_val, opt.batch_size, val_loss, mix_seed(opt.seed, 0xC0FFEE))
                             : rec.train_loss;
    require_finite(rec.val_loss, opt.name + " validation loss at epoch " + std::to_string(epoch));
    history.epochs.push_back(rec);
    if (stopper.update(rec.val_loss)) {
      best = snapshot(model);
      history.best_epoch = epoch;
      history.best_val_loss = rec.val_loss;
    }
    log::debug(opt.name + " epoch " + std::to_string(epoch) + " train " + std::to_string(rec.train_loss) + " val " +
               std::to_string(rec.val_loss) + " lr " + std::to_string(lr));
    if (stopper.should_stop()) {
      history.stopped_early = true;
      break;
    }
  }
  restore(model, best);
  model.eval();
  log::info(opt.name + ": best epoch " + std::to_string(history.best_epoch) + " of " +
            std::to_string(history.epochs.size()) + ", val loss " + std::to_string(history.best_val_loss));
  return history;
}

}  // namespace fundus::nn
