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

// Binary glaucoma classifier: an Inception-v3 style network with a width
// multiplier, frozen through Mixed_6b, trained with weighted cross-entropy.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>
#include <opencv2/core.hpp>

#include "fundus/augment.hpp"
#include "fundus/module.hpp"
#include "fundus/training.hpp"

namespace fundus::classifier {

struct ClassifierConfig {
  int input_size = 299;
  double width = 1.0;  // channel multiplier relative to Inception v3
  double learning_rate = 1e-4;
  double lr_decay_factor = 0.1;
  int lr_decay_every = 8;
  int early_stop_patience = 10;
  int batch_size = 60;
  int max_epochs = 100;
  std::optional<std::array<float, 2>> class_weights;  // default: inverse class frequency
  std::string freeze_boundary = "Mixed_6b";
  std::filesystem::path pretrained;
  bool allow_random_init = false;
  float dropout = 0.5f;

  void validate() const;
};

nlohmann::json to_json(const ClassifierConfig& c);
ClassifierConfig classifier_config_from_json(const nlohmann::json& j);

/// Parameter-name prefixes frozen for a boundary, in network order.
std::vector<std::string> frozen_prefixes(const std::string& boundary);

class InceptionNet : public nn::Module {
 public:
  InceptionNet(const ClassifierConfig& cfg, std::uint64_t seed);
  /// [N, 3, S, S] normalised input -> [N, 2] logits.
  nn::Var forward(const nn::Var& x, std::mt19937_64* rng = nullptr) const;
  const ClassifierConfig& config() const { return cfg_; }

 private:
  ClassifierConfig cfg_;
  std::vector<std::shared_ptr<nn::Module>> blocks_;
  std::vector<std::function<nn::Var(const nn::Var&)>> stages_;
  std::shared_ptr<nn::Linear> fc_;
};

/// Builds the network, loads pretrained weights (every parameter except the
/// head) and freezes up to the boundary. Without weights, `allow_random_init`
/// must be set.
std::unique_ptr<InceptionNet> build_classifier(const ClassifierConfig& cfg, std::uint64_t seed);

/// Inverse class frequency normalised to mean 1; (1, 1) with a warning when a class is missing.
std::array<float, 2> inverse_frequency_weights(std::span<const int> labels);

struct ClassifierSample {
  cv::Mat image;  // 8-bit BGR at input_size
  int label = 0;
};

/// 8-bit BGR image at the input size -> [1, 3, S, S] with ImageNet normalisation.
Tensor classifier_input(const cv::Mat& image);

nn::TrainingHistory train_classifier(InceptionNet& model, const std::vector<ClassifierSample>& train,
                                     const std::vector<ClassifierSample>& val, std::uint64_t seed,
                                     const augment::TransformSpec& spec = augment::classifier_recipe());

/// Fraction of samples whose argmax logit equals the label (eval mode, no augmentation).
double accuracy(const InceptionNet& model, const std::vector<ClassifierSample>& samples);

struct RiskPrediction {
  std::string id;
  double p_glaucoma = 0.0;
};

/// TTA-averaged probability of the glaucoma class for one ROI.
RiskPrediction predict_glaucoma_risk(const InceptionNet& model, const std::string& id, const cv::Mat& roi,
                                     std::span<const augment::Renderer> renderings, const augment::TtaConfig& tta,
                                     const augment::TransformSpec& spec = augment::classifier_recipe());

void save_classifier(const InceptionNet& model, const nn::TrainingHistory& history, const std::filesystem::path& path);
std::unique_ptr<InceptionNet> load_classifier(const std::filesystem::path& path);

}  // namespace fundus::classifier
