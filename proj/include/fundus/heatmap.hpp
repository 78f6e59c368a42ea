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

// Joint optic-cup-centre and fovea localisation by stacked-hourglass heatmap
// regression.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <vector>

#include <json.hpp>
#include <opencv2/core.hpp>

#include "fundus/augment.hpp"
#include "fundus/data.hpp"
#include "fundus/module.hpp"
#include "fundus/training.hpp"

namespace fundus::heatmap {

/// exp(-d^2 / (2 variance)) around the nearest integer pixel to `p`; CV_32F size x size.
cv::Mat encode_heatmap(Point2 p, int size, double variance);

struct Peak {
  Point2 location;
  float value = 0.0f;
  bool degenerate = false;  // every pixel equal; location is (0, 0)
};

/// Argmax with ties resolved to the smallest row-major index.
Peak decode_heatmap(const cv::Mat& map);

struct HeatmapPair {
  cv::Mat cup;
  cv::Mat fovea;
};

HeatmapPair encode_pair(Point2 cup, Point2 fovea, int size, double variance);

struct HourglassConfig {
  int stacks = 2;
  float spatial_dropout_rate = 0.2f;
  int input_size = 256;
  int output_channels = 2;
  double learning_rate = 1e-3;
  double lr_decay_factor = 0.1;
  int lr_decay_every = 50;
  int early_stop_patience = 10;
  int batch_size = 8;
  double gaussian_variance = 100.0;
  int max_epochs = 200;
  int channels = 256;
  int depth = 4;
  int trunk_stride = 4;  // stem downsampling before the first hourglass: 1, 2 or 4

  void validate() const;
};

nlohmann::json to_json(const HourglassConfig& c);
HourglassConfig hourglass_config_from_json(const nlohmann::json& j);

class Residual : public nn::Module {
 public:
  Residual(int in, int out, std::mt19937_64& rng);
  nn::Var forward(const nn::Var& x) const;

 private:
  std::shared_ptr<nn::Conv2d> conv1_, conv2_, skip_;
};

class Hourglass : public nn::Module {
 public:
  Hourglass(int depth, int channels, std::mt19937_64& rng);
  nn::Var forward(const nn::Var& x) const;

 private:
  std::shared_ptr<Residual> up_, low1_, low3_;
  std::shared_ptr<Hourglass> inner_;
  std::shared_ptr<Residual> bottom_;
};

/// Stem shared by both landmarks, then `stacks` hourglasses each emitting a
/// 2-channel (cup, fovea) heatmap at the input resolution.
class StackedHourglass : public nn::Module {
 public:
  StackedHourglass(const HourglassConfig& cfg, std::uint64_t seed);

  /// One [N, 2, S, S] heatmap set per stack. `rng` drives spatial dropout in training mode.
  std::vector<nn::Var> forward(const nn::Var& x, std::mt19937_64* rng = nullptr) const;

  const nn::Module& trunk() const { return *stem_; }
  const HourglassConfig& config() const { return cfg_; }

 private:
  struct Stem : nn::Module {
    Stem(const HourglassConfig& cfg, std::mt19937_64& rng);
    nn::Var forward(const nn::Var& x) const;
    std::shared_ptr<nn::Conv2d> conv;
    std::shared_ptr<Residual> res;
    int pool = 1;
  };
  struct Stage : nn::Module {
    Stage(const HourglassConfig& cfg, bool last, std::mt19937_64& rng);
    std::shared_ptr<Hourglass> hg;
    std::shared_ptr<Residual> res;
    std::shared_ptr<nn::Conv2d> features, head, merge_features, merge_head;
  };

  HourglassConfig cfg_;
  std::shared_ptr<Stem> stem_;
  std::vector<std::shared_ptr<Stage>> stages_;
};

/// Image resized to the network input plus both landmarks in that frame.
struct LocalizerSample {
  cv::Mat image;  // 8-bit BGR, input_size x input_size
  Point2 cup;
  Point2 fovea;
  int native_width = 0;
};

/// Needs a fovea and a cup centre.
LocalizerSample make_localizer_sample(const data::FundusImage& img, int input_size);

nn::TrainingHistory train_localizer(StackedHourglass& model, const std::vector<LocalizerSample>& train,
                                    const std::vector<LocalizerSample>& val, std::uint64_t seed,
                                    const augment::TransformSpec& spec = augment::localizer_recipe());

struct LocalizationResult {
  Point2 fovea;
  Point2 cup_center;
  std::array<float, 2> peak_values{};  // cup, fovea
  bool degenerate = false;
};

LocalizationResult locate(const StackedHourglass& model, const cv::Mat& image);

void save_localizer(const StackedHourglass& model, const nn::TrainingHistory& history,
                    const std::filesystem::path& path);
std::unique_ptr<StackedHourglass> load_localizer(const std::filesystem::path& path);

}  // namespace fundus::heatmap
