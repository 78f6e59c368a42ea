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

// Three-class optic disc / cup segmentation with a U-Net, test-time
// augmentation, post-processing and cup-to-disc ratio extraction.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include <json.hpp>
#include <opencv2/core.hpp>

#include "fundus/augment.hpp"
#include "fundus/data.hpp"
#include "fundus/module.hpp"
#include "fundus/segmask.hpp"
#include "fundus/training.hpp"

namespace fundus::segmenter {

struct SegConfig {
  int input_size = 256;
  int base_channels = 64;
  int depth = 4;
  double learning_rate = 1e-3;
  double lr_decay_factor = 0.1;
  int lr_decay_every = 50;
  int early_stop_patience = 10;
  int batch_size = 8;
  int max_epochs = 200;
  bool postprocess = true;

  void validate() const;
};

nlohmann::json to_json(const SegConfig& c);
SegConfig seg_config_from_json(const nlohmann::json& j);

class UNet : public nn::Module {
 public:
  UNet(const SegConfig& cfg, std::uint64_t seed);
  /// [N, 3, S, S] -> [N, 3, S, S] raw class scores (background, disc, cup).
  nn::Var forward(const nn::Var& x) const;
  const SegConfig& config() const { return cfg_; }

 private:
  struct DoubleConv : nn::Module {
    DoubleConv(int in, int out, std::mt19937_64& rng);
    nn::Var forward(const nn::Var& x) const;
    std::shared_ptr<nn::Conv2d> a, b;
  };
  SegConfig cfg_;
  std::vector<std::shared_ptr<DoubleConv>> down_;
  std::shared_ptr<DoubleConv> bottom_;
  std::vector<std::shared_ptr<nn::Conv2d>> up_conv_;
  std::vector<std::shared_ptr<DoubleConv>> up_;
  std::shared_ptr<nn::Conv2d> classify_;
};

struct SegSample {
  cv::Mat image;   // 8-bit BGR at input_size
  cv::Mat labels;  // CV_8U class ids at input_size
};

/// Resizes an ROI (bilinear) and its label mask (nearest) to the network input.
SegSample make_seg_sample(const cv::Mat& roi, const SegMask& roi_mask, int input_size);

nn::TrainingHistory train_segmenter(UNet& model, const std::vector<SegSample>& train,
                                    const std::vector<SegSample>& val, std::uint64_t seed,
                                    const augment::TransformSpec& spec = augment::segmenter_recipe());

/// Largest connected disc-or-cup component, cup restricted to it, then the
/// largest cup component.
cv::Mat postprocess(const cv::Mat& labels);

struct Segmentation {
  SegMask native;          // pasted into a background canvas
  SegMask roi;             // at ROI size
  Tensor probabilities;    // [1, 3, S, S] at network size
  bool empty_disc = false;
};

/// `roi` is the crop described by `record`; `renderings` maps it into each TTA domain.
Segmentation segment(const UNet& model, const cv::Mat& roi, std::span<const augment::Renderer> renderings,
                     const augment::TtaConfig& tta, const data::CropRecord& record,
                     const augment::TransformSpec& spec = augment::segmenter_recipe());

struct CdrValue {
  int vertical_cup_diameter = 0;
  int vertical_disc_diameter = 0;
  double ratio = 0.0;
};

/// Vertical extents: the largest per-column row span of the cup and of the disc-or-cup support.
CdrValue compute_cdr(const SegMask& mask);

void save_segmenter(const UNet& model, const nn::TrainingHistory& history, const std::filesystem::path& path);
std::unique_ptr<UNet> load_segmenter(const std::filesystem::path& path);

}  // namespace fundus::segmenter
