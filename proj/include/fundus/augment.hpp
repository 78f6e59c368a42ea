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

// Sampled augmentations that act jointly on an image and its spatial targets,
// plus the test-time-augmentation ensembler.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "fundus/image.hpp"
#include "fundus/tensor.hpp"

namespace fundus::augment {

struct TransformSpec {
  double rotation_max_deg = 0.0;
  /// Translation bound in pixels of a `reference_size` wide frame; rescaled to
  /// the frame being transformed. reference_size 0 means the working frame.
  double translate_max_px = 0.0;
  int reference_size = 0;
  double scale_max = 0.0;  // zoom in [1 - s, 1 + s]

  double hue_max_deg = 0.0;
  double saturation_lo = 0.0;  // saturation factor 1 + u, u in [lo, hi]
  double saturation_hi = 0.0;
  double value_max = 0.0;       // value factor 1 + u, |u| <= value_max
  double brightness_max = 0.0;  // brightness factor 1 + u
  double contrast_max = 0.0;    // contrast factor 1 + u

  bool horizontal_flip = false;
  bool vertical_flip = false;
  bool grey_scale = false;
  bool perspective = false;
  double perspective_max = 0.2;  // corner displacement as a fraction of the frame

  double apply_probability = 0.5;
  /// Shuffle the colour operations per sample.
  bool random_order = false;

  void validate() const;
  bool invertible() const { return !perspective; }
};

/// Recipes per stage; translations are in native pixels for the localizer and
/// in 500 px ROI pixels for the classifier and segmenter.
TransformSpec localizer_recipe();
TransformSpec classifier_recipe();
TransformSpec segmenter_recipe();

enum class ColorOp { hue, saturation, value, brightness, contrast, grey };

struct ConcreteTransform {
  Extent frame;
  std::uint64_t seed = 0;

  double rotation_deg = 0.0;
  double scale = 1.0;
  double translate_x = 0.0;  // working-frame pixels
  double translate_y = 0.0;
  bool hflip = false;
  bool vflip = false;
  /// Forward map from source to destination pixel coordinates, flips included.
  cv::Matx23d affine = cv::Matx23d(1, 0, 0, 0, 1, 0);
  std::optional<cv::Matx33d> perspective;

  double hue_shift_deg = 0.0;
  double saturation_factor = 1.0;
  double value_factor = 1.0;
  double brightness_factor = 1.0;
  double contrast_factor = 1.0;
  bool grey = false;
  std::vector<ColorOp> color_order;

  bool geometric_identity() const;
  bool color_identity() const;
  bool is_identity() const { return geometric_identity() && color_identity(); }
};

ConcreteTransform identity_transform(Extent frame);
ConcreteTransform sample_transform(const TransformSpec& spec, std::uint64_t seed, Extent frame);

/// Full transform of an 8-bit BGR image (geometry bilinear, then colour).
cv::Mat apply_to_image(const ConcreteTransform& t, const cv::Mat& bgr);
/// Geometry only, bilinear, zero fill; any float map.
cv::Mat apply_to_map(const ConcreteTransform& t, const cv::Mat& map);
/// Geometry only, nearest neighbour, `fill` outside the source.
cv::Mat apply_to_labels(const ConcreteTransform& t, const cv::Mat& labels, std::uint8_t fill);
Point2 apply_to_point(const ConcreteTransform& t, Point2 p);

struct Sample {
  cv::Mat image;
  std::vector<cv::Mat> maps;
  std::vector<cv::Mat> label_masks;
  std::vector<Point2> points;
};

/// Applies `t` to an image and every target; all must share the image frame.
Sample apply(const ConcreteTransform& t, const Sample& in, std::uint8_t label_fill = 0);

/// Maps a (possibly multi-channel) float map from the transformed frame back
/// to the original one. Border pixels replicate.
cv::Mat invert_geometric(const ConcreteTransform& t, const cv::Mat& map);

enum class TtaMode { classification, segmentation };

struct TtaConfig {
  int n_transforms = 10;
  std::uint64_t seed = 0;
};

/// Raw (pre-softmax) model output for one 8-bit BGR image:
/// [1, C] in classification mode, [1, C, H, W] at the image size in segmentation mode.
using Predictor = std::function<Tensor(const cv::Mat& image)>;
/// Re-renders an image into another domain, returning the same size; the
/// identity for the image's own domain.
using Renderer = std::function<cv::Mat(const cv::Mat& image)>;

struct TtaTrace {
  int members = 0;
  int forwards = 0;
  int inversions = 0;
  std::vector<std::string> ops;
};

/// For every rendering and every of n_transforms sampled transforms (the first
/// one per rendering is the identity): transform, forward, and in segmentation
/// mode invert the geometry. Raw outputs are averaged, then one softmax over
/// the class axis is applied.
Tensor tta_predict(const Predictor& model, const cv::Mat& image, std::span<const Renderer> renderings,
                   const TransformSpec& spec, const TtaConfig& config, TtaMode mode, TtaTrace* trace = nullptr);

}  // namespace fundus::augment
