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

// Conversions between OpenCV images and network tensors, plus the geometric
// primitives shared by every stage. Images are 8-bit BGR as OpenCV reads them;
// tensors are RGB planes in [0, 1].

#include <array>
#include <filesystem>
#include <optional>

#include <opencv2/core.hpp>

#include "fundus/tensor.hpp"

namespace fundus {

/// Pixel coordinates, x = column, y = row, origin top-left.
struct Point2 {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point2&) const = default;
};

/// (height, width)
struct Extent {
  int height = 0;
  int width = 0;
  bool operator==(const Extent&) const = default;
};

inline Extent extent_of(const cv::Mat& m) { return {m.rows, m.cols}; }

cv::Mat read_color_image(const std::filesystem::path& path);
cv::Mat read_gray_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const cv::Mat& image);

/// 8-bit BGR -> [1, 3, H, W] RGB in [0, 1].
Tensor image_to_tensor(const cv::Mat& bgr);
/// Sample n of an RGB [N, 3, H, W] tensor -> 8-bit BGR (values clamped to [0, 1]).
cv::Mat tensor_to_image(const Tensor& t, int n = 0);

/// Float BGR image in [0, 1] <-> tensor, for augmentation pipelines that stay in float.
Tensor float_image_to_tensor(const cv::Mat& bgr32);
cv::Mat tensor_to_float_image(const Tensor& t, int n = 0);

cv::Mat resize_linear(const cv::Mat& image, int width, int height);
cv::Mat resize_nearest(const cv::Mat& image, int width, int height);

/// Per-channel (x - mean) / std on an RGB tensor.
void normalize_channels(Tensor& t, const std::array<float, 3>& mean, const std::array<float, 3>& stddev);

inline constexpr std::array<float, 3> kImageNetMean{0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kImageNetStd{0.229f, 0.224f, 0.225f};

}  // namespace fundus
