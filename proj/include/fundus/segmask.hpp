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

#include <cstdint>
#include <optional>

#include <opencv2/core.hpp>

#include "fundus/image.hpp"

namespace fundus {

/// In-memory class ids. Network outputs use the same channel order.
enum class SegClass : std::uint8_t { background = 0, disc = 1, cup = 2 };
inline constexpr int kSegClasses = 3;

enum class MaskResolution { roi_network, roi, native };

/// Per-pixel labels (CV_8U holding SegClass values).
struct SegMask {
  cv::Mat labels;
  MaskResolution resolution = MaskResolution::native;

  Extent extent() const { return extent_of(labels); }
};

/// Gray levels used for each class in mask files.
struct MaskEncoding {
  std::uint8_t cup = 0;
  std::uint8_t disc = 128;
  std::uint8_t background = 255;
};

/// Maps every gray level to the nearest encoded class level.
SegMask decode_mask(const cv::Mat& gray, MaskEncoding enc = {}, MaskResolution res = MaskResolution::native);
cv::Mat encode_mask(const SegMask& mask, MaskEncoding enc = {});

/// Binary map of pixels belonging to `cls`; disc_or_cup treats cup pixels as disc too.
cv::Mat class_region(const SegMask& mask, SegClass cls);
cv::Mat disc_or_cup_region(const SegMask& mask);

/// Centroid of cup-labelled pixels; nullopt when the cup is empty.
std::optional<Point2> cup_centroid(const SegMask& mask);

/// True when every label is one of the three classes.
bool labels_in_alphabet(const cv::Mat& labels);

}  // namespace fundus
