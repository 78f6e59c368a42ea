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

#include "fundus/segmask.hpp"

#include <cstdlib>

namespace fundus {

SegMask decode_mask(const cv::Mat& gray, MaskEncoding enc, MaskResolution res) {
  if (gray.type() != CV_8UC1) throw Error("decode_mask expects an 8-bit single-channel image");
  std::uint8_t lut[256];
  for (int v = 0; v < 256; ++v) {
    const int dc = std::abs(v - enc.cup), dd = std::abs(v - enc.disc), db = std::abs(v - enc.background);
    if (dc <= dd && dc <= db)
      lut[v] = static_cast<std::uint8_t>(SegClass::cup);
    else if (dd <= db)
      lut[v] = static_cast<std::uint8_t>(SegClass::disc);
    else
      lut[v] = static_cast<std::uint8_t>(SegClass::background);
  }
  SegMask m{cv::Mat(gray.size(), CV_8UC1), res};
  for (int y = 0; y < gray.rows; ++y) {
    const auto* src = gray.ptr<std::uint8_t>(y);
    auto* dst = m.labels.ptr<std::uint8_t>(y);
    for (int x = 0; x < gray.cols; ++x) dst[x] = lut[src[x]];
  }
  return m;
}

cv::Mat encode_mask(const SegMask& mask, MaskEncoding enc) {
  const std::uint8_t levels[3] = {enc.background, enc.disc, enc.cup};
  cv::Mat out(mask.labels.size(), CV_8UC1);
  for (int y = 0; y < out.rows; ++y) {
    const auto* src = mask.labels.ptr<std::uint8_t>(y);
    auto* dst = out.ptr<std::uint8_t>(y);
    for (int x = 0; x < out.cols; ++x) {
      if (src[x] >= kSegClasses) throw Error("encode_mask: label outside the class alphabet");
      dst[x] = levels[src[x]];
    }
  }
  return out;
}

cv::Mat class_region(const SegMask& mask, SegClass cls) {
  cv::Mat out;
  cv::compare(mask.labels, static_cast<int>(cls), out, cv::CMP_EQ);
  return out;
}

cv::Mat disc_or_cup_region(const SegMask& mask) {
  cv::Mat out;
  cv::compare(mask.labels, static_cast<int>(SegClass::background), out, cv::CMP_NE);
  return out;
}

std::optional<Point2> cup_centroid(const SegMask& mask) {
  double sx = 0.0, sy = 0.0;
  long count = 0;
  for (int y = 0; y < mask.labels.rows; ++y) {
    const auto* row = mask.labels.ptr<std::uint8_t>(y);
    for (int x = 0; x < mask.labels.cols; ++x)
      if (row[x] == static_cast<std::uint8_t>(SegClass::cup)) {
        sx += x;
        sy += y;
        ++count;
      }
  }
  if (count == 0) return std::nullopt;
  return Point2{sx / static_cast<double>(count), sy / static_cast<double>(count)};
}

bool labels_in_alphabet(const cv::Mat& labels) {
  for (int y = 0; y < labels.rows; ++y) {
    const auto* row = labels.ptr<std::uint8_t>(y);
    for (int x = 0; x < labels.cols; ++x)
      if (row[x] >= kSegClasses) return false;
  }
  return true;
}

}  // namespace fundus
