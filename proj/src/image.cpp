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

#include "fundus/image.hpp"

#include <algorithm>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace fundus {

cv::Mat read_color_image(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (m.empty()) throw Error("unreadable image: " + path.string());
  return m;
}

cv::Mat read_gray_image(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw Error("unreadable image: " + path.string());
  return m;
}

void write_image(const std::filesystem::path& path, const cv::Mat& image) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), image)) throw Error("cannot write image " + path.string());
}

Tensor image_to_tensor(const cv::Mat& bgr) {
  if (bgr.type() != CV_8UC3) throw Error("image_to_tensor expects an 8-bit 3-channel image");
  const int h = bgr.rows, w = bgr.cols;
  Tensor t({1, 3, h, w});
  for (int y = 0; y < h; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) t.at(0, c, y, x) = static_cast<float>(row[x][2 - c]) / 255.0f;
  }
  return t;
}

cv::Mat tensor_to_image(const Tensor& t, int n) {
  if (t.rank() != 4 || t.dim(1) != 3) throw Error("tensor_to_image expects [N, 3, H, W], got " + shape_str(t.shape()));
  const int h = t.dim(2), w = t.dim(3);
  cv::Mat m(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y) {
    auto* row = m.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        row[x][2 - c] = cv::saturate_cast<uchar>(std::clamp(t.at(n, c, y, x), 0.0f, 1.0f) * 255.0f);
  }
  return m;
}

Tensor float_image_to_tensor(const cv::Mat& bgr32) {
  if (bgr32.type() != CV_32FC3) throw Error("float_image_to_tensor expects a float 3-channel image");
  const int h = bgr32.rows, w = bgr32.cols;
  Tensor t({1, 3, h, w});
  for (int y = 0; y < h; ++y) {
    const auto* row = bgr32.ptr<cv::Vec3f>(y);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) t.at(0, c, y, x) = row[x][2 - c];
  }
  return t;
}

cv::Mat tensor_to_float_image(const Tensor& t, int n) {
  if (t.rank() != 4 || t.dim(1) != 3) throw Error("tensor_to_float_image expects [N, 3, H, W]");
  const int h = t.dim(2), w = t.dim(3);
  cv::Mat m(h, w, CV_32FC3);
  for (int y = 0; y < h; ++y) {
    auto* row = m.ptr<cv::Vec3f>(y);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) row[x][2 - c] = t.at(n, c, y, x);
  }
  return m;
}

cv::Mat resize_linear(const cv::Mat& image, int width, int height) {
  if (image.cols == width && image.rows == height) return image.clone();
  cv::Mat out;
  const int interp = (width < image.cols || height < image.rows) ? cv::INTER_AREA : cv::INTER_LINEAR;
  cv::resize(image, out, cv::Size(width, height), 0, 0, interp);
  return out;
}

cv::Mat resize_nearest(const cv::Mat& image, int width, int height) {
  if (image.cols == width && image.rows == height) return image.clone();
  cv::Mat out;
  cv::resize(image, out, cv::Size(width, height), 0, 0, cv::INTER_NEAREST);
  return out;
}

void normalize_channels(Tensor& t, const std::array<float, 3>& mean, const std::array<float, 3>& stddev) {
  const int n = t.dim(0), h = t.dim(2), w = t.dim(3);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) t.at(i, c, y, x) = (t.at(i, c, y, x) - mean[c]) / stddev[c];
}

}  // namespace fundus
