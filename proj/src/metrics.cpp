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

#include "fundus/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace fundus::metrics {

double dice(const cv::Mat& pred, const cv::Mat& gt) {
  if (pred.size() != gt.size()) throw Error("dice: shape mismatch");
  if (pred.type() != CV_8U || gt.type() != CV_8U) throw Error("dice: expects 8-bit binary maps");
  long p = 0, g = 0, both = 0;
  for (int y = 0; y < pred.rows; ++y) {
    const auto* a = pred.ptr<std::uint8_t>(y);
    const auto* b = gt.ptr<std::uint8_t>(y);
    for (int x = 0; x < pred.cols; ++x) {
      const bool u = a[x] != 0, v = b[x] != 0;
      p += u;
      g += v;
      both += u && v;
    }
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

double dice(const SegMask& pred, const SegMask& gt, SegClass cls) {
  if (pred.extent() != gt.extent()) throw Error("dice: mask shapes differ");
  switch (cls) {
    case SegClass::cup: return dice(class_region(pred, SegClass::cup), class_region(gt, SegClass::cup));
    case SegClass::disc: return dice(disc_or_cup_region(pred), disc_or_cup_region(gt));
    case SegClass::background:
      return dice(class_region(pred, SegClass::background), class_region(gt, SegClass::background));
  }
  throw Error("dice: unknown class");
}

double cdr_rme(std::span<const double> pred, std::span<const double> gt) {
  if (pred.size() != gt.size()) throw Error("cdr_rme: length mismatch");
  if (pred.empty()) throw Error("cdr_rme: no pairs");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!(gt[i] > 0.0)) throw Error("cdr_rme: ground-truth CDR must be positive");
    sum += std::abs(pred[i] - gt[i]) / gt[i];
  }
  return sum / static_cast<double>(pred.size());
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw Error("auc: length mismatch");
  // Average ranks of the pooled scores; U = rank sum of positives - n+(n+ + 1)/2.
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(scores.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  double pos = 0, neg = 0, rank_sum = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw Error("auc: labels must be 0 or 1");
    if (labels[i] == 1) {
      pos += 1;
      rank_sum += rank[i];
    } else {
      neg += 1;
    }
  }
  if (pos == 0 || neg == 0) throw Error("auc: both classes must be present");
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

double fovea_distance(std::span<const Point2> pred, std::span<const Point2> gt) {
  if (pred.size() != gt.size()) throw Error("fovea_distance: length mismatch");
  if (pred.empty()) throw Error("fovea_distance: no pairs");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) sum += std::hypot(pred[i].x - gt[i].x, pred[i].y - gt[i].y);
  return sum / static_cast<double>(pred.size());
}

}  // namespace fundus::metrics
