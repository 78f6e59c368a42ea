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

// Challenge metrics. All functions are pure.

#include <span>

#include <opencv2/core.hpp>

#include "fundus/image.hpp"
#include "fundus/segmask.hpp"

namespace fundus::metrics {

/// 2|P & G| / (|P| + |G|) over non-zero pixels; 1 when both are empty.
double dice(const cv::Mat& pred, const cv::Mat& gt);
/// Disc dice compares the disc-or-cup support, cup dice the cup pixels.
double dice(const SegMask& pred, const SegMask& gt, SegClass cls);

/// Mean of |pred - gt| / gt.
double cdr_rme(std::span<const double> pred, std::span<const double> gt);

/// Mann-Whitney AUC with ties counted one half. Labels are 0/1.
double auc(std::span<const double> scores, std::span<const int> labels);

/// Mean Euclidean distance between paired points.
double fovea_distance(std::span<const Point2> pred, std::span<const Point2> gt);

}  // namespace fundus::metrics
