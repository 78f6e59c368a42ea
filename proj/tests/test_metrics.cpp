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

#include "doctest.h"

#include <random>

#include <opencv2/imgproc.hpp>

#include "fundus/metrics.hpp"

using namespace fundus;
using namespace fundus::metrics;

TEST_CASE("dice oracles") {
  cv::Mat a(20, 20, CV_8U, cv::Scalar(0)), b(20, 20, CV_8U, cv::Scalar(0));
  CHECK(dice(a, b) == 1.0);
  a(cv::Rect(0, 0, 10, 10)).setTo(1);  // 100 px
  CHECK(dice(a, a) == 1.0);
  b(cv::Rect(10, 10, 10, 10)).setTo(1);
  CHECK(dice(a, b) == 0.0);
  b.setTo(0);
  b(cv::Rect(5, 0, 10, 10)).setTo(1);  // 100 px, 50 shared
  CHECK(dice(a, b) == 0.5);
  CHECK(dice(b, a) == dice(a, b));
  CHECK_THROWS_AS(dice(a, cv::Mat(5, 5, CV_8U)), Error);
}

TEST_CASE("dice on segmentation classes") {
  cv::Mat p(40, 40, CV_8U, cv::Scalar(0)), g(40, 40, CV_8U, cv::Scalar(0));
  cv::circle(p, {20, 20}, 10, cv::Scalar(1), cv::FILLED);
  cv::circle(p, {20, 20}, 4, cv::Scalar(2), cv::FILLED);
  g = p.clone();
  cv::circle(g, {20, 20}, 6, cv::Scalar(2), cv::FILLED);
  const SegMask pm{p}, gm{g};
  CHECK(dice(pm, gm, SegClass::disc) == 1.0);
  CHECK(dice(pm, gm, SegClass::cup) < 1.0);
}

TEST_CASE("cdr rme") {
  const double g[] = {0.5}, p[] = {0.52};
  CHECK(cdr_rme(p, g) == doctest::Approx(0.04).epsilon(1e-12));
  const double g2[] = {0.4, 0.5, 0.7}, p2[] = {0.4, 0.5, 0.7};
  CHECK(cdr_rme(p2, g2) == 0.0);
  const double g3[] = {0.4, 0.5, 0.7}, p3[] = {0.5, 0.45, 0.6};
  const double g4[] = {0.7, 0.4, 0.5}, p4[] = {0.6, 0.5, 0.45};
  CHECK(cdr_rme(p3, g3) == doctest::Approx(cdr_rme(p4, g4)));
  const double zero[] = {0.0};
  CHECK_THROWS_AS(cdr_rme(p, zero), Error);
}

TEST_CASE("auc oracles") {
  const double s[] = {0.1, 0.4, 0.35, 0.8};
  const int y[] = {0, 0, 1, 1};
  CHECK(auc(s, y) == 0.75);
  const double sep[] = {0.1, 0.2, 0.8, 0.9};
  CHECK(auc(sep, y) == 1.0);
  const double eq[] = {0.5, 0.5, 0.5, 0.5};
  CHECK(auc(eq, y) == 0.5);
  const int one[] = {1, 1, 1, 1};
  CHECK_THROWS_AS(auc(s, one), Error);
}

TEST_CASE("auc matches pair enumeration and the negation identity") {
  std::mt19937 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(30), neg(30);
    std::vector<int> y(30);
    for (int i = 0; i < 30; ++i) {
      s[i] = (rng() % 10) / 10.0;  // plenty of ties
      neg[i] = -s[i];
      y[i] = i % 3 == 0;
    }
    double wins = 0, pairs = 0;
    for (int i = 0; i < 30; ++i)
      for (int j = 0; j < 30; ++j)
        if (y[i] == 1 && y[j] == 0) {
          pairs += 1;
          wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
        }
    CHECK(auc(s, y) == doctest::Approx(wins / pairs));
    CHECK(auc(s, y) == doctest::Approx(1.0 - auc(neg, y)));
  }
}

TEST_CASE("fovea distance") {
  const Point2 g[] = {{10, 10}, {0, 0}};
  const Point2 p[] = {{13, 14}, {0, 0}};
  CHECK(fovea_distance(std::span(p, 1), std::span(g, 1)) == 5.0);
  CHECK(fovea_distance(p, g) == 2.5);
  CHECK(fovea_distance(g, g) == 0.0);
  CHECK_THROWS_AS(fovea_distance(std::span(p, 1), g), Error);
}
