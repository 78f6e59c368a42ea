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
#include "fundus/segmenter.hpp"

using namespace fundus;
using namespace fundus::segmenter;

namespace {

cv::Mat concentric(int size, cv::Point c, int disc_r, int cup_r) {
  cv::Mat m(size, size, CV_8U, cv::Scalar(0));
  cv::circle(m, c, disc_r, cv::Scalar(1), cv::FILLED);
  if (cup_r > 0) cv::circle(m, c, cup_r, cv::Scalar(2), cv::FILLED);
  return m;
}

SegConfig tiny() {
  SegConfig c;
  c.input_size = 32;
  c.base_channels = 4;
  c.depth = 2;
  c.batch_size = 4;
  return c;
}

}  // namespace

TEST_CASE("compute_cdr on rasterised circles") {
  const auto v = compute_cdr({concentric(200, {100, 100}, 50, 25)});
  CHECK(v.vertical_disc_diameter == 101);
  CHECK(v.vertical_cup_diameter == 51);
  CHECK(v.ratio == doctest::Approx(51.0 / 101.0));
  CHECK(compute_cdr({concentric(100, {50, 50}, 20, 20)}).ratio == 1.0);
  CHECK(compute_cdr({concentric(100, {50, 50}, 20, 0)}).ratio == 0.0);
  CHECK_THROWS_AS(compute_cdr({cv::Mat(10, 10, CV_8U, cv::Scalar(0))}), Error);
}

TEST_CASE("compute_cdr is stable under uniform scaling") {
  for (int r : {50, 60, 75}) {
    const cv::Mat m = concentric(200, {100, 100}, r, r * 3 / 5);
    const double base = compute_cdr({m}).ratio;
    for (double f : {0.8, 1.5, 2.0}) {
      const int n = static_cast<int>(200 * f);
      CHECK(std::abs(compute_cdr({resize_nearest(m, n, n)}).ratio - base) <= 0.02);
    }
  }
}

TEST_CASE("postprocess keeps one disc and a contained cup") {
  cv::Mat m = concentric(64, {30, 30}, 12, 5);
  cv::circle(m, {55, 55}, 3, cv::Scalar(1), cv::FILLED);  // stray disc blob
  cv::circle(m, {5, 55}, 2, cv::Scalar(2), cv::FILLED);   // stray cup outside the disc
  m.at<std::uint8_t>(30, 41) = 2;                         // cup speck inside disc, separate
  const cv::Mat p = postprocess(m);
  const SegMask pm{p};
  cv::Mat cc;
  CHECK(cv::connectedComponents(disc_or_cup_region(pm), cc) == 2);
  CHECK(cv::connectedComponents(class_region(pm, SegClass::cup), cc) == 2);
  const cv::Mat outside = class_region(pm, SegClass::cup) & ~disc_or_cup_region(pm);
  CHECK(cv::countNonZero(outside) == 0);
  CHECK(p.at<std::uint8_t>(55, 55) == 0);
  CHECK(p.at<std::uint8_t>(55, 5) == 0);
  CHECK(p.at<std::uint8_t>(30, 41) == 1);
}

TEST_CASE("unet shape, seeding and determinism") {
  SegConfig c;
  c.base_channels = 4;
  UNet a(c, 3), b(c, 3);
  CHECK(a.named_parameters()[0].var->value[5] == b.named_parameters()[0].var->value[5]);
  a.eval();
  nn::NoGradGuard g;
  Tensor x({1, 3, 256, 256}, 0.5f);
  const Tensor y1 = a.forward(nn::constant(x))->value, y2 = a.forward(nn::constant(x))->value;
  CHECK(y1.shape() == Shape{1, 3, 256, 256});
  for (std::size_t i = 0; i < y1.size(); i += 97) REQUIRE(y1[i] == y2[i]);
  SegConfig bad;
  bad.input_size = 250;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("stub scores produce the argmax mask pasted at the crop offset") {
  // A model whose classifier weights are zero and biases favour disc everywhere.
  UNet model(tiny(), 1);
  for (auto& p : model.named_parameters())
    if (p.name.rfind("classify", 0) == 0) {
      p.var->value.fill(0.0f);
      if (p.name == "classify.bias") p.var->value[1] = 2.0f;
    }
  model.eval();
  cv::Mat roi(40, 40, CV_8UC3, cv::Scalar(50, 60, 70));
  const data::CropRecord rec{10, -5, 40, {100, 120}};
  const std::vector<augment::Renderer> own{[](const cv::Mat& m) { return m.clone(); }};
  const auto seg = segment(model, roi, own, {3, 1}, rec);
  CHECK(seg.native.extent() == Extent{100, 120});
  CHECK(cv::countNonZero(seg.native.labels == 1) == 40 * 35);
  CHECK(seg.native.labels.at<std::uint8_t>(0, 10) == 1);
  CHECK(seg.native.labels.at<std::uint8_t>(0, 9) == 0);
  CHECK(seg.native.labels.at<std::uint8_t>(34, 49) == 1);
  CHECK(seg.native.labels.at<std::uint8_t>(35, 49) == 0);
  for (int p = 0; p < 32 * 32; p += 31) {
    const float sum = seg.probabilities[p] + seg.probabilities[1024 + p] + seg.probabilities[2048 + p];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("tiny unet learns concentric circles") {
  std::vector<SegSample> train;
  std::mt19937 rng(5);
  for (int i = 0; i < 8; ++i) {
    const cv::Point c(12 + rng() % 8, 12 + rng() % 8);
    const int r = 7 + rng() % 3;
    const cv::Mat labels = concentric(32, c, r, r / 2);
    cv::Mat img(32, 32, CV_8UC3, cv::Scalar(20, 40, 120));
    img.setTo(cv::Scalar(120, 170, 230), labels == 1);
    img.setTo(cv::Scalar(230, 240, 255), labels == 2);
    train.push_back({img, labels});
  }
  auto cfg = tiny();
  cfg.max_epochs = 80;
  cfg.learning_rate = 3e-3;
  cfg.early_stop_patience = 80;
  UNet model(cfg, 2);
  const auto h = train_segmenter(model, train, {}, 1, augment::TransformSpec{});
  CHECK(h.epochs.back().train_loss < 0.2);
  double d = 0;
  for (const auto& s : train) {
    nn::NoGradGuard g;
    const Tensor out = model.forward(nn::constant(image_to_tensor(s.image)))->value;
    cv::Mat lab(32, 32, CV_8U);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        int best = 0;
        for (int c = 1; c < 3; ++c)
          if (out.at(0, c, y, x) > out.at(0, best, y, x)) best = c;
        lab.at<std::uint8_t>(y, x) = best;
      }
    d += metrics::dice(SegMask{lab}, SegMask{s.labels}, SegClass::disc);
  }
  MESSAGE("mean disc dice " << d / train.size());
  CHECK(d / train.size() > 0.9);
  CHECK_THROWS_AS(train_segmenter(model, {{train[0].image, cv::Mat(32, 32, CV_8U, cv::Scalar(7))}}, {}, 1), Error);
}
