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

#include <cmath>
#include <random>

#include <opencv2/imgproc.hpp>

#include "fundus/heatmap.hpp"

using namespace fundus;
using namespace fundus::heatmap;

namespace {

HourglassConfig tiny_config() {
  HourglassConfig c;
  c.input_size = 32;
  c.channels = 8;
  c.depth = 2;
  c.trunk_stride = 2;
  c.batch_size = 4;
  c.gaussian_variance = 4.0;
  return c;
}

}  // namespace

TEST_CASE("encode matches the closed form") {
  const cv::Mat m = encode_heatmap({128, 128}, 256, 100.0);
  CHECK(m.at<float>(128, 128) == 1.0f);
  CHECK(m.at<float>(128, 138) == doctest::Approx(std::exp(-0.5)).epsilon(1e-6));
  std::mt19937 rng(3);
  for (int k = 0; k < 200; ++k) {
    const int r = rng() % 256, c = rng() % 256;
    const double expect = std::exp(-((c - 128.0) * (c - 128.0) + (r - 128.0) * (r - 128.0)) / 200.0);
    CHECK(std::abs(m.at<float>(r, c) - expect) <= 1e-6);
  }
  CHECK(cv::norm(m, encode_heatmap({128, 128}, 256, 100.0), cv::NORM_INF) == 0.0);
  CHECK_THROWS_AS(encode_heatmap({256, 3}, 256, 100.0), Error);
  CHECK_THROWS_AS(encode_heatmap({3, 3}, 256, 0.0), Error);
}

TEST_CASE("values decay monotonically away from the peak") {
  const cv::Mat m = encode_heatmap({40.4, 17.6}, 64, 25.0);
  for (int c = 41; c < 64; ++c) CHECK(m.at<float>(18, c) < m.at<float>(18, c - 1));
  for (int r = 17; r >= 0; --r) CHECK(m.at<float>(r, 40) < m.at<float>(r + 1, 40));
  CHECK(decode_heatmap(m).location == Point2{40, 18});
}

TEST_CASE("decode round trip, tie-break and degenerate maps") {
  std::mt19937 rng(11);
  for (int k = 0; k < 300; ++k) {
    const Point2 p{double(rng() % 256), double(rng() % 256)};
    const Peak pk = decode_heatmap(encode_heatmap(p, 256, 100.0));
    REQUIRE(pk.location == p);
    CHECK(pk.value == 1.0f);
  }
  cv::Mat two(256, 256, CV_32F, cv::Scalar(0));
  two.at<float>(10, 10) = 3.0f;
  two.at<float>(5, 5) = 3.0f;
  CHECK(decode_heatmap(two).location == Point2{5, 5});
  const Peak z = decode_heatmap(cv::Mat(256, 256, CV_32F, cv::Scalar(0)));
  CHECK(z.degenerate);
  CHECK(z.location == Point2{0, 0});
}

TEST_CASE("model shape, seeding and eval determinism") {
  HourglassConfig c;
  c.channels = 8;
  c.depth = 3;
  StackedHourglass a(c, 5), b(c, 5);
  const auto pa = a.named_parameters(), pb = b.named_parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].var->value.values()[0] == pb[i].var->value.values()[0]);
  a.eval();
  Tensor x({1, 3, 256, 256}, 0.3f);
  nn::NoGradGuard g;
  const auto o1 = a.forward(nn::constant(x)), o2 = a.forward(nn::constant(x));
  REQUIRE(o1.size() == 2);
  CHECK(o1[1]->value.shape() == Shape{1, 2, 256, 256});
  for (std::size_t i = 0; i < o1[1]->value.size(); ++i) REQUIRE(o1[1]->value[i] == o2[1]->value[i]);
  CHECK_THROWS_AS(a.forward(nn::constant(Tensor({1, 3, 64, 64}))), Error);
}

TEST_CASE("both landmarks share one trunk and one head per stack") {
  StackedHourglass m(tiny_config(), 1);
  CHECK(m.trunk().parameter_count() > 0);
  int heads = 0;
  for (const auto& p : m.named_parameters())
    if (p.name.find(".head.weight") != std::string::npos) {
      ++heads;
      CHECK(p.var->value.dim(0) == 2);
    }
  CHECK(heads == 2);
}

TEST_CASE("config validation and schedule") {
  HourglassConfig c;
  c.stacks = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = HourglassConfig{};
  c.input_size = 100;
  CHECK_THROWS_AS(c.validate(), Error);
  c = HourglassConfig{};
  const nn::StepSchedule s{c.learning_rate, c.lr_decay_factor, c.lr_decay_every};
  CHECK(s.at(51) == doctest::Approx(1e-4));
  CHECK(hourglass_config_from_json(to_json(tiny_config())).channels == 8);
}

TEST_CASE("tiny localizer fits blobs and locate maps back to native pixels") {
  auto cfg = tiny_config();
  cfg.max_epochs = 60;
  cfg.early_stop_patience = 60;
  cfg.learning_rate = 3e-3;
  std::vector<LocalizerSample> train;
  std::mt19937 rng(2);
  for (int i = 0; i < 8; ++i) {
    cv::Mat img(32, 32, CV_8UC3, cv::Scalar(30, 40, 90));
    const Point2 cup{double(6 + rng() % 8), double(8 + rng() % 16)};
    const Point2 fovea{double(20 + rng() % 8), double(8 + rng() % 16)};
    cv::circle(img, {int(cup.x), int(cup.y)}, 3, cv::Scalar(220, 230, 250), cv::FILLED);
    cv::circle(img, {int(fovea.x), int(fovea.y)}, 2, cv::Scalar(5, 5, 20), cv::FILLED);
    train.push_back({img, cup, fovea, 32});
  }
  StackedHourglass model(cfg, 3);
  augment::TransformSpec none;
  const auto hist = train_localizer(model, train, {}, 9, none);
  CHECK(hist.epochs.size() == 60);
  CHECK(hist.epochs.back().train_loss < hist.epochs.front().train_loss * 0.5);
  double err = 0.0;
  for (const auto& s : train) {
    cv::Mat native;
    cv::resize(s.image, native, {128, 96}, 0, 0, cv::INTER_NEAREST);
    const auto r = locate(model, native);
    CHECK(r.fovea.x <= 127);
    CHECK(r.fovea.y <= 95);
    err += std::hypot(r.cup_center.x / 4 - s.cup.x, r.cup_center.y / 3 - s.cup.y);
  }
  MESSAGE("mean cup error (input px): " << err / train.size());
  CHECK(err / train.size() < 3.0);
}

TEST_CASE("empty training set and checkpoints") {
  StackedHourglass model(tiny_config(), 1);
  CHECK_THROWS_AS(train_localizer(model, {}, {}, 0), Error);
  const auto path = std::filesystem::temp_directory_path() / "fundus_test_heatmap" / "loc.bin";
  save_localizer(model, {}, path);
  auto back = load_localizer(path);
  CHECK(back->config().channels == 8);
  CHECK(back->named_parameters()[3].var->value[0] == model.named_parameters()[3].var->value[0]);
}
