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

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include <opencv2/imgproc.hpp>

#include "doctest.h"
#include "fundus/image.hpp"
#include "fundus/transfer.hpp"

using namespace fundus;
using namespace fundus::transfer;
namespace fs = std::filesystem;

namespace {

CycleGanConfig tiny_config() {
  CycleGanConfig c;
  c.image_size = 16;
  c.generator_channels = 4;
  c.residual_blocks = 1;
  c.discriminator_channels = 4;
  c.discriminator_layers = 2;
  c.load_scale = 1.0;
  c.epochs = 40;
  c.decay_epochs = 20;
  c.learning_rate = 1e-3;
  return c;
}

// Smooth blob images; `cast` is added to every BGR channel.
std::vector<cv::Mat> blobs(int n, unsigned seed, cv::Scalar cast) {
  std::mt19937 rng(seed);
  std::uniform_int_distribution<int> pos(4, 11), rad(2, 5);
  std::vector<cv::Mat> out;
  for (int i = 0; i < n; ++i) {
    cv::Mat m(16, 16, CV_8UC3, cv::Scalar(60, 90, 150));
    cv::circle(m, {pos(rng), pos(rng)}, rad(rng), cv::Scalar(170, 200, 230), cv::FILLED);
    cv::GaussianBlur(m, m, {3, 3}, 0.8);
    cv::add(m, cast, m);
    out.push_back(m);
  }
  return out;
}

double mean_abs(const cv::Mat& a, const cv::Mat& b) {
  cv::Mat d;
  cv::absdiff(a, b, d);
  const cv::Scalar s = cv::mean(d);
  return (s[0] + s[1] + s[2]) / 3.0;
}

std::string bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

GeneratorSet untrained_set(const CycleGanConfig& cfg) {
  GeneratorSet set;
  std::uint64_t seed = 1;
  for (const auto& p : all_pairs()) {
    set.set(p.a, p.b, std::make_shared<ResnetGenerator>(cfg, seed++));
    set.set(p.b, p.a, std::make_shared<ResnetGenerator>(cfg, seed++));
  }
  return set;
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("domain pairs") {
  CHECK(all_pairs().size() == 3);
  CHECK(parse_pair("1,3") == DomainPair{1, 3});
  CHECK(parse_pair(" 2 , 3 ") == DomainPair{2, 3});
  CHECK_THROWS_AS(parse_pair("2,1"), Error);
  CHECK_THROWS_AS(parse_pair("1,1"), Error);
  CHECK_THROWS_AS(parse_pair("1,4"), Error);
  CHECK_THROWS_AS(parse_pair("12"), Error);
}

TEST_CASE("config validation and learning-rate schedule") {
  CycleGanConfig c;
  CHECK_NOTHROW(c.validate());
  c.image_size = 250;
  CHECK_THROWS_AS(c.validate(), Error);
  c = CycleGanConfig{};
  c.cycle_weight = -1;
  CHECK_THROWS_AS(c.validate(), Error);
  c = CycleGanConfig{};
  CHECK(c.adversarial_weight == 1.0);
  CHECK(c.cycle_weight == 10.0);
  CHECK(c.identity_weight == 5.0);
  CHECK(c.learning_rate_at(1) == doctest::Approx(2e-4));
  CHECK(c.learning_rate_at(100) == doctest::Approx(2e-4));
  CHECK(c.learning_rate_at(101) == doctest::Approx(2e-4 * 100.0 / 101.0));
  CHECK(c.learning_rate_at(200) == doctest::Approx(2e-4 / 101.0));
  CHECK(cyclegan_config_from_json(to_json(tiny_config())).generator_channels == 4);
}

TEST_CASE("translation keeps shape and type and is deterministic") {
  const ResnetGenerator g(tiny_config(), 3);
  const cv::Mat img = blobs(1, 4, cv::Scalar::all(0))[0];
  const cv::Mat a = translate(g, img), b = translate(g, img);
  CHECK(a.size() == img.size());
  CHECK(a.type() == CV_8UC3);
  CHECK(cv::norm(a, b, cv::NORM_INF) == 0.0);
  CHECK_THROWS_AS(translate(g, cv::Mat(20, 16, CV_8UC3)), Error);
  CHECK_THROWS_AS(translate(g, cv::Mat(16, 16, CV_8UC1)), Error);
  const cv::Mat big(40, 30, CV_8UC3, cv::Scalar(10, 20, 30));
  CHECK(make_renderer(std::make_shared<ResnetGenerator>(tiny_config(), 3))(big).size() == big.size());
}

TEST_CASE("colour-cast domains: cycle loss falls and round trips beat the domain gap") {
  const auto cast = cv::Scalar(-40, 10, 50);
  const auto a = blobs(8, 10, cv::Scalar::all(0)), b = blobs(8, 11, cast);
  const CycleGanConfig cfg = tiny_config();
  const TrainedPair t = train_cyclegan(a, b, cfg, 5);
  REQUIRE(t.history.epochs.size() == static_cast<std::size_t>(cfg.epochs));
  CHECK_FALSE(t.history.aborted);
  const double first = t.history.epochs.front().cycle, last = t.history.epochs.back().cycle;
  CHECK(last <= 0.5 * first);
  for (const auto& e : t.history.epochs) {
    CHECK(std::isfinite(e.adversarial));
    CHECK(std::isfinite(e.identity));
    CHECK(std::isfinite(e.discriminator));
  }

  const auto held_a = blobs(6, 99, cv::Scalar::all(0));
  double cycle = 0, gap = 0;
  for (const auto& img : held_a) {
    cv::Mat shifted;
    cv::add(img, cast, shifted);
    gap += mean_abs(img, shifted);
    cycle += mean_abs(img, translate(*t.g_ba, translate(*t.g_ab, img)));
  }
  MESSAGE("round-trip L1 " << cycle / 6 << " vs domain gap " << gap / 6);
  CHECK(cycle < gap);
}

TEST_CASE("identical domains train towards the identity") {
  const auto a = blobs(8, 20, cv::Scalar::all(0));
  const TrainedPair t = train_cyclegan(a, a, tiny_config(), 6);
  double err = 0;
  for (const auto& img : blobs(6, 21, cv::Scalar::all(0))) err += mean_abs(img, translate(*t.g_ab, img));
  MESSAGE("identity L1 " << err / 6);
  CHECK(err / 6 < 12.0);
}

TEST_CASE("a non-finite loss aborts with the last good generators") {
  CycleGanConfig cfg = tiny_config();
  cfg.learning_rate = 1e30;
  cfg.epochs = 5;
  cfg.decay_epochs = 0;
  const auto a = blobs(4, 30, cv::Scalar::all(0)), b = blobs(4, 31, cv::Scalar::all(20));
  const TrainedPair t = train_cyclegan(a, b, cfg, 7);
  CHECK(t.history.aborted);
  CHECK_FALSE(t.history.abort_reason.empty());
  CHECK(t.history.epochs.size() < 5);
  for (const auto& g : {t.g_ab, t.g_ba})
    for (const auto& p : g->named_parameters())
      for (float v : p.var->value.values()) REQUIRE(std::isfinite(v));
}

TEST_CASE("generator sets") {
  const CycleGanConfig cfg = tiny_config();
  GeneratorSet set;
  CHECK_FALSE(set.complete());
  set.set(1, 2, std::make_shared<ResnetGenerator>(cfg, 1));
  CHECK_THROWS_WITH_AS(set.require_complete(), doctest::Contains("2->1"), Error);
  CHECK_THROWS_AS(set.get(2, 3), Error);
  CHECK_THROWS_AS(set.set(2, 2, std::make_shared<ResnetGenerator>(cfg, 1)), Error);
  const GeneratorSet full = untrained_set(cfg);
  CHECK(full.complete());
  CHECK(full.size() == 6);
  const int domains[] = {1, 2, 3};
  const auto r = full.renderers_for(2, domains);
  REQUIRE(r.size() == 3);
  const cv::Mat img = blobs(1, 40, cv::Scalar::all(0))[0];
  CHECK(cv::norm(r[1](img), img, cv::NORM_INF) == 0.0);
  CHECK(cv::norm(r[0](img), translate(*full.get(2, 1), img), cv::NORM_INF) == 0.0);
}

TEST_CASE("generators survive a save and load") {
  const auto dir = fresh_dir("fundus_test_transfer_save");
  CycleGanConfig cfg = tiny_config();
  cfg.epochs = 2;
  cfg.decay_epochs = 1;
  const auto a = blobs(3, 50, cv::Scalar::all(0)), b = blobs(3, 51, cv::Scalar::all(30));
  const TrainedPair t = train_cyclegan(a, b, cfg, 8);
  save_pair(dir, {1, 3}, t, cfg);
  CHECK(fs::exists(dir / "cyclegan_1_3.json"));
  const GeneratorSet set = load_generator_set(dir);
  CHECK(set.size() == 2);
  CHECK(cv::norm(translate(*set.get(1, 3), a[0]), translate(*t.g_ab, a[0]), cv::NORM_INF) == 0.0);
  CHECK(cv::norm(translate(*set.get(3, 1), b[0]), translate(*t.g_ba, b[0]), cv::NORM_INF) == 0.0);
  fs::remove_all(dir);
}

TEST_CASE("expansion triples the set and copies annotations byte for byte") {
  const auto dir = fresh_dir("fundus_test_transfer_expand");
  const GeneratorSet gens = untrained_set(tiny_config());
  std::vector<data::RoiEntry> rois;
  const auto imgs = blobs(12, 60, cv::Scalar::all(0));
  for (int i = 0; i < 12; ++i) {
    data::RoiEntry e;
    e.id = "roi" + std::to_string(i);
    e.domain = 1 + i % 3;
    e.image_path = dir / "in" / (e.id + ".png");
    write_image(e.image_path, imgs[static_cast<std::size_t>(i)]);
    if (i % 4 != 3) {
      cv::Mat mask(16, 16, CV_8U, cv::Scalar(255));
      cv::circle(mask, {8, 8}, 5, cv::Scalar(128), cv::FILLED);
      cv::circle(mask, {8, 8}, 2 + i % 3, cv::Scalar(0), cv::FILLED);
      e.mask_path = dir / "in" / (e.id + "_mask.png");
      write_image(*e.mask_path, mask);
      e.glaucoma = i % 2 == 0;
    }
    rois.push_back(e);
  }
  const auto items = expand_dataset(rois, gens, dir / "out");
  CHECK(items.size() == 36);
  int per_domain[4] = {0, 0, 0, 0}, synthetic = 0;
  for (const auto& it : items) {
    ++per_domain[it.rendered_domain];
    synthetic += it.is_synthetic;
    const auto& src = *std::find_if(rois.begin(), rois.end(), [&](const auto& r) { return r.id == it.original_id; });
    CHECK(it.is_synthetic == (it.rendered_domain != src.domain));
    CHECK(it.path.filename() == src.id + "__dom" + std::to_string(it.rendered_domain) + ".png");
    CHECK(it.glaucoma == src.glaucoma);
    REQUIRE(it.mask_path.has_value() == src.mask_path.has_value());
    if (src.mask_path) CHECK(bytes(*it.mask_path) == bytes(*src.mask_path));
    if (!it.is_synthetic) CHECK(bytes(it.path) == bytes(src.image_path));
    const cv::Mat rendered = read_color_image(it.path);
    CHECK(rendered.size() == cv::Size(16, 16));
  }
  CHECK(per_domain[1] == 12);
  CHECK(per_domain[2] == 12);
  CHECK(per_domain[3] == 12);
  CHECK(synthetic == 24);

  const auto reread = read_expanded_index(dir / "out" / "index.csv");
  REQUIRE(reread.size() == items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    CHECK(reread[i].original_id == items[i].original_id);
    CHECK(reread[i].rendered_domain == items[i].rendered_domain);
    CHECK(reread[i].is_synthetic == items[i].is_synthetic);
    CHECK(fs::equivalent(reread[i].path, items[i].path));
    CHECK(reread[i].glaucoma == items[i].glaucoma);
  }

  CHECK(expand_dataset({}, gens, dir / "empty").empty());
  CHECK(read_expanded_index(dir / "empty" / "index.csv").empty());

  GeneratorSet partial;
  partial.set(1, 2, gens.get(1, 2));
  CHECK_THROWS_WITH_AS(expand_dataset(rois, partial, dir / "partial"), doctest::Contains("missing generator"), Error);
  CHECK_FALSE(fs::exists(dir / "partial"));
  fs::remove_all(dir);
}
