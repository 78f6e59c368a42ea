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
#include <filesystem>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "fundus/csv.hpp"
#include "fundus/data.hpp"
#include "fundus/segmask.hpp"

using namespace fundus;
using namespace fundus::data;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("fundus_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

DatasetManifest synthetic_manifest(int d1, int d1_pos, int d2, int d2_pos) {
  DatasetManifest m;
  auto add = [&m](int domain, int n, int pos) {
    for (int i = 0; i < n; ++i) {
      ManifestEntry e;
      e.id = "d" + std::to_string(domain) + "_" + std::to_string(i);
      e.domain = domain;
      e.glaucoma = i < pos;
      m.entries.push_back(e);
    }
  };
  add(1, d1, d1_pos);
  add(2, d2, d2_pos);
  return m;
}

}  // namespace

TEST_CASE("domain sizes") {
  CHECK(native_extent(1) == Extent{2056, 2124});
  CHECK(domain_from_extent({1634, 1634}) == 2);
  CHECK(domain_from_extent({1940, 1940}) == 3);
  CHECK_FALSE(domain_from_extent({1000, 1000}).has_value());
  CHECK_THROWS_AS(check_domain(4), Error);
}

TEST_CASE("stratified split keeps strata proportions") {
  const auto m = synthetic_manifest(400, 40, 800, 80);
  const auto s = stratified_split(m, 0.1, 7);
  int val[3][2] = {};
  for (const auto& id : s.val_ids) {
    const auto& e = m.find(id);
    ++val[e.domain][*e.glaucoma ? 1 : 0];
  }
  CHECK(val[1][1] == 4);
  CHECK(val[1][0] == 36);
  CHECK(val[2][1] == 8);
  CHECK(val[2][0] == 72);
  CHECK(s.train_ids.size() + s.val_ids.size() == m.size());
  for (const auto& id : s.val_ids) CHECK(s.train_ids.count(id) == 0);

  const auto again = stratified_split(m, 0.1, 7);
  CHECK(again.val_ids == s.val_ids);
  const auto other = stratified_split(m, 0.1, 8);
  CHECK(other.val_ids != s.val_ids);
}

TEST_CASE("stratified split rounds small strata and rejects unlabelled entries") {
  auto m = synthetic_manifest(4, 1, 0, 0);
  const auto s = stratified_split(m, 0.1, 1);
  CHECK(s.val_ids.empty());
  m.entries[0].glaucoma.reset();
  CHECK_THROWS_AS(stratified_split(m, 0.1, 1), Error);
  CHECK_THROWS_AS(stratified_split(synthetic_manifest(4, 1, 0, 0), 1.0, 1), Error);
}

TEST_CASE("split csv round trip") {
  const auto m = synthetic_manifest(20, 5, 10, 2);
  const auto s = stratified_split(m, 0.2, 3);
  const fs::path dir = scratch("split");
  write_split_csv(s, dir / "split.csv");
  const auto r = read_split_csv(dir / "split.csv");
  CHECK(r.train_ids == s.train_ids);
  CHECK(r.val_ids == s.val_ids);
}

TEST_CASE("crop_roi offset and edge replication") {
  cv::Mat img(1634, 1634, CV_8UC1);
  cv::randu(img, 0, 256);
  const auto p = crop_roi(img, {800.0, 900.0}, 500);
  CHECK(p.record.x0 == 550);
  CHECK(p.record.y0 == 650);
  CHECK(p.pixels.rows == 500);
  CHECK(p.pixels.at<std::uint8_t>(0, 0) == img.at<std::uint8_t>(650, 550));
  CHECK(p.pixels.at<std::uint8_t>(499, 499) == img.at<std::uint8_t>(1149, 1049));

  const auto corner = crop_roi(img, {0.0, 0.0}, 500);
  CHECK(corner.record.x0 == -250);
  for (int y = 0; y < 250; ++y)
    for (int x = 0; x < 250; ++x) REQUIRE(corner.pixels.at<std::uint8_t>(y, x) == img.at<std::uint8_t>(0, 0));
  CHECK(corner.pixels.at<std::uint8_t>(250, 260) == img.at<std::uint8_t>(0, 10));
  CHECK(corner.pixels.at<std::uint8_t>(10, 300) == img.at<std::uint8_t>(0, 50));

  CHECK_THROWS_AS(crop_roi(img, {-1.0, 5.0}, 500), Error);
  CHECK_THROWS_AS(crop_roi(img, {5.0, 5.0}, 2000), Error);
}

TEST_CASE("paste_back restores the in-bounds region") {
  cv::Mat img(300, 400, CV_8UC3);
  cv::randu(img, 0, 256);
  for (Point2 c : {Point2{0, 0}, Point2{399, 299}, Point2{200, 150}}) {
    const auto p = crop_roi(img, c, 128);
    cv::Mat canvas(img.size(), img.type(), cv::Scalar::all(0));
    paste_back(p.pixels, p.record, canvas);
    const cv::Rect win = cv::Rect(p.record.x0, p.record.y0, 128, 128) & cv::Rect(0, 0, 400, 300);
    CHECK(cv::norm(canvas(win), img(win), cv::NORM_INF) == 0.0);
    CHECK(cv::countNonZero(cv::Mat(canvas.reshape(1) != 0)) <= win.area() * 3);
  }
}

TEST_CASE("map_coords scaling, clamping and errors") {
  const Point2 p = map_coords({128, 128}, {256, 256}, {1634, 1634});
  CHECK(p.x == doctest::Approx(817.0));
  CHECK(p.y == doctest::Approx(817.0));
  const Point2 q = map_coords({255.9, 0}, {256, 256}, {100, 100});
  CHECK(q.x == doctest::Approx(99.0));
  CHECK_THROWS_AS(map_coords({1, 1}, {0, 256}, {10, 10}), Error);
  CHECK_THROWS_AS(map_coords({300, 1}, {256, 256}, {10, 10}), Error);
}

TEST_CASE("map_coords round trip stays within half a downscaled pixel") {
  // Quantising to the network grid and mapping back loses at most one grid cell.
  for (int d = 1; d <= 3; ++d) {
    const Extent native = native_extent(d);
    const Extent net{256, 256};
    const double bound_x = std::ceil(native.width / 256.0 / 2.0) + 1e-9;
    const double bound_y = std::ceil(native.height / 256.0 / 2.0) + 1e-9;
    for (int y = 0; y < native.height; y += 37)
      for (int x = 0; x < native.width; x += 41) {
        const Point2 n = map_coords({double(x), double(y)}, native, net);
        const Point2 snapped{std::round(n.x) >= 256 ? 255.0 : std::round(n.x), std::round(n.y) >= 256 ? 255.0 : std::round(n.y)};
        const Point2 back = map_coords(snapped, net, native);
        REQUIRE(std::abs(back.x - x) <= bound_x + native.width / 256.0 / 2.0);
        REQUIRE(std::abs(back.y - y) <= bound_y + native.height / 256.0 / 2.0);
      }
  }
}

TEST_CASE("flat layout infers domains and rejects unknown sizes") {
  const fs::path dir = scratch("flat");
  cv::imwrite((dir / "a.png").string(), cv::Mat(1634, 1634, CV_8UC3, cv::Scalar(10, 20, 30)));
  cv::imwrite((dir / "b.png").string(), cv::Mat(2056, 2124, CV_8UC3, cv::Scalar(10, 20, 30)));
  CsvTable ann({"id", "fovea_x", "fovea_y", "glaucoma"});
  ann.add_row({"a", "800", "810.5", "1"});
  ann.write(dir / "annotations.csv");
  const auto m = load_manifest(dir, Layout::flat);
  REQUIRE(m.size() == 2);
  CHECK(m.find("a").domain == 2);
  CHECK(m.find("b").domain == 1);
  CHECK(m.find("a").fovea->y == doctest::Approx(810.5));
  CHECK(*m.find("a").glaucoma);
  CHECK_FALSE(m.find("b").annotated());

  write_manifest_csv(m, dir / "out" / "manifest.csv");
  const auto back = read_manifest_csv(dir / "out" / "manifest.csv");
  CHECK(back.size() == 2);
  CHECK(back.find("a").fovea->x == doctest::Approx(800.0));

  cv::imwrite((dir / "c.png").string(), cv::Mat(100, 120, CV_8UC3));
  try {
    load_manifest(dir, Layout::flat);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("c.png") != std::string::npos);
  }
}

TEST_CASE("challenge layout with masks; empty directory") {
  const fs::path dir = scratch("challenge");
  CHECK(load_manifest(dir, Layout::challenge).size() == 0);
  fs::create_directories(dir / "domain2" / "images");
  fs::create_directories(dir / "domain2" / "masks");
  fs::create_directories(dir / "domain3" / "images");
  cv::Mat img(64, 64, CV_8UC3, cv::Scalar::all(90));
  cv::imwrite((dir / "domain2" / "images" / "x1.png").string(), img);
  cv::imwrite((dir / "domain3" / "images" / "t1.png").string(), img);
  cv::Mat mask(64, 64, CV_8UC1, cv::Scalar(255));
  cv::circle(mask, {30, 30}, 12, cv::Scalar(128), cv::FILLED);
  cv::circle(mask, {30, 30}, 5, cv::Scalar(0), cv::FILLED);
  cv::imwrite((dir / "domain2" / "masks" / "x1.png").string(), mask);

  CHECK_THROWS_AS(load_manifest(dir, Layout::challenge), Error);  // wrong native size
  const auto m = load_manifest(dir, Layout::challenge, {true});
  REQUIRE(m.size() == 2);
  CHECK(m.count_domain(3) == 1);
  const auto fi = load_image(m.find("x1"), {true});
  REQUIRE(fi.mask.has_value());
  REQUIRE(fi.cup_center.has_value());
  CHECK(fi.cup_center->x == doctest::Approx(30.0));
  CHECK(fi.cup_center->y == doctest::Approx(30.0));

  CsvTable ann({"id", "glaucoma"});
  ann.add_row({"t1", "0"});
  ann.write(dir / "domain3" / "annotations.csv");
  CHECK_THROWS_AS(load_manifest(dir, Layout::challenge, {true}), Error);
}
