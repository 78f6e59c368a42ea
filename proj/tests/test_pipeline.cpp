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

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include <opencv2/imgproc.hpp>

#include "doctest.h"
#include "fundus/csv.hpp"
#include "fundus/pipeline.hpp"
#include "fundus/synth.hpp"

using namespace fundus;
using namespace fundus::pipeline;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

cv::Mat disc_mask(bool with_cup) {
  SegMask m{cv::Mat(40, 40, CV_8U, cv::Scalar(0)), MaskResolution::native};
  cv::circle(m.labels, {20, 20}, 12, cv::Scalar(1), cv::FILLED);
  if (with_cup) cv::circle(m.labels, {20, 20}, 6, cv::Scalar(2), cv::FILLED);
  return encode_mask(m);
}

struct EvalFixture {
  fs::path dir, key, fovea, risk, masks;

  // a: exact mask, fovea off by (3, 4); b: cup missing, exact fovea; c, d: labels only
  EvalFixture(const std::string& name, bool shuffle_key) : dir(fresh_dir(name)) {
    write_image(dir / "gt" / "a.png", disc_mask(true));
    write_image(dir / "gt" / "b.png", disc_mask(true));
    write_image(dir / "pred" / "a.png", disc_mask(true));
    write_image(dir / "pred" / "b.png", disc_mask(false));
    masks = dir / "pred";
    std::vector<std::vector<std::string>> rows{{"a", "10", "20", "0", "gt/a.png"},
                                               {"b", "50", "60", "0", "gt/b.png"},
                                               {"c", "", "", "1", ""},
                                               {"d", "", "", "1", ""}};
    if (shuffle_key) std::reverse(rows.begin(), rows.end());
    CsvTable k({"id", "fovea_x", "fovea_y", "glaucoma", "mask_path"});
    for (auto& r : rows) k.add_row(r);
    key = dir / "key.csv";
    k.write(key);
    fovea = dir / "fovea.csv";
    write_fovea_csv({{"a", {13, 24}, {0, 0}}, {"b", {50, 60}, {0, 0}}, {"c", {1, 1}, {0, 0}}}, fovea);
    risk = dir / "classification.csv";
    write_risk_csv({{"a", 0.1}, {"b", 0.4}, {"c", 0.35}, {"d", 0.8}}, risk);
  }
};

config::PipelineConfig mini_config(const fs::path& root) {
  synth::SynthConfig sc;
  sc.images_per_domain = 4;
  sc.size_scale = 0.0625;
  sc.seed = 3;
  const auto ds = synth::generate_dataset(root / "data", sc);
  config::PipelineConfig c;
  c.seed = 4;
  c.data_root = ds.root;
  c.eval_key = ds.eval_key;
  c.work_dir = root / "work";
  c.permissive_sizes = true;
  c.val_fraction = 0.34;
  c.roi_size = 48;
  c.localizer.input_size = 32;
  c.localizer.channels = 4;
  c.localizer.depth = 2;
  c.localizer.trunk_stride = 2;
  c.localizer.max_epochs = 2;
  c.localizer.batch_size = 4;
  c.localizer.gaussian_variance = 4;
  c.cyclegan.image_size = 16;
  c.cyclegan.generator_channels = 4;
  c.cyclegan.residual_blocks = 1;
  c.cyclegan.discriminator_channels = 4;
  c.cyclegan.discriminator_layers = 2;
  c.cyclegan.epochs = 2;
  c.cyclegan.decay_epochs = 1;
  c.cyclegan.load_scale = 1.0;
  c.classifier.input_size = 75;
  c.classifier.width = 0.125;
  c.classifier.max_epochs = 1;
  c.classifier.batch_size = 4;
  c.classifier.allow_random_init = true;
  c.segmenter.input_size = 32;
  c.segmenter.base_channels = 4;
  c.segmenter.depth = 2;
  c.segmenter.max_epochs = 2;
  c.segmenter.batch_size = 4;
  c.tta.n_transforms = 2;
  return c;
}

}  // namespace

TEST_CASE("evaluation reproduces hand-computed metrics") {
  EvalFixture f("fundus_test_eval", false);
  const EvalReport r = evaluate({f.key, f.fovea, f.risk, f.masks});
  REQUIRE(r.mean_fovea_distance);
  CHECK(*r.mean_fovea_distance == doctest::Approx(2.5).epsilon(1e-12));
  REQUIRE(r.auc);
  CHECK(*r.auc == doctest::Approx(0.75).epsilon(1e-12));
  REQUIRE(r.mean_disc_dice);
  CHECK(*r.mean_disc_dice == doctest::Approx(1.0));
  CHECK(*r.mean_cup_dice == doctest::Approx(0.5));
  // b has no predicted cup: ratio 0 against a positive ground truth, relative error 1
  CHECK(*r.cdr_rme == doctest::Approx(0.5));
  REQUIRE(r.rows.size() == 4);
  CHECK(r.rows[0].id == "a");
  CHECK(*r.rows[0].fovea_distance == doctest::Approx(5.0));
  CHECK_FALSE(r.rows[2].fovea_distance);

  const auto j = r.to_json();
  CHECK(j.at("schema") == 1);
  CHECK(j.at("images") == 4);

  r.write_csv(f.dir / "report.csv");
  const CsvTable t = CsvTable::read(f.dir / "report.csv");
  CHECK(t.size() == 5);
  CHECK(t.rows().back()[0] == "mean");
}

TEST_CASE("metrics do not depend on key order") {
  EvalFixture a("fundus_test_eval_a", false), b("fundus_test_eval_b", true);
  const auto ra = evaluate({a.key, a.fovea, a.risk, a.masks});
  const auto rb = evaluate({b.key, b.fovea, b.risk, b.masks});
  CHECK(ra.to_json() == rb.to_json());
  for (std::size_t i = 0; i < ra.rows.size(); ++i) CHECK(ra.rows[i].id == rb.rows[i].id);
}

TEST_CASE("classification-only evaluation leaves the other metrics null") {
  EvalFixture f("fundus_test_eval_cls", false);
  EvalInputs in;
  in.key = f.key;
  in.risk = f.risk;
  const auto j = evaluate(in).to_json();
  CHECK(j.at("auc").get<double>() == doctest::Approx(0.75));
  for (const char* k : {"mean_cup_dice", "mean_disc_dice", "cdr_rme", "mean_fovea_distance"}) CHECK(j.at(k).is_null());
}

TEST_CASE("evaluation names the stage behind a missing prediction") {
  EvalFixture f("fundus_test_eval_missing", false);
  write_risk_csv({{"a", 0.1}}, f.risk);
  EvalInputs in;
  in.key = f.key;
  in.risk = f.risk;
  CHECK_THROWS_WITH_AS(evaluate(in), doctest::Contains("stage 'classify'"), Error);
}

TEST_CASE("report validation") {
  EvalReport r;
  r.auc = 1.5;
  CHECK_THROWS_AS(r.validate(), Error);
  r.auc = 0.5;
  r.mean_fovea_distance = -1.0;
  CHECK_THROWS_AS(r.validate(), Error);
}

TEST_CASE("prediction files round trip") {
  const auto dir = fresh_dir("fundus_test_pipeline_io");
  write_risk_csv({{"x", 0.1234567}, {"y", 1.0}}, dir / "c.csv");
  const auto t = CsvTable::read(dir / "c.csv");
  CHECK(t.header() == std::vector<std::string>{"id", "p_glaucoma"});
  CHECK(t.rows()[0][1] == "0.123457");
  CHECK(t.rows()[1][1] == "1.000000");

  write_cdr_csv({{"x", 0.5}, {"y", std::nullopt}}, dir / "cdr.csv");
  const auto cdr = read_cdr_csv(dir / "cdr.csv");
  CHECK(*cdr[0].cdr == 0.5);
  CHECK_FALSE(cdr[1].cdr);

  write_fovea_csv({{"x", {1.25, 2.5}, {3, 4}}}, dir / "f.csv");
  const auto f = read_fovea_csv(dir / "f.csv");
  CHECK(f[0].fovea == Point2{1.25, 2.5});
  CHECK(f[0].cup == Point2{3, 4});
}

TEST_CASE("brightest region finds a bright blob") {
  cv::Mat img(120, 160, CV_8UC3, cv::Scalar(20, 40, 80));
  cv::circle(img, {110, 40}, 12, cv::Scalar(220, 230, 250), cv::FILLED);
  const Point2 p = brightest_region(img);
  CHECK(std::hypot(p.x - 110, p.y - 40) <= 2.0);
}

TEST_CASE("device selection") {
  unsetenv("PIPELINE_DEVICE");
  CHECK_NOTHROW(check_device());
  setenv("PIPELINE_DEVICE", "cpu", 1);
  CHECK_NOTHROW(check_device());
  setenv("PIPELINE_DEVICE", "cuda:0", 1);
  CHECK_THROWS_AS(check_device(), Error);
  unsetenv("PIPELINE_DEVICE");
}

TEST_CASE("pipeline runs, resumes and reports missing upstream stages") {
  const auto root = fresh_dir("fundus_test_pipeline_run");
  auto cfg = mini_config(root);
  const fs::path w = cfg.work_dir;

  const auto first = run_pipeline(cfg);
  CHECK(first.executed == stage_names());
  for (const char* f : {"fovea.csv", "classification.csv", "cdr.csv", "report.json", "report.csv", "timings.json"})
    CHECK(fs::exists(w / f));
  CHECK(CsvTable::read(w / "classification.csv").size() == 4);
  CHECK(CsvTable::read(w / "cdr.csv").size() == 4);
  for (const auto& e : fs::directory_iterator(w / "segmentation")) CHECK(e.path().extension() == ".png");
  const auto j = first.report.to_json();
  CHECK(j.at("schema") == 1);
  for (const char* k : {"mean_cup_dice", "mean_disc_dice", "cdr_rme", "auc", "mean_fovea_distance"})
    CHECK_FALSE(j.at(k).is_null());
  CHECK(j.at("training").at("expand").at("items") == 3 * j.at("training").at("expand").at("rois").get<int>());
  const std::string report = bytes(w / "report.json");

  // rerun: nothing but evaluation, identical report
  const auto second = run_pipeline(cfg);
  CHECK(second.executed == std::vector<std::string>{"evaluate"});
  CHECK(second.skipped.size() == stage_names().size() - 1);
  CHECK(bytes(w / "report.json") == report);

  // a segmenter setting only invalidates segmentation
  cfg.segmenter.max_epochs = 1;
  const auto third = run_pipeline(cfg);
  CHECK(third.executed == std::vector<std::string>{"segment", "evaluate"});

  // forced single stage with its upstream artifact gone
  fs::remove(w / "expanded" / "index.csv");
  RunOptions only;
  only.only = "classify";
  CHECK_THROWS_WITH_AS(run_pipeline(cfg, only), doctest::Contains("stage 'expand'"), Error);
  only.only = "nonsense";
  CHECK_THROWS_AS(run_pipeline(cfg, only), Error);

  RunOptions force;
  force.force = true;
  CHECK(run_pipeline(cfg, force).executed == stage_names());
}

TEST_CASE("classification-only pipeline") {
  const auto root = fresh_dir("fundus_test_pipeline_cls");
  auto cfg = mini_config(root);
  cfg.stages.localize = false;
  cfg.stages.cyclegan = false;
  cfg.stages.segment = false;
  const auto res = run_pipeline(cfg);
  CHECK(res.executed == std::vector<std::string>{"ingest", "crop", "classify", "evaluate"});
  const auto j = res.report.to_json();
  CHECK_FALSE(j.at("auc").is_null());
  for (const char* k : {"mean_cup_dice", "mean_disc_dice", "cdr_rme", "mean_fovea_distance"}) CHECK(j.at(k).is_null());
  CHECK_FALSE(fs::exists(cfg.work_dir / "fovea.csv"));

  RunOptions only;
  only.only = "segment";
  CHECK_THROWS_AS(run_pipeline(cfg, only), Error);  // disabled stage
}
