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

#include <random>

#include "doctest.h"
#include "fundus/config.hpp"

using namespace fundus;
using namespace fundus::config;

namespace {
PipelineConfig parse(const std::string& text) { return parse_pipeline_config(KeyValues::parse(text), "/base"); }
const std::string kData = "data.root = ds\n";
}  // namespace

TEST_CASE("key value syntax") {
  auto kv = KeyValues::parse("# header\n a = 1 \nb.c = \"x # y\"  # trailing\n\nd=  two words\n");
  CHECK(*kv.take("a") == "1");
  CHECK(*kv.take("b.c") == "x # y");
  CHECK(*kv.take("d") == "two words");
  CHECK_FALSE(kv.take("e"));
  kv.require_all_consumed();

  CHECK_THROWS_WITH_AS(KeyValues::parse("a = 1\na = 2\n", "f.conf"), "f.conf:2: duplicate key 'a'", Error);
  CHECK_THROWS_AS(KeyValues::parse("just words\n"), Error);
  CHECK_THROWS_AS(KeyValues::parse("bad key = 1\n"), Error);
  CHECK_THROWS_AS(KeyValues::parse(".a = 1\n"), Error);

  auto kv2 = KeyValues::parse("x = 1\ny = 2\n", "g.conf");
  kv2.take("x");
  CHECK_THROWS_WITH_AS(kv2.require_all_consumed(), "unknown config keys: y (g.conf:2)", Error);
}

TEST_CASE("scalar parsing is strict") {
  CHECK(parse_int("42", "k") == 42);
  CHECK(parse_int("-3", "k") == -3);
  CHECK_THROWS_AS(parse_int("4.5", "k"), Error);
  CHECK_THROWS_AS(parse_int("", "k"), Error);
  CHECK(parse_double("1e-3", "k") == doctest::Approx(1e-3));
  CHECK_THROWS_AS(parse_double("1x", "k"), Error);
  CHECK(parse_bool("true", "k"));
  CHECK_FALSE(parse_bool("0", "k"));
  CHECK_THROWS_AS(parse_bool("maybe", "k"), Error);
}

TEST_CASE("dotted sections map onto module configs") {
  const auto c = parse(kData +
                       "classifier.batch_size = 60\nclassifier.freeze_boundary = Mixed_6b\nclassifier.class_weights = 1,9\n"
                       "localizer.gaussian_variance = 25\ncyclegan.epochs = 170\nsegmenter.postprocess = false\n"
                       "tta.domains = 1,3\ntta.n_transforms = 4\ntta.seed = 9\nseed = 12\nstages.segment = no\n");
  CHECK(c.classifier.batch_size == 60);
  CHECK(c.classifier.freeze_boundary == "Mixed_6b");
  REQUIRE(c.classifier.class_weights);
  CHECK((*c.classifier.class_weights)[0] == 1.0f);
  CHECK((*c.classifier.class_weights)[1] == 9.0f);
  CHECK(c.localizer.gaussian_variance == 25.0);
  CHECK(c.cyclegan.epochs == 170);
  CHECK_FALSE(c.segmenter.postprocess);
  CHECK(c.tta_domains == std::vector<int>{1, 3});
  CHECK(c.tta.n_transforms == 4);
  CHECK(c.tta.seed == 9u);
  CHECK(c.seed == 12u);
  CHECK_FALSE(c.stages.segment);
  CHECK(c.stages.classify);
  CHECK_FALSE(c.classifier.allow_random_init);

  // defaults untouched
  const PipelineConfig d;
  CHECK(c.classifier.input_size == d.classifier.input_size);
  CHECK(c.localizer.stacks == d.localizer.stacks);
  CHECK_FALSE(parse(kData + "classifier.class_weights = auto\n").classifier.class_weights);
}

TEST_CASE("unknown and mistyped keys are rejected") {
  CHECK_THROWS_AS(parse(kData + "classifier.batchsize = 60\n"), Error);
  CHECK_THROWS_AS(parse(kData + "colour = red\n"), Error);
  CHECK_THROWS_AS(parse(kData + "classifier.batch_size = sixty\n"), Error);
  CHECK_THROWS_AS(parse(kData + "classifier.batch_size = 0\n"), Error);  // module validation
  CHECK_THROWS_AS(parse(kData + "localizer.input_size = 1.5\n"), Error);
  CHECK_THROWS_AS(parse(kData + "stages.localize = perhaps\n"), Error);
}

TEST_CASE("paths resolve against the config directory") {
  const auto c = parse("data.root = ds\nwork_dir = out/w\ndata.eval_key = /abs/key.csv\n");
  CHECK(c.data_root == std::filesystem::path("/base/ds"));
  CHECK(c.work_dir == std::filesystem::path("/base/out/w"));
  CHECK(c.eval_key == std::filesystem::path("/abs/key.csv"));
}

TEST_CASE("validation") {
  CHECK_NOTHROW(parse(kData).validate());
  CHECK_THROWS_AS(parse("").validate(), Error);  // no data
  CHECK_THROWS_AS(parse(kData + "data.manifest = m.csv\n").validate(), Error);
  CHECK_THROWS_AS(parse(kData + "tta.domains = 1,4\n").validate(), Error);
  CHECK_THROWS_AS(parse(kData + "tta.domains = 2,2\n").validate(), Error);
  CHECK_THROWS_AS(parse(kData + "data.val_fraction = 1\n").validate(), Error);
  CHECK_THROWS_AS(parse(kData + "data.layout = nested\n").validate(), Error);
}

TEST_CASE("text form round trips") {
  auto base = synthetic_preset();
  base.data_root = "/d";
  base.eval_key = "/d/key.csv";
  base.work_dir = "/w";
  base.classifier.class_weights = std::array<float, 2>{0.625f, 2.5f};
  const std::string text = to_text(base);
  const auto back = parse_pipeline_config(KeyValues::parse(text), "/");
  CHECK(to_text(back) == text);

  // random numeric edits survive a round trip too
  std::mt19937 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto c = base;
    c.seed = rng() % 100000;
    c.localizer.learning_rate = std::uniform_real_distribution<double>(1e-5, 1e-1)(rng);
    c.localizer.spatial_dropout_rate = std::uniform_real_distribution<float>(0.0f, 0.9f)(rng);
    c.cyclegan.cycle_weight = std::uniform_real_distribution<double>(0.1, 20)(rng);
    c.classifier.dropout = std::uniform_real_distribution<float>(0.0f, 0.9f)(rng);
    c.segmenter.max_epochs = 1 + static_cast<int>(rng() % 300);
    c.tta.n_transforms = 1 + static_cast<int>(rng() % 12);
    c.val_fraction = std::uniform_real_distribution<double>(0.01, 0.9)(rng);
    const auto r = parse_pipeline_config(KeyValues::parse(to_text(c)), "/");
    CHECK(r.seed == c.seed);
    CHECK(r.localizer.learning_rate == c.localizer.learning_rate);
    CHECK(r.localizer.spatial_dropout_rate == c.localizer.spatial_dropout_rate);
    CHECK(r.cyclegan.cycle_weight == c.cyclegan.cycle_weight);
    CHECK(r.classifier.dropout == c.classifier.dropout);
    CHECK(r.segmenter.max_epochs == c.segmenter.max_epochs);
    CHECK(r.tta.n_transforms == c.tta.n_transforms);
    CHECK(r.val_fraction == c.val_fraction);
  }
}

TEST_CASE("synthetic preset stays within the tiny-model budget") {
  const auto c = synthetic_preset();
  const PipelineConfig full;
  CHECK(c.localizer.channels * 8 <= full.localizer.channels);
  CHECK(c.cyclegan.generator_channels * 8 <= full.cyclegan.generator_channels);
  CHECK(c.cyclegan.discriminator_channels * 8 <= full.cyclegan.discriminator_channels);
  CHECK(c.classifier.width <= 0.125);
  CHECK(c.segmenter.base_channels * 8 <= full.segmenter.base_channels);
  CHECK(c.localizer.max_epochs <= 200);
  CHECK(c.cyclegan.epochs <= 200);
  CHECK(c.classifier.max_epochs <= 200);
  CHECK(c.segmenter.max_epochs <= 200);
}
