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

// Acceptance suite: one PASS/FAIL line per criterion. `--quick` skips the two
// end-to-end synthetic runs (criteria 7 and 8).

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <opencv2/imgproc.hpp>

#include "fundus/augment.hpp"
#include "fundus/classifier.hpp"
#include "fundus/config.hpp"
#include "fundus/data.hpp"
#include "fundus/heatmap.hpp"
#include "fundus/log.hpp"
#include "fundus/metrics.hpp"
#include "fundus/pipeline.hpp"
#include "fundus/synth.hpp"
#include "gradcheck.hpp"

using namespace fundus;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Collects failed sub-checks of one criterion.
struct Verdict {
  std::vector<std::string> failures;
  std::string detail;
  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
};

std::string bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::string num(double v, int digits = 4) {
  std::ostringstream os;
  os.precision(digits);
  os << v;
  return os.str();
}

// 1. heatmap encode/decode
Verdict heatmap_round_trip() {
  Verdict v;
  const auto t0 = Clock::now();
  std::mt19937 rng(2024);
  int exact = 0;
  double worst = 0.0;
  for (int k = 0; k < 1000; ++k) {
    const Point2 p{double(rng() % 256), double(rng() % 256)};
    const cv::Mat m = heatmap::encode_heatmap(p, 256, 100.0);
    exact += heatmap::decode_heatmap(m).location == p;
    for (int s = 0; s < 64; ++s) {
      const int r = static_cast<int>(rng() % 256), c = static_cast<int>(rng() % 256);
      const double d2 = (c - p.x) * (c - p.x) + (r - p.y) * (r - p.y);
      worst = std::max(worst, std::abs(m.at<float>(r, c) - std::exp(-d2 / 200.0)));
    }
  }
  const double t = seconds_since(t0);
  v.expect(exact == 1000, "round trip exact for " + std::to_string(exact) + "/1000");
  v.expect(worst <= 1e-6, "closed-form error " + num(worst));
  v.expect(t < 10.0, "runtime " + num(t) + " s");
  v.detail = "1000/1000 exact, max gaussian error " + num(worst, 3) + ", " + num(t, 3) + " s";
  return v;
}

// 2. stratified split
Verdict split_stratification() {
  Verdict v;
  data::DatasetManifest m;
  auto add = [&m](int domain, int n, int positives) {
    for (int i = 0; i < n; ++i) {
      data::ManifestEntry e;
      e.id = "d" + std::to_string(domain) + "_" + std::to_string(i);
      e.domain = domain;
      e.image_path = e.id + ".png";
      e.glaucoma = i < positives;
      m.entries.push_back(e);
    }
  };
  add(1, 400, 40);
  add(2, 800, 80);
  const auto s = data::stratified_split(m, 0.1, 11);
  int val[3][2] = {};
  for (const auto& id : s.val_ids) {
    const auto& e = m.find(id);
    ++val[e.domain][*e.glaucoma ? 1 : 0];
  }
  const int expect[3][2] = {{0, 0}, {36, 4}, {72, 8}};
  for (int d = 1; d <= 2; ++d)
    for (int g = 0; g <= 1; ++g)
      v.expect(std::abs(val[d][g] - expect[d][g]) <= 1,
               "domain " + std::to_string(d) + " label " + std::to_string(g) + ": " + std::to_string(val[d][g]));
  v.expect(data::stratified_split(m, 0.1, 11).val_ids == s.val_ids, "same seed differs");
  v.expect(data::stratified_split(m, 0.1, 12).val_ids != s.val_ids, "seed has no effect");
  v.detail = "val counts d1 " + std::to_string(val[1][0]) + "/" + std::to_string(val[1][1]) + ", d2 " +
             std::to_string(val[2][0]) + "/" + std::to_string(val[2][1]);
  return v;
}

// 3. TTA algebra
Verdict tta_algebra() {
  Verdict v;
  cv::Mat roi(64, 64, CV_8UC3);
  cv::RNG(5).fill(roi, cv::RNG::UNIFORM, 0, 256);
  const augment::Renderer id = [](const cv::Mat& m) { return m.clone(); };
  const std::vector<augment::Renderer> three(3, id);
  const augment::TtaConfig cfg{10, 77};

  const float l0 = -0.2f, l1 = 1.1f;
  const augment::Predictor cls = [&](const cv::Mat&) { return Tensor({1, 2}, {l0, l1}); };
  augment::TtaTrace trace;
  const Tensor p = augment::tta_predict(cls, roi, three, augment::classifier_recipe(), cfg,
                                        augment::TtaMode::classification, &trace);
  const double single = std::exp(double(l1)) / (std::exp(double(l0)) + std::exp(double(l1)));
  double err = std::abs(p[1] - single);
  double sum_err = std::abs(p[0] + p[1] - 1.0);
  v.expect(trace.members == 30, "ensemble size " + std::to_string(trace.members));

  const float s[3] = {0.4f, -0.3f, 1.2f};
  const augment::Predictor seg = [&](const cv::Mat& m) {
    Tensor t({1, 3, m.rows, m.cols});
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x) t.at(0, c, y, x) = s[c];
    return t;
  };
  const Tensor q = augment::tta_predict(seg, roi, three, augment::segmenter_recipe(), cfg, augment::TtaMode::segmentation);
  const double z = std::exp(double(s[0])) + std::exp(double(s[1])) + std::exp(double(s[2]));
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      double total = 0.0;
      for (int c = 0; c < 3; ++c) {
        err = std::max(err, std::abs(q.at(0, c, y, x) - std::exp(double(s[c])) / z));
        total += q.at(0, c, y, x);
      }
      sum_err = std::max(sum_err, std::abs(total - 1.0));
    }
  v.expect(err <= 1e-6, "ensemble vs single softmax " + num(err));
  v.expect(sum_err <= 1e-6, "probability sum error " + num(sum_err));

  // apply / invert round trip on a smooth map, over pixels that stay in frame
  augment::TransformSpec spec = augment::segmenter_recipe();
  spec.apply_probability = 1.0;
  const int n = 128;
  cv::Mat smooth(n, n, CV_32F);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) smooth.at<float>(y, x) = 0.5f + 0.25f * std::sin(x * 0.06f) * std::cos(y * 0.05f + 0.4f);
  double worst_mae = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto t = augment::sample_transform(spec, seed, {n, n});
    const cv::Mat back = augment::invert_geometric(t, augment::apply_to_map(t, smooth));
    double e = 0.0;
    int count = 0;
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const Point2 at = augment::apply_to_point(t, {double(x), double(y)});
        if (at.x < 2 || at.y < 2 || at.x > n - 3 || at.y > n - 3) continue;
        e += std::abs(back.at<float>(y, x) - smooth.at<float>(y, x));
        ++count;
      }
    if (count > 0) worst_mae = std::max(worst_mae, e / count);
  }
  v.expect(worst_mae <= 0.02, "round trip interior MAE " + num(worst_mae));
  v.detail = "30 members, max deviation " + num(err, 3) + ", worst round-trip MAE " + num(worst_mae, 3);
  return v;
}

classifier::ClassifierConfig tiny_classifier() {
  classifier::ClassifierConfig c;
  c.input_size = 75;
  c.width = 0.125;
  c.allow_random_init = true;
  c.batch_size = 4;
  c.max_epochs = 5;
  c.learning_rate = 1e-3;
  c.early_stop_patience = 1000;
  return c;
}

// 4. frozen backbone
Verdict frozen_backbone() {
  Verdict v;
  const auto cfg = tiny_classifier();
  auto net = classifier::build_classifier(cfg, 8);
  std::map<std::string, std::vector<float>> before;
  for (const auto& p : net->named_parameters()) {
    const auto vals = p.var->value.values();
    before[p.name].assign(vals.begin(), vals.end());
  }
  std::vector<classifier::ClassifierSample> train;
  std::mt19937 rng(4);
  for (int i = 0; i < 8; ++i) {
    cv::Mat img(75, 75, CV_8UC3, cv::Scalar(40, 80, 170));
    cv::circle(img, {37, 37}, 28, cv::Scalar(80, 130, 215), cv::FILLED);
    cv::circle(img, {37 + int(rng() % 5) - 2, 37}, i % 2 ? 20 : 10, cv::Scalar(230, 245, 255), cv::FILLED);
    train.push_back({img, i % 2});
  }
  // 8 samples, batches of 4, 5 epochs: 10 optimiser steps
  classifier::train_classifier(*net, train, {}, 3);
  int frozen = 0, frozen_changed = 0, trainable_changed = 0;
  for (const auto& p : net->named_parameters()) {
    const auto& now = p.var->value.values();
    const auto& old = before.at(p.name);
    const bool same = std::memcmp(now.data(), old.data(), now.size() * sizeof(float)) == 0;
    if (!p.var->requires_grad) {
      ++frozen;
      frozen_changed += !same;
    } else {
      trainable_changed += !same;
    }
  }
  v.expect(frozen > 0, "nothing frozen");
  v.expect(frozen_changed == 0, std::to_string(frozen_changed) + " frozen tensors changed");
  v.expect(trainable_changed > 0, "no trainable tensor changed");
  v.detail = std::to_string(frozen) + " frozen tensors unchanged, " + std::to_string(trainable_changed) +
             " trainable tensors updated after 10 steps";
  return v;
}

// 5. weighted cross-entropy
Verdict weighted_ce() {
  Verdict v;
  const std::vector<std::array<double, 2>> raw{{0.3, -1.2}, {2.0, 0.5}, {-0.7, 0.9}, {0.0, 0.0}};
  const std::vector<int> labels{0, 1, 1, 0};
  Tensor t({4, 2});
  double plain = 0.0;
  for (int i = 0; i < 4; ++i) {
    t[2 * i] = float(raw[i][0]);
    t[2 * i + 1] = float(raw[i][1]);
    const double lse = std::log(std::exp(raw[i][0]) + std::exp(raw[i][1]));
    plain += (lse - raw[i][labels[i]]) / 4.0;
  }
  const float ones[] = {1.0f, 1.0f};
  const double eq_err = std::abs(nn::weighted_cross_entropy(nn::constant(t), labels, ones)->value[0] - plain);
  v.expect(eq_err <= 1e-7, "equal weights vs plain CE " + num(eq_err));

  // (1, 9) weights, logits (2, 0) for a class-0 and a class-1 sample
  const float w[] = {1.0f, 9.0f};
  const int y[] = {0, 1};
  const Tensor hand({2, 2}, {2.0f, 0.0f, 2.0f, 0.0f});
  const double ce0 = std::log1p(std::exp(-2.0)), ce1 = 2.0 + std::log1p(std::exp(-2.0));
  const double closed = (1.0 * ce0 + 9.0 * ce1) / 10.0;
  const double hand_err = std::abs(nn::weighted_cross_entropy(nn::constant(hand), y, w)->value[0] - closed);
  v.expect(hand_err <= 1e-6, "(1,9) hand case " + num(hand_err));

  auto features = nn::constant(testing::random_tensor({6, 8}, 31));
  auto weight = nn::parameter(testing::random_tensor({2, 8}, 32));
  auto bias = nn::parameter(testing::random_tensor({2}, 33));
  const int yy[] = {0, 1, 1, 0, 1, 0};
  const float ww[] = {0.3f, 1.7f};
  const double grad_err = testing::gradcheck(
      {weight, bias}, [&] { return nn::weighted_cross_entropy(nn::linear(features, weight, bias), yy, ww); }, 1e-3);
  v.expect(grad_err <= 1e-3, "head gradient error " + num(grad_err));
  v.detail = "plain " + num(eq_err, 2) + ", hand case " + num(hand_err, 2) + ", head gradient " + num(grad_err, 2);
  return v;
}

// 6. metric oracles
Verdict metric_oracles() {
  Verdict v;
  const auto t0 = Clock::now();
  cv::Mat a(20, 20, CV_8U, cv::Scalar(0)), b(20, 20, CV_8U, cv::Scalar(0));
  a(cv::Rect(0, 0, 10, 10)).setTo(1);
  b(cv::Rect(10, 10, 10, 10)).setTo(1);
  v.expect(metrics::dice(a, a) == 1.0, "identical dice");
  v.expect(metrics::dice(a, b) == 0.0, "disjoint dice");
  b.setTo(0);
  b(cv::Rect(5, 0, 10, 10)).setTo(1);  // 100 px each, 50 shared
  v.expect(metrics::dice(a, b) == 0.5, "half overlap dice");
  v.expect(metrics::dice(cv::Mat(4, 4, CV_8U, cv::Scalar(0)), cv::Mat(4, 4, CV_8U, cv::Scalar(0))) == 1.0,
           "empty dice");

  const double scores[] = {0.1, 0.4, 0.35, 0.8};
  const int labels[] = {0, 0, 1, 1};
  const double auc = metrics::auc(scores, labels);
  v.expect(auc == 0.75, "auc " + num(auc));
  const double sep[] = {0.1, 0.2, 0.8, 0.9}, flat[] = {0.5, 0.5, 0.5, 0.5};
  v.expect(metrics::auc(sep, labels) == 1.0, "separable auc");
  v.expect(metrics::auc(flat, labels) == 0.5, "tied auc");

  const double gt[] = {0.5}, pred[] = {0.52};
  const double rme = metrics::cdr_rme(pred, gt);
  v.expect(std::abs(rme - 0.04) < 1e-12, "rme " + num(rme));
  v.expect(metrics::cdr_rme(gt, gt) == 0.0, "rme of exact predictions");

  const Point2 p1[] = {{3, 4}}, o1[] = {{0, 0}};
  const double d = metrics::fovea_distance(p1, o1);
  v.expect(d == 5.0, "distance " + num(d));
  const Point2 p2[] = {{3, 4}, {7, 7}}, o2[] = {{0, 0}, {7, 7}};
  v.expect(metrics::fovea_distance(p2, o2) == 2.5, "mean distance");
  const double t = seconds_since(t0);
  v.expect(t < 5.0, "runtime " + num(t));
  v.detail = "auc " + num(auc) + ", rme " + num(rme) + ", distance " + num(d) + ", " + num(t, 2) + " s";
  return v;
}

struct SyntheticRun {
  fs::path dir;
  double seconds = 0.0;
  nlohmann::json report;
  std::string error;
};

SyntheticRun synthetic_run(const fs::path& dir) {
  SyntheticRun r{dir};
  const auto t0 = Clock::now();
  try {
    fs::remove_all(dir);
    synth::SynthConfig sc;  // 20 images per domain, 3 domains
    const auto ds = synth::generate_dataset(dir / "data", sc);
    auto cfg = config::synthetic_preset();
    cfg.seed = 1;
    cfg.data_root = ds.root;
    cfg.eval_key = ds.eval_key;
    cfg.work_dir = dir / "work";
    pipeline::run_pipeline(cfg);
    r.report = nlohmann::json::parse(bytes(cfg.work_dir / "report.json"));
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  r.seconds = seconds_since(t0);
  return r;
}

// 7. synthetic end to end
Verdict end_to_end(const SyntheticRun& run) {
  Verdict v;
  if (!run.error.empty()) {
    v.expect(false, "pipeline failed: " + run.error);
    return v;
  }
  const auto& j = run.report;
  const fs::path w = run.dir / "work";
  auto metric = [&j](const char* k) { return j.at(k).is_null() ? std::nan("") : j.at(k).get<double>(); };
  const double fovea = metric("mean_fovea_distance"), disc = metric("mean_disc_dice"), cup = metric("mean_cup_dice");
  v.expect(run.seconds < 3600.0, "runtime " + num(run.seconds) + " s");
  v.expect(fovea <= 10.0, "fovea error " + num(fovea));
  v.expect(disc >= 0.90, "disc dice " + num(disc));
  v.expect(cup >= 0.80, "cup dice " + num(cup));
  const double acc = j.at("training").at("classifier").at("train_accuracy");
  v.expect(acc == 1.0, "classifier train accuracy " + num(acc));
  double worst_drop = 1.0;
  for (const auto& [pair, h] : j.at("training").at("cyclegan").items()) {
    worst_drop = std::min(worst_drop, h.at("cycle_loss_drop").get<double>());
    v.expect(!h.at("aborted").get<bool>(), "cyclegan " + pair + " aborted");
  }
  v.expect(j.at("training").at("cyclegan").size() == 3, "expected three cycleGANs");
  v.expect(worst_drop >= 0.5, "cycle loss drop " + num(worst_drop));

  // expansion: 3x items, one third per domain, annotations byte-identical
  const auto rois = data::read_roi_index(w / "rois" / "index.csv");
  std::map<std::string, data::RoiEntry> by_id;
  for (const auto& r : rois)
    if (r.glaucoma || r.mask_path) by_id[r.id] = r;
  const auto items = transfer::read_expanded_index(w / "expanded" / "index.csv");
  v.expect(items.size() == 3 * by_id.size(), std::to_string(items.size()) + " items from " +
                                                 std::to_string(by_id.size()) + " ROIs");
  std::map<int, int> per_domain;
  int mismatched = 0;
  for (const auto& it : items) {
    ++per_domain[it.rendered_domain];
    const auto& src = by_id.at(it.original_id);
    if (it.glaucoma != src.glaucoma) ++mismatched;
    if (bool(it.mask_path) != bool(src.mask_path) || (it.mask_path && bytes(*it.mask_path) != bytes(*src.mask_path)))
      ++mismatched;
  }
  for (int d = 1; d <= 3; ++d)
    v.expect(per_domain[d] == static_cast<int>(by_id.size()), "domain " + std::to_string(d) + " holds " +
                                                                   std::to_string(per_domain[d]) + " items");
  v.expect(mismatched == 0, std::to_string(mismatched) + " annotations differ");
  v.detail = "fovea " + num(fovea, 3) + " px, disc " + num(disc, 3) + ", cup " + num(cup, 3) + ", train acc " +
             num(acc, 3) + ", min cycle drop " + num(worst_drop, 3) + ", " + std::to_string(items.size()) + "/" +
             std::to_string(by_id.size()) + " items, " + num(run.seconds / 60.0, 3) + " min";
  return v;
}

// 8. determinism
Verdict determinism(const SyntheticRun& a, const SyntheticRun& b) {
  Verdict v;
  v.expect(a.error.empty() && b.error.empty(), "a run failed");
  if (!v.failures.empty()) return v;
  const std::string ra = bytes(a.dir / "work" / "report.json"), rb = bytes(b.dir / "work" / "report.json");
  v.expect(!ra.empty() && ra == rb, "report.json differs between runs");
  v.expect(bytes(a.dir / "work" / "report.csv") == bytes(b.dir / "work" / "report.csv"), "report.csv differs");
  v.detail = "report.json identical across two runs (" + std::to_string(ra.size()) + " bytes)";
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  bool quick = false;
  fs::path scratch = fs::temp_directory_path() / "fundus_acceptance";
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--quick") == 0) quick = true;
    else if (std::strcmp(argv[i], "--dir") == 0 && i + 1 < argc) scratch = argv[++i];
    else {
      std::cerr << "usage: acceptance [--quick] [--dir SCRATCH]\n";
      return 2;
    }
  }
  if (!std::getenv("FUNDUS_LOG_LEVEL")) log::set_level(log::Level::warn);

  int failed = 0;
  auto report = [&failed](int n, const std::string& name, const std::function<Verdict()>& fn) {
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v.failures.push_back(std::string("exception: ") + e.what());
    }
    const bool ok = v.failures.empty();
    failed += !ok;
    std::string msg = v.detail;
    if (!ok) {
      msg.clear();
      for (const auto& f : v.failures) msg += (msg.empty() ? "" : "; ") + f;
    }
    std::cout << (ok ? "PASS" : "FAIL") << "  " << n << ". " << name << ": " << msg << std::endl;
  };

  report(1, "heatmap round trip", heatmap_round_trip);
  report(2, "split stratification", split_stratification);
  report(3, "TTA algebra", tta_algebra);
  report(4, "frozen backbone", frozen_backbone);
  report(5, "weighted cross-entropy", weighted_ce);
  report(6, "metric oracles", metric_oracles);
  if (quick) {
    std::cout << "SKIP  7. synthetic end-to-end\nSKIP  8. determinism\n";
  } else {
    const SyntheticRun first = synthetic_run(scratch / "run1");
    report(7, "synthetic end-to-end", [&] { return end_to_end(first); });
    const SyntheticRun second = synthetic_run(scratch / "run2");
    report(8, "determinism", [&] { return determinism(first, second); });
  }
  return failed == 0 ? 0 : 1;
}
