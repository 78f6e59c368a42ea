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

#include "fundus/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <set>

#include <opencv2/imgproc.hpp>

#include "fundus/csv.hpp"
#include "fundus/log.hpp"
#include "fundus/metrics.hpp"
#include "fundus/seed.hpp"

namespace fs = std::filesystem;

namespace fundus::pipeline {
namespace {

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".tif" || ext == ".tiff";
}

std::string fmt(std::optional<double> v, int decimals) { return v ? format_fixed(*v, decimals) : std::string(); }

std::optional<double> opt_double(const std::string& s, const std::string& what) {
  if (s.empty()) return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(what + ": not a number '" + s + "'");
  }
}

double req_double(const std::string& s, const std::string& what) {
  const auto v = opt_double(s, what);
  if (!v) throw Error(what + ": missing value");
  return *v;
}

nlohmann::json opt_json(std::optional<double> v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

template <class T>
std::optional<double> mean_of(const std::vector<T>& v) {
  if (v.empty()) return std::nullopt;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

bool is_test(const data::RoiEntry& r) { return !r.glaucoma && !r.mask_path; }

std::vector<data::RoiEntry> test_rois(const std::vector<data::RoiEntry>& rois) {
  std::vector<data::RoiEntry> out;
  for (const auto& r : rois)
    if (is_test(r)) out.push_back(r);
  return out;
}

std::vector<data::RoiEntry> annotated_rois(const std::vector<data::RoiEntry>& rois) {
  std::vector<data::RoiEntry> out;
  for (const auto& r : rois)
    if (!is_test(r)) out.push_back(r);
  return out;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read " + path.string());
  return nlohmann::json::parse(is);
}

}  // namespace

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"ingest",  "localize", "crop",    "cyclegan",
                                              "expand",  "classify", "segment", "evaluate"};
  return names;
}

void check_device() {
  const char* dev = std::getenv("PIPELINE_DEVICE");
  if (!dev || std::string(dev).empty() || std::string(dev) == "cpu") return;
  throw Error("PIPELINE_DEVICE=" + std::string(dev) + " is not available; this build runs on cpu only");
}

// ---- localisation ----

void write_fovea_csv(const std::vector<FoveaRow>& rows, const fs::path& path) {
  CsvTable t({"id", "fovea_x", "fovea_y", "cup_x", "cup_y"});
  for (const auto& r : rows)
    t.add_row({r.id, format_fixed(r.fovea.x, 2), format_fixed(r.fovea.y, 2), format_fixed(r.cup.x, 2),
               format_fixed(r.cup.y, 2)});
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  t.write(path);
}

std::vector<FoveaRow> read_fovea_csv(const fs::path& path) {
  const CsvTable t = CsvTable::read(path);
  const std::size_t id = t.require_column("id"), fx = t.require_column("fovea_x"), fy = t.require_column("fovea_y"),
                    cx = t.require_column("cup_x"), cy = t.require_column("cup_y");
  std::vector<FoveaRow> out;
  for (const auto& row : t.rows()) {
    const std::string what = path.string() + " row " + row[id];
    out.push_back({row[id],
                   {req_double(row[fx], what), req_double(row[fy], what)},
                   {req_double(row[cx], what), req_double(row[cy], what)}});
  }
  return out;
}

nn::TrainingHistory train_localizer_on(const data::DatasetManifest& manifest, const data::SplitAssignment& split,
                                       const heatmap::HourglassConfig& cfg, bool augment, bool permissive_sizes,
                                       std::uint64_t seed, const fs::path& model_path) {
  std::vector<heatmap::LocalizerSample> train, val;
  for (const auto& e : manifest.entries) {
    if (!e.fovea || !e.mask_path) continue;
    const data::FundusImage img = data::load_image(e, {permissive_sizes});
    if (!img.cup_center) {
      log::warn("localizer: " + e.id + " has an empty cup, skipped");
      continue;
    }
    (split.val_ids.count(e.id) ? val : train).push_back(heatmap::make_localizer_sample(img, cfg.input_size));
  }
  if (train.empty()) throw Error("localizer: no training images with both a fovea and a mask");
  log::info("localizer: " + std::to_string(train.size()) + " train, " + std::to_string(val.size()) + " val images");
  heatmap::StackedHourglass model(cfg, seed);
  const auto h = heatmap::train_localizer(model, train, val, mix_seed(seed, 1),
                                          augment ? augment::localizer_recipe() : augment::TransformSpec{});
  heatmap::save_localizer(model, h, model_path);
  return h;
}

std::vector<std::pair<std::string, fs::path>> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error("not a directory: " + dir.string());
  std::vector<std::pair<std::string, fs::path>> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) out.emplace_back(e.path().stem().string(), e.path());
  std::sort(out.begin(), out.end());
  for (std::size_t i = 1; i < out.size(); ++i)
    if (out[i].first == out[i - 1].first) throw Error("duplicate image id '" + out[i].first + "' in " + dir.string());
  return out;
}

std::vector<FoveaRow> locate_images(const heatmap::StackedHourglass& model,
                                    const std::vector<std::pair<std::string, fs::path>>& images) {
  std::vector<FoveaRow> rows;
  for (const auto& [id, path] : images) {
    const auto r = heatmap::locate(model, read_color_image(path));
    rows.push_back({id, r.fovea, r.cup_center});
  }
  return rows;
}

// ---- ROI cropping ----

Point2 brightest_region(const cv::Mat& image) {
  if (image.empty() || image.type() != CV_8UC3) throw Error("brightest_region: expected an 8-bit BGR image");
  cv::Mat grey, smooth;
  cv::cvtColor(image, grey, cv::COLOR_BGR2GRAY);
  const double sigma = std::max(1.0, 0.03 * std::min(image.rows, image.cols));
  cv::GaussianBlur(grey, smooth, cv::Size(), sigma, sigma, cv::BORDER_REPLICATE);
  cv::Point at;
  cv::minMaxLoc(smooth, nullptr, nullptr, nullptr, &at);
  return {static_cast<double>(at.x), static_cast<double>(at.y)};
}

std::vector<data::RoiEntry> crop_rois(const data::DatasetManifest& manifest,
                                      const std::map<std::string, Point2>& predicted_cups, int roi_size,
                                      bool permissive_sizes, const fs::path& out_dir) {
  fs::create_directories(out_dir / "images");
  std::vector<data::RoiEntry> out;
  int fallbacks = 0;
  for (const auto& e : manifest.entries) {
    const data::FundusImage img = data::load_image(e, {permissive_sizes});
    Point2 centre;
    if (img.cup_center) {
      centre = *img.cup_center;
    } else if (auto it = predicted_cups.find(e.id); it != predicted_cups.end()) {
      centre = it->second;
    } else {
      centre = brightest_region(img.pixels);
      ++fallbacks;
    }
    const data::RoiPatch patch = data::crop_roi(img.pixels, centre, roi_size);
    data::RoiEntry r;
    r.id = e.id;
    r.domain = e.domain;
    r.glaucoma = e.glaucoma;
    r.crop = patch.record;
    r.image_path = out_dir / "images" / (e.id + ".png");
    write_image(r.image_path, patch.pixels);
    if (img.mask) {
      r.mask_path = out_dir / "masks" / (e.id + ".png");
      write_image(*r.mask_path, data::crop_with_record(encode_mask(*img.mask), patch.record));
    }
    out.push_back(std::move(r));
  }
  if (fallbacks > 0)
    log::warn("crop: " + std::to_string(fallbacks) + " images without a cup centre were centred on their brightest region");
  data::write_roi_index(out, out_dir / "index.csv");
  return out;
}

// ---- domain transfer ----

transfer::TrainedPair train_pair_on(const std::vector<data::RoiEntry>& rois, transfer::DomainPair pair,
                                    const transfer::CycleGanConfig& cfg, std::uint64_t seed, const fs::path& out_dir) {
  pair.validate();
  std::vector<cv::Mat> a, b;
  for (const auto& r : rois) {
    if (r.domain == pair.a) a.push_back(read_color_image(r.image_path));
    if (r.domain == pair.b) b.push_back(read_color_image(r.image_path));
  }
  if (a.empty() || b.empty())
    throw Error("cyclegan: no ROIs for domain " + std::to_string(a.empty() ? pair.a : pair.b));
  log::info("cyclegan " + std::to_string(pair.a) + "<->" + std::to_string(pair.b) + ": " + std::to_string(a.size()) +
            " and " + std::to_string(b.size()) + " ROIs");
  auto trained = transfer::train_cyclegan(a, b, cfg, seed);
  transfer::save_pair(out_dir, pair, trained, cfg);
  return trained;
}

std::vector<transfer::ExpandedItem> items_from_rois(const std::vector<data::RoiEntry>& rois) {
  std::vector<transfer::ExpandedItem> out;
  for (const auto& r : rois) out.push_back({r.id, r.domain, false, r.image_path, r.mask_path, r.glaucoma});
  return out;
}

std::vector<augment::Renderer> renderings(const transfer::GeneratorSet* gens, int source, const std::vector<int>& domains) {
  if (!gens) return {augment::Renderer([](const cv::Mat& m) { return m.clone(); })};
  return gens->renderers_for(source, domains);
}

// ---- classification ----

nlohmann::json ClassifierSummary::to_json() const {
  return {{"train_accuracy", train_accuracy}, {"train_items", train_items}, {"val_items", val_items}};
}

ClassifierSummary train_classifier_on(const std::vector<transfer::ExpandedItem>& items,
                                      const data::SplitAssignment& split, const classifier::ClassifierConfig& cfg,
                                      bool augment, std::uint64_t seed, const fs::path& model_path) {
  const int s = cfg.input_size;
  std::vector<classifier::ClassifierSample> train, val;
  for (const auto& it : items) {
    if (!it.glaucoma) continue;
    classifier::ClassifierSample smp{resize_linear(read_color_image(it.path), s, s), *it.glaucoma ? 1 : 0};
    (split.val_ids.count(it.original_id) ? val : train).push_back(std::move(smp));
  }
  if (train.empty()) throw Error("classifier: no labelled training items");
  log::info("classifier: " + std::to_string(train.size()) + " train, " + std::to_string(val.size()) + " val items");
  auto net = classifier::build_classifier(cfg, seed);
  const auto h = classifier::train_classifier(*net, train, val, mix_seed(seed, 1),
                                              augment ? augment::classifier_recipe() : augment::TransformSpec{});
  net->eval();
  classifier::save_classifier(*net, h, model_path);
  ClassifierSummary sum;
  sum.train_accuracy = classifier::accuracy(*net, train);
  sum.train_items = static_cast<int>(train.size());
  sum.val_items = static_cast<int>(val.size());
  log::info("classifier: train accuracy " + format_fixed(sum.train_accuracy, 4));
  return sum;
}

std::vector<classifier::RiskPrediction> predict_risk(const classifier::InceptionNet& model,
                                                     const std::vector<data::RoiEntry>& rois,
                                                     const transfer::GeneratorSet* gens, const augment::TtaConfig& tta,
                                                     const std::vector<int>& domains) {
  std::vector<classifier::RiskPrediction> out;
  for (const auto& r : rois) {
    const auto rend = renderings(gens, r.domain, domains);
    out.push_back(classifier::predict_glaucoma_risk(model, r.id, read_color_image(r.image_path), rend, tta));
  }
  return out;
}

void write_risk_csv(const std::vector<classifier::RiskPrediction>& rows, const fs::path& path) {
  CsvTable t({"id", "p_glaucoma"});
  for (const auto& r : rows) t.add_row({r.id, format_fixed(r.p_glaucoma, 6)});
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  t.write(path);
}

std::vector<classifier::RiskPrediction> read_risk_csv(const fs::path& path) {
  const CsvTable t = CsvTable::read(path);
  const std::size_t id = t.require_column("id"), p = t.require_column("p_glaucoma");
  std::vector<classifier::RiskPrediction> out;
  for (const auto& row : t.rows()) out.push_back({row[id], req_double(row[p], path.string() + " row " + row[id])});
  return out;
}

// ---- segmentation ----

nn::TrainingHistory train_segmenter_on(const std::vector<transfer::ExpandedItem>& items,
                                       const data::SplitAssignment& split, const segmenter::SegConfig& cfg, bool augment,
                                       std::uint64_t seed, const fs::path& model_path) {
  std::vector<segmenter::SegSample> train, val;
  for (const auto& it : items) {
    if (!it.mask_path) continue;
    const SegMask mask = decode_mask(read_gray_image(*it.mask_path), {}, MaskResolution::roi);
    auto smp = segmenter::make_seg_sample(read_color_image(it.path), mask, cfg.input_size);
    (split.val_ids.count(it.original_id) ? val : train).push_back(std::move(smp));
  }
  if (train.empty()) throw Error("segmenter: no training items with masks");
  log::info("segmenter: " + std::to_string(train.size()) + " train, " + std::to_string(val.size()) + " val items");
  segmenter::UNet model(cfg, seed);
  const auto h = segmenter::train_segmenter(model, train, val, mix_seed(seed, 1),
                                            augment ? augment::segmenter_recipe() : augment::TransformSpec{});
  segmenter::save_segmenter(model, h, model_path);
  return h;
}

std::vector<CdrRow> segment_rois(const segmenter::UNet& model, const std::vector<data::RoiEntry>& rois,
                                 const transfer::GeneratorSet* gens, const augment::TtaConfig& tta,
                                 const std::vector<int>& domains, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::vector<CdrRow> out;
  for (const auto& r : rois) {
    const auto rend = renderings(gens, r.domain, domains);
    const auto seg = segmenter::segment(model, read_color_image(r.image_path), rend, tta, r.crop);
    write_image(out_dir / (r.id + ".png"), encode_mask(seg.native));
    CdrRow row{r.id, std::nullopt};
    if (seg.empty_disc)
      log::warn("segment: empty disc for " + r.id);
    else
      row.cdr = segmenter::compute_cdr(seg.native).ratio;
    out.push_back(row);
  }
  return out;
}

void write_cdr_csv(const std::vector<CdrRow>& rows, const fs::path& path) {
  CsvTable t({"id", "cdr"});
  for (const auto& r : rows) t.add_row({r.id, fmt(r.cdr, 6)});
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  t.write(path);
}

std::vector<CdrRow> read_cdr_csv(const fs::path& path) {
  const CsvTable t = CsvTable::read(path);
  const std::size_t id = t.require_column("id"), c = t.require_column("cdr");
  std::vector<CdrRow> out;
  for (const auto& row : t.rows()) out.push_back({row[id], opt_double(row[c], path.string() + " row " + row[id])});
  return out;
}

// ---- evaluation ----

void EvalReport::validate() const {
  auto unit = [](std::optional<double> v, const char* name) {
    if (v && !(*v >= 0.0 && *v <= 1.0)) throw Error(std::string("report: ") + name + " outside [0, 1]");
  };
  unit(mean_cup_dice, "mean_cup_dice");
  unit(mean_disc_dice, "mean_disc_dice");
  unit(auc, "auc");
  if (mean_fovea_distance && !(*mean_fovea_distance >= 0.0)) throw Error("report: negative fovea distance");
  if (cdr_rme && !(*cdr_rme >= 0.0)) throw Error("report: negative cdr_rme");
  for (const auto& r : rows) {
    unit(r.disc_dice, "disc_dice");
    unit(r.cup_dice, "cup_dice");
    if (r.fovea_distance && *r.fovea_distance < 0.0) throw Error("report: negative fovea distance for " + r.id);
  }
}

nlohmann::json EvalReport::to_json() const {
  return {{"schema", 1},
          {"mean_cup_dice", opt_json(mean_cup_dice)},
          {"mean_disc_dice", opt_json(mean_disc_dice)},
          {"cdr_rme", opt_json(cdr_rme)},
          {"auc", opt_json(auc)},
          {"mean_fovea_distance", opt_json(mean_fovea_distance)},
          {"images", rows.size()},
          {"training", training}};
}

void EvalReport::write_csv(const fs::path& path) const {
  CsvTable t({"id", "fovea_distance", "p_glaucoma", "glaucoma", "disc_dice", "cup_dice", "cdr_pred", "cdr_gt"});
  for (const auto& r : rows)
    t.add_row({r.id, fmt(r.fovea_distance, 4), fmt(r.p_glaucoma, 6), r.glaucoma ? std::to_string(*r.glaucoma) : "",
               fmt(r.disc_dice, 6), fmt(r.cup_dice, 6), fmt(r.cdr_pred, 6), fmt(r.cdr_gt, 6)});
  t.add_row({"mean", fmt(mean_fovea_distance, 4), "", fmt(auc, 6), fmt(mean_disc_dice, 6), fmt(mean_cup_dice, 6),
             fmt(cdr_rme, 6), ""});
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  t.write(path);
}

EvalReport evaluate(const EvalInputs& in) {
  const CsvTable key = CsvTable::read(in.key);
  const fs::path key_dir = in.key.parent_path();
  const std::size_t c_id = key.require_column("id");
  const auto c_fx = key.column("fovea_x"), c_fy = key.column("fovea_y"), c_g = key.column("glaucoma"),
             c_mask = key.column("mask_path");

  std::map<std::string, FoveaRow> fovea;
  if (in.fovea)
    for (auto& r : read_fovea_csv(*in.fovea)) fovea[r.id] = r;
  std::map<std::string, double> risk;
  if (in.risk)
    for (auto& r : read_risk_csv(*in.risk)) risk[r.id] = r.p_glaucoma;

  EvalReport rep;
  std::vector<Point2> f_pred, f_gt;
  std::vector<double> scores, disc, cup, cdr_pred, cdr_gt;
  std::vector<int> labels;
  for (const auto& row : key.rows()) {
    EvalRow er;
    er.id = row[c_id];
    const std::string what = in.key.string() + " row " + er.id;
    if (in.fovea && c_fx && c_fy && !row[*c_fx].empty()) {
      const auto it = fovea.find(er.id);
      if (it == fovea.end()) throw Error("fovea predictions lack " + er.id + " (stage 'localize')");
      const Point2 gt{req_double(row[*c_fx], what), req_double(row[*c_fy], what)};
      const Point2 p = it->second.fovea;
      er.fovea_distance = metrics::fovea_distance(std::span(&p, 1), std::span(&gt, 1));
      f_pred.push_back(p);
      f_gt.push_back(gt);
    }
    if (in.risk && c_g && !row[*c_g].empty()) {
      const auto it = risk.find(er.id);
      if (it == risk.end()) throw Error("classification lacks " + er.id + " (stage 'classify')");
      er.p_glaucoma = it->second;
      er.glaucoma = static_cast<int>(req_double(row[*c_g], what));
      scores.push_back(it->second);
      labels.push_back(*er.glaucoma);
    }
    if (in.masks && c_mask && !row[*c_mask].empty()) {
      const fs::path pred_path = *in.masks / (er.id + ".png");
      if (!fs::exists(pred_path)) throw Error("missing " + pred_path.string() + " (stage 'segment')");
      fs::path gt_path(row[*c_mask]);
      if (gt_path.is_relative()) gt_path = key_dir / gt_path;
      const SegMask pred = decode_mask(read_gray_image(pred_path));
      const SegMask gt = decode_mask(read_gray_image(gt_path));
      er.disc_dice = metrics::dice(pred, gt, SegClass::disc);
      er.cup_dice = metrics::dice(pred, gt, SegClass::cup);
      disc.push_back(*er.disc_dice);
      cup.push_back(*er.cup_dice);
      er.cdr_gt = segmenter::compute_cdr(gt).ratio;
      if (cv::countNonZero(disc_or_cup_region(pred)) > 0) er.cdr_pred = segmenter::compute_cdr(pred).ratio;
      if (*er.cdr_gt > 0.0) {
        cdr_pred.push_back(er.cdr_pred.value_or(0.0));
        cdr_gt.push_back(*er.cdr_gt);
      } else {
        log::warn("evaluate: ground-truth cup of " + er.id + " is empty, left out of the CDR error");
      }
    }
    rep.rows.push_back(er);
  }
  std::sort(rep.rows.begin(), rep.rows.end(), [](const EvalRow& a, const EvalRow& b) { return a.id < b.id; });

  if (!f_pred.empty()) rep.mean_fovea_distance = metrics::fovea_distance(f_pred, f_gt);
  if (!scores.empty()) {
    const bool both = std::count(labels.begin(), labels.end(), 1) > 0 && std::count(labels.begin(), labels.end(), 0) > 0;
    if (both)
      rep.auc = metrics::auc(scores, labels);
    else
      log::warn("evaluate: the key holds a single class, AUC left null");
  }
  rep.mean_disc_dice = mean_of(disc);
  rep.mean_cup_dice = mean_of(cup);
  if (!cdr_gt.empty()) rep.cdr_rme = metrics::cdr_rme(cdr_pred, cdr_gt);
  rep.validate();
  return rep;
}

// ---- orchestration ----

namespace {

struct Paths {
  fs::path work, manifest, split, localizer, fovea, rois, roi_index, gans, expanded, expanded_index, classifier,
      classifier_summary, classification, segmenter, segmentation, cdr, report_json, report_csv, timings, markers;

  explicit Paths(const fs::path& w)
      : work(w),
        manifest(w / "manifest.csv"),
        split(w / "split.csv"),
        localizer(w / "models" / "localizer.bin"),
        fovea(w / "fovea.csv"),
        rois(w / "rois"),
        roi_index(w / "rois" / "index.csv"),
        gans(w / "gans"),
        expanded(w / "expanded"),
        expanded_index(w / "expanded" / "index.csv"),
        classifier(w / "models" / "classifier.bin"),
        classifier_summary(w / "models" / "classifier_summary.json"),
        classification(w / "classification.csv"),
        segmenter(w / "models" / "segmenter.bin"),
        segmentation(w / "segmentation"),
        cdr(w / "cdr.csv"),
        report_json(w / "report.json"),
        report_csv(w / "report.csv"),
        timings(w / "timings.json"),
        markers(w / ".done") {}
};

const fs::path& require(const fs::path& p, const std::string& stage) {
  if (!fs::exists(p)) throw Error("missing " + p.string() + "; run stage '" + stage + "' first");
  return p;
}

std::uint64_t stage_seed(const config::PipelineConfig& cfg, const std::string& stage) {
  const auto& names = stage_names();
  return mix_seed(cfg.seed, static_cast<std::uint64_t>(std::find(names.begin(), names.end(), stage) - names.begin()) + 1);
}

bool enabled(const config::PipelineConfig& cfg, const std::string& stage) {
  if (stage == "localize") return cfg.stages.localize;
  if (stage == "cyclegan" || stage == "expand") return cfg.stages.cyclegan;
  if (stage == "classify") return cfg.stages.classify;
  if (stage == "segment") return cfg.stages.segment;
  return true;
}

// Settings a stage's outputs depend on; a marker with different settings is stale.
nlohmann::json fingerprint(const config::PipelineConfig& cfg, const std::string& stage) {
  nlohmann::json tta{{"n_transforms", cfg.tta.n_transforms}, {"seed", cfg.tta.seed}, {"domains", cfg.tta_domains},
                     {"transfer", cfg.stages.cyclegan}};
  nlohmann::json j{{"stage", stage}, {"seed", cfg.seed}};
  if (stage == "ingest")
    j["data"] = {{"root", cfg.data_root.string()},
                 {"layout", cfg.layout},
                 {"manifest", cfg.manifest.string()},
                 {"permissive", cfg.permissive_sizes},
                 {"val_fraction", cfg.val_fraction}};
  else if (stage == "localize")
    j["localizer"] = {{"config", heatmap::to_json(cfg.localizer)}, {"augment", cfg.localizer_augment}};
  else if (stage == "crop")
    j["crop"] = {{"roi_size", cfg.roi_size}, {"localize", cfg.stages.localize}};
  else if (stage == "cyclegan")
    j["cyclegan"] = transfer::to_json(cfg.cyclegan);
  else if (stage == "classify")
    j["classifier"] = {{"config", classifier::to_json(cfg.classifier)},
                       {"pretrained", cfg.classifier.pretrained.string()},
                       {"augment", cfg.classifier_augment},
                       {"tta", tta}};
  else if (stage == "segment")
    j["segmenter"] = {{"config", segmenter::to_json(cfg.segmenter)}, {"augment", cfg.segmenter_augment}, {"tta", tta}};
  return j;
}

nlohmann::json history_summary(const fs::path& weights) {
  const auto side = nn::read_sidecar(weights);
  const auto& epochs = side.at("history").at("epochs");
  nlohmann::json j{{"epochs", epochs.size()}, {"best_epoch", side.at("epoch")}};
  if (!epochs.empty()) j["final_train_loss"] = epochs.back().at("train_loss");
  return j;
}

nlohmann::json training_summary(const config::PipelineConfig& cfg, const Paths& p) {
  nlohmann::json t = nlohmann::json::object();
  if (cfg.stages.localize && fs::exists(p.localizer)) t["localizer"] = history_summary(p.localizer);
  if (cfg.stages.cyclegan) {
    nlohmann::json gans = nlohmann::json::object();
    for (const auto& pair : transfer::all_pairs()) {
      const std::string name = std::to_string(pair.a) + "_" + std::to_string(pair.b);
      const fs::path f = p.gans / ("cyclegan_" + name + ".json");
      if (!fs::exists(f)) continue;
      const auto h = read_json(f).at("history");
      const auto& ep = h.at("epochs");
      if (ep.empty()) continue;
      const double first = ep.front().at("cycle"), last = ep.back().at("cycle");
      gans[name] = {{"epochs", ep.size()},
                    {"first_cycle_loss", first},
                    {"last_cycle_loss", last},
                    {"cycle_loss_drop", first > 0 ? 1.0 - last / first : 0.0},
                    {"aborted", h.at("aborted")}};
    }
    t["cyclegan"] = gans;
    if (fs::exists(p.expanded_index) && fs::exists(p.roi_index)) {
      const auto items = transfer::read_expanded_index(p.expanded_index);
      const auto rois = annotated_rois(data::read_roi_index(p.roi_index));
      t["expand"] = {{"rois", rois.size()}, {"items", items.size()}};
    }
  }
  if (cfg.stages.classify && fs::exists(p.classifier_summary)) t["classifier"] = read_json(p.classifier_summary);
  if (cfg.stages.segment && fs::exists(p.segmenter)) t["segmenter"] = history_summary(p.segmenter);
  return t;
}

class Runner {
 public:
  Runner(const config::PipelineConfig& cfg, const RunOptions& opt) : cfg_(cfg), opt_(opt), p_(cfg.work_dir) {}

  RunResult run() {
    fs::create_directories(p_.work);
    for (const auto& stage : stage_names()) {
      if (opt_.only && *opt_.only != stage) continue;
      if (!enabled(cfg_, stage)) {
        log::info("stage " + stage + ": disabled");
        timings_[stage] = "disabled";
        continue;
      }
      const fs::path marker = p_.markers / (stage + ".json");
      const nlohmann::json fp = fingerprint(cfg_, stage);
      const bool fresh = fs::exists(marker) && read_json(marker) == fp;
      if (stage != "evaluate" && fresh && !opt_.force && !dirty_ && !opt_.only) {
        log::info("stage " + stage + ": up to date, skipped");
        result_.skipped.push_back(stage);
        timings_[stage] = "skipped";
        continue;
      }
      log::info("stage " + stage + ": running");
      fs::remove(marker);
      const auto t0 = std::chrono::steady_clock::now();
      execute(stage);
      timings_[stage] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      write_json(marker, fp);
      result_.executed.push_back(stage);
      if (stage != "evaluate") dirty_ = true;
    }
    write_json(p_.timings, timings_);
    return std::move(result_);
  }

 private:
  data::DatasetManifest manifest() const { return data::read_manifest_csv(require(p_.manifest, "ingest")); }
  data::SplitAssignment split() const { return data::read_split_csv(require(p_.split, "ingest")); }
  std::vector<data::RoiEntry> rois() const { return data::read_roi_index(require(p_.roi_index, "crop")); }

  std::optional<transfer::GeneratorSet> generators() const {
    if (!cfg_.stages.cyclegan) return std::nullopt;
    require(p_.gans, "cyclegan");
    auto gens = transfer::load_generator_set(p_.gans);
    gens.require_complete();
    return gens;
  }

  std::vector<transfer::ExpandedItem> training_items() const {
    if (cfg_.stages.cyclegan) return transfer::read_expanded_index(require(p_.expanded_index, "expand"));
    return items_from_rois(annotated_rois(rois()));
  }

  void execute(const std::string& stage) {
    const std::uint64_t seed = stage_seed(cfg_, stage);
    if (stage == "ingest") {
      const data::DatasetManifest m = cfg_.manifest.empty()
                                          ? data::load_manifest(cfg_.data_root, data::parse_layout(cfg_.layout),
                                                                {cfg_.permissive_sizes})
                                          : data::read_manifest_csv(cfg_.manifest);
      if (m.entries.empty()) throw Error("ingest: the dataset is empty");
      data::write_manifest_csv(m, p_.manifest);
      data::DatasetManifest labelled;
      for (const auto& e : m.entries)
        if (e.glaucoma) labelled.entries.push_back(e);
      data::SplitAssignment s;
      s.seed = seed;
      if (!labelled.entries.empty()) s = data::stratified_split(labelled, cfg_.val_fraction, seed);
      data::write_split_csv(s, p_.split);
      log::info("ingest: " + std::to_string(m.size()) + " images, " + std::to_string(s.train_ids.size()) + " train, " +
                std::to_string(s.val_ids.size()) + " val");
    } else if (stage == "localize") {
      const auto m = manifest();
      train_localizer_on(m, split(), cfg_.localizer, cfg_.localizer_augment, cfg_.permissive_sizes, seed, p_.localizer);
      const auto model = heatmap::load_localizer(p_.localizer);
      std::vector<std::pair<std::string, fs::path>> images;
      for (const auto& e : m.entries) images.emplace_back(e.id, e.image_path);
      write_fovea_csv(locate_images(*model, images), p_.fovea);
    } else if (stage == "crop") {
      std::map<std::string, Point2> cups;
      if (cfg_.stages.localize)
        for (const auto& r : read_fovea_csv(require(p_.fovea, "localize"))) cups[r.id] = r.cup;
      fs::remove_all(p_.rois);
      crop_rois(manifest(), cups, cfg_.roi_size, cfg_.permissive_sizes, p_.rois);
    } else if (stage == "cyclegan") {
      const auto all = rois();
      fs::remove_all(p_.gans);
      std::uint64_t k = 0;
      for (const auto& pair : transfer::all_pairs()) train_pair_on(all, pair, cfg_.cyclegan, mix_seed(seed, ++k), p_.gans);
    } else if (stage == "expand") {
      const auto gens = generators();
      fs::remove_all(p_.expanded);
      transfer::expand_dataset(annotated_rois(rois()), *gens, p_.expanded);
    } else if (stage == "classify") {
      const auto sum = train_classifier_on(training_items(), split(), cfg_.classifier, cfg_.classifier_augment, seed,
                                           p_.classifier);
      write_json(p_.classifier_summary, sum.to_json());
      const auto model = classifier::load_classifier(p_.classifier);
      const auto gens = generators();
      write_risk_csv(predict_risk(*model, test_rois(rois()), gens ? &*gens : nullptr, cfg_.tta, cfg_.tta_domains),
                     p_.classification);
    } else if (stage == "segment") {
      train_segmenter_on(training_items(), split(), cfg_.segmenter, cfg_.segmenter_augment, seed, p_.segmenter);
      const auto model = segmenter::load_segmenter(p_.segmenter);
      const auto gens = generators();
      fs::remove_all(p_.segmentation);
      write_cdr_csv(segment_rois(*model, test_rois(rois()), gens ? &*gens : nullptr, cfg_.tta, cfg_.tta_domains,
                                 p_.segmentation),
                    p_.cdr);
    } else if (stage == "evaluate") {
      EvalReport rep;
      if (cfg_.eval_key.empty()) {
        log::warn("evaluate: no data.eval_key configured, metrics left null");
      } else {
        EvalInputs in;
        in.key = cfg_.eval_key;
        if (cfg_.stages.localize) in.fovea = require(p_.fovea, "localize");
        if (cfg_.stages.classify) in.risk = require(p_.classification, "classify");
        if (cfg_.stages.segment) {
          require(p_.cdr, "segment");
          in.masks = require(p_.segmentation, "segment");
        }
        rep = evaluate(in);
      }
      rep.training = training_summary(cfg_, p_);
      write_json(p_.report_json, rep.to_json());
      rep.write_csv(p_.report_csv);
      result_.report = std::move(rep);
    }
  }

  const config::PipelineConfig& cfg_;
  RunOptions opt_;
  Paths p_;
  bool dirty_ = false;
  RunResult result_;
  nlohmann::json timings_ = nlohmann::json::object();
};

}  // namespace

RunResult run_pipeline(const config::PipelineConfig& cfg, const RunOptions& opt) {
  check_device();
  cfg.validate();
  if (opt.only) {
    const auto& names = stage_names();
    if (std::find(names.begin(), names.end(), *opt.only) == names.end()) throw Error("unknown stage '" + *opt.only + "'");
    if (!enabled(cfg, *opt.only)) throw Error("stage '" + *opt.only + "' is disabled in the config");
  }
  return Runner(cfg, opt).run();
}

}  // namespace fundus::pipeline
