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

// Stage operations and the config-driven orchestrator:
// ingest -> localize -> crop -> cyclegan -> expand -> {classify, segment} -> evaluate.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fundus/classifier.hpp"
#include "fundus/config.hpp"
#include "fundus/data.hpp"
#include "fundus/heatmap.hpp"
#include "fundus/segmenter.hpp"
#include "fundus/transfer.hpp"

namespace fundus::pipeline {

/// Stage names in execution order.
const std::vector<std::string>& stage_names();

/// Throws unless PIPELINE_DEVICE is unset or "cpu".
void check_device();

// ---- localisation ----

struct FoveaRow {
  std::string id;
  Point2 fovea;
  Point2 cup;
};

/// Columns: id,fovea_x,fovea_y,cup_x,cup_y (native pixels, 2 decimals).
void write_fovea_csv(const std::vector<FoveaRow>& rows, const std::filesystem::path& path);
std::vector<FoveaRow> read_fovea_csv(const std::filesystem::path& path);

/// Trains on annotated entries that have a fovea and a mask; validation
/// membership comes from `split`. Writes the checkpoint to `model_path`.
nn::TrainingHistory train_localizer_on(const data::DatasetManifest& manifest, const data::SplitAssignment& split,
                                       const heatmap::HourglassConfig& cfg, bool augment, bool permissive_sizes,
                                       std::uint64_t seed, const std::filesystem::path& model_path);

/// (id, path) of every image file directly inside `dir`, sorted by id.
std::vector<std::pair<std::string, std::filesystem::path>> list_images(const std::filesystem::path& dir);

std::vector<FoveaRow> locate_images(const heatmap::StackedHourglass& model,
                                    const std::vector<std::pair<std::string, std::filesystem::path>>& images);

// ---- ROI cropping ----

/// Centre of the brightest smoothed region; the crop centre when no
/// localiser output is available.
Point2 brightest_region(const cv::Mat& image);

/// Crops every manifest entry around its annotated cup centre, else the
/// predicted one, else the brightest region. Writes images/, masks/ and
/// index.csv under out_dir.
std::vector<data::RoiEntry> crop_rois(const data::DatasetManifest& manifest,
                                      const std::map<std::string, Point2>& predicted_cups, int roi_size,
                                      bool permissive_sizes, const std::filesystem::path& out_dir);

// ---- domain transfer ----

/// Trains one cycleGAN on the ROIs of both domains of `pair` and saves it into out_dir.
transfer::TrainedPair train_pair_on(const std::vector<data::RoiEntry>& rois, transfer::DomainPair pair,
                                    const transfer::CycleGanConfig& cfg, std::uint64_t seed,
                                    const std::filesystem::path& out_dir);

/// Original ROIs presented as expansion items, for runs without domain transfer.
std::vector<transfer::ExpandedItem> items_from_rois(const std::vector<data::RoiEntry>& rois);

/// TTA renderings for an image of `source`; identity only when `gens` is null.
std::vector<augment::Renderer> renderings(const transfer::GeneratorSet* gens, int source, const std::vector<int>& domains);

// ---- classification ----

struct ClassifierSummary {
  double train_accuracy = 0.0;
  int train_items = 0;
  int val_items = 0;
  nlohmann::json to_json() const;
};

/// Labelled items train unless their original id is in the validation split.
ClassifierSummary train_classifier_on(const std::vector<transfer::ExpandedItem>& items,
                                      const data::SplitAssignment& split, const classifier::ClassifierConfig& cfg,
                                      bool augment, std::uint64_t seed, const std::filesystem::path& model_path);

std::vector<classifier::RiskPrediction> predict_risk(const classifier::InceptionNet& model,
                                                     const std::vector<data::RoiEntry>& rois,
                                                     const transfer::GeneratorSet* gens, const augment::TtaConfig& tta,
                                                     const std::vector<int>& domains);

/// Columns: id,p_glaucoma (6 decimals).
void write_risk_csv(const std::vector<classifier::RiskPrediction>& rows, const std::filesystem::path& path);
std::vector<classifier::RiskPrediction> read_risk_csv(const std::filesystem::path& path);

// ---- segmentation ----

nn::TrainingHistory train_segmenter_on(const std::vector<transfer::ExpandedItem>& items,
                                       const data::SplitAssignment& split, const segmenter::SegConfig& cfg,
                                       bool augment, std::uint64_t seed, const std::filesystem::path& model_path);

struct CdrRow {
  std::string id;
  std::optional<double> cdr;  // empty when the predicted disc is empty
};

/// Writes out_dir/{id}.png (native resolution, mask encoding) per ROI and
/// returns the predicted cup-to-disc ratios.
std::vector<CdrRow> segment_rois(const segmenter::UNet& model, const std::vector<data::RoiEntry>& rois,
                                 const transfer::GeneratorSet* gens, const augment::TtaConfig& tta,
                                 const std::vector<int>& domains, const std::filesystem::path& out_dir);

/// Columns: id,cdr (6 decimals, empty for an empty disc).
void write_cdr_csv(const std::vector<CdrRow>& rows, const std::filesystem::path& path);
std::vector<CdrRow> read_cdr_csv(const std::filesystem::path& path);

// ---- evaluation ----

struct EvalRow {
  std::string id;
  std::optional<double> fovea_distance;
  std::optional<double> p_glaucoma;
  std::optional<int> glaucoma;
  std::optional<double> disc_dice;
  std::optional<double> cup_dice;
  std::optional<double> cdr_pred;
  std::optional<double> cdr_gt;
};

struct EvalReport {
  std::optional<double> mean_cup_dice;
  std::optional<double> mean_disc_dice;
  std::optional<double> cdr_rme;
  std::optional<double> auc;
  std::optional<double> mean_fovea_distance;
  std::vector<EvalRow> rows;
  nlohmann::json training = nlohmann::json::object();

  void validate() const;
  /// {"schema": 1, the five metrics (null when not computed), "images", "training"}.
  nlohmann::json to_json() const;
  /// Per-image table followed by a "mean" row.
  void write_csv(const std::filesystem::path& path) const;
};

struct EvalInputs {
  std::filesystem::path key;                    // id,fovea_x,fovea_y,glaucoma,mask_path
  std::optional<std::filesystem::path> fovea;   // fovea.csv
  std::optional<std::filesystem::path> risk;    // classification.csv
  std::optional<std::filesystem::path> masks;   // segmentation/ directory
};

EvalReport evaluate(const EvalInputs& in);

// ---- orchestration ----

struct RunOptions {
  bool force = false;
  std::optional<std::string> only;  // run this stage alone
};

struct RunResult {
  EvalReport report;
  std::vector<std::string> executed;
  std::vector<std::string> skipped;
};

/// Runs enabled stages in order, persisting outputs under cfg.work_dir.
/// A stage whose completion marker matches the current settings is skipped
/// unless `force` is set or an earlier stage ran. Writes report.json,
/// report.csv and timings.json.
RunResult run_pipeline(const config::PipelineConfig& cfg, const RunOptions& opt = {});

}  // namespace fundus::pipeline
