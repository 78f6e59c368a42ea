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

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fundus/config.hpp"
#include "fundus/data.hpp"
#include "fundus/log.hpp"
#include "fundus/pipeline.hpp"
#include "fundus/synth.hpp"

namespace fs = std::filesystem;
using namespace fundus;

namespace {

struct ConfigArgs {
  std::string path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

void add_config_args(CLI::App* cmd, ConfigArgs& a) {
  cmd->add_option("--config", a.path, "pipeline config file (module sections are read)")->check(CLI::ExistingFile);
  cmd->add_option("--set", a.sets, "override a config key, key=value (repeatable)");
  cmd->add_option("--seed", a.seed, "override the config seed");
}

config::PipelineConfig load_config(const ConfigArgs& a) {
  config::KeyValues kv = a.path.empty() ? config::KeyValues::parse("", "<defaults>") : config::KeyValues::read(a.path);
  for (const auto& s : a.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw Error("--set expects key=value, got '" + s + "'");
    auto trim = [](std::string t) {
      t.erase(0, t.find_first_not_of(' '));
      t.erase(t.find_last_not_of(' ') + 1);
      return t;
    };
    kv.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
  const fs::path base = a.path.empty() ? fs::current_path() : fs::absolute(a.path).parent_path();
  auto cfg = config::parse_pipeline_config(std::move(kv), base);
  if (a.seed) cfg.seed = *a.seed;
  return cfg;
}

std::optional<transfer::GeneratorSet> maybe_gens(const std::string& dir) {
  if (dir.empty()) return std::nullopt;
  auto g = transfer::load_generator_set(dir);
  g.require_complete();
  return g;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fundus image pipeline: fovea and disc localisation, domain transfer, glaucoma risk, cup/disc segmentation"};
  app.require_subcommand(1);
  std::string level;
  app.add_option("--log-level", level, "debug, info, warn, error or off")
      ->check(CLI::IsMember({"debug", "info", "warn", "error", "off"}));

  // synth
  auto* synth = app.add_subcommand("synth", "write a synthetic dataset and a matching pipeline config");
  std::string synth_out;
  synth::SynthConfig synth_cfg;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--images-per-domain", synth_cfg.images_per_domain)->check(CLI::PositiveNumber);
  synth->add_option("--scale", synth_cfg.size_scale, "image size relative to native");
  synth->add_option("--seed", synth_cfg.seed);

  // manifest / split
  auto* manifest = app.add_subcommand("manifest", "scan a dataset directory into a manifest CSV");
  std::string root, layout = "challenge", out;
  bool permissive = false;
  manifest->add_option("--root", root)->required()->check(CLI::ExistingDirectory);
  manifest->add_option("--layout", layout)->check(CLI::IsMember({"challenge", "flat"}));
  manifest->add_flag("--permissive", permissive, "accept non-native image sizes");
  manifest->add_option("--out", out)->required();

  auto* split = app.add_subcommand("split", "stratified train/validation split of the labelled images");
  std::string manifest_path, split_path;
  double val_fraction = 0.1;
  std::uint64_t split_seed = 1;
  split->add_option("--manifest", manifest_path)->required()->check(CLI::ExistingFile);
  split->add_option("--val-fraction", val_fraction);
  split->add_option("--seed", split_seed);
  split->add_option("--out", out)->required();

  // localisation
  ConfigArgs loc_args;
  auto* train_loc = app.add_subcommand("train-localizer", "train the fovea / cup-centre heatmap model");
  train_loc->add_option("--manifest", manifest_path)->required()->check(CLI::ExistingFile);
  train_loc->add_option("--split", split_path)->required()->check(CLI::ExistingFile);
  train_loc->add_option("--out", out, "output directory")->required();
  add_config_args(train_loc, loc_args);

  auto* locate = app.add_subcommand("locate", "predict fovea and cup centres for a directory of images");
  std::string model, images, rois, gens;
  locate->add_option("--model", model)->required()->check(CLI::ExistingFile);
  locate->add_option("--images", images)->required()->check(CLI::ExistingDirectory);
  locate->add_option("--out", out, "fovea.csv")->required();

  auto* crop = app.add_subcommand("crop", "cut square ROIs around the cup centres");
  std::string fovea;
  int roi_size = 500;
  crop->add_option("--manifest", manifest_path)->required()->check(CLI::ExistingFile);
  crop->add_option("--fovea", fovea, "locate output used for unannotated images")->check(CLI::ExistingFile);
  crop->add_option("--size", roi_size);
  crop->add_flag("--permissive", permissive);
  crop->add_option("--out", out)->required();

  // domain transfer
  ConfigArgs gan_args;
  auto* train_gan = app.add_subcommand("train-cyclegan", "train one cycleGAN between two domains");
  std::string pair_text;
  train_gan->add_option("--pair", pair_text, "e.g. 1,2")->required();
  train_gan->add_option("--rois", rois)->required()->check(CLI::ExistingDirectory);
  train_gan->add_option("--out", out)->required();
  add_config_args(train_gan, gan_args);

  auto* expand = app.add_subcommand("expand", "render every annotated ROI into all three domains");
  expand->add_option("--gens", gens)->required()->check(CLI::ExistingDirectory);
  expand->add_option("--rois", rois)->required()->check(CLI::ExistingDirectory);
  expand->add_option("--out", out)->required();

  // classification
  ConfigArgs cls_args;
  std::string items;
  auto* train_cls = app.add_subcommand("train-classifier", "train the glaucoma classifier");
  train_cls->add_option("--items", items, "expand index.csv")->check(CLI::ExistingFile);
  train_cls->add_option("--rois", rois, "ROI directory, when training without expansion")->check(CLI::ExistingDirectory);
  train_cls->add_option("--split", split_path)->required()->check(CLI::ExistingFile);
  train_cls->add_option("--out", out, "output directory")->required();
  add_config_args(train_cls, cls_args);

  auto* predict = app.add_subcommand("predict-risk", "glaucoma probability per unannotated ROI");
  predict->add_option("--model", model)->required()->check(CLI::ExistingFile);
  predict->add_option("--rois", rois)->required()->check(CLI::ExistingDirectory);
  predict->add_option("--gens", gens, "generators for cross-domain TTA")->check(CLI::ExistingDirectory);
  predict->add_option("--out", out, "classification.csv")->required();
  add_config_args(predict, cls_args);

  // segmentation
  ConfigArgs seg_args;
  auto* train_seg = app.add_subcommand("train-segmenter", "train the cup/disc segmenter");
  train_seg->add_option("--items", items, "expand index.csv")->check(CLI::ExistingFile);
  train_seg->add_option("--rois", rois, "ROI directory, when training without expansion")->check(CLI::ExistingDirectory);
  train_seg->add_option("--split", split_path)->required()->check(CLI::ExistingFile);
  train_seg->add_option("--out", out, "output directory")->required();
  add_config_args(train_seg, seg_args);

  auto* segment = app.add_subcommand("segment", "cup/disc masks and cup-to-disc ratios per unannotated ROI");
  segment->add_option("--model", model)->required()->check(CLI::ExistingFile);
  segment->add_option("--rois", rois)->required()->check(CLI::ExistingDirectory);
  segment->add_option("--gens", gens)->check(CLI::ExistingDirectory);
  segment->add_option("--out", out, "output directory")->required();
  add_config_args(segment, seg_args);

  // evaluation
  auto* evaluate = app.add_subcommand("evaluate", "score predictions against an evaluation key");
  std::string key, classification, segmentation;
  evaluate->add_option("--key", key, "id,fovea_x,fovea_y,glaucoma,mask_path")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--fovea", fovea)->check(CLI::ExistingFile);
  evaluate->add_option("--classification", classification)->check(CLI::ExistingFile);
  evaluate->add_option("--segmentation", segmentation)->check(CLI::ExistingDirectory);
  evaluate->add_option("--out", out, "output directory")->required();

  auto* run = app.add_subcommand("run", "run the configured pipeline");
  ConfigArgs run_args;
  bool force = false;
  std::string only;
  run->add_option("--config", run_args.path)->required()->check(CLI::ExistingFile);
  run->add_option("--set", run_args.sets, "override a config key, key=value (repeatable)");
  run->add_option("--seed", run_args.seed, "override the config seed");
  run->add_flag("--force", force, "recompute stages whose outputs exist");
  run->add_option("--stage", only, "run one stage only")->check(CLI::IsMember(pipeline::stage_names()));

  CLI11_PARSE(app, argc, argv);
  if (level == "debug") log::set_level(log::Level::debug);
  if (level == "info") log::set_level(log::Level::info);
  if (level == "warn") log::set_level(log::Level::warn);
  if (level == "error") log::set_level(log::Level::error);
  if (level == "off") log::set_level(log::Level::off);

  try {
    pipeline::check_device();
    if (*synth) {
      const fs::path dir = fs::absolute(synth_out);
      const auto ds = synth::generate_dataset(dir / "data", synth_cfg);
      auto cfg = config::synthetic_preset();
      cfg.seed = synth_cfg.seed;
      cfg.data_root = "data";
      cfg.eval_key = "data/eval_key.csv";
      cfg.work_dir = "work";
      write_text(dir / "pipeline.conf", config::to_text(cfg));
      std::cout << ds.images << " images in " << ds.root.string() << "\nconfig " << (dir / "pipeline.conf").string()
                << '\n';
    } else if (*manifest) {
      const auto m = data::load_manifest(root, data::parse_layout(layout), {permissive});
      data::write_manifest_csv(m, out);
      std::cout << m.size() << " images\n";
    } else if (*split) {
      const auto m = data::read_manifest_csv(manifest_path);
      data::DatasetManifest labelled;
      for (const auto& e : m.entries)
        if (e.glaucoma) labelled.entries.push_back(e);
      data::write_split_csv(data::stratified_split(labelled, val_fraction, split_seed), out);
    } else if (*train_loc) {
      const auto cfg = load_config(loc_args);
      pipeline::train_localizer_on(data::read_manifest_csv(manifest_path), data::read_split_csv(split_path),
                                   cfg.localizer, cfg.localizer_augment, cfg.permissive_sizes, cfg.seed,
                                   fs::path(out) / "localizer.bin");
    } else if (*locate) {
      const auto m = heatmap::load_localizer(model);
      pipeline::write_fovea_csv(pipeline::locate_images(*m, pipeline::list_images(images)), out);
    } else if (*crop) {
      std::map<std::string, Point2> cups;
      if (!fovea.empty())
        for (const auto& r : pipeline::read_fovea_csv(fovea)) cups[r.id] = r.cup;
      pipeline::crop_rois(data::read_manifest_csv(manifest_path), cups, roi_size, permissive, out);
    } else if (*train_gan) {
      const auto cfg = load_config(gan_args);
      pipeline::train_pair_on(data::read_roi_index(fs::path(rois) / "index.csv"), transfer::parse_pair(pair_text),
                              cfg.cyclegan, cfg.seed, out);
    } else if (*expand) {
      std::vector<data::RoiEntry> annotated;
      for (auto& r : data::read_roi_index(fs::path(rois) / "index.csv"))
        if (r.glaucoma || r.mask_path) annotated.push_back(r);
      const auto made = transfer::expand_dataset(annotated, *maybe_gens(gens), out);
      std::cout << made.size() << " items\n";
    } else if (*train_cls || *train_seg) {
      if (items.empty() == rois.empty()) throw Error("give exactly one of --items and --rois");
      std::vector<transfer::ExpandedItem> list;
      if (!items.empty()) {
        list = transfer::read_expanded_index(items);
      } else {
        for (auto& r : data::read_roi_index(fs::path(rois) / "index.csv"))
          if (r.glaucoma || r.mask_path) list.push_back({r.id, r.domain, false, r.image_path, r.mask_path, r.glaucoma});
      }
      const auto s = data::read_split_csv(split_path);
      if (*train_cls) {
        const auto cfg = load_config(cls_args);
        const auto sum = pipeline::train_classifier_on(list, s, cfg.classifier, cfg.classifier_augment, cfg.seed,
                                                       fs::path(out) / "classifier.bin");
        write_text(fs::path(out) / "classifier_summary.json", sum.to_json().dump(2) + "\n");
      } else {
        const auto cfg = load_config(seg_args);
        pipeline::train_segmenter_on(list, s, cfg.segmenter, cfg.segmenter_augment, cfg.seed,
                                     fs::path(out) / "segmenter.bin");
      }
    } else if (*predict || *segment) {
      std::vector<data::RoiEntry> test;
      for (auto& r : data::read_roi_index(fs::path(rois) / "index.csv"))
        if (!r.glaucoma && !r.mask_path) test.push_back(r);
      const auto g = maybe_gens(gens);
      const auto cfg = load_config(*predict ? cls_args : seg_args);
      if (*predict) {
        const auto m = classifier::load_classifier(model);
        pipeline::write_risk_csv(pipeline::predict_risk(*m, test, g ? &*g : nullptr, cfg.tta, cfg.tta_domains), out);
      } else {
        const auto m = segmenter::load_segmenter(model);
        const auto cdr = pipeline::segment_rois(*m, test, g ? &*g : nullptr, cfg.tta, cfg.tta_domains, out);
        pipeline::write_cdr_csv(cdr, fs::path(out) / "cdr.csv");
      }
    } else if (*evaluate) {
      pipeline::EvalInputs in;
      in.key = key;
      if (!fovea.empty()) in.fovea = fovea;
      if (!classification.empty()) in.risk = classification;
      if (!segmentation.empty()) in.masks = segmentation;
      const auto rep = pipeline::evaluate(in);
      write_text(fs::path(out) / "report.json", rep.to_json().dump(2) + "\n");
      rep.write_csv(fs::path(out) / "report.csv");
      std::cout << rep.to_json().dump(2) << '\n';
    } else if (*run) {
      const auto cfg = load_config(run_args);
      pipeline::RunOptions opt;
      opt.force = force;
      if (!only.empty()) opt.only = only;
      const auto res = pipeline::run_pipeline(cfg, opt);
      if (!only.empty() && only != "evaluate") return 0;
      std::cout << res.report.to_json().dump(2) << '\n';
    }
  } catch (const std::exception& e) {
    log::error(e.what());
    return 1;
  }
  return 0;
}
