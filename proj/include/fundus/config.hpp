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

// Flat key = value configuration files with dotted section keys, and the
// pipeline configuration built from them.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fundus/augment.hpp"
#include "fundus/classifier.hpp"
#include "fundus/heatmap.hpp"
#include "fundus/segmenter.hpp"
#include "fundus/transfer.hpp"

namespace fundus::config {

/// `key = value` lines; `#` starts a comment at line start or after
/// whitespace. Values may be double-quoted. Duplicate keys are an error.
class KeyValues {
 public:
  static KeyValues parse(std::string_view text, const std::string& source = "<config>");
  static KeyValues read(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  bool contains(const std::string& key) const { return entries_.count(key) > 0; }
  /// Returns the value and marks the key as consumed.
  std::optional<std::string> take(const std::string& key);
  /// Keys under `section.`, without the prefix.
  std::vector<std::string> section_keys(const std::string& section) const;
  /// Throws naming every key that was never consumed.
  void require_all_consumed() const;
  /// "source:line" for messages.
  std::string where(const std::string& key) const;

 private:
  struct Entry {
    std::string value;
    int line = 0;
  };
  std::map<std::string, Entry> entries_;
  std::set<std::string> consumed_;
  std::string source_;
};

bool parse_bool(const std::string& text, const std::string& what);
long long parse_int(const std::string& text, const std::string& what);
double parse_double(const std::string& text, const std::string& what);

/// Overlays `section.*` keys onto a module config's JSON form; each key must
/// already exist there and takes the type of its default. Keys in `skip` are
/// left for the caller.
nlohmann::json overlay_section(KeyValues& kv, const std::string& section, nlohmann::json defaults,
                               const std::set<std::string>& skip = {});

struct StageToggles {
  bool localize = true;
  bool cyclegan = true;  // also gates expansion
  bool classify = true;
  bool segment = true;
};

struct PipelineConfig {
  std::uint64_t seed = 1;
  std::filesystem::path work_dir = "work";

  // exactly one of data_root / manifest
  std::filesystem::path data_root;
  std::string layout = "challenge";
  std::filesystem::path manifest;
  bool permissive_sizes = false;
  double val_fraction = 0.1;
  std::filesystem::path eval_key;  // id,fovea_x,fovea_y,glaucoma,mask_path; optional

  int roi_size = 500;
  StageToggles stages;

  heatmap::HourglassConfig localizer;
  bool localizer_augment = true;
  transfer::CycleGanConfig cyclegan;
  classifier::ClassifierConfig classifier;
  bool classifier_augment = true;
  segmenter::SegConfig segmenter;
  bool segmenter_augment = true;

  augment::TtaConfig tta;
  std::vector<int> tta_domains{1, 2, 3};

  void validate() const;
};

/// Relative paths resolve against `base_dir`. Unknown keys are an error.
PipelineConfig parse_pipeline_config(KeyValues kv, const std::filesystem::path& base_dir);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);
/// Every key, in a form parse_pipeline_config reads back to an equal config.
std::string to_text(const PipelineConfig& cfg);

/// Tiny models for the synthetic dataset (images at 1/8 native size).
PipelineConfig synthetic_preset();

}  // namespace fundus::config
