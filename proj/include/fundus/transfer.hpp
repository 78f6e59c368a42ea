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

// Unpaired image-to-image translation between acquisition domains with
// cycleGANs, and dataset expansion with the six directional generators.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <opencv2/core.hpp>

#include "fundus/augment.hpp"
#include "fundus/data.hpp"
#include "fundus/module.hpp"

namespace fundus::transfer {

struct DomainPair {
  int a = 1;
  int b = 2;

  void validate() const;
  bool operator==(const DomainPair&) const = default;
};

/// (1,2), (1,3), (2,3)
std::vector<DomainPair> all_pairs();
/// Parses "1,2".
DomainPair parse_pair(const std::string& text);

struct CycleGanConfig {
  int image_size = 256;
  int generator_channels = 64;
  int residual_blocks = 9;
  int downsamplings = 2;
  int discriminator_channels = 64;
  int discriminator_layers = 3;
  double adversarial_weight = 1.0;
  double cycle_weight = 10.0;
  double identity_weight = 5.0;
  double learning_rate = 2e-4;
  double beta1 = 0.5;
  int epochs = 200;
  int decay_epochs = 100;  // final epochs over which the learning rate falls linearly to zero
  int pool_size = 50;
  double load_scale = 286.0 / 256.0;  // resize by this, then random-crop back to image_size

  void validate() const;
  double learning_rate_at(int epoch) const;
};

nlohmann::json to_json(const CycleGanConfig& c);
CycleGanConfig cyclegan_config_from_json(const nlohmann::json& j);

/// ResNet generator: 7x7 stem, strided downsampling, residual blocks with
/// instance norm, nearest upsampling + 3x3 conv, tanh output in [-1, 1].
class ResnetGenerator : public nn::Module {
 public:
  ResnetGenerator(const CycleGanConfig& cfg, std::uint64_t seed);
  nn::Var forward(const nn::Var& x) const;
  const CycleGanConfig& config() const { return cfg_; }

 private:
  CycleGanConfig cfg_;
  std::vector<std::shared_ptr<nn::Conv2d>> convs_;
};

/// PatchGAN discriminator producing a map of real/fake scores.
class PatchDiscriminator : public nn::Module {
 public:
  PatchDiscriminator(const CycleGanConfig& cfg, std::uint64_t seed);
  nn::Var forward(const nn::Var& x) const;

 private:
  std::vector<std::shared_ptr<nn::Conv2d>> convs_;
};

struct CycleGanEpoch {
  int epoch = 0;
  double adversarial = 0.0;    // generator LSGAN term, both directions
  double cycle = 0.0;          // unweighted L1 reconstruction, both directions
  double identity = 0.0;       // unweighted L1 identity term, both directions
  double discriminator = 0.0;  // LSGAN discriminator loss, both domains
  double learning_rate = 0.0;
};

struct CycleGanHistory {
  std::vector<CycleGanEpoch> epochs;
  bool aborted = false;
  std::string abort_reason;

  nlohmann::json to_json() const;
};

struct TrainedPair {
  std::shared_ptr<ResnetGenerator> g_ab;  // a -> b
  std::shared_ptr<ResnetGenerator> g_ba;  // b -> a
  CycleGanHistory history;
};

/// Trains both directions on unpaired 8-bit BGR images of any size. A
/// non-finite loss stops training with the generators restored to the end of
/// the last complete epoch and `history.aborted` set.
TrainedPair train_cyclegan(const std::vector<cv::Mat>& images_a, const std::vector<cv::Mat>& images_b,
                           const CycleGanConfig& cfg, std::uint64_t seed);

/// 8-bit BGR image at the generator resolution -> translated image of the same shape.
cv::Mat translate(const ResnetGenerator& g, const cv::Mat& image);

/// Renderer for images of any size: resize to the generator resolution,
/// translate, resize back.
augment::Renderer make_renderer(std::shared_ptr<const ResnetGenerator> g);

class GeneratorSet {
 public:
  void set(int source, int target, std::shared_ptr<const ResnetGenerator> g);
  bool has(int source, int target) const;
  const std::shared_ptr<const ResnetGenerator>& get(int source, int target) const;
  std::size_t size() const { return gens_.size(); }
  bool complete() const;
  /// Throws listing every missing ordered pair.
  void require_complete() const;
  /// One renderer per entry of `domains`: identity for `source` itself, the
  /// source -> domain generator otherwise.
  std::vector<augment::Renderer> renderers_for(int source, std::span<const int> domains) const;

 private:
  std::map<std::pair<int, int>, std::shared_ptr<const ResnetGenerator>> gens_;
};

/// Writes generator_{a}to{b}.bin, generator_{b}to{a}.bin (with sidecars) and
/// cyclegan_{a}_{b}.json (config and loss history) into `dir`.
void save_pair(const std::filesystem::path& dir, DomainPair pair, const TrainedPair& trained, const CycleGanConfig& cfg);
/// Loads every generator_*to*.bin found in `dir`.
GeneratorSet load_generator_set(const std::filesystem::path& dir);

struct ExpandedItem {
  std::string original_id;
  int rendered_domain = 1;
  bool is_synthetic = false;
  std::filesystem::path path;
  std::optional<std::filesystem::path> mask_path;
  std::optional<bool> glaucoma;
};

/// Emits every ROI in its own domain (a byte copy) and translated into the two
/// other domains as {id}__dom{d}.png under out_dir; masks are copied byte for
/// byte to out_dir/masks. Writes out_dir/index.csv.
std::vector<ExpandedItem> expand_dataset(const std::vector<data::RoiEntry>& rois, const GeneratorSet& gens,
                                         const std::filesystem::path& out_dir);

/// Columns: original_id,rendered_domain,is_synthetic,path,mask_path,glaucoma.
void write_expanded_index(const std::vector<ExpandedItem>& items, const std::filesystem::path& path);
std::vector<ExpandedItem> read_expanded_index(const std::filesystem::path& path);

}  // namespace fundus::transfer
