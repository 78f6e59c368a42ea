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

// Synthetic fundus-like dataset: an elliptical disc with an inner cup, a dark
// fovea spot and a few vessels inside a circular field of view, rendered with
// a per-domain colour cast. Glaucoma is tied to a large cup-to-disc ratio.

#include <cstdint>
#include <filesystem>

namespace fundus::synth {

struct SynthConfig {
  int images_per_domain = 20;
  double positive_fraction = 0.25;
  double size_scale = 0.125;  // image sizes relative to the native domain sizes
  std::uint64_t seed = 1;
};

struct SynthDataset {
  std::filesystem::path root;      // challenge layout
  std::filesystem::path eval_key;  // id,fovea_x,fovea_y,glaucoma,mask_path for domain 3
  int images = 0;
};

/// Writes root/domain{1,2,3}/images, masks and annotations for domains 1 and 2,
/// and the domain-3 answers into a separate evaluation key.
SynthDataset generate_dataset(const std::filesystem::path& root, const SynthConfig& cfg);

}  // namespace fundus::synth
