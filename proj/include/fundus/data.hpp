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

// Dataset ingestion and bookkeeping: manifests, domain inference, stratified
// splitting, ROI cropping and coordinate mapping between resolutions.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "fundus/image.hpp"
#include "fundus/segmask.hpp"

namespace fundus::data {

/// Acquisition domains (camera sources). Domain 3 is the unlabelled test domain.
inline constexpr int kDomainCount = 3;

void check_domain(int domain);
/// Native (height, width) of challenge images for a domain.
Extent native_extent(int domain);
/// Domain whose native size matches exactly, if any.
std::optional<int> domain_from_extent(Extent e);

struct ManifestEntry {
  std::string id;
  int domain = 1;
  std::filesystem::path image_path;
  std::optional<std::filesystem::path> mask_path;
  std::optional<Point2> fovea;
  std::optional<bool> glaucoma;

  bool annotated() const { return mask_path || fovea || glaucoma; }
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  const ManifestEntry& find(const std::string& id) const;
  std::size_t count_domain(int domain) const;
  std::size_t size() const { return entries.size(); }
};

enum class Layout { challenge, flat };
Layout parse_layout(const std::string& name);

struct LoadOptions {
  /// Accept images whose size does not match their domain's native size.
  bool permissive_sizes = false;
};

/// challenge: root/domain{1,2,3}/images/<id>.<ext>, optional masks/<id>.png and
///            annotations.csv (id,fovea_x,fovea_y,glaucoma) beside images/.
/// flat:      root/<id>.<ext> with the domain inferred from image size; optional
///            masks/ and annotations.csv in root.
DatasetManifest load_manifest(const std::filesystem::path& root, Layout layout, LoadOptions opt = {});

/// Columns: id,domain,image_path,mask_path,fovea_x,fovea_y,glaucoma. Relative
/// paths resolve against the CSV's directory; every referenced file must exist.
DatasetManifest read_manifest_csv(const std::filesystem::path& path);
void write_manifest_csv(const DatasetManifest& manifest, const std::filesystem::path& path);

struct FundusImage {
  std::string id;
  int domain = 1;
  cv::Mat pixels;  // 8-bit BGR
  std::optional<bool> glaucoma;
  std::optional<SegMask> mask;
  std::optional<Point2> fovea;
  std::optional<Point2> cup_center;  // centroid of cup pixels in mask

  Extent extent() const { return extent_of(pixels); }
};

FundusImage load_image(const ManifestEntry& entry, LoadOptions opt = {});

struct SplitAssignment {
  std::set<std::string> train_ids;
  std::set<std::string> val_ids;
  std::uint64_t seed = 0;
};

/// Per (domain, glaucoma label) stratum, round(fraction * stratum size) members
/// go to validation. Every entry must carry a glaucoma label.
SplitAssignment stratified_split(const DatasetManifest& manifest, double val_fraction, std::uint64_t seed);

/// `id,split` with split in {train,val}.
void write_split_csv(const SplitAssignment& split, const std::filesystem::path& path);
SplitAssignment read_split_csv(const std::filesystem::path& path);

/// Where a square ROI sits in its native image. x0/y0 may be negative.
struct CropRecord {
  int x0 = 0;
  int y0 = 0;
  int size = 0;
  Extent native;
};

struct RoiPatch {
  cv::Mat pixels;
  CropRecord record;
};

/// Square crop centred on `center` (rounded to the nearest pixel); regions
/// outside the image replicate the nearest edge pixel.
RoiPatch crop_roi(const cv::Mat& image, Point2 center, int size = 500);
/// Applies an existing crop to another image of the same native extent (e.g. a mask).
cv::Mat crop_with_record(const cv::Mat& image, const CropRecord& record);
/// Writes the in-bounds part of `patch` back into `canvas` (native extent).
void paste_back(const cv::Mat& patch, const CropRecord& record, cv::Mat& canvas);

/// One cropped region of interest on disk.
struct RoiEntry {
  std::string id;
  int domain = 1;
  std::filesystem::path image_path;
  std::optional<std::filesystem::path> mask_path;
  std::optional<bool> glaucoma;
  CropRecord crop;
};

/// Columns: id,domain,image_path,mask_path,glaucoma,crop_x0,crop_y0,crop_size,native_w,native_h.
/// Paths are written relative to the index directory when they lie inside it.
std::vector<RoiEntry> read_roi_index(const std::filesystem::path& path);
void write_roi_index(const std::vector<RoiEntry>& entries, const std::filesystem::path& path);

/// `p` relative to `base` when it lies under it, otherwise unchanged.
std::filesystem::path relative_if_inside(const std::filesystem::path& p, const std::filesystem::path& base);

/// Scales a point between frames per axis and clamps it inside `to`.
Point2 map_coords(Point2 p, Extent from, Extent to);

}  // namespace fundus::data
