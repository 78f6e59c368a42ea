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

#include "fundus/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <unordered_set>

#include <opencv2/imgproc.hpp>

#include "fundus/csv.hpp"
#include "fundus/log.hpp"

namespace fs = std::filesystem;

namespace fundus::data {

void check_domain(int domain) {
  if (domain < 1 || domain > kDomainCount) throw Error("domain must be 1, 2 or 3, got " + std::to_string(domain));
}

Extent native_extent(int domain) {
  check_domain(domain);
  static constexpr Extent kSizes[] = {{2056, 2124}, {1634, 1634}, {1940, 1940}};
  return kSizes[domain - 1];
}

std::optional<int> domain_from_extent(Extent e) {
  std::optional<int> found;
  for (int d = 1; d <= kDomainCount; ++d)
    if (native_extent(d) == e) {
      if (found) return std::nullopt;
      found = d;
    }
  return found;
}

const ManifestEntry& DatasetManifest::find(const std::string& id) const {
  for (const auto& e : entries)
    if (e.id == id) return e;
  throw Error("manifest has no entry '" + id + "'");
}

std::size_t DatasetManifest::count_domain(int domain) const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [domain](const ManifestEntry& e) { return e.domain == domain; }));
}

Layout parse_layout(const std::string& name) {
  if (name == "challenge") return Layout::challenge;
  if (name == "flat") return Layout::flat;
  throw Error("unknown dataset layout '" + name + "' (expected challenge or flat)");
}

namespace {

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".tif" || ext == ".tiff";
}

std::vector<fs::path> image_files(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

std::optional<double> parse_optional_double(const std::string& s, const std::string& what) {
  if (s.empty()) return std::nullopt;
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error("malformed " + what + " value '" + s + "'");
  }
}

std::optional<bool> parse_optional_bool(const std::string& s) {
  if (s.empty()) return std::nullopt;
  if (s == "1" || s == "true" || s == "yes") return true;
  if (s == "0" || s == "false" || s == "no") return false;
  throw Error("malformed glaucoma label '" + s + "'");
}

struct Annotation {
  std::optional<Point2> fovea;
  std::optional<bool> glaucoma;
};

std::map<std::string, Annotation> read_annotations(const fs::path& csv) {
  std::map<std::string, Annotation> out;
  if (!fs::exists(csv)) return out;
  const CsvTable t = CsvTable::read(csv);
  const std::size_t id = t.require_column("id");
  const auto fx = t.column("fovea_x"), fy = t.column("fovea_y"), gl = t.column("glaucoma");
  for (const auto& row : t.rows()) {
    Annotation a;
    if (fx && fy) {
      auto x = parse_optional_double(row[*fx], "fovea_x"), y = parse_optional_double(row[*fy], "fovea_y");
      if (x.has_value() != y.has_value()) throw Error(csv.string() + ": fovea for '" + row[id] + "' is half specified");
      if (x) a.fovea = Point2{*x, *y};
    }
    if (gl) a.glaucoma = parse_optional_bool(row[*gl]);
    out[row[id]] = a;
  }
  return out;
}

std::optional<fs::path> find_mask(const fs::path& mask_dir, const std::string& id) {
  for (const char* ext : {".png", ".bmp", ".tif"}) {
    fs::path p = mask_dir / (id + ext);
    if (fs::exists(p)) return p;
  }
  return std::nullopt;
}

Extent read_extent(const fs::path& p) { return extent_of(read_color_image(p)); }

void add_annotations(ManifestEntry& e, const fs::path& mask_dir, const std::map<std::string, Annotation>& ann) {
  e.mask_path = find_mask(mask_dir, e.id);
  if (auto it = ann.find(e.id); it != ann.end()) {
    e.fovea = it->second.fovea;
    e.glaucoma = it->second.glaucoma;
  }
  if (e.domain == 3 && e.annotated())
    throw Error("image " + e.image_path.string() + " is in the test domain but carries annotations");
}

}  // namespace

DatasetManifest load_manifest(const fs::path& root, Layout layout, LoadOptions opt) {
  if (!fs::is_directory(root)) throw Error("dataset directory does not exist: " + root.string());
  const fs::path base = fs::absolute(root);
  DatasetManifest m;
  if (layout == Layout::challenge) {
    for (int d = 1; d <= kDomainCount; ++d) {
      const fs::path dir = base / ("domain" + std::to_string(d));
      const auto ann = read_annotations(dir / "annotations.csv");
      for (const auto& img : image_files(dir / "images")) {
        ManifestEntry e{img.stem().string(), d, img, {}, {}, {}};
        if (!opt.permissive_sizes) {
          const Extent ex = read_extent(img);
          if (ex != native_extent(d))
            throw Error("image " + img.string() + " is " + std::to_string(ex.width) + "x" + std::to_string(ex.height) +
                        " but domain " + std::to_string(d) + " images are " + std::to_string(native_extent(d).width) +
                        "x" + std::to_string(native_extent(d).height));
        }
        add_annotations(e, dir / "masks", ann);
        m.entries.push_back(std::move(e));
      }
    }
  } else {
    const auto ann = read_annotations(base / "annotations.csv");
    for (const auto& img : image_files(base)) {
      const Extent ex = read_extent(img);
      const auto d = domain_from_extent(ex);
      if (!d)
        throw Error("cannot infer domain of " + img.string() + ": size " + std::to_string(ex.width) + "x" +
                    std::to_string(ex.height) + " matches no known domain");
      ManifestEntry e{img.stem().string(), *d, img, {}, {}, {}};
      add_annotations(e, base / "masks", ann);
      m.entries.push_back(std::move(e));
    }
  }
  std::unordered_set<std::string> seen;
  for (const auto& e : m.entries)
    if (!seen.insert(e.id).second) throw Error("duplicate image id '" + e.id + "' in " + root.string());
  return m;
}

DatasetManifest read_manifest_csv(const fs::path& path) {
  const CsvTable t = CsvTable::read(path);
  const std::size_t c_id = t.require_column("id"), c_dom = t.require_column("domain"),
                    c_img = t.require_column("image_path"), c_mask = t.require_column("mask_path"),
                    c_fx = t.require_column("fovea_x"), c_fy = t.require_column("fovea_y"),
                    c_gl = t.require_column("glaucoma");
  const fs::path dir = path.parent_path();
  auto resolve = [&dir](const std::string& s) {
    fs::path p(s);
    return p.is_absolute() ? p : dir / p;
  };
  DatasetManifest m;
  std::unordered_set<std::string> seen;
  for (const auto& row : t.rows()) {
    ManifestEntry e;
    e.id = row[c_id];
    if (!seen.insert(e.id).second) throw Error(path.string() + ": duplicate id '" + e.id + "'");
    try {
      e.domain = std::stoi(row[c_dom]);
    } catch (const std::exception&) {
      throw Error(path.string() + ": malformed domain '" + row[c_dom] + "' for " + e.id);
    }
    check_domain(e.domain);
    e.image_path = resolve(row[c_img]);
    if (!fs::exists(e.image_path)) throw Error(path.string() + ": missing image " + e.image_path.string());
    if (!row[c_mask].empty()) {
      e.mask_path = resolve(row[c_mask]);
      if (!fs::exists(*e.mask_path)) throw Error(path.string() + ": missing mask " + e.mask_path->string());
    }
    auto fx = parse_optional_double(row[c_fx], "fovea_x"), fy = parse_optional_double(row[c_fy], "fovea_y");
    if (fx.has_value() != fy.has_value()) throw Error(path.string() + ": fovea for '" + e.id + "' is half specified");
    if (fx) e.fovea = Point2{*fx, *fy};
    e.glaucoma = parse_optional_bool(row[c_gl]);
    m.entries.push_back(std::move(e));
  }
  return m;
}

void write_manifest_csv(const DatasetManifest& manifest, const fs::path& path) {
  CsvTable t({"id", "domain", "image_path", "mask_path", "fovea_x", "fovea_y", "glaucoma"});
  for (const auto& e : manifest.entries) {
    t.add_row({e.id, std::to_string(e.domain), e.image_path.string(), e.mask_path ? e.mask_path->string() : "",
               e.fovea ? format_fixed(e.fovea->x, 2) : "", e.fovea ? format_fixed(e.fovea->y, 2) : "",
               e.glaucoma ? (*e.glaucoma ? "1" : "0") : ""});
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  t.write(path);
}

FundusImage load_image(const ManifestEntry& entry, LoadOptions opt) {
  check_domain(entry.domain);
  FundusImage img;
  img.id = entry.id;
  img.domain = entry.domain;
  img.pixels = read_color_image(entry.image_path);
  if (!opt.permissive_sizes && img.extent() != native_extent(entry.domain))
    throw Error("image " + entry.image_path.string() + " does not have the native size of domain " +
                std::to_string(entry.domain));
  if (entry.domain == 3 && entry.annotated())
    throw Error("test-domain image " + entry.id + " must not carry annotations");
  img.glaucoma = entry.glaucoma;
  const Extent ex = img.extent();
  auto inside = [&ex](Point2 p) { return p.x >= 0 && p.y >= 0 && p.x < ex.width && p.y < ex.height; };
  if (entry.fovea) {
    if (!inside(*entry.fovea)) throw Error("fovea of " + entry.id + " lies outside the image");
    img.fovea = entry.fovea;
  }
  if (entry.mask_path) {
    SegMask mask = decode_mask(read_gray_image(*entry.mask_path));
    if (mask.extent() != ex) throw Error("mask of " + entry.id + " does not match the image size");
    img.cup_center = cup_centroid(mask);
    img.mask = std::move(mask);
  }
  return img;
}

namespace {

// Fisher-Yates with a fixed engine so splits reproduce across standard libraries.
template <class T>
void deterministic_shuffle(std::vector<T>& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
}

}  // namespace

SplitAssignment stratified_split(const DatasetManifest& manifest, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw Error("validation fraction must lie in (0, 1)");
  std::map<std::pair<int, bool>, std::vector<std::string>> strata;
  for (const auto& e : manifest.entries) {
    if (!e.glaucoma) throw Error("stratified_split: entry '" + e.id + "' has no glaucoma label");
    strata[{e.domain, *e.glaucoma}].push_back(e.id);
  }
  SplitAssignment out;
  out.seed = seed;
  for (auto& [key, ids] : strata) {
    std::sort(ids.begin(), ids.end());
    const std::uint64_t stratum_seed =
        seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(key.first) * 2 + (key.second ? 1 : 0);
    deterministic_shuffle(ids, stratum_seed);
    const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(ids.size())));
    if (n_val == 0)
      log::warn("stratum (domain " + std::to_string(key.first) + ", glaucoma " + (key.second ? "1" : "0") + ") with " +
                std::to_string(ids.size()) + " images contributes no validation images");
    for (std::size_t i = 0; i < ids.size(); ++i) (i < n_val ? out.val_ids : out.train_ids).insert(ids[i]);
  }
  return out;
}

void write_split_csv(const SplitAssignment& split, const fs::path& path) {
  CsvTable t({"id", "split"});
  std::vector<std::pair<std::string, std::string>> rows;
  for (const auto& id : split.train_ids) rows.emplace_back(id, "train");
  for (const auto& id : split.val_ids) rows.emplace_back(id, "val");
  std::sort(rows.begin(), rows.end());
  for (auto& [id, s] : rows) t.add_row({id, s});
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  t.write(path);
}

SplitAssignment read_split_csv(const fs::path& path) {
  const CsvTable t = CsvTable::read(path);
  const std::size_t c_id = t.require_column("id"), c_split = t.require_column("split");
  SplitAssignment s;
  for (const auto& row : t.rows()) {
    if (row[c_split] == "train")
      s.train_ids.insert(row[c_id]);
    else if (row[c_split] == "val")
      s.val_ids.insert(row[c_id]);
    else
      throw Error(path.string() + ": unknown split '" + row[c_split] + "'");
  }
  return s;
}

RoiPatch crop_roi(const cv::Mat& image, Point2 center, int size) {
  if (size <= 0) throw Error("ROI size must be positive");
  if (size > image.cols && size > image.rows)
    throw Error("ROI size " + std::to_string(size) + " exceeds both image dimensions");
  if (!(center.x >= 0 && center.y >= 0 && center.x < image.cols && center.y < image.rows))
    throw Error("ROI centre lies outside the image");
  const int cx = static_cast<int>(std::lround(center.x)), cy = static_cast<int>(std::lround(center.y));
  CropRecord rec{cx - size / 2, cy - size / 2, size, extent_of(image)};
  return {crop_with_record(image, rec), rec};
}

cv::Mat crop_with_record(const cv::Mat& image, const CropRecord& r) {
  if (extent_of(image) != r.native) throw Error("crop record was made for a different image size");
  const int ix0 = std::clamp(r.x0, 0, image.cols), iy0 = std::clamp(r.y0, 0, image.rows);
  const int ix1 = std::clamp(r.x0 + r.size, 0, image.cols), iy1 = std::clamp(r.y0 + r.size, 0, image.rows);
  if (ix0 >= ix1 || iy0 >= iy1) throw Error("crop window does not overlap the image");
  cv::Mat out;
  cv::copyMakeBorder(image(cv::Rect(ix0, iy0, ix1 - ix0, iy1 - iy0)), out, iy0 - r.y0, r.y0 + r.size - iy1,
                     ix0 - r.x0, r.x0 + r.size - ix1, cv::BORDER_REPLICATE);
  return out;
}

void paste_back(const cv::Mat& patch, const CropRecord& r, cv::Mat& canvas) {
  if (patch.rows != r.size || patch.cols != r.size) throw Error("paste_back: patch does not match the crop size");
  if (extent_of(canvas) != r.native) throw Error("paste_back: canvas does not match the native size");
  if (patch.type() != canvas.type()) throw Error("paste_back: patch and canvas types differ");
  const int ix0 = std::clamp(r.x0, 0, canvas.cols), iy0 = std::clamp(r.y0, 0, canvas.rows);
  const int ix1 = std::clamp(r.x0 + r.size, 0, canvas.cols), iy1 = std::clamp(r.y0 + r.size, 0, canvas.rows);
  if (ix0 >= ix1 || iy0 >= iy1) return;
  const cv::Rect src(ix0 - r.x0, iy0 - r.y0, ix1 - ix0, iy1 - iy0);
  patch(src).copyTo(canvas(cv::Rect(ix0, iy0, ix1 - ix0, iy1 - iy0)));
}

Point2 map_coords(Point2 p, Extent from, Extent to) {
  if (from.width <= 0 || from.height <= 0 || to.width <= 0 || to.height <= 0)
    throw Error("map_coords: zero-sized frame");
  if (!(p.x >= 0 && p.y >= 0 && p.x < from.width && p.y < from.height))
    throw Error("map_coords: point outside the source frame");
  const double x = p.x * static_cast<double>(to.width) / from.width;
  const double y = p.y * static_cast<double>(to.height) / from.height;
  return {std::clamp(x, 0.0, static_cast<double>(to.width - 1)), std::clamp(y, 0.0, static_cast<double>(to.height - 1))};
}

fs::path relative_if_inside(const fs::path& p, const fs::path& base) {
  const fs::path rel = p.lexically_normal().lexically_relative(base.lexically_normal());
  if (rel.empty() || *rel.begin() == "..") return p;
  return rel;
}

std::vector<RoiEntry> read_roi_index(const fs::path& path) {
  const CsvTable t = CsvTable::read(path);
  const std::size_t c_id = t.require_column("id"), c_dom = t.require_column("domain"),
                    c_img = t.require_column("image_path"), c_mask = t.require_column("mask_path"),
                    c_gl = t.require_column("glaucoma"), c_x0 = t.require_column("crop_x0"),
                    c_y0 = t.require_column("crop_y0"), c_size = t.require_column("crop_size"),
                    c_nw = t.require_column("native_w"), c_nh = t.require_column("native_h");
  const fs::path dir = path.parent_path();
  auto resolve = [&dir](const std::string& s) {
    fs::path p(s);
    return p.is_absolute() ? p : dir / p;
  };
  auto integer = [&path](const std::string& s, const std::string& what) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(s, &used);
      if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw Error(path.string() + ": malformed " + what + " '" + s + "'");
  };
  std::vector<RoiEntry> out;
  for (const auto& row : t.rows()) {
    RoiEntry e;
    e.id = row[c_id];
    e.domain = integer(row[c_dom], "domain");
    check_domain(e.domain);
    e.image_path = resolve(row[c_img]);
    if (!fs::exists(e.image_path)) throw Error(path.string() + ": missing ROI image " + e.image_path.string());
    if (!row[c_mask].empty()) {
      e.mask_path = resolve(row[c_mask]);
      if (!fs::exists(*e.mask_path)) throw Error(path.string() + ": missing ROI mask " + e.mask_path->string());
    }
    e.glaucoma = parse_optional_bool(row[c_gl]);
    e.crop = {integer(row[c_x0], "crop_x0"), integer(row[c_y0], "crop_y0"), integer(row[c_size], "crop_size"),
              {integer(row[c_nh], "native_h"), integer(row[c_nw], "native_w")}};
    out.push_back(std::move(e));
  }
  return out;
}

void write_roi_index(const std::vector<RoiEntry>& entries, const fs::path& path) {
  const fs::path dir = path.parent_path();
  CsvTable t({"id", "domain", "image_path", "mask_path", "glaucoma", "crop_x0", "crop_y0", "crop_size", "native_w",
              "native_h"});
  for (const auto& e : entries)
    t.add_row({e.id, std::to_string(e.domain), relative_if_inside(e.image_path, dir).string(),
               e.mask_path ? relative_if_inside(*e.mask_path, dir).string() : "",
               e.glaucoma ? (*e.glaucoma ? "1" : "0") : "", std::to_string(e.crop.x0), std::to_string(e.crop.y0),
               std::to_string(e.crop.size), std::to_string(e.crop.native.width),
               std::to_string(e.crop.native.height)});
  if (!dir.empty()) fs::create_directories(dir);
  t.write(path);
}

}  // namespace fundus::data
