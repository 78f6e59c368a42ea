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

#include "fundus/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <opencv2/imgproc.hpp>

#include "fundus/csv.hpp"
#include "fundus/data.hpp"
#include "fundus/image.hpp"
#include "fundus/seed.hpp"
#include "fundus/segmask.hpp"

namespace fs = std::filesystem;

namespace fundus::synth {

namespace {

struct Rendered {
  cv::Mat image;
  cv::Mat mask;  // encoded 0 / 128 / 255
  Point2 fovea;
  bool glaucoma = false;
};

// BGR channel gains and offsets per pseudo-domain.
const cv::Scalar kGain[3] = {{1.0, 1.0, 1.0}, {0.75, 0.95, 1.08}, {1.25, 1.1, 0.8}};
const cv::Scalar kOffset[3] = {{0, 0, 0}, {10, -5, 0}, {-5, 10, 15}};

Rendered render(int domain, Extent size, bool positive, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto u = [&rng](double lo, double hi) { return uniform(rng, lo, hi); };
  const int w = size.width, h = size.height;
  const double m = std::min(w, h);

  cv::Mat img(h, w, CV_32FC3, cv::Scalar(0, 0, 0));
  const cv::Point2d centre(w / 2.0, h / 2.0);
  const double fov = 0.47 * m;
  const cv::Scalar base(u(35, 50), u(70, 90), u(160, 185));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double d = std::hypot(x - centre.x, y - centre.y) / fov;
      if (d > 1.0) continue;
      const double shade = 1.0 - 0.35 * d * d;
      img.at<cv::Vec3f>(y, x) = cv::Vec3f(base[0] * shade, base[1] * shade, base[2] * shade);
    }

  const int side = u(0, 1) < 0.5 ? -1 : 1;  // left or right eye
  const double rd = u(0.12, 0.14) * m;
  const cv::Point2d disc(centre.x + side * u(0.2, 0.24) * w, centre.y + u(-0.06, 0.06) * h);
  const double ratio = positive ? u(0.65, 0.8) : u(0.35, 0.45);
  const double rdx = rd * u(0.9, 0.98), rdy = rd;
  const double rcx = rdx * ratio * u(0.95, 1.05), rcy = rdy * ratio;
  const cv::Point2d cup(disc.x + u(-0.08, 0.08) * (rdx - rcx), disc.y + u(-0.08, 0.08) * (rdy - rcy));
  const Point2 fovea{disc.x - side * u(0.27, 0.31) * w, disc.y + u(-0.04, 0.04) * h};

  // vessels radiating from the disc
  for (int v = 0; v < 6; ++v) {
    const double a0 = u(0, 2 * CV_PI), bend = u(-0.8, 0.8);
    cv::Point2d p = disc;
    for (int s = 0; s < 40; ++s) {
      const double a = a0 + bend * s / 40.0;
      const cv::Point2d q(p.x + std::cos(a) * m / 60, p.y + std::sin(a) * m / 60);
      cv::line(img, p, q, cv::Scalar(base[0] * 0.6, base[1] * 0.5, base[2] * 0.65), s < 15 ? 2 : 1, cv::LINE_AA);
      p = q;
    }
  }
  // fovea: soft dark spot
  const double rf = 0.045 * m;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double d = std::hypot(x - fovea.x, y - fovea.y) / rf;
      if (d < 2.0) img.at<cv::Vec3f>(y, x) *= static_cast<float>(0.45 + 0.55 * std::min(1.0, d * d / 4.0));
    }

  const cv::Point dc(static_cast<int>(std::lround(disc.x * 16)), static_cast<int>(std::lround(disc.y * 16)));
  const cv::Point cc(static_cast<int>(std::lround(cup.x * 16)), static_cast<int>(std::lround(cup.y * 16)));
  const cv::Size da(static_cast<int>(rdx * 16), static_cast<int>(rdy * 16)), ca(static_cast<int>(rcx * 16), static_cast<int>(rcy * 16));
  cv::ellipse(img, dc, da, 0, 0, 360, cv::Scalar(u(70, 90), u(120, 140), u(205, 225)), cv::FILLED, cv::LINE_AA, 4);
  cv::ellipse(img, cc, ca, 0, 0, 360, cv::Scalar(u(215, 235), u(235, 250), 255), cv::FILLED, cv::LINE_AA, 4);

  cv::Mat mask(h, w, CV_8U, cv::Scalar(255));
  cv::ellipse(mask, dc, da, 0, 0, 360, cv::Scalar(128), cv::FILLED, cv::LINE_8, 4);
  cv::ellipse(mask, cc, ca, 0, 0, 360, cv::Scalar(0), cv::FILLED, cv::LINE_8, 4);

  // domain cast and sensor noise
  cv::Mat noise(h, w, CV_32FC3);
  cv::RNG cvrng(static_cast<std::uint64_t>(seed ^ 0x5DEECE66DULL));
  cvrng.fill(noise, cv::RNG::NORMAL, 0, 5);
  cv::Mat out;
  cv::multiply(img, kGain[domain - 1], img);
  img += kOffset[domain - 1];
  img += noise;
  cv::Mat fov_mask(h, w, CV_8U, cv::Scalar(0));
  cv::circle(fov_mask, centre, static_cast<int>(fov), cv::Scalar(255), cv::FILLED);
  img.setTo(cv::Scalar::all(0), ~fov_mask);
  img.convertTo(out, CV_8UC3);
  return {out, mask, fovea, positive};
}

}  // namespace

SynthDataset generate_dataset(const fs::path& root, const SynthConfig& cfg) {
  if (cfg.images_per_domain < 1) throw Error("synth: images_per_domain must be positive");
  if (!(cfg.positive_fraction >= 0 && cfg.positive_fraction <= 1)) throw Error("synth: positive_fraction out of range");
  if (!(cfg.size_scale > 0 && cfg.size_scale <= 1)) throw Error("synth: size_scale must lie in (0, 1]");
  SynthDataset out{root, root / "eval_key.csv", 0};
  const int positives = static_cast<int>(std::lround(cfg.positive_fraction * cfg.images_per_domain));
  CsvTable key({"id", "fovea_x", "fovea_y", "glaucoma", "mask_path"});
  for (int d = 1; d <= data::kDomainCount; ++d) {
    const Extent native = data::native_extent(d);
    const Extent size{static_cast<int>(std::lround(native.height * cfg.size_scale)),
                      static_cast<int>(std::lround(native.width * cfg.size_scale))};
    const fs::path dir = root / ("domain" + std::to_string(d));
    CsvTable ann({"id", "fovea_x", "fovea_y", "glaucoma"});
    // positives spread evenly through the index range
    std::vector<bool> label(cfg.images_per_domain, false);
    for (int k = 0; k < positives; ++k) label[static_cast<std::size_t>(k * cfg.images_per_domain / std::max(1, positives))] = true;
    for (int i = 0; i < cfg.images_per_domain; ++i) {
      char id[32];
      std::snprintf(id, sizeof(id), "d%d_%03d", d, i);
      const Rendered r = render(d, size, label[i], mix_seed(cfg.seed, static_cast<std::uint64_t>(d * 100000 + i)));
      write_image(dir / "images" / (std::string(id) + ".png"), r.image);
      const std::string fx = format_fixed(r.fovea.x, 2), fy = format_fixed(r.fovea.y, 2), g = r.glaucoma ? "1" : "0";
      if (d < 3) {
        write_image(dir / "masks" / (std::string(id) + ".png"), r.mask);
        ann.add_row({id, fx, fy, g});
      } else {
        const fs::path mp = root / "eval_masks" / (std::string(id) + ".png");
        write_image(mp, r.mask);
        key.add_row({id, fx, fy, g, fs::relative(mp, root).string()});
      }
      ++out.images;
    }
    if (d < 3) ann.write(dir / "annotations.csv");
  }
  key.write(out.eval_key);
  return out;
}

}  // namespace fundus::synth
