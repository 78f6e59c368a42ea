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

#include "fundus/augment.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <opencv2/imgproc.hpp>

#include "fundus/kernels.hpp"
#include "fundus/seed.hpp"

namespace fundus::augment {

void TransformSpec::validate() const {
  auto non_negative = [](double v, const char* name) {
    if (!(v >= 0.0)) throw Error(std::string("transform spec: ") + name + " must be non-negative");
  };
  non_negative(rotation_max_deg, "rotation_max_deg");
  non_negative(translate_max_px, "translate_max_px");
  non_negative(hue_max_deg, "hue_max_deg");
  non_negative(value_max, "value_max");
  non_negative(brightness_max, "brightness_max");
  non_negative(contrast_max, "contrast_max");
  non_negative(perspective_max, "perspective_max");
  if (reference_size < 0) throw Error("transform spec: reference_size must be non-negative");
  if (!(scale_max >= 0.0 && scale_max < 1.0)) throw Error("transform spec: scale_max must lie in [0, 1)");
  if (!(saturation_lo <= saturation_hi)) throw Error("transform spec: saturation range is reversed");
  if (saturation_lo < -1.0 || value_max > 1.0 || brightness_max > 1.0 || contrast_max > 1.0)
    throw Error("transform spec: colour factors would become negative");
  if (!(apply_probability >= 0.0 && apply_probability <= 1.0))
    throw Error("transform spec: apply_probability must lie in [0, 1]");
}

TransformSpec localizer_recipe() {
  TransformSpec s;
  s.rotation_max_deg = 20;
  s.translate_max_px = 100;
  s.reference_size = 0;  // set from the native width by the caller
  s.scale_max = 0.2;
  s.hue_max_deg = 10;
  s.saturation_lo = -0.2;
  s.saturation_hi = 0.5;
  s.value_max = 0.3;
  s.horizontal_flip = s.vertical_flip = true;
  return s;
}

TransformSpec segmenter_recipe() {
  TransformSpec s = localizer_recipe();
  s.translate_max_px = 60;
  s.reference_size = 500;
  return s;
}

TransformSpec classifier_recipe() {
  TransformSpec s;
  s.rotation_max_deg = 20;
  s.translate_max_px = 60;
  s.reference_size = 500;
  s.scale_max = 0.2;
  s.brightness_max = 0.1;
  s.contrast_max = 0.1;
  s.saturation_lo = -0.1;
  s.saturation_hi = 0.1;
  s.hue_max_deg = 10;
  s.grey_scale = true;
  s.perspective = true;
  s.horizontal_flip = s.vertical_flip = true;
  s.random_order = true;
  return s;
}

bool ConcreteTransform::geometric_identity() const {
  return !perspective && affine == cv::Matx23d(1, 0, 0, 0, 1, 0);
}

bool ConcreteTransform::color_identity() const {
  return hue_shift_deg == 0.0 && saturation_factor == 1.0 && value_factor == 1.0 && brightness_factor == 1.0 &&
         contrast_factor == 1.0 && !grey;
}

ConcreteTransform identity_transform(Extent frame) {
  ConcreteTransform t;
  t.frame = frame;
  return t;
}

ConcreteTransform sample_transform(const TransformSpec& spec, std::uint64_t seed, Extent frame) {
  spec.validate();
  if (frame.width <= 0 || frame.height <= 0) throw Error("sample_transform: empty frame");
  std::mt19937_64 rng(seed);
  auto coin = [&] { return uniform(rng, 0.0, 1.0) < spec.apply_probability; };
  auto sym = [&](double m) { return uniform(rng, -m, m); };

  ConcreteTransform t = identity_transform(frame);
  t.seed = seed;
  const double w = frame.width, h = frame.height;

  if (spec.rotation_max_deg > 0 && coin()) t.rotation_deg = sym(spec.rotation_max_deg);
  if (spec.translate_max_px > 0 && coin()) {
    const double k = spec.reference_size > 0 ? w / spec.reference_size : 1.0;
    t.translate_x = sym(spec.translate_max_px) * k;
    t.translate_y = sym(spec.translate_max_px) * k;
  }
  if (spec.scale_max > 0 && coin()) t.scale = 1.0 + sym(spec.scale_max);
  if (spec.horizontal_flip && coin()) t.hflip = true;
  if (spec.vertical_flip && coin()) t.vflip = true;

  const cv::Point2d centre((w - 1) / 2.0, (h - 1) / 2.0);
  cv::Mat rs = cv::getRotationMatrix2D(centre, t.rotation_deg, t.scale);
  cv::Matx33d m(rs.at<double>(0, 0), rs.at<double>(0, 1), rs.at<double>(0, 2) + t.translate_x,
                rs.at<double>(1, 0), rs.at<double>(1, 1), rs.at<double>(1, 2) + t.translate_y, 0, 0, 1);
  if (t.hflip) m = cv::Matx33d(-1, 0, w - 1, 0, 1, 0, 0, 0, 1) * m;
  if (t.vflip) m = cv::Matx33d(1, 0, 0, 0, -1, h - 1, 0, 0, 1) * m;
  const bool any_geometry = t.rotation_deg != 0.0 || t.scale != 1.0 || t.translate_x != 0.0 ||
                            t.translate_y != 0.0 || t.hflip || t.vflip;
  if (any_geometry) t.affine = cv::Matx23d(m(0, 0), m(0, 1), m(0, 2), m(1, 0), m(1, 1), m(1, 2));

  if (spec.perspective && coin()) {
    const double dx = spec.perspective_max * w / 2, dy = spec.perspective_max * h / 2;
    const cv::Point2f src[4] = {{0, 0}, {float(w - 1), 0}, {float(w - 1), float(h - 1)}, {0, float(h - 1)}};
    cv::Point2f dst[4];
    const int sx[4] = {1, -1, -1, 1}, sy[4] = {1, 1, -1, -1};
    for (int i = 0; i < 4; ++i)
      dst[i] = {src[i].x + float(sx[i] * uniform(rng, 0, dx)), src[i].y + float(sy[i] * uniform(rng, 0, dy))};
    cv::Mat p = cv::getPerspectiveTransform(src, dst);
    t.perspective = cv::Matx33d(p.ptr<double>());
  }

  if (spec.hue_max_deg > 0 && coin()) {
    t.hue_shift_deg = sym(spec.hue_max_deg);
    t.color_order.push_back(ColorOp::hue);
  }
  if (spec.saturation_hi > spec.saturation_lo && coin()) {
    t.saturation_factor = 1.0 + uniform(rng, spec.saturation_lo, spec.saturation_hi);
    t.color_order.push_back(ColorOp::saturation);
  }
  if (spec.value_max > 0 && coin()) {
    t.value_factor = 1.0 + sym(spec.value_max);
    t.color_order.push_back(ColorOp::value);
  }
  if (spec.brightness_max > 0 && coin()) {
    t.brightness_factor = 1.0 + sym(spec.brightness_max);
    t.color_order.push_back(ColorOp::brightness);
  }
  if (spec.contrast_max > 0 && coin()) {
    t.contrast_factor = 1.0 + sym(spec.contrast_max);
    t.color_order.push_back(ColorOp::contrast);
  }
  if (spec.grey_scale && coin()) {
    t.grey = true;
    t.color_order.push_back(ColorOp::grey);
  }
  if (spec.random_order)
    for (std::size_t i = t.color_order.size(); i > 1; --i) std::swap(t.color_order[i - 1], t.color_order[rng() % i]);
  return t;
}

namespace {

void check_frame(const ConcreteTransform& t, const cv::Mat& m, const char* what) {
  if (extent_of(m) != t.frame)
    throw Error(std::string(what) + ": target is " + std::to_string(m.cols) + "x" + std::to_string(m.rows) +
                " but the transform was sampled for " + std::to_string(t.frame.width) + "x" +
                std::to_string(t.frame.height));
}

cv::Mat warp(const ConcreteTransform& t, const cv::Mat& src, int interp, const cv::Scalar& fill) {
  if (t.geometric_identity()) return src.clone();
  cv::Mat out;
  cv::warpAffine(src, out, cv::Mat(t.affine), src.size(), interp, cv::BORDER_CONSTANT, fill);
  if (t.perspective) {
    cv::Mat tmp;
    cv::warpPerspective(out, tmp, cv::Mat(*t.perspective), src.size(), interp, cv::BORDER_CONSTANT, fill);
    out = tmp;
  }
  return out;
}

void apply_hsv(cv::Mat& img, int channel, double factor, double shift) {
  cv::Mat hsv;
  cv::cvtColor(img, hsv, cv::COLOR_BGR2HSV);
  for (int y = 0; y < hsv.rows; ++y) {
    auto* row = hsv.ptr<cv::Vec3f>(y);
    for (int x = 0; x < hsv.cols; ++x) {
      if (channel == 0) {
        float hue = row[x][0] + static_cast<float>(shift);
        hue = std::fmod(hue, 360.0f);
        if (hue < 0) hue += 360.0f;
        row[x][0] = hue;
      } else {
        row[x][channel] = std::clamp(row[x][channel] * static_cast<float>(factor), 0.0f, 1.0f);
      }
    }
  }
  cv::cvtColor(hsv, img, cv::COLOR_HSV2BGR);
}

}  // namespace

cv::Mat apply_to_image(const ConcreteTransform& t, const cv::Mat& bgr) {
  if (bgr.type() != CV_8UC3) throw Error("apply_to_image expects an 8-bit BGR image");
  check_frame(t, bgr, "apply_to_image");
  cv::Mat out = warp(t, bgr, cv::INTER_LINEAR, cv::Scalar::all(0));
  if (t.color_identity()) return out;
  cv::Mat f;
  out.convertTo(f, CV_32FC3, 1.0 / 255.0);
  for (ColorOp op : t.color_order) {
    switch (op) {
      case ColorOp::hue: apply_hsv(f, 0, 1.0, t.hue_shift_deg); break;
      case ColorOp::saturation: apply_hsv(f, 1, t.saturation_factor, 0.0); break;
      case ColorOp::value: apply_hsv(f, 2, t.value_factor, 0.0); break;
      case ColorOp::brightness: f *= t.brightness_factor; break;
      case ColorOp::contrast: {
        cv::Mat grey;
        cv::cvtColor(f, grey, cv::COLOR_BGR2GRAY);
        const double mean = cv::mean(grey)[0];
        f = (f - cv::Scalar::all(mean)) * t.contrast_factor + cv::Scalar::all(mean);
        break;
      }
      case ColorOp::grey: {
        cv::Mat grey;
        cv::cvtColor(f, grey, cv::COLOR_BGR2GRAY);
        cv::cvtColor(grey, f, cv::COLOR_GRAY2BGR);
        break;
      }
    }
    cv::Mat lower_clamped = cv::max(f, 0.0);
    f = cv::min(lower_clamped, 1.0);
  }
  f.convertTo(out, CV_8UC3, 255.0);
  return out;
}

cv::Mat apply_to_map(const ConcreteTransform& t, const cv::Mat& map) {
  check_frame(t, map, "apply_to_map");
  return warp(t, map, cv::INTER_LINEAR, cv::Scalar::all(0));
}

cv::Mat apply_to_labels(const ConcreteTransform& t, const cv::Mat& labels, std::uint8_t fill) {
  check_frame(t, labels, "apply_to_labels");
  return warp(t, labels, cv::INTER_NEAREST, cv::Scalar::all(fill));
}

Point2 apply_to_point(const ConcreteTransform& t, Point2 p) {
  const cv::Matx23d& a = t.affine;
  double x = a(0, 0) * p.x + a(0, 1) * p.y + a(0, 2);
  double y = a(1, 0) * p.x + a(1, 1) * p.y + a(1, 2);
  if (t.perspective) {
    const cv::Matx33d& m = *t.perspective;
    const double wz = m(2, 0) * x + m(2, 1) * y + m(2, 2);
    const double nx = (m(0, 0) * x + m(0, 1) * y + m(0, 2)) / wz;
    const double ny = (m(1, 0) * x + m(1, 1) * y + m(1, 2)) / wz;
    x = nx;
    y = ny;
  }
  return {x, y};
}

Sample apply(const ConcreteTransform& t, const Sample& in, std::uint8_t label_fill) {
  Sample out;
  out.image = apply_to_image(t, in.image);
  for (const auto& m : in.maps) out.maps.push_back(apply_to_map(t, m));
  for (const auto& m : in.label_masks) out.label_masks.push_back(apply_to_labels(t, m, label_fill));
  for (const auto& p : in.points) out.points.push_back(apply_to_point(t, p));
  return out;
}

cv::Mat invert_geometric(const ConcreteTransform& t, const cv::Mat& map) {
  if (t.perspective) throw Error("invert_geometric: perspective transforms are not inverted");
  check_frame(t, map, "invert_geometric");
  if (t.geometric_identity()) return map.clone();
  std::vector<cv::Mat> planes, restored;
  cv::split(map, planes);
  for (const auto& p : planes) {
    cv::Mat r;
    cv::warpAffine(p, r, cv::Mat(t.affine), p.size(), cv::INTER_LINEAR | cv::WARP_INVERSE_MAP, cv::BORDER_REPLICATE);
    restored.push_back(r);
  }
  cv::Mat out;
  cv::merge(restored, out);
  return out;
}

Tensor tta_predict(const Predictor& model, const cv::Mat& image, std::span<const Renderer> renderings,
                   const TransformSpec& spec, const TtaConfig& config, TtaMode mode, TtaTrace* trace) {
  if (config.n_transforms < 1) throw Error("tta: n_transforms must be at least 1");
  if (renderings.empty()) throw Error("tta: no domain renderings");
  const bool seg = mode == TtaMode::segmentation;
  if (seg && !spec.invertible()) throw Error("tta: segmentation mode needs an invertible transform spec");
  TtaTrace local;
  TtaTrace& tr = trace ? *trace : local;
  const Extent frame = extent_of(image);

  Tensor sum;
  int members = 0;
  for (std::size_t d = 0; d < renderings.size(); ++d) {
    cv::Mat rendered = renderings[d](image);
    tr.ops.push_back("render");
    if (extent_of(rendered) != frame || rendered.type() != image.type())
      throw Error("tta: a domain rendering changed the image shape");
    for (int k = 0; k < config.n_transforms; ++k) {
      const ConcreteTransform t =
          k == 0 ? identity_transform(frame)
                 : sample_transform(spec, mix_seed(config.seed, d * 1000003ULL + static_cast<std::uint64_t>(k)), frame);
      Tensor out = model(apply_to_image(t, rendered));
      ++tr.forwards;
      tr.ops.push_back("forward");
      if (seg) {
        if (out.rank() != 4 || out.dim(0) != 1 || out.dim(2) != frame.height || out.dim(3) != frame.width)
          throw Error("tta: segmentation output has shape " + shape_str(out.shape()));
        if (!t.geometric_identity()) {
          const int hw = frame.height * frame.width;
          for (int c = 0; c < out.dim(1); ++c) {
            cv::Mat plane(frame.height, frame.width, CV_32F, out.data() + static_cast<std::size_t>(c) * hw);
            invert_geometric(t, plane).copyTo(plane);
          }
          ++tr.inversions;
          tr.ops.push_back("invert");
        }
      } else if (out.rank() != 2 || out.dim(0) != 1) {
        throw Error("tta: classification output has shape " + shape_str(out.shape()));
      }
      for (float v : out.values())
        if (!std::isfinite(v)) throw Error("tta: model produced a non-finite output");
      if (sum.empty()) {
        sum = std::move(out);
      } else {
        if (!sum.same_shape(out)) throw Error("tta: members disagree on the output shape");
        for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += out[i];
      }
      ++members;
      tr.ops.push_back("accumulate");
    }
  }
  for (auto& v : sum.values()) v /= static_cast<float>(members);
  tr.members = members;
  const int channels = sum.dim(1);
  const int plane = seg ? sum.dim(2) * sum.dim(3) : 1;
  Tensor probs(sum.shape());
  kernels::softmax_channels(1, channels, plane, sum.values(), probs.values());
  tr.ops.push_back("softmax");
  return probs;
}

}  // namespace fundus::augment
