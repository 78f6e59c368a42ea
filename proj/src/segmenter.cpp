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

#include "fundus/segmenter.hpp"

#include <algorithm>
#include <cstring>

#include <opencv2/imgproc.hpp>

#include "fundus/log.hpp"

namespace fundus::segmenter {

using nn::Var;

void SegConfig::validate() const {
  if (depth < 1 || base_channels < 1) throw Error("segmenter: depth and base_channels must be positive");
  if (input_size < 1 || input_size % (1 << depth) != 0)
    throw Error("segmenter: input size " + std::to_string(input_size) + " must be divisible by " +
                std::to_string(1 << depth));
  if (!(learning_rate > 0.0) || !(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0) || lr_decay_every < 1)
    throw Error("segmenter: invalid learning-rate schedule");
  if (early_stop_patience < 1 || batch_size < 1 || max_epochs < 1)
    throw Error("segmenter: patience, batch size and epochs must be positive");
}

nlohmann::json to_json(const SegConfig& c) {
  return {{"input_size", c.input_size},         {"base_channels", c.base_channels},
          {"depth", c.depth},                   {"learning_rate", c.learning_rate},
          {"lr_decay_factor", c.lr_decay_factor}, {"lr_decay_every", c.lr_decay_every},
          {"early_stop_patience", c.early_stop_patience}, {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},         {"postprocess", c.postprocess}};
}

SegConfig seg_config_from_json(const nlohmann::json& j) {
  SegConfig c;
  c.input_size = j.at("input_size");
  c.base_channels = j.at("base_channels");
  c.depth = j.at("depth");
  c.learning_rate = j.at("learning_rate");
  c.lr_decay_factor = j.at("lr_decay_factor");
  c.lr_decay_every = j.at("lr_decay_every");
  c.early_stop_patience = j.at("early_stop_patience");
  c.batch_size = j.at("batch_size");
  c.max_epochs = j.at("max_epochs");
  c.postprocess = j.at("postprocess");
  c.validate();
  return c;
}

UNet::DoubleConv::DoubleConv(int in, int out, std::mt19937_64& rng) {
  a = register_module("a", std::make_shared<nn::Conv2d>(in, out, 3, 1, 1, rng));
  b = register_module("b", std::make_shared<nn::Conv2d>(out, out, 3, 1, 1, rng));
}

Var UNet::DoubleConv::forward(const Var& x) const { return nn::relu(b->forward(nn::relu(a->forward(x)))); }

UNet::UNet(const SegConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  int ch = cfg_.base_channels, in = 3;
  for (int l = 0; l < cfg_.depth; ++l) {
    down_.push_back(register_module("down" + std::to_string(l), std::make_shared<DoubleConv>(in, ch, rng)));
    in = ch;
    ch *= 2;
  }
  bottom_ = register_module("bottom", std::make_shared<DoubleConv>(in, ch, rng));
  for (int l = cfg_.depth - 1; l >= 0; --l) {
    const int skip = cfg_.base_channels << l;
    up_conv_.push_back(register_module("upconv" + std::to_string(l), std::make_shared<nn::Conv2d>(ch, skip, 3, 1, 1, rng)));
    up_.push_back(register_module("up" + std::to_string(l), std::make_shared<DoubleConv>(2 * skip, skip, rng)));
    ch = skip;
  }
  classify_ = register_module("classify", std::make_shared<nn::Conv2d>(ch, kSegClasses, 1, 1, 0, rng));
}

Var UNet::forward(const Var& x) const {
  if (x->value.rank() != 4 || x->value.dim(1) != 3 || x->value.dim(2) != cfg_.input_size ||
      x->value.dim(3) != cfg_.input_size)
    throw Error("unet expects [N, 3, " + std::to_string(cfg_.input_size) + ", " + std::to_string(cfg_.input_size) +
                "], got " + shape_str(x->shape()));
  std::vector<Var> skips;
  Var h = x;
  for (const auto& d : down_) {
    h = d->forward(h);
    skips.push_back(h);
    h = nn::maxpool2d(h, 2, 2);
  }
  h = bottom_->forward(h);
  for (std::size_t i = 0; i < up_.size(); ++i) {
    h = nn::relu(up_conv_[i]->forward(nn::upsample_nearest(h, 2)));
    const Var parts[2] = {skips[skips.size() - 1 - i], h};
    h = up_[i]->forward(nn::concat_channels(parts));
  }
  return classify_->forward(h);
}

SegSample make_seg_sample(const cv::Mat& roi, const SegMask& roi_mask, int input_size) {
  if (extent_of(roi) != roi_mask.extent()) throw Error("make_seg_sample: ROI and mask sizes differ");
  if (!labels_in_alphabet(roi_mask.labels)) throw Error("make_seg_sample: mask has labels outside the class alphabet");
  return {resize_linear(roi, input_size, input_size), resize_nearest(roi_mask.labels, input_size, input_size)};
}

namespace {

struct Batch {
  Tensor images;
  std::vector<std::uint8_t> labels;
};

Batch make_batch(const std::vector<SegSample>& samples, std::span<const std::size_t> idx, int s,
                 const augment::TransformSpec* spec, std::mt19937_64& rng) {
  std::vector<Tensor> images;
  std::vector<std::uint8_t> labels;
  labels.reserve(idx.size() * s * s);
  for (std::size_t i : idx) {
    augment::Sample in{samples[i].image, {}, {samples[i].labels}, {}};
    if (spec) in = augment::apply(augment::sample_transform(*spec, rng(), {s, s}), in,
                                  static_cast<std::uint8_t>(SegClass::background));
    images.push_back(image_to_tensor(in.image).reshaped({3, s, s}));
    const cv::Mat& lab = in.label_masks[0];
    for (int y = 0; y < s; ++y) labels.insert(labels.end(), lab.ptr<std::uint8_t>(y), lab.ptr<std::uint8_t>(y) + s);
  }
  return {stack(images), std::move(labels)};
}

}  // namespace

nn::TrainingHistory train_segmenter(UNet& model, const std::vector<SegSample>& train,
                                    const std::vector<SegSample>& val, std::uint64_t seed,
                                    const augment::TransformSpec& spec) {
  const SegConfig& cfg = model.config();
  for (const auto* set : {&train, &val})
    for (const auto& s : *set) {
      if (s.image.rows != cfg.input_size || s.image.cols != cfg.input_size || s.labels.size() != s.image.size())
        throw Error("segmenter samples must be resized to the network input");
      if (!labels_in_alphabet(s.labels)) throw Error("segmenter: mask labels outside the class alphabet");
    }
  auto loss_for = [&model](const std::vector<SegSample>& samples, const augment::TransformSpec* aug) {
    return [&model, &samples, aug](std::span<const std::size_t> idx, std::mt19937_64& rng, bool training) {
      Batch b = make_batch(samples, idx, model.config().input_size, training ? aug : nullptr, rng);
      return nn::pixel_cross_entropy(model.forward(nn::constant(std::move(b.images))), b.labels);
    };
  };
  nn::FitOptions opt;
  opt.name = "segmenter";
  opt.max_epochs = cfg.max_epochs;
  opt.batch_size = cfg.batch_size;
  opt.schedule = {cfg.learning_rate, cfg.lr_decay_factor, cfg.lr_decay_every};
  opt.patience = cfg.early_stop_patience;
  opt.seed = seed;
  return nn::fit(model, train.size(), val.size(), loss_for(train, &spec), loss_for(val, nullptr), opt);
}

namespace {

cv::Mat largest_component(const cv::Mat& binary) {
  cv::Mat cc, stats, centroids;
  const int n = cv::connectedComponentsWithStats(binary, cc, stats, centroids, 8, CV_32S);
  cv::Mat out(binary.size(), CV_8U, cv::Scalar(0));
  if (n <= 1) return out;
  int best = 1;
  for (int i = 2; i < n; ++i)
    if (stats.at<int>(i, cv::CC_STAT_AREA) > stats.at<int>(best, cv::CC_STAT_AREA)) best = i;
  cv::compare(cc, best, out, cv::CMP_EQ);
  return out;
}

}  // namespace

cv::Mat postprocess(const cv::Mat& labels) {
  const SegMask m{labels, MaskResolution::roi_network};
  const cv::Mat support = largest_component(disc_or_cup_region(m));
  cv::Mat cup = class_region(m, SegClass::cup) & support;
  cup = largest_component(cup);
  cv::Mat out(labels.size(), CV_8U, cv::Scalar(static_cast<int>(SegClass::background)));
  out.setTo(static_cast<int>(SegClass::disc), support);
  out.setTo(static_cast<int>(SegClass::cup), cup);
  return out;
}

Segmentation segment(const UNet& model, const cv::Mat& roi, std::span<const augment::Renderer> renderings,
                     const augment::TtaConfig& tta, const data::CropRecord& record,
                     const augment::TransformSpec& spec) {
  if (model.is_training()) throw Error("segment: model must be in eval mode");
  if (roi.rows != record.size || roi.cols != record.size) throw Error("segment: ROI does not match its crop record");
  const int s = model.config().input_size;
  const augment::Predictor predict = [&model](const cv::Mat& img) {
    nn::NoGradGuard guard;
    return model.forward(nn::constant(image_to_tensor(img)))->value;
  };
  Segmentation out;
  out.probabilities = augment::tta_predict(predict, resize_linear(roi, s, s), renderings, spec, tta,
                                           augment::TtaMode::segmentation);
  cv::Mat labels(s, s, CV_8U);
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * s + x;
      int best = 0;
      for (int c = 1; c < kSegClasses; ++c)
        if (out.probabilities[c * plane + p] > out.probabilities[best * plane + p]) best = c;
      labels.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(best);
    }
  if (model.config().postprocess) labels = postprocess(labels);
  out.roi = {resize_nearest(labels, roi.cols, roi.rows), MaskResolution::roi};
  cv::Mat canvas(record.native.height, record.native.width, CV_8U,
                 cv::Scalar(static_cast<int>(SegClass::background)));
  data::paste_back(out.roi.labels, record, canvas);
  out.native = {canvas, MaskResolution::native};
  out.empty_disc = cv::countNonZero(disc_or_cup_region(out.roi)) == 0;
  return out;
}

namespace {

int vertical_diameter(const cv::Mat& region) {
  int best = 0;
  for (int x = 0; x < region.cols; ++x) {
    int top = -1, bottom = -1;
    for (int y = 0; y < region.rows; ++y)
      if (region.at<std::uint8_t>(y, x)) {
        if (top < 0) top = y;
        bottom = y;
      }
    if (top >= 0) best = std::max(best, bottom - top + 1);
  }
  return best;
}

}  // namespace

CdrValue compute_cdr(const SegMask& mask) {
  CdrValue v;
  v.vertical_disc_diameter = vertical_diameter(disc_or_cup_region(mask));
  if (v.vertical_disc_diameter == 0) throw Error("compute_cdr: empty disc");
  v.vertical_cup_diameter = vertical_diameter(class_region(mask, SegClass::cup));
  v.ratio = static_cast<double>(v.vertical_cup_diameter) / v.vertical_disc_diameter;
  return v;
}

void save_segmenter(const UNet& model, const nn::TrainingHistory& history, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  nn::save_parameters(model, path);
  nn::write_sidecar(path, to_json(model.config()), history);
}

std::unique_ptr<UNet> load_segmenter(const std::filesystem::path& path) {
  auto model = std::make_unique<UNet>(seg_config_from_json(nn::read_sidecar(path).at("config")), 0);
  nn::load_parameters(*model, path);
  model->eval();
  return model;
}

}  // namespace fundus::segmenter
