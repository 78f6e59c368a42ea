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

#include "fundus/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "fundus/log.hpp"

namespace fundus::heatmap {

using nn::Var;

cv::Mat encode_heatmap(Point2 p, int size, double variance) {
  if (size <= 0) throw Error("encode_heatmap: size must be positive");
  if (!(variance > 0.0)) throw Error("encode_heatmap: variance must be positive");
  if (!(p.x >= 0 && p.y >= 0 && p.x <= size - 1 && p.y <= size - 1))
    throw Error("encode_heatmap: point (" + std::to_string(p.x) + ", " + std::to_string(p.y) + ") outside the " +
                std::to_string(size) + " px frame");
  const double cx = std::round(p.x), cy = std::round(p.y);
  cv::Mat m(size, size, CV_32F);
  for (int r = 0; r < size; ++r) {
    float* row = m.ptr<float>(r);
    for (int c = 0; c < size; ++c)
      row[c] = static_cast<float>(std::exp(-((c - cx) * (c - cx) + (r - cy) * (r - cy)) / (2.0 * variance)));
  }
  return m;
}

Peak decode_heatmap(const cv::Mat& map) {
  if (map.empty() || map.type() != CV_32F) throw Error("decode_heatmap expects a non-empty CV_32F map");
  Peak best;
  best.value = map.at<float>(0, 0);
  float lowest = best.value;
  for (int r = 0; r < map.rows; ++r) {
    const float* row = map.ptr<float>(r);
    for (int c = 0; c < map.cols; ++c) {
      if (row[c] > best.value) {
        best.value = row[c];
        best.location = {double(c), double(r)};
      }
      lowest = std::min(lowest, row[c]);
    }
  }
  if (lowest == best.value) {
    best.degenerate = true;
    best.location = {0, 0};
  }
  return best;
}

HeatmapPair encode_pair(Point2 cup, Point2 fovea, int size, double variance) {
  return {encode_heatmap(cup, size, variance), encode_heatmap(fovea, size, variance)};
}

void HourglassConfig::validate() const {
  if (stacks < 1) throw Error("hourglass: stacks must be at least 1");
  if (!(spatial_dropout_rate >= 0.0f && spatial_dropout_rate < 1.0f))
    throw Error("hourglass: spatial dropout rate must lie in [0, 1)");
  if (output_channels != 2) throw Error("hourglass: output_channels must be 2 (cup, fovea)");
  if (!(learning_rate > 0.0) || !(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0) || lr_decay_every < 1)
    throw Error("hourglass: invalid learning-rate schedule");
  if (early_stop_patience < 1 || batch_size < 1 || max_epochs < 1 || channels < 1 || depth < 1)
    throw Error("hourglass: patience, batch size, epochs, channels and depth must be positive");
  if (!(gaussian_variance > 0.0)) throw Error("hourglass: gaussian variance must be positive");
  if (trunk_stride != 1 && trunk_stride != 2 && trunk_stride != 4) throw Error("hourglass: trunk_stride must be 1, 2 or 4");
  if (input_size % (trunk_stride << depth) != 0)
    throw Error("hourglass: input size " + std::to_string(input_size) + " is not divisible by " +
                std::to_string(trunk_stride << depth));
}

nlohmann::json to_json(const HourglassConfig& c) {
  return {{"stacks", c.stacks},
          {"spatial_dropout_rate", c.spatial_dropout_rate},
          {"input_size", c.input_size},
          {"output_channels", c.output_channels},
          {"learning_rate", c.learning_rate},
          {"lr_decay_factor", c.lr_decay_factor},
          {"lr_decay_every", c.lr_decay_every},
          {"early_stop_patience", c.early_stop_patience},
          {"batch_size", c.batch_size},
          {"gaussian_variance", c.gaussian_variance},
          {"max_epochs", c.max_epochs},
          {"channels", c.channels},
          {"depth", c.depth},
          {"trunk_stride", c.trunk_stride}};
}

HourglassConfig hourglass_config_from_json(const nlohmann::json& j) {
  HourglassConfig c;
  c.stacks = j.at("stacks");
  c.spatial_dropout_rate = j.at("spatial_dropout_rate");
  c.input_size = j.at("input_size");
  c.output_channels = j.at("output_channels");
  c.learning_rate = j.at("learning_rate");
  c.lr_decay_factor = j.at("lr_decay_factor");
  c.lr_decay_every = j.at("lr_decay_every");
  c.early_stop_patience = j.at("early_stop_patience");
  c.batch_size = j.at("batch_size");
  c.gaussian_variance = j.at("gaussian_variance");
  c.max_epochs = j.at("max_epochs");
  c.channels = j.at("channels");
  c.depth = j.at("depth");
  c.trunk_stride = j.at("trunk_stride");
  c.validate();
  return c;
}

Residual::Residual(int in, int out, std::mt19937_64& rng) {
  conv1_ = register_module("conv1", std::make_shared<nn::Conv2d>(in, out, 3, 1, 1, rng));
  conv2_ = register_module("conv2", std::make_shared<nn::Conv2d>(out, out, 3, 1, 1, rng));
  if (in != out) skip_ = register_module("skip", std::make_shared<nn::Conv2d>(in, out, 1, 1, 0, rng));
  // Damped residual branch keeps activations bounded through deep stacks without normalisation.
  for (auto& v : conv2_->weight()->value.values()) v *= 0.1f;
}

Var Residual::forward(const Var& x) const {
  Var y = conv2_->forward(nn::relu(conv1_->forward(x)));
  return nn::relu(nn::add(y, skip_ ? skip_->forward(x) : x));
}

Hourglass::Hourglass(int depth, int channels, std::mt19937_64& rng) {
  up_ = register_module("up", std::make_shared<Residual>(channels, channels, rng));
  low1_ = register_module("low1", std::make_shared<Residual>(channels, channels, rng));
  if (depth > 1)
    inner_ = register_module("inner", std::make_shared<Hourglass>(depth - 1, channels, rng));
  else
    bottom_ = register_module("bottom", std::make_shared<Residual>(channels, channels, rng));
  low3_ = register_module("low3", std::make_shared<Residual>(channels, channels, rng));
}

Var Hourglass::forward(const Var& x) const {
  Var up = up_->forward(x);
  Var low = low1_->forward(nn::maxpool2d(x, 2, 2));
  low = inner_ ? inner_->forward(low) : bottom_->forward(low);
  low = low3_->forward(low);
  return nn::add(up, nn::upsample_nearest(low, 2));
}

StackedHourglass::Stem::Stem(const HourglassConfig& cfg, std::mt19937_64& rng) {
  const int stride = cfg.trunk_stride >= 2 ? 2 : 1;
  pool = cfg.trunk_stride == 4 ? 2 : 1;
  conv = register_module("conv", std::make_shared<nn::Conv2d>(3, cfg.channels, 7, stride, 3, rng));
  res = register_module("res", std::make_shared<Residual>(cfg.channels, cfg.channels, rng));
}

Var StackedHourglass::Stem::forward(const Var& x) const {
  Var y = res->forward(nn::relu(conv->forward(x)));
  return pool > 1 ? nn::maxpool2d(y, pool, pool) : y;
}

StackedHourglass::Stage::Stage(const HourglassConfig& cfg, bool last, std::mt19937_64& rng) {
  const int ch = cfg.channels;
  hg = register_module("hourglass", std::make_shared<Hourglass>(cfg.depth, ch, rng));
  res = register_module("res", std::make_shared<Residual>(ch, ch, rng));
  features = register_module("features", std::make_shared<nn::Conv2d>(ch, ch, 1, 1, 0, rng));
  head = register_module("head", std::make_shared<nn::Conv2d>(ch, cfg.output_channels, 1, 1, 0, rng));
  for (auto& v : head->weight()->value.values()) v *= 0.1f;
  if (!last) {
    merge_features = register_module("merge_features", std::make_shared<nn::Conv2d>(ch, ch, 1, 1, 0, rng));
    merge_head = register_module("merge_head", std::make_shared<nn::Conv2d>(cfg.output_channels, ch, 1, 1, 0, rng));
  }
}

StackedHourglass::StackedHourglass(const HourglassConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  stem_ = register_module("stem", std::make_shared<Stem>(cfg_, rng));
  for (int s = 0; s < cfg_.stacks; ++s)
    stages_.push_back(register_module("stack" + std::to_string(s),
                                      std::make_shared<Stage>(cfg_, s + 1 == cfg_.stacks, rng)));
}

std::vector<Var> StackedHourglass::forward(const Var& x, std::mt19937_64* rng) const {
  if (x->value.rank() != 4 || x->value.dim(1) != 3 || x->value.dim(2) != cfg_.input_size ||
      x->value.dim(3) != cfg_.input_size)
    throw Error("hourglass expects [N, 3, " + std::to_string(cfg_.input_size) + ", " +
                std::to_string(cfg_.input_size) + "], got " + shape_str(x->shape()));
  const bool dropout = is_training() && rng && cfg_.spatial_dropout_rate > 0.0f;
  Var h = stem_->forward(x);
  std::vector<Var> outputs;
  for (const auto& st : stages_) {
    Var y = st->res->forward(st->hg->forward(h));
    Var feat = nn::relu(st->features->forward(y));
    if (dropout) feat = nn::dropout2d(feat, cfg_.spatial_dropout_rate, *rng);
    Var heat = st->head->forward(feat);
    outputs.push_back(cfg_.trunk_stride > 1 ? nn::upsample_bilinear(heat, cfg_.trunk_stride) : heat);
    if (st->merge_features) h = nn::add(h, nn::add(st->merge_features->forward(feat), st->merge_head->forward(heat)));
  }
  return outputs;
}

LocalizerSample make_localizer_sample(const data::FundusImage& img, int input_size) {
  if (!img.fovea || !img.cup_center) throw Error("localizer sample " + img.id + " needs a fovea and a cup mask");
  const Extent net{input_size, input_size};
  return {resize_linear(img.pixels, input_size, input_size), data::map_coords(*img.cup_center, img.extent(), net),
          data::map_coords(*img.fovea, img.extent(), net), img.extent().width};
}

namespace {

struct Batch {
  Tensor images;
  Tensor targets;
};

Batch make_batch(const std::vector<LocalizerSample>& samples, std::span<const std::size_t> idx,
                 const HourglassConfig& cfg, const augment::TransformSpec* spec, std::mt19937_64& rng) {
  const int s = cfg.input_size;
  std::vector<Tensor> images, targets;
  for (std::size_t i : idx) {
    const LocalizerSample& smp = samples[i];
    const HeatmapPair pair = encode_pair(smp.cup, smp.fovea, s, cfg.gaussian_variance);
    augment::Sample in{smp.image, {pair.cup, pair.fovea}, {}, {}};
    if (spec) {
      augment::TransformSpec local = *spec;
      if (local.reference_size == 0) local.reference_size = smp.native_width;
      in = augment::apply(augment::sample_transform(local, rng(), {s, s}), in);
    }
    images.push_back(image_to_tensor(in.image).reshaped({3, s, s}));
    Tensor t({2, s, s});
    for (int c = 0; c < 2; ++c) std::memcpy(t.data() + static_cast<std::size_t>(c) * s * s, in.maps[c].ptr<float>(), sizeof(float) * s * s);
    targets.push_back(std::move(t));
  }
  return {stack(images), stack(targets)};
}

}  // namespace

nn::TrainingHistory train_localizer(StackedHourglass& model, const std::vector<LocalizerSample>& train,
                                    const std::vector<LocalizerSample>& val, std::uint64_t seed,
                                    const augment::TransformSpec& spec) {
  const HourglassConfig& cfg = model.config();
  for (const auto* set : {&train, &val})
    for (const auto& s : *set)
      if (s.image.rows != cfg.input_size || s.image.cols != cfg.input_size)
        throw Error("localizer samples must be resized to the network input");
  auto loss_for = [&model](const std::vector<LocalizerSample>& samples, const augment::TransformSpec* aug) {
    return [&model, &samples, aug](std::span<const std::size_t> idx, std::mt19937_64& rng, bool training) {
      Batch b = make_batch(samples, idx, model.config(), training ? aug : nullptr, rng);
      const auto outs = model.forward(nn::constant(std::move(b.images)), training ? &rng : nullptr);
      Var total = nn::mse_loss(outs[0], b.targets);
      for (std::size_t k = 1; k < outs.size(); ++k) total = nn::add(total, nn::mse_loss(outs[k], b.targets));
      return total;
    };
  };
  nn::FitOptions opt;
  opt.name = "localizer";
  opt.max_epochs = cfg.max_epochs;
  opt.batch_size = cfg.batch_size;
  opt.schedule = {cfg.learning_rate, cfg.lr_decay_factor, cfg.lr_decay_every};
  opt.patience = cfg.early_stop_patience;
  opt.seed = seed;
  return nn::fit(model, train.size(), val.size(), loss_for(train, &spec), loss_for(val, nullptr), opt);
}

LocalizationResult locate(const StackedHourglass& model, const cv::Mat& image) {
  if (model.is_training()) throw Error("locate: model must be in eval mode");
  const int s = model.config().input_size;
  nn::NoGradGuard guard;
  const auto outs = model.forward(nn::constant(image_to_tensor(resize_linear(image, s, s))));
  const Tensor& last = outs.back()->value;
  LocalizationResult r;
  const Extent net{s, s};
  for (int c = 0; c < 2; ++c) {
    cv::Mat plane(s, s, CV_32F, const_cast<float*>(last.data()) + static_cast<std::size_t>(c) * s * s);
    const Peak p = decode_heatmap(plane);
    r.peak_values[c] = p.value;
    r.degenerate = r.degenerate || p.degenerate;
    (c == 0 ? r.cup_center : r.fovea) = data::map_coords(p.location, net, extent_of(image));
  }
  if (r.degenerate) log::warn("locate: degenerate heatmap (constant output)");
  return r;
}

void save_localizer(const StackedHourglass& model, const nn::TrainingHistory& history,
                    const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  nn::save_parameters(model, path);
  nn::write_sidecar(path, to_json(model.config()), history);
}

std::unique_ptr<StackedHourglass> load_localizer(const std::filesystem::path& path) {
  const HourglassConfig cfg = hourglass_config_from_json(nn::read_sidecar(path).at("config"));
  auto model = std::make_unique<StackedHourglass>(cfg, 0);
  nn::load_parameters(*model, path);
  model->eval();
  return model;
}

}  // namespace fundus::heatmap
