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

#include "fundus/classifier.hpp"

#include <algorithm>
#include <cmath>

#include "fundus/log.hpp"

namespace fundus::classifier {

using nn::Var;

namespace {

const std::vector<std::string> kBlockOrder = {"Conv2d_1a_3x3", "Conv2d_2a_3x3", "Conv2d_2b_3x3", "Conv2d_3b_1x1",
                                              "Conv2d_4a_3x3", "Mixed_5b",      "Mixed_5c",      "Mixed_5d",
                                              "Mixed_6a",      "Mixed_6b",      "Mixed_6c",      "Mixed_6d",
                                              "Mixed_6e",      "Mixed_7a",      "Mixed_7b",      "Mixed_7c"};

struct BasicConv : nn::Module {
  BasicConv(int in, int out, int kh, int kw, nn::ConvOptions opt, std::mt19937_64& rng) {
    conv = register_module("conv", std::make_shared<nn::Conv2d>(in, out, kh, kw, opt, rng, false));
    bn = register_module("bn", std::make_shared<nn::BatchNorm2d>(out));
  }
  BasicConv(int in, int out, int k, int stride, int pad, std::mt19937_64& rng)
      : BasicConv(in, out, k, k, nn::ConvOptions{stride, pad, pad}, rng) {}
  Var forward(const Var& x) const { return nn::relu(bn->forward(conv->forward(x))); }
  std::shared_ptr<nn::Conv2d> conv;
  std::shared_ptr<nn::BatchNorm2d> bn;
};

using ConvPtr = std::shared_ptr<BasicConv>;

struct Block : nn::Module {
  ConvPtr add(const std::string& name, int in, int out, int kh, int kw, int stride, int ph, int pw,
              std::mt19937_64& rng) {
    return register_module(name, std::make_shared<BasicConv>(in, out, kh, kw, nn::ConvOptions{stride, ph, pw}, rng));
  }
  int out = 0;
};

struct InceptionA : Block {
  InceptionA(int in, int pool_features, const std::function<int(int)>& w, std::mt19937_64& rng) {
    b1 = add("branch1x1", in, w(64), 1, 1, 1, 0, 0, rng);
    b5_1 = add("branch5x5_1", in, w(48), 1, 1, 1, 0, 0, rng);
    b5_2 = add("branch5x5_2", w(48), w(64), 5, 5, 1, 2, 2, rng);
    d1 = add("branch3x3dbl_1", in, w(64), 1, 1, 1, 0, 0, rng);
    d2 = add("branch3x3dbl_2", w(64), w(96), 3, 3, 1, 1, 1, rng);
    d3 = add("branch3x3dbl_3", w(96), w(96), 3, 3, 1, 1, 1, rng);
    pool = add("branch_pool", in, w(pool_features), 1, 1, 1, 0, 0, rng);
    out = w(64) + w(64) + w(96) + w(pool_features);
  }
  Var forward(const Var& x) const {
    const Var parts[] = {b1->forward(x), b5_2->forward(b5_1->forward(x)), d3->forward(d2->forward(d1->forward(x))),
                         pool->forward(nn::avgpool2d(x, 3, 1, 1))};
    return nn::concat_channels(parts);
  }
  ConvPtr b1, b5_1, b5_2, d1, d2, d3, pool;
};

struct InceptionB : Block {
  InceptionB(int in, const std::function<int(int)>& w, std::mt19937_64& rng) {
    b3 = add("branch3x3", in, w(384), 3, 3, 2, 0, 0, rng);
    d1 = add("branch3x3dbl_1", in, w(64), 1, 1, 1, 0, 0, rng);
    d2 = add("branch3x3dbl_2", w(64), w(96), 3, 3, 1, 1, 1, rng);
    d3 = add("branch3x3dbl_3", w(96), w(96), 3, 3, 2, 0, 0, rng);
    out = w(384) + w(96) + in;
  }
  Var forward(const Var& x) const {
    const Var parts[] = {b3->forward(x), d3->forward(d2->forward(d1->forward(x))), nn::maxpool2d(x, 3, 2)};
    return nn::concat_channels(parts);
  }
  ConvPtr b3, d1, d2, d3;
};

struct InceptionC : Block {
  InceptionC(int in, int c7, const std::function<int(int)>& w, std::mt19937_64& rng) {
    const int c = w(c7);
    b1 = add("branch1x1", in, w(192), 1, 1, 1, 0, 0, rng);
    s1 = add("branch7x7_1", in, c, 1, 1, 1, 0, 0, rng);
    s2 = add("branch7x7_2", c, c, 1, 7, 1, 0, 3, rng);
    s3 = add("branch7x7_3", c, w(192), 7, 1, 1, 3, 0, rng);
    d1 = add("branch7x7dbl_1", in, c, 1, 1, 1, 0, 0, rng);
    d2 = add("branch7x7dbl_2", c, c, 7, 1, 1, 3, 0, rng);
    d3 = add("branch7x7dbl_3", c, c, 1, 7, 1, 0, 3, rng);
    d4 = add("branch7x7dbl_4", c, c, 7, 1, 1, 3, 0, rng);
    d5 = add("branch7x7dbl_5", c, w(192), 1, 7, 1, 0, 3, rng);
    pool = add("branch_pool", in, w(192), 1, 1, 1, 0, 0, rng);
    out = 4 * w(192);
  }
  Var forward(const Var& x) const {
    const Var parts[] = {b1->forward(x), s3->forward(s2->forward(s1->forward(x))),
                         d5->forward(d4->forward(d3->forward(d2->forward(d1->forward(x))))),
                         pool->forward(nn::avgpool2d(x, 3, 1, 1))};
    return nn::concat_channels(parts);
  }
  ConvPtr b1, s1, s2, s3, d1, d2, d3, d4, d5, pool;
};

struct InceptionD : Block {
  InceptionD(int in, const std::function<int(int)>& w, std::mt19937_64& rng) {
    b3_1 = add("branch3x3_1", in, w(192), 1, 1, 1, 0, 0, rng);
    b3_2 = add("branch3x3_2", w(192), w(320), 3, 3, 2, 0, 0, rng);
    s1 = add("branch7x7x3_1", in, w(192), 1, 1, 1, 0, 0, rng);
    s2 = add("branch7x7x3_2", w(192), w(192), 1, 7, 1, 0, 3, rng);
    s3 = add("branch7x7x3_3", w(192), w(192), 7, 1, 1, 3, 0, rng);
    s4 = add("branch7x7x3_4", w(192), w(192), 3, 3, 2, 0, 0, rng);
    out = w(320) + w(192) + in;
  }
  Var forward(const Var& x) const {
    const Var parts[] = {b3_2->forward(b3_1->forward(x)),
                         s4->forward(s3->forward(s2->forward(s1->forward(x)))), nn::maxpool2d(x, 3, 2)};
    return nn::concat_channels(parts);
  }
  ConvPtr b3_1, b3_2, s1, s2, s3, s4;
};

struct InceptionE : Block {
  InceptionE(int in, const std::function<int(int)>& w, std::mt19937_64& rng) {
    b1 = add("branch1x1", in, w(320), 1, 1, 1, 0, 0, rng);
    b3_1 = add("branch3x3_1", in, w(384), 1, 1, 1, 0, 0, rng);
    b3_2a = add("branch3x3_2a", w(384), w(384), 1, 3, 1, 0, 1, rng);
    b3_2b = add("branch3x3_2b", w(384), w(384), 3, 1, 1, 1, 0, rng);
    d1 = add("branch3x3dbl_1", in, w(448), 1, 1, 1, 0, 0, rng);
    d2 = add("branch3x3dbl_2", w(448), w(384), 3, 3, 1, 1, 1, rng);
    d3a = add("branch3x3dbl_3a", w(384), w(384), 1, 3, 1, 0, 1, rng);
    d3b = add("branch3x3dbl_3b", w(384), w(384), 3, 1, 1, 1, 0, rng);
    pool = add("branch_pool", in, w(192), 1, 1, 1, 0, 0, rng);
    out = w(320) + 4 * w(384) + w(192);
  }
  Var forward(const Var& x) const {
    const Var b3 = b3_1->forward(x);
    const Var dd = d2->forward(d1->forward(x));
    const Var parts[] = {b1->forward(x), b3_2a->forward(b3), b3_2b->forward(b3), d3a->forward(dd), d3b->forward(dd),
                         pool->forward(nn::avgpool2d(x, 3, 1, 1))};
    return nn::concat_channels(parts);
  }
  ConvPtr b1, b3_1, b3_2a, b3_2b, d1, d2, d3a, d3b, pool;
};

}  // namespace

void ClassifierConfig::validate() const {
  if (input_size < 75) throw Error("classifier: input size must be at least 75");
  if (!(width > 0.0 && width <= 1.0)) throw Error("classifier: width must lie in (0, 1]");
  if (!(learning_rate > 0.0) || !(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0) || lr_decay_every < 1)
    throw Error("classifier: invalid learning-rate schedule");
  if (early_stop_patience < 1 || batch_size < 1 || max_epochs < 1)
    throw Error("classifier: patience, batch size and epochs must be positive");
  if (class_weights && !((*class_weights)[0] > 0 && (*class_weights)[1] > 0))
    throw Error("classifier: class weights must be positive");
  if (!(dropout >= 0.0f && dropout < 1.0f)) throw Error("classifier: dropout must lie in [0, 1)");
  frozen_prefixes(freeze_boundary);
}

nlohmann::json to_json(const ClassifierConfig& c) {
  nlohmann::json j{{"input_size", c.input_size},
                   {"width", c.width},
                   {"learning_rate", c.learning_rate},
                   {"lr_decay_factor", c.lr_decay_factor},
                   {"lr_decay_every", c.lr_decay_every},
                   {"early_stop_patience", c.early_stop_patience},
                   {"batch_size", c.batch_size},
                   {"max_epochs", c.max_epochs},
                   {"freeze_boundary", c.freeze_boundary},
                   {"dropout", c.dropout}};
  j["class_weights"] = c.class_weights ? nlohmann::json(*c.class_weights) : nlohmann::json(nullptr);
  return j;
}

ClassifierConfig classifier_config_from_json(const nlohmann::json& j) {
  ClassifierConfig c;
  c.input_size = j.at("input_size");
  c.width = j.at("width");
  c.learning_rate = j.at("learning_rate");
  c.lr_decay_factor = j.at("lr_decay_factor");
  c.lr_decay_every = j.at("lr_decay_every");
  c.early_stop_patience = j.at("early_stop_patience");
  c.batch_size = j.at("batch_size");
  c.max_epochs = j.at("max_epochs");
  c.freeze_boundary = j.at("freeze_boundary");
  c.dropout = j.at("dropout");
  if (!j.at("class_weights").is_null()) c.class_weights = j.at("class_weights").get<std::array<float, 2>>();
  c.allow_random_init = true;
  c.validate();
  return c;
}

std::vector<std::string> frozen_prefixes(const std::string& boundary) {
  if (boundary.empty() || boundary == "none") return {};
  const auto it = std::find(kBlockOrder.begin(), kBlockOrder.end(), boundary);
  if (it == kBlockOrder.end()) throw Error("classifier: unknown freeze boundary '" + boundary + "'");
  return {kBlockOrder.begin(), it + 1};
}

InceptionNet::InceptionNet(const ClassifierConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const double width = cfg_.width;
  const std::function<int(int)> w = [width](int c) { return std::max(1, static_cast<int>(std::lround(c * width))); };

  auto conv = [&](const std::string& name, int in, int out, int k, int stride, int pad) {
    auto m = register_module(name, std::make_shared<BasicConv>(in, out, k, stride, pad, rng));
    blocks_.push_back(m);
    stages_.push_back([m](const Var& x) { return m->forward(x); });
    return out;
  };
  auto pool = [&] { stages_.push_back([](const Var& x) { return nn::maxpool2d(x, 3, 2); }); };
  int c = conv("Conv2d_1a_3x3", 3, w(32), 3, 2, 0);
  c = conv("Conv2d_2a_3x3", c, w(32), 3, 1, 0);
  c = conv("Conv2d_2b_3x3", c, w(64), 3, 1, 1);
  pool();
  c = conv("Conv2d_3b_1x1", c, w(80), 1, 1, 0);
  c = conv("Conv2d_4a_3x3", c, w(192), 3, 1, 0);
  pool();

  auto block = [&](const std::string& name, auto module) {
    auto m = register_module(name, module);
    blocks_.push_back(m);
    stages_.push_back([m](const Var& x) { return m->forward(x); });
    return m->out;
  };
  c = block("Mixed_5b", std::make_shared<InceptionA>(c, 32, w, rng));
  c = block("Mixed_5c", std::make_shared<InceptionA>(c, 64, w, rng));
  c = block("Mixed_5d", std::make_shared<InceptionA>(c, 64, w, rng));
  c = block("Mixed_6a", std::make_shared<InceptionB>(c, w, rng));
  c = block("Mixed_6b", std::make_shared<InceptionC>(c, 128, w, rng));
  c = block("Mixed_6c", std::make_shared<InceptionC>(c, 160, w, rng));
  c = block("Mixed_6d", std::make_shared<InceptionC>(c, 160, w, rng));
  c = block("Mixed_6e", std::make_shared<InceptionC>(c, 192, w, rng));
  c = block("Mixed_7a", std::make_shared<InceptionD>(c, w, rng));
  c = block("Mixed_7b", std::make_shared<InceptionE>(c, w, rng));
  c = block("Mixed_7c", std::make_shared<InceptionE>(c, w, rng));
  fc_ = register_module("fc", std::make_shared<nn::Linear>(c, 2, rng));
}

Var InceptionNet::forward(const Var& x, std::mt19937_64* rng) const {
  if (x->value.rank() != 4 || x->value.dim(1) != 3 || x->value.dim(2) != cfg_.input_size ||
      x->value.dim(3) != cfg_.input_size)
    throw Error("classifier expects [N, 3, " + std::to_string(cfg_.input_size) + ", " +
                std::to_string(cfg_.input_size) + "], got " + shape_str(x->shape()));
  Var h = x;
  for (const auto& s : stages_) h = s(h);
  if (is_training() && rng && cfg_.dropout > 0.0f) h = nn::dropout2d(h, cfg_.dropout, *rng);
  return fc_->forward(nn::global_avg_pool(h));
}

std::unique_ptr<InceptionNet> build_classifier(const ClassifierConfig& cfg, std::uint64_t seed) {
  auto model = std::make_unique<InceptionNet>(cfg, seed);
  if (!cfg.pretrained.empty()) {
    nn::load_parameters(*model, cfg.pretrained, "fc.");
  } else if (!cfg.allow_random_init) {
    throw Error("classifier: pretrained weights are required (set a weights file or allow random init)");
  } else {
    log::warn("classifier: starting from random weights; the frozen part will not be trained");
  }
  for (const auto& p : frozen_prefixes(cfg.freeze_boundary)) model->freeze(p + ".");
  return model;
}

std::array<float, 2> inverse_frequency_weights(std::span<const int> labels) {
  double n[2] = {0, 0};
  for (int y : labels) {
    if (y != 0 && y != 1) throw Error("class labels must be 0 or 1");
    n[y] += 1;
  }
  if (n[0] == 0 || n[1] == 0) {
    log::warn("classifier: a class is missing from the training set; using equal class weights");
    return {1.0f, 1.0f};
  }
  const double total = n[0] + n[1];
  const double w0 = total / (2 * n[0]), w1 = total / (2 * n[1]);
  const double mean = (w0 + w1) / 2;
  return {static_cast<float>(w0 / mean), static_cast<float>(w1 / mean)};
}

Tensor classifier_input(const cv::Mat& image) {
  Tensor t = image_to_tensor(image);
  normalize_channels(t, kImageNetMean, kImageNetStd);
  return t;
}

namespace {

struct Batch {
  Tensor images;
  std::vector<int> labels;
};

Batch make_batch(const std::vector<ClassifierSample>& samples, std::span<const std::size_t> idx, int s,
                 const augment::TransformSpec* spec, std::mt19937_64& rng) {
  std::vector<Tensor> images;
  std::vector<int> labels;
  for (std::size_t i : idx) {
    cv::Mat img = samples[i].image;
    if (spec) img = augment::apply_to_image(augment::sample_transform(*spec, rng(), {s, s}), img);
    images.push_back(classifier_input(img).reshaped({3, s, s}));
    labels.push_back(samples[i].label);
  }
  return {stack(images), std::move(labels)};
}

}  // namespace

nn::TrainingHistory train_classifier(InceptionNet& model, const std::vector<ClassifierSample>& train,
                                     const std::vector<ClassifierSample>& val, std::uint64_t seed,
                                     const augment::TransformSpec& spec) {
  const ClassifierConfig& cfg = model.config();
  std::vector<int> labels;
  for (const auto* set : {&train, &val})
    for (const auto& s : *set)
      if (s.image.rows != cfg.input_size || s.image.cols != cfg.input_size)
        throw Error("classifier samples must be resized to the network input");
  for (const auto& s : train) labels.push_back(s.label);
  const std::array<float, 2> weights = cfg.class_weights ? *cfg.class_weights : inverse_frequency_weights(labels);
  log::info("classifier: class weights (" + std::to_string(weights[0]) + ", " + std::to_string(weights[1]) + ")");

  auto loss_for = [&model, weights](const std::vector<ClassifierSample>& samples, const augment::TransformSpec* aug) {
    return [&model, &samples, aug, weights](std::span<const std::size_t> idx, std::mt19937_64& rng, bool training) {
      Batch b = make_batch(samples, idx, model.config().input_size, training ? aug : nullptr, rng);
      const Var logits = model.forward(nn::constant(std::move(b.images)), training ? &rng : nullptr);
      return nn::weighted_cross_entropy(logits, b.labels, weights);
    };
  };
  nn::FitOptions opt;
  opt.name = "classifier";
  opt.max_epochs = cfg.max_epochs;
  opt.batch_size = cfg.batch_size;
  opt.schedule = {cfg.learning_rate, cfg.lr_decay_factor, cfg.lr_decay_every};
  opt.patience = cfg.early_stop_patience;
  opt.seed = seed;
  return nn::fit(model, train.size(), val.size(), loss_for(train, &spec), loss_for(val, nullptr), opt);
}

double accuracy(const InceptionNet& model, const std::vector<ClassifierSample>& samples) {
  if (samples.empty()) throw Error("accuracy: no samples");
  nn::NoGradGuard guard;
  std::size_t correct = 0;
  for (const auto& s : samples) {
    const Tensor logits = model.forward(nn::constant(classifier_input(s.image)))->value;
    correct += (logits[1] > logits[0] ? 1 : 0) == s.label;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

RiskPrediction predict_glaucoma_risk(const InceptionNet& model, const std::string& id, const cv::Mat& roi,
                                     std::span<const augment::Renderer> renderings, const augment::TtaConfig& tta,
                                     const augment::TransformSpec& spec) {
  if (model.is_training()) throw Error("predict_glaucoma_risk: model must be in eval mode");
  const int s = model.config().input_size;
  const augment::Predictor predict = [&model](const cv::Mat& img) {
    nn::NoGradGuard guard;
    return model.forward(nn::constant(classifier_input(img)))->value;
  };
  const Tensor p = augment::tta_predict(predict, resize_linear(roi, s, s), renderings, spec, tta,
                                        augment::TtaMode::classification);
  return {id, p[1]};
}

void save_classifier(const InceptionNet& model, const nn::TrainingHistory& history, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  nn::save_parameters(model, path);
  nn::write_sidecar(path, to_json(model.config()), history);
}

std::unique_ptr<InceptionNet> load_classifier(const std::filesystem::path& path) {
  auto model = std::make_unique<InceptionNet>(classifier_config_from_json(nn::read_sidecar(path).at("config")), 0);
  nn::load_parameters(*model, path);
  model->eval();
  return model;
}

}  // namespace fundus::classifier
