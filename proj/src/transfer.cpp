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

#include "fundus/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <regex>

#include <opencv2/imgproc.hpp>

#include "fundus/csv.hpp"
#include "fundus/image.hpp"
#include "fundus/log.hpp"
#include "fundus/seed.hpp"
#include "fundus/training.hpp"

namespace fs = std::filesystem;

namespace fundus::transfer {

using nn::Var;

void DomainPair::validate() const {
  data::check_domain(a);
  data::check_domain(b);
  if (a >= b) throw Error("domain pair must list the smaller domain first, got " + std::to_string(a) + "," +
                          std::to_string(b));
}

std::vector<DomainPair> all_pairs() { return {{1, 2}, {1, 3}, {2, 3}}; }

DomainPair parse_pair(const std::string& text) {
  static const std::regex re(R"(\s*(\d+)\s*,\s*(\d+)\s*)");
  std::smatch m;
  if (!std::regex_match(text, m, re)) throw Error("domain pair must look like '1,2', got '" + text + "'");
  DomainPair p{std::stoi(m[1]), std::stoi(m[2])};
  p.validate();
  return p;
}

void CycleGanConfig::validate() const {
  if (image_size < 8) throw Error("cyclegan: image size must be at least 8");
  if (downsamplings < 0 || image_size % (1 << downsamplings) != 0)
    throw Error("cyclegan: image size " + std::to_string(image_size) + " is not divisible by the generator's " +
                std::to_string(1 << downsamplings) + "x downsampling");
  if (generator_channels < 1 || discriminator_channels < 1 || residual_blocks < 0 || discriminator_layers < 1)
    throw Error("cyclegan: invalid network size");
  if (!(adversarial_weight >= 0 && cycle_weight >= 0 && identity_weight >= 0))
    throw Error("cyclegan: loss weights must be non-negative");
  if (!(learning_rate > 0) || !(beta1 >= 0 && beta1 < 1)) throw Error("cyclegan: invalid optimiser settings");
  if (epochs < 1 || decay_epochs < 0 || decay_epochs > epochs) throw Error("cyclegan: invalid epoch counts");
  if (pool_size < 0) throw Error("cyclegan: pool size must be non-negative");
  if (!(load_scale >= 1.0)) throw Error("cyclegan: load scale must be at least 1");
  // Each discriminator stage halves the map; it needs room for the two final 4x4 convs.
  if ((image_size >> discriminator_layers) < 3)
    throw Error("cyclegan: image size too small for " + std::to_string(discriminator_layers) +
                " discriminator layers");
}

double CycleGanConfig::learning_rate_at(int epoch) const {
  const int constant = epochs - decay_epochs;
  if (epoch <= constant) return learning_rate;
  return learning_rate * (1.0 - static_cast<double>(epoch - constant) / static_cast<double>(decay_epochs + 1));
}

nlohmann::json to_json(const CycleGanConfig& c) {
  return {{"image_size", c.image_size},
          {"generator_channels", c.generator_channels},
          {"residual_blocks", c.residual_blocks},
          {"downsamplings", c.downsamplings},
          {"discriminator_channels", c.discriminator_channels},
          {"discriminator_layers", c.discriminator_layers},
          {"adversarial_weight", c.adversarial_weight},
          {"cycle_weight", c.cycle_weight},
          {"identity_weight", c.identity_weight},
          {"learning_rate", c.learning_rate},
          {"beta1", c.beta1},
          {"epochs", c.epochs},
          {"decay_epochs", c.decay_epochs},
          {"pool_size", c.pool_size},
          {"load_scale", c.load_scale}};
}

CycleGanConfig cyclegan_config_from_json(const nlohmann::json& j) {
  CycleGanConfig c;
  c.image_size = j.at("image_size");
  c.generator_channels = j.at("generator_channels");
  c.residual_blocks = j.at("residual_blocks");
  c.downsamplings = j.at("downsamplings");
  c.discriminator_channels = j.at("discriminator_channels");
  c.discriminator_layers = j.at("discriminator_layers");
  c.adversarial_weight = j.at("adversarial_weight");
  c.cycle_weight = j.at("cycle_weight");
  c.identity_weight = j.at("identity_weight");
  c.learning_rate = j.at("learning_rate");
  c.beta1 = j.at("beta1");
  c.epochs = j.at("epochs");
  c.decay_epochs = j.at("decay_epochs");
  c.pool_size = j.at("pool_size");
  c.load_scale = j.at("load_scale");
  c.validate();
  return c;
}

namespace {

void gan_init(const nn::Module& m, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, 0.02f);
  for (const auto& p : m.named_parameters()) {
    const bool is_bias = p.name.size() >= 4 && p.name.compare(p.name.size() - 4, 4, "bias") == 0;
    for (auto& v : p.var->value.values()) v = is_bias ? 0.0f : dist(rng);
  }
}

void set_trainable(const nn::Module& m, bool on) {
  for (const auto& p : m.named_parameters()) p.var->requires_grad = on;
}

// 8-bit BGR at S x S -> [1, 3, S, S] RGB in [-1, 1].
Tensor to_gan_tensor(const cv::Mat& image) {
  Tensor t = image_to_tensor(image);
  for (auto& v : t.values()) v = v * 2.0f - 1.0f;
  return t;
}

cv::Mat from_gan_tensor(const Tensor& t) {
  Tensor u = t;
  for (auto& v : u.values()) v = (v + 1.0f) * 0.5f;
  return tensor_to_image(u);
}

cv::Mat resize_to(const cv::Mat& image, int w, int h) {
  if (image.cols == w && image.rows == h) return image;
  cv::Mat out;
  const bool shrink = w < image.cols || h < image.rows;
  cv::resize(image, out, {w, h}, 0, 0, shrink ? cv::INTER_AREA : cv::INTER_LINEAR);
  return out;
}

// Resize to load size, random crop back to S, random horizontal flip.
Tensor jittered(const cv::Mat& image, const CycleGanConfig& cfg, std::mt19937_64& rng) {
  const int s = cfg.image_size;
  const int load = std::max(s, static_cast<int>(std::lround(s * cfg.load_scale)));
  cv::Mat big = resize_to(image, load, load);
  const int x0 = static_cast<int>(rng() % static_cast<std::uint64_t>(load - s + 1));
  const int y0 = static_cast<int>(rng() % static_cast<std::uint64_t>(load - s + 1));
  cv::Mat crop = big(cv::Rect(x0, y0, s, s)).clone();
  if (rng() % 2 == 0) cv::flip(crop, crop, 1);
  return to_gan_tensor(crop);
}

class ImagePool {
 public:
  explicit ImagePool(int capacity) : capacity_(static_cast<std::size_t>(capacity)) {}

  Tensor query(const Tensor& fresh, std::mt19937_64& rng) {
    if (capacity_ == 0) return fresh;
    if (images_.size() < capacity_) {
      images_.push_back(fresh);
      return fresh;
    }
    if (rng() % 2 == 0) {
      const std::size_t k = rng() % images_.size();
      Tensor old = images_[k];
      images_[k] = fresh;
      return old;
    }
    return fresh;
  }

 private:
  std::size_t capacity_;
  std::vector<Tensor> images_;
};

Var lsgan(const Var& scores, float target) { return nn::mse_loss(scores, Tensor(scores->shape(), target)); }

Var weighted_sum(std::initializer_list<std::pair<double, Var>> terms) {
  Var total;
  for (const auto& [w, v] : terms) {
    if (w == 0.0) continue;
    const Var t = nn::scale(v, static_cast<float>(w));
    total = total ? nn::add(total, t) : t;
  }
  return total;
}

}  // namespace

ResnetGenerator::ResnetGenerator(const CycleGanConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  auto add = [&](int in, int out, int k, int stride, int pad) {
    const auto name = "conv" + std::to_string(convs_.size());
    convs_.push_back(register_module(name, std::make_shared<nn::Conv2d>(in, out, k, stride, pad, rng)));
  };
  const int c = cfg_.generator_channels;
  add(3, c, 7, 1, 0);
  int ch = c;
  for (int i = 0; i < cfg_.downsamplings; ++i, ch *= 2) add(ch, ch * 2, 3, 2, 1);
  for (int i = 0; i < cfg_.residual_blocks; ++i) {
    add(ch, ch, 3, 1, 0);
    add(ch, ch, 3, 1, 0);
  }
  for (int i = 0; i < cfg_.downsamplings; ++i, ch /= 2) add(ch, ch / 2, 3, 1, 1);
  add(ch, 3, 7, 1, 0);
  gan_init(*this, rng);
}

Var ResnetGenerator::forward(const Var& x) const {
  if (x->value.rank() != 4 || x->value.dim(1) != 3 || x->value.dim(2) != cfg_.image_size ||
      x->value.dim(3) != cfg_.image_size)
    throw Error("generator expects [N, 3, " + std::to_string(cfg_.image_size) + ", " +
                std::to_string(cfg_.image_size) + "], got " + shape_str(x->shape()));
  std::size_t k = 0;
  auto norm_relu = [](const Var& v) { return nn::relu(nn::instance_norm(v)); };
  Var h = norm_relu(convs_[k++]->forward(nn::reflect_pad(x, 3)));
  for (int i = 0; i < cfg_.downsamplings; ++i) h = norm_relu(convs_[k++]->forward(h));
  for (int i = 0; i < cfg_.residual_blocks; ++i) {
    Var r = norm_relu(convs_[k++]->forward(nn::reflect_pad(h, 1)));
    r = nn::instance_norm(convs_[k++]->forward(nn::reflect_pad(r, 1)));
    h = nn::add(h, r);
  }
  for (int i = 0; i < cfg_.downsamplings; ++i) h = norm_relu(convs_[k++]->forward(nn::upsample_nearest(h, 2)));
  return nn::tanh(convs_[k]->forward(nn::reflect_pad(h, 3)));
}

PatchDiscriminator::PatchDiscriminator(const CycleGanConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  auto add = [&](int in, int out, int stride) {
    const auto name = "conv" + std::to_string(convs_.size());
    convs_.push_back(register_module(name, std::make_shared<nn::Conv2d>(in, out, 4, stride, 1, rng)));
  };
  const int c = cfg.discriminator_channels;
  add(3, c, 2);
  int ch = c;
  for (int n = 1; n < cfg.discriminator_layers; ++n) {
    const int next = c * std::min(1 << n, 8);
    add(ch, next, 2);
    ch = next;
  }
  const int last = c * std::min(1 << cfg.discriminator_layers, 8);
  add(ch, last, 1);
  add(last, 1, 1);
  gan_init(*this, rng);
}

Var PatchDiscriminator::forward(const Var& x) const {
  Var h = nn::leaky_relu(convs_[0]->forward(x), 0.2f);
  for (std::size_t i = 1; i + 1 < convs_.size(); ++i)
    h = nn::leaky_relu(nn::instance_norm(convs_[i]->forward(h)), 0.2f);
  return convs_.back()->forward(h);
}

nlohmann::json CycleGanHistory::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& e : epochs)
    rows.push_back({{"epoch", e.epoch},
                    {"adversarial", e.adversarial},
                    {"cycle", e.cycle},
                    {"identity", e.identity},
                    {"discriminator", e.discriminator},
                    {"learning_rate", e.learning_rate}});
  nlohmann::json j{{"epochs", rows}, {"aborted", aborted}};
  if (aborted) j["abort_reason"] = abort_reason;
  return j;
}

TrainedPair train_cyclegan(const std::vector<cv::Mat>& images_a, const std::vector<cv::Mat>& images_b,
                           const CycleGanConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (images_a.empty() || images_b.empty()) throw Error("cyclegan: both image sets must be non-empty");
  for (const auto* set : {&images_a, &images_b})
    for (const auto& m : *set)
      if (m.type() != CV_8UC3) throw Error("cyclegan: images must be 8-bit BGR");

  TrainedPair out;
  out.g_ab = std::make_shared<ResnetGenerator>(cfg, mix_seed(seed, 1));
  out.g_ba = std::make_shared<ResnetGenerator>(cfg, mix_seed(seed, 2));
  PatchDiscriminator d_a(cfg, mix_seed(seed, 3)), d_b(cfg, mix_seed(seed, 4));
  const auto beta1 = static_cast<float>(cfg.beta1);
  auto g_params = out.g_ab->parameters();
  for (auto& p : out.g_ba->parameters()) g_params.push_back(p);
  auto d_params = d_a.parameters();
  for (auto& p : d_b.parameters()) d_params.push_back(p);
  nn::Adam opt_g(g_params, nn::AdamOptions{static_cast<float>(cfg.learning_rate), beta1});
  nn::Adam opt_d(d_params, nn::AdamOptions{static_cast<float>(cfg.learning_rate), beta1});
  ImagePool pool_a(cfg.pool_size), pool_b(cfg.pool_size);
  std::mt19937_64 pool_rng(mix_seed(seed, 5));

  nn::ParameterSnapshot good_ab = nn::snapshot(*out.g_ab), good_ba = nn::snapshot(*out.g_ba);
  const std::size_t n = std::max(images_a.size(), images_b.size());

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = cfg.learning_rate_at(epoch);
    opt_g.set_learning_rate(static_cast<float>(lr));
    opt_d.set_learning_rate(static_cast<float>(lr));
    const auto order = nn::permutation(images_a.size(), mix_seed(seed, 100 + static_cast<std::uint64_t>(epoch)));
    CycleGanEpoch rec{epoch, 0, 0, 0, 0, lr};
    std::string failure;

    for (std::size_t i = 0; i < n && failure.empty(); ++i) {
      std::mt19937_64 rng(mix_seed(mix_seed(seed, static_cast<std::uint64_t>(epoch)), i));
      const cv::Mat& img_a = images_a[order[i % images_a.size()]];
      const cv::Mat& img_b = images_b[rng() % images_b.size()];
      const Var real_a = nn::constant(jittered(img_a, cfg, rng));
      const Var real_b = nn::constant(jittered(img_b, cfg, rng));

      set_trainable(d_a, false);
      set_trainable(d_b, false);
      const Var fake_b = out.g_ab->forward(real_a);
      const Var fake_a = out.g_ba->forward(real_b);
      const Var adv = nn::add(lsgan(d_b.forward(fake_b), 1.0f), lsgan(d_a.forward(fake_a), 1.0f));
      const Var cyc = nn::add(nn::l1_loss(out.g_ba->forward(fake_b), real_a->value),
                              nn::l1_loss(out.g_ab->forward(fake_a), real_b->value));
      Var idt;
      if (cfg.identity_weight > 0)
        idt = nn::add(nn::l1_loss(out.g_ab->forward(real_b), real_b->value),
                      nn::l1_loss(out.g_ba->forward(real_a), real_a->value));
      const Var loss_g =
          weighted_sum({{cfg.adversarial_weight, adv}, {cfg.cycle_weight, cyc}, {cfg.identity_weight, idt}});
      if (!std::isfinite(loss_g->value[0])) {
        failure = "non-finite generator loss";
        break;
      }
      opt_g.zero_grad();
      nn::backward(loss_g);
      opt_g.step();

      set_trainable(d_a, true);
      set_trainable(d_b, true);
      const Var pooled_b = nn::constant(pool_b.query(fake_b->value, pool_rng));
      const Var pooled_a = nn::constant(pool_a.query(fake_a->value, pool_rng));
      const Var loss_d = nn::scale(nn::add(nn::add(lsgan(d_a.forward(real_a), 1.0f), lsgan(d_a.forward(pooled_a), 0.0f)),
                                           nn::add(lsgan(d_b.forward(real_b), 1.0f), lsgan(d_b.forward(pooled_b), 0.0f))),
                                   0.5f);
      if (!std::isfinite(loss_d->value[0])) {
        failure = "non-finite discriminator loss";
        break;
      }
      opt_d.zero_grad();
      nn::backward(loss_d);
      opt_d.step();

      rec.adversarial += adv->value[0];
      rec.cycle += cyc->value[0];
      rec.identity += idt ? idt->value[0] : 0.0;
      rec.discriminator += loss_d->value[0];
    }

    if (!failure.empty()) {
      nn::restore(*out.g_ab, good_ab);
      nn::restore(*out.g_ba, good_ba);
      out.history.aborted = true;
      out.history.abort_reason = failure + " in epoch " + std::to_string(epoch);
      log::error("cyclegan: " + out.history.abort_reason + "; generators restored to the last complete epoch");
      break;
    }
    const auto dn = static_cast<double>(n);
    rec.adversarial /= dn;
    rec.cycle /= dn;
    rec.identity /= dn;
    rec.discriminator /= dn;
    out.history.epochs.push_back(rec);
    good_ab = nn::snapshot(*out.g_ab);
    good_ba = nn::snapshot(*out.g_ba);
    log::debug("cyclegan epoch " + std::to_string(epoch) + " adv " + std::to_string(rec.adversarial) + " cycle " +
               std::to_string(rec.cycle) + " identity " + std::to_string(rec.identity) + " disc " +
               std::to_string(rec.discriminator));
  }
  out.g_ab->eval();
  out.g_ba->eval();
  return out;
}

cv::Mat translate(const ResnetGenerator& g, const cv::Mat& image) {
  const int s = g.config().image_size;
  if (image.type() != CV_8UC3) throw Error("translate: image must be 8-bit BGR");
  if (image.rows != s || image.cols != s)
    throw Error("translate: image is " + std::to_string(image.cols) + "x" + std::to_string(image.rows) +
                ", generator expects " + std::to_string(s) + "x" + std::to_string(s));
  nn::NoGradGuard guard;
  return from_gan_tensor(g.forward(nn::constant(to_gan_tensor(image)))->value);
}

augment::Renderer make_renderer(std::shared_ptr<const ResnetGenerator> g) {
  return [g = std::move(g)](const cv::Mat& image) {
    const int s = g->config().image_size;
    return resize_to(translate(*g, resize_to(image, s, s)), image.cols, image.rows);
  };
}

void GeneratorSet::set(int source, int target, std::shared_ptr<const ResnetGenerator> g) {
  data::check_domain(source);
  data::check_domain(target);
  if (source == target) throw Error("a generator must map between two different domains");
  if (!g) throw Error("null generator");
  gens_[{source, target}] = std::move(g);
}

bool GeneratorSet::has(int source, int target) const { return gens_.count({source, target}) > 0; }

const std::shared_ptr<const ResnetGenerator>& GeneratorSet::get(int source, int target) const {
  auto it = gens_.find({source, target});
  if (it == gens_.end())
    throw Error("missing generator for domain " + std::to_string(source) + " -> " + std::to_string(target));
  return it->second;
}

bool GeneratorSet::complete() const {
  for (int s = 1; s <= data::kDomainCount; ++s)
    for (int t = 1; t <= data::kDomainCount; ++t)
      if (s != t && !has(s, t)) return false;
  return true;
}

void GeneratorSet::require_complete() const {
  std::string missing;
  for (int s = 1; s <= data::kDomainCount; ++s)
    for (int t = 1; t <= data::kDomainCount; ++t)
      if (s != t && !has(s, t)) missing += (missing.empty() ? "" : ", ") + std::to_string(s) + "->" + std::to_string(t);
  if (!missing.empty()) throw Error("generator set is incomplete; missing " + missing);
}

std::vector<augment::Renderer> GeneratorSet::renderers_for(int source, std::span<const int> domains) const {
  std::vector<augment::Renderer> out;
  for (int d : domains) {
    data::check_domain(d);
    if (d == source) out.emplace_back([](const cv::Mat& m) { return m; });
    else out.push_back(make_renderer(get(source, d)));
  }
  return out;
}

namespace {

fs::path generator_file(const fs::path& dir, int s, int t) {
  return dir / ("generator_" + std::to_string(s) + "to" + std::to_string(t) + ".bin");
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

}  // namespace

void save_pair(const fs::path& dir, DomainPair pair, const TrainedPair& trained, const CycleGanConfig& cfg) {
  pair.validate();
  fs::create_directories(dir);
  const std::pair<int, int> dirs[] = {{pair.a, pair.b}, {pair.b, pair.a}};
  for (const auto& [s, t] : dirs) {
    const auto path = generator_file(dir, s, t);
    nn::save_parameters(s == pair.a ? *trained.g_ab : *trained.g_ba, path);
    write_json(fs::path(path.string() + ".json"), {{"config", to_json(cfg)}, {"source", s}, {"target", t}});
  }
  write_json(dir / ("cyclegan_" + std::to_string(pair.a) + "_" + std::to_string(pair.b) + ".json"),
             {{"config", to_json(cfg)}, {"history", trained.history.to_json()}});
}

GeneratorSet load_generator_set(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error("generator directory " + dir.string() + " does not exist");
  GeneratorSet set;
  for (int s = 1; s <= data::kDomainCount; ++s)
    for (int t = 1; t <= data::kDomainCount; ++t) {
      if (s == t) continue;
      const auto path = generator_file(dir, s, t);
      if (!fs::exists(path)) continue;
      std::ifstream is(path.string() + ".json");
      if (!is) throw Error("generator " + path.string() + " has no sidecar");
      const auto meta = nlohmann::json::parse(is);
      auto g = std::make_shared<ResnetGenerator>(cyclegan_config_from_json(meta.at("config")), 0);
      nn::load_parameters(*g, path);
      g->eval();
      set.set(s, t, std::move(g));
    }
  return set;
}

std::vector<ExpandedItem> expand_dataset(const std::vector<data::RoiEntry>& rois, const GeneratorSet& gens,
                                         const fs::path& out_dir) {
  for (const auto& r : rois)
    for (int d = 1; d <= data::kDomainCount; ++d)
      if (d != r.domain) gens.get(r.domain, d);
  fs::create_directories(out_dir);
  std::vector<ExpandedItem> items;
  for (const auto& r : rois) {
    const cv::Mat original = read_color_image(r.image_path);
    for (int d = 1; d <= data::kDomainCount; ++d) {
      const std::string name = r.id + "__dom" + std::to_string(d);
      ExpandedItem item{r.id, d, d != r.domain, out_dir / (name + ".png"), std::nullopt, r.glaucoma};
      if (!item.is_synthetic && r.image_path.extension() == ".png")
        fs::copy_file(r.image_path, item.path, fs::copy_options::overwrite_existing);
      else if (!item.is_synthetic)
        write_image(item.path, original);
      else
        write_image(item.path, make_renderer(gens.get(r.domain, d))(original));
      if (r.mask_path) {
        fs::create_directories(out_dir / "masks");
        item.mask_path = out_dir / "masks" / (name + r.mask_path->extension().string());
        fs::copy_file(*r.mask_path, *item.mask_path, fs::copy_options::overwrite_existing);
      }
      items.push_back(std::move(item));
    }
  }
  write_expanded_index(items, out_dir / "index.csv");
  return items;
}

void write_expanded_index(const std::vector<ExpandedItem>& items, const fs::path& path) {
  const fs::path dir = path.parent_path();
  CsvTable t({"original_id", "rendered_domain", "is_synthetic", "path", "mask_path", "glaucoma"});
  for (const auto& i : items)
    t.add_row({i.original_id, std::to_string(i.rendered_domain), i.is_synthetic ? "1" : "0",
               data::relative_if_inside(i.path, dir).string(),
               i.mask_path ? data::relative_if_inside(*i.mask_path, dir).string() : "",
               i.glaucoma ? (*i.glaucoma ? "1" : "0") : ""});
  if (!dir.empty()) fs::create_directories(dir);
  t.write(path);
}

std::vector<ExpandedItem> read_expanded_index(const fs::path& path) {
  const CsvTable t = CsvTable::read(path);
  const std::size_t c_id = t.require_column("original_id"), c_dom = t.require_column("rendered_domain"),
                    c_syn = t.require_column("is_synthetic"), c_path = t.require_column("path");
  const auto c_mask = t.column("mask_path"), c_gl = t.column("glaucoma");
  const fs::path dir = path.parent_path();
  auto resolve = [&dir](const std::string& s) {
    fs::path p(s);
    return p.is_absolute() ? p : dir / p;
  };
  std::vector<ExpandedItem> out;
  for (const auto& row : t.rows()) {
    ExpandedItem i;
    i.original_id = row[c_id];
    try {
      i.rendered_domain = std::stoi(row[c_dom]);
    } catch (const std::exception&) {
      throw Error(path.string() + ": malformed rendered_domain '" + row[c_dom] + "'");
    }
    data::check_domain(i.rendered_domain);
    if (row[c_syn] != "0" && row[c_syn] != "1") throw Error(path.string() + ": is_synthetic must be 0 or 1");
    i.is_synthetic = row[c_syn] == "1";
    i.path = resolve(row[c_path]);
    if (!fs::exists(i.path)) throw Error(path.string() + ": missing image " + i.path.string());
    if (c_mask && !row[*c_mask].empty()) i.mask_path = resolve(row[*c_mask]);
    if (c_gl && !row[*c_gl].empty()) {
      if (row[*c_gl] != "0" && row[*c_gl] != "1") throw Error(path.string() + ": glaucoma must be 0 or 1");
      i.glaucoma = row[*c_gl] == "1";
    }
    out.push_back(std::move(i));
  }
  return out;
}

}  // namespace fundus::transfer
