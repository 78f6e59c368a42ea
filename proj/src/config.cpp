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

#include "fundus/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "fundus/data.hpp"
#include "fundus/tensor.hpp"

namespace fs = std::filesystem;

namespace fundus::config {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// Drops a trailing comment outside quotes.
std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted && (i == 0 || line[i - 1] == ' ' || line[i - 1] == '\t')) return line.substr(0, i);
  }
  return line;
}

bool valid_key(const std::string& key) {
  if (key.empty() || key.front() == '.' || key.back() == '.') return false;
  return std::all_of(key.begin(), key.end(),
                     [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.'; });
}

std::string format_value(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_null()) return "auto";
  if (v.is_array()) {
    std::string out;
    for (const auto& x : v) out += (out.empty() ? "" : ",") + x.dump();
    return out;
  }
  if (v.is_number_float()) {
    // values stored as float print in their shortest float form
    const double d = v.get<double>();
    const float f = static_cast<float>(d);
    if (static_cast<double>(f) == d) {
      char buf[32];
      const auto res = std::to_chars(buf, buf + sizeof(buf), f);
      std::string s(buf, res.ptr);
      if (s.find_first_of(".e") == std::string::npos) s += ".0";
      return s;
    }
  }
  return v.dump();
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(trim(part));
  return out;
}

fs::path resolve(const std::string& value, const fs::path& base) {
  if (value.empty()) return {};
  const fs::path p(value);
  return p.is_absolute() ? p : (base / p).lexically_normal();
}

}  // namespace

KeyValues KeyValues::parse(std::string_view text, const std::string& source) {
  KeyValues kv;
  kv.source_ = source;
  std::stringstream ss{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(ss, raw)) {
    ++line_no;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string at = source + ":" + std::to_string(line_no);
    if (eq == std::string::npos) throw Error(at + ": expected 'key = value'");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    std::string value = trim(std::string_view(line).substr(eq + 1));
    if (!valid_key(key)) throw Error(at + ": invalid key '" + key + "'");
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (kv.entries_.count(key)) throw Error(at + ": duplicate key '" + key + "'");
    kv.entries_[key] = {value, line_no};
  }
  return kv;
}

KeyValues KeyValues::read(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void KeyValues::set(const std::string& key, const std::string& value) {
  if (!valid_key(key)) throw Error("invalid key '" + key + "'");
  entries_[key] = {value, 0};
}

std::optional<std::string> KeyValues::take(const std::string& key) {
  const auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  consumed_.insert(key);
  return it->second.value;
}

std::vector<std::string> KeyValues::section_keys(const std::string& section) const {
  std::vector<std::string> out;
  const std::string prefix = section + ".";
  for (const auto& [k, e] : entries_)
    if (k.rfind(prefix, 0) == 0) out.push_back(k.substr(prefix.size()));
  return out;
}

void KeyValues::require_all_consumed() const {
  std::string unknown;
  for (const auto& [k, e] : entries_)
    if (!consumed_.count(k)) unknown += (unknown.empty() ? "" : ", ") + k + " (" + where(k) + ")";
  if (!unknown.empty()) throw Error("unknown config keys: " + unknown);
}

std::string KeyValues::where(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end() || it->second.line == 0) return source_;
  return source_ + ":" + std::to_string(it->second.line);
}

bool parse_bool(const std::string& text, const std::string& what) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw Error(what + ": expected a boolean, got '" + text + "'");
}

long long parse_int(const std::string& text, const std::string& what) {
  long long v = 0;
  const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || p != text.data() + text.size() || text.empty())
    throw Error(what + ": expected an integer, got '" + text + "'");
  return v;
}

double parse_double(const std::string& text, const std::string& what) {
  double v = 0;
  const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || p != text.data() + text.size() || text.empty())
    throw Error(what + ": expected a number, got '" + text + "'");
  return v;
}

nlohmann::json overlay_section(KeyValues& kv, const std::string& section, nlohmann::json defaults,
                               const std::set<std::string>& skip) {
  for (const auto& name : kv.section_keys(section)) {
    if (skip.count(name)) continue;
    const std::string key = section + "." + name;
    const std::string what = key + " (" + kv.where(key) + ")";
    if (!defaults.contains(name)) throw Error("unknown config key " + what);
    const std::string value = *kv.take(key);
    nlohmann::json& slot = defaults[name];
    if (slot.is_boolean())
      slot = parse_bool(value, what);
    else if (slot.is_number_integer())
      slot = parse_int(value, what);
    else if (slot.is_number())
      slot = parse_double(value, what);
    else if (slot.is_string())
      slot = value;
    else if (value == "auto" || value.empty())
      slot = nullptr;
    else {
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& part : split_list(value)) arr.push_back(parse_double(part, what));
      slot = arr;
    }
  }
  return defaults;
}

void PipelineConfig::validate() const {
  if (data_root.empty() == manifest.empty()) throw Error("config: set exactly one of data.root and data.manifest");
  data::parse_layout(layout);
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw Error("config: data.val_fraction must lie in (0, 1)");
  if (roi_size < 8) throw Error("config: roi.size must be at least 8");
  if (work_dir.empty()) throw Error("config: work_dir is empty");
  if (tta.n_transforms < 1) throw Error("config: tta.n_transforms must be positive");
  if (tta_domains.empty()) throw Error("config: tta.domains is empty");
  std::set<int> seen;
  for (int d : tta_domains) {
    data::check_domain(d);
    if (!seen.insert(d).second) throw Error("config: tta.domains repeats domain " + std::to_string(d));
  }
  localizer.validate();
  cyclegan.validate();
  classifier.validate();
  segmenter.validate();
}

PipelineConfig parse_pipeline_config(KeyValues kv, const fs::path& base_dir) {
  PipelineConfig c;
  auto str = [&kv](const std::string& key, std::string& out) {
    if (auto v = kv.take(key)) out = *v;
  };
  auto path = [&kv, &base_dir](const std::string& key, fs::path& out) {
    if (auto v = kv.take(key)) out = resolve(*v, base_dir);
  };
  auto flag = [&kv](const std::string& key, bool& out) {
    if (auto v = kv.take(key)) out = parse_bool(*v, key + " (" + kv.where(key) + ")");
  };
  auto integer = [&kv](const std::string& key, auto& out) {
    if (auto v = kv.take(key)) out = static_cast<std::remove_reference_t<decltype(out)>>(parse_int(*v, key + " (" + kv.where(key) + ")"));
  };

  if (auto v = kv.take("seed")) {
    const long long s = parse_int(*v, "seed (" + kv.where("seed") + ")");
    if (s < 0) throw Error("config: seed must be non-negative");
    c.seed = static_cast<std::uint64_t>(s);
  }
  path("work_dir", c.work_dir);
  path("data.root", c.data_root);
  str("data.layout", c.layout);
  path("data.manifest", c.manifest);
  flag("data.permissive_sizes", c.permissive_sizes);
  if (auto v = kv.take("data.val_fraction")) c.val_fraction = parse_double(*v, "data.val_fraction");
  path("data.eval_key", c.eval_key);
  integer("roi.size", c.roi_size);
  flag("stages.localize", c.stages.localize);
  flag("stages.cyclegan", c.stages.cyclegan);
  flag("stages.classify", c.stages.classify);
  flag("stages.segment", c.stages.segment);

  flag("localizer.augment", c.localizer_augment);
  c.localizer = heatmap::hourglass_config_from_json(overlay_section(kv, "localizer", heatmap::to_json(c.localizer), {"augment"}));
  c.cyclegan = transfer::cyclegan_config_from_json(overlay_section(kv, "cyclegan", transfer::to_json(c.cyclegan)));

  flag("classifier.augment", c.classifier_augment);
  bool allow_random = false;
  flag("classifier.allow_random_init", allow_random);
  fs::path pretrained;
  path("classifier.pretrained", pretrained);
  c.classifier = classifier::classifier_config_from_json(overlay_section(
      kv, "classifier", classifier::to_json(c.classifier), {"augment", "allow_random_init", "pretrained"}));
  c.classifier.allow_random_init = allow_random;
  c.classifier.pretrained = pretrained;

  flag("segmenter.augment", c.segmenter_augment);
  c.segmenter = segmenter::seg_config_from_json(overlay_section(kv, "segmenter", segmenter::to_json(c.segmenter), {"augment"}));

  integer("tta.n_transforms", c.tta.n_transforms);
  if (auto v = kv.take("tta.seed")) c.tta.seed = static_cast<std::uint64_t>(parse_int(*v, "tta.seed"));
  if (auto v = kv.take("tta.domains")) {
    c.tta_domains.clear();
    for (const auto& part : split_list(*v)) c.tta_domains.push_back(static_cast<int>(parse_int(part, "tta.domains")));
  }
  kv.require_all_consumed();
  return c;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  return parse_pipeline_config(KeyValues::read(path), fs::absolute(path).parent_path());
}

std::string to_text(const PipelineConfig& c) {
  std::ostringstream out;
  auto line = [&out](const std::string& k, const std::string& v) { out << k << " = " << v << '\n'; };
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  auto section = [&](const std::string& name, const nlohmann::json& j) {
    out << '\n';
    for (const auto& [k, v] : j.items()) line(name + "." + k, format_value(v));
  };
  line("seed", std::to_string(c.seed));
  line("work_dir", c.work_dir.string());
  out << '\n';
  if (!c.data_root.empty()) line("data.root", c.data_root.string());
  if (!c.manifest.empty()) line("data.manifest", c.manifest.string());
  line("data.layout", c.layout);
  line("data.permissive_sizes", b(c.permissive_sizes));
  line("data.val_fraction", nlohmann::json(c.val_fraction).dump());
  if (!c.eval_key.empty()) line("data.eval_key", c.eval_key.string());
  line("roi.size", std::to_string(c.roi_size));
  out << '\n';
  line("stages.localize", b(c.stages.localize));
  line("stages.cyclegan", b(c.stages.cyclegan));
  line("stages.classify", b(c.stages.classify));
  line("stages.segment", b(c.stages.segment));

  section("localizer", heatmap::to_json(c.localizer));
  line("localizer.augment", b(c.localizer_augment));
  section("cyclegan", transfer::to_json(c.cyclegan));
  section("classifier", classifier::to_json(c.classifier));
  line("classifier.augment", b(c.classifier_augment));
  line("classifier.allow_random_init", b(c.classifier.allow_random_init));
  if (!c.classifier.pretrained.empty()) line("classifier.pretrained", c.classifier.pretrained.string());
  section("segmenter", segmenter::to_json(c.segmenter));
  line("segmenter.augment", b(c.segmenter_augment));

  out << '\n';
  line("tta.n_transforms", std::to_string(c.tta.n_transforms));
  line("tta.seed", std::to_string(c.tta.seed));
  std::string domains;
  for (int d : c.tta_domains) domains += (domains.empty() ? "" : ",") + std::to_string(d);
  line("tta.domains", domains);
  return out.str();
}

PipelineConfig synthetic_preset() {
  PipelineConfig c;
  c.permissive_sizes = true;
  c.roi_size = 80;

  c.localizer.input_size = 64;
  c.localizer.channels = 16;
  c.localizer.depth = 3;
  c.localizer.trunk_stride = 2;
  c.localizer.gaussian_variance = 100.0 * (64.0 / 256.0) * (64.0 / 256.0);
  c.localizer.batch_size = 4;
  c.localizer.max_epochs = 120;
  c.localizer.lr_decay_every = 80;
  c.localizer.early_stop_patience = 1000;

  c.cyclegan.image_size = 32;
  c.cyclegan.generator_channels = 8;
  c.cyclegan.residual_blocks = 3;
  c.cyclegan.discriminator_channels = 8;
  c.cyclegan.discriminator_layers = 2;
  c.cyclegan.learning_rate = 1e-3;
  c.cyclegan.epochs = 60;
  c.cyclegan.decay_epochs = 30;
  c.cyclegan.load_scale = 36.0 / 32.0;

  c.classifier.input_size = 75;
  c.classifier.width = 0.125;
  c.classifier.learning_rate = 1e-3;
  c.classifier.lr_decay_every = 150;
  c.classifier.early_stop_patience = 1000;
  c.classifier.batch_size = 8;
  c.classifier.max_epochs = 200;
  c.classifier.freeze_boundary = "Conv2d_4a_3x3";
  c.classifier.dropout = 0.0f;
  c.classifier.allow_random_init = true;
  // the best-validation checkpoint of an augmented run can miss a training item
  c.classifier_augment = false;

  c.segmenter.input_size = 64;
  c.segmenter.base_channels = 8;
  c.segmenter.depth = 3;
  c.segmenter.batch_size = 4;
  c.segmenter.max_epochs = 80;
  c.segmenter.lr_decay_every = 60;
  c.segmenter.early_stop_patience = 1000;
  return c;
}

}  // namespace fundus::config
