// Copyright 2026 The DLF Authors. All Rights Reserved.
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

// Run configuration as flat `section.key=value` text. Layering, lowest first:
// built-in defaults, dataset preset, config file, command-line overrides.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dlf/errors.hpp"
#include "dlf/model.hpp"
#include "dlf/optim.hpp"

namespace dlf {

inline std::size_t edit_distance(std::string_view a, std::string_view b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

// Closest candidate within a distance of max(2, |word| / 3), or empty.
inline std::string closest_match(std::string_view word, const std::vector<std::string>& candidates) {
  std::string best;
  std::size_t best_d = std::max<std::size_t>(2, word.size() / 3) + 1;
  for (const auto& c : candidates) {
    const std::size_t d = edit_distance(word, c);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::pair<std::string, std::string> split_assignment(std::string_view line, const std::string& where) {
  const auto eq = line.find('=');
  if (eq == std::string_view::npos) throw ConfigError(where + ": expected key=value, got '" + std::string(line) + "'");
  std::string key = trim(line.substr(0, eq));
  if (key.empty()) throw ConfigError(where + ": empty key");
  return {key, trim(line.substr(eq + 1))};
}

}  // namespace detail

// Published full-scale hyperparameters keyed by dataset: partitions, channels, levels and batch size.
struct Preset {
  std::string name;
  std::size_t partitions, hidden, levels, batch_size;
};

inline const std::vector<Preset>& presets() {
  static const std::vector<Preset> table{
      {"mnist", 2, 128, 2, 256},      {"cifar10", 2, 512, 3, 32},       {"cifar10_k4", 4, 308, 3, 32},
      {"cifar10_k6", 6, 246, 3, 32},  {"imagenet32", 2, 512, 3, 32},    {"imagenet64", 2, 384, 4, 24},
      {"celeba256", 2, 128, 6, 8},
  };
  return table;
}

class Config {
 public:
  Config() : values_(defaults()) {}

  static const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> d{
        {"seed", "0"},
        {"preset", "none"},
        {"model.mode", "flat"},
        {"model.height", "1"},
        {"model.width", "1"},
        {"model.channels", "2"},
        {"model.L", "1"},
        {"model.steps", "32"},
        {"model.K", "2"},
        {"model.hidden", "64"},
        {"model.n_bits", "8"},
        {"model.variant", "standard"},
        {"model.num_classes", "0"},
        {"model.actnorm", "false"},
        {"model.actnorm_data_init", "true"},
        {"data.source", "toy2d"},
        {"data.kind", "two_moons"},
        {"data.n", "10000"},
        {"data.channels", "1"},
        {"data.path", ""},
        {"data.labels", ""},
        {"data.resize", "0"},
        {"data.valid_fraction", "0.1"},
        {"data.seed", "0"},
        {"train.batch_size", "64"},
        {"train.lr", "0.005"},
        {"train.warmup", "500"},
        {"train.l2_inv1x1", "0"},
        {"train.clip_norm", "50"},
        {"train.epochs", "0"},
        {"train.max_steps", "0"},
        {"train.eval_batch", "500"},
        {"train.valid_seed", "12345"},
    };
    return d;
  }

  static std::vector<std::string> keys() {
    std::vector<std::string> k;
    for (const auto& [key, v] : defaults()) k.push_back(key);
    return k;
  }

  // Layers file text and overrides over the defaults; a preset named by either
  // sits between the defaults and the file.
  static Config resolve(const std::string& file_text, const std::vector<std::string>& overrides,
                        const std::string& file_name = "config") {
    std::vector<std::pair<std::string, std::string>> file_kv, over_kv;
    std::istringstream in(file_text);
    std::string line;
    for (std::size_t no = 1; std::getline(in, line); ++no) {
      const std::string t = detail::trim(line);
      if (t.empty() || t[0] == '#') continue;
      file_kv.push_back(detail::split_assignment(t, file_name + ":" + std::to_string(no)));
    }
    for (const auto& o : overrides) over_kv.push_back(detail::split_assignment(o, "--override"));
    Config c;
    std::string preset = "none";
    for (const auto* kvs : {&file_kv, &over_kv}) {
      for (const auto& [k, v] : *kvs) {
        if (k == "preset") preset = v;
      }
    }
    c.apply_preset(preset);
    for (const auto* kvs : {&file_kv, &over_kv}) {
      for (const auto& [k, v] : *kvs) c.set(k, v);
    }
    c.validate_values();
    return c;
  }

  static Config from_file(const std::string& path, const std::vector<std::string>& overrides = {}) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return resolve(ss.str(), overrides, path);
  }

  void set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) {
      const std::string hint = closest_match(key, keys());
      throw ConfigError("unknown config key '" + key + "'" + (hint.empty() ? "" : " (did you mean '" + hint + "'?)"));
    }
    it->second = value;
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  std::uint64_t get_u64(const std::string& key) const {
    const std::string& s = get(key);
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
      throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
    }
    return v;
  }

  std::size_t get_size(const std::string& key) const { return static_cast<std::size_t>(get_u64(key)); }

  double get_double(const std::string& key) const {
    const std::string& s = get(key);
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw ConfigError(key + ": expected a number, got '" + s + "'");
  }

  bool get_bool(const std::string& key) const {
    const std::string& s = get(key);
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError(key + ": expected true or false, got '" + s + "'");
  }

  // Sorted key=value lines; parses back to the same configuration.
  std::string dump() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
  }

  ModelConfig model() const {
    ModelConfig m;
    const std::string& mode = get("model.mode");
    if (mode == "flat") {
      m.mode = ModelMode::flat;
    } else if (mode == "image") {
      m.mode = ModelMode::image;
    } else {
      throw ConfigError("model.mode: expected flat or image, got '" + mode + "'");
    }
    m.height = get_size("model.height");
    m.width = get_size("model.width");
    m.channels = get_size("model.channels");
    m.levels = get_size("model.L");
    m.steps = get_size("model.steps");
    m.partitions = get_size("model.K");
    m.hidden = get_size("model.hidden");
    m.n_bits = static_cast<int>(get_size("model.n_bits"));
    m.variant = parse_variant(get("model.variant"));
    m.num_classes = get_size("model.num_classes");
    m.actnorm = get_bool("model.actnorm");
    m.actnorm_data_init = get_bool("model.actnorm_data_init");
    m.seed = get_u64("seed");
    return m;
  }

  AdamConfig optimizer() const {
    AdamConfig a;
    a.lr = get_double("train.lr");
    a.warmup = get_size("train.warmup");
    a.l2_inv1x1 = get_double("train.l2_inv1x1");
    a.clip_norm = get_double("train.clip_norm");
    return a;
  }

  static DynLinVariant parse_variant(const std::string& s) {
    if (s == "standard") return DynLinVariant::standard;
    if (s == "inverse") return DynLinVariant::inverse;
    throw ConfigError("model.variant: expected standard or inverse, got '" + s + "'");
  }

 private:
  void apply_preset(const std::string& name) {
    if (name == "none") return;
    for (const auto& p : presets()) {
      if (p.name != name) continue;
      values_["model.mode"] = "image";
      values_["model.K"] = std::to_string(p.partitions);
      values_["model.hidden"] = std::to_string(p.hidden);
      values_["model.L"] = std::to_string(p.levels);
      values_["train.batch_size"] = std::to_string(p.batch_size);
      return;
    }
    std::vector<std::string> names;
    for (const auto& p : presets()) names.push_back(p.name);
    const std::string hint = closest_match(name, names);
    throw ConfigError("unknown preset '" + name + "'" + (hint.empty() ? "" : " (did you mean '" + hint + "'?)"));
  }

  // Type-checks every typed key so mistakes surface before any work starts.
  void validate_values() const {
    model();
    optimizer();
    get_u64("data.n");
    get_u64("data.channels");
    get_u64("data.resize");
    get_u64("data.seed");
    get_double("data.valid_fraction");
    for (const char* k : {"train.batch_size", "train.epochs", "train.max_steps", "train.eval_batch", "train.valid_seed"}) {
      get_u64(k);
    }
    if (get_size("train.batch_size") == 0) throw ConfigError("train.batch_size must be positive");
    if (get_size("train.eval_batch") == 0) throw ConfigError("train.eval_batch must be positive");
  }

  std::map<std::string, std::string> values_;
};

}  // namespace dlf
