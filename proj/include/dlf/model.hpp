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

#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dlf/autodiff.hpp"
#include "dlf/layers.hpp"
#include "dlf/parameter.hpp"

namespace dlf {

enum class ModelMode { image, flat };

struct ModelConfig {
  ModelMode mode = ModelMode::flat;
  std::size_t height = 1, width = 1, channels = 2;  // flat mode: channels is D
  std::size_t levels = 1;                           // L
  std::size_t steps = 32;                           // H, flows per level
  std::size_t partitions = 2;                       // K
  std::size_t hidden = 64;                          // c
  int n_bits = 8;
  DynLinVariant variant = DynLinVariant::standard;
  std::size_t num_classes = 0;  // 0: unconditional
  bool actnorm = false;         // insert actnorm before each 1x1 convolution
  bool actnorm_data_init = true;
  std::uint64_t seed = 0;

  std::size_t dims() const { return height * width * channels; }
  bool conditional() const { return num_classes > 0; }

  static ModelConfig flat(std::size_t d, std::size_t steps, std::size_t k, std::size_t hidden = 64) {
    ModelConfig c;
    c.mode = ModelMode::flat;
    c.channels = d;
    c.steps = steps;
    c.partitions = k;
    c.hidden = hidden;
    return c;
  }

  static ModelConfig image(std::size_t h, std::size_t w, std::size_t ch, std::size_t levels, std::size_t steps,
                           std::size_t k, std::size_t hidden = 32) {
    ModelConfig c;
    c.mode = ModelMode::image;
    c.height = h;
    c.width = w;
    c.channels = ch;
    c.levels = levels;
    c.steps = steps;
    c.partitions = k;
    c.hidden = hidden;
    return c;
  }
};

// Shape (H, W, C) and flat offset of one factored latent.
struct LatentSlot {
  std::size_t height, width, channels, offset;
  std::size_t size() const { return height * width * channels; }
};

struct ForwardPass {
  std::vector<ad::Var> latents;       // registry order
  std::vector<ad::Var> layer_logdets;  // one [N] entry per layer
  ad::Var logdet;                      // [N]
  ad::Var log_prior;                   // [N]
  ad::Var nll;                         // [N], nats
};

struct LogLikelihood {
  Tensor nll;                                // [N], nats
  std::optional<Tensor> bits_per_dim;        // image mode only
};

struct Sample {
  Tensor x;  // decoded batch
  Tensor z;  // [n, total latent dim]
};

inline Tensor one_hot(const std::vector<int>& labels, std::size_t num_classes) {
  Tensor t(Shape{labels.size(), num_classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw ContractError("one_hot: label " + std::to_string(labels[i]) + " outside [0," +
                          std::to_string(num_classes) + ")");
    }
    t[i * num_classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return t;
}

// Multi-scale stack: per level squeeze, H x (1x1 conv, dynamic linear), split
// (except after the last level). Flat mode stacks H x (1x1 conv, dynamic linear).
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(cfg) {
    validate();
    std::mt19937_64 rng(cfg_.seed);
    DynLinConfig dcfg;
    dcfg.partitions = cfg_.partitions;
    dcfg.variant = cfg_.variant;
    dcfg.hidden = cfg_.hidden;
    dcfg.flat = cfg_.mode == ModelMode::flat;
    dcfg.cond = cfg_.conditional() ? CondSpec::classes(cfg_.num_classes) : CondSpec::none();

    std::size_t h = cfg_.height, w = cfg_.width, c = cfg_.channels;
    std::size_t offset = 0;
    const std::size_t levels = cfg_.mode == ModelMode::flat ? 1 : cfg_.levels;
    for (std::size_t l = 0; l < levels; ++l) {
      const std::string lp = "level" + std::to_string(l);
      if (cfg_.mode == ModelMode::image) {
        layers_.push_back(std::make_unique<Squeeze>(lp + "/squeeze"));
        h /= 2;
        w /= 2;
        c *= 4;
      }
      for (std::size_t s = 0; s < cfg_.steps; ++s) {
        const std::string sp = lp + "/step" + std::to_string(s);
        if (cfg_.actnorm) layers_.push_back(std::make_unique<ActNorm>(c, cfg_.actnorm_data_init, sp + "/actnorm"));
        layers_.push_back(std::make_unique<Inv1x1>(c, rng, sp + "/inv1x1"));
        layers_.push_back(std::make_unique<DynamicLinear>(c, dcfg, rng, sp + "/dynlin"));
      }
      if (l + 1 < levels) {
        layers_.push_back(std::make_unique<Split>(lp + "/split"));
        latents_.push_back({h, w, c / 2, offset});
        offset += h * w * (c / 2);
        c /= 2;
      }
    }
    latents_.push_back({h, w, c, offset});
    total_latent_ = offset + h * w * c;
  }

  const ModelConfig& config() const { return cfg_; }
  const std::vector<std::unique_ptr<FlowLayer>>& layers() const { return layers_; }
  const std::vector<LatentSlot>& latent_slots() const { return latents_; }
  std::size_t latent_dim() const { return total_latent_; }
  std::size_t input_dim() const { return cfg_.dims(); }

  ParamList parameters() const {
    ParamList p;
    for (const auto& layer : layers_) append(p, layer->parameters());
    return p;
  }

  std::size_t parameter_count() const { return count_scalars(parameters()); }

  // Graph-recording forward pass; x is the (dequantized) batch.
  ForwardPass forward(const ad::Var& x, const ad::Var& cond = {}) {
    check_batch(x.shape());
    check_condition(cond, x.shape()[0]);
    const std::size_t n = x.shape()[0];
    ForwardPass out;
    ad::Var h = x;
    out.logdet = ad::constant(Tensor(Shape{n}));
    for (const auto& layer : layers_) {
      LayerOutput lo = layer->forward(h, layer->kind() == LayerKind::dynlin ? cond : ad::Var());
      if (!lo.y.value().all_finite() || !lo.logdet.value().all_finite()) {
        throw NumericError("non-finite output in layer " + layer->name());
      }
      if (lo.factored.defined()) out.latents.push_back(lo.factored);
      out.layer_logdets.push_back(lo.logdet);
      out.logdet = ad::add(out.logdet, lo.logdet);
      h = lo.y;
    }
    out.latents.push_back(h);
    out.log_prior = ad::constant(Tensor(Shape{n}));
    for (const auto& z : out.latents) out.log_prior = ad::add(out.log_prior, standard_normal_logpdf(z));
    out.nll = ad::neg(ad::add(out.log_prior, out.logdet));
    return out;
  }

  // Mean NLL (nats) over the batch, ready for backward().
  ad::Var loss(const Tensor& batch, const std::optional<Tensor>& cond = std::nullopt) {
    return ad::mean(forward(ad::constant(batch), cond_var(cond)).nll);
  }

  LogLikelihood log_likelihood(const Tensor& batch, const std::optional<Tensor>& cond = std::nullopt) {
    ad::NoGradGuard guard;
    ForwardPass fp = forward(ad::constant(batch), cond_var(cond));
    LogLikelihood ll{fp.nll.value(), std::nullopt};
    if (cfg_.mode == ModelMode::image) ll.bits_per_dim = bits_per_dim(ll.nll);
    return ll;
  }

  // nll / (D ln 2) + n_bits: dequantized data lives on [0,1)^D, each discrete
  // value owning a cell of volume 2^(-n_bits D).
  Tensor bits_per_dim(const Tensor& nll) const {
    Tensor bpd = nll;
    const double denom = static_cast<double>(input_dim()) * std::numbers::ln2;
    for (double& v : bpd.data()) v = v / denom + cfg_.n_bits;
    return bpd;
  }

  // [N, latent_dim], latents concatenated in registry order.
  Tensor encode(const Tensor& x, const std::optional<Tensor>& cond = std::nullopt) {
    ad::NoGradGuard guard;
    ForwardPass fp = forward(ad::constant(x), cond_var(cond));
    const std::size_t n = x.dim(0);
    Tensor z(Shape{n, total_latent_});
    for (std::size_t i = 0; i < latents_.size(); ++i) {
      const Tensor& part = fp.latents[i].value();
      const std::size_t len = latents_[i].size();
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t q = 0; q < len; ++q) z[b * total_latent_ + latents_[i].offset + q] = part[b * len + q];
      }
    }
    return z;
  }

  Tensor decode(const Tensor& z, const std::optional<Tensor>& cond = std::nullopt) const {
    if (z.rank() != 2 || z.dim(1) != total_latent_) {
      throw ContractError("decode: latent must be [N," + std::to_string(total_latent_) + "], got " +
                          to_string(z.shape()));
    }
    const std::size_t n = z.dim(0);
    ad::NoGradGuard guard;
    const ad::Var c = cond_var(cond);
    check_condition(c, n);
    auto slot_tensor = [&](const LatentSlot& s) {
      Tensor t(Shape{n, s.height, s.width, s.channels});
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t q = 0; q < s.size(); ++q) t[b * s.size() + q] = z[b * total_latent_ + s.offset + q];
      }
      return t;
    };
    std::size_t next = latents_.size() - 1;
    Tensor h = slot_tensor(latents_[next]);
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      const FlowLayer& layer = **it;
      if (layer.kind() == LayerKind::split) {
        h = static_cast<const Split&>(layer).merge(h, slot_tensor(latents_[--next]));
      } else {
        h = layer.inverse(h, layer.kind() == LayerKind::dynlin ? c : ad::Var());
      }
    }
    return h;
  }

  template <class Rng>
  Sample sample(std::size_t n, double temperature, Rng& rng, const std::optional<Tensor>& cond = std::nullopt) const {
    if (!std::isfinite(temperature) || temperature < 0.0) {
      throw ContractError("sample: temperature must be finite and non-negative");
    }
    Tensor z(Shape{n, total_latent_});
    if (temperature > 0.0) {
      for (double& v : z.data()) v = temperature * std::normal_distribution<double>(0.0, 1.0)(rng);
    }
    Tensor x = decode(z, cond);
    return {std::move(x), std::move(z)};
  }

  // Decodes (1-t) z_a + t z_b on a uniform grid of `steps` points in [0, 1].
  std::vector<Tensor> interpolate(const Tensor& xa, const Tensor& xb, std::size_t steps,
                                  const std::optional<Tensor>& cond = std::nullopt) {
    if (steps < 2) throw ContractError("interpolate: steps must be at least 2");
    xa.require_same_shape(xb, "interpolate");
    const Tensor za = encode(xa, cond);
    const Tensor zb = encode(xb, cond);
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < steps; ++i) {
      const double t = static_cast<double>(i) / static_cast<double>(steps - 1);
      Tensor z(za.shape());
      for (std::size_t q = 0; q < z.size(); ++q) z[q] = (1.0 - t) * za[q] + t * zb[q];
      out.push_back(decode(z, cond));
    }
    return out;
  }

  Shape input_shape(std::size_t n) const { return Shape{n, cfg_.height, cfg_.width, cfg_.channels}; }

 private:
  void validate() const {
    const auto& c = cfg_;
    if (c.partitions == 0 || c.steps == 0 || c.hidden == 0 || c.channels == 0 || c.height == 0 || c.width == 0) {
      throw ConfigError("K, steps, hidden channels and input extents must be positive");
    }
    if (c.n_bits < 1 || c.n_bits > 16) throw ConfigError("n_bits must be in [1, 16]");
    if (c.mode == ModelMode::flat) {
      if (c.levels != 1) throw ConfigError("flat mode requires L = 1");
      if (c.height != 1 || c.width != 1) throw ConfigError("flat mode requires a 1x1 spatial extent");
      if (c.channels % c.partitions != 0) {
        throw ConfigError("flat mode: D=" + std::to_string(c.channels) + " is not divisible by K=" +
                          std::to_string(c.partitions));
      }
      return;
    }
    if (c.levels == 0) throw ConfigError("image mode requires L >= 1");
    std::size_t h = c.height, w = c.width, ch = c.channels;
    for (std::size_t l = 0; l < c.levels; ++l) {
      const std::string where = "level " + std::to_string(l);
      if (h % 2 != 0 || w % 2 != 0) {
        throw ConfigError(where + ": spatial extent " + std::to_string(h) + "x" + std::to_string(w) +
                          " is not divisible by 2 (H and W must be divisible by 2^L)");
      }
      h /= 2;
      w /= 2;
      ch *= 4;
      if (ch % c.partitions != 0) {
        throw ConfigError(where + ": " + std::to_string(ch) + " channels are not divisible by K=" +
                          std::to_string(c.partitions));
      }
      if (l + 1 < c.levels) {
        if (ch % 2 != 0) throw ConfigError(where + ": odd channel count " + std::to_string(ch) + " cannot be split");
        ch /= 2;
      }
    }
  }

  void check_batch(const Shape& s) const {
    if (s.size() != 4 || s[1] != cfg_.height || s[2] != cfg_.width || s[3] != cfg_.channels) {
      throw ContractError("model input must be [N," + std::to_string(cfg_.height) + "," + std::to_string(cfg_.width) +
                          "," + std::to_string(cfg_.channels) + "], got " + to_string(s));
    }
  }

  void check_condition(const ad::Var& cond, std::size_t n) const {
    if (cfg_.conditional() != cond.defined()) {
      throw ContractError(cfg_.conditional() ? "conditional model requires a class condition"
                                             : "unconditional model was given a condition");
    }
    if (cond.defined() && (cond.shape().size() != 2 || cond.shape()[0] != n || cond.shape()[1] != cfg_.num_classes)) {
      throw ContractError("condition must be one-hot [N," + std::to_string(cfg_.num_classes) + "], got " +
                          to_string(cond.shape()));
    }
  }

  static ad::Var cond_var(const std::optional<Tensor>& cond) {
    return cond ? ad::constant(*cond) : ad::Var();
  }

  ModelConfig cfg_;
  std::vector<std::unique_ptr<FlowLayer>> layers_;
  std::vector<LatentSlot> latents_;
  std::size_t total_latent_ = 0;
};

inline std::unique_ptr<Model> build_model(const ModelConfig& cfg) { return std::make_unique<Model>(cfg); }

}  // namespace dlf
