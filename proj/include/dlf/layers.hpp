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

// Invertible layers. Each maps an NHWC batch to an NHWC batch and reports a
// per-sample log|det J| of shape [N]. Forward passes are built from autodiff
// ops so they can be trained; inverses run without recording a graph.

#include <cmath>
#include <cstddef>
#include <memory>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dlf/autodiff.hpp"
#include "dlf/coupling_net.hpp"
#include "dlf/linalg.hpp"
#include "dlf/parameter.hpp"

namespace dlf {

enum class LayerKind { actnorm, inv1x1, dynlin, squeeze, split };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::actnorm:
      return "actnorm";
    case LayerKind::inv1x1:
      return "inv1x1";
    case LayerKind::dynlin:
      return "dynlin";
    case LayerKind::squeeze:
      return "squeeze";
    case LayerKind::split:
      return "split";
  }
  return "?";
}

struct LayerOutput {
  ad::Var y;
  ad::Var logdet;    // [N]
  ad::Var factored;  // split layers only
};

class FlowLayer {
 public:
  explicit FlowLayer(std::string name) : name_(std::move(name)) {}
  virtual ~FlowLayer() = default;
  FlowLayer(const FlowLayer&) = delete;
  FlowLayer& operator=(const FlowLayer&) = delete;

  virtual LayerKind kind() const = 0;
  virtual LayerOutput forward(const ad::Var& x, const ad::Var& cond = {}) = 0;
  virtual Tensor inverse(const Tensor& y, const ad::Var& cond = {}) const = 0;
  virtual ParamList parameters() const { return {}; }

  const std::string& name() const { return name_; }

 protected:
  std::string name_;
};

namespace detail {

inline void require_nhwc(const Shape& s, const std::string& who) {
  if (s.size() != 4) throw ContractError(who + ": expected an NHWC tensor, got " + to_string(s));
}

// Broadcasts a scalar node to a per-sample [N] vector.
inline ad::Var per_sample(const ad::Var& scalar, std::size_t n) {
  return ad::mul(ad::constant(Tensor(Shape{n}, 1.0)), scalar);
}

inline ad::Var zero_logdet(std::size_t n) { return ad::constant(Tensor(Shape{n})); }

}  // namespace detail

// Standard-normal log density summed per sample: -0.5 * sum(z^2) - d/2 * log(2 pi).
inline ad::Var standard_normal_logpdf(const ad::Var& z) {
  const double d = static_cast<double>(z.value().size() / z.shape()[0]);
  return ad::add_scalar(ad::scale(ad::sum_per_sample(ad::square(z)), -0.5),
                        -0.5 * d * std::log(2.0 * std::numbers::pi));
}

// ---------------------------------------------------------------------------
// Actnorm: y = s * x + mu per channel, shared over spatial positions.

struct ActNormParams {
  ad::Var scale;
  ad::Var bias;
  bool initialized = false;
};

class ActNorm final : public FlowLayer {
 public:
  // With data_init the first forward batch sets s, mu so the output has zero
  // mean and unit variance per channel; otherwise s = 1, mu = 0.
  ActNorm(std::size_t channels, bool data_init, std::string name = "actnorm") : FlowLayer(std::move(name)) {
    params_.scale = ad::parameter(Tensor(Shape{channels}, 1.0), name_ + "/scale");
    params_.bias = ad::parameter(Tensor(Shape{channels}, 0.0), name_ + "/bias");
    params_.initialized = !data_init;
  }

  LayerKind kind() const override { return LayerKind::actnorm; }
  const ActNormParams& params() const { return params_; }
  void mark_initialized() { params_.initialized = true; }

  LayerOutput forward(const ad::Var& x, const ad::Var& = {}) override {
    const Shape& s = x.shape();
    detail::require_nhwc(s, name_);
    if (!params_.initialized) initialize_from(x.value());
    check_scale();
    const double spatial = static_cast<double>(s[1] * s[2]);
    ad::Var y = ad::add(ad::mul(x, params_.scale), params_.bias);
    ad::Var logdet = ad::scale(ad::sum(ad::log_abs(params_.scale)), spatial);
    return {y, detail::per_sample(logdet, s[0]), {}};
  }

  Tensor inverse(const Tensor& y, const ad::Var& = {}) const override {
    detail::require_nhwc(y.shape(), name_);
    check_scale();
    ad::NoGradGuard guard;
    return ad::div(ad::sub(ad::constant(y), params_.bias), params_.scale).value();
  }

  ParamList parameters() const override {
    return {{params_.scale.name(), params_.scale}, {params_.bias.name(), params_.bias}};
  }

 private:
  void initialize_from(const Tensor& x) {
    const std::size_t c = x.dim(3);
    const std::size_t rows = x.size() / c;
    std::vector<double> mean(c, 0.0), var(c, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t q = 0; q < c; ++q) mean[q] += x[r * c + q];
    }
    for (double& m : mean) m /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t q = 0; q < c; ++q) var[q] += (x[r * c + q] - mean[q]) * (x[r * c + q] - mean[q]);
    }
    Tensor& scale = params_.scale.mutable_value();
    Tensor& bias = params_.bias.mutable_value();
    for (std::size_t q = 0; q < c; ++q) {
      const double sd = std::max(std::sqrt(var[q] / static_cast<double>(rows)), 1e-6);
      scale[q] = 1.0 / sd;
      bias[q] = -mean[q] / sd;
    }
    params_.initialized = true;
  }

  void check_scale() const {
    for (double v : params_.scale.value().data()) {
      if (v == 0.0) throw DomainError(name_ + ": actnorm scale contains zero");
    }
  }

  ActNormParams params_;
};

// ---------------------------------------------------------------------------
// Invertible 1x1 convolution: y_ij = W x_ij at every spatial position.

class Inv1x1 final : public FlowLayer {
 public:
  template <class Rng>
  Inv1x1(std::size_t channels, Rng& rng, std::string name = "inv1x1") : FlowLayer(std::move(name)) {
    weight_ = ad::parameter(Tensor(Shape{channels, channels}, linalg::random_orthogonal(channels, rng)),
                            name_ + "/weight");
  }

  Inv1x1(Tensor weight, std::string name = "inv1x1") : FlowLayer(std::move(name)) {
    if (weight.rank() != 2 || weight.dim(0) != weight.dim(1)) throw ConfigError(name_ + ": weight must be square");
    weight_ = ad::parameter(std::move(weight), name_ + "/weight");
  }

  LayerKind kind() const override { return LayerKind::inv1x1; }
  const ad::Var& weight() const { return weight_; }
  std::size_t channels() const { return weight_.shape()[0]; }

  LayerOutput forward(const ad::Var& x, const ad::Var& = {}) override {
    const Shape& s = x.shape();
    detail::require_nhwc(s, name_);
    const std::size_t c = channels();
    if (s[3] != c) throw ContractError(name_ + ": expected " + std::to_string(c) + " channels, got " + to_string(s));
    ad::Var log_det_w;
    try {
      log_det_w = ad::logabsdet(weight_, name_);
    } catch (const DomainError& e) {
      throw DomainError(name_ + ": 1x1 convolution weight is singular");
    }
    ad::Var kernel = ad::reshape(ad::transpose(weight_), Shape{1, 1, c, c});
    ad::Var y = ad::conv2d(x, kernel);
    ad::Var logdet = ad::scale(log_det_w, static_cast<double>(s[1] * s[2]));
    return {y, detail::per_sample(logdet, s[0]), {}};
  }

  // Solves W x = y at each position with one LU factorization.
  Tensor inverse(const Tensor& y, const ad::Var& = {}) const override {
    detail::require_nhwc(y.shape(), name_);
    const std::size_t c = channels();
    if (y.dim(3) != c) throw ContractError(name_ + ": channel mismatch in inverse");
    linalg::LuDecomposition lu(weight_.value().data(), c);
    if (lu.singular()) throw DomainError(name_ + ": 1x1 convolution weight is singular");
    Tensor x = y;
    auto data = x.data();
    for (std::size_t off = 0; off < x.size(); off += c) lu.solve_in_place(data.subspan(off, c));
    return x;
  }

  ParamList parameters() const override { return {{weight_.name(), weight_, ParamRole::inv1x1_weight}}; }

 private:
  ad::Var weight_;
};

// ---------------------------------------------------------------------------
// Dynamic linear transformation over K equal channel partitions.
//
//   standard: y_k = s(x_{k-1}) * x_k + mu(x_{k-1}),  x_0 = 1
//   inverse:  y_k = s(y_{k-1}) * x_k + mu(y_{k-1}),  y_0 = 1
//
// The k = 1 pair (s_1, mu_1) is a trainable per-channel constant (the network
// applied to the constant driver); with a condition it also receives V_1 h.

enum class DynLinVariant { standard, inverse };

inline const char* to_string(DynLinVariant v) { return v == DynLinVariant::standard ? "standard" : "inverse"; }

struct DynLinConfig {
  std::size_t partitions = 2;  // K
  DynLinVariant variant = DynLinVariant::standard;
  CondSpec cond;
  bool identity_first = false;  // y_1 = x_1; with K = 2 this is the affine coupling layer
  std::size_t hidden = 64;
  bool flat = false;
};

class DynamicLinear final : public FlowLayer {
 public:
  template <class Rng>
  DynamicLinear(std::size_t channels, DynLinConfig cfg, Rng& rng, std::string name = "dynlin")
      : FlowLayer(std::move(name)), cfg_(cfg), channels_(channels) {
    if (cfg.partitions == 0) throw ConfigError(name_ + ": K must be at least 1");
    if (channels % cfg.partitions != 0) {
      throw ConfigError(name_ + ": channel count " + std::to_string(channels) + " is not divisible by K=" +
                        std::to_string(cfg.partitions));
    }
    part_ = channels / cfg.partitions;
    if (!cfg.identity_first) {
      log_s1_ = ad::parameter(Tensor(Shape{part_}, 0.0), name_ + "/first/log_scale");
      mu1_ = ad::parameter(Tensor(Shape{part_}, 0.0), name_ + "/first/shift");
      if (cfg.cond.enabled()) {
        v1_ = ad::parameter(detail::condition_weight_init(cfg.cond, 2 * part_, cfg.flat, rng), name_ + "/first/cond_v");
      }
    }
    for (std::size_t k = 1; k < cfg.partitions; ++k) {
      nets_.emplace_back(part_, cfg.hidden, part_, cfg.cond, cfg.flat, rng, name_ + "/g" + std::to_string(k + 1));
    }
  }

  LayerKind kind() const override { return LayerKind::dynlin; }
  const DynLinConfig& config() const { return cfg_; }
  std::size_t partition_channels() const { return part_; }
  const std::vector<CouplingNet>& nets() const { return nets_; }
  const ad::Var& first_log_scale() const { return log_s1_; }
  const ad::Var& first_shift() const { return mu1_; }

  LayerOutput forward(const ad::Var& x, const ad::Var& cond = {}) override {
    check_input(x.shape(), cond);
    const std::size_t n = x.shape()[0];
    auto xs = ad::channel_split(x, std::vector<std::size_t>(cfg_.partitions, part_));
    std::vector<ad::Var> ys;
    ad::Var logdet = detail::zero_logdet(n);
    for (std::size_t k = 0; k < cfg_.partitions; ++k) {
      if (k == 0 && cfg_.identity_first) {
        ys.push_back(xs[0]);
        continue;
      }
      const ScaleShift ss = k == 0 ? first_partition(x.shape(), cond)
                                   : nets_[k - 1].apply(cfg_.variant == DynLinVariant::standard ? xs[k - 1] : ys[k - 1],
                                                        cond);
      ys.push_back(ad::add(ad::mul(xs[k], ss.scale), ss.shift));
      logdet = ad::add(logdet, partition_logdet(ss.log_scale, x.shape()));
    }
    return {ad::concat(ys), logdet, {}};
  }

  // Standard variant: sequential in k. Inverse variant: every partition depends
  // only on y, so the partitions are inverted independently.
  Tensor inverse(const Tensor& y, const ad::Var& cond = {}) const override {
    if (cfg_.variant == DynLinVariant::standard) return inverse_sequential(y, cond);
    std::vector<std::size_t> order(cfg_.partitions);
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    return inverse_in_order(y, cond, order);
  }

  // Inverse-variant only: inverts partitions in the given order.
  Tensor inverse_in_order(const Tensor& y, const ad::Var& cond, const std::vector<std::size_t>& order) const {
    if (cfg_.variant != DynLinVariant::inverse) {
      throw ContractError(name_ + ": partition order is only free for the inverse variant");
    }
    check_input(y.shape(), cond);
    ad::NoGradGuard guard;
    auto ys = ad::channel_split(ad::constant(y), std::vector<std::size_t>(cfg_.partitions, part_));
    std::vector<ad::Var> xs(cfg_.partitions);
    for (std::size_t k : order) {
      if (k >= cfg_.partitions || xs[k].defined()) throw ContractError(name_ + ": order is not a permutation of 0..K-1");
      xs[k] = invert_partition(k, ys[k], k == 0 ? ad::Var() : ys[k - 1], y.shape(), cond);
    }
    return ad::concat(xs).value();
  }

  ParamList parameters() const override {
    ParamList p;
    if (log_s1_.defined()) {
      p.push_back({log_s1_.name(), log_s1_});
      p.push_back({mu1_.name(), mu1_});
    }
    if (v1_.defined()) p.push_back({v1_.name(), v1_});
    for (const auto& net : nets_) append(p, net.parameters());
    return p;
  }

  // Per-partition (s_k, mu_k) for a given driver; k = 0 ignores the driver.
  ScaleShift scale_shift(std::size_t k, const ad::Var& driver, const Shape& shape, const ad::Var& cond) const {
    return k == 0 ? first_partition(shape, cond) : nets_[k - 1].apply(driver, cond);
  }

 private:
  void check_input(const Shape& s, const ad::Var& cond) const {
    detail::require_nhwc(s, name_);
    if (s[3] != channels_) {
      throw ContractError(name_ + ": expected " + std::to_string(channels_) + " channels, got " + to_string(s));
    }
    if (cfg_.cond.enabled() != cond.defined()) {
      throw ContractError(name_ + (cond.defined() ? ": condition given to an unconditional layer"
                                                  : ": conditional layer called without a condition"));
    }
  }

  ScaleShift first_partition(const Shape& shape, const ad::Var& cond) const {
    if (!cfg_.cond.enabled()) return {ad::exp(log_s1_), log_s1_, mu1_};
    Shape part_shape = shape;
    part_shape[3] = part_;
    detail::check_condition(cfg_.cond, cond, part_shape, name_);
    auto term = ad::channel_split(detail::condition_term(cfg_.cond, cond, v1_, shape[1], shape[2]), {part_, part_});
    ad::Var log_scale = ad::add(term[0], log_s1_);
    return {ad::exp(log_scale), log_scale, ad::add(term[1], mu1_)};
  }

  ad::Var partition_logdet(const ad::Var& log_scale, const Shape& shape) const {
    if (log_scale.shape().size() == 1) {
      // Unconditional first partition: one log-scale per channel, shared spatially.
      return detail::per_sample(ad::scale(ad::sum(log_scale), static_cast<double>(shape[1] * shape[2])), shape[0]);
    }
    return ad::sum_per_sample(log_scale);
  }

  ad::Var invert_partition(std::size_t k, const ad::Var& yk, const ad::Var& driver, const Shape& shape,
                           const ad::Var& cond) const {
    if (k == 0 && cfg_.identity_first) return yk;
    const ScaleShift ss = scale_shift(k, driver, shape, cond);
    for (double v : ss.scale.value().data()) {
      if (v == 0.0) throw DomainError(name_ + ": partition " + std::to_string(k + 1) + " has a zero scale");
    }
    return ad::div(ad::sub(yk, ss.shift), ss.scale);
  }

  Tensor inverse_sequential(const Tensor& y, const ad::Var& cond) const {
    check_input(y.shape(), cond);
    ad::NoGradGuard guard;
    auto ys = ad::channel_split(ad::constant(y), std::vector<std::size_t>(cfg_.partitions, part_));
    std::vector<ad::Var> xs;
    for (std::size_t k = 0; k < cfg_.partitions; ++k) {
      xs.push_back(invert_partition(k, ys[k], k == 0 ? ad::Var() : xs[k - 1], y.shape(), cond));
    }
    return ad::concat(xs).value();
  }

  DynLinConfig cfg_;
  std::size_t channels_;
  std::size_t part_ = 0;
  ad::Var log_s1_, mu1_, v1_;
  std::vector<CouplingNet> nets_;
};

// Classic affine coupling: y_1 = x_1, y_2 = x_2 * s(x_1) + mu(x_1).
inline LayerOutput affine_coupling_forward(const ad::Var& x, const CouplingNet& net, const ad::Var& cond = {}) {
  const std::size_t c = x.shape()[3];
  auto xs = ad::channel_split(x, {c / 2, c - c / 2});
  const ScaleShift ss = net.apply(xs[0], cond);
  ad::Var y2 = ad::add(ad::mul(xs[1], ss.scale), ss.shift);
  return {ad::concat({xs[0], y2}), ad::sum_per_sample(ss.log_scale), {}};
}

// ---------------------------------------------------------------------------
// Squeeze: N x H x W x C -> N x H/2 x W/2 x 4C, output channel c*4 + 2*dy + dx.

namespace detail {

inline std::vector<std::size_t> squeeze_index(const Shape& in) {
  const std::size_t n = in[0], h = in[1], w = in[2], c = in[3];
  const std::size_t oh = h / 2, ow = w / 2, oc = 4 * c;
  std::vector<std::size_t> index(n * h * w * c);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        for (std::size_t q = 0; q < c; ++q) {
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t out = ((b * oh + i) * ow + j) * oc + q * 4 + 2 * dy + dx;
              index[out] = ((b * h + 2 * i + dy) * w + 2 * j + dx) * c + q;
            }
          }
        }
      }
    }
  }
  return index;
}

}  // namespace detail

inline ad::Var squeeze(const ad::Var& x) {
  const Shape& s = x.shape();
  detail::require_nhwc(s, "squeeze");
  if (s[1] % 2 != 0 || s[2] % 2 != 0) {
    throw ContractError("squeeze: spatial extent must be even, got " + to_string(s));
  }
  return ad::gather(x, Shape{s[0], s[1] / 2, s[2] / 2, 4 * s[3]}, detail::squeeze_index(s));
}

inline ad::Var unsqueeze(const ad::Var& y) {
  const Shape& s = y.shape();
  detail::require_nhwc(s, "unsqueeze");
  if (s[3] % 4 != 0) throw ContractError("unsqueeze: channel count must be divisible by 4, got " + to_string(s));
  const Shape in{s[0], 2 * s[1], 2 * s[2], s[3] / 4};
  const auto fwd = detail::squeeze_index(in);
  std::vector<std::size_t> inv(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = i;
  return ad::gather(y, in, std::move(inv));
}

class Squeeze final : public FlowLayer {
 public:
  explicit Squeeze(std::string name = "squeeze") : FlowLayer(std::move(name)) {}
  LayerKind kind() const override { return LayerKind::squeeze; }

  LayerOutput forward(const ad::Var& x, const ad::Var& = {}) override {
    return {squeeze(x), detail::zero_logdet(x.shape()[0]), {}};
  }

  Tensor inverse(const Tensor& y, const ad::Var& = {}) const override {
    ad::NoGradGuard guard;
    return unsqueeze(ad::constant(y)).value();
  }
};

// ---------------------------------------------------------------------------
// Split: keeps the first half of the channels, factors out the second half as
// latent variables scored under the standard-normal prior.

class Split final : public FlowLayer {
 public:
  explicit Split(std::string name = "split") : FlowLayer(std::move(name)) {}
  LayerKind kind() const override { return LayerKind::split; }

  LayerOutput forward(const ad::Var& x, const ad::Var& = {}) override {
    const Shape& s = x.shape();
    detail::require_nhwc(s, name_);
    if (s[3] % 2 != 0) throw ConfigError(name_ + ": cannot split an odd channel count " + std::to_string(s[3]));
    auto halves = ad::channel_split(x, {s[3] / 2, s[3] / 2});
    return {halves[0], detail::zero_logdet(s[0]), halves[1]};
  }

  Tensor merge(const Tensor& kept, const Tensor& factored) const {
    ad::NoGradGuard guard;
    return ad::concat({ad::constant(kept), ad::constant(factored)}).value();
  }

  Tensor inverse(const Tensor&, const ad::Var& = {}) const override {
    throw ContractError(name_ + ": split needs the factored latent; use merge()");
  }
};

}  // namespace dlf
