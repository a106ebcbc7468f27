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

#include <cstddef>
#include <string>

#include "dlf/autodiff.hpp"
#include "dlf/parameter.hpp"

namespace dlf {

// How side information h enters a coupling network.
struct CondSpec {
  enum class Kind { none, classes, spatial };
  Kind kind = Kind::none;
  std::size_t channels = 0;  // class count, or channels of a spatial condition

  static CondSpec none() { return {}; }
  static CondSpec classes(std::size_t n) { return {Kind::classes, n}; }
  static CondSpec spatial(std::size_t c) { return {Kind::spatial, c}; }
  bool enabled() const { return kind != Kind::none; }
};

// Per-partition scale and shift. log_scale is carried separately so the
// log-determinant never has to take log(exp(.)).
struct ScaleShift {
  ad::Var scale;
  ad::Var log_scale;
  ad::Var shift;
};

namespace detail {

inline void check_condition(const CondSpec& spec, const ad::Var& cond, const Shape& driver, const std::string& who) {
  if (!spec.enabled()) {
    if (cond.defined()) throw ContractError(who + ": condition given to an unconditional network");
    return;
  }
  if (!cond.defined()) throw ContractError(who + ": conditional network called without a condition");
  const Shape& s = cond.shape();
  if (spec.kind == CondSpec::Kind::classes) {
    if (s.size() != 2 || s[0] != driver[0] || s[1] != spec.channels) {
      throw ContractError(who + ": class condition must be [" + std::to_string(driver[0]) + "," +
                          std::to_string(spec.channels) + "], got " + to_string(s));
    }
  } else if (s.size() != 4 || s[0] != driver[0] || s[1] != driver[1] || s[2] != driver[2] || s[3] != spec.channels) {
    throw ContractError(who + ": spatial condition shape " + to_string(s) + " does not match driver " +
                        to_string(driver));
  }
}

// V.h broadcast over the spatial grid, or a 3x3 convolution of a spatial h.
inline ad::Var condition_term(const CondSpec& spec, const ad::Var& cond, const ad::Var& weight, std::size_t h,
                              std::size_t w) {
  if (spec.kind == CondSpec::Kind::classes) return ad::broadcast_spatial(ad::matmul(cond, weight), h, w);
  return ad::conv2d(cond, weight);
}

template <class Rng>
Tensor condition_weight_init(const CondSpec& spec, std::size_t out_channels, bool flat, Rng&) {
  if (spec.kind == CondSpec::Kind::classes) return Tensor(Shape{spec.channels, out_channels});
  const std::size_t k = flat ? 1 : 3;
  return Tensor(Shape{k, k, spec.channels, out_channels});
}

}  // namespace detail

// g_k: three convolutions (3x3 -> ReLU -> 1x1 -> ReLU -> 3x3) producing
// (log s', mu), squashed as s = exp(alpha * tanh(log s') + beta). In flat mode
// every kernel is 1x1, which makes the network a plain MLP over the feature axis.
class CouplingNet {
 public:
  template <class Rng>
  CouplingNet(std::size_t in_channels, std::size_t hidden, std::size_t partition_channels, CondSpec cond, bool flat,
              Rng& rng, std::string name = "gnet")
      : in_channels_(in_channels), hidden_(hidden), partition_(partition_channels), cond_(cond), flat_(flat),
        name_(std::move(name)) {
    if (in_channels == 0 || hidden == 0 || partition_channels == 0) {
      throw ConfigError(name_ + ": channel counts must be positive");
    }
    if (cond.enabled() && cond.channels == 0) throw ConfigError(name_ + ": condition must have positive size");
    const std::size_t k = flat ? 1 : 3;
    w1_ = ad::parameter(he_normal(Shape{k, k, in_channels, hidden}, k * k * in_channels, rng), name_ + "/conv1/w");
    b1_ = ad::parameter(Tensor(Shape{hidden}), name_ + "/conv1/b");
    w2_ = ad::parameter(he_normal(Shape{1, 1, hidden, hidden}, hidden, rng), name_ + "/conv2/w");
    b2_ = ad::parameter(Tensor(Shape{hidden}), name_ + "/conv2/b");
    // Zero last layer: s = 1, mu = 0 for every input at initialization.
    w3_ = ad::parameter(Tensor(Shape{k, k, hidden, 2 * partition_channels}), name_ + "/conv3/w");
    b3_ = ad::parameter(Tensor(Shape{2 * partition_channels}), name_ + "/conv3/b");
    alpha_ = ad::parameter(Tensor(Shape{1}, 1.0), name_ + "/alpha");
    beta_ = ad::parameter(Tensor(Shape{1}, 0.0), name_ + "/beta");
    if (cond.enabled()) {
      v_ = ad::parameter(detail::condition_weight_init(cond, 2 * partition_channels, flat, rng), name_ + "/cond_v");
    }
  }

  std::size_t in_channels() const { return in_channels_; }
  std::size_t hidden_channels() const { return hidden_; }
  std::size_t partition_channels() const { return partition_; }
  std::size_t output_channels() const { return w3_.shape()[3]; }
  const CondSpec& condition() const { return cond_; }

  // Pre-split output o (with the condition already added).
  ad::Var raw_output(const ad::Var& driver, const ad::Var& cond = {}) const {
    const Shape& ds = driver.shape();
    if (ds.size() != 4 || ds[3] != in_channels_) {
      throw ContractError(name_ + ": driver must be NHWC with " + std::to_string(in_channels_) + " channels, got " +
                          to_string(ds));
    }
    detail::check_condition(cond_, cond, ds, name_);
    ad::Var h = ad::relu(ad::conv2d(driver, w1_, b1_));
    h = ad::relu(ad::conv2d(h, w2_, b2_));
    ad::Var o = ad::conv2d(h, w3_, b3_);
    if (cond_.enabled()) o = ad::add(o, detail::condition_term(cond_, cond, v_, ds[1], ds[2]));
    return o;
  }

  ScaleShift apply(const ad::Var& driver, const ad::Var& cond = {}) const {
    auto halves = ad::channel_split(raw_output(driver, cond), {partition_, partition_});
    ad::Var log_scale = ad::add(ad::mul(ad::tanh(halves[0]), alpha_), beta_);
    return {ad::exp(log_scale), log_scale, halves[1]};
  }

  ParamList parameters() const {
    ParamList p{{w1_.name(), w1_}, {b1_.name(), b1_}, {w2_.name(), w2_}, {b2_.name(), b2_},
                {w3_.name(), w3_}, {b3_.name(), b3_}, {alpha_.name(), alpha_}, {beta_.name(), beta_}};
    if (v_.defined()) p.push_back({v_.name(), v_});
    return p;
  }

  const ad::Var& alpha() const { return alpha_; }
  const ad::Var& beta() const { return beta_; }
  const ad::Var& cond_weight() const { return v_; }

 private:
  std::size_t in_channels_, hidden_, partition_;
  CondSpec cond_;
  bool flat_;
  std::string name_;
  ad::Var w1_, b1_, w2_, b2_, w3_, b3_, alpha_, beta_, v_;
};

}  // namespace dlf
