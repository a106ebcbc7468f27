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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dlf/errors.hpp"
#include "dlf/parameter.hpp"

namespace dlf {

struct AdamConfig {
  double lr = 0.005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t warmup = 500;
  double l2_inv1x1 = 0.0;  // 1.5e-8 when enabled
  double clip_norm = 50.0;  // global gradient norm; 0 disables
};

struct StepInfo {
  double grad_norm = 0.0;  // before clipping
  double lr = 0.0;
  bool clipped = false;
};

class Adam {
 public:
  Adam(const ParamList& params, AdamConfig cfg) : params_(params), cfg_(cfg) {
    if (!(cfg.lr >= 0.0) || !(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0) ||
        !(cfg.eps > 0.0) || !(cfg.l2_inv1x1 >= 0.0) || !(cfg.clip_norm >= 0.0)) {
      throw ConfigError("invalid optimizer settings");
    }
    for (const auto& p : params_) {
      m_.emplace_back(p.var.shape());
      v_.emplace_back(p.var.shape());
    }
  }

  const AdamConfig& config() const { return cfg_; }
  std::uint64_t step_count() const { return step_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }

  // lr * min(1, t / warmup) where t counts completed updates.
  double lr_at(std::uint64_t t) const {
    if (cfg_.warmup == 0) return cfg_.lr;
    return cfg_.lr * std::min(1.0, static_cast<double>(t) / static_cast<double>(cfg_.warmup));
  }

  // Consumes the gradients currently stored on the parameters.
  StepInfo step() {
    std::vector<Tensor> grads;
    grads.reserve(params_.size());
    double sq = 0.0;
    for (const auto& p : params_) {
      Tensor g = p.var.has_grad() ? p.var.grad() : Tensor(p.var.shape());
      for (double v : g.data()) {
        if (!std::isfinite(v)) throw NumericError("non-finite gradient in parameter " + p.name);
        sq += v * v;
      }
      grads.push_back(std::move(g));
    }
    StepInfo info;
    info.grad_norm = std::sqrt(sq);
    info.lr = lr_at(step_);
    if (cfg_.clip_norm > 0.0 && info.grad_norm > cfg_.clip_norm) {
      info.clipped = true;
      const double f = cfg_.clip_norm / info.grad_norm;
      for (auto& g : grads) g *= f;
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& w = params_[i].var.mutable_value();
      Tensor& g = grads[i];
      if (params_[i].role == ParamRole::inv1x1_weight && cfg_.l2_inv1x1 > 0.0) {
        for (std::size_t q = 0; q < g.size(); ++q) g[q] += 2.0 * cfg_.l2_inv1x1 * w[q];
      }
      Tensor& m = m_[i];
      Tensor& v = v_[i];
      for (std::size_t q = 0; q < g.size(); ++q) {
        m[q] = cfg_.beta1 * m[q] + (1.0 - cfg_.beta1) * g[q];
        v[q] = cfg_.beta2 * v[q] + (1.0 - cfg_.beta2) * g[q] * g[q];
        w[q] -= info.lr * (m[q] / bc1) / (std::sqrt(v[q] / bc2) + cfg_.eps);
      }
    }
    return info;
  }

  // Checkpoint restore; shapes must match the parameters.
  void restore(std::uint64_t step, std::vector<Tensor> m, std::vector<Tensor> v) {
    if (m.size() != params_.size() || v.size() != params_.size()) {
      throw DataError("optimizer state has " + std::to_string(m.size()) + " moments for " +
                      std::to_string(params_.size()) + " parameters");
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (m[i].shape() != params_[i].var.shape() || v[i].shape() != params_[i].var.shape()) {
        throw DataError("optimizer moment shape mismatch for " + params_[i].name);
      }
    }
    step_ = step;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  ParamList params_;
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::uint64_t step_ = 0;
};

}  // namespace dlf
