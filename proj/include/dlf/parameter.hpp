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
#include <random>
#include <string>
#include <vector>

#include "dlf/autodiff.hpp"

namespace dlf {

enum class ParamRole {
  generic,
  inv1x1_weight,  // receives the optional L2 penalty
};

struct NamedParam {
  std::string name;
  ad::Var var;
  ParamRole role = ParamRole::generic;
};

using ParamList = std::vector<NamedParam>;

inline void append(ParamList& into, const ParamList& from) { into.insert(into.end(), from.begin(), from.end()); }

inline std::size_t count_scalars(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.var.value().size();
  return n;
}

inline void zero_grad(const ParamList& params) {
  for (const auto& p : params) p.var.zero_grad();
}

// Fan-in scaled Gaussian (He) initialization.
template <class Rng>
Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.data()) v = std::normal_distribution<double>(0.0, sd)(rng);
  return t;
}

// Adds N(0, sd^2) noise to every parameter. Used to move a freshly initialized
// (identity) model to a generic point for oracle checks.
template <class Rng>
void perturb(const ParamList& params, Rng& rng, double sd) {
  for (const auto& p : params) {
    for (double& v : p.var.mutable_value().data()) v += std::normal_distribution<double>(0.0, sd)(rng);
  }
}

}  // namespace dlf
