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

// Test-only brute-force oracles. Nothing here calls an analytic gradient or
// log-determinant; they only evaluate plain scalar functions.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "dlf/tensor.hpp"

namespace dlf::testing {

// Central finite difference of f with respect to every entry of `t`, which f
// must read through the same storage.
inline Tensor fd_gradient(const std::function<double()>& f, Tensor& t, double step = 1e-5) {
  Tensor g(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double orig = t[i];
    t[i] = orig + step;
    const double up = f();
    t[i] = orig - step;
    const double down = f();
    t[i] = orig;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

// max over entries of |a-b| / max(|a|,|b|), ignoring entries where |a-b| <= abs_floor.
inline double max_rel_error(const Tensor& a, const Tensor& b, double abs_floor = 1e-7) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = std::abs(a[i] - b[i]);
    if (diff <= abs_floor) continue;
    worst = std::max(worst, diff / std::max(std::abs(a[i]), std::abs(b[i])));
  }
  return worst;
}

inline Tensor random_normal(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = std::normal_distribution<double>(0.0, sd)(rng);
  return t;
}

// Determinant by Gaussian elimination with full pivoting, independent of the
// library's partial-pivoting LU.
inline double det_full_pivot(std::vector<double> a, std::size_t n) {
  double det = 1.0;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t pr = k, pc = k;
    for (std::size_t r = k; r < n; ++r) {
      for (std::size_t c = k; c < n; ++c) {
        if (std::abs(a[r * n + c]) > std::abs(a[pr * n + pc])) {
          pr = r;
          pc = c;
        }
      }
    }
    if (a[pr * n + pc] == 0.0) return 0.0;
    if (pr != k) {
      for (std::size_t c = 0; c < n; ++c) std::swap(a[k * n + c], a[pr * n + c]);
      det = -det;
    }
    if (pc != k) {
      for (std::size_t r = 0; r < n; ++r) std::swap(a[r * n + k], a[r * n + pc]);
      det = -det;
    }
    det *= a[k * n + k];
    for (std::size_t r = k + 1; r < n; ++r) {
      const double f = a[r * n + k] / a[k * n + k];
      for (std::size_t c = k; c < n; ++c) a[r * n + c] -= f * a[k * n + c];
    }
  }
  return det;
}

}  // namespace dlf::testing
