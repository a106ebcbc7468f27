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

// Small dense square-matrix kernels used by the invertible 1x1 convolution.
// Matrices are row-major n x n spans.

#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "dlf/errors.hpp"

namespace dlf::linalg {

// Matrices with |det| below this are treated as singular.
inline constexpr double kSingularDetThreshold = 1e-12;

// PA = LU with partial pivoting; L has a unit diagonal and shares storage with U.
class LuDecomposition {
 public:
  LuDecomposition(std::span<const double> a, std::size_t n) : n_(n), lu_(a.begin(), a.end()), perm_(n) {
    if (a.size() != n * n) throw ContractError("LU: matrix storage does not match n*n");
    for (std::size_t i = 0; i < n; ++i) perm_[i] = i;
    for (std::size_t k = 0; k < n; ++k) {
      std::size_t pivot = k;
      double best = std::abs(lu_[k * n + k]);
      for (std::size_t r = k + 1; r < n; ++r) {
        if (std::abs(lu_[r * n + k]) > best) {
          best = std::abs(lu_[r * n + k]);
          pivot = r;
        }
      }
      if (pivot != k) {
        for (std::size_t c = 0; c < n; ++c) std::swap(lu_[k * n + c], lu_[pivot * n + c]);
        std::swap(perm_[k], perm_[pivot]);
        sign_ = -sign_;
      }
      const double d = lu_[k * n + k];
      if (d == 0.0) {
        exact_zero_pivot_ = true;
        continue;
      }
      for (std::size_t r = k + 1; r < n; ++r) {
        const double f = lu_[r * n + k] / d;
        lu_[r * n + k] = f;
        for (std::size_t c = k + 1; c < n; ++c) lu_[r * n + c] -= f * lu_[k * n + c];
      }
    }
  }

  std::size_t size() const { return n_; }

  double log_abs_det() const {
    if (exact_zero_pivot_) return -INFINITY;
    double s = 0.0;
    for (std::size_t i = 0; i < n_; ++i) s += std::log(std::abs(lu_[i * n_ + i]));
    return s;
  }

  double det() const {
    if (exact_zero_pivot_) return 0.0;
    double d = sign_;
    for (std::size_t i = 0; i < n_; ++i) d *= lu_[i * n_ + i];
    return d;
  }

  bool singular() const { return exact_zero_pivot_ || log_abs_det() < std::log(kSingularDetThreshold); }

  // Solves A x = b in place.
  void solve_in_place(std::span<double> b) const {
    if (exact_zero_pivot_) throw DomainError("LU solve on a singular matrix");
    std::vector<double> x(n_);
    for (std::size_t i = 0; i < n_; ++i) x[i] = b[perm_[i]];
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t j = 0; j < i; ++j) x[i] -= lu_[i * n_ + j] * x[j];
    }
    for (std::size_t i = n_; i-- > 0;) {
      for (std::size_t j = i + 1; j < n_; ++j) x[i] -= lu_[i * n_ + j] * x[j];
      x[i] /= lu_[i * n_ + i];
    }
    std::copy(x.begin(), x.end(), b.begin());
  }

  // Row-major A^{-1}.
  std::vector<double> inverse() const {
    std::vector<double> inv(n_ * n_, 0.0);
    std::vector<double> col(n_);
    for (std::size_t j = 0; j < n_; ++j) {
      std::fill(col.begin(), col.end(), 0.0);
      col[j] = 1.0;
      solve_in_place(col);
      for (std::size_t i = 0; i < n_; ++i) inv[i * n_ + j] = col[i];
    }
    return inv;
  }

 private:
  std::size_t n_;
  std::vector<double> lu_;
  std::vector<std::size_t> perm_;
  double sign_ = 1.0;
  bool exact_zero_pivot_ = false;
};

// Random orthogonal n x n matrix: Gram-Schmidt on a Gaussian matrix. Keeping the
// Gram-Schmidt basis as-is gives R a positive diagonal, which is the usual sign
// correction that makes the result Haar-distributed.
template <class Rng>
std::vector<double> random_orthogonal(std::size_t n, Rng& rng) {
  std::vector<double> q(n * n);
  for (;;) {
    for (double& v : q) v = std::normal_distribution<double>(0.0, 1.0)(rng);
    bool ok = true;
    // Orthonormalize columns (modified Gram-Schmidt, two passes for stability).
    for (std::size_t j = 0; j < n && ok; ++j) {
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t k = 0; k < j; ++k) {
          double dot = 0.0;
          for (std::size_t i = 0; i < n; ++i) dot += q[i * n + k] * q[i * n + j];
          for (std::size_t i = 0; i < n; ++i) q[i * n + j] -= dot * q[i * n + k];
        }
      }
      double norm = 0.0;
      for (std::size_t i = 0; i < n; ++i) norm += q[i * n + j] * q[i * n + j];
      norm = std::sqrt(norm);
      if (norm < 1e-10) {
        ok = false;
        break;
      }
      for (std::size_t i = 0; i < n; ++i) q[i * n + j] /= norm;
    }
    if (ok) return q;
  }
}

}  // namespace dlf::linalg
