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

// Brute-force oracles for the analytic parts of the library.
//
// The Jacobian oracle only ever calls the plain forward map and takes the
// determinant with Eigen, so it shares no code with the layers' log-det paths
// or with the LU used by the 1x1 convolution. The gradient oracle perturbs
// parameter storage and re-evaluates the loss with graph recording off.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dlf/autodiff.hpp"
#include "dlf/layers.hpp"
#include "dlf/model.hpp"
#include "dlf/parameter.hpp"

namespace dlf::verify {

using VectorMap = std::function<std::vector<double>(const std::vector<double>&)>;

// Row-major dense matrix.
struct Matrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;

  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

class OracleError : public Error {
 public:
  explicit OracleError(const std::string& what) : Error("oracle error: " + what) {}
};

// J(i, j) = d f_i / d x_j by central differences, one column per input coordinate.
inline Matrix numeric_jacobian(const VectorMap& f, const std::vector<double>& x, double step = 1e-5) {
  const std::size_t out = f(x).size();
  Matrix jac(out, x.size());
  std::vector<double> xp = x;
  auto column = [&](std::size_t j, double h) {
    xp[j] = x[j] + h;
    const std::vector<double> up = f(xp);
    xp[j] = x[j] - h;
    const std::vector<double> down = f(xp);
    xp[j] = x[j];
    if (up.size() != out || down.size() != out) throw OracleError("map changed output dimension");
    Eigen::VectorXd d(static_cast<Eigen::Index>(out));
    for (std::size_t i = 0; i < out; ++i) {
      d(static_cast<Eigen::Index>(i)) = (up[i] - down[i]) / (2.0 * h);
      if (!std::isfinite(d(static_cast<Eigen::Index>(i)))) {
        throw OracleError("non-finite output while differentiating column " + std::to_string(j));
      }
    }
    return d;
  };
  // Central differences at h, h/10 and h/100. Smooth maps make neighbouring
  // estimates agree to ~1e-10; a ReLU kink inside a stencil breaks that, so
  // fall through to the next finer step until two agree.
  for (std::size_t j = 0; j < x.size(); ++j) {
    const Eigen::VectorXd a = column(j, step), b = column(j, step / 10.0);
    const double tol = 1e-6 * std::max(1.0, a.lpNorm<Eigen::Infinity>());
    Eigen::VectorXd best = a;
    if ((a - b).lpNorm<Eigen::Infinity>() > tol) {
      const Eigen::VectorXd c = column(j, step / 100.0);
      best = (b - c).lpNorm<Eigen::Infinity>() <= tol ? b : c;
    }
    for (std::size_t i = 0; i < out; ++i) jac(i, j) = best(static_cast<Eigen::Index>(i));
  }
  return jac;
}

inline double log_abs_det(const Matrix& m) {
  if (m.rows != m.cols) throw OracleError("determinant of a non-square Jacobian");
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> em(m.data.data(),
                                                                                              static_cast<Eigen::Index>(m.rows),
                                                                                              static_cast<Eigen::Index>(m.cols));
  const Eigen::FullPivLU<Eigen::MatrixXd> lu(em);
  if (!lu.isInvertible()) throw OracleError("numerically singular Jacobian");
  const auto& u = lu.matrixLU();
  double s = 0.0;
  for (Eigen::Index i = 0; i < u.rows(); ++i) s += std::log(std::abs(u(i, i)));
  return s;
}

struct JacobianReport {
  std::string label;
  std::uint64_t seed = 0;
  std::size_t dim = 0;
  double numeric_logdet = 0.0;
  double analytic_logdet = 0.0;
  double discrepancy = 0.0;
  // Largest |J_ij| outside the block lower-triangular pattern (diagonal blocks
  // themselves diagonal); only filled for checks that request the pattern.
  std::optional<double> max_off_pattern;

  bool passed(double tol = 1e-4, double pattern_tol = 1e-6) const {
    return discrepancy <= tol && (!max_off_pattern || *max_off_pattern <= pattern_tol);
  }

  std::string summary() const {
    std::ostringstream os;
    os.precision(6);
    os << label << " seed=" << seed << " D=" << dim << " numeric=" << numeric_logdet << " analytic=" << analytic_logdet
       << " |diff|=" << discrepancy;
    if (max_off_pattern) os << " off_pattern=" << *max_off_pattern;
    return os.str();
  }
};

// Max |J_ij| over entries that must vanish when the Jacobian is block lower
// triangular in partition order with diagonal blocks on the diagonal.
inline double max_off_triangular(const Matrix& jac, std::size_t partition_size) {
  double worst = 0.0;
  for (std::size_t i = 0; i < jac.rows; ++i) {
    for (std::size_t j = 0; j < jac.cols; ++j) {
      const std::size_t pi = i / partition_size, pj = j / partition_size;
      const bool allowed = pj < pi || i == j;
      if (!allowed) worst = std::max(worst, std::abs(jac(i, j)));
    }
  }
  return worst;
}

namespace detail {

inline Tensor as_batch(const std::vector<double>& v, const Shape& sample_shape) {
  Shape s{1};
  s.insert(s.end(), sample_shape.begin(), sample_shape.end());
  return Tensor(s, v);
}

}  // namespace detail

// Compares one layer's reported log-det with log|det| of its numeric Jacobian
// at a single sample x of shape [1, H, W, C] with H*W*C <= 12.
inline JacobianReport check_layer_logdet(FlowLayer& layer, const Tensor& x, const ad::Var& cond = {},
                                         std::optional<std::size_t> triangular_partition = std::nullopt,
                                         double step = 1e-5) {
  if (x.rank() != 4 || x.dim(0) != 1) throw ContractError("check_layer_logdet: x must be a single NHWC sample");
  const Shape sample{x.dim(1), x.dim(2), x.dim(3)};
  ad::NoGradGuard guard;
  auto f = [&](const std::vector<double>& v) {
    return layer.forward(ad::constant(detail::as_batch(v, sample)), cond).y.value().values();
  };
  const Matrix jac = numeric_jacobian(f, x.values(), step);
  JacobianReport r;
  r.label = layer.name();
  r.dim = x.size();
  r.numeric_logdet = log_abs_det(jac);
  r.analytic_logdet = layer.forward(ad::constant(x), cond).logdet.value()[0];
  r.discrepancy = std::abs(r.numeric_logdet - r.analytic_logdet);
  if (triangular_partition) r.max_off_pattern = max_off_triangular(jac, *triangular_partition);
  return r;
}

// Same comparison for the full model's encode map (flat mode).
inline JacobianReport check_model_logdet(Model& model, const Tensor& x, const std::optional<Tensor>& cond = std::nullopt,
                                         double step = 1e-5) {
  if (x.rank() != 4 || x.dim(0) != 1) throw ContractError("check_model_logdet: x must be a single NHWC sample");
  const Shape sample{x.dim(1), x.dim(2), x.dim(3)};
  auto f = [&](const std::vector<double>& v) { return model.encode(detail::as_batch(v, sample), cond).values(); };
  const Matrix jac = numeric_jacobian(f, x.values(), step);
  JacobianReport r;
  r.label = "model";
  r.dim = x.size();
  r.numeric_logdet = log_abs_det(jac);
  {
    ad::NoGradGuard guard;
    r.analytic_logdet = model.forward(ad::constant(x), cond ? ad::constant(*cond) : ad::Var()).logdet.value()[0];
  }
  r.discrepancy = std::abs(r.numeric_logdet - r.analytic_logdet);
  return r;
}

struct GradientCheckOptions {
  double rel_tol = 1e-4;
  double abs_floor = 1e-7;
  std::size_t min_coordinates = 200;
  double step = 1e-5;
  std::uint64_t seed = 0;
};

struct CoordinateCheck {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  double error_ratio = 0.0;  // min(|diff| / abs_floor, rel_error / rel_tol); <= 1 passes
  bool passed = true;
};

struct GradientReport {
  std::size_t checked = 0;
  std::size_t tensors_covered = 0;
  std::size_t failures = 0;
  CoordinateCheck worst;

  bool passed() const { return failures == 0; }
  std::string summary() const {
    std::ostringstream os;
    os.precision(10);
    os << "checked=" << checked << " tensors=" << tensors_covered << " failures=" << failures << " worst=" << worst.param
       << "[" << worst.index << "] analytic=" << worst.analytic << " numeric=" << worst.numeric
       << " rel=" << worst.rel_error << " ratio=" << worst.error_ratio;
    return os.str();
  }
};

// Central-difference check of d(loss)/d(param) on a random subsample of
// coordinates that touches every parameter tensor. `loss` must rebuild the
// scalar loss from the current parameter values on every call.
inline GradientReport check_gradients(const ParamList& params, const std::function<ad::Var()>& loss,
                                      const GradientCheckOptions& opt = {}) {
  zero_grad(params);
  ad::backward(loss());
  std::mt19937_64 rng(opt.seed);
  std::size_t total = count_scalars(params);
  // Pick at least one coordinate per tensor, then top up to min_coordinates.
  std::vector<std::vector<std::size_t>> picks(params.size());
  const std::size_t per_tensor =
      std::max<std::size_t>(1, (opt.min_coordinates + params.size() - 1) / std::max<std::size_t>(1, params.size()));
  std::size_t chosen = 0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    const std::size_t size = params[t].var.value().size();
    std::vector<std::size_t> idx(size);
    for (std::size_t i = 0; i < size; ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(size, per_tensor));
    chosen += idx.size();
    picks[t] = std::move(idx);
  }
  while (chosen < std::min(opt.min_coordinates, total)) {
    const std::size_t t = std::uniform_int_distribution<std::size_t>(0, params.size() - 1)(rng);
    const std::size_t size = params[t].var.value().size();
    if (picks[t].size() >= size) continue;
    const std::size_t i = std::uniform_int_distribution<std::size_t>(0, size - 1)(rng);
    if (std::find(picks[t].begin(), picks[t].end(), i) != picks[t].end()) continue;
    picks[t].push_back(i);
    ++chosen;
  }

  GradientReport report;
  ad::NoGradGuard guard;
  for (std::size_t t = 0; t < params.size(); ++t) {
    const NamedParam& p = params[t];
    if (!picks[t].empty()) ++report.tensors_covered;
    for (std::size_t i : picks[t]) {
      Tensor& value = p.var.mutable_value();
      const double orig = value[i];
      auto central = [&](double h) {
        value[i] = orig + h;
        const double up = loss().value().item();
        value[i] = orig - h;
        const double down = loss().value().item();
        value[i] = orig;
        return (up - down) / (2.0 * h);
      };
      CoordinateCheck c;
      c.param = p.name;
      c.index = i;
      c.analytic = p.var.has_grad() ? p.var.grad()[i] : 0.0;
      auto score = [&](double numeric) {
        c.numeric = numeric;
        const double diff = std::abs(c.analytic - c.numeric);
        const double scale = std::max(std::abs(c.analytic), std::abs(c.numeric));
        c.rel_error = scale > 0.0 ? diff / scale : 0.0;
        c.error_ratio = std::min(diff / opt.abs_floor, c.rel_error / opt.rel_tol);
        c.passed = c.error_ratio <= 1.0;
      };
      score(central(opt.step));
      // A ReLU kink inside the stencil breaks the central difference; a
      // 100x smaller step moves it out almost surely.
      if (!c.passed) score(central(opt.step / 100.0));
      ++report.checked;
      if (!c.passed) ++report.failures;
      const bool worse = (!c.passed && report.worst.passed) ||
                         (c.passed == report.worst.passed && c.error_ratio > report.worst.error_ratio);
      if (report.checked == 1 || worse) report.worst = c;
    }
  }
  zero_grad(params);
  return report;
}

// Gradient check of a model's mean NLL on a fixed batch.
inline GradientReport check_model_gradients(Model& model, const Tensor& batch,
                                            const std::optional<Tensor>& cond = std::nullopt,
                                            const GradientCheckOptions& opt = {}) {
  return check_gradients(model.parameters(), [&] { return model.loss(batch, cond); }, opt);
}

struct RoundtripReport {
  std::string label;
  std::uint64_t seed = 0;
  double max_layer_error = 0.0;  // worst |inverse(forward(x)) - x| over layers
  double max_model_error = 0.0;  // |decode(encode(x)) - x|
  double max_latent_error = 0.0;  // |encode(decode(z)) - z|

  bool passed(double layer_tol = 1e-8, double model_tol = 1e-6) const {
    return max_layer_error <= layer_tol && max_model_error <= model_tol && max_latent_error <= model_tol;
  }
};

// Round-trips every layer at its actual position in the stack, then the whole model.
inline RoundtripReport check_roundtrip(Model& model, const Tensor& x, const std::optional<Tensor>& cond,
                                       std::string label = {}, std::uint64_t seed = 0) {
  RoundtripReport r;
  r.label = std::move(label);
  r.seed = seed;
  ad::NoGradGuard guard;
  const ad::Var c = cond ? ad::constant(*cond) : ad::Var();
  Tensor h = x;
  for (const auto& layer : model.layers()) {
    const ad::Var lc = layer->kind() == LayerKind::dynlin ? c : ad::Var();
    LayerOutput out = layer->forward(ad::constant(h), lc);
    Tensor back = layer->kind() == LayerKind::split
                      ? static_cast<const Split&>(*layer).merge(out.y.value(), out.factored.value())
                      : layer->inverse(out.y.value(), lc);
    r.max_layer_error = std::max(r.max_layer_error, max_abs_diff(back, h));
    h = out.y.value();
  }
  const Tensor z = model.encode(x, cond);
  r.max_model_error = max_abs_diff(model.decode(z, cond), x);
  r.max_latent_error = max_abs_diff(model.encode(model.decode(z, cond), cond), z);
  return r;
}

}  // namespace dlf::verify
